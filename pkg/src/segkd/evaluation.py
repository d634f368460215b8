"""Dice-coefficient evaluation of a frozen encoder + decoder pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import DatasetManifest, preprocess
from .errors import EvalError
from .losses import dice_metric
from .models.common import spatial_resize, weights_fingerprint
from .models.prompts import POINT_POLICY, prompts_for_mask


@dataclass
class EvalResult:
    """Per-dataset dice statistics for one model.

    mean/std are recomputable from per_sample_dice (std is the population
    standard deviation, ddof=0).
    """

    dataset_name: str
    per_sample_dice: list[float]
    mean_dice: float
    std_dice: float
    n_samples: int
    prompt_policy: str
    threshold: float
    model_fingerprint: str
    sample_ids: list[str] = field(default_factory=list)

    @classmethod
    def from_scores(cls, dataset_name: str, sample_ids: list[str], scores: list[float],
                    prompt_policy: str, threshold: float,
                    model_fingerprint: str) -> "EvalResult":
        arr = np.asarray(scores, dtype=np.float64)
        return cls(
            dataset_name=dataset_name,
            per_sample_dice=[float(s) for s in scores],
            mean_dice=float(arr.mean()),
            std_dice=float(arr.std(ddof=0)),
            n_samples=len(scores),
            prompt_policy=prompt_policy,
            threshold=threshold,
            model_fingerprint=model_fingerprint,
            sample_ids=list(sample_ids),
        )

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(**d)


def evaluate(manifest: DatasetManifest, encoder: nn.Module, decoder: nn.Module,
             prompt_policy: str = POINT_POLICY, threshold: float = 0.5,
             split: str = "test") -> EvalResult:
    """Per-sample dice over one split; deterministic, mutates nothing.

    Records with an empty ground-truth mask are scored against an empty
    prediction (dice 1.0 by the empty-vs-empty convention) without running
    the decoder, since no prompt can be derived.
    """
    records = manifest.split_records(split)
    if not records:
        raise EvalError(f"{split} split of {manifest.name!r} is empty")
    encoder.eval()
    decoder.eval()
    fingerprint = weights_fingerprint(encoder) + ":" + weights_fingerprint(decoder)

    ids, scores = [], []
    with torch.no_grad():
        for record in records:
            image, mask = preprocess(record, manifest.preprocessing)
            prompts = prompts_for_mask(mask, prompt_policy)
            if prompts is None:
                pred = torch.zeros_like(mask).unsqueeze(0)
            else:
                embedding = encoder(image.unsqueeze(0))
                pred = decoder(embedding, [prompts])
                if pred.shape[-2:] != mask.shape[-2:]:
                    pred = spatial_resize(pred, tuple(mask.shape[-2:]), "bilinear")
                    pred = pred.clamp(0.0, 1.0)
            ids.append(record.id)
            scores.append(dice_metric(pred, mask.unsqueeze(0), threshold))
    return EvalResult.from_scores(
        manifest.name, ids, scores, prompt_policy, threshold, fingerprint
    )
