"""Two-phase training engine.

Phase 1 (``encoder_distill``) fits the student encoder to precomputed or live
teacher embeddings with the combined MSE + perceptual objective. Phase 2
(``decoder_finetune``) freezes the encoder and fits the prompt decoder with
soft dice loss against ground-truth masks.

Both phases share the same epoch state machine: Adam with weight decay,
validation after every epoch, reduce-on-plateau by ``plateau_factor``, early
stopping on stalled validation loss, best-validation weight selection, and
per-epoch ``last`` checkpoints that allow bit-exact resume. Batch order is a
pure function of (seed, epoch), so a resumed run replays the interrupted one
step for step.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch
from torch import Tensor, nn

from .checkpoints import (
    Checkpoint,
    capture_rng_state,
    load_checkpoint,
    restore_rng_state,
    save_checkpoint,
)
from .data import DatasetManifest, SampleRecord, load_cached_embedding, preprocess
from .errors import ConfigError, NumericsError, ShapeError
from .losses import LossValue, combined_loss, dice_loss
from .models.common import spatial_resize
from .models.prompts import POINT_POLICY, prompts_for_mask
from .seeding import derive_seed

PHASE_ENCODER = "encoder_distill"
PHASE_DECODER = "decoder_finetune"
LOSS_MODE_VGG = "vgg_on_embeddings"
LOSS_MODE_DIRECT = "direct_feature_match"


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 1e-3


@dataclass
class SchedulerConfig:
    plateau_factor: float = 0.1
    patience_epochs: int = 5
    min_lr: float = 1e-7


@dataclass
class EarlyStopConfig:
    patience_epochs: int = 10
    min_delta: float = 1e-4  # shared improvement threshold (also the scheduler's)


@dataclass
class TrainConfig:
    phase: str = PHASE_ENCODER
    max_epochs: int = 100
    batch_size: int = 16
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    loss_mode: str = LOSS_MODE_VGG  # phase 1 only
    mse_weight: float = 1.0
    perceptual_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.phase not in (PHASE_ENCODER, PHASE_DECODER):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.loss_mode not in (LOSS_MODE_VGG, LOSS_MODE_DIRECT):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        if not 0 < self.scheduler.plateau_factor < 1:
            raise ConfigError("plateau_factor must be in (0, 1)")
        if self.optimizer.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["optimizer"] = OptimizerConfig(**d.get("optimizer", {}))
        d["scheduler"] = SchedulerConfig(**d.get("scheduler", {}))
        d["early_stop"] = EarlyStopConfig(**d.get("early_stop", {}))
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    plateau_bad_epochs: int = 0
    current_lr: float = 0.0
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(**d)


def scheduler_step(state: TrainState, val_loss: float, config: TrainConfig) -> TrainState:
    """Epoch-end transition: fold one validation loss into the state.

    Improvement means val_loss < best - min_delta. On improvement both
    patience counters reset; otherwise they advance, and once the plateau
    counter reaches the scheduler patience the learning rate is multiplied by
    plateau_factor (floored at min_lr) and the plateau counter resets.
    best_val_loss tracks the raw minimum regardless of min_delta.
    """
    improved = val_loss < state.best_val_loss - config.early_stop.min_delta
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.best_epoch = state.epoch
    if improved:
        state.epochs_since_improvement = 0
        state.plateau_bad_epochs = 0
    else:
        state.epochs_since_improvement += 1
        state.plateau_bad_epochs += 1
        if state.plateau_bad_epochs >= config.scheduler.patience_epochs:
            state.current_lr = max(
                state.current_lr * config.scheduler.plateau_factor,
                config.scheduler.min_lr,
            )
            state.plateau_bad_epochs = 0
    return state


def early_stop_check(state: TrainState, config: TrainConfig) -> bool:
    """True once validation has not improved for patience_epochs epochs."""
    return state.epochs_since_improvement >= config.early_stop.patience_epochs


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[Tensor]:
    """Shuffled index batches for one epoch; final partial batch included.

    Pure function of (n, batch_size, seed, epoch): resuming at epoch k replays
    the exact batch order an uninterrupted run would have used.
    """
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, epoch))
    perm = torch.randperm(n, generator=gen)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _stack_images(records: list[SampleRecord], manifest: DatasetManifest,
                  dtype: torch.dtype) -> tuple[Tensor, Tensor]:
    images, masks = [], []
    for r in records:
        img, mask = preprocess(r, manifest.preprocessing)
        images.append(img.to(dtype))
        masks.append(mask.to(dtype))
    return torch.stack(images), torch.stack(masks)


def _teacher_targets(records: list[SampleRecord], images: Tensor,
                     teacher: nn.Module | None, dtype: torch.dtype) -> Tensor:
    if all(r.cached_embedding_path for r in records):
        embs = [load_cached_embedding(r.cached_embedding_path).to(dtype) for r in records]
        return torch.stack(embs)
    if teacher is None:
        missing = [r.id for r in records if not r.cached_embedding_path]
        raise ConfigError(
            "no teacher module provided and these records have no cached "
            f"embedding: {', '.join(missing[:10])}"
        )
    teacher.eval()
    with torch.no_grad():
        return torch.cat(
            [teacher(images[i : i + 8]).to(dtype) for i in range(0, len(images), 8)]
        )


def _write_history(out_dir: Path, history: list[dict]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]),
                             repr(row["val_loss"]), repr(row["lr"])])


def _fit(
    config: TrainConfig,
    trainable: nn.Module,
    train_epoch: Callable[[torch.optim.Optimizer, int], float],
    validate: Callable[[], float],
    checkpoint_weights: Callable[[], dict[str, dict]],
    load_weights: Callable[[dict[str, dict]], None],
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainState:
    """Shared epoch loop; returns the final state with trainable at best-val weights."""
    if config.optimizer.name != "adam":
        raise ConfigError(f"unsupported optimizer {config.optimizer.name!r}")
    optimizer = torch.optim.Adam(
        (p for p in trainable.parameters() if p.requires_grad),
        lr=config.optimizer.lr,
        weight_decay=config.optimizer.weight_decay,
    )
    state = TrainState(current_lr=config.optimizer.lr)
    best_trainable = copy.deepcopy(trainable.state_dict())

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.phase != config.phase:
            raise ConfigError(
                f"checkpoint phase {ckpt.phase!r} does not match config phase {config.phase!r}"
            )
        load_weights(ckpt.weights)
        best_trainable = {k: v.clone() for k, v in ckpt.best_weights["trainable"].items()}
        optimizer.load_state_dict(ckpt.optimizer_state)
        state = TrainState.from_dict(ckpt.train_state)
        if state.rng_state:
            restore_rng_state(state.rng_state)

    out_path = Path(out_dir) if out_dir is not None else None

    def _save(tag: str) -> None:
        if out_path is None:
            return
        state.rng_state = capture_rng_state()
        save_checkpoint(
            out_path / f"checkpoint_{tag}",
            Checkpoint(
                phase=config.phase,
                config=config.to_dict(),
                train_state=state.to_dict(),
                weights=checkpoint_weights(),
                best_weights={"trainable": best_trainable},
                optimizer_state=optimizer.state_dict(),
                rng_state=state.rng_state,
            ),
        )

    for epoch in range(state.epoch + 1, config.max_epochs + 1):
        for group in optimizer.param_groups:
            group["lr"] = state.current_lr
        train_loss = train_epoch(optimizer, epoch)
        val_loss = validate()
        state.epoch = epoch
        state.history.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
             "lr": state.current_lr}
        )
        improved_strictly = val_loss < state.best_val_loss
        scheduler_step(state, val_loss, config)
        if improved_strictly:
            best_trainable = copy.deepcopy(trainable.state_dict())
        if out_path is not None:
            _write_history(out_path, state.history)
            _save("last")
        if early_stop_check(state, config):
            break

    trainable.load_state_dict(best_trainable)
    _save("best")
    return state


def distill_encoder(
    config: TrainConfig,
    manifest: DatasetManifest,
    student: nn.Module,
    teacher: nn.Module | None = None,
    extractor: nn.Module | None = None,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> tuple[nn.Module, TrainState]:
    """Phase 1: fit the student encoder to teacher embeddings.

    Teacher targets come from the manifest's embedding cache when present,
    otherwise from the live ``teacher`` module (frozen, no-grad). With
    loss_mode=vgg_on_embeddings the perceptual term runs both embeddings
    through the frozen ``extractor``; with direct_feature_match it compares
    the embeddings themselves. Returns the student at its best-validation
    weights plus the final train state.
    """
    if config.phase != PHASE_ENCODER:
        raise ConfigError(f"distill_encoder needs phase={PHASE_ENCODER!r}")
    if config.loss_mode == LOSS_MODE_VGG and extractor is None:
        raise ConfigError("loss_mode=vgg_on_embeddings requires a perceptual extractor")
    train_records = manifest.split_records("train")
    val_records = manifest.split_records("val")
    if not train_records:
        raise ConfigError("train split is empty")
    if not val_records:
        raise ConfigError("val split is empty (needed for scheduling and early stopping)")

    dtype = _model_dtype(student)
    train_images, _ = _stack_images(train_records, manifest, dtype)
    val_images, _ = _stack_images(val_records, manifest, dtype)
    train_targets = _teacher_targets(train_records, train_images, teacher, dtype)
    val_targets = _teacher_targets(val_records, val_images, teacher, dtype)

    def batch_loss(targets: Tensor, output: Tensor, epoch: int, batch: int) -> LossValue:
        if output.shape != targets.shape:
            raise ShapeError(
                f"student output shape {tuple(output.shape)} does not match "
                f"teacher embedding shape {tuple(targets.shape)}"
            )
        if config.loss_mode == LOSS_MODE_VGG:
            teacher_feats = [t.detach() for t in extractor(targets)]
            student_feats = extractor(output)
        else:
            teacher_feats, student_feats = [targets], [output]
        try:
            loss = combined_loss(
                targets, output, teacher_feats, student_feats,
                mse_weight=config.mse_weight,
                perceptual_weight=config.perceptual_weight,
            )
        except NumericsError as exc:
            raise NumericsError(f"epoch {epoch} batch {batch}: {exc}") from exc
        if not torch.isfinite(loss.total):
            raise NumericsError(f"non-finite loss at epoch {epoch} batch {batch}")
        return loss

    def train_epoch(optimizer: torch.optim.Optimizer, epoch: int) -> float:
        student.train()
        total, count = 0.0, 0
        for bi, idx in enumerate(epoch_batches(len(train_records), config.batch_size,
                                               config.seed, epoch)):
            output = student(train_images[idx])
            loss = batch_loss(train_targets[idx], output, epoch, bi)
            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            count += len(idx)
        return total / count

    def validate() -> float:
        student.eval()
        total, count = 0.0, 0
        with torch.no_grad():
            for i in range(0, len(val_records), config.batch_size):
                output = student(val_images[i : i + config.batch_size])
                loss = batch_loss(val_targets[i : i + config.batch_size], output, -1, i)
                total += loss.item() * output.shape[0]
                count += output.shape[0]
        return total / count

    state = _fit(
        config,
        student,
        train_epoch,
        validate,
        checkpoint_weights=lambda: {"student": copy.deepcopy(student.state_dict())},
        load_weights=lambda w: student.load_state_dict(w["student"]),
        out_dir=out_dir,
        resume_from=resume_from,
    )
    return student, state


def finetune_decoder(
    config: TrainConfig,
    manifest: DatasetManifest,
    student: nn.Module,
    decoder: nn.Module,
    prompt_policy: str = POINT_POLICY,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> tuple[nn.Module, TrainState]:
    """Phase 2: fit the prompt decoder with dice loss; the encoder stays frozen.

    The student is frozen (requires_grad off, eval mode) and its embeddings
    are precomputed once. Prompts follow ``prompt_policy`` on the ground-truth
    masks; records with empty masks are skipped. Returns the decoder at its
    best-validation weights plus the final train state.
    """
    if config.phase != PHASE_DECODER:
        raise ConfigError(f"finetune_decoder needs phase={PHASE_DECODER!r}")
    student.requires_grad_(False)
    student.eval()

    dtype = _model_dtype(decoder)

    def prepare(split: str):
        records = [r for r in manifest.split_records(split)]
        images, masks = _stack_images(records, manifest, dtype)
        keep, prompts = [], []
        for i in range(len(records)):
            p = prompts_for_mask(masks[i], prompt_policy)
            if p is not None:
                keep.append(i)
                prompts.append(p)
        if not keep:
            return None
        sel = torch.tensor(keep, dtype=torch.long)
        with torch.no_grad():
            embeddings = torch.cat(
                [student(images[sel][i : i + 8]) for i in range(0, len(keep), 8)]
            ).to(dtype)
        return embeddings, masks[sel], prompts

    train_data = prepare("train")
    val_data = prepare("val")
    if train_data is None:
        raise ConfigError("train split is empty (or has only empty masks)")
    if val_data is None:
        raise ConfigError("val split is empty (or has only empty masks)")
    train_emb, train_masks, train_prompts = train_data
    val_emb, val_masks, val_prompts = val_data

    def batch_loss(pred: Tensor, masks: Tensor, epoch: int, batch: int) -> LossValue:
        if pred.shape[-2:] != masks.shape[-2:]:
            pred = spatial_resize(pred, tuple(masks.shape[-2:]), "bilinear").clamp(0.0, 1.0)
        try:
            loss = dice_loss(pred, masks)
        except NumericsError as exc:
            raise NumericsError(f"epoch {epoch} batch {batch}: {exc}") from exc
        if not torch.isfinite(loss.total):
            raise NumericsError(f"non-finite loss at epoch {epoch} batch {batch}")
        return loss

    def train_epoch(optimizer: torch.optim.Optimizer, epoch: int) -> float:
        decoder.train()
        total, count = 0.0, 0
        for bi, idx in enumerate(epoch_batches(train_emb.shape[0], config.batch_size,
                                               config.seed, epoch)):
            pred = decoder(train_emb[idx], [train_prompts[i] for i in idx.tolist()])
            loss = batch_loss(pred, train_masks[idx], epoch, bi)
            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            count += len(idx)
        return total / count

    def validate() -> float:
        decoder.eval()
        total, count = 0.0, 0
        with torch.no_grad():
            for i in range(0, val_emb.shape[0], config.batch_size):
                idx = list(range(i, min(i + config.batch_size, val_emb.shape[0])))
                pred = decoder(val_emb[idx], [val_prompts[j] for j in idx])
                loss = batch_loss(pred, val_masks[idx], -1, i)
                total += loss.item() * len(idx)
                count += len(idx)
        return total / count

    state = _fit(
        config,
        decoder,
        train_epoch,
        validate,
        checkpoint_weights=lambda: {
            "student": copy.deepcopy(student.state_dict()),
            "decoder": copy.deepcopy(decoder.state_dict()),
        },
        load_weights=lambda w: (
            student.load_state_dict(w["student"]),
            decoder.load_state_dict(w["decoder"]),
        ),
        out_dir=out_dir,
        resume_from=resume_from,
    )
    return decoder, state
