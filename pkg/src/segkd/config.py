"""Declarative run configuration.

One YAML file drives every pipeline stage; stage-specific sections are
validated even when a stage ignores them. The schema is strict: unknown keys
and wrong types are ConfigErrors naming the offending dotted path. Defaults
(the published training hyperparameters among them: lr 1e-4, weight decay
1e-3, batch 16, 100 epochs, plateau factor 0.1) are materialized into the
parsed tree, and the fully resolved tree is echoed to
<output_dir>/effective_config.yaml; parsing that echo reproduces the RunSpec
exactly.

Sub-seeds: the top-level seed derives one stream per stage (seeding.py) and
per model role (teacher 101, student 102, extractor 103, decoder 104) via
SeedSequence, so one seed pins the whole run.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .data import Preprocessing
from .errors import ConfigError
from .models.decoder import DecoderSpec
from .models.encoders import EncoderSpec
from .models.perceptual import PerceptualExtractorSpec
from .seeding import derive_seed
from .training import (
    PHASE_DECODER,
    PHASE_ENCODER,
    EarlyStopConfig,
    OptimizerConfig,
    SchedulerConfig,
    TrainConfig,
)

_REQUIRED = object()

TEACHER_SEED_CODE = 101
STUDENT_SEED_CODE = 102
EXTRACTOR_SEED_CODE = 103
DECODER_SEED_CODE = 104


@dataclass(frozen=True)
class _Field:
    kind: str
    default: object = _REQUIRED
    choices: tuple | None = None


def _train_section(with_loss_mode: bool) -> dict:
    section = {
        "max_epochs": _Field("int", 100),
        "batch_size": _Field("int", 16),
        "optimizer": {
            "lr": _Field("float", 1e-4),
            "weight_decay": _Field("float", 1e-3),
        },
        "scheduler": {
            "plateau_factor": _Field("float", 0.1),
            "patience_epochs": _Field("int", 5),
            "min_lr": _Field("float", 1e-7),
        },
        "early_stop": {
            "patience_epochs": _Field("int", 10),
            "min_delta": _Field("float", 1e-4),
        },
    }
    if with_loss_mode:
        section["loss_mode"] = _Field(
            "str", "vgg_on_embeddings",
            choices=("vgg_on_embeddings", "direct_feature_match"),
        )
        section["mse_weight"] = _Field("float", 1.0)
        section["perceptual_weight"] = _Field("float", 1.0)
    return section


SCHEMA = {
    "run_name": _Field("str", None),  # defaults to the config file stem
    "seed": _Field("int", 0),
    "output_dir": _Field("str", None),  # defaults to runs/<run_name>
    "cache_dir": _Field("str", None),  # defaults to <output_dir>/cache
    "dataset": {
        "kind": _Field("str", "directory", choices=("directory", "synthetic")),
        "root": _Field("str"),
        "name": _Field("str", None),  # defaults to basename(root)
        "synthetic": {
            "n": _Field("int", 100),
            "height": _Field("int", 64),
            "width": _Field("int", 64),
        },
        "split": {
            "train": _Field("float", 0.8),
            "val": _Field("float", 0.1),
            "test": _Field("float", 0.1),
        },
        "split_file": _Field("optional_str", None),
        "resize_to": _Field("int_pair", [64, 64]),
        "normalization": {
            "mean": _Field("float_triple", [0.5, 0.5, 0.5]),
            "std": _Field("float_triple", [0.5, 0.5, 0.5]),
        },
    },
    "model": {
        "scale": _Field("str", "toy", choices=("toy", "full")),
        "embed_channels": _Field("optional_int", None),  # toy 32 / full 256
        "teacher": {
            "weights_path": _Field("optional_str", None),
        },
        "student": {
            "backbone_channels": _Field("optional_int", None),  # toy 48 / full 2048
            "upsample_mode": _Field("str", "bilinear", choices=("bilinear", "nearest")),
            "weights_path": _Field("optional_str", None),
        },
        "extractor": {
            "layer_ids": _Field("optional_int_list", None),
            "input_adapter": _Field(
                "str", "fixed_projection_to_3ch",
                choices=("fixed_projection_to_3ch", "replicate_gray"),
            ),
            "weights_path": _Field("optional_str", None),
        },
        "decoder": {
            "hidden_channels": _Field("int", 32),
            "prompt_types": _Field("str_list", ["point", "box"]),
            "weights_path": _Field("optional_str", None),
        },
    },
    "train": {
        "encoder": _train_section(with_loss_mode=True),
        "decoder": _train_section(with_loss_mode=False),
    },
    "eval": {
        "threshold": _Field("float", 0.5),
        "prompt_policy": _Field("str", "centroid_point", choices=("centroid_point", "box")),
    },
}


def _check_scalar(field: _Field, value, path: str):
    kind = field.kind
    if kind == "int" and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind == "optional_int":
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
    if kind == "float" and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind == "str" and isinstance(value, str):
        return value
    if kind == "optional_str" and (value is None or isinstance(value, str)):
        return value
    if kind == "bool" and isinstance(value, bool):
        return value
    if kind == "int_pair":
        if (isinstance(value, list) and len(value) == 2
                and all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
            return list(value)
    if kind == "float_triple":
        if (isinstance(value, list) and len(value) == 3
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
            return [float(v) for v in value]
    if kind == "optional_int_list":
        if value is None:
            return None
        if isinstance(value, list) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            return list(value)
    if kind == "str_list":
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return list(value)
    raise ConfigError(f"expected {kind} at {path!r}, got {value!r}")


def _validate(data: dict, schema: dict, path: str = "") -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at {path or '<root>'!r}, got {data!r}")
    for key in data:
        if key not in schema:
            dotted = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key {dotted!r}")
    out: dict = {}
    for key, spec in schema.items():
        dotted = f"{path}.{key}" if path else key
        if isinstance(spec, dict):
            out[key] = _validate(data.get(key, {}), spec, dotted)
            continue
        if key not in data:
            if spec.default is _REQUIRED:
                raise ConfigError(f"missing required key {dotted!r}")
            out[key] = spec.default
        else:
            out[key] = _check_scalar(spec, data[key], dotted)
        if spec.choices is not None and out[key] is not None and out[key] not in spec.choices:
            raise ConfigError(
                f"{dotted!r} must be one of {list(spec.choices)}, got {out[key]!r}"
            )
    return out


def _resolve_defaults(tree: dict, config_path: Path) -> dict:
    """Materialize context-dependent defaults so the echo is self-contained."""
    if tree["run_name"] is None:
        tree["run_name"] = config_path.stem
    if tree["output_dir"] is None:
        tree["output_dir"] = str(Path("runs") / tree["run_name"])
    if tree["cache_dir"] is None:
        tree["cache_dir"] = str(Path(tree["output_dir"]) / "cache")
    if tree["dataset"]["name"] is None:
        tree["dataset"]["name"] = Path(tree["dataset"]["root"]).name
    toy = tree["model"]["scale"] == "toy"
    if tree["model"]["embed_channels"] is None:
        tree["model"]["embed_channels"] = 32 if toy else 256
    if tree["model"]["student"]["backbone_channels"] is None:
        tree["model"]["student"]["backbone_channels"] = 48 if toy else 2048
    fractions = tree["dataset"]["split"]
    if abs(fractions["train"] + fractions["val"] + fractions["test"] - 1.0) > 1e-9:
        raise ConfigError("dataset.split fractions must sum to 1")
    return tree


@dataclass(frozen=True)
class RunSpec:
    """A fully validated, fully defaulted run configuration."""

    raw: dict

    # -- plain accessors -------------------------------------------------
    @property
    def run_name(self) -> str:
        return self.raw["run_name"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    @property
    def cache_dir(self) -> Path:
        return Path(self.raw["cache_dir"])

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def split_fractions(self) -> tuple[float, float, float]:
        s = self.raw["dataset"]["split"]
        return (s["train"], s["val"], s["test"])

    @property
    def preprocessing(self) -> Preprocessing:
        d = self.raw["dataset"]
        return Preprocessing(
            resize_to=tuple(d["resize_to"]),
            mean=tuple(d["normalization"]["mean"]),
            std=tuple(d["normalization"]["std"]),
        )

    @property
    def eval_threshold(self) -> float:
        return self.raw["eval"]["threshold"]

    @property
    def prompt_policy(self) -> str:
        return self.raw["eval"]["prompt_policy"]

    # -- model specs ------------------------------------------------------
    def _toy(self) -> bool:
        return self.raw["model"]["scale"] == "toy"

    def teacher_spec(self) -> EncoderSpec:
        m = self.raw["model"]
        if self._toy():
            return EncoderSpec(
                family="toy_conv",
                embed_channels=m["embed_channels"],
                input_size=tuple(self.raw["dataset"]["resize_to"]),
                seed=derive_seed(self.seed, TEACHER_SEED_CODE),
            )
        return EncoderSpec(
            family="teacher_vit",
            embed_channels=m["embed_channels"],
            input_size=tuple(self.raw["dataset"]["resize_to"]),
            weights_source="external_file",
            weights_path=m["teacher"]["weights_path"],
        )

    def student_spec(self) -> EncoderSpec:
        m = self.raw["model"]
        weights_path = m["student"]["weights_path"]
        return EncoderSpec(
            family="toy_student" if self._toy() else "student_resnet",
            embed_channels=m["embed_channels"],
            input_size=tuple(self.raw["dataset"]["resize_to"]),
            backbone_out_channels=m["student"]["backbone_channels"],
            weights_source="external_file" if weights_path else "random_seeded",
            weights_path=weights_path,
            seed=derive_seed(self.seed, STUDENT_SEED_CODE),
            upsample_mode=m["student"]["upsample_mode"],
        )

    def extractor_spec(self) -> PerceptualExtractorSpec:
        m = self.raw["model"]
        weights_path = m["extractor"]["weights_path"]
        return PerceptualExtractorSpec(
            base="toy" if self._toy() else "vgg16",
            layer_ids=tuple(m["extractor"]["layer_ids"] or ()),
            input_adapter=m["extractor"]["input_adapter"],
            weights_source="external_file" if weights_path else "random_seeded",
            weights_path=weights_path,
            seed=derive_seed(self.seed, EXTRACTOR_SEED_CODE),
        )

    def decoder_spec(self) -> DecoderSpec:
        m = self.raw["model"]
        weights_path = m["decoder"]["weights_path"]
        return DecoderSpec(
            family="toy" if self._toy() else "external",
            prompt_types=tuple(m["decoder"]["prompt_types"]),
            embed_channels=m["embed_channels"],
            hidden_channels=m["decoder"]["hidden_channels"],
            output_size=tuple(self.raw["dataset"]["resize_to"]),
            weights_source="external_file" if weights_path else "random_seeded",
            weights_path=weights_path,
            seed=derive_seed(self.seed, DECODER_SEED_CODE),
        )

    def train_config(self, phase: str, seed: int) -> TrainConfig:
        section = self.raw["train"]["encoder" if phase == PHASE_ENCODER else "decoder"]
        kwargs = dict(
            phase=phase,
            max_epochs=section["max_epochs"],
            batch_size=section["batch_size"],
            optimizer=OptimizerConfig(**section["optimizer"]),
            scheduler=SchedulerConfig(**section["scheduler"]),
            early_stop=EarlyStopConfig(**section["early_stop"]),
            seed=seed,
        )
        if phase == PHASE_ENCODER:
            kwargs.update(
                loss_mode=section["loss_mode"],
                mse_weight=section["mse_weight"],
                perceptual_weight=section["perceptual_weight"],
            )
        return TrainConfig(**kwargs)


def parse_config(path: str | Path, overrides: dict | None = None) -> RunSpec:
    """Load, validate, and default-fill a config file into a RunSpec.

    ``overrides`` (e.g. from CLI flags) replace top-level scalars before
    defaults are resolved.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    tree = _validate(data, SCHEMA)
    for key, value in (overrides or {}).items():
        if value is not None:
            tree[key] = value
    tree = _resolve_defaults(tree, path)
    _ = RunSpec(tree)
    _check_phase_sections(tree)
    return RunSpec(tree)


def _check_phase_sections(tree: dict) -> None:
    """Instantiate both TrainConfigs so bad values fail at parse time."""
    spec = RunSpec(tree)
    spec.train_config(PHASE_ENCODER, seed=0)
    spec.train_config(PHASE_DECODER, seed=0)


def write_effective_config(spec: RunSpec, out_dir: str | Path | None = None) -> Path:
    out = Path(out_dir) if out_dir is not None else spec.output_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump(spec.raw, fh, sort_keys=True, default_flow_style=False)
    return path
