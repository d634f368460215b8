"""Pipeline stages behind the CLI subcommands.

Each stage takes a RunSpec, echoes the effective config into the run
directory, records input content hashes, and writes its artifacts under a
conventional layout:

    <output_dir>/effective_config.yaml
    <output_dir>/inputs.json
    <output_dir>/encoder/   phase-1 checkpoints + history.csv
    <output_dir>/decoder/   phase-2 checkpoints + history.csv
    <output_dir>/eval/<dataset>.json
    <output_dir>/report/    report.json, results.csv, figures + sidecars

Stages never run concurrently on one run directory: a .lock file guards it.
"""

from __future__ import annotations

import json
import logging
import os
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

from .checkpoints import load_checkpoint
from .config import RunSpec, write_effective_config
from .data import (
    DatasetManifest,
    cache_teacher_embeddings,
    generate_synthetic,
    load_cached_embedding,
    load_dataset,
    manifest_content_hash,
)
from .errors import ConfigError, LockError, WeightsError
from .evaluation import EvalResult, evaluate
from .models import (
    build_decoder,
    build_perceptual_extractor,
    build_student,
    build_teacher,
    count_parameters,
    weights_fingerprint,
)
from .reporting import compare_report, emit_figures, load_reference_table, write_report_json, write_results_csv
from .seeding import stage_seed
from .training import LOSS_MODE_VGG, PHASE_DECODER, PHASE_ENCODER, distill_encoder, finetune_decoder

log = logging.getLogger("segkd")


@contextmanager
def run_lock(output_dir: Path):
    """Reject concurrent invocations on the same run directory."""
    output_dir.mkdir(parents=True, exist_ok=True)
    lock_path = output_dir / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"run directory {output_dir} is locked by another invocation "
            f"(remove {lock_path} if that process is gone)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def _record_inputs(spec: RunSpec, updates: dict) -> None:
    path = spec.output_dir / "inputs.json"
    data = {}
    if path.is_file():
        data = json.loads(path.read_text())
    data.update(updates)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))


def load_manifest(spec: RunSpec) -> DatasetManifest:
    d = spec.dataset
    return load_dataset(
        d["root"],
        split_fractions=spec.split_fractions,
        seed=spec.seed,
        name=d["name"],
        preprocessing=spec.preprocessing,
        split_file=d["split_file"],
    )


def _cache_index(spec: RunSpec) -> dict | None:
    index_path = spec.cache_dir / spec.dataset["name"] / "index.json"
    if not index_path.is_file():
        return None
    return json.loads(index_path.read_text())


def _attach_cache(spec: RunSpec, manifest: DatasetManifest) -> DatasetManifest | None:
    """Manifest with cached embedding paths, or None if the cache is incomplete."""
    index = _cache_index(spec)
    if index is None:
        return None
    cache_dir = spec.cache_dir / manifest.name
    records = []
    for r in manifest.records:
        emb = cache_dir / f"{r.id}.emb"
        if r.id not in index.get("records", {}) or not emb.is_file():
            return None
        records.append(replace(r, cached_embedding_path=str(emb)))
    return DatasetManifest(manifest.name, manifest.root_path, records, manifest.preprocessing)


def _student_embed_spatial(spec: RunSpec, manifest: DatasetManifest) -> tuple[int, int] | None:
    """Teacher-reported embedding grid: cache first, live teacher second.

    Every stage resolves the same value for a given run because the cache is
    created before training and persists after it. None lets the student
    default to its backbone-derived geometry.
    """
    cached = _attach_cache(spec, manifest)
    if cached is not None:
        emb = load_cached_embedding(cached.records[0].cached_embedding_path)
        return (int(emb.shape[-2]), int(emb.shape[-1]))
    try:
        teacher = build_teacher(spec.teacher_spec())
    except WeightsError:
        return None
    return tuple(teacher.embed_spatial)


# ---------------------------------------------------------------------------
# stages


def run_gen_synthetic(spec: RunSpec, dry_run: bool = False) -> None:
    d = spec.dataset
    if d["kind"] != "synthetic":
        raise ConfigError("gen-synthetic needs dataset.kind=synthetic")
    syn = d["synthetic"]
    canvas = (syn["height"], syn["width"])
    if dry_run:
        log.info("plan: generate %d synthetic samples at %dx%d under %s",
                 syn["n"], canvas[0], canvas[1], d["root"])
        return
    manifest = generate_synthetic(
        d["root"], syn["n"], canvas=canvas, seed=spec.seed,
        split_fractions=spec.split_fractions, preprocessing=spec.preprocessing,
    )
    _record_inputs(spec, {"dataset_content_hash": manifest_content_hash(manifest)})
    log.info("generated %d samples (train %d / val %d / test %d) under %s",
             len(manifest.records), len(manifest.split_records("train")),
             len(manifest.split_records("val")), len(manifest.split_records("test")),
             d["root"])


def run_cache_embeddings(spec: RunSpec, dry_run: bool = False) -> None:
    if dry_run:
        log.info("plan: cache teacher embeddings for dataset %s into %s",
                 spec.dataset["name"], spec.cache_dir)
        return
    manifest = load_manifest(spec)
    teacher = build_teacher(spec.teacher_spec())
    cached = cache_teacher_embeddings(manifest, teacher, spec.cache_dir)
    _record_inputs(spec, {
        "dataset_content_hash": manifest_content_hash(manifest),
        "teacher_fingerprint": weights_fingerprint(teacher),
    })
    log.info("embedding cache ready for %d records under %s",
             len(cached.records), spec.cache_dir / manifest.name)


def run_distill_encoder(spec: RunSpec, dry_run: bool = False,
                        resume: str | None = None) -> None:
    config = spec.train_config(PHASE_ENCODER, seed=stage_seed(spec.seed, "distill-encoder"))
    if dry_run:
        log.info("plan: distill encoder (max %d epochs, batch %d, lr %g, weight decay %g, "
                 "loss mode %s); artifacts under %s",
                 config.max_epochs, config.batch_size, config.optimizer.lr,
                 config.optimizer.weight_decay, config.loss_mode,
                 spec.output_dir / "encoder")
        _plan_dataset(spec)
        return
    manifest = load_manifest(spec)
    cached = _attach_cache(spec, manifest)
    teacher = None
    if cached is None:
        teacher = build_teacher(spec.teacher_spec())
        embed_spatial = tuple(teacher.embed_spatial)
    else:
        manifest = cached
        emb = load_cached_embedding(manifest.records[0].cached_embedding_path)
        embed_spatial = (int(emb.shape[-2]), int(emb.shape[-1]))
    student = build_student(spec.student_spec(), embed_spatial=embed_spatial)
    extractor = None
    if config.loss_mode == LOSS_MODE_VGG:
        extractor = build_perceptual_extractor(
            spec.extractor_spec(), input_channels=student.embed_channels
        )
    updates = {"dataset_content_hash": manifest_content_hash(manifest)}
    if teacher is not None:
        updates["teacher_fingerprint"] = weights_fingerprint(teacher)
    if extractor is not None:
        updates["extractor_fingerprint"] = weights_fingerprint(extractor)
    _record_inputs(spec, updates)

    _, state = distill_encoder(
        config, manifest, student, teacher=teacher, extractor=extractor,
        out_dir=spec.output_dir / "encoder", resume_from=resume,
    )
    log.info("phase 1 done: best val loss %.6g at epoch %d (of %d run)",
             state.best_val_loss, state.best_epoch, state.epoch)


def run_finetune_decoder(spec: RunSpec, dry_run: bool = False,
                         encoder_checkpoint: str | None = None,
                         resume: str | None = None) -> None:
    config = spec.train_config(PHASE_DECODER, seed=stage_seed(spec.seed, "finetune-decoder"))
    ckpt_path = encoder_checkpoint or str(spec.output_dir / "encoder" / "checkpoint_best")
    if dry_run:
        log.info("plan: fine-tune decoder against frozen encoder from %s "
                 "(max %d epochs, batch %d, lr %g); artifacts under %s",
                 ckpt_path, config.max_epochs, config.batch_size,
                 config.optimizer.lr, spec.output_dir / "decoder")
        _plan_dataset(spec)
        return
    manifest = load_manifest(spec)
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.phase != PHASE_ENCODER:
        raise ConfigError(f"{ckpt_path} is a {ckpt.phase!r} checkpoint, expected phase 1")
    student = build_student(
        spec.student_spec(), embed_spatial=_student_embed_spatial(spec, manifest)
    )
    student.load_state_dict(ckpt.weights["student"])
    decoder = build_decoder(spec.decoder_spec())
    _record_inputs(spec, {
        "dataset_content_hash": manifest_content_hash(manifest),
        "encoder_fingerprint": weights_fingerprint(student),
    })
    _, state = finetune_decoder(
        config, manifest, student, decoder, prompt_policy=spec.prompt_policy,
        out_dir=spec.output_dir / "decoder", resume_from=resume,
    )
    log.info("phase 2 done: best val dice loss %.6g at epoch %d (of %d run)",
             state.best_val_loss, state.best_epoch, state.epoch)


def run_evaluate(spec: RunSpec, checkpoint: str, dry_run: bool = False) -> None:
    if dry_run:
        log.info("plan: evaluate checkpoint %s on the test split "
                 "(threshold %g, prompt policy %s); result under %s",
                 checkpoint, spec.eval_threshold, spec.prompt_policy,
                 spec.output_dir / "eval")
        _plan_dataset(spec)
        return
    manifest = load_manifest(spec)
    ckpt = load_checkpoint(checkpoint)
    if ckpt.phase != PHASE_DECODER:
        raise ConfigError(f"{checkpoint} is a {ckpt.phase!r} checkpoint, expected phase 2")
    student = build_student(
        spec.student_spec(), embed_spatial=_student_embed_spatial(spec, manifest)
    )
    student.load_state_dict(ckpt.weights["student"])
    decoder = build_decoder(spec.decoder_spec())
    decoder.load_state_dict(ckpt.weights["decoder"])
    result = evaluate(
        manifest, student, decoder,
        prompt_policy=spec.prompt_policy, threshold=spec.eval_threshold,
    )
    out = spec.output_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{manifest.name}.json"
    path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    _record_inputs(spec, {"dataset_content_hash": manifest_content_hash(manifest)})
    log.info("evaluated %d test samples: mean dice %.4f (std %.4f) -> %s",
             result.n_samples, result.mean_dice, result.std_dice, path)


def run_report(spec: RunSpec, dry_run: bool = False) -> None:
    eval_dir = spec.output_dir / "eval"
    if dry_run:
        log.info("plan: aggregate eval results from %s into %s with the shipped "
                 "reference table", eval_dir, spec.output_dir / "report")
        return
    results = []
    if eval_dir.is_dir():
        for path in sorted(eval_dir.glob("*.json")):
            results.append(EvalResult.from_dict(json.loads(path.read_text())))
    counts = {}
    try:
        counts["student (this run)"] = count_parameters(build_student(spec.student_spec()))
    except WeightsError:
        pass
    report = compare_report(
        results, reference_table=load_reference_table(), parameter_counts=counts,
        measured_model="student (this run)",
    )
    out = spec.output_dir / "report"
    emit_figures(report, out)
    write_results_csv(report, out / "results.csv")
    report.artifacts["results_csv"] = str(out / "results.csv")
    path = write_report_json(report, out / "report.json")
    log.info("report written to %s (%d measured result sets, %d comparison rows)",
             path, len(results), len(report.comparison))


def _plan_dataset(spec: RunSpec) -> None:
    root = Path(spec.dataset["root"])
    if (root / "images").is_dir():
        manifest = load_manifest(spec)
        log.info("dataset %s: %d records (train %d / val %d / test %d)",
                 manifest.name, len(manifest.records),
                 len(manifest.split_records("train")),
                 len(manifest.split_records("val")),
                 len(manifest.split_records("test")))
    else:
        log.info("dataset root %s not materialized yet", root)
