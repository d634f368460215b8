"""Run reports: measured-vs-reference tables, figures, and data sidecars.

Every number rendered in a figure is also written to a CSV sidecar next to
it; box-plot quartiles use linear interpolation between closest ranks
(numpy's 'linear' method), stated in the sidecar header. Reference scores are
published values shipped as package data and are kept clearly separate from
anything this package measured. Measured-vs-reference comparisons carry a
prompt-policy caveat: the reference rows do not state what prompts produced
them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .evaluation import EvalResult

QUANTILE_NOTE = "quantile method: linear interpolation between closest ranks (numpy 'linear')"


def load_reference_table() -> dict:
    ref = importlib_resources.files("segkd.resources").joinpath("reference_scores.json")
    return json.loads(ref.read_text())


@dataclass
class RunReport:
    eval_results: list[EvalResult] = field(default_factory=list)
    parameter_counts: dict[str, int] = field(default_factory=dict)
    reference_table: dict | None = None
    comparison: list[dict] = field(default_factory=list)
    caveats: list[str] = field(default_factory=list)
    artifacts: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_results"] = [r.to_dict() for r in self.eval_results]
        return d


def compare_report(results: list[EvalResult],
                   reference_table: dict | None = None,
                   parameter_counts: dict[str, int] | None = None,
                   measured_model: str = "measured") -> RunReport:
    """Assemble the side-by-side table of measured vs reference dice scores.

    Datasets present only in the reference table produce reference-only rows
    (no delta); measured results match reference rows by dataset name.
    """
    ref_dice = (reference_table or {}).get("dice", {})
    measured = {r.dataset_name: r for r in results}
    rows: list[dict] = []
    for dataset in sorted(set(ref_dice) | set(measured)):
        refs = ref_dice.get(dataset, {})
        mres = measured.get(dataset)
        for model in sorted(refs):
            row = {"dataset": dataset, "model": model, "source": "reference",
                   "dice": refs[model], "delta_vs_measured": None}
            if mres is not None:
                row["delta_vs_measured"] = round(mres.mean_dice - refs[model], 6)
            rows.append(row)
        if mres is not None:
            rows.append({"dataset": dataset, "model": measured_model,
                         "source": "measured", "dice": mres.mean_dice,
                         "delta_vs_measured": None})
    caveats = []
    if ref_dice:
        caveats.append(
            "reference dice values are published numbers whose prompting "
            "protocol is unknown; measured-vs-reference deltas are indicative only"
        )
    counts = dict(parameter_counts or {})
    if reference_table and "parameters" in reference_table:
        for model, n in reference_table["parameters"].items():
            counts.setdefault(f"{model} (reference)", int(n))
    return RunReport(
        eval_results=list(results),
        parameter_counts=counts,
        reference_table=reference_table,
        comparison=rows,
        caveats=caveats,
    )


def write_report_json(report: RunReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    return path


def write_results_csv(report: RunReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "sample_id", "dice"])
        for result in report.eval_results:
            ids = result.sample_ids or [str(i) for i in range(result.n_samples)]
            for sid, score in zip(ids, result.per_sample_dice):
                writer.writerow([result.dataset_name, sid, repr(score)])
    return path


def box_stats(values: list[float]) -> dict[str, float]:
    """The box-plot statistics we render, via the sort-based linear method."""
    arr = np.asarray(values, dtype=np.float64)
    q1 = float(np.quantile(arr, 0.25, method="linear"))
    q2 = float(np.quantile(arr, 0.50, method="linear"))
    q3 = float(np.quantile(arr, 0.75, method="linear"))
    iqr = q3 - q1
    inliers = arr[(arr >= q1 - 1.5 * iqr) & (arr <= q3 + 1.5 * iqr)]
    return {
        "q1": q1,
        "median": q2,
        "q3": q3,
        "whisker_lo": float(inliers.min()),
        "whisker_hi": float(inliers.max()),
        "mean": float(arr.mean()),
    }


def emit_figures(report: RunReport, out_dir: str | Path) -> dict[str, str]:
    """Write the per-sample box plot and the mean bar chart plus CSV sidecars.

    Returns {artifact name: path}; also records them in report.artifacts.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, str] = {}

    if report.eval_results:
        labels = [r.dataset_name for r in report.eval_results]
        data = [r.per_sample_dice for r in report.eval_results]

        fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(data), 4))
        ax.boxplot(data, tick_labels=labels, whis=1.5)
        ax.set_ylabel("dice")
        ax.set_title("Per-sample dice distribution")
        fig.tight_layout()
        fig.savefig(out / "dice_box.png", dpi=120)
        plt.close(fig)
        artifacts["box_plot"] = str(out / "dice_box.png")

        with open(out / "dice_box.csv", "w", newline="") as fh:
            fh.write(f"# {QUANTILE_NOTE}\n")
            writer = csv.writer(fh)
            writer.writerow(["series", "kind", "key", "value"])
            for result in report.eval_results:
                ids = result.sample_ids or [str(i) for i in range(result.n_samples)]
                for sid, score in zip(ids, result.per_sample_dice):
                    writer.writerow([result.dataset_name, "sample", sid, repr(score)])
                for key, value in box_stats(result.per_sample_dice).items():
                    writer.writerow([result.dataset_name, "stat", key, repr(value)])
        artifacts["box_data"] = str(out / "dice_box.csv")

    bar_rows = [
        {"dataset": r.dataset_name, "model": "measured", "source": "measured",
         "mean": r.mean_dice}
        for r in report.eval_results
    ]
    for dataset, models in ((report.reference_table or {}).get("dice", {})).items():
        for model, score in sorted(models.items()):
            bar_rows.append({"dataset": dataset, "model": model,
                             "source": "reference", "mean": float(score)})
    if not bar_rows:
        raise ConfigError("nothing to plot: no measured results and no reference table")

    labels = [f"{r['dataset']}\n{r['model']}" for r in bar_rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(bar_rows)), 4))
    colors = ["tab:blue" if r["source"] == "measured" else "tab:gray" for r in bar_rows]
    ax.bar(range(len(bar_rows)), [r["mean"] for r in bar_rows], color=colors)
    ax.set_xticks(range(len(bar_rows)))
    ax.set_xticklabels(labels, fontsize=7, rotation=45, ha="right")
    ax.set_ylabel("mean dice")
    ax.set_ylim(0, 1.05)
    ax.set_title("Mean dice (measured vs reference)")
    fig.tight_layout()
    fig.savefig(out / "dice_bars.png", dpi=120)
    plt.close(fig)
    artifacts["bar_chart"] = str(out / "dice_bars.png")

    with open(out / "dice_bars.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "model", "source", "mean"])
        for r in bar_rows:
            writer.writerow([r["dataset"], r["model"], r["source"], repr(r["mean"])])
    artifacts["bar_data"] = str(out / "dice_bars.csv")

    report.artifacts.update(artifacts)
    return artifacts
