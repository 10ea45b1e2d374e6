"""
Report Service
Summarizes finished runs: a markdown table with one row per run, the
mAP-vs-iteration curves and per-class precision-recall curves as PNG files.
"""
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.core.constant import CONFIG_FILE, METRICS_FILE, PREDICTIONS_FILE, Split
from app.core.exceptions import DataFileError
from app.core.logger import logger
from app.schema.config import ExperimentConfig, load_config
from app.schema.records import MetricsRecord
from app.service.datasets import manifest_path, read_manifest
from app.service.evaluation import class_name, evaluate_map
from app.service.inference import read_predictions
from app.service.runs import read_metrics


class RunSummary(NamedTuple):
    name: str
    run_dir: Path
    config: ExperimentConfig
    history: List[MetricsRecord]

    @property
    def final(self) -> Optional[MetricsRecord]:
        return self.history[-1] if self.history else None


def load_run(run_dir) -> RunSummary:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise DataFileError(run_dir, "run directory not found")
    config = load_config(run_dir / CONFIG_FILE)
    history = read_metrics(run_dir / METRICS_FILE)
    return RunSummary(run_dir.name if run_dir.name else str(run_dir), run_dir, config, history)


def _unique_names(runs: Sequence[RunSummary]) -> List[str]:
    names = [r.name for r in runs]
    if len(set(names)) == len(names):
        return names
    return [str(r.run_dir) for r in runs]


def report_table(runs: Sequence[RunSummary]) -> str:
    """Markdown table with one row per run"""
    classes = max((r.config.data.num_classes for r in runs), default=0)
    headers = ["run", "variant", "stage", "iter", "mAP"] + [class_name(c) for c in range(classes)]
    lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
    for name, run in zip(_unique_names(runs), runs):
        last = run.final
        distill = run.config.distill
        variant = (f"{distill.branch_mode.value}/{distill.perceiver_mode.value}/"
                   f"{distill.stages.value}/{distill.supervision.value}")
        if last is None:
            cells = [name, variant, "-", "-", "-"] + ["-"] * classes
        else:
            aps = [last.per_class_ap.get(class_name(c)) for c in range(classes)]
            cells = [name, variant, last.stage, str(last.iter), f"{100 * last.map_target:.1f}"]
            cells += ["n/a" if ap is None else f"{100 * ap:.1f}" for ap in aps]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def plot_map_curves(runs: Sequence[RunSummary], path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, run in zip(_unique_names(runs), runs):
        if run.history:
            ax.plot([r.iter for r in run.history], [100 * r.map_target for r in run.history], marker="o", label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("eval-target mAP (%)")
    ax.set_title("mAP vs iteration")
    ax.grid(True, alpha=0.3)
    if runs:
        ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_pr_curves(run: RunSummary, path, data_root=None) -> Optional[Path]:
    """Per-class precision-recall of the run's eval-target predictions; None when inputs are missing"""
    predictions_file = run.run_dir / PREDICTIONS_FILE
    manifest = manifest_path(data_root or run.config.data.root, Split.EVAL_TARGET)
    if not predictions_file.is_file() or not manifest.is_file():
        logger.warning(f"Skipping PR curves for {run.name}: predictions or eval-target manifest missing")
        return None
    predictions = read_predictions(predictions_file)
    truth = {r.scene_id: [a.to_annotation() for a in r.annotations]
             for r in read_manifest(manifest) if r.scene_id in predictions}
    result = evaluate_map(predictions, truth, run.config.data.num_classes, run.config.eval.iou_threshold)
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for c, curve in sorted(result.curves.items()):
        ap = result.per_class_ap[c]
        ax.step(curve.recall, curve.precision, where="post", label=f"{class_name(c)} (AP {100 * ap:.1f})")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"{run.name}: mAP {100 * result.map:.1f}")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left", fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def write_report(run_dirs: Sequence, out_dir, data_root=None) -> Dict:
    """
    Build the report of ``run_dirs`` into ``out_dir``

    Returns:
        Dict with status, message and the written paths
    """
    runs = [load_run(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = report_table(runs)
    report_md = out / "report.md"
    map_png = plot_map_curves(runs, out / "map_vs_iteration.png")
    pr_pngs = []
    for name, run in zip(_unique_names(runs), runs):
        safe = name.replace("/", "_").strip("_") or "run"
        written = plot_pr_curves(run, out / f"pr_{safe}.png", data_root)
        if written is not None:
            pr_pngs.append(written)
    body = ["# Run report", "", table, f"![mAP vs iteration]({map_png.name})", ""]
    body += [f"![PR curves]({p.name})" for p in pr_pngs]
    report_md.write_text("\n".join(body) + "\n", encoding="utf-8")
    return {
        "status": "success",
        "message": f"report of {len(runs)} run(s) written to {report_md}",
        "report": str(report_md),
        "plots": [str(map_png)] + [str(p) for p in pr_pngs],
        "table": table,
    }
