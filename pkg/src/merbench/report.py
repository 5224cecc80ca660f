"""Robustness report: summary table, ΔMAE box plots, scatter plots, t-tests.

The report is a pure function of per-seed prediction records, so running it
twice over the same persisted predictions gives byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import avg_correlation, box_stats, mae, paired_ttest
from .models import EMOTIONS

# The summary table lists the plain models first, then the adversarially trained ones.
TABLE_ORDER = ("A2E", "A2B2E", "A2M2E", "aA2E", "aA2B2E")
# The box plot pairs every black-box model with its adversarially trained twin.
BOX_ORDER = ("A2E", "aA2E", "A2B2E", "aA2B2E", "A2M2E")
TTEST_PAIRS = (("A2E", "A2M2E"), ("A2B2E", "A2M2E"))
SCATTER_VARIANTS = ("A2B2E", "A2M2E", "aA2B2E")
REPORT_SCHEMA = 1


@dataclass
class SeedPredictions:
    """Test-set predictions of one trained model, before and after the attack."""

    seed: int
    clip_ids: list[str]
    truth: np.ndarray                 # (N, 8)
    clean: np.ndarray                 # (N, 8)
    adversarial: np.ndarray | None    # (N, 8) or None if the attack is missing
    snr_db: np.ndarray | None = None  # (N,), inf marks an unperturbed sample

    def sample_errors(self) -> np.ndarray:
        """Per-sample MAE over the emotions of the attacked predictions."""
        return np.mean(np.abs(self.adversarial - self.truth), axis=1)


def _ordered(labels, preferred: Sequence[str]) -> list[str]:
    known = [v for v in preferred if v in labels]
    return known + sorted(v for v in labels if v not in preferred)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    xs = np.asarray(values, dtype=np.float64)
    if xs.size == 0:
        return math.nan, math.nan
    sd = float(np.std(xs, ddof=1)) if xs.size > 1 else 0.0
    return float(np.mean(xs)), sd


def mean_snr(snr: np.ndarray | None) -> float | None:
    """Mean SNR in dB over perturbed samples; ``None`` if none was perturbed."""
    if snr is None:
        return None
    finite = np.asarray(snr, dtype=np.float64)
    finite = finite[np.isfinite(finite)]
    return float(np.mean(finite)) if finite.size else None


def seed_metrics(run: SeedPredictions) -> dict:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        corr = avg_correlation(run.clean, run.truth)
    row = {"seed": run.seed, "n_samples": len(run.clip_ids),
           "clean_corr": corr, "clean_mae": mae(run.clean, run.truth)}
    if run.adversarial is not None:
        row["adv_mae"] = mae(run.adversarial, run.truth)
        row["delta_mae"] = row["adv_mae"] - row["clean_mae"]
        row["mean_snr_db"] = mean_snr(run.snr_db)
        row["unperturbed"] = 0 if run.snr_db is None else int(np.sum(~np.isfinite(run.snr_db)))
    return row


def _ttest(a: Sequence[SeedPredictions], b: Sequence[SeedPredictions], alpha: float, n_tests: int) -> dict:
    by_seed = {r.seed: r for r in b}
    diffs = []
    for ra in a:
        rb = by_seed.get(ra.seed)
        if rb is None or ra.adversarial is None or rb.adversarial is None:
            continue
        if ra.clip_ids != rb.clip_ids:
            raise ValueError(f"seed {ra.seed}: test clips differ between models; cannot pair samples")
        diffs.append(ra.sample_errors() - rb.sample_errors())
    d = np.concatenate(diffs) if diffs else np.zeros(0)
    if d.size < 2:
        return {"n_pairs": int(d.size), "skipped": "fewer than two paired samples"}
    res = paired_ttest(d, alpha=alpha, n_tests=n_tests)
    out = asdict(res)
    out["n_pairs"] = int(d.size)
    return out


def build_report(runs: Mapping[str, Sequence[SeedPredictions]], gaps: Sequence[str] = (),
                 alpha: float = 0.05) -> dict:
    """All report numbers as a JSON-serializable dict.

    ``runs`` maps a variant label (``A2E``, ``aA2B2E``, ...) to its seeds.
    """
    gaps = list(gaps)
    variants = {}
    for label in _ordered(runs, TABLE_ORDER):
        rows = [seed_metrics(r) for r in sorted(runs[label], key=lambda r: r.seed)]
        attacked = [r for r in rows if "delta_mae" in r]
        for r in rows:
            if "delta_mae" not in r:
                gaps.append(f"{label} seed {r['seed']}: no attacked predictions")
        agg = {}
        for key in ("clean_corr", "clean_mae"):
            agg[key + "_mean"], agg[key + "_std"] = _mean_std([r[key] for r in rows])
        for key in ("adv_mae", "delta_mae"):
            agg[key + "_mean"], agg[key + "_std"] = _mean_std([r[key] for r in attacked])
        snrs = [r["mean_snr_db"] for r in attacked if r["mean_snr_db"] is not None]
        agg["mean_snr_db"] = float(np.mean(snrs)) if snrs else None
        entry = {"seeds": rows, "aggregate": agg}
        if attacked:
            entry["delta_mae_box"] = asdict(box_stats([r["delta_mae"] for r in attacked]))
        variants[label] = entry
    pairs = [(a, b) for a, b in TTEST_PAIRS if a in runs and b in runs]
    ttests = []
    for a, b in pairs:
        res = _ttest(runs[a], runs[b], alpha, len(pairs))
        ttests.append({"a": a, "b": b, **res})
    return {"schema": REPORT_SCHEMA, "variants": variants, "ttests": ttests,
            "alpha": alpha, "gaps": gaps}


# -- rendering -------------------------------------------------------------------------

def _fmt(mean: float, sd: float) -> str:
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "n/a"
    return f"{mean:.2f} ± {sd:.2f}"


def table_markdown(report: dict) -> str:
    lines = ["| Model | avg. corr | MAE | ΔMAE | SNR (dB) |", "|---|---|---|---|---|"]
    for label, entry in report["variants"].items():
        a = entry["aggregate"]
        snr = "n/a" if a["mean_snr_db"] is None else f"{a['mean_snr_db']:.1f}"
        lines.append(f"| {label} | {_fmt(a['clean_corr_mean'], a['clean_corr_std'])} | "
                     f"{_fmt(a['clean_mae_mean'], a['clean_mae_std'])} | "
                     f"{_fmt(a['delta_mae_mean'], a['delta_mae_std'])} | {snr} |")
    if report["ttests"]:
        lines += ["", "Paired two-sided t-tests on per-sample attacked |error| "
                  f"(Bonferroni threshold {report['ttests'][0].get('threshold', float('nan')):.4g}):", ""]
        for t in report["ttests"]:
            if "skipped" in t:
                lines.append(f"- {t['a']} vs. {t['b']}: skipped ({t['skipped']})")
            else:
                verdict = "significant" if t["significant"] else "not significant"
                lines.append(f"- {t['a']} vs. {t['b']}: t({t['df']})={t['t']:.2f}, p={t['p']:.3g}, {verdict}")
    if report["gaps"]:
        lines += ["", "Gaps:", ""] + [f"- {g}" for g in report["gaps"]]
    return "\n".join(lines) + "\n"


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "merbench"
    matplotlib.rcParams["svg.fonttype"] = "none"
    import matplotlib.pyplot as plt
    return plt


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def plot_delta_box(report: dict, path: Path) -> None:
    plt = _pyplot()
    labels = _ordered([k for k, v in report["variants"].items() if "delta_mae_box" in v], BOX_ORDER)
    fig, ax = plt.subplots(figsize=(6, 4))
    stats = []
    for label in labels:
        b = report["variants"][label]["delta_mae_box"]
        stats.append({"label": label, "med": b["median"], "q1": b["q1"], "q3": b["q3"],
                      "whislo": b["whisker_low"], "whishi": b["whisker_high"], "fliers": b["outliers"]})
    if stats:
        ax.bxp(stats, showfliers=True)
    ax.set_ylabel("ΔMAE (after − before attack)")
    ax.set_title("Loss in performance under attack")
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_scatter(runs: Mapping[str, Sequence[SeedPredictions]], emotion: str, path: Path) -> None:
    """Truth vs prediction for one emotion; clean as "x", attacked as "o"."""
    plt = _pyplot()
    j = EMOTIONS.index(emotion)
    labels = [v for v in SCATTER_VARIANTS if v in runs] or _ordered(runs, TABLE_ORDER)
    fig, axes = plt.subplots(1, len(labels), figsize=(3.2 * len(labels), 3.2), squeeze=False)
    for ax, label in zip(axes[0], labels):
        run = min(runs[label], key=lambda r: r.seed)
        ax.scatter(run.truth[:, j], run.clean[:, j], marker="x", s=18, label="clean")
        if run.adversarial is not None:
            ax.scatter(run.truth[:, j], run.adversarial[:, j], marker="o", s=18,
                       facecolors="none", edgecolors="C3", label="attacked")
        ax.plot([0, 1], [0, 1], color="0.6", linewidth=0.8)
        ax.set_title(f"{label} (seed {run.seed})")
        ax.set_xlabel(f"true {emotion}")
    axes[0][0].set_ylabel("prediction")
    axes[0][0].legend(loc="upper left", fontsize="small")
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def write_predictions_csv(run: SeedPredictions, path: Path) -> None:
    header = ["clip_id"] + [f"true_{e}" for e in EMOTIONS] + [f"clean_{e}" for e in EMOTIONS]
    if run.adversarial is not None:
        header += [f"adv_{e}" for e in EMOTIONS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, clip in enumerate(run.clip_ids):
            row = [clip] + [repr(float(v)) for v in run.truth[i]] + [repr(float(v)) for v in run.clean[i]]
            if run.adversarial is not None:
                row += [repr(float(v)) for v in run.adversarial[i]]
            w.writerow(row)


def read_predictions_csv(path: Path, seed: int, snr_db: np.ndarray | None = None) -> SeedPredictions:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = [r["clip_id"] for r in rows]

    def block(prefix):
        if not rows or f"{prefix}_{EMOTIONS[0]}" not in rows[0]:
            return None
        return np.array([[float(r[f"{prefix}_{e}"]) for e in EMOTIONS] for r in rows])

    return SeedPredictions(seed, ids, block("true"), block("clean"), block("adv"), snr_db)


def _dump(obj) -> str:
    def clean(x):
        if isinstance(x, float) and not math.isfinite(x):
            return None
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        if isinstance(x, (np.floating, np.integer, np.bool_)):
            return clean(x.item())
        return x
    return json.dumps(clean(obj), indent=1, sort_keys=False, allow_nan=False) + "\n"


def robustness_report(runs: Mapping[str, Sequence[SeedPredictions]], out_dir: Path | str,
                      gaps: Sequence[str] = (), alpha: float = 0.05) -> dict:
    """Compute the report and write the bundle into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = build_report(runs, gaps, alpha)
    (out_dir / "report.json").write_text(_dump(report))
    (out_dir / "table1.md").write_text(table_markdown(report))
    plot_delta_box(report, out_dir / "delta_mae_box.svg")
    for emotion in EMOTIONS:
        plot_scatter(runs, emotion, out_dir / f"scatter_{emotion}.svg")
    for label, seeds in runs.items():
        for run in seeds:
            write_predictions_csv(run, out_dir / f"predictions_{label}_{run.seed}.csv")
    return report
