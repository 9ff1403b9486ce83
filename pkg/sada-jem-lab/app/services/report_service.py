"""
报告服务
评估结果 -> JSON（pydantic）、CSV（pandas）与可选的 PNG 图（matplotlib）
"""

import logging
from pathlib import Path
from typing import List, Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from pydantic import BaseModel  # noqa: E402

from ..schemas.evaluation import LandscapeSlice, OodReport, ReliabilityReport, RobustnessPoint  # noqa: E402
from .eval_service import density_histogram  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def write_json(report: BaseModel, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path


def write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


# ---- 表格 ----

def reliability_frame(report: ReliabilityReport) -> pd.DataFrame:
    edges = report.bin_edges
    return pd.DataFrame({
        "bin_lo": edges[:-1],
        "bin_hi": edges[1:],
        "confidence": report.confidence,
        "accuracy": report.accuracy,
        "count": report.counts,
    })


def landscape_frame(slice_: LandscapeSlice) -> pd.DataFrame:
    """一维: offset, energy；二维为长表: alpha, beta, energy（非有限点为空）"""
    if len(slice_.offsets) == 1:
        return pd.DataFrame({"offset": slice_.offsets[0], "energy": slice_.energies})
    alphas, betas = slice_.offsets
    rows = [{"alpha": a, "beta": b, "energy": slice_.energies[i][j]}
            for i, a in enumerate(alphas) for j, b in enumerate(betas)]
    return pd.DataFrame(rows, columns=["alpha", "beta", "energy"])


def robustness_frame(points: Sequence[RobustnessPoint]) -> pd.DataFrame:
    return pd.DataFrame([p.model_dump() for p in points], columns=["norm", "eps", "accuracy", "max_perturbation"])


def ood_frame(reports: Sequence[OodReport]) -> pd.DataFrame:
    return pd.DataFrame([{"label": r.label, "method": r.method, "auroc": r.auroc,
                          "fpr_at_95_tpr": r.fpr_at_95_tpr, "n_in": len(r.scores_in), "n_out": len(r.scores_out)}
                         for r in reports])


def score_histogram(report: OodReport, bins: int = 50) -> pd.DataFrame:
    return density_histogram({"in": np.asarray(report.scores_in), "out": np.asarray(report.scores_out)}, bins)


# ---- 图 ----

def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    logger.debug(f"写出图像: {path}")
    return path


def plot_reliability(report: ReliabilityReport, path: PathLike, title: str = "") -> Path:
    """可靠性图：各分箱准确率柱状图 + 对角线"""
    edges = np.asarray(report.bin_edges)
    width = np.diff(edges)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.bar(edges[:-1], report.accuracy, width=width, align="edge", edgecolor="black", alpha=0.8, label="accuracy")
    ax.plot([0, 1], [0, 1], "k--", linewidth=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_title(title or f"ECE = {report.ece * 100:.2f}%")
    return _save(fig, path)


def plot_landscape(slice_: LandscapeSlice, path: PathLike) -> Path:
    """一维曲线或二维等高线"""
    fig, ax = plt.subplots(figsize=(6, 5))
    if len(slice_.offsets) == 1:
        energies = [np.nan if e is None else e for e in slice_.energies]
        ax.plot(slice_.offsets[0], energies, marker=".")
        ax.set_xlabel("offset")
        ax.set_ylabel("Σ E(x)")
    else:
        grid = np.array([[np.nan if e is None else e for e in row] for row in slice_.energies], dtype=np.float64)
        alpha, beta = np.meshgrid(slice_.offsets[0], slice_.offsets[1], indexing="ij")
        contour = ax.contourf(alpha, beta, grid, levels=30, cmap="viridis")
        fig.colorbar(contour, ax=ax, label="Σ E(x)")
        ax.set_xlabel("direction 1")
        ax.set_ylabel("direction 2")
    ax.set_title(f"energy landscape ({slice_.normalization})")
    return _save(fig, path)


def plot_histogram(scores: Mapping[str, np.ndarray], path: PathLike, bins: int = 50) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in scores.items():
        ax.hist(np.asarray(values), bins=bins, alpha=0.5, density=True, label=label)
    ax.set_xlabel("score")
    ax.legend()
    return _save(fig, path)


def plot_robustness(points: Sequence[RobustnessPoint], path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([p.eps for p in points], [p.accuracy for p in points], marker="o")
    ax.set_xlabel("eps")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.set_title(f"PGD {points[0].norm if points else ''}")
    return _save(fig, path)


# ---- 汇总写出 ----

def write_reliability(report: ReliabilityReport, out_dir: PathLike, plot: bool = False) -> List[Path]:
    out_dir = Path(out_dir)
    paths = [write_json(report, out_dir / "reliability.json"),
             write_frame(reliability_frame(report), out_dir / "reliability.csv")]
    if plot:
        paths.append(plot_reliability(report, out_dir / "reliability.png"))
    return paths


def write_ood(reports: Sequence[OodReport], out_dir: PathLike, plot: bool = False, bins: int = 50) -> List[Path]:
    out_dir = Path(out_dir)
    paths = [write_frame(ood_frame(reports), out_dir / "ood.csv")]
    for report in reports:
        stem = (report.label or report.method).replace(":", "_").replace("/", "_")
        paths.append(write_json(report, out_dir / f"ood_{stem}.json"))
        paths.append(write_frame(score_histogram(report, bins), out_dir / f"ood_{stem}_hist.csv"))
        if plot:
            scores = {"in": np.asarray(report.scores_in), "out": np.asarray(report.scores_out)}
            paths.append(plot_histogram(scores, out_dir / f"ood_{stem}_hist.png", bins))
    return paths


def write_robustness(points: Sequence[RobustnessPoint], out_dir: PathLike, plot: bool = False) -> List[Path]:
    out_dir = Path(out_dir)
    paths = [write_frame(robustness_frame(points), out_dir / "robustness.csv")]
    if plot and points:
        paths.append(plot_robustness(points, out_dir / "robustness.png"))
    return paths


def write_landscape(slice_: LandscapeSlice, out_dir: PathLike, plot: bool = False) -> List[Path]:
    out_dir = Path(out_dir)
    suffix = f"{len(slice_.offsets)}d"
    paths = [write_json(slice_, out_dir / f"landscape_{suffix}.json"),
             write_frame(landscape_frame(slice_), out_dir / f"landscape_{suffix}.csv")]
    if plot:
        paths.append(plot_landscape(slice_, out_dir / f"landscape_{suffix}.png"))
    return paths
