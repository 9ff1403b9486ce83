"""
评估服务
准确率、ECE、分布外得分与 AUROC、PGD 攻击、特征 Fréchet 距离、模式覆盖
"""

import logging
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg
from sklearn.metrics import roc_auc_score, roc_curve

from ..core.config import EVAL_DEFAULTS, PGD_DEFAULTS
from ..core.errors import DataFormatError, NonFiniteError, ShapeError
from ..schemas.evaluation import OodReport, ReliabilityReport, RobustnessPoint
from .data_service import Dataset

logger = logging.getLogger(__name__)

EVAL_BATCH = 1024

Samples = Union[Dataset, np.ndarray]


def _samples_of(data: Samples) -> np.ndarray:
    return data.samples if isinstance(data, Dataset) else np.asarray(data)


def batched(fn, x: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    """分批调用逐样本函数并拼接"""
    if len(x) <= batch:
        return np.asarray(fn(x))
    return np.concatenate([np.asarray(fn(x[i:i + batch])) for i in range(0, len(x), batch)])


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def predict_accuracy(model, x: np.ndarray, y: np.ndarray) -> float:
    """argmax 预测准确率（平局取最小类别下标）"""
    if len(x) == 0:
        raise DataFormatError("数据集为空，无法计算准确率")
    logits = batched(model.forward_logits, x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def accuracy(model, dataset: Dataset) -> float:
    return predict_accuracy(model, dataset.samples, dataset.labels)


def ece(confidences: np.ndarray, correctness: np.ndarray, bins: int = EVAL_DEFAULTS["ece_bins"]) -> ReliabilityReport:
    """等宽分箱 ECE；区间为 (lo, hi]，第一个箱包含 0"""
    confidences = np.asarray(confidences, dtype=np.float64)
    correctness = np.asarray(correctness, dtype=np.float64)
    if confidences.shape != correctness.shape or confidences.ndim != 1:
        raise ShapeError(f"置信度与正确性长度不一致: {confidences.shape} vs {correctness.shape}")
    if confidences.size and (confidences.min() < 0 or confidences.max() > 1):
        raise ValueError("置信度必须位于 [0, 1]")

    edges = np.linspace(0.0, 1.0, bins + 1)
    index = np.digitize(confidences, edges[1:-1], right=True)
    counts = np.bincount(index, minlength=bins)
    conf_sum = np.bincount(index, weights=confidences, minlength=bins)
    acc_sum = np.bincount(index, weights=correctness, minlength=bins)
    occupied = counts > 0
    mean_conf = np.where(occupied, conf_sum / np.maximum(counts, 1), 0.0)
    mean_acc = np.where(occupied, acc_sum / np.maximum(counts, 1), 0.0)
    total = max(len(confidences), 1)
    value = float(np.sum(counts / total * np.abs(mean_acc - mean_conf)))
    return ReliabilityReport(bin_edges=edges.tolist(), confidence=mean_conf.tolist(), accuracy=mean_acc.tolist(),
                             counts=counts.astype(int).tolist(), ece=value)


def reliability(model, dataset: Dataset, bins: int = EVAL_DEFAULTS["ece_bins"]) -> ReliabilityReport:
    """模型在数据集上的可靠性图数据"""
    probs = _softmax(batched(model.forward_logits, dataset.samples).astype(np.float64))
    return ece(probs.max(axis=1), np.argmax(probs, axis=1) == dataset.labels, bins)


def ood_scores(model, data: Samples, method: str = "density") -> np.ndarray:
    """density: -E(x) = logsumexp(f(x))；maxprob: max_y p(y|x)"""
    x = _samples_of(data)
    if method == "density":
        return -batched(model.energy, x)
    if method == "maxprob":
        return _softmax(batched(model.forward_logits, x).astype(np.float64)).max(axis=1)
    raise ValueError(f"未知的得分方式: {method}")


def _roc_inputs(scores_in: np.ndarray, scores_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scores_in = np.asarray(scores_in, dtype=np.float64).ravel()
    scores_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if scores_in.size == 0 or scores_out.size == 0:
        raise ValueError("AUROC 需要非空的分布内与分布外得分")
    y_true = np.concatenate([np.ones(scores_in.size), np.zeros(scores_out.size)])
    return y_true, np.concatenate([scores_in, scores_out])


def auroc(scores_in: np.ndarray, scores_out: np.ndarray) -> float:
    """P(s_in > s_out) + ½P(s_in = s_out)"""
    y_true, y_score = _roc_inputs(scores_in, scores_out)
    return float(roc_auc_score(y_true, y_score))


def fpr_at_tpr(scores_in: np.ndarray, scores_out: np.ndarray, tpr: float = 0.95) -> float:
    """分布内召回率达到 tpr 时的分布外误报率"""
    y_true, y_score = _roc_inputs(scores_in, scores_out)
    fpr_curve, tpr_curve, _ = roc_curve(y_true, y_score)
    return float(fpr_curve[np.searchsorted(tpr_curve, tpr, side="left")])


def ood_report(model, data_in: Samples, data_out: Samples, method: str = "density", label: str = "") -> OodReport:
    """分布内外得分、AUROC 与 95% TPR 下的误报率"""
    scores_in = ood_scores(model, data_in, method).astype(np.float64)
    scores_out = ood_scores(model, data_out, method).astype(np.float64)
    report = OodReport(method=method, scores_in=scores_in.tolist(), scores_out=scores_out.tolist(),
                       auroc=auroc(scores_in, scores_out), fpr_at_95_tpr=fpr_at_tpr(scores_in, scores_out),
                       label=label)
    logger.info(f"OOD {label or method}: AUROC {report.auroc:.4f}")
    return report


def interp_ood(dataset: Dataset, n: int, rng: np.random.Generator) -> np.ndarray:
    """随机不同样本对的中点"""
    size = len(dataset)
    if size < 2:
        raise DataFormatError("插值分布外样本至少需要 2 条数据")
    first = rng.integers(0, size, n)
    second = (first + rng.integers(1, size, n)) % size
    samples = dataset.samples.astype(np.float64)
    return (0.5 * (samples[first] + samples[second])).astype(dataset.samples.dtype)


def density_histogram(scores: Mapping[str, np.ndarray], bins: int = 50) -> pd.DataFrame:
    """共享分箱的密度得分直方图"""
    pooled = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in scores.values()])
    finite = pooled[np.isfinite(pooled)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    frame = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:]})
    for name, values in scores.items():
        frame[name] = np.histogram(np.asarray(values, dtype=np.float64), bins=edges)[0]
    return frame


# ---- PGD ----

def _per_sample_norm(v: np.ndarray) -> np.ndarray:
    flat = v.reshape(len(v), -1).astype(np.float64)
    return np.sqrt(np.sum(flat * flat, axis=1))


def perturbation_size(x_adv: np.ndarray, x: np.ndarray, norm: str) -> np.ndarray:
    """逐样本扰动大小（64 位精确计算）"""
    delta = x_adv.astype(np.float64) - x.astype(np.float64)
    if norm == "linf":
        return np.abs(delta).reshape(len(delta), -1).max(axis=1) if delta.size else np.zeros(len(delta))
    return _per_sample_norm(delta)


def _enforce_ball(x_adv: np.ndarray, x: np.ndarray, norm: str, eps: float,
                  clamp_range: Tuple[float, float]) -> np.ndarray:
    """消除舍入误差，使 ‖x_adv − x‖ ≤ ε 严格成立"""
    lo, hi = clamp_range
    for _ in range(64):
        if norm == "linf":
            over = np.abs(x_adv.astype(np.float64) - x.astype(np.float64)) > eps
            if not over.any():
                return x_adv
            x_adv = np.where(over, np.nextafter(x_adv, x), x_adv)
        else:
            exact = perturbation_size(x_adv, x, "l2")
            over = exact > eps
            if not over.any():
                return x_adv
            shrink = (eps / np.maximum(exact[over], 1e-300)) * (1.0 - 1e-6)
            delta = (x_adv[over].astype(np.float64) - x[over].astype(np.float64))
            delta *= shrink.reshape(-1, *([1] * (x.ndim - 1)))
            x_adv[over] = np.clip(x[over] + delta, lo, hi).astype(x_adv.dtype)
    raise NonFiniteError("PGD 投影未能收敛到约束球内")


def pgd_attack(model, x: np.ndarray, y: np.ndarray, norm: str = "linf", eps: float = 0.1,
               steps: int = PGD_DEFAULTS["steps"], step_size: Optional[float] = None,
               rng: Optional[np.random.Generator] = None, random_start: bool = PGD_DEFAULTS["random_start"],
               clamp_range: Tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """交叉熵上的投影梯度上升；L∞ 用符号步，L2 用归一化梯度步"""
    if norm not in ("linf", "l2"):
        raise ValueError(f"未知的范数: {norm}")
    if eps < 0:
        raise ValueError("eps 不能为负")
    x = np.asarray(x)
    if eps == 0 or len(x) == 0:
        return x.copy()
    lo, hi = clamp_range
    step_size = step_size if step_size is not None else PGD_DEFAULTS["step_ratio"] * eps / steps
    rng = rng if rng is not None else np.random.default_rng(0)
    shape = (-1,) + (1,) * (x.ndim - 1)

    def project(candidate: np.ndarray) -> np.ndarray:
        delta = candidate.astype(np.float64) - x
        if norm == "linf":
            delta = np.clip(delta, -eps, eps)
        else:
            size = _per_sample_norm(delta)
            delta *= np.minimum(1.0, eps / np.maximum(size, 1e-300)).reshape(shape)
        return np.clip(x + delta, lo, hi).astype(x.dtype)

    x_adv = x.copy()
    if random_start:
        if norm == "linf":
            start = rng.uniform(-eps, eps, x.shape)
        else:
            direction = rng.standard_normal(x.shape)
            direction /= np.maximum(_per_sample_norm(direction), 1e-300).reshape(shape)
            start = direction * (eps * rng.uniform(0, 1, len(x))).reshape(shape)
        x_adv = project(x + start)

    for _ in range(steps):
        _, grad = model.loss_input_gradient(x_adv, y)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("PGD 梯度出现非有限值")
        if norm == "linf":
            step = np.sign(grad)
        else:
            step = grad / np.maximum(_per_sample_norm(grad), 1e-300).reshape(shape)
        x_adv = project(x_adv.astype(np.float64) + step_size * step)

    return _enforce_ball(x_adv, x, norm, eps, clamp_range)


def robustness_curve(model, dataset: Dataset, norm: str, eps_list: List[float],
                     steps: int = PGD_DEFAULTS["steps"], step_ratio: float = PGD_DEFAULTS["step_ratio"],
                     rng: Optional[np.random.Generator] = None,
                     random_start: bool = PGD_DEFAULTS["random_start"]) -> List[RobustnessPoint]:
    """各 ε 下 PGD 攻击后的准确率"""
    rng = rng if rng is not None else np.random.default_rng(0)
    points = []
    for eps in eps_list:
        x_adv = dataset.samples
        if eps > 0:
            x_adv = np.concatenate([
                pgd_attack(model, dataset.samples[i:i + EVAL_BATCH], dataset.labels[i:i + EVAL_BATCH], norm, eps,
                           steps, step_ratio * eps / steps, rng, random_start, dataset.clamp_range)
                for i in range(0, len(dataset), EVAL_BATCH)
            ])
        acc = predict_accuracy(model, x_adv, dataset.labels)
        size = float(perturbation_size(x_adv, dataset.samples, norm).max()) if len(x_adv) else 0.0
        logger.info(f"PGD {norm} eps={eps}: 准确率 {acc:.4f}")
        points.append(RobustnessPoint(norm=norm, eps=eps, accuracy=acc, max_perturbation=size))
    return points


# ---- 生成质量 ----

def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray,
                     eps: float = EVAL_DEFAULTS["frechet_eps"]) -> float:
    """‖μ1−μ2‖² + tr(Σ1 + Σ2 − 2(Σ1Σ2)^½)，协方差加 eps·I"""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    dim = a.shape[1]
    if b.shape[1] != dim:
        raise ShapeError(f"特征维度不一致: {a.shape} vs {b.shape}")
    if len(a) < dim + 1 or len(b) < dim + 1:
        raise ShapeError(f"样本数至少为特征维度 + 1 = {dim + 1}: {len(a)}, {len(b)}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False) + eps * np.eye(dim)
    cov_b = np.cov(b, rowvar=False) + eps * np.eye(dim)
    # tr((Σ1Σ2)^½) = tr((Σ1^½ Σ2 Σ1^½)^½)，后者对称半正定
    root_a = _sqrt_psd(cov_a)
    middle = root_a @ cov_b @ root_a
    middle = 0.5 * (middle + middle.T)
    trace_root = float(np.sum(np.sqrt(np.clip(linalg.eigvalsh(middle), 0.0, None))))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_root)
    return max(value, 0.0)


def feature_frechet(model, real: Samples, generated: Samples) -> float:
    """模型倒数第二层特征上的 Fréchet 距离"""
    features_real = batched(model.penultimate_features, _samples_of(real))
    features_gen = batched(model.penultimate_features, _samples_of(generated))
    return frechet_distance(features_real, features_gen)


def mode_coverage(samples: np.ndarray, centers: np.ndarray, radius: float) -> int:
    """半径内至少有一个样本的中心数"""
    if radius <= 0:
        raise ValueError("半径必须为正")
    samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    centers = np.asarray(centers, dtype=np.float64).reshape(len(centers), -1)
    if len(samples) == 0:
        return 0
    dist = np.sqrt(((samples[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
    return int(np.sum((dist <= radius).any(axis=0)))


def evaluate_summary(model, dataset: Dataset, bins: int = EVAL_DEFAULTS["ece_bins"]) -> Dict[str, float]:
    """逐轮评估行：准确率与 ECE"""
    report = reliability(model, dataset, bins)
    return {"accuracy": accuracy(model, dataset), "ece": report.ece}
