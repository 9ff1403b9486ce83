"""
训练服务
混合目标 L = xent(分类分支) + w·[E(x⁺) − E(x⁻)]，锐度感知更新，回放缓冲区维护，
发散保护、检查点与运行目录管理
"""

import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from ..autodiff.graph import Graph, Node, evaluate, gradient
from ..autodiff.tensor import ParameterSet
from ..core.config import settings
from ..core.errors import DivergenceError, ShapeError
from ..core.logger import add_file_handler, remove_file_handler
from ..core.seeds import ComponentSeeds, derive_seeds
from ..models.network import LogitModel, build_model, save_checkpoint
from ..schemas.evaluation import EvalReport
from ..schemas.model import ModelConfig
from ..schemas.run import RunConfig
from ..schemas.training import StepMetrics, TrainConfig
from .data_service import AugmentationPipeline, Dataset, DualBatch, DualLoader, toy_centers
from .eval_service import accuracy, evaluate_summary, feature_frechet, mode_coverage, reliability
from .optimizer_service import OptState, schedule_lr, sgd_momentum_update, sharpness_aware_step
from .sampler_service import (
    InitDistribution,
    ReplayBuffer,
    fit_informative_init,
    generate_samples,
    sgld_chain,
    write_raster_grid,
    write_sample_dump,
)

logger = logging.getLogger(__name__)

TRACE_LENGTH = 100

ArrayOrNode = Union[np.ndarray, Node]


def generative_loss(e_pos: ArrayOrNode, e_neg: ArrayOrNode, l2_weight: float = 0.0) -> Union[float, Node]:
    """
    mean(E⁺) − mean(E⁻) + λ·(mean(E⁺²) + mean(E⁻²))
    传入计算图节点时在同一张图上构建；传入数组时直接求值
    """
    if isinstance(e_pos, Node) and isinstance(e_neg, Node):
        graph = e_pos.graph
        loss = graph.mean(e_pos) - graph.mean(e_neg)
        if l2_weight:
            loss = loss + (graph.mean(e_pos * e_pos) + graph.mean(e_neg * e_neg)) * l2_weight
        return loss

    e_pos = np.asarray(e_pos, dtype=np.float64)
    e_neg = np.asarray(e_neg, dtype=np.float64)
    if e_pos.ndim != 1 or e_pos.shape != e_neg.shape:
        raise ShapeError(f"正负样本能量长度不一致: {e_pos.shape} vs {e_neg.shape}")
    graph = Graph()
    loss = generative_loss(graph.placeholder("e_pos"), graph.placeholder("e_neg"), l2_weight)
    graph.output("loss", loss)
    return float(evaluate(graph, {"e_pos": e_pos, "e_neg": e_neg})["loss"].data)


# ---- 发散保护 ----

@dataclass(frozen=True)
class GuardDecision:
    ok: bool
    reason: Optional[str] = None


def divergence_guard(metrics: StepMetrics, energy_bound: float = 1e3, xent_bound: float = 50.0) -> GuardDecision:
    """非有限值、|E(x⁻)| 超界或交叉熵超界时中止"""
    values = [metrics.xent, metrics.total_loss, metrics.grad_norm, metrics.lr,
              metrics.e_pos, metrics.e_neg, metrics.gen_loss, metrics.perturbed_loss]
    if any(v is not None and not math.isfinite(v) for v in values):
        return GuardDecision(False, "non-finite")
    if metrics.e_neg is not None and abs(metrics.e_neg) > energy_bound:
        return GuardDecision(False, "energy blow-up")
    if metrics.xent > xent_bound:
        return GuardDecision(False, "cross-entropy blow-up")
    return GuardDecision(True)


# ---- 训练状态 ----

@dataclass
class TrainerState:
    """训练循环的全部可变状态"""
    model: LogitModel
    opt: OptState
    config: TrainConfig
    clamp_range: Tuple[float, float]
    rng_sampler: np.random.Generator
    rng_buffer: np.random.Generator
    init: Optional[InitDistribution] = None
    buffer: Optional[ReplayBuffer] = None
    step: int = 0
    epoch: int = 0
    energy_trace: Deque[Dict[str, float]] = field(default_factory=lambda: deque(maxlen=TRACE_LENGTH))

    @property
    def generative(self) -> bool:
        """生成项是否启用（权重为 0 或 softmax 基线时跳过采样器）"""
        return self.config.baseline == "jem" and self.config.gen_weight > 0

    @classmethod
    def create(cls, model: LogitModel, config: TrainConfig, dataset: Dataset, seeds: ComponentSeeds) -> "TrainerState":
        opt = OptState.create(model.params, config.optim, config.epochs)
        state = cls(model=model, opt=opt, config=config, clamp_range=tuple(dataset.clamp_range),
                    rng_sampler=seeds.rng("sampler"), rng_buffer=seeds.rng("buffer"))
        if state.generative:
            state.init = fit_informative_init(dataset, model.config.class_count, config.init_floor)
            state.buffer = ReplayBuffer(config.buffer_capacity, dataset.shape, config.reinit_prob,
                                        dataset.clamp_range, dtype=np.float32)
        return state

    def sgld_config(self):
        sgld = self.config.sgld
        if sgld.clamp_range is None:
            return sgld.model_copy(update={"clamp_range": self.clamp_range})
        return sgld


def _classifier_loss(model: LogitModel, graph: Graph, batch: DualBatch) -> Tuple[Node, list]:
    nodes = model.build(graph, graph.placeholder("x_clf"), mode="train")
    return graph.softmax_cross_entropy(nodes.logits, batch.clf_y), nodes.norm_nodes


def _energy(model: LogitModel, graph: Graph, name: str) -> Node:
    logits = model.build(graph, graph.placeholder(name), mode="eval").logits
    return -graph.logsumexp(logits, axis=1)


def classifier_step(state: TrainerState, batch: DualBatch) -> Tuple[TrainerState, StepMetrics]:
    """普通 softmax 分类器的一步：交叉熵 + SGD 动量，无 SAM、无采样"""
    model, cfg = state.model, state.config
    started = time.perf_counter()
    lr = schedule_lr(state.opt, state.epoch)

    graph = Graph()
    xent, norm_nodes = _classifier_loss(model, graph, batch)
    evaluate(graph, model.bindings(x_clf=batch.clf_x))
    xent_value = float(graph.value(xent))
    if not math.isfinite(xent_value):
        raise DivergenceError("交叉熵出现非有限值", step=state.step, reason="LOSS_NON_FINITE")
    grads = gradient(graph, xent, model.params.names())
    grad_norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    model.commit_norm_stats(graph, norm_nodes)
    model.params = sgd_momentum_update(model.params, grads, state.opt, lr, cfg.sam.weight_decay)

    metrics = StepMetrics(step=state.step, epoch=state.epoch, xent=xent_value, total_loss=xent_value,
                          grad_norm=grad_norm, lr=lr, wall_time=time.perf_counter() - started)
    state.step += 1
    return state, metrics


def training_step(state: TrainerState, batch: DualBatch) -> Tuple[TrainerState, StepMetrics]:
    """
    一步混合训练:
      1) 从缓冲区/信息初始化取链起点，SGLD 得到 x⁻（作为常量输入，不回传梯度）
      2) L = xent(增强的分类分支) + w·L_gen(原始生成分支 x⁺, x⁻)
      3) 锐度感知更新；4) x⁻ 写回缓冲区
    """
    if state.config.baseline == "softmax":
        return classifier_step(state, batch)

    model, cfg = state.model, state.config
    started = time.perf_counter()
    generative = state.generative

    x_neg = None
    if generative:
        starts, _ = state.buffer.draw(state.init, len(batch.gen_x), state.rng_sampler)
        x_neg = sgld_chain(model, starts, state.sgld_config(), state.rng_sampler)

    first_pass: Dict[str, Any] = {}

    def loss_fn(params: ParameterSet) -> Tuple[Graph, Node]:
        graph = Graph()
        xent, norm_nodes = _classifier_loss(model, graph, batch)
        total = xent
        bindings = model.bindings(params, x_clf=batch.clf_x)
        e_pos = e_neg = gen = None
        if generative:
            e_pos = _energy(model, graph, "x_pos")
            e_neg = _energy(model, graph, "x_neg")
            gen = generative_loss(e_pos, e_neg, cfg.energy_l2)
            total = xent + gen * cfg.gen_weight
            bindings.update(x_pos=batch.gen_x, x_neg=x_neg)
        evaluate(graph, bindings)
        # 指标与批统计量只取第一遍（未扰动参数）
        if not first_pass:
            first_pass.update(graph=graph, norm_nodes=norm_nodes, xent=xent, e_pos=e_pos, e_neg=e_neg, gen=gen)
        return graph, total

    result = sharpness_aware_step(model, loss_fn, cfg.sam, state.opt, state.epoch)
    graph = first_pass["graph"]
    model.commit_norm_stats(graph, first_pass["norm_nodes"])

    metrics = StepMetrics(step=state.step, epoch=state.epoch, xent=float(graph.value(first_pass["xent"])),
                          total_loss=result.loss, perturbed_loss=result.perturbed_loss,
                          grad_norm=result.grad_norm, lr=result.lr, sam_degenerate=result.degenerate)
    if generative:
        e_pos = float(np.mean(graph.value(first_pass["e_pos"]), dtype=np.float64))
        e_neg = float(np.mean(graph.value(first_pass["e_neg"]), dtype=np.float64))
        metrics.e_pos, metrics.e_neg = e_pos, e_neg
        metrics.gen_loss = float(graph.value(first_pass["gen"]))
        state.energy_trace.append({"step": state.step, "e_pos": e_pos, "e_neg": e_neg})
        state.buffer.push(x_neg, state.rng_buffer)

    metrics.wall_time = time.perf_counter() - started
    state.step += 1
    return state, metrics


# ---- 运行目录 ----

class RunDirectory:
    """run/{config.json, metrics.jsonl, ckpt_/, samples_/, diagnostic.json, report.json, train.log}"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.ckpt_dir = self.root / "ckpt_"
        self.samples_dir = self.root / "samples_"
        self.root.mkdir(parents=True, exist_ok=True)
        self.ckpt_dir.mkdir(exist_ok=True)
        self.samples_dir.mkdir(exist_ok=True)

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def metrics_path(self) -> Path:
        return self.root / "metrics.jsonl"

    @property
    def diagnostic_path(self) -> Path:
        return self.root / "diagnostic.json"

    @property
    def report_path(self) -> Path:
        return self.root / "report.json"

    @property
    def log_path(self) -> Path:
        return self.root / "train.log"

    def write_config(self, config: RunConfig) -> Path:
        """完整解析后的配置（默认值 + 覆盖项），足以复现本次运行"""
        self.config_path.write_text(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True),
                                    encoding="utf-8")
        return self.config_path

    def reset_metrics(self) -> None:
        self.metrics_path.write_text("", encoding="utf-8")

    def append_metrics(self, row: Dict[str, Any]) -> None:
        with self.metrics_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    def read_metrics(self) -> List[Dict[str, Any]]:
        if not self.metrics_path.exists():
            return []
        return [json.loads(line) for line in self.metrics_path.read_text(encoding="utf-8").splitlines() if line]

    def checkpoint_path(self, epoch: int) -> Path:
        return self.ckpt_dir / f"epoch_{epoch:04d}.jlab"

    def checkpoints(self) -> List[Path]:
        return sorted(self.ckpt_dir.glob("epoch_*.jlab"))

    def write_diagnostic(self, record: Dict[str, Any]) -> Path:
        self.diagnostic_path.write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
        return self.diagnostic_path

    def write_report(self, report: EvalReport) -> Path:
        self.report_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        return self.report_path


def _metrics_row(metrics: StepMetrics) -> Dict[str, Any]:
    exclude = None if settings.LOG_WALL_TIME else {"wall_time"}
    return {"kind": "step", **metrics.model_dump(exclude=exclude)}


# ---- 训练循环 ----

@dataclass
class TrainResult:
    model: LogitModel
    state: TrainerState
    run_dir: Optional[RunDirectory]
    checkpoints: List[Path]
    report: EvalReport
    history: List[Dict[str, Any]] = field(default_factory=list)


def _check_compatible(train_ds: Dataset, test_ds: Optional[Dataset]) -> None:
    if test_ds is None:
        return
    if test_ds.shape != train_ds.shape or test_ds.class_count != train_ds.class_count:
        raise ShapeError(f"训练集与测试集不兼容: {train_ds.shape}/{train_ds.class_count} vs "
                         f"{test_ds.shape}/{test_ds.class_count}")


def final_report(state: TrainerState, run_config: RunConfig, train_ds: Dataset,
                 test_ds: Optional[Dataset], seeds: ComponentSeeds,
                 run_dir: Optional[RunDirectory] = None) -> EvalReport:
    """测试准确率与 ECE；生成项启用时附带样本的模式覆盖与特征 Fréchet 距离"""
    model = state.model
    options = run_config.eval
    holdout = test_ds if test_ds is not None else train_ds
    calib = reliability(model, holdout, options.ece_bins)
    report = EvalReport(accuracy=accuracy(model, holdout), reliability=calib)
    if state.init is None or options.sample_n == 0:
        return report

    sgld = state.sgld_config().model_copy(update={"k": options.sample_k})
    samples = generate_samples(model, state.init, options.sample_n, sgld, seeds.rng("eval"))
    if run_dir is not None:
        write_sample_dump(run_dir.samples_dir / "final.jlab", samples)
        if train_ds.is_image and train_ds.shape[0] in (1, 3):
            write_raster_grid(run_dir.samples_dir / "final", samples[:64], train_ds.clamp_range)

    centers = toy_centers(train_ds.name) if train_ds.kind == "toy" else None
    if centers is not None:
        spacing = float(np.linalg.norm(centers[0] - centers[1]))
        radius = options.coverage_radius or 0.25 * spacing
        report.mode_coverage = mode_coverage(samples, centers, radius)
    try:
        report.feature_frechet = feature_frechet(model, holdout, samples)
    except ShapeError as e:
        logger.warning(f"跳过特征 Fréchet 距离: {e.message}")
    return report


def train(run_config: RunConfig, train_ds: Dataset, test_ds: Optional[Dataset] = None,
          run_dir: Optional[Union[str, Path, RunDirectory]] = None) -> TrainResult:
    """
    固定轮数的训练循环；按节奏保存检查点并逐轮评估测试集。
    发散时保存最后一个正常快照、写出诊断记录后重新抛出。
    """
    _check_compatible(train_ds, test_ds)
    cfg = run_config.train
    seeds = derive_seeds(run_config.seed)
    model_config = ModelConfig.from_options(run_config.model, train_ds.shape, train_ds.class_count)
    model = build_model(model_config, seeds.rng("init"))
    state = TrainerState.create(model, cfg, train_ds, seeds)

    pipeline = (AugmentationPipeline.for_dataset(train_ds, cfg.flip, cfg.crop_pad)
                if cfg.augment else AugmentationPipeline())
    loader = DualLoader(train_ds, pipeline, cfg.batch_size, seeds.rng("loader_clf"), seeds.rng("loader_gen"),
                        seeds.rng("augment"), augment_gen=cfg.augment_gen)

    if run_dir is not None and not isinstance(run_dir, RunDirectory):
        run_dir = RunDirectory(run_dir)
    handler = None
    if run_dir is not None:
        run_dir.write_config(run_config)
        run_dir.reset_metrics()
        handler = add_file_handler(logging.getLogger("app"), run_dir.log_path)

    logger.info(f"开始训练: data={train_ds.name or train_ds.kind}, arch={model_config.arch}, "
                f"epochs={cfg.epochs}, baseline={cfg.baseline}, sam={cfg.sam.variant}, K={cfg.sgld.k}")
    history: List[Dict[str, Any]] = []
    checkpoints: List[Path] = []
    last_good = (model.params, {k: v.copy() for k, v in model.norm_state.items()})

    def record(row: Dict[str, Any]) -> None:
        history.append(row)
        if run_dir is not None:
            run_dir.append_metrics(row)

    try:
        epochs = tqdm(range(cfg.epochs), desc="训练", disable=not settings.PROGRESS_BAR)
        for epoch in epochs:
            state.epoch = epoch
            for batch in loader.epoch_batches():
                state, metrics = training_step(state, batch)
                record(_metrics_row(metrics))
                decision = divergence_guard(metrics, cfg.energy_bound, cfg.xent_bound)
                if not decision.ok:
                    raise DivergenceError(f"第 {metrics.step} 步发散: {decision.reason}",
                                          step=metrics.step, reason=decision.reason)
                last_good = (model.params, {k: v.copy() for k, v in model.norm_state.items()})

            row: Dict[str, Any] = {"kind": "epoch", "epoch": epoch}
            if test_ds is not None:
                summary = evaluate_summary(model, test_ds, run_config.eval.ece_bins)
                row.update(test_accuracy=summary["accuracy"], test_ece=summary["ece"])
                epochs.set_postfix(acc=f"{summary['accuracy']:.3f}")
            record(row)

            if run_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
                checkpoints.append(save_checkpoint(model, run_dir.checkpoint_path(epoch + 1)))
                logger.debug(f"保存检查点: {checkpoints[-1].name}")
    except DivergenceError as e:
        inner_step = e.step
        e.step = state.step if e.reason in ("SGLD_NON_FINITE", "LOSS_NON_FINITE") else e.step
        e.trace = list(state.energy_trace)
        if run_dir is not None:
            snapshot = LogitModel(model_config, last_good[0], last_good[1])
            e.snapshot = str(save_checkpoint(snapshot, run_dir.ckpt_dir / "last_good.jlab"))
            run_dir.write_diagnostic({
                "reason": e.reason,
                "message": e.message,
                "step": e.step,
                "inner_step": inner_step,
                "epoch": state.epoch,
                "trace": e.trace,
                "snapshot": e.snapshot,
            })
        logger.error(f"训练发散: {e.reason} (step {e.step})")
        raise
    finally:
        if handler is not None:
            remove_file_handler(logging.getLogger("app"), handler)

    report = final_report(state, run_config, train_ds, test_ds, seeds, run_dir)
    if run_dir is not None:
        run_dir.write_report(report)
    if state.buffer is not None:
        logger.info(f"缓冲区: 已写入 {state.buffer.pushed}, 占用 {state.buffer.fill}/{state.buffer.capacity}")
    logger.info(f"训练完成: 测试准确率 {report.accuracy:.4f}, ECE {report.reliability.ece:.4f}")
    return TrainResult(model=model, state=state, run_dir=run_dir, checkpoints=checkpoints,
                       report=report, history=history)
