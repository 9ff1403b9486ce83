import logging

import numpy as np

from ...core.errors import ExitCode, handle_cli_errors
from ...core.seeds import derive_seeds
from ...schemas.evaluation import EvalReport
from ...services.data_service import Dataset, parse_data_spec, shifted_toy, uniform_noise
from ...services.eval_service import accuracy, interp_ood, ood_report, reliability, robustness_curve
from ...services.landscape_service import landscape_slice, landscape_subset, offset_grid
from ...services.report_service import write_json, write_landscape, write_ood, write_reliability, write_robustness
from ..context import PLOT_ARGUMENT, check_model_data, load_model, load_split, output_dir, resolve_run_config
from ..router import CommandRouter

logger = logging.getLogger(__name__)

router = CommandRouter()


@router.command("eval", help="测试集准确率与可靠性图（ECE）", arguments=[PLOT_ARGUMENT])
@handle_cli_errors
def cmd_eval(args) -> int:
    config = resolve_run_config(args)
    model = load_model(config)
    test_ds = load_split(config, "test")
    check_model_data(model, test_ds)
    calib = reliability(model, test_ds, config.eval.ece_bins)
    report = EvalReport(accuracy=accuracy(model, test_ds), reliability=calib)

    out = output_dir(config, "eval")
    write_reliability(calib, out, config.eval.plot)
    write_json(report, out / "report.json")
    logger.info(f"准确率 {report.accuracy:.4f}, ECE {calib.ece:.4f}")
    return ExitCode.SUCCESS


def _ood_partner(spec: str, dataset: Dataset, n: int, rng: np.random.Generator) -> np.ndarray:
    """interp | noise | shift:<dx> | 任意数据描述符"""
    if spec == "interp":
        return interp_ood(dataset, n, rng)
    if spec == "noise":
        return uniform_noise(dataset.shape, n, dataset.clamp_range, rng, dataset.class_count).samples
    if spec.startswith("shift:"):
        return shifted_toy(dataset, float(spec.split(":", 1)[1])).samples[:n]
    return parse_data_spec(spec, "test").samples[:n]


@router.command("ood", help="分布外检测：密度得分直方图与 AUROC", arguments=[PLOT_ARGUMENT])
@handle_cli_errors
def cmd_ood(args) -> int:
    config = resolve_run_config(args)
    options = config.eval
    model = load_model(config)
    test_ds = load_split(config, "test")
    check_model_data(model, test_ds)

    spec = options.ood_data or "interp"
    data_out = _ood_partner(spec, test_ds, options.ood_n, derive_seeds(config.seed).rng("eval"))
    result = ood_report(model, test_ds.samples[:options.ood_n], data_out, options.ood_method, label=spec)

    out = output_dir(config, "ood")
    write_ood([result], out, options.plot)
    write_json(EvalReport(ood=[result]), out / "report.json")
    return ExitCode.SUCCESS


@router.command("attack", help="PGD 攻击下的鲁棒准确率曲线", arguments=[PLOT_ARGUMENT])
@handle_cli_errors
def cmd_attack(args) -> int:
    config = resolve_run_config(args)
    options = config.eval
    model = load_model(config)
    test_ds = load_split(config, "test")
    check_model_data(model, test_ds)

    points = robustness_curve(model, test_ds, options.attack_norm, options.eps, options.pgd_steps,
                              options.pgd_step_ratio, derive_seeds(config.seed).rng("attack"), options.random_start)
    out = output_dir(config, "attack")
    write_robustness(points, out, options.plot)
    write_json(EvalReport(accuracy=accuracy(model, test_ds), robustness=points), out / "report.json")
    return ExitCode.SUCCESS


@router.command("landscape", help="沿随机（滤波归一化）方向的能量地形切片", arguments=[PLOT_ARGUMENT])
@handle_cli_errors
def cmd_landscape(args) -> int:
    config = resolve_run_config(args)
    options = config.eval
    model = load_model(config)
    train_ds = load_split(config, "train")
    check_model_data(model, train_ds)

    subset = landscape_subset(train_ds, options.landscape_fraction, options.landscape_cap,
                              derive_seeds(config.seed).rng("eval"))
    grid = offset_grid(*options.landscape_range, options.landscape_points)
    result = landscape_slice(model, subset, options.landscape_dims, grid, options.landscape_norm, config.seed)

    out = output_dir(config, "landscape")
    write_landscape(result, out, options.plot)
    logger.info(f"地形切片: {len(subset)} 条样本, 中心能量 {result.base_energy:.6g}")
    return ExitCode.SUCCESS
