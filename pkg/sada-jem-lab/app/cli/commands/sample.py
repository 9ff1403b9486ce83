import logging

import numpy as np

from ...core.errors import ConfigError, ExitCode, handle_cli_errors
from ...core.seeds import derive_seeds
from ...services.sampler_service import (
    fit_informative_init,
    generate_samples,
    rank_samples,
    write_raster_grid,
    write_sample_dump,
)
from ..context import check_model_data, load_model, load_split, output_dir, resolve_run_config
from ..router import CommandRouter

logger = logging.getLogger(__name__)

router = CommandRouter()


@router.command("sample", help="从检查点生成样本（信息初始化 + 新 SGLD 链）", arguments=[
    (["--n"], {"type": int, "help": "样本数（eval.sample_n）"}),
    (["--k"], {"type": int, "help": "SGLD 步数（eval.sample_k）"}),
    (["--class"], {"dest": "sample_class", "type": int, "help": "条件生成的类别（eval.sample_class）"}),
])
@handle_cli_errors
def cmd_sample(args) -> int:
    config = resolve_run_config(args, {
        "eval.sample_n": getattr(args, "n", None),
        "eval.sample_k": getattr(args, "k", None),
        "eval.sample_class": getattr(args, "sample_class", None),
    })
    options = config.eval
    model = load_model(config)
    class_count = model.config.class_count
    if options.sample_class is not None and not 0 <= options.sample_class < class_count:
        raise ConfigError(f"条件类别越界: {options.sample_class}（类别数 {class_count}）",
                          {"class": options.sample_class})

    train_ds = load_split(config, "train")
    check_model_data(model, train_ds)
    init = fit_informative_init(train_ds, class_count, config.train.init_floor)
    sgld = config.train.sgld.model_copy(update={
        "k": options.sample_k,
        "clamp_range": config.train.sgld.clamp_range or train_ds.clamp_range,
    })
    samples = generate_samples(model, init, options.sample_n, sgld, derive_seeds(config.seed).rng("sampler"),
                               options.sample_class)

    scores = None
    if options.rank != "none" and len(samples):
        order, scores = rank_samples(model, samples, options.rank)
        samples, scores = samples[order], scores[order]
    classes = None if options.sample_class is None else np.full(len(samples), options.sample_class)

    out = output_dir(config, "samples")
    path = write_sample_dump(out / "samples.jlab", samples, scores, classes)
    if train_ds.is_image and len(samples) and train_ds.shape[0] in (1, 3):
        write_raster_grid(out / "samples", samples, train_ds.clamp_range)
    logger.info(f"样本写入 {path}")
    return ExitCode.SUCCESS
