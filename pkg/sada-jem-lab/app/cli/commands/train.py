import logging

from ...core.errors import ExitCode, handle_cli_errors
from ...services.trainer_service import train
from ..context import load_split, output_dir, resolve_run_config
from ..router import CommandRouter

logger = logging.getLogger(__name__)

router = CommandRouter()


@router.command("train", help="训练 SADA-JEM 模型（--train.baseline softmax 为普通分类器）")
@handle_cli_errors
def cmd_train(args) -> int:
    """训练并写出运行目录；发散时退出码为 1，诊断记录写入 diagnostic.json"""
    config = resolve_run_config(args)
    out = output_dir(config, f"train_seed{config.seed}")
    train_ds = load_split(config, "train")
    test_ds = load_split(config, "test")
    result = train(config, train_ds, test_ds, out)
    logger.info(f"运行目录: {out} (检查点 {len(result.checkpoints)} 个)")
    return ExitCode.SUCCESS
