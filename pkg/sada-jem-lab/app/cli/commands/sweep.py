import logging
from typing import Any, Dict, List, Sequence

from ...core.errors import ConfigError, ExitCode, handle_cli_errors
from ...schemas.run import parse_value
from ...services.sweep_service import run_sweep
from ..context import load_split, output_dir, resolve_run_config
from ..router import CommandRouter

logger = logging.getLogger(__name__)

router = CommandRouter()


def parse_axes(specs: Sequence[str]) -> Dict[str, List[Any]]:
    """KEY=V1,V2,... -> {KEY: [V1, V2, ...]}"""
    axes: Dict[str, List[Any]] = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"扫描维度格式应为 KEY=V1,V2: {spec}")
        key, values = spec.split("=", 1)
        parsed = parse_value(values)
        axes[key.strip()] = parsed if isinstance(parsed, list) else [parsed]
    return axes


@router.command("sweep", help="消融网格：逐点训练并汇总到 sweep.csv", arguments=[
    (["--axis"], {"action": "append", "default": [], "metavar": "KEY=V1,V2", "help": "扫描维度，可重复"}),
])
@handle_cli_errors
def cmd_sweep(args) -> int:
    axes = parse_axes(getattr(args, "axis", []))
    if not axes:
        raise ConfigError("至少需要一个 --axis")
    config = resolve_run_config(args)
    out = output_dir(config, "sweep")
    frame = run_sweep(config, axes, load_split(config, "train"), load_split(config, "test"), out)
    logger.info(f"扫描结果写入 {out / 'sweep.csv'} ({len(frame)} 行)")
    return ExitCode.SUCCESS
