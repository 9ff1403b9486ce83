"""
命令行入口
python -m app.main <train|sample|eval|ood|attack|landscape|sweep> [--config FILE] [--key value ...]
"""

import sys
from typing import Optional, Sequence

from app.cli import cli_router
from app.core.config import settings
from app.core.errors import ExitCode
from app.core.logger import setup_logger


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = cli_router.build_parser()
    args, extra = parser.parse_known_args(argv)
    setup_logger("app", settings.LOG_FILE, getattr(args, "log_level", None) or settings.LOG_LEVEL)

    if getattr(args, "handler", None) is None:
        parser.print_help()
        return ExitCode.USAGE
    args.extra = extra
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
