"""
子命令注册
每个命令模块持有一个 CommandRouter，由 app.cli 汇总成一个 argparse 解析器
"""

import argparse
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Sequence, Tuple

from ..core.errors import ConfigError
from ..schemas.run import CONFIG_KEYS

Handler = Callable[[argparse.Namespace], int]
Argument = Tuple[Sequence[str], Dict[str, Any]]


@dataclass
class Command:
    name: str
    handler: Handler
    help: str
    arguments: List[Argument] = field(default_factory=list)


class CommandRouter:
    """命令路由器"""

    def __init__(self):
        self.commands: List[Command] = []

    def command(self, name: str, help: str, arguments: Sequence[Argument] = ()):
        def decorator(func: Handler) -> Handler:
            self.commands.append(Command(name, func, help, list(arguments)))
            return func
        return decorator

    def include_router(self, router: "CommandRouter") -> None:
        self.commands.extend(router.commands)

    def build_parser(self, prog: str = "jemlab") -> argparse.ArgumentParser:
        epilog = "配置项（可写入 --config 文件，或以 --<key> <value> 覆盖）:\n  " + "\n  ".join(CONFIG_KEYS)
        parser = argparse.ArgumentParser(prog=prog, description="SADA-JEM 桌面实验室",
                                         formatter_class=argparse.RawDescriptionHelpFormatter)
        subparsers = parser.add_subparsers(dest="command")
        for command in self.commands:
            sub = subparsers.add_parser(command.name, help=command.help, description=command.help, epilog=epilog,
                                        allow_abbrev=False, formatter_class=argparse.RawDescriptionHelpFormatter)
            sub.add_argument("--config", help="key = value 格式的配置文件")
            sub.add_argument("--log-level", dest="log_level", help="日志级别（默认取 JEMLAB_LOG_LEVEL）")
            for flags, kwargs in command.arguments:
                sub.add_argument(*flags, **kwargs)
            sub.set_defaults(handler=command.handler)
        return parser


def parse_overrides(extra: Sequence[str]) -> Dict[str, str]:
    """剩余的 --key value / --key=value 参数 -> 覆盖项（单独的 --flag 视为 True）"""
    overrides: Dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or len(token) == 2:
            raise ConfigError(f"无法识别的参数: {token}", {"argument": token})
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            value = extra[i + 1]
            i += 1
        else:
            value = "True"
        overrides[key] = value
        i += 1
    return overrides
