from .commands import evaluate, sample, sweep, train
from .router import CommandRouter

# 创建主路由器
cli_router = CommandRouter()

# 注册各个模块的命令
cli_router.include_router(train.router)
cli_router.include_router(sample.router)
cli_router.include_router(evaluate.router)
cli_router.include_router(sweep.router)
