from .network import (
    ForwardNodes,
    LogitModel,
    build_model,
    load_checkpoint,
    norm_layers,
    parameter_layout,
    save_checkpoint,
)
