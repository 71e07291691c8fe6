from .nn import (
    GruSpec,
    MlpSpec,
    forward_mlp,
    gru_step,
    init_gru,
    init_mlp,
    mlp_numpy,
    mlp_with_input_trace,
    recurrent_encode,
    recurrent_encode_numpy,
)
from .optim import Adam, optimizer_step
from .params import ParamStore, merge_stores
from .tensor import Tensor, backward, no_grad

__all__ = [
    "Adam",
    "GruSpec",
    "MlpSpec",
    "ParamStore",
    "Tensor",
    "backward",
    "forward_mlp",
    "gru_step",
    "init_gru",
    "init_mlp",
    "merge_stores",
    "mlp_numpy",
    "mlp_with_input_trace",
    "no_grad",
    "optimizer_step",
    "recurrent_encode",
    "recurrent_encode_numpy",
]
