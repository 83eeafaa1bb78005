"""Dense numeric kernel: tape autodiff, small MLPs, SGD with momentum, losses."""
from lastshot.numkit.functional import cross_entropy, kl_divergence, log_softmax, softmax
from lastshot.numkit.mlp import MlpParams, Net, init_mlp, mlp_forward, value_and_grad
from lastshot.numkit.optim import SgdMomentumState, sgd_momentum_step
from lastshot.numkit.tensor import GradTape, Tensor, grad, no_grad

__all__ = [
    "GradTape",
    "MlpParams",
    "Net",
    "SgdMomentumState",
    "Tensor",
    "cross_entropy",
    "grad",
    "init_mlp",
    "kl_divergence",
    "log_softmax",
    "mlp_forward",
    "no_grad",
    "sgd_momentum_step",
    "softmax",
    "value_and_grad",
]
