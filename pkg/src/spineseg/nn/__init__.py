from .gradcheck import gradient_check, reduced_check
from .layers import ShapeError, softmax, softmax_xent
from .network import Architecture, Network
from .optim import OptimizerConfig, OptimizerState, optimizer_step

__all__ = [
    "Architecture", "Network", "OptimizerConfig", "OptimizerState", "ShapeError",
    "gradient_check", "optimizer_step", "reduced_check", "softmax", "softmax_xent",
]
