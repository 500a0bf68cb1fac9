from .gradcheck import CheckEntry, VerificationReport, grad_check
from .rng import make_rng
from .tensor import Graph, NonFiniteError, Tensor, backward

__all__ = [
    "CheckEntry",
    "Graph",
    "NonFiniteError",
    "Tensor",
    "VerificationReport",
    "backward",
    "grad_check",
    "make_rng",
]
