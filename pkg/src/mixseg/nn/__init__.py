from .tensor_autograd import Tape, Tensor, backward

__all__ = ["Tape", "Tensor", "backward"]
