"""Desk-scale language-modeling lab: recurrent-transformer LMs with
segment-wise recurrence, training, perplexity evaluation, extended-history
N-best rescoring, WER scoring and matched-pairs significance testing."""

from .tensor import Tensor, GradTape, ShapeError, NumericError, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "GradTape", "ShapeError", "NumericError", "no_grad"]
