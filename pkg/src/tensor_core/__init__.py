from .tensor import (Tape, Tensor, TensorError, ShapeError, NonFiniteError, TapeError, backward, current_tape,  # noqa
                     default_dtype, get_default_dtype, new_tape, no_grad, set_debug, set_default_dtype)
from .module import Linear, Module, Parameter, RMSNorm, rms_normalize  # noqa
