from .tensor import FlopCounter, Tape, Tensor, active_tape, flop_scope, get_dtype, precision
from . import ops
from .optim import Adam
