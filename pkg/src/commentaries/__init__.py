"""Learning commentaries: meta-learned example weights, blending grids,
attention masks and auxiliary targets, trained through the student's own
training run."""

from .commentary import (
    Augmentation,
    AttentionMask,
    AuxTarget,
    ExampleWeight,
    FreeParameters,
    blend_batch,
    gaussian_mask,
    masked_loss,
    weighted_loss,
)
from .hypergrad import InnerProblem, ift_hypergrad, meta_train, neumann_inverse_hvp, unrolled_hypergrad
from .models import MlpSpec, forward, init_params, teacher_forward
from .optim import AdamConfig, SgdConfig
from .params import ParamVector
from .tensor import Tape, Tensor, grad, hvp, vjp

__version__ = "0.1.0"
