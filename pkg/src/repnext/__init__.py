"""Reparameterizable multi-scale depthwise CNN engine with fusion audits."""

from .errors import (AlreadyFused, CorruptFile, DegenerateOutput, EvenCanvas, GroupMismatch,
                     InvalidConfig, NonDivisibleChannels, OddSpatial, ParityMismatch,
                     RepNeXtError, SchemaMismatch, ShapeMismatch, SpecMismatch, StrideOnFirst)
from .model import (VARIANTS, Model, ModelConfig, build_model, fuse_model, load_weights,
                    model_forward, save_weights)
from .ops import BNParams, ConvParams, ConvSpec, batchnorm_infer, conv2d, gelu, output_shape
from .tensor import SplitMix64, chunk_channels, concat_channels, max_abs_diff, random_tensor

__version__ = "0.1.0"
