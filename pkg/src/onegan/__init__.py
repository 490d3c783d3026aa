"""OneGAN: one compound model for class-conditional generation, unsupervised
foreground segmentation, code clustering and object removal."""
from .blocks import DOWNBlk, GLUNorm, RESBlk, RESBlk0, ShapeError, UPBlk, glu_norm
from .core import (
    CodeBundle,
    ConfigError,
    EncoderPosterior,
    HyperParams,
    ImageQuad,
    LossWeights,
    MixupCoeffs,
    PriorBundle,
    RunConfig,
    load_config,
    onehot,
    parent_of,
    priors_from_indices,
    sample_mixup,
    sample_priors,
    save_config,
)
from .networks import OneGAN, make_discriminators
from .paths import autoencode_path, composite, dual_mixup, generation_path, mixup, segment
from .training import DiscriminatorBank, PhaseState, Trainer, apply_ablation, load_model, phase_schedule

__version__ = "0.1.0"
