"""Flow-based temporal super-resolution of ensemble scalar fields."""

from flint_tsr.fieldio import (
    EnsembleSet,
    FlowGrid,
    Grid,
    Member,
    SynthConfig,
    normalize_ensemble,
    read_ensemble,
    synth_ensemble,
)
from flint_tsr.flint import FlintConfig, build_flint, infer
from flint_tsr.hyper import FlintStarConfig, HyperConfig, build_hyperflint, hyper_infer
from flint_tsr.losses import LossWeights
from flint_tsr.motion import Motion, make_motion
from flint_tsr.struct import ConfigStruct
from flint_tsr.trainer import TrainConfig, train
from flint_tsr.types import Array, Boolean, Choice, Float, Int
