"""Inverse design of metasurface radar absorbers with a physics-guided,
FiLM-conditioned denoising diffusion model and an analytic EM oracle."""

from .codec import (
    FabricabilityReport,
    MetaAtom,
    check_fabricable,
    decode,
    encode,
)
from .diffusion import (
    DiffusionSchedule,
    LossWeights,
    forward_sample,
    guided_noise,
    make_schedule,
    reverse_step,
    sample_design,
    sample_designs,
    training_loss,
)
from .forge import ForgeConfig, Sample, build_dataset, load_dataset, sample_meta_atom
from .metrics import DiversityConfig, aae, baa, band_set, diversity, spectral_mse
from .nets import (
    Condition,
    DenoiserUNet,
    SpectrumSurrogate,
    gradient_check_module,
    lr_at,
)
from .oracle import (
    Material,
    PatternFeatures,
    absorption,
    grounded_slab_impedance,
    pattern_features,
    reflection_spectrum,
    sheet_impedance,
)

__version__ = "0.1.0"
