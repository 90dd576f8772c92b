"""Desk-scale synthesis of early/late-phase DCE-MRI from non-contrast MRI.

A window-attention transformer generator trained as a conditional WGAN-GP
with mutual-information and dual-domain frequency losses, plus a synthetic
phantom dataset, an evaluation suite and a command-line interface.
"""

from .adversarial import (
    AdversarialTerms,
    CriticConfig,
    PatchCritic,
    adversarial_terms,
    gradient_penalty,
)
from .data import (
    Modality,
    MriVolume,
    NormalizationParams,
    Study,
    TrainingSample,
    center_crop,
    extract_slices,
    load_dataset,
    load_samples,
    normalize_volume,
    reassemble_volumes,
    save_dataset,
)
from .generator import (
    GeneratorConfig,
    LeWinBlock,
    SynthesisGenerator,
    apply_modulator,
    window_partition,
    window_reverse,
)
from .losses import (
    LossWeights,
    SoftHistogramConfig,
    composite_generator_loss,
    entropy,
    freq_fft_loss,
    freq_pixel_loss,
    frequency_split,
    gaussian_lowpass,
    mi_loss,
    soft_joint_histogram,
    soft_marginal_histogram,
)
from .metrics import (
    MetricsReport,
    RandomConvExtractor,
    evaluate_dataset,
    fid,
    fid_from_features,
    mae,
    psnr,
    ssim,
)
from .phantom import PhantomSpec, generate_phantom
from .training import (
    AblationTable,
    StepRecord,
    TrainConfig,
    TrainHistory,
    TrainState,
    ablate,
    fit,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"
