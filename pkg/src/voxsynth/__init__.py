"""voxsynth: metadata-conditioned volumetric synthesis on procedural phantoms.

Pipeline: a fine-grained vector-quantized autoencoder compresses volumes to
codebook sums, a least-squares model splits each quantized encoding into a
metadata component and a residual, a masked categorical diffusion model
learns the residual code distribution, and an evaluation battery scores the
anatomical plausibility of what comes back out of the decoder.
"""

__version__ = "0.1.0"

from .codec import (  # noqa: F401
    CodecParams,
    decode,
    encode,
    fine_quantize,
    nearest_code,
    quantize_grid,
    reconstruct,
    train_codec,
)
from .config import RunConfig, parse_config, serialize_config  # noqa: F401
from .disentangle import GLMModel, RCode, fit_glm, recombine, residual_to_rcode, split  # noqa: F401
from .evaluation import (  # noqa: F401
    EffectReport,
    RegionTable,
    anova_oneway,
    augmentation_experiment,
    classify_effect,
    cohens_d,
    fisher_z_compare,
    mmd,
    ms_ssim,
    pearson_r,
    plausibility_report,
    snr,
    t_test_one_sample,
    t_test_two_sample,
)
from .maskdiff import (  # noqa: F401
    MaskSchedule,
    NeuralDenoiser,
    SubcodePartition,
    TabularDenoiser,
    fdp_mask,
    rdp_step,
    sample_rcode,
    train_denoiser,
)
from .phantom import (  # noqa: F401
    LabeledVolume,
    Metadata,
    PhantomSpec,
    RegionSpec,
    default_spec,
    generate_cohort,
    generate_phantom,
    measure_regions_via_template,
)
from .synth import (  # noqa: F401
    PipelineModels,
    SynthRequest,
    SynthResult,
    counterfactual,
    novelty_check,
    synthesize,
)
from .tensor import Adam, Tape, Tensor, finite_diff_check  # noqa: F401
