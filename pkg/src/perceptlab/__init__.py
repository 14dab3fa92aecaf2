"""Injective deep-feature perceptual metric, relativistic adversarial
supervision and a two-stage super-resolution harness."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    DTYPE,
    ConfigurationError,
    DataIOError,
    DegenerateWeightsError,
    DimensionError,
    DivergenceError,
    DomainError,
    FeaturePyramid,
    ImageTensor,
    PairedSample,
    PerceptLabError,
    RegistryError,
    RngSeed,
    ScoreRecord,
    bicubic_downsample,
    channel_stats,
    read_png,
    write_png,
)
from .backbones import (  # noqa: E402
    REGISTRY,
    BackboneRegistry,
    BackboneSpec,
    build_backbone,
    extract_features,
    load_weights,
    register_backbone,
    save_weights,
)
from .perceptual import (  # noqa: E402
    MetricSchedule,
    MetricWeights,
    PerceptualMetric,
    StabilityConstants,
    load_metric,
    make_metric,
    perceptual_distance,
    project_weights,
    save_metric,
    train_metric,
    weight_gradients,
)
from .adversarial import (  # noqa: E402
    AdvBatch,
    Discriminator,
    DiscriminatorOutput,
    DiscriminatorSpec,
    alternating_step,
    build_discriminator,
    discriminate,
    discriminator_loss,
    extract_disc_backbone,
    generator_loss,
)
from .objective import LAMBDA3_SWEEP, SETTINGS, ObjectiveConfig, composite_loss, make_setting  # noqa: E402
from .srharness import (  # noqa: E402
    SRCheckpoint,
    SRDatasetSpec,
    SRModelSpec,
    TrainSchedule,
    infer,
    make_pairs,
    train_stage1,
    train_stage2,
)
from .evaluation import (  # noqa: E402
    CorrelationReport,
    InitMode,
    LogisticParams,
    SplitSpec,
    apply_rescale,
    fit_logistic,
    plcc,
    run_fr_benchmark,
    run_transfer_experiment,
    srcc,
)
from .report import emit_report  # noqa: E402
from .config import ExperimentConfig, parse_config  # noqa: E402
