"""Feature-to-image embedding (REFINED / integrated REFINED) with ensemble
combination and a bootstrap evaluation harness."""

from .dataio import (
    FeatureTable,
    NormalizationParams,
    SplitIndex,
    clean_samples,
    load_feature_table,
    normalize_features,
    split_samples,
)
from .distances import (
    DistanceMatrix,
    FusedDistance,
    PrecisionWeights,
    embedding_distances,
    estimate_precisions,
    fuse_distances,
    geodesic_distances,
    pairwise_euclidean,
)
from .ensemble import (
    ImageTensorSet,
    PredictionSet,
    RegressorModel,
    StackingModel,
    fit_reference_regressor,
    fit_stacking,
    predict_reference,
    predict_stacked,
    stack_images,
)
from .evaluation import (
    BootstrapSummary,
    GapResult,
    MetricReport,
    bootstrap_metrics,
    gap_statistic,
    jackknife_bootstrap_ci,
    kendall_tau_distances,
    kl_divergence_distances,
    kmeans,
    null_model_predictions,
    robustness_wins,
    score,
)
from .images import (
    PixelAssignment,
    PipelineOptions,
    RefinedImageSet,
    assignment_cost,
    hill_climb,
    irefined_pipeline,
    rasterize,
    refined_pipeline,
    render_images,
)
from .projections import (
    Embedding,
    ProjectionSpec,
    bmds_sample,
    classical_mds,
    isomap,
    laplacian_eigenmaps,
    lle,
    normalize_to_unit_square,
    procrustes_residual,
    smacof_refine,
)

__version__ = "0.1.0"
