"""duorouter: cost-aware query routing between a small and a large model."""

from .dataset import (
    Dataset,
    ParseError,
    QualitySamples,
    QuerySample,
    SchemaError,
    load_dataset,
    save_dataset,
    split_view,
)
from .evaluation import (
    EvaluationReport,
    TradeoffPoint,
    build_report,
    cost_advantage_pct,
    cross_metric_report,
    drop_at_cost_advantage,
    gap_difference,
    mean_quality,
    pearson,
    quality_drop_pct,
    spearman,
    tradeoff_curve,
)
from .labeling import (
    GapEstimate,
    LabeledExample,
    LabelScheme,
    build_labels,
    default_t_grid,
    estimate_gap,
    find_t_star,
    label_det,
    label_prob,
    label_trans,
    transform_objective,
)
from .policy import (
    CalibrationResult,
    RoutingDecision,
    RoutingPolicy,
    calibrate_threshold,
    decide,
    route,
)
from .router import (
    FeaturizerConfig,
    RouterModel,
    TrainingConfig,
    TrainingError,
    attach_features,
    bce_loss,
    featurize,
    gradient_check,
    load_model,
    save_model,
    score,
    score_samples,
    train,
)

__version__ = "0.1.0"
