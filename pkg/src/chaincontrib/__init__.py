"""Contribution estimation for multi-stage processes.

Per-actor ensembles report predictive uncertainty on a shared quality
metric; a coordinator ranks the reports against a pure-noise reference.
A centralised Shapley-value benchmark runs on pooled features for
comparison.
"""

from chaincontrib.baseline import (
    SHARED_ACTOR_ID,
    CentralModel,
    ShapReport,
    aggregate_company,
    exact_shapley,
    explain_central,
    kernel_shap,
    pool_features,
    train_central,
    write_shap_csvs,
)
from chaincontrib.dataset import (
    NOISE_ACTOR_ID,
    ActorDataset,
    MeasurementBlock,
    MetricSeries,
    ParseError,
    RawTable,
    SyntheticSpec,
    aggregate_quality,
    build_metric_series,
    clean_measurements,
    generate_synthetic,
    load_actor_datasets,
    load_csv,
    make_noise_actor,
    partition_actors,
    save_actor_datasets,
)
from chaincontrib.ensemble import (
    Ensemble,
    EnsembleHyper,
    Member,
    PredictiveSummary,
    TrainingError,
    load_ensemble,
    predict,
    save_ensemble,
    total_uncertainty,
    train_ensemble,
)
from chaincontrib.evaluation import (
    ComparisonReport,
    build_comparison,
    emit_report,
    invert_for_comparison,
    kendall_tau,
    minmax_align,
    spearman_rho,
)
from chaincontrib.protocol import (
    ActorServer,
    CallForUncertainty,
    CampaignError,
    ContributionRanking,
    Coordinator,
    Decline,
    DecodeError,
    InProcessTransport,
    LocalActor,
    MetricTransform,
    SocketTransport,
    UncertaintyResponse,
    decode_message,
    derive_seed,
    encode_message,
    handle_call,
    rank_contributions,
    run_campaign,
    run_noise_baseline,
)

__all__ = [
    "NOISE_ACTOR_ID",
    "SHARED_ACTOR_ID",
    "ActorDataset",
    "ActorServer",
    "CallForUncertainty",
    "CampaignError",
    "CentralModel",
    "ComparisonReport",
    "ContributionRanking",
    "Coordinator",
    "Decline",
    "DecodeError",
    "Ensemble",
    "EnsembleHyper",
    "InProcessTransport",
    "LocalActor",
    "MeasurementBlock",
    "Member",
    "MetricSeries",
    "MetricTransform",
    "ParseError",
    "PredictiveSummary",
    "RawTable",
    "ShapReport",
    "SocketTransport",
    "SyntheticSpec",
    "TrainingError",
    "UncertaintyResponse",
    "aggregate_company",
    "aggregate_quality",
    "build_comparison",
    "build_metric_series",
    "clean_measurements",
    "decode_message",
    "derive_seed",
    "emit_report",
    "encode_message",
    "exact_shapley",
    "explain_central",
    "generate_synthetic",
    "handle_call",
    "invert_for_comparison",
    "kendall_tau",
    "kernel_shap",
    "load_actor_datasets",
    "load_csv",
    "load_ensemble",
    "make_noise_actor",
    "minmax_align",
    "partition_actors",
    "pool_features",
    "predict",
    "rank_contributions",
    "run_campaign",
    "run_noise_baseline",
    "save_actor_datasets",
    "save_ensemble",
    "spearman_rho",
    "total_uncertainty",
    "train_central",
    "train_ensemble",
    "write_shap_csvs",
]

__version__ = "0.1.0"
