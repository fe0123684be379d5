"""Absorbing-state discrete diffusion over multi-level token grids."""

from maskdiff._core import (
    CachedExactScore,
    ConditionSet,
    ConfigError,
    DataError,
    DatasetRecord,
    GuidanceWeights,
    MMDiT,
    MMDiTConfig,
    NoiseSchedule,
    NumericError,
    SamplerConfig,
    ScoreField,
    SynthConfig,
    TokenGrid,
    ToyDistribution,
    Vocab,
    __version__,
    align_loss,
    condition_dropout,
    conditional_toy_distribution,
    curriculum_level,
    dse_loss,
    epfg_compose,
    exact_score_field,
    forward_sample,
    gen_dataset,
    identity_anchors,
    sample_many,
    tv_distance,
)

__all__ = [
    "CachedExactScore",
    "ConditionSet",
    "ConfigError",
    "DataError",
    "DatasetRecord",
    "GuidanceWeights",
    "MMDiT",
    "MMDiTConfig",
    "NoiseSchedule",
    "NumericError",
    "SamplerConfig",
    "ScoreField",
    "SynthConfig",
    "TokenGrid",
    "ToyDistribution",
    "Vocab",
    "__version__",
    "align_loss",
    "condition_dropout",
    "conditional_toy_distribution",
    "curriculum_level",
    "dse_loss",
    "epfg_compose",
    "exact_score_field",
    "forward_sample",
    "gen_dataset",
    "identity_anchors",
    "sample_many",
    "tv_distance",
]
