"""Python access to the FPTrans C++ core."""

from ._core import (
    ConfigError,
    DimensionError,
    EpisodeInvalid,
    ParseError,
    config_items,
    evaluate,
    foreground_probability,
    generate_dataset,
    gradcheck,
    masked_mean,
    miou,
    pairwise_loss,
    partition,
    probability_from_similarities,
    train,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "EpisodeInvalid",
    "ParseError",
    "config_items",
    "evaluate",
    "foreground_probability",
    "generate_dataset",
    "gradcheck",
    "masked_mean",
    "miou",
    "pairwise_loss",
    "partition",
    "probability_from_similarities",
    "train",
]
