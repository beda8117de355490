"""Python bindings for the evp visual prompting library."""

from ._evp import (
    Backbone,
    EvpError,
    build_mapping,
    compose,
    default_config,
    make_mask,
    mapping_from_frequencies,
    normalize_gradient,
    parameter_count,
    prompt_gradient,
    shrink,
    train,
)

__all__ = [
    "Backbone",
    "EvpError",
    "build_mapping",
    "compose",
    "default_config",
    "make_mask",
    "mapping_from_frequencies",
    "normalize_gradient",
    "parameter_count",
    "prompt_gradient",
    "shrink",
    "train",
]
