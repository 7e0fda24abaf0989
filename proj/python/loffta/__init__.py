# Copyright (c) 2026 The loffta Authors
# SPDX-License-Identifier: Apache-2.0
"""Train compact classifiers on cached foundation-model feature grids."""

from ._core import (
    CacheError,
    ConfigError,
    CorruptShard,
    DivergenceError,
    EmptySplit,
    IndexError,
    InvalidParameter,
    InvalidValue,
    LofftaError,
    ShapeMismatch,
    StorageError,
    __version__,
    add_noise,
    bench_infer,
    bench_train,
    build_synthetic_cache,
    evaluate,
    flip,
    pool,
    pool_cache,
    provider_invocations,
    read_record,
    resize,
    rotate,
    shear,
    train,
    translate,
    validate_cache,
)

__all__ = [
    "CacheError",
    "ConfigError",
    "CorruptShard",
    "DivergenceError",
    "EmptySplit",
    "IndexError",
    "InvalidParameter",
    "InvalidValue",
    "LofftaError",
    "ShapeMismatch",
    "StorageError",
    "__version__",
    "add_noise",
    "bench_infer",
    "bench_train",
    "build_synthetic_cache",
    "evaluate",
    "flip",
    "pool",
    "pool_cache",
    "provider_invocations",
    "read_record",
    "resize",
    "rotate",
    "shear",
    "train",
    "translate",
    "validate_cache",
]
