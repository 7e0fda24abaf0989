# Copyright (c) 2026 The loffta Authors
# SPDX-License-Identifier: Apache-2.0
"""Extractor interface: write caches from a real pretrained vision model.

Only the interface lives here. ``extract_images`` needs a model runtime and
is not implemented in this package; ``verify_against_primary`` works on any
cache, including synthetic ones.
"""

from __future__ import annotations

import dataclasses
import os
import shutil
import subprocess
import tempfile
from pathlib import Path
from typing import Optional


class GridAmbiguity(ValueError):
    """The model's token count does not reshape to a square grid."""


@dataclasses.dataclass(frozen=True)
class PoolSpec:
    mode: str = "max"
    kernel: int = 2
    stride: int = 2


@dataclasses.dataclass
class VerifyReport:
    validate_exit: int
    train_exit: int
    validate_output: str
    train_output: str

    @property
    def ok(self) -> bool:
        return self.validate_exit == 0 and self.train_exit == 0


def grid_side(image_size: int, patch_size: int) -> int:
    """Tokens per side for a square image, e.g. 224 / 14 = 16."""
    if image_size <= 0 or patch_size <= 0:
        raise ValueError("image_size and patch_size must be positive")
    if image_size % patch_size:
        raise GridAmbiguity(f"image size {image_size} is not a multiple of patch size {patch_size}")
    return image_size // patch_size


def extract_images(
    model_id: str,
    image_dir: os.PathLike,
    image_size: int,
    out_root: os.PathLike,
    dtype: str = "f32",
    pool: Optional[PoolSpec] = None,
) -> dict:
    """Run images through a frozen model and write a cache. Returns the manifest."""
    raise NotImplementedError(
        "feature extraction from pretrained models is not part of this package; "
        "write shards in the documented format or use build_synthetic_cache"
    )


def _find_cli() -> str:
    exe = os.environ.get("LOFFTA_CLI") or shutil.which("loffta")
    if not exe:
        raise EnvironmentError("loffta executable not found; set LOFFTA_CLI or put it on PATH")
    return exe


def verify_against_primary(out_root: os.PathLike, steps: int = 10) -> VerifyReport:
    """Run `loffta validate` and a short `loffta train` on a cache."""
    exe = _find_cli()
    root = str(Path(out_root))
    v = subprocess.run([exe, "validate", "--cache", root], capture_output=True, text=True)
    with tempfile.TemporaryDirectory() as tmp:
        config = Path(tmp) / "config.json"
        config.write_text('{"model": {"embed_dim": 32, "depth": 1, "heads": 2}}')
        t = subprocess.run(
            [exe, "train", "--cache", root, "--config", str(config), "--out", str(Path(tmp) / "run"),
             "--max-steps", str(steps), "--batch-size", "8"],
            capture_output=True,
            text=True,
        )
    return VerifyReport(v.returncode, t.returncode, v.stdout + v.stderr, t.stdout + t.stderr)
