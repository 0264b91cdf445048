"""Rotary position encoding applied to per-head query/key states."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, rotate_pairs


def rope_tables(positions: np.ndarray, dim: int, base: float,
                dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [len(positions), dim/2].

    Pair i of a head vector is rotated by angle position * base**(-2i/dim).
    """
    if dim % 2 != 0:
        raise ConfigError(f"rotary encoding needs an even head dimension, got {dim}")
    pos = np.asarray(positions, dtype=dtype)
    freqs = base ** (-2.0 * np.arange(dim // 2, dtype=dtype) / dim)
    angles = pos[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate x[..., l, dim] with tables from rope_tables; preserves pair norms."""
    return rotate_pairs(x, cos, sin)
