"""Dense 3-D feature maps and the canonical flattening order.

A feature map is a square stack of channels addressed as [i][j][c] with
i, j in {0..N-1} and c in {0..C-1}.  Flattening uses the channel-minor,
row-major offset (i*N + j)*C + c so that flattened vectors are
bit-reproducible regardless of how the map was produced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch


@dataclass(frozen=True, eq=False)
class FeatureMap3:
    """Immutable square feature map of shape (side, side, depth), float64.

    Every element is finite; the backing array is read-only.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 3:
            raise ShapeMismatch(f"feature map needs 3 axes, got {arr.ndim}")
        if arr.shape[0] != arr.shape[1]:
            raise ShapeMismatch(f"feature map must be square, got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[2] < 1:
            raise ShapeMismatch(f"feature map axes must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ShapeMismatch("feature map contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def side(self) -> int:
        return self.data.shape[0]

    @property
    def depth(self) -> int:
        return self.data.shape[2]


# A 1-D feature vector is a plain float64 ndarray; helpers below define the
# only sanctioned conversion between vectors and maps.
Vector1 = np.ndarray


def index_of(i: int, j: int, c: int, side: int, depth: int) -> int:
    """Flat offset of element [i][j][c] in the canonical layout."""
    assert 0 <= i < side and 0 <= j < side, (i, j, side)
    assert 0 <= c < depth, (c, depth)
    return (i * side + j) * depth + c


def zero_pad(fm: FeatureMap3, p: int) -> FeatureMap3:
    """Surround each channel with p rows/columns of exact zeros."""
    if p < 0:
        raise ValueError(f"padding must be non-negative, got {p}")
    if p == 0:
        return fm
    n, c = fm.side, fm.depth
    out = np.zeros((n + 2 * p, n + 2 * p, c), dtype=np.float64)
    out[p:p + n, p:p + n, :] = fm.data
    return FeatureMap3(out)


def flatten(fm: FeatureMap3) -> Vector1:
    """Reshape a map to a 1-D vector in canonical (i, j, c) order."""
    return fm.data.reshape(-1).copy()


def unflatten(vec: Vector1, side: int, depth: int) -> FeatureMap3:
    """Inverse of flatten for the given (side, depth)."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != side * side * depth:
        raise ShapeMismatch(
            f"vector of length {vec.size} cannot fill a {side}x{side}x{depth} map")
    return FeatureMap3(vec.reshape(side, side, depth))
