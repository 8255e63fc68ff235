"""
Sparse 2D feature maps.

An ActiveSet holds the sorted occupied cells of one resolution together with
cached neighbour tables ("rulebooks"). Feature maps that share a resolution
share the ActiveSet, so every convolution at one level reuses its tables.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from app.nn.tensor import Tensor, as_tensor
from app.utils.errors import ShapeError


@dataclass(frozen=True, eq=False)
class ActiveSet:
    """Unique, in-bounds, lexicographically sorted (i, j) cells of an H x W grid."""
    height: int
    width: int
    coords: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if coords.size and (coords.min() < 0 or np.any(coords[:, 0] >= self.height)
                            or np.any(coords[:, 1] >= self.width)):
            raise ShapeError(f"active cell outside the {self.height}x{self.width} grid")
        keys = coords[:, 0] * self.width + coords[:, 1]
        if np.any(np.diff(keys) <= 0):
            raise ShapeError("active cells must be unique and sorted lexicographically")
        coords = coords.copy()
        coords.setflags(write=False)
        object.__setattr__(self, 'coords', coords)

    def __len__(self):
        return self.coords.shape[0]

    def __repr__(self):
        return f'<ActiveSet {self.height}x{self.width} active={len(self)}>'

    @classmethod
    def from_mask(cls, mask):
        mask = np.asarray(mask)
        return cls(mask.shape[0], mask.shape[1], np.argwhere(mask > 0))

    @cached_property
    def keys(self):
        return self.coords[:, 0] * self.width + self.coords[:, 1]

    @cached_property
    def index_grid(self):
        """Dense H x W array holding each active cell's row index, -1 elsewhere."""
        grid = np.full((self.height, self.width), -1, dtype=np.int64)
        grid[self.coords[:, 0], self.coords[:, 1]] = np.arange(len(self))
        return grid

    def same_as(self, other):
        return self is other or (self.height == other.height and self.width == other.width
                                 and np.array_equal(self.coords, other.coords))

    def lookup(self, coords):
        """Row index of each coordinate, -1 when inactive or out of bounds."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        inside = ((coords[:, 0] >= 0) & (coords[:, 0] < self.height)
                  & (coords[:, 1] >= 0) & (coords[:, 1] < self.width))
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        out[inside] = self.index_grid[coords[inside, 0], coords[inside, 1]]
        return out

    def submanifold_rulebook(self, kernel):
        """
        Neighbour tables for a k x k kernel whose outputs are this active set.

        Returns:
            list: one (in_idx, out_idx) pair per kernel tap in row-major tap
            order; tap (a, b) reads the cell at offset (a - k//2, b - k//2)
        """
        key = ('subm', kernel)
        if key not in self._cache:
            if kernel < 1 or kernel % 2 == 0:
                raise ShapeError(f"submanifold kernel must be odd, got {kernel}")
            radius = kernel // 2
            out_all = np.arange(len(self))
            book = []
            for di in range(-radius, radius + 1):
                for dj in range(-radius, radius + 1):
                    src = self.lookup(self.coords + np.array([di, dj]))
                    hit = src >= 0
                    book.append((src[hit], out_all[hit]))
            self._cache[key] = book
        return self._cache[key]

    def downsample(self):
        """
        Coarse active set of a 2 x 2 / stride 2 convolution and its rulebook.

        A coarse cell is active iff any of its four fine cells is active.
        """
        if 'down' not in self._cache:
            if self.height % 2 or self.width % 2:
                raise ShapeError(f"strided convolution needs even dims, got {self.height}x{self.width}")
            parent = self.coords // 2
            coarse_keys, out_idx = np.unique(parent[:, 0] * (self.width // 2) + parent[:, 1],
                                             return_inverse=True)
            coarse = ActiveSet(self.height // 2, self.width // 2,
                               np.stack([coarse_keys // (self.width // 2),
                                         coarse_keys % (self.width // 2)], axis=1))
            tap = (self.coords[:, 0] % 2) * 2 + self.coords[:, 1] % 2
            in_all = np.arange(len(self))
            book = [(in_all[tap == t], out_idx[tap == t]) for t in range(4)]
            self._cache['down'] = (coarse, book)
        return self._cache['down']

    def parent_index(self, coarse):
        """Row in `coarse` of each cell's parent (i//2, j//2), -1 when inactive."""
        if coarse.height * 2 != self.height or coarse.width * 2 != self.width:
            raise ShapeError(f"{coarse.height}x{coarse.width} is not half of {self.height}x{self.width}")
        return coarse.lookup(self.coords // 2)

    def pool_matrix(self, window):
        """Row-stochastic N x N matrix averaging each cell's active s x s neighbourhood."""
        key = ('pool', window)
        if key not in self._cache:
            book = self.submanifold_rulebook(window)
            src = np.concatenate([s for s, _ in book]) if book else np.zeros(0, np.int64)
            dst = np.concatenate([d for _, d in book]) if book else np.zeros(0, np.int64)
            counts = np.bincount(dst, minlength=len(self)).astype(np.float64)
            values = 1.0 / counts[dst]
            self._cache[key] = sparse.csr_matrix((values, (dst, src)), shape=(len(self), len(self)))
        return self._cache[key]


@dataclass(frozen=True, eq=False)
class SparseFeatureMap:
    """Feature rows (N, C) attached to the cells of an ActiveSet."""
    active: ActiveSet
    features: Tensor

    def __post_init__(self):
        feats = as_tensor(self.features)
        if feats.data.ndim != 2 or feats.shape[0] != len(self.active):
            raise ShapeError(f"features of shape {feats.shape} do not fit {len(self.active)} active cells")
        if not np.all(np.isfinite(feats.data)):
            raise ShapeError("feature map contains non-finite values")
        object.__setattr__(self, 'features', feats)

    @classmethod
    def from_dense(cls, dense, mask):
        """Build from an H x W x C array, keeping the cells where `mask` is nonzero."""
        active = ActiveSet.from_mask(mask)
        dense = np.asarray(dense, dtype=np.float64)
        return cls(active, Tensor(dense[active.coords[:, 0], active.coords[:, 1]]))

    def __repr__(self):
        return f'<SparseFeatureMap {self.height}x{self.width}x{self.channels} active={self.n_active}>'

    @property
    def height(self):
        return self.active.height

    @property
    def width(self):
        return self.active.width

    @property
    def coords(self):
        return self.active.coords

    @property
    def n_active(self):
        return len(self.active)

    @property
    def channels(self):
        return self.features.shape[1]

    def with_features(self, features):
        return SparseFeatureMap(self.active, features)

    def to_dense(self):
        out = np.zeros((self.height, self.width, self.channels))
        out[self.coords[:, 0], self.coords[:, 1]] = self.features.data
        return out
