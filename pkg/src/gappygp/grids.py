"""Data model for datasets on partial Cartesian product grids.

A full grid is the Cartesian product of ``d`` strictly increasing coordinate
axes, giving ``M = prod(m_l)`` cells. Responses may be missing on part of the
grid: the observed cells (index set X, size N) and the gap cells (index set
Z, size L = M - N) partition the grid. :func:`select` and :func:`scatter`
implement the action of the sparse 0/1 selection matrices that gather and
spread subsets of grid vectors; linear indices are row-major with the first
axis slowest, matching the order in which Kronecker factors act.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "GridSpec",
    "IndexSets",
    "GappyDataset",
    "select",
    "scatter",
    "save_dataset",
    "load_dataset",
    "atomic_write_bytes",
    "DATASET_FORMAT_VERSION",
]

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Cartesian product grid defined by per-axis coordinate vectors.

    Parameters
    ----------
    axes : sequence of 1-d arrays
        ``axes[l]`` holds the ``m_l`` strictly increasing coordinates along
        axis ``l``. The full grid has ``M = prod(m_l)`` points.
    """

    axes: tuple[np.ndarray, ...]

    def __post_init__(self):
        axes = tuple(np.ascontiguousarray(a, dtype=np.float64) for a in self.axes)
        if len(axes) < 1:
            raise ValueError("grid needs at least one axis")
        for l, a in enumerate(axes):
            if a.ndim != 1 or a.size < 1:
                raise ValueError(f"axis {l} must be a non-empty 1-d coordinate vector")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"axis {l} has non-finite coordinates")
            if a.size > 1 and not np.all(np.diff(a) > 0):
                raise ValueError(f"axis {l} coordinates must be strictly increasing")
        object.__setattr__(self, "axes", axes)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        """Total number of grid cells M."""
        return int(np.prod(self.shape))

    def flatten_index(self, multi) -> int:
        """Linear index of a multi-index, row-major with axis 0 slowest.

        This is the ordering under which a Kronecker product of per-axis
        matrices acts on flattened grid vectors.
        """
        multi = tuple(int(i) for i in multi)
        if len(multi) != self.ndim:
            raise IndexError(f"expected {self.ndim} indices, got {len(multi)}")
        for l, (i, m) in enumerate(zip(multi, self.shape)):
            if not 0 <= i < m:
                raise IndexError(f"index {i} out of range for axis {l} of size {m}")
        return int(np.ravel_multi_index(multi, self.shape))

    def unflatten_index(self, linear: int) -> tuple[int, ...]:
        """Inverse of :meth:`flatten_index`."""
        linear = int(linear)
        if not 0 <= linear < self.size:
            raise IndexError(f"linear index {linear} out of range for grid of size {self.size}")
        return tuple(int(i) for i in np.unravel_index(linear, self.shape))

    def point(self, linear: int) -> np.ndarray:
        """Coordinates of the grid cell with the given linear index."""
        multi = self.unflatten_index(linear)
        return np.array([self.axes[l][i] for l, i in enumerate(multi)])

    def all_points(self) -> np.ndarray:
        """All M grid points as an (M, d) array, in linear-index order.

        Materializes the full grid; intended for desk-scale oracles only.
        """
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True, eq=False)
class IndexSets:
    """Partition of grid linear indices into observed (X) and gap (Z) sets."""

    x_indices: np.ndarray
    z_indices: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.x_indices, dtype=np.int64)
        z = np.ascontiguousarray(self.z_indices, dtype=np.int64)
        m = x.size + z.size
        combined = np.concatenate([x, z])
        combined.sort()
        if m == 0 or not np.array_equal(combined, np.arange(m)):
            raise ValueError("x_indices and z_indices must partition 0..M-1")
        if x.size > 1 and not np.all(np.diff(x) > 0):
            raise ValueError("x_indices must be sorted ascending without duplicates")
        if z.size > 1 and not np.all(np.diff(z) > 0):
            raise ValueError("z_indices must be sorted ascending without duplicates")
        object.__setattr__(self, "x_indices", x)
        object.__setattr__(self, "z_indices", z)

    @classmethod
    def from_mask(cls, observed_mask) -> "IndexSets":
        """Build from a length-M boolean vector, True marking observed cells."""
        mask = np.asarray(observed_mask, dtype=bool).ravel()
        idx = np.arange(mask.size)
        return cls(idx[mask], idx[~mask])

    @classmethod
    def complete(cls, m: int) -> "IndexSets":
        """All M cells observed (no gaps)."""
        return cls(np.arange(m), np.empty(0, dtype=np.int64))

    @property
    def n_observed(self) -> int:
        return self.x_indices.size

    @property
    def n_gaps(self) -> int:
        return self.z_indices.size

    @property
    def n_total(self) -> int:
        return self.x_indices.size + self.z_indices.size

    def observed_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_total, dtype=bool)
        mask[self.x_indices] = True
        return mask


def select(v, idx_list) -> np.ndarray:
    """Gather entries of ``v`` at ``idx_list`` (action of a selection matrix).

    ``select(v, X)`` is ``W v`` and ``select(v, Z)`` is ``V v`` for the sparse
    selection matrices with one unit entry per row.
    """
    v = np.asarray(v)
    idx = np.asarray(idx_list, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= v.shape[0]):
        raise IndexError("selection index out of range")
    return v[idx]


def scatter(s, idx_list, size: int) -> np.ndarray:
    """Spread entries of ``s`` into a zero vector of the given length.

    ``scatter(s, X, M)`` is ``W^T s``; entries not in ``idx_list`` are zero,
    so ``select(scatter(s, idx, M), idx) == s``. Duplicate indices are an
    error: selection matrices address distinct cells by construction.
    """
    s = np.asarray(s, dtype=np.float64).ravel()
    idx = np.asarray(idx_list, dtype=np.int64).ravel()
    if s.size != idx.size:
        raise ValueError(f"value/index length mismatch: {s.size} vs {idx.size}")
    if idx.size:
        if idx.min() < 0 or idx.max() >= size:
            raise IndexError("scatter index out of range")
        if np.unique(idx).size != idx.size:
            raise ValueError("duplicate indices in scatter")
    out = np.zeros(size)
    out[idx] = s
    return out


@dataclass(frozen=True, eq=False)
class GappyDataset:
    """Responses observed on part of a grid.

    ``y_obs`` holds the N observed responses in grid (linear-index) order.
    ``y_full_oracle`` optionally carries ground truth on all M cells; it is
    used only by test harnesses and is never visible to solvers.
    """

    grid: GridSpec
    idx: IndexSets
    y_obs: np.ndarray
    y_full_oracle: np.ndarray | None = None

    def __post_init__(self):
        y = np.ascontiguousarray(self.y_obs, dtype=np.float64).ravel()
        if self.idx.n_total != self.grid.size:
            raise ValueError("index sets do not cover the grid")
        if y.size != self.idx.n_observed:
            raise ValueError(f"y_obs has {y.size} entries, expected {self.idx.n_observed}")
        if not np.all(np.isfinite(y)):
            raise ValueError("y_obs must be finite")
        object.__setattr__(self, "y_obs", y)
        if self.y_full_oracle is not None:
            full = np.ascontiguousarray(self.y_full_oracle, dtype=np.float64).ravel()
            if full.size != self.grid.size:
                raise ValueError("y_full_oracle length must equal grid size")
            object.__setattr__(self, "y_full_oracle", full)

    @classmethod
    def fully_observed(cls, grid: GridSpec, y_full) -> "GappyDataset":
        y_full = np.asarray(y_full, dtype=np.float64).ravel()
        return cls(grid, IndexSets.complete(grid.size), y_full, y_full_oracle=y_full)

    def y_padded(self) -> np.ndarray:
        """Length-M vector with observed responses on X and zeros on Z."""
        return scatter(self.y_obs, self.idx.x_indices, self.grid.size)


# ---------------------------------------------------------------------------
# Dataset files: a JSON manifest plus raw little-endian binary payloads.
# Responses are stored for all M cells in grid order (zeros on gaps unless an
# oracle payload is present); the mask stores one byte per cell, 1 observed.
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write a file via temp-and-rename so readers never see partial content."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(dataset: GappyDataset, directory) -> Path:
    """Write manifest + binary payloads; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    responses = dataset.y_padded()
    mask = dataset.idx.observed_mask().astype(np.uint8)
    atomic_write_bytes(directory / "responses.f64", responses.astype("<f8").tobytes())
    atomic_write_bytes(directory / "mask.u8", mask.tobytes())

    manifest = {
        "version": DATASET_FORMAT_VERSION,
        "d": dataset.grid.ndim,
        "axes": [a.tolist() for a in dataset.grid.axes],
        "mask_encoding": "u8",
        "responses": "responses.f64",
        "mask": "mask.u8",
        "oracle": None,
    }
    if dataset.y_full_oracle is not None:
        atomic_write_bytes(
            directory / "oracle.f64", dataset.y_full_oracle.astype("<f8").tobytes()
        )
        manifest["oracle"] = "oracle.f64"

    manifest_path = directory / "manifest.json"
    atomic_write_bytes(manifest_path, (json.dumps(manifest, indent=2) + "\n").encode())
    return manifest_path


def load_dataset(directory) -> GappyDataset:
    """Read a dataset written by :func:`save_dataset`. Bit-exact round trip."""
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.get('version')}")

    grid = GridSpec(tuple(np.asarray(a, dtype=np.float64) for a in manifest["axes"]))
    responses = np.frombuffer((directory / manifest["responses"]).read_bytes(), dtype="<f8")
    mask = np.frombuffer((directory / manifest["mask"]).read_bytes(), dtype=np.uint8)
    if responses.size != grid.size or mask.size != grid.size:
        raise ValueError("payload length does not match grid size")

    idx = IndexSets.from_mask(mask.astype(bool))
    oracle = None
    if manifest.get("oracle"):
        oracle = np.frombuffer((directory / manifest["oracle"]).read_bytes(), dtype="<f8")
    return GappyDataset(grid, idx, responses[idx.x_indices], y_full_oracle=oracle)
