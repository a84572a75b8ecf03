"""Pillar voxelization: raw points to the dense pillar tensor and pseudo image.

A pillar is a full-height vertical column of the BEV grid. ``pillarize`` bins
in-range points into pillars (row = y cell, col = x cell), subsamples
overfull pillars, and zero-pads the rest; ``decorate`` expands raw (x, y, z,
reflectance) rows to the 9-feature encoding consumed by the point feature
network. ``scatter`` lives in ``kernels.ops`` as the differentiable half of
the pseudo-image construction.

Point-cloud files use a little-endian binary layout (magic "PCL1", u32 count,
then count * 4 float32 "x y z r") or a CSV alternative with header "x,y,z,r".
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Rng

PC_MAGIC = b"PCL1"
RAW_DIM = 4
DECORATED_DIM = 9


@dataclass(frozen=True)
class PillarGridSpec:
    """Geometry of the BEV pillar grid.

    The ranges must be an integral number of pillars; the pseudo image then
    has n_rows = (y_max - y_min) / pillar_dy rows and n_cols likewise in x.
    """

    x_min: float = 0.0
    x_max: float = 40.0
    y_min: float = -20.0
    y_max: float = 20.0
    pillar_dx: float = 0.5
    pillar_dy: float = 0.5
    max_points_per_pillar: int = 32
    max_pillars: int = 2000

    def __post_init__(self):
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValueError("empty pillar range")
        if self.pillar_dx <= 0 or self.pillar_dy <= 0:
            raise ValueError("pillar size must be positive")
        for name, span, step in (("x", self.x_max - self.x_min, self.pillar_dx),
                                 ("y", self.y_max - self.y_min, self.pillar_dy)):
            cells = span / step
            if abs(cells - round(cells)) > 1e-6:
                raise ValueError("%s range is not an integral number of pillars" % name)
        if self.max_points_per_pillar < 1 or self.max_pillars < 1:
            raise ValueError("capacity limits must be >= 1")

    @property
    def n_rows(self) -> int:
        return int(round((self.y_max - self.y_min) / self.pillar_dy))

    @property
    def n_cols(self) -> int:
        return int(round((self.x_max - self.x_min) / self.pillar_dx))

    def meters_to_grid(self, points: np.ndarray, stride: int = 1) -> np.ndarray:
        """Map BEV meters (M, 2) of (x, y) to continuous (row, col) units.

        row = (y - y_min) / pillar_dy / stride and col likewise from x; this
        fixed transform makes sampled feature positions reproducible.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        out = np.empty_like(pts)
        out[:, 0] = (pts[:, 1] - self.y_min) / (self.pillar_dy * stride)
        out[:, 1] = (pts[:, 0] - self.x_min) / (self.pillar_dx * stride)
        return out


@dataclass
class PillarTensor:
    """Dense (D, P, N) pillar data with grid coordinates and fill counts.

    Slots beyond a pillar's valid count are zero padding. ``coords`` rows are
    unique (row, col) pairs in row-major order.
    """

    data: np.ndarray
    coords: np.ndarray
    valid_counts: np.ndarray

    def __post_init__(self):
        d, p, n = self.data.shape
        if self.coords.shape != (p, 2) or self.valid_counts.shape != (p,):
            raise ValueError("inconsistent pillar tensor shapes")

    @property
    def feature_dim(self) -> int:
        return self.data.shape[0]

    @property
    def n_pillars(self) -> int:
        return self.data.shape[1]

    def valid_mask(self) -> np.ndarray:
        """(P, N) boolean mask of real (non-padding) slots."""
        n = self.data.shape[2]
        return np.arange(n)[None, :] < self.valid_counts[:, None]


def pillarize(points: np.ndarray, spec: PillarGridSpec, seed: int) -> PillarTensor:
    """Bin points into pillars with seeded subsampling.

    Points outside [x_min, x_max) x [y_min, y_max) are dropped. Pillars are
    ordered row-major by (row, col). When more than ``max_pillars`` cells are
    occupied a seeded Fisher-Yates prefix picks the survivors (drawn first),
    and each overfull pillar is then subsampled the same way, in pillar
    order, from one stream; this fixes the rng consumption order so equal
    (points, spec, seed) give byte-identical tensors.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, RAW_DIM)
    n_max = spec.max_points_per_pillar
    in_range = ((pts[:, 0] >= spec.x_min) & (pts[:, 0] < spec.x_max)
                & (pts[:, 1] >= spec.y_min) & (pts[:, 1] < spec.y_max))
    pts = pts[in_range]
    if len(pts) == 0:
        return PillarTensor(
            np.zeros((RAW_DIM, 0, n_max)),
            np.zeros((0, 2), dtype=np.int64),
            np.zeros(0, dtype=np.int64))
    col = np.minimum((pts[:, 0] - spec.x_min) // spec.pillar_dx, spec.n_cols - 1)
    row = np.minimum((pts[:, 1] - spec.y_min) // spec.pillar_dy, spec.n_rows - 1)
    flat = (row * spec.n_cols + col).astype(np.int64)
    uniq, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)

    rng = Rng(seed)
    keep = np.arange(len(uniq))
    if len(uniq) > spec.max_pillars:
        keep = np.sort(rng.sample_prefix(len(uniq), spec.max_pillars))

    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)])
    p_used = len(keep)
    data = np.zeros((RAW_DIM, p_used, n_max))
    coords = np.empty((p_used, 2), dtype=np.int64)
    valid = np.empty(p_used, dtype=np.int64)
    for out_i, uniq_i in enumerate(keep):
        members = order[starts[uniq_i]:starts[uniq_i + 1]]
        if len(members) > n_max:
            members = members[rng.sample_prefix(len(members), n_max)]
        valid[out_i] = len(members)
        coords[out_i] = divmod(int(uniq[uniq_i]), spec.n_cols)
        data[:, out_i, :len(members)] = pts[members].T
    return PillarTensor(data, coords, valid)


def decorate(tensor: PillarTensor, spec: PillarGridSpec) -> PillarTensor:
    """Expand raw 4-feature points to the 9-feature encoding.

    Channels: x, y, z, r (verbatim), offsets to the pillar's point arithmetic
    mean (xc, yc, zc), and offsets to the pillar's geometric center (xp, yp).
    Padding slots stay all-zero.
    """
    if tensor.feature_dim != RAW_DIM:
        raise ValueError("decorate expects raw 4-feature pillars, got D=%d"
                         % tensor.feature_dim)
    d, p, n = tensor.data.shape
    out = np.zeros((DECORATED_DIM, p, n))
    out[:RAW_DIM] = tensor.data
    if p == 0:
        return PillarTensor(out, tensor.coords.copy(), tensor.valid_counts.copy())
    mask = tensor.valid_mask()                      # (P, N)
    counts = np.maximum(tensor.valid_counts, 1)[None, :, None]
    xyz = tensor.data[:3]                           # (3, P, N)
    means = (xyz * mask[None]).sum(axis=2, keepdims=True) / counts
    out[4:7] = (xyz - means) * mask[None]
    center_x = spec.x_min + (tensor.coords[:, 1] + 0.5) * spec.pillar_dx
    center_y = spec.y_min + (tensor.coords[:, 0] + 0.5) * spec.pillar_dy
    out[7] = (tensor.data[0] - center_x[:, None]) * mask
    out[8] = (tensor.data[1] - center_y[:, None]) * mask
    return PillarTensor(out, tensor.coords.copy(), tensor.valid_counts.copy())


def save_point_cloud(points: np.ndarray, path) -> None:
    """Write the binary "PCL1" format (little-endian, float32 payload)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, RAW_DIM)
    with open(Path(path), "wb") as fh:
        fh.write(PC_MAGIC)
        fh.write(struct.pack("<I", len(pts)))
        fh.write(pts.astype("<f4").tobytes())


def load_point_cloud(path) -> np.ndarray:
    """Read a "PCL1" file back as a float64 (M, 4) array."""
    blob = Path(path).read_bytes()
    if blob[:4] != PC_MAGIC:
        raise ValueError("%s is not a point-cloud file (bad magic %r)" % (path, blob[:4]))
    (count,) = struct.unpack_from("<I", blob, 4)
    expected = 8 + count * RAW_DIM * 4
    if len(blob) != expected:
        raise ValueError("point-cloud file %s has %d bytes, expected %d"
                         % (path, len(blob), expected))
    arr = np.frombuffer(blob, dtype="<f4", count=count * RAW_DIM, offset=8)
    return arr.reshape(count, RAW_DIM).astype(np.float64)


def save_point_cloud_csv(points: np.ndarray, path) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, RAW_DIM)
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "r"])
        writer.writerows(pts.tolist())


def load_point_cloud_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "y", "z", "r"]:
            raise ValueError("expected CSV header x,y,z,r in %s, got %r" % (path, header))
        rows = [[float(v) for v in row] for row in reader if row]
    return np.asarray(rows, dtype=np.float64).reshape(-1, RAW_DIM)
