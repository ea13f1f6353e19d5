"""Point clouds: voxel quantization, curve serialization and file formats."""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from . import curve3d
from .curve3d import MAX_BITS, CurvePattern
from .errors import DomainError, ResolutionError

DEFAULT_GRID_SIZE = 0.02
IGNORE_LABEL = -1
HZ_PATTERNS = (CurvePattern.HZ, CurvePattern.HZ_SWAP)


@dataclass
class PointCloud:
    positions: np.ndarray                 # (N, 3) meters
    features: np.ndarray                  # (N, F)
    labels: Optional[np.ndarray] = None   # (N,), -1 = ignore

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        feats = np.asarray(self.features, dtype=np.float64)
        self.features = feats.reshape(n, -1) if feats.size else np.zeros((n, 0))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.validate()

    def __len__(self) -> int:
        return len(self.positions)

    def validate(self, num_classes: Optional[int] = None) -> None:
        if len(self.positions) < 1:
            raise DomainError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise DomainError("positions must be finite")
        if not np.all(np.isfinite(self.features)):
            raise DomainError("features must be finite")
        if len(self.features) != len(self.positions):
            raise DomainError("features must have one row per point")
        if self.labels is not None:
            if len(self.labels) != len(self.positions):
                raise DomainError("labels must have one entry per point")
            if np.any(self.labels < IGNORE_LABEL):
                raise DomainError("labels must be >= -1")
            if num_classes is not None and np.any(self.labels >= num_classes):
                raise DomainError(f"labels must be < {num_classes}")

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray) -> "PointCloud":
        labels = None if self.labels is None else self.labels[index]
        return PointCloud(self.positions[index], self.features[index], labels)


# -- quantization and serialization ---------------------------------------------

def bits_for(coords: np.ndarray) -> int:
    """Smallest ``b >= 1`` with every coordinate ``< 2^b``."""
    top = int(np.max(coords)) if np.size(coords) else 0
    return max(1, top.bit_length())


def quantize(cloud: Union[PointCloud, np.ndarray], grid_size: float = DEFAULT_GRID_SIZE
             ) -> tuple[np.ndarray, int]:
    """Voxel coordinates relative to the per-axis minimum, and the bits they need."""
    if not grid_size > 0:
        raise DomainError(f"grid_size must be positive, got {grid_size}")
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    coords = np.floor((pos - pos.min(axis=0)) / grid_size).astype(np.int64)
    bits = bits_for(coords)
    if bits > MAX_BITS:
        raise ResolutionError(
            f"grid_size {grid_size} needs {bits} bits per axis (max {MAX_BITS}); "
            "use a larger grid_size")
    return coords, bits


def dequantize(coords: np.ndarray, origin: np.ndarray, grid_size: float) -> np.ndarray:
    """Voxel centers in world coordinates."""
    return origin + (np.asarray(coords) + 0.5) * grid_size


@dataclass
class SerializedOrder:
    perm: np.ndarray      # serialized position -> original index
    inv_perm: np.ndarray  # original index -> serialized position

    @classmethod
    def from_perm(cls, perm: np.ndarray) -> "SerializedOrder":
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return cls(perm, inv)


def order_by_keys(keys: np.ndarray) -> SerializedOrder:
    """Sort by key, ties broken by original index."""
    return SerializedOrder.from_perm(np.argsort(keys, kind="stable"))


def serialize_coords(coords: np.ndarray, pattern: Union[str, CurvePattern],
                     bits: Optional[int] = None) -> SerializedOrder:
    bits = bits_for(coords) if bits is None else bits
    return order_by_keys(curve3d.encode(pattern, np.asarray(coords, dtype=np.int64), bits))


def serialize(cloud: Union[PointCloud, np.ndarray], pattern: Union[str, CurvePattern],
              grid_size: float = DEFAULT_GRID_SIZE) -> SerializedOrder:
    coords, bits = quantize(cloud, grid_size)
    return serialize_coords(coords, pattern, bits)


@dataclass
class BlockPatternAssignment:
    patterns: list
    seed: int

    def __len__(self) -> int:
        return len(self.patterns)

    def __getitem__(self, i: int) -> CurvePattern:
        return self.patterns[i]


def assign_patterns(num_blocks: int, seed: int,
                    choices: tuple = HZ_PATTERNS) -> BlockPatternAssignment:
    """Draw one pattern per block, uniformly from ``choices``."""
    if num_blocks < 1:
        raise DomainError("num_blocks must be >= 1")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(choices), size=num_blocks)
    return BlockPatternAssignment([CurvePattern.parse(choices[i]) for i in picks], seed)


# -- locality ----------------------------------------------------------------------

@dataclass
class LocalityReport:
    pattern: str
    mean_rank_gap: float
    frac_within_1: float
    n: int
    degenerate: bool = False

    CSV_FIELDS = ("pattern", "n", "mean_rank_gap", "frac_within_1", "degenerate")

    def row(self) -> dict:
        return {"pattern": self.pattern, "n": self.n, "mean_rank_gap": f"{self.mean_rank_gap:.6f}",
                "frac_within_1": f"{self.frac_within_1:.6f}", "degenerate": int(self.degenerate)}


def locality_stats(cloud: Union[PointCloud, np.ndarray], pattern: Union[str, CurvePattern],
                   grid_size: float = DEFAULT_GRID_SIZE) -> LocalityReport:
    """Serialized-rank gap between each point and its nearest spatial neighbor.

    Where several neighbors tie for nearest, the smallest rank gap counts.
    """
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    n = len(pos)
    if n < 2:
        raise DomainError("locality_stats needs at least two points")
    pattern = CurvePattern.parse(pattern)
    rank = serialize(pos, pattern, grid_size).inv_perm
    tree = cKDTree(pos)
    dist, idx = tree.query(pos, k=2)
    nearest = dist[:, 1]
    gaps = np.abs(rank - rank[idx[:, 1]])
    degenerate = bool(np.all(pos == pos[0]))
    # resolve exact-distance ties in favor of the smallest gap
    tol = 1e-12 * max(1.0, float(np.abs(pos).max()))
    _, idx3 = tree.query(pos, k=min(3, n))
    if n > 2:
        maybe_tied = np.nonzero(np.abs(np.linalg.norm(pos[idx3[:, 2]] - pos, axis=1) - nearest)
                                <= tol)[0]
    else:
        maybe_tied = np.zeros(0, dtype=np.int64)
    for i in maybe_tied:
        cand = np.asarray(tree.query_ball_point(pos[i], nearest[i] + tol), dtype=np.int64)
        cand = cand[cand != i]
        if len(cand):
            gaps[i] = np.abs(rank[cand] - rank[i]).min()
    return LocalityReport(pattern.value, float(gaps.mean()), float(np.mean(gaps <= 1)), n,
                          degenerate)


# -- file formats -------------------------------------------------------------------

PCB_MAGIC = b"PCB1"


def write_csv(cloud: PointCloud, path: Union[str, Path]) -> None:
    f = cloud.num_features
    header = ["x", "y", "z"] + [f"f{i + 1}" for i in range(f)]
    if cloud.labels is not None:
        header.append("label")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(cloud)):
            row = [repr(float(v)) for v in cloud.positions[i]]
            row += [repr(float(v)) for v in cloud.features[i]]
            if cloud.labels is not None:
                row.append(int(cloud.labels[i]))
            writer.writerow(row)


def read_csv(path: Union[str, Path]) -> PointCloud:
    with open(path, newline="") as fh:
        text = fh.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise DomainError(f"{path}: empty file") from None
    if header[:3] != ["x", "y", "z"]:
        raise DomainError(f"{path}: header must start with x,y,z")
    has_labels = header[-1] == "label"
    rows = [r for r in reader if r]
    if not rows:
        raise DomainError(f"{path}: no points")
    body = np.array([[float(v) for v in (r[:-1] if has_labels else r)] for r in rows])
    labels = np.array([int(r[-1]) for r in rows]) if has_labels else None
    return PointCloud(body[:, :3], body[:, 3:], labels)


def write_pcb(cloud: PointCloud, path: Union[str, Path]) -> None:
    n, f = len(cloud), cloud.num_features
    has_labels = cloud.labels is not None
    with open(path, "wb") as fh:
        fh.write(PCB_MAGIC)
        fh.write(struct.pack("<IIB", n, f, int(has_labels)))
        fh.write(cloud.positions.astype("<f4").tobytes())
        fh.write(cloud.features.astype("<f4").tobytes())
        if has_labels:
            fh.write(cloud.labels.astype("<i4").tobytes())


def read_pcb(path: Union[str, Path]) -> PointCloud:
    data = Path(path).read_bytes()
    if data[:4] != PCB_MAGIC:
        raise DomainError(f"{path}: not a PCB1 file")
    n, f, has_labels = struct.unpack_from("<IIB", data, 4)
    off = 4 + 9
    pos = np.frombuffer(data, "<f4", n * 3, off).reshape(n, 3)
    off += 4 * n * 3
    feats = np.frombuffer(data, "<f4", n * f, off).reshape(n, f)
    off += 4 * n * f
    labels = np.frombuffer(data, "<i4", n, off) if has_labels else None
    return PointCloud(pos.astype(np.float64), feats.astype(np.float64),
                      None if labels is None else labels.astype(np.int64))


def read_cloud(path: Union[str, Path]) -> PointCloud:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    return read_pcb(path) if magic == PCB_MAGIC else read_csv(path)


def write_cloud(cloud: PointCloud, path: Union[str, Path]) -> None:
    if str(path).lower().endswith((".pcb", ".pcb1", ".bin")):
        write_pcb(cloud, path)
    else:
        write_csv(cloud, path)
