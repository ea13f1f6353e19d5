"""ConvMamba blocks and the encoder-decoder segmentation network."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .cloud import (BlockPatternAssignment, PointCloud, SerializedOrder, assign_patterns,
                    bits_for, quantize, serialize_coords)
from .curve3d import CurvePattern
from .errors import DomainError
from .nn import MLP, LayerNorm, Linear, Module
from .sparseconv import LocalAggregation, SparseConv, SparseTensor, unique_first_occurrence
from .ssm import MambaMixer

MAMBA_MODES = ("bi", "uni", "none")


@dataclass
class ModelConfig:
    stages: int = 2
    blocks_per_stage: int = 1
    d_model: tuple = (16, 16)
    num_classes: int = 4
    in_features: int = 4
    grid_size: float = 0.1
    seed: int = 0
    d_state: int = 8
    expand: int = 2
    local_depth: int = 2
    mlp_ratio: int = 4
    mamba: str = "bi"
    patterns: tuple = ("hz", "hz-swap")
    scan_method: str = "sequential"

    def __post_init__(self):
        self.d_model = tuple(int(d) for d in np.atleast_1d(self.d_model))
        self.patterns = tuple(CurvePattern.parse(p).value for p in self.patterns)
        if len(self.d_model) == 1:
            self.d_model = self.d_model * self.stages
        if self.stages < 1 or self.blocks_per_stage < 0:
            raise DomainError("stages must be >= 1 and blocks_per_stage >= 0")
        if len(self.d_model) != self.stages:
            raise DomainError("d_model needs one width per stage")
        if min(self.d_model) < 1 or self.num_classes < 1 or self.in_features < 1:
            raise DomainError("all dimensions must be >= 1")
        if self.mamba not in MAMBA_MODES:
            raise DomainError(f"mamba must be one of {MAMBA_MODES}")
        if not self.grid_size > 0:
            raise DomainError("grid_size must be positive")

    @property
    def num_blocks(self) -> int:
        return self.blocks_per_stage * (2 * self.stages - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["d_model"] = list(self.d_model)
        d["patterns"] = list(self.patterns)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# -- voxel hierarchy ---------------------------------------------------------------------

@dataclass
class Level:
    coords: np.ndarray                 # (M, 3) active voxels at this resolution
    bits: int
    parent: Optional[np.ndarray]       # (M_prev,) site in this level for each finer site
    cache: dict = field(default_factory=dict)

    def sparse(self, feats: Tensor) -> SparseTensor:
        return SparseTensor(self.coords, feats, _cache=self.cache)

    def order(self, pattern: CurvePattern) -> SerializedOrder:
        key = ("order", pattern)
        if key not in self.cache:
            self.cache[key] = serialize_coords(self.coords, pattern, self.bits)
        return self.cache[key]


@dataclass
class Hierarchy:
    levels: list
    point_to_site: np.ndarray          # (N,) level-0 site of each point
    point_coords: np.ndarray           # (N, 3) level-0 voxel of each point


def build_hierarchy(positions: np.ndarray, grid_size: float, stages: int) -> Hierarchy:
    """Voxelize at ``grid_size`` and coarsen by 2 per axis for every further stage."""
    coords, _ = quantize(np.asarray(positions, dtype=float), grid_size)
    sites, point_to_site = unique_first_occurrence(coords)
    levels = [Level(sites, bits_for(sites), None)]
    for _ in range(1, stages):
        coarse, parent = unique_first_occurrence(levels[-1].coords >> 1)
        levels.append(Level(coarse, bits_for(coarse), parent))
    return Hierarchy(levels, point_to_site, coords)


# -- blocks -------------------------------------------------------------------------------

class ConvMambaBlock(Module):
    """Local aggregation in the voxel domain, then pre-norm global aggregation in curve order."""

    def __init__(self, dim: int, pattern: CurvePattern, rng: np.random.Generator,
                 cfg: ModelConfig):
        self.pattern = CurvePattern.parse(pattern)
        self.local = LocalAggregation(dim, rng, cfg.local_depth)
        self.use_mamba = cfg.mamba != "none"
        self.norm1 = LayerNorm(dim) if self.use_mamba else None
        self.mixer = (MambaMixer(dim, rng, cfg.d_state, cfg.expand, direction=cfg.mamba,
                                 scan_method=cfg.scan_method) if self.use_mamba else None)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, cfg.mlp_ratio * dim, rng)

    def __call__(self, t: SparseTensor, order: SerializedOrder) -> SparseTensor:
        return block_forward(self, t, order)


def block_forward(block: ConvMambaBlock, t: SparseTensor, order: SerializedOrder) -> SparseTensor:
    x = block.local(t).feats
    x = ad.permute_rows(x, order.perm)
    if block.use_mamba:
        x = ad.add(x, block.mixer(block.norm1(x)))
    x = ad.add(x, block.mlp(block.norm2(x)))
    return t.with_feats(ad.permute_rows(x, order.inv_perm))


class SegmentationNet(Module):
    """U-Net of ConvMamba stages over a voxel hierarchy; the whole cloud is one sequence."""

    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.assignment: BlockPatternAssignment = assign_patterns(
            max(cfg.num_blocks, 1), cfg.seed, tuple(cfg.patterns))
        dims = cfg.d_model
        self.embed = SparseConv(cfg.in_features, dims[0], rng)
        it = iter(self.assignment.patterns)
        self.encoder = [[ConvMambaBlock(dims[s], next(it), rng, cfg)
                         for _ in range(cfg.blocks_per_stage)] for s in range(cfg.stages)]
        self.down = [Linear(dims[s], dims[s + 1], rng) for s in range(cfg.stages - 1)]
        self.up = [Linear(dims[s + 1], dims[s], rng) for s in range(cfg.stages - 1)]
        self.decoder = [[ConvMambaBlock(dims[s], next(it), rng, cfg)
                         for _ in range(cfg.blocks_per_stage)] for s in range(cfg.stages - 1)]
        self.head_norm = LayerNorm(dims[0])
        self.head = Linear(dims[0], cfg.num_classes, rng)

    def blocks(self) -> list:
        return [b for stage in self.encoder for b in stage] + \
               [b for stage in self.decoder for b in stage]

    def resample_patterns(self, seed: int) -> None:
        """Redraw each block's curve pattern (optional per-step shuffling)."""
        blocks = self.blocks()
        if not blocks:
            return
        fresh = assign_patterns(len(blocks), seed, tuple(self.config.patterns))
        for block, pattern in zip(blocks, fresh.patterns):
            block.pattern = pattern

    def __call__(self, cloud: PointCloud, features: Optional[Tensor] = None,
                 hierarchy: Optional[Hierarchy] = None) -> Tensor:
        return model_forward(self, cloud, features, hierarchy)


def model_forward(model: SegmentationNet, cloud: PointCloud, features: Optional[Tensor] = None,
                  hierarchy: Optional[Hierarchy] = None) -> Tensor:
    """Per-point logits ``(N, num_classes)``."""
    cfg = model.config
    if features is None:
        features = Tensor(cloud.features.astype(model.head.weight.dtype))
    if features.shape[1] != cfg.in_features:
        raise DomainError(f"model expects {cfg.in_features} input features, got {features.shape[1]}")
    hier = hierarchy or build_hierarchy(cloud.positions, cfg.grid_size, cfg.stages)
    levels = hier.levels
    x = ad.segment_mean(features, hier.point_to_site, len(levels[0].coords))
    t = model.embed(levels[0].sparse(x))
    skips = []
    for s in range(cfg.stages):
        for block in model.encoder[s]:
            t = block(t, levels[s].order(block.pattern))
        if s < cfg.stages - 1:
            skips.append(t)
            nxt = levels[s + 1]
            pooled = ad.segment_mean(t.feats, nxt.parent, len(nxt.coords))
            t = nxt.sparse(model.down[s](pooled))
    for s in range(cfg.stages - 2, -1, -1):
        up = model.up[s](ad.take_rows(t.feats, levels[s + 1].parent))
        t = skips[s].with_feats(ad.add(up, skips[s].feats))
        for block in model.decoder[s]:
            t = block(t, levels[s].order(block.pattern))
    logits = model.head(model.head_norm(t.feats))
    return ad.take_rows(logits, hier.point_to_site)


def predict(model: SegmentationNet, cloud: PointCloud) -> np.ndarray:
    return model_forward(model, cloud).data.argmax(axis=1)


def receptive_radius(cfg: ModelConfig) -> int:
    """L-infinity reach, in finest-voxel units, of the model's convolutions alone.

    Only meaningful for ``mamba == "none"``; the mixers are global.
    """
    per_block = cfg.local_depth * cfg.blocks_per_stage
    reach = per_block  # bottleneck stage, encoder side only
    for s in range(cfg.stages - 2, -1, -1):
        reach = 2 * reach + 1 + 2 * per_block
    return reach + 1  # input embedding convolution


def erf_probe(model: SegmentationNet, cloud: PointCloud, point_index: int) -> np.ndarray:
    """L2 norm of d(logits[point_index]) / d(features[j]) for every point j."""
    n = len(cloud)
    if not 0 <= point_index < n:
        raise DomainError(f"point index {point_index} out of range [0, {n})")
    feats = Tensor(cloud.features.astype(model.head.weight.dtype), requires_grad=True)
    with Tape() as tape:
        logits = model_forward(model, cloud, feats)
        row = ad.getitem(logits, point_index)
    sq = np.zeros(n)
    for c in range(row.shape[0]):
        seed = np.zeros(row.shape, dtype=row.dtype)
        seed[c] = 1
        g = tape.backward(row, seed)[feats]
        sq += (g.astype(np.float64) ** 2).sum(axis=1)
    return np.sqrt(sq)


# -- checkpoints ------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PMB1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], model: SegmentationNet,
                    extra_buffers: Optional[dict] = None, meta: Optional[dict] = None) -> None:
    """Magic, u32 length + JSON metadata, then little-endian f32 buffers in metadata order."""
    buffers = [(name, p.data) for name, p in model.named_parameters()]
    for name, arr in (extra_buffers or {}).items():
        buffers.append((name, np.asarray(arr)))
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "patterns": [b.pattern.value for b in model.blocks()],
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in buffers],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in buffers:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path: Union[str, Path]) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DomainError(f"{path}: not a PMB1 checkpoint")
    (length,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + length])
    if header.get("version") != CHECKPOINT_VERSION:
        raise DomainError(f"{path}: unsupported checkpoint version {header.get('version')}")
    off = 8 + length
    tensors = {}
    for item in header["tensors"]:
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        arr = np.frombuffer(data, "<f4", count, off).reshape(item["shape"])
        tensors[item["name"]] = arr.copy()
        off += 4 * count
    return header, tensors


def load_checkpoint(path: Union[str, Path], dtype=np.float32):
    """Rebuild the model; returns ``(model, header, non-parameter buffers)``."""
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = SegmentationNet(cfg)
    for name, p in model.named_parameters():
        if name not in tensors:
            raise DomainError(f"checkpoint is missing parameter {name}")
        if tuple(tensors[name].shape) != p.shape:
            raise DomainError(f"shape mismatch for {name}")
        p.data = tensors.pop(name).astype(dtype)
    for block, pattern in zip(model.blocks(), header.get("patterns", [])):
        block.pattern = CurvePattern.parse(pattern)
    return model, header, tensors
