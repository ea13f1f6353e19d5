"""Seeded synthetic indoor scenes: floor, walls, boxes and spheres."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import DomainError

CLASSES = ("floor", "wall", "box", "sphere")


@dataclass
class SceneSpec:
    num_points: int = 4096
    extents: tuple = (3.0, 3.0, 2.0)
    classes: tuple = CLASSES
    noise_sigma: float = 0.005
    seed: int = 0

    def validate(self) -> None:
        if self.num_points < 64:
            raise DomainError("num_points must be >= 64")
        if len(self.extents) != 3 or min(self.extents) <= 0:
            raise DomainError("room extents must be three positive lengths")
        if min(self.extents[:2]) < 1.0 or self.extents[2] < 0.5:
            raise DomainError("room too small to place furniture (need >= 1 m floor, 0.5 m height)")
        bad = set(self.classes) - set(CLASSES)
        if bad or not self.classes or len(set(self.classes)) != len(self.classes):
            raise DomainError(f"classes must be distinct names from {CLASSES}")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")


@dataclass
class _Box:
    lo: np.ndarray   # (3,)
    hi: np.ndarray   # (3,)

    def faces(self):
        """(area, sampler) for the top and four sides."""
        (x0, y0, z0), (x1, y1, z1) = self.lo, self.hi
        sx, sy, sz = self.hi - self.lo
        return [
            (sx * sy, lambda r, n: _rect(r, n, (x0, x1), (y0, y1), (z1, z1), (0, 0, 1))),
            (sy * sz, lambda r, n: _rect(r, n, (x0, x0), (y0, y1), (z0, z1), (-1, 0, 0))),
            (sy * sz, lambda r, n: _rect(r, n, (x1, x1), (y0, y1), (z0, z1), (1, 0, 0))),
            (sx * sz, lambda r, n: _rect(r, n, (x0, x1), (y0, y0), (z0, z1), (0, -1, 0))),
            (sx * sz, lambda r, n: _rect(r, n, (x0, x1), (y1, y1), (z0, z1), (0, 1, 0))),
        ]


def _rect(rng, n, xr, yr, zr, normal):
    pts = np.stack([rng.uniform(*xr, n), rng.uniform(*yr, n), rng.uniform(*zr, n)], axis=1)
    return pts, np.tile(np.asarray(normal, dtype=float), (n, 1))


def _sphere(rng, n, center, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return center + radius * d, d


def _allocate(rng, total: int, areas) -> np.ndarray:
    areas = np.asarray(areas, dtype=float)
    return rng.multinomial(total, areas / areas.sum())


def _place_boxes(rng, room, count):
    boxes = []
    for _ in range(200):
        if len(boxes) == count:
            break
        size = np.array([rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8),
                         rng.uniform(0.25, min(0.9, 0.45 * room[2]))])
        lo = np.array([rng.uniform(0.15, room[0] - size[0] - 0.15),
                       rng.uniform(0.15, room[1] - size[1] - 0.15), 0.0])
        cand = _Box(lo, lo + size)
        if all(np.any(cand.lo[:2] > b.hi[:2] + 0.1) or np.any(cand.hi[:2] < b.lo[:2] - 0.1)
               for b in boxes):
            boxes.append(cand)
    if not boxes:
        raise DomainError("could not place any box in the room")
    return boxes


def _place_spheres(rng, room, boxes, count):
    spheres = []
    for _ in range(200):
        if len(spheres) == count:
            break
        r = rng.uniform(0.15, 0.3)
        c = np.array([rng.uniform(r + 0.1, room[0] - r - 0.1),
                      rng.uniform(r + 0.1, room[1] - r - 0.1), r])
        clear = all(np.any(c[:2] + r < b.lo[:2] - 0.05) or np.any(c[:2] - r > b.hi[:2] + 0.05)
                    for b in boxes)
        clear = clear and all(np.linalg.norm(c - c2) > r + r2 + 0.05 for c2, r2 in spheres)
        if clear:
            spheres.append((c, r))
    if count and not spheres:
        raise DomainError("could not place any sphere in the room")
    return spheres


def generate(spec: SceneSpec) -> PointCloud:
    """Sample a labeled scene; features are (height, nx, ny, nz).

    Points are split evenly across the requested classes and, within a
    class, in proportion to surface area.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    room = np.asarray(spec.extents, dtype=float)
    X, Y, Z = room
    sides = [
        (Y * Z, lambda r, n: _rect(r, n, (0, 0), (0, Y), (0, Z), (1, 0, 0))),
        (Y * Z, lambda r, n: _rect(r, n, (X, X), (0, Y), (0, Z), (-1, 0, 0))),
        (X * Z, lambda r, n: _rect(r, n, (0, X), (0, 0), (0, Z), (0, 1, 0))),
        (X * Z, lambda r, n: _rect(r, n, (0, X), (Y, Y), (0, Z), (0, -1, 0))),
    ]
    walls = [sides[i] for i in sorted(rng.choice(4, size=rng.integers(2, 5), replace=False))]
    boxes = _place_boxes(rng, room, int(rng.integers(1, 5)))
    n_spheres = int(rng.integers(1, 4)) if "sphere" in spec.classes else 0
    spheres = _place_spheres(rng, room, boxes, n_spheres)

    def floor(r, n):
        out = np.empty((0, 3))
        while len(out) < n:
            p = np.stack([r.uniform(0, X, 2 * n), r.uniform(0, Y, 2 * n), np.zeros(2 * n)], 1)
            covered = np.zeros(len(p), bool)
            for b in boxes:
                covered |= np.all((p[:, :2] >= b.lo[:2]) & (p[:, :2] <= b.hi[:2]), axis=1)
            out = np.concatenate([out, p[~covered]])
        return out[:n], np.tile([0.0, 0.0, 1.0], (n, 1))

    samplers = {
        "floor": [(X * Y, floor)],
        "wall": walls,
        "box": [face for b in boxes for face in b.faces()],
        "sphere": [(4 * np.pi * r * r, lambda rg, n, c=c, r=r: _sphere(rg, n, c, r))
                   for c, r in spheres],
    }
    per_class = np.full(len(spec.classes), spec.num_points // len(spec.classes))
    per_class[: spec.num_points % len(spec.classes)] += 1
    pos, nrm, lab = [], [], []
    for label, (name, count) in enumerate(zip(spec.classes, per_class)):
        prims = samplers[name]
        for (area, sample), k in zip(prims, _allocate(rng, int(count), [a for a, _ in prims])):
            if k == 0:
                continue
            p, n = sample(rng, int(k))
            pos.append(p)
            nrm.append(n)
            lab.append(np.full(int(k), label))
    pos = np.concatenate(pos)
    nrm = np.concatenate(nrm)
    lab = np.concatenate(lab)
    if spec.noise_sigma > 0:
        pos = pos + rng.normal(0, spec.noise_sigma, pos.shape)
    shuffle = rng.permutation(len(pos))
    pos, nrm, lab = pos[shuffle], nrm[shuffle], lab[shuffle]
    feats = np.concatenate([pos[:, 2:3], nrm], axis=1)
    return PointCloud(pos, feats, lab)
