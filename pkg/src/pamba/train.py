"""Training and evaluation loops on synthetic or file-backed scenes."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import objective
from .autodiff import Tape
from .cloud import PointCloud, read_cloud
from .errors import DomainError, NumericError
from .network import (Hierarchy, ModelConfig, SegmentationNet, build_hierarchy, load_checkpoint,
                      model_forward, save_checkpoint)
from .objective import LossConfig
from .optim import AdamState, AdamW
from .synthdata import SceneSpec, generate

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64, "single": np.float32,
              "double": np.float64}
ABLATIONS = {"no-mamba": "none", "unidirectional": "uni", "uni": "uni", "bidirectional": "bi",
             "bi": "bi", "none": None}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 0.01
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    steps: int = 200
    batch: int = 1
    precision: str = "float32"
    seed: int = 0
    eval_interval: int = 50
    num_scenes: int = 4
    num_points: int = 4096
    room: tuple = (3.0, 3.0, 2.0)
    noise_sigma: float = 0.005
    data: list = field(default_factory=list)
    resample_patterns: bool = False
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.loss, dict):
            unknown = set(self.loss) - {f.name for f in fields(LossConfig)}
            if unknown:
                raise DomainError(f"unknown loss config keys: {sorted(unknown)}")
            self.loss = LossConfig(**self.loss)
        self.betas = tuple(self.betas)
        self.room = tuple(self.room)
        if self.precision not in PRECISIONS:
            raise DomainError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.steps < 0 or self.batch < 1 or self.eval_interval < 1 or self.threads < 1:
            raise DomainError("steps >= 0, batch >= 1, eval_interval >= 1, threads >= 1 required")
        if not self.data and self.num_scenes < 1:
            raise DomainError("num_scenes must be >= 1")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        d["room"] = list(self.room)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def scene_seed(run_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, index]).generate_state(1)[0])


def load_scenes(cfg: RunConfig) -> list:
    if cfg.data:
        return [read_cloud(p) for p in cfg.data]
    return [generate(SceneSpec(cfg.num_points, cfg.room, noise_sigma=cfg.noise_sigma,
                               seed=scene_seed(cfg.seed, i))) for i in range(cfg.num_scenes)]


def resolve_threads(threads: Optional[int]) -> int:
    if threads is None:
        threads = int(os.environ.get("PAMBA_THREADS", "1") or 1)
    return max(1, int(threads))


@dataclass
class EvalResult:
    loss_ce: float
    loss_lovasz: float
    miou: float
    iou: np.ndarray
    conf: np.ndarray


def evaluate(model: SegmentationNet, scenes: Sequence[PointCloud], loss_cfg: LossConfig,
             hierarchies: Optional[list] = None) -> EvalResult:
    c = model.config.num_classes
    conf = np.zeros((c, c), dtype=np.int64)
    ce, lov = [], []
    for i, scene in enumerate(scenes):
        hier = hierarchies[i] if hierarchies else None
        logits = model_forward(model, scene, hierarchy=hier)
        conf += objective.confusion_matrix(logits.data.argmax(1), scene.labels, c,
                                           loss_cfg.ignore_label)
        _, ce_i, lov_i = objective.total_loss(logits, scene.labels, loss_cfg, parts=True)
        ce.append(float(ce_i.data))
        lov.append(float(lov_i.data))
    return EvalResult(float(np.mean(ce)), float(np.mean(lov)), objective.miou(conf),
                      objective.per_class_iou(conf), conf)


def metrics_header(num_classes: int) -> list:
    return ["epoch", "split", "loss_ce", "loss_lovasz", "miou"] + \
           [f"iou_{k}" for k in range(num_classes)]


def metrics_row(step: int, split: str, res: EvalResult) -> list:
    return [step, split, f"{res.loss_ce:.8f}", f"{res.loss_lovasz:.8f}", f"{res.miou:.8f}"] + \
           [("nan" if np.isnan(v) else f"{v:.8f}") for v in res.iou]


class Trainer:
    """Owns the model, optimizer and scene cache for one run."""

    def __init__(self, cfg: RunConfig, scenes: Optional[list] = None,
                 model: Optional[SegmentationNet] = None, threads: Optional[int] = None):
        self.cfg = cfg
        self.scenes = scenes if scenes is not None else load_scenes(cfg)
        for s in self.scenes:
            if s.labels is None:
                raise DomainError("training scenes need labels")
            s.validate(cfg.model.num_classes)
        self.model = model or SegmentationNet(cfg.model)
        self.model.astype(cfg.dtype)
        self.names = [n for n, _ in self.model.named_parameters()]
        self.optimizer = AdamW(self.model.parameters(), cfg.lr, cfg.betas, cfg.weight_decay)
        self.hierarchies = [build_hierarchy(s.positions, cfg.model.grid_size, cfg.model.stages)
                            for s in self.scenes]
        self.step_count = 0
        self.threads = resolve_threads(threads if threads is not None else cfg.threads)
        if self.threads > 1:
            # tolerance-level reproducibility only; the default path stays bit-exact
            for block in self.model.blocks():
                if block.mixer is not None:
                    block.mixer.scan_method = "parallel"
        self.history: list = []

    def _scene_grads(self, i: int):
        scene = self.scenes[i]
        params = self.model.parameters()
        with Tape() as tape:
            logits = model_forward(self.model, scene, hierarchy=self.hierarchies[i])
            total, ce, lov = objective.total_loss(logits, scene.labels, self.cfg.loss, parts=True)
        if not np.isfinite(total.data):
            raise NumericError(f"non-finite loss at step {self.step_count} on scene {i}")
        g = tape.backward(total)
        return [g[p] for p in params], float(total.data), float(ce.data), float(lov.data)

    def step(self) -> float:
        """One optimizer step over ``batch`` scenes; returns the mean loss."""
        cfg = self.cfg
        if cfg.resample_patterns:
            self.model.resample_patterns(scene_seed(cfg.model.seed, 1_000_000 + self.step_count))
        idx = [(self.step_count * cfg.batch + j) % len(self.scenes) for j in range(cfg.batch)]
        if self.threads > 1 and len(idx) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                results = list(pool.map(self._scene_grads, idx))
        else:
            results = [self._scene_grads(i) for i in idx]
        grads = [sum(r[0][k] for r in results) / len(results)
                 for k in range(len(results[0][0]))]
        for gk in grads:
            if not np.all(np.isfinite(gk)):
                raise NumericError(f"non-finite gradient at step {self.step_count}")
        self.optimizer.step(grads)
        self.step_count += 1
        return float(np.mean([r[1] for r in results]))

    def evaluate(self) -> EvalResult:
        return evaluate(self.model, self.scenes, self.cfg.loss, self.hierarchies)

    def run(self, metrics_path: Optional[Union[str, Path]] = None, steps: Optional[int] = None,
            append: bool = False) -> EvalResult:
        total = self.cfg.steps if steps is None else steps
        writer = fh = None
        if metrics_path is not None:
            fh = open(metrics_path, "a" if append else "w", newline="")
            writer = csv.writer(fh)
            if not append:
                writer.writerow(metrics_header(self.cfg.model.num_classes))
        try:
            while self.step_count < total:
                loss = self.step()
                if self.step_count % self.cfg.eval_interval == 0 or self.step_count == total:
                    res = self.evaluate()
                    self.history.append((self.step_count, res))
                    log.info("step %d loss %.4f train mIoU %.4f", self.step_count, loss, res.miou)
                    if writer:
                        writer.writerow(metrics_row(self.step_count, "train", res))
                        fh.flush()
            return self.history[-1][1] if self.history else self.evaluate()
        finally:
            if fh:
                fh.close()

    # -- checkpoints --------------------------------------------------------------------

    def save(self, path: Union[str, Path]) -> None:
        st = self.optimizer.state
        extra = {}
        for name, m, v in zip(self.names, st.m, st.v):
            extra[f"adam.m.{name}"] = m
            extra[f"adam.v.{name}"] = v
        save_checkpoint(path, self.model, extra,
                        meta={"step": self.step_count, "adam_t": st.t, "run": self.cfg.to_dict()})

    @classmethod
    def resume(cls, path: Union[str, Path], cfg: Optional[RunConfig] = None,
               threads: Optional[int] = None) -> "Trainer":
        header = None
        model, header, extra = load_checkpoint(path)
        meta = header.get("meta", {})
        cfg = cfg or RunConfig.from_dict(meta["run"])
        model.astype(cfg.dtype)
        trainer = cls(cfg, model=model, threads=threads)
        m = [extra[f"adam.m.{n}"].astype(cfg.dtype) for n in trainer.names]
        v = [extra[f"adam.v.{n}"].astype(cfg.dtype) for n in trainer.names]
        trainer.optimizer.state = AdamState(m, v, int(meta.get("adam_t", 0)))
        trainer.step_count = int(meta.get("step", 0))
        return trainer


# -- ablation ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("none", "uni", "bi")


def ablation_study(base: RunConfig, seeds: Sequence[int],
                   variants: Sequence[str] = ABLATION_VARIANTS) -> list:
    """Train every variant for every seed; rows of ``(variant, seed, train mIoU)``."""
    rows = []
    for variant in variants:
        for seed in seeds:
            d = base.to_dict()
            d["seed"] = seed
            d["model"]["seed"] = seed
            d["model"]["mamba"] = variant
            res = Trainer(RunConfig.from_dict(d)).run()
            log.info("ablation %s seed %d mIoU %.4f", variant, seed, res.miou)
            rows.append((variant, seed, res.miou))
    return rows


def write_ablation_report(path: Union[str, Path], rows: list,
                          variants: Sequence[str] = ABLATION_VARIANTS) -> tuple[dict, bool]:
    """CSV of per-run and mean mIoU; the last row flags whether means are ordered."""
    means = {v: float(np.mean([m for var, _, m in rows if var == v])) for v in variants}
    ordered = all(means[a] <= means[b] for a, b in zip(variants, variants[1:]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "miou"])
        for variant, seed, m in rows:
            w.writerow([variant, seed, f"{m:.8f}"])
        for v in variants:
            w.writerow([v, "mean", f"{means[v]:.8f}"])
        w.writerow(["ordering", " <= ".join(variants), "ok" if ordered else "FAILED"])
    return means, ordered
