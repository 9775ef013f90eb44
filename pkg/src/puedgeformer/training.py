"""Adam, synthetic training pairs and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .geometry import (
    PointCloud,
    SurfaceSpec,
    apply_normalization,
    farthest_point_sample,
    jitter,
    normalize_unit_sphere,
    random_rotation_matrix,
    sample_surface,
)
from .metrics import chamfer
from .network import NetworkConfig, PUEdgeFormer, forward, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSS_CSV_HEADER = ("step", "epoch", "chamfer")


class MissingGradientError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class Adam:
    """Adam with bias correction over a fixed, ordered set of named tensors."""

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.step_count = 0

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        missing = [name for name, p in self.params if p.grad is None]
        if missing:
            raise MissingGradientError(f"no gradient for parameters: {', '.join(missing)}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 10
    n_pairs: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_lr: int = 256
    n_gt: int = 1024
    surfaces: tuple[str, ...] = ("torus",)
    augment_rotation: bool = True
    augment_scale: bool = True
    augment_jitter: bool = True
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if isinstance(self.surfaces, str):
            self.surfaces = tuple(s.strip() for s in self.surfaces.split(",") if s.strip())
        self.surfaces = tuple(self.surfaces)
        problems = []
        for name in ("batch_size", "epochs", "n_pairs", "n_lr", "n_gt"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be positive")
        if self.lr < 0:
            problems.append("lr must be nonnegative")
        if self.n_gt != self.network.r * self.n_lr:
            problems.append(f"n_gt={self.n_gt} must equal r * n_lr = {self.network.r * self.n_lr}")
        if not self.surfaces:
            problems.append("at least one surface kind is required")
        if problems:
            raise ValueError("invalid training config: " + "; ".join(problems))
        for kind in self.surfaces:
            SurfaceSpec(kind)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.n_pairs / self.batch_size)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "network"}
        d["surfaces"] = list(self.surfaces)
        d["network"] = self.network.to_dict()
        return d


def make_pair(
    surface: SurfaceSpec,
    rng,
    n_lr: int = 256,
    n_gt: int = 1024,
    rotation: bool = False,
    scale: bool = False,
    jitter_input: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Sparse input / dense target pair from one surface.

    The target is ``n_gt`` fresh surface samples. The input is a farthest-point
    subset of an independent sampling, so it is never a subset of the target.
    Both are normalised by the target's transform; rotation and scaling apply
    to both, jitter only to the input.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    seeds = rng.integers(0, 2**63 - 1, size=3)
    gt = normalize_unit_sphere(sample_surface(surface, n_gt, int(seeds[0])))
    dense = sample_surface(surface, n_gt, int(seeds[1]))
    start = int(np.random.default_rng(int(seeds[2])).integers(n_gt))
    sparse = PointCloud(dense.points[farthest_point_sample(dense, n_lr, start)])
    x = apply_normalization(sparse, gt.norm_transform).points
    return augment_pair(x, gt.points, rng, rotation, scale, jitter_input)


def augment_pair(
    x: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    rotation: bool = True,
    scale: bool = True,
    jitter_input: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Shared random rotation and scale for input and target, jitter on the input."""
    if rotation:
        rot = random_rotation_matrix(rng)
        x, y = x @ rot.T, y @ rot.T
    if scale:
        s = rng.uniform(0.8, 1.2)
        x, y = x * s, y * s
    if jitter_input:
        x = jitter(PointCloud(x), rng).points
    return x, y


@dataclass
class TrainResult:
    model: PUEdgeFormer
    best_state: dict[str, np.ndarray]
    best_loss: float
    history: list[tuple[int, int, float]]
    epoch_losses: list[float]

    def best_model(self) -> PUEdgeFormer:
        model = PUEdgeFormer(self.model.config)
        for name, t in model.named_parameters():
            t.data[...] = self.best_state[name]
        return model


def _snapshot(model: PUEdgeFormer) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.named_parameters()}


def _restore(model: PUEdgeFormer, state: dict[str, np.ndarray]) -> None:
    for name, t in model.named_parameters():
        t.data[...] = state[name]


def train(
    config: TrainConfig,
    surfaces: Sequence[SurfaceSpec] | None = None,
    out_dir: Path | str | None = None,
    pairs: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
    on_step: Callable[[int, int, float], None] | None = None,
) -> TrainResult:
    """Minimise the mean Chamfer loss with Adam.

    Patches in a batch are processed one after another with gradients
    accumulated, which equals batched averaging. With ``out_dir`` the best
    model (lowest epoch-mean loss) is written to ``model.ckpt`` and the per-step
    losses to ``loss.csv``.
    """
    if surfaces is None:
        surfaces = [SurfaceSpec(kind) for kind in config.surfaces]
    model = PUEdgeFormer(config.network)
    params = list(model.named_parameters())
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)

    root = np.random.SeedSequence(config.seed)
    data_seq, order_seq, aug_seq = root.spawn(3)
    if pairs is None:
        pair_seeds = data_seq.spawn(config.n_pairs)
        pairs = [
            make_pair(surfaces[i % len(surfaces)], np.random.default_rng(pair_seeds[i]), config.n_lr, config.n_gt)
            for i in range(config.n_pairs)
        ]
    pairs = list(pairs)
    order_rng = np.random.default_rng(order_seq)
    aug_rng = np.random.default_rng(aug_seq)
    augmenting = config.augment_rotation or config.augment_scale or config.augment_jitter

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    csv_file = open(out_path / "loss.csv", "w", newline="") if out_path is not None else None
    writer = csv.writer(csv_file, lineterminator="\n") if csv_file else None
    if writer:
        writer.writerow(LOSS_CSV_HEADER)

    history: list[tuple[int, int, float]] = []
    epoch_losses: list[float] = []
    best_state = _snapshot(model)
    best_loss = math.inf
    step = 0
    try:
        for epoch in range(config.epochs):
            perm = order_rng.permutation(len(pairs)) if len(pairs) > 1 else np.zeros(1, dtype=np.int64)
            epoch_sum = 0.0
            for b in range(0, len(pairs), config.batch_size):
                batch = perm[b : b + config.batch_size]
                opt.zero_grad()
                batch_loss = 0.0
                for idx in batch:
                    x, y = pairs[idx]
                    if augmenting:
                        x, y = augment_pair(
                            x, y, aug_rng, config.augment_rotation, config.augment_scale, config.augment_jitter
                        )
                    with T.Tape() as tape:
                        loss = T.scale(chamfer(forward(model, x), y), 1.0 / len(batch))
                    value = float(loss.data) * len(batch)
                    if not math.isfinite(value):
                        raise _diverged(step, model, best_state, out_path)
                    tape.backward(loss)
                    batch_loss += value
                batch_loss /= len(batch)
                opt.step()
                history.append((step, epoch, batch_loss))
                if writer:
                    writer.writerow((step, epoch, repr(batch_loss)))
                if on_step:
                    on_step(step, epoch, batch_loss)
                epoch_sum += batch_loss * len(batch)
                step += 1
            epoch_mean = epoch_sum / len(pairs)
            epoch_losses.append(epoch_mean)
            if epoch_mean < best_loss:
                best_loss = epoch_mean
                best_state = _snapshot(model)
            log.debug("epoch %d mean chamfer %.6g", epoch, epoch_mean)
    finally:
        if csv_file:
            csv_file.close()
    result = TrainResult(model, best_state, best_loss, history, epoch_losses)
    if out_path is not None:
        save_checkpoint(result.best_model(), out_path / "model.ckpt")
    return result


def _diverged(step: int, model: PUEdgeFormer, best_state, out_path: Path | None) -> TrainingDiverged:
    ckpt = None
    if out_path is not None:
        ckpt = out_path / "last_good.ckpt"
        good = PUEdgeFormer(model.config)
        _restore(good, best_state)
        save_checkpoint(good, ckpt)
    where = f"; last good checkpoint: {ckpt}" if ckpt else ""
    return TrainingDiverged(f"non-finite loss at step {step}{where}", ckpt)


def write_loss_csv(history: Sequence[tuple[int, int, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_CSV_HEADER)
        for row in history:
            w.writerow((row[0], row[1], repr(row[2])))
