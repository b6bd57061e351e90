"""Losses, lookahead-over-Adam optimizer, LR schedule and the epoch loop."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import autograd as ag
from .autograd import Param, Tensor
from .dataio import (
    Camera,
    JointSequence,
    atomic_write_text,
    flip_horizontal,
    window_array,
)
from .errors import ConfigError, InputError, OptimizerError, TrainingDiverged
from .metrics import mpjpe, root_center
from .model import ROOT_JOINT, Model
from .strict import from_strict_dict

log = logging.getLogger(__name__)

CURVE_HEADER = ["epoch", "train_loss_mm", "val_mpjpe_mm", "lr"]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.05
    epochs: int = 80
    batch_size: int = 128
    dropout: float | None = None  # None keeps the model's configured rate
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    proj_weight: float = 0.0
    augment_flip: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0 < self.lookahead_alpha <= 1:
            raise ConfigError("lookahead alpha must be in (0, 1]")
        if self.lookahead_k < 1:
            raise ConfigError("lookahead k must be >= 1")
        if not 0 <= self.decay < 1:
            raise ConfigError("decay must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch size >= 2")
        if self.dropout is not None and not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.proj_weight < 0 or self.weight_decay < 0:
            raise ConfigError("loss and decay weights must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        return from_strict_dict(cls, data, "train")


# ---------------------------------------------------------------- data


@dataclass
class WindowDataset:
    """Training windows with root-relative camera-frame targets in mm."""

    inputs: np.ndarray  # N x n x J x 2
    targets: np.ndarray  # N x J x 3
    mirror_pairs: list[list[int]] | None = None
    roots: np.ndarray | None = None  # N x 3 camera-frame root positions
    camera: Camera | None = None

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def target_2d(self) -> np.ndarray:
        # the target frame of each window; non-causal windows are centred
        n = self.inputs.shape[1]
        return self.inputs[:, self._target_index(n)]

    causal: bool = False

    def _target_index(self, n: int) -> int:
        return n - 1 if self.causal else (n - 1) // 2

    def subset(self, idx) -> WindowDataset:
        return dataclasses.replace(
            self,
            inputs=self.inputs[idx],
            targets=self.targets[idx],
            roots=None if self.roots is None else self.roots[idx],
        )

    @classmethod
    def concat(cls, parts: list[WindowDataset]) -> WindowDataset:
        first = parts[0]
        roots = None if any(p.roots is None for p in parts) else np.concatenate([p.roots for p in parts])
        return dataclasses.replace(
            first,
            inputs=np.concatenate([p.inputs for p in parts]),
            targets=np.concatenate([p.targets for p in parts]),
            roots=roots,
        )


def build_dataset(
    seq2d: JointSequence,
    seq3d: JointSequence,
    n: int,
    causal: bool = False,
    camera: Camera | None = None,
    mirror_pairs=None,
) -> WindowDataset:
    """Cut one window per frame and pair it with its 3-D target.

    With a camera, world-frame 3-D is moved into the camera frame first.
    """
    if seq2d.F != seq3d.F or seq2d.J != seq3d.J or seq2d.D != 2 or seq3d.D != 3:
        raise InputError(f"2-D {seq2d.frames.shape} and 3-D {seq3d.frames.shape} sequences do not pair up")
    pts = seq3d.frames if camera is None else camera.world_to_camera(seq3d.frames)
    skeleton = seq2d.skeleton or seq3d.skeleton
    pairs = mirror_pairs if mirror_pairs is not None else (skeleton.mirror_pairs if skeleton else None)
    return WindowDataset(
        inputs=window_array(seq2d.frames, n, causal),
        targets=root_center(pts, ROOT_JOINT),
        mirror_pairs=pairs,
        roots=pts[:, ROOT_JOINT].copy() if camera is not None else None,
        camera=camera,
        causal=causal,
    )


# ---------------------------------------------------------------- losses


def pose_loss(pred: Tensor, gt) -> Tensor:
    """Mean per-joint Euclidean distance (mm) after root centering."""
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise InputError(f"pose loss shapes differ: {pred.shape} vs {gt.shape}")
    gt_c = root_center(gt, ROOT_JOINT)
    sl = (Ellipsis, slice(ROOT_JOINT, ROOT_JOINT + 1), slice(None))
    pred_c = ag.sub(pred, pred[sl])
    return ag.tmean(ag.norm(ag.sub(pred_c, gt_c), axis=-1))


@dataclass
class ReprojectionStats:
    behind_camera: int = 0


def reprojection_loss(pred3d: Tensor, camera: Camera, roots: np.ndarray, input2d: np.ndarray,
                      stats: ReprojectionStats | None = None) -> Tensor:
    """Mean squared pixel distance between projected predictions and 2-D input.

    ``pred3d`` is ``B x J x 3`` root-relative camera-frame mm; ``roots`` the
    ``B x 3`` ground-truth root positions; ``input2d`` normalized ``B x J x 2``.
    Joints that land behind the camera are excluded and counted.
    """
    if camera is None:
        raise ConfigError("reprojection loss needs a camera")
    roots = np.asarray(roots, dtype=float)
    pts = ag.add(pred3d, roots[:, None, :])
    z = pts[..., 2]
    mask = (z.data > 1e-6).astype(float)
    if stats is not None:
        stats.behind_camera += int((mask == 0).sum())
    z_safe = ag.add(ag.mul(z, mask), 1.0 - mask)
    u = ag.add(ag.mul(ag.div(pts[..., 0], z_safe), camera.fx), camera.cx)
    v = ag.add(ag.mul(ag.div(pts[..., 1], z_safe), camera.fy), camera.cy)
    px = camera.denormalize(np.asarray(input2d, dtype=float))
    sq = ag.add(ag.square(ag.sub(u, px[..., 0])), ag.square(ag.sub(v, px[..., 1])))
    count = max(1.0, float(mask.sum()))
    return ag.mul(ag.tsum(ag.mul(sq, mask)), 1.0 / count)


def total_loss(pred: Tensor, batch: WindowDataset, cfg: TrainConfig, stats: ReprojectionStats | None = None) -> tuple[Tensor, Tensor]:
    """Returns (optimized loss, pose loss in mm)."""
    pose = pose_loss(pred, batch.targets)
    if cfg.proj_weight == 0:
        return pose, pose
    if batch.camera is None or batch.roots is None:
        raise ConfigError("proj_weight > 0 needs camera-calibrated data")
    proj = reprojection_loss(pred, batch.camera, batch.roots, batch.target_2d, stats)
    return ag.add(pose, ag.mul(proj, cfg.proj_weight)), pose


# ---------------------------------------------------------------- optimizer


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return cfg.lr * (1.0 - cfg.decay) ** epoch


class Ranger:
    """Lookahead wrapped around bias-corrected Adam.

    Every ``k`` inner steps the slow weights move ``alpha`` of the way toward
    the fast weights and the fast weights are reset to them.
    """

    def __init__(self, params: list[Param], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}
        self.slow = {p.name: p.data.copy() for p in params}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise OptimizerError(p.name)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - cfg.beta1**t
        c2 = 1.0 - cfg.beta2**t
        sync = t % cfg.lookahead_k == 0
        for p in self.params:
            g = p.grad
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            m, v = self.m[p.name], self.v[p.name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            if sync:
                slow = self.slow[p.name]
                slow += cfg.lookahead_alpha * (p.data - slow)
                p.data[...] = slow

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt.m/{name}"] = self.m[name]
            out[f"opt.v/{name}"] = self.v[name]
            out[f"opt.slow/{name}"] = self.slow[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = arrays[f"opt.m/{name}"].copy()
            self.v[name] = arrays[f"opt.v/{name}"].copy()
            self.slow[name] = arrays[f"opt.slow/{name}"].copy()
        self.step_count = step_count


def optimizer_step(optimizer: Ranger, lr: float) -> None:
    optimizer.step(lr)


# ---------------------------------------------------------------- loop


def evaluate(model: Model, data: WindowDataset) -> float:
    """Eval-mode protocol-1 MPJPE over a dataset."""
    return mpjpe(model.predict(data.inputs), data.targets)


@dataclass
class TrainResult:
    curve: list[dict[str, float]]
    checkpoint_path: Path | None
    epochs_done: int
    behind_camera: int = 0


def format_curve(rows: list[dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for r in rows:
        w.writerow([int(r["epoch"]), repr(float(r["train_loss_mm"])), repr(float(r["val_mpjpe_mm"])), repr(float(r["lr"]))])
    return buf.getvalue()


def read_curve(path) -> list[dict[str, float]]:
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CURVE_HEADER:
            raise InputError(f"unexpected curve header {reader.fieldnames}")
        return [{k: float(v) for k, v in row.items()} for row in reader]


def _batches(n_items: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n_items)
    batches = [perm[i : i + batch_size] for i in range(0, n_items, batch_size)]
    # batch norm needs two samples; fold a singleton tail into the previous batch
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def train_loop(
    model: Model,
    train_set: WindowDataset,
    cfg: TrainConfig,
    out_dir=None,
    val_set: WindowDataset | None = None,
    resume: dict | None = None,
    on_epoch: Callable[[dict[str, float]], None] | None = None,
) -> TrainResult:
    """Seeded mini-batch training with per-epoch curve rows and checkpoints.

    ``resume`` is the dict returned by ``checkpoint.load_checkpoint``; epoch
    numbering and optimizer state continue from it.
    """
    from .checkpoint import save_checkpoint

    if len(train_set) < 2:
        raise InputError("need at least two training windows")
    if train_set.inputs.shape[1] != model.n:
        raise InputError(f"dataset windows have {train_set.inputs.shape[1]} frames, model needs {model.n}")
    if cfg.augment_flip and not train_set.mirror_pairs:
        raise ConfigError("flip augmentation needs mirror pairs")
    if cfg.dropout is not None:
        model.dropout_p = cfg.dropout
    params = model.parameters()
    opt = Ranger(params, cfg)
    curve: list[dict[str, float]] = []
    start = 0
    if resume is not None:
        if resume.get("optimizer"):
            opt.load_state(resume["optimizer"], resume["step_count"])
        start = resume["epoch"]
        curve = list(resume.get("curve", []))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.atcn" if out is not None else None
    stats = ReprojectionStats()
    val = val_set if val_set is not None else train_set

    for epoch in range(start, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        rng = np.random.default_rng([cfg.seed, epoch])
        model.rng = np.random.default_rng([cfg.seed, epoch, 1])
        losses, weights = [], []
        for idx in _batches(len(train_set), cfg.batch_size, rng):
            batch = train_set.subset(idx)
            if cfg.augment_flip:
                flip = rng.random(len(idx)) < 0.5
                if flip.any():
                    inputs, targets = batch.inputs.copy(), batch.targets.copy()
                    inputs[flip] = flip_horizontal(inputs[flip], batch.mirror_pairs)
                    targets[flip] = flip_horizontal(targets[flip], batch.mirror_pairs)
                    batch = dataclasses.replace(batch, inputs=inputs, targets=targets)
            model.zero_grad()
            # overflow is detected explicitly below and reported as divergence
            with np.errstate(over="ignore", invalid="ignore"):
                pred = model.forward_tensor(batch.inputs, train=True)
                loss, pose = total_loss(pred, batch, cfg, stats)
                if not np.isfinite(loss.data).all():
                    raise TrainingDiverged(epoch)
                ag.backward(loss)
            try:
                opt.step(lr)
            except OptimizerError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            losses.append(pose.item())
            weights.append(len(idx))
        with np.errstate(over="ignore", invalid="ignore"):
            val_err = evaluate(model, val)
        if not np.isfinite(val_err):
            raise TrainingDiverged(epoch, "validation error became non-finite")
        row = {
            "epoch": epoch,
            "train_loss_mm": float(np.average(losses, weights=weights)),
            "val_mpjpe_mm": val_err,
            "lr": lr,
        }
        curve.append(row)
        log.info("epoch %d loss %.3f val %.3f lr %.3g", epoch, row["train_loss_mm"], val_err, lr)
        if out is not None:
            save_checkpoint(model, ckpt_path, optimizer=opt, epoch=epoch + 1, train_config=cfg, curve=curve)
            atomic_write_text(out / "curve.csv", format_curve(curve))
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(curve, ckpt_path, len(curve), stats.behind_camera)


def mean_pose_baseline(train_set: WindowDataset, test_set: WindowDataset) -> float:
    """MPJPE of always predicting the mean training pose."""
    mean_pose = train_set.targets.mean(axis=0)
    return mpjpe(np.broadcast_to(mean_pose, test_set.targets.shape), test_set.targets)

