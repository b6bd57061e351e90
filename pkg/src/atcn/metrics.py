"""MPJPE (protocol 1), P-MPJPE (protocol 2), N-MPJPE and error traces.

All functions accept a single ``J x 3`` pose or a sequence ``F x J x 3``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, InputError

ROOT = 0


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise InputError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.ndim != 3 or pred.shape[-1] != 3:
        raise InputError(f"expected F x J x 3 poses, got {pred.shape}")
    return pred, gt


def root_center(seq: np.ndarray, root: int = ROOT) -> np.ndarray:
    return seq - seq[..., root : root + 1, :]


def joint_errors(pred, gt, root: int = ROOT) -> np.ndarray:
    """``F x J`` Euclidean errors after root alignment."""
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(root_center(pred, root) - root_center(gt, root), axis=-1)


def mpjpe(pred, gt, root: int = ROOT) -> float:
    return float(joint_errors(pred, gt, root).mean())


def _procrustes_batch(pred: np.ndarray, gt: np.ndarray):
    mu_p = pred.mean(axis=1, keepdims=True)
    mu_g = gt.mean(axis=1, keepdims=True)
    p0, g0 = pred - mu_p, gt - mu_g
    norm_p = (p0**2).sum(axis=(1, 2))
    norm_g = (g0**2).sum(axis=(1, 2))
    if np.any(norm_p == 0) or np.any(norm_g == 0):
        raise AlignmentError("Procrustes alignment is undefined when all joints coincide")
    h = np.swapaxes(p0, 1, 2) @ g0  # F x 3 x 3
    u, s, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, 1, 2)
    ut = np.swapaxes(u, 1, 2)
    sign = np.sign(np.linalg.det(v @ ut))
    sign[sign == 0] = 1.0
    d = np.ones_like(s)
    d[:, -1] = sign
    rot = v @ (d[:, :, None] * ut)  # R = V D U^T
    scale = (s * d).sum(axis=1) / norm_p
    trans = mu_g - scale[:, None, None] * (mu_p @ np.swapaxes(rot, 1, 2))
    return rot, scale, trans


def procrustes_transform(pred, gt) -> tuple[np.ndarray, float, np.ndarray]:
    """Rotation, scale and translation minimizing ``sum |s R p + t - g|^2``."""
    p, g = _pair(pred, gt)
    rot, scale, trans = _procrustes_batch(p, g)
    return rot[0], float(scale[0]), trans[0, 0]


def procrustes_align(pred, gt) -> np.ndarray:
    """Similarity-align ``pred`` onto ``gt`` frame by frame (rotation is proper)."""
    squeeze = np.asarray(pred).ndim == 2
    p, g = _pair(pred, gt)
    rot, scale, trans = _procrustes_batch(p, g)
    aligned = scale[:, None, None] * (p @ np.swapaxes(rot, 1, 2)) + trans
    return aligned[0] if squeeze else aligned


def p_mpjpe_errors(pred, gt) -> np.ndarray:
    p, g = _pair(pred, gt)
    return np.linalg.norm(procrustes_align(p, g) - g, axis=-1)


def p_mpjpe(pred, gt) -> float:
    return float(p_mpjpe_errors(pred, gt).mean())


def n_mpjpe_errors(pred, gt, root: int = ROOT) -> np.ndarray:
    p, g = _pair(pred, gt)
    p, g = root_center(p, root), root_center(g, root)
    pp = (p * p).sum(axis=(1, 2))
    pg = (p * g).sum(axis=(1, 2))
    # zero-norm prediction: scale is undefined, use 0
    scale = np.where(pp > 0, pg / np.where(pp > 0, pp, 1.0), 0.0)
    return np.linalg.norm(scale[:, None, None] * p - g, axis=-1)


def n_mpjpe(pred, gt, root: int = ROOT) -> float:
    return float(n_mpjpe_errors(pred, gt, root).mean())


PROTOCOL_ERRORS = {"1": joint_errors, "2": p_mpjpe_errors, "n": n_mpjpe_errors}


@dataclass
class MetricsReport:
    per_frame: np.ndarray  # F, protocol-1 error per frame (mm)
    per_joint: np.ndarray  # J, protocol-1 error per joint (mm)
    mpjpe_mm: float | None
    p_mpjpe_mm: float | None
    n_mpjpe_mm: float | None
    frames: int
    joints: int
    errors: np.ndarray  # F x J errors of the traced protocol
    traced_protocol: str = "1"

    def to_json_dict(self) -> dict:
        return {
            "mpjpe_mm": self.mpjpe_mm,
            "p_mpjpe_mm": self.p_mpjpe_mm,
            "n_mpjpe_mm": self.n_mpjpe_mm,
            "frames": self.frames,
            "joints": self.joints,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["frame", "joint", "err_mm"])
        for f in range(self.errors.shape[0]):
            for j in range(self.errors.shape[1]):
                writer.writerow([f, j, repr(float(self.errors[f, j]))])
        return buf.getvalue()


def trace_errors(pred, gt, protocols: str = "all") -> MetricsReport:
    """Aggregate metrics plus per-frame and per-joint breakdowns.

    ``protocols`` is ``"1"``, ``"2"``, ``"n"`` or ``"all"``; the CSV trace
    follows the selected protocol (protocol 1 for ``"all"``).
    """
    if protocols not in ("1", "2", "n", "all"):
        raise InputError(f"unknown protocol {protocols!r}")
    p, g = _pair(pred, gt)
    e1 = joint_errors(p, g)
    want = {"1", "2", "n"} if protocols == "all" else {protocols}
    values = {key: float(PROTOCOL_ERRORS[key](p, g).mean()) if key in want else None for key in ("1", "2", "n")}
    traced = "1" if protocols == "all" else protocols
    errs = e1 if traced == "1" else PROTOCOL_ERRORS[traced](p, g)
    return MetricsReport(
        per_frame=e1.mean(axis=1),
        per_joint=e1.mean(axis=0),
        mpjpe_mm=values["1"],
        p_mpjpe_mm=values["2"],
        n_mpjpe_mm=values["n"],
        frames=p.shape[0],
        joints=p.shape[1],
        errors=errs,
        traced_protocol=traced,
    )
