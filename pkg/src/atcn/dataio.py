"""Sequence files, windowing, synthetic motion, noise and flip augmentation."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ParseError

JPSEQ_VERSION = "jpseq v1"

# Human3.6M 17-joint topology
H36M_PARENTS = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15]
H36M_MIRROR_PAIRS = [[4, 1], [5, 2], [6, 3], [11, 14], [12, 15], [13, 16]]
H36M_NAMES = [
    "Hip", "RHip", "RKnee", "RFoot", "LHip", "LKnee", "LFoot", "Spine", "Thorax",
    "Nose", "Head", "LShoulder", "LElbow", "LWrist", "RShoulder", "RElbow", "RWrist",
]

# rest-pose bone offsets in mm; world axes are x right, y down, z forward
_H36M_OFFSETS = np.array(
    [
        [0, 0, 0],
        [-130, 0, 0], [0, 450, 0], [0, 440, 0],
        [130, 0, 0], [0, 450, 0], [0, 440, 0],
        [0, -230, 0], [0, -250, 0], [0, -110, -40], [0, -120, 20],
        [150, 0, 0], [0, 280, 0], [0, 250, 0],
        [-150, 0, 0], [0, 280, 0], [0, 250, 0],
    ],
    dtype=float,
)


@dataclass
class Skeleton:
    parents: list[int]
    mirror_pairs: list[list[int]]

    def __post_init__(self) -> None:
        J = len(self.parents)
        if J == 0 or self.parents[0] != -1:
            raise ConfigError("skeleton must be rooted at joint 0")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ConfigError(f"joint {j} has parent {p}; parents must precede children")
        for pair in self.mirror_pairs:
            if len(pair) != 2 or not all(0 <= i < J for i in pair):
                raise ConfigError(f"bad mirror pair {pair}")

    @property
    def joints(self) -> int:
        return len(self.parents)

    @classmethod
    def h36m(cls) -> Skeleton:
        return cls(list(H36M_PARENTS), [list(p) for p in H36M_MIRROR_PAIRS])

    def to_json(self) -> str:
        return json.dumps({"parents": self.parents, "mirror_pairs": self.mirror_pairs}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Skeleton:
        data = json.loads(text)
        if set(data) != {"parents", "mirror_pairs"}:
            raise ConfigError(f"skeleton JSON needs exactly 'parents' and 'mirror_pairs', got {sorted(data)}")
        return cls([int(p) for p in data["parents"]], [[int(a), int(b)] for a, b in data["mirror_pairs"]])


@dataclass
class JointSequence:
    frames: np.ndarray  # F x J x D
    skeleton: Skeleton | None = None

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 3 or self.frames.shape[2] not in (2, 3):
            raise InputError(f"joint sequence must be F x J x 2|3, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise InputError("joint sequence contains non-finite values")

    @property
    def F(self) -> int:
        return self.frames.shape[0]

    @property
    def J(self) -> int:
        return self.frames.shape[1]

    @property
    def D(self) -> int:
        return self.frames.shape[2]


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 1000
    height: int = 1000

    def __post_init__(self) -> None:
        self.R = np.asarray(self.R, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if self.R.shape != (3, 3) or self.t.shape != (3,):
            raise ConfigError("camera R must be 3x3 and t length 3")
        if not (np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9) and np.linalg.det(self.R) > 0):
            raise ConfigError("camera R is not a proper rotation")

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    def project_camera(self, pts_cam: np.ndarray) -> np.ndarray:
        """Pixel coordinates of camera-frame points."""
        z = pts_cam[..., 2]
        return np.stack([self.fx * pts_cam[..., 0] / z + self.cx, self.fy * pts_cam[..., 1] / z + self.cy], axis=-1)

    def project(self, pts_world: np.ndarray) -> np.ndarray:
        """Normalized image coordinates of world points."""
        return self.normalize(self.project_camera(self.world_to_camera(pts_world)))

    def normalize(self, px: np.ndarray) -> np.ndarray:
        # x maps to [-1, 1]; y keeps the aspect ratio
        w, h = self.width, self.height
        return np.stack([px[..., 0] / w * 2 - 1, px[..., 1] / w * 2 - h / w], axis=-1)

    def denormalize(self, uv: np.ndarray) -> np.ndarray:
        w, h = self.width, self.height
        return np.stack([(uv[..., 0] + 1) * w / 2, (uv[..., 1] + h / w) * w / 2], axis=-1)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "R": self.R.tolist(), "t": self.t.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Camera:
        expected = {"fx", "fy", "cx", "cy", "R", "t", "width", "height"}
        if set(data) != expected:
            raise ConfigError(f"camera JSON keys {sorted(data)} != {sorted(expected)}")
        return cls(**data)


# ---------------------------------------------------------------- files


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_sequence(seq: JointSequence) -> str:
    F, J, D = seq.frames.shape
    lines = [f"{JPSEQ_VERSION} J={J} D={D} F={F}"]
    for frame in seq.frames.reshape(F, J * D):
        lines.append(" ".join(format(float(v), ".17g") for v in frame))
    return "\n".join(lines) + "\n"


def save_sequence(seq: JointSequence, path) -> None:
    atomic_write_text(path, format_sequence(seq))


def parse_sequence(text: str) -> JointSequence:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", 1)
    head = lines[0].split()
    if len(head) != 5 or " ".join(head[:2]) != JPSEQ_VERSION:
        raise ParseError(f"bad header {lines[0]!r}; expected '{JPSEQ_VERSION} J=<int> D=<int> F=<int>'", 1)
    dims = {}
    for token, key in zip(head[2:], "JDF"):
        name, _, value = token.partition("=")
        if name != key or not value.isdigit():
            raise ParseError(f"bad header field {token!r}", 1)
        dims[key] = int(value)
    J, D, F = dims["J"], dims["D"], dims["F"]
    if D not in (2, 3) or J < 1:
        raise ParseError(f"unsupported dimensions J={J} D={D}", 1)
    if len(lines) - 1 != F:
        raise ParseError(f"header declares {F} frames but file has {len(lines) - 1} data lines", len(lines))
    out = np.empty((F, J * D))
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        tokens = line.split(" ")
        if len(tokens) != J * D:
            raise ParseError(f"expected {J * D} values, found {len(tokens)}", lineno)
        try:
            values = [float(t) for t in tokens]
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", lineno) from None
        if not all(math.isfinite(v) for v in values):
            raise ParseError("non-finite value", lineno)
        out[i] = values
    return JointSequence(out.reshape(F, J, D))


def load_sequence(path) -> JointSequence:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_sequence(fh.read())


def load_camera(path) -> Camera:
    with open(path, encoding="utf-8") as fh:
        return Camera.from_dict(json.load(fh))


def save_camera(camera: Camera, path) -> None:
    atomic_write_text(path, json.dumps(camera.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------- windows


@dataclass
class Window:
    poses: np.ndarray  # n x J x 2
    target: int
    source_frame: int


def window_indices(F: int, n: int, causal: bool) -> np.ndarray:
    """``F x n`` frame indices with edge replication at the boundaries."""
    if n < 1:
        raise ConfigError(f"window length must be >= 1, got {n}")
    if not causal and n % 2 == 0:
        raise ConfigError("non-causal windows need an odd length")
    offsets = np.arange(n) - (n - 1 if causal else (n - 1) // 2)
    return np.clip(np.arange(F)[:, None] + offsets[None, :], 0, F - 1)


def window_array(frames: np.ndarray, n: int, causal: bool) -> np.ndarray:
    frames = np.asarray(frames)
    return frames[window_indices(frames.shape[0], n, causal)]


def make_windows(seq: JointSequence, n: int, causal: bool) -> list[Window]:
    if seq.D != 2:
        raise InputError("windows are cut from 2-D sequences")
    target = n - 1 if causal else (n - 1) // 2
    arr = window_array(seq.frames, n, causal)
    return [Window(arr[f], target, f) for f in range(seq.F)]


# ---------------------------------------------------------------- augmentation


def add_noise(seq: JointSequence, sigma_px: float, seed: int, camera: Camera | None = None) -> JointSequence:
    """Add i.i.d. N(0, sigma^2) pixel noise to a normalized 2-D sequence."""
    if sigma_px < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma_px}")
    if seq.D != 2:
        raise InputError("noise is added to 2-D sequences")
    width = camera.width if camera is not None else 1000
    if sigma_px == 0:
        return JointSequence(seq.frames.copy(), seq.skeleton)
    noise = np.random.default_rng(seed).normal(0.0, 1.0, seq.frames.shape) * sigma_px
    # one pixel spans 2 / width normalized units on both axes
    return JointSequence(seq.frames + noise * (2.0 / width), seq.skeleton)


def flip_horizontal(poses: np.ndarray, mirror_pairs) -> np.ndarray:
    """Negate x and swap left/right joints; works on any ``... x J x D`` array."""
    if not mirror_pairs:
        raise ConfigError("flip needs a mirror-pair table")
    out = np.array(poses, dtype=float, copy=True)
    out[..., 0] *= -1
    left = [a for a, _ in mirror_pairs]
    right = [b for _, b in mirror_pairs]
    out[..., left + right, :] = out[..., right + left, :]
    return out


# ---------------------------------------------------------------- synthetic motion


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    one, zero = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([one, zero, zero], -1), np.stack([zero, c, -s], -1), np.stack([zero, s, c], -1)], -2)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    one, zero = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, zero, s], -1), np.stack([zero, one, zero], -1), np.stack([-s, zero, c], -1)], -2)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    one, zero = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, zero], -1), np.stack([s, c, zero], -1), np.stack([zero, zero, one], -1)], -2)


# per-joint amplitude (rad) of local rotations about x, y, z
_AMPLITUDE = {
    1: (0.15, 0.1, 0.15), 4: (0.15, 0.1, 0.15),  # hips
    2: (0.6, 0.05, 0.05), 5: (0.6, 0.05, 0.05),  # knees
    3: (0.2, 0.05, 0.05), 6: (0.2, 0.05, 0.05),
    7: (0.2, 0.2, 0.15), 8: (0.15, 0.15, 0.1), 9: (0.2, 0.3, 0.1), 10: (0.1, 0.1, 0.1),
    11: (0.6, 0.3, 0.6), 14: (0.6, 0.3, 0.6),  # shoulders
    12: (0.9, 0.2, 0.3), 15: (0.9, 0.2, 0.3),  # elbows
    13: (0.3, 0.3, 0.3), 16: (0.3, 0.3, 0.3),
}

FPS = 50.0


def _smooth_signal(rng, F, amplitude, n_terms=2, fmin=0.1, fmax=1.0):
    t = np.arange(F) / FPS
    out = np.zeros(F)
    for _ in range(n_terms):
        freq = rng.uniform(fmin, fmax)
        out += rng.uniform(0.3, 1.0) * amplitude / n_terms * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return out


def forward_kinematics(offsets: np.ndarray, parents, root_pos: np.ndarray, local_rots: np.ndarray) -> np.ndarray:
    """``F x J x 3`` joint positions from ``F x J x 3 x 3`` local rotations."""
    F, J = local_rots.shape[:2]
    glob = np.empty_like(local_rots)
    pos = np.empty((F, J, 3))
    glob[:, 0] = local_rots[:, 0]
    pos[:, 0] = root_pos
    for j in range(1, J):
        p = parents[j]
        glob[:, j] = glob[:, p] @ local_rots[:, j]
        pos[:, j] = pos[:, p] + glob[:, p] @ offsets[j]
    return pos


def default_camera(pitch: float = np.deg2rad(6.0)) -> Camera:
    """Camera 1.5 m above the floor at the world origin, pitched slightly down."""
    R = _rot_x(np.float64(pitch))
    centre = np.array([0.0, -1500.0, 0.0])
    return Camera(fx=1000.0, fy=1000.0, cx=500.0, cy=500.0, R=R, t=-R @ centre, width=1000, height=1000)


def synth_generate(seed: int, F: int, J: int = 17) -> tuple[JointSequence, Camera, JointSequence]:
    """Deterministic kinematic-tree motion, its camera, and its 2-D projection.

    Joint angles are sums of low-frequency sinusoids; the root wanders over a
    2 x 2 m patch of floor 4-6 m in front of the camera and turns freely.
    Returns (world-frame 3-D sequence in mm, camera, normalized 2-D sequence).
    """
    if F < 1:
        raise ConfigError("need at least one frame")
    if J != 17:
        raise ConfigError("the synthetic generator uses the 17-joint skeleton")
    rng = np.random.default_rng(seed)
    skeleton = Skeleton.h36m()
    # per-subject bone-length scale
    offsets = _H36M_OFFSETS * rng.uniform(0.9, 1.1)
    rots = np.tile(np.eye(3), (F, J, 1, 1))
    for j, (ax, ay, az) in _AMPLITUDE.items():
        bias = rng.uniform(-0.5, 0.5, 3) * np.array([ax, ay, az])
        angles = [bias[i] + _smooth_signal(rng, F, a) for i, a in enumerate((ax, ay, az))]
        rots[:, j] = _rot_z(angles[2]) @ _rot_y(angles[1]) @ _rot_x(angles[0])
    yaw = rng.uniform(-np.pi, np.pi) + _smooth_signal(rng, F, 1.5, fmin=0.02, fmax=0.2)
    lean = _smooth_signal(rng, F, 0.1)
    rots[:, 0] = _rot_y(yaw) @ _rot_x(lean)
    t = np.arange(F) / FPS
    root = np.empty((F, 3))
    for axis, centre in ((0, 0.0), (2, 5000.0)):
        phase, freq = rng.uniform(0, 2 * np.pi), rng.uniform(0.03, 0.15)
        root[:, axis] = centre + 1000.0 * np.sin(2 * np.pi * freq * t + phase)
    leg = offsets[2, 1] + offsets[3, 1]
    root[:, 1] = -leg - 20.0 + 15.0 * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * t)
    pos = forward_kinematics(offsets, skeleton.parents, root, rots)
    camera = default_camera(np.deg2rad(rng.uniform(4.0, 8.0)))
    seq3d = JointSequence(pos, skeleton)
    seq2d = JointSequence(camera.project(pos), skeleton)
    return seq3d, camera, seq2d


def bone_lengths(seq3d: JointSequence, parents) -> np.ndarray:
    pos = seq3d.frames
    return np.stack([np.linalg.norm(pos[:, j] - pos[:, p], axis=-1) for j, p in enumerate(parents) if p >= 0], axis=1)
