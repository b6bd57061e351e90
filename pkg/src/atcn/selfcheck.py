"""Built-in health checks shared by the ``selfcheck`` command and the tests.

``fast`` covers gradient fidelity, attention normalization, Procrustes
invariance and the causal prefix property.  ``full`` adds the structural
audits (receptive field, parameter counts) and the overfit oracle.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .attention import (
    kernel_attention,
    temporal_attention_init,
    temporal_attention_propagate,
)
from .autograd import Param
from .dataio import Camera, JointSequence, synth_generate, window_array
from .metrics import p_mpjpe
from .model import Model, ModelConfig, build, param_count_for, receptive_field
from .train import (
    TrainConfig,
    build_dataset,
    evaluate,
    pose_loss,
    reprojection_loss,
    train_loop,
)

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ---------------------------------------------------------------- gradients


def _weighted(out: ag.Tensor, rng: np.random.Generator) -> ag.Tensor:
    """Reduce to a scalar through fixed random weights so every entry matters."""
    w = rng.normal(size=out.shape)
    return ag.tsum(ag.mul(out, w))


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], ag.Tensor], list[Param]]]:
    def p(name, *shape, low=-1.0, high=1.0):
        return Param(name, rng.uniform(low, high, shape))

    a, b = p("a", 3, 4), p("b", 3, 4)
    pos = p("pos", 3, 4, low=0.5, high=2.0)
    row = p("row", 4)
    m1, m2 = p("m1", 2, 3, 4), p("m2", 4, 5)
    x = p("x", 2, 4, 11)
    w_full, w_group = p("w_full", 6, 4, 3), p("w_group", 6, 2, 3)
    bias = p("bias", 6)
    lin_w, lin_b = p("lin_w", 5, 4), p("lin_b", 5)
    gamma, beta = p("gamma", 4, low=0.5, high=1.5), p("beta", 4)
    state = ag.BatchNormState(4)
    state.running_mean, state.running_var = rng.normal(size=4), rng.uniform(0.5, 1.5, 4)
    branches = [p(f"branch{i}", 2, 4, 5) for i in range(3)]
    theta_r, theta_m = p("theta_r", 2, 4), p("theta_m", 3, 4, 2)
    w_prev, theta_t = p("w_prev", 2, 7, low=0.0, high=1.0), p("theta_t", 7, 5)
    pose_pred = p("pose_pred", 3, 5, 3, low=-300, high=300)
    pose_gt = rng.uniform(-300, 300, (3, 5, 3))
    # relu inputs stay clear of the kink at zero
    relu_in = Param("relu_in", rng.choice([-1.0, 1.0], (3, 4)) * rng.uniform(0.1, 1.0, (3, 4)))
    cam = Camera(fx=1000.0, fy=1000.0, cx=500.0, cy=500.0, R=np.eye(3), t=np.zeros(3))
    roots = np.column_stack([rng.uniform(-200, 200, (3, 2)), rng.uniform(4000, 6000, 3)])
    input2d = rng.uniform(-0.5, 0.5, (3, 5, 2))

    def drop():
        return ag.dropout(x, 0.3, True, np.random.default_rng(7))

    cases = {
        "add": (lambda: ag.add(a, row), [a, row]),
        "sub": (lambda: ag.sub(a, b), [a, b]),
        "mul": (lambda: ag.mul(a, b), [a, b]),
        "div": (lambda: ag.div(a, pos), [a, pos]),
        "square": (lambda: ag.square(a), [a]),
        "exp": (lambda: ag.exp(a), [a]),
        "log": (lambda: ag.log(pos), [pos]),
        "relu": (lambda: ag.relu(relu_in), [relu_in]),
        "sigmoid": (lambda: ag.sigmoid(a), [a]),
        "softmax": (lambda: ag.softmax(a, axis=0), [a]),
        "norm": (lambda: ag.norm(pos, axis=-1), [pos]),
        "sum": (lambda: ag.tsum(a, axis=1, keepdims=True), [a]),
        "mean": (lambda: ag.tmean(a, axis=0), [a]),
        "reshape": (lambda: ag.reshape(a, (4, 3)), [a]),
        "transpose": (lambda: ag.transpose(m1, (2, 0, 1)), [m1]),
        "getitem": (lambda: a[np.array([0, 2, 0]), 1:3], [a]),
        "crop_frames": (lambda: ag.crop_frames(x, 5, "center"), [x]),
        "stack": (lambda: ag.stack([a, b], axis=1), [a, b]),
        "matmul": (lambda: ag.matmul(m1, m2), [m1, m2]),
        "linear": (lambda: ag.linear(a, lin_w, lin_b), [a, lin_w, lin_b]),
        "conv_valid_dilated": (lambda: ag.conv1d_dilated(x, w_full, bias, 3, 1, "valid"), [x, w_full, bias]),
        "conv_grouped_same": (lambda: ag.conv1d_dilated(x, w_group, bias, 2, 2, "same"), [x, w_group, bias]),
        "conv_causal": (lambda: ag.conv1d_dilated(x, w_full, None, 2, 1, "causal"), [x, w_full]),
        "global_average_pool": (lambda: ag.global_average_pool(x), [x]),
        "batch_norm_train": (lambda: ag.batch_norm(x, gamma, beta, ag.BatchNormState(4), True), [x, gamma, beta]),
        "batch_norm_eval": (lambda: ag.batch_norm(x, gamma, beta, state, False), [x, gamma, beta]),
        "dropout": (drop, [x]),
        "kernel_attention": (
            lambda: kernel_attention(branches, theta_r, theta_m)[0],
            [*branches, theta_r, theta_m],
        ),
        "temporal_attention": (lambda: temporal_attention_propagate(w_prev, theta_t), [w_prev, theta_t]),
        "pose_loss": (lambda: pose_loss(pose_pred, pose_gt), [pose_pred]),
        "reprojection_loss": (lambda: reprojection_loss(pose_pred, cam, roots, input2d), [pose_pred]),
    }
    return cases


def primitive_gradient_errors(seed: int = 0) -> dict[str, float]:
    """Worst finite-difference relative error per primitive."""
    rng = np.random.default_rng(seed)
    errors = {}
    for name, (fn, params) in _primitive_cases(rng).items():
        weight_rng_seed = int(rng.integers(2**31))

        def loss(fn=fn, s=weight_rng_seed):
            return _weighted(fn(), np.random.default_rng(s))

        errors[name] = ag.finite_diff_check(loss, params, n_samples=60, rng=np.random.default_rng(1))
    return errors


def shrunk_config(**overrides) -> ModelConfig:
    base = dict(layers=4, levels=2, channels=8, groups=2, reduction=4, dropout=0.0, seed=3)
    base.update(overrides)
    return ModelConfig(**base)


def randomize_batch_norm(model: Model, rng: np.random.Generator) -> None:
    """Move gamma/beta and running statistics off their initial values so
    gradient checks do not sit on ReLU kinks of dead channels."""
    for prm in model.parameters():
        if prm.name.endswith(".gamma"):
            prm.data[...] = rng.uniform(0.5, 1.5, prm.shape)
        elif prm.name.endswith(".beta"):
            prm.data[...] = rng.uniform(-0.5, 0.5, prm.shape)
    bufs = {}
    for key, value in model.buffers().items():
        bufs[key] = rng.uniform(0.5, 1.5, value.shape) if key.endswith("var") else rng.normal(0, 0.2, value.shape)
    model.set_buffers(bufs)


def model_gradient_error(train: bool = True, seed: int = 0, n_samples: int = 150) -> float:
    """Finite-difference check through a shrunken L4xV2 model (C=8)."""
    rng = np.random.default_rng(seed)
    model = build(shrunk_config())
    randomize_batch_norm(model, rng)
    windows = rng.uniform(-0.8, 0.8, (4, model.n, model.config.joints, 2))
    targets = rng.uniform(-400, 400, (4, model.config.joints, 3))
    return ag.finite_diff_check(
        lambda: pose_loss(model.forward_tensor(windows, train=train), targets),
        model.parameters(),
        n_samples=n_samples,
        rng=np.random.default_rng(seed + 1),
    )


# ---------------------------------------------------------------- attention


def ncc_oracle(p_i: np.ndarray, p_t: np.ndarray) -> float:
    """Loop-form reference for the clamped centered cosine."""
    J = len(p_i)
    cx_i, cy_i = sum(p[0] for p in p_i) / J, sum(p[1] for p in p_i) / J
    cx_t, cy_t = sum(p[0] for p in p_t) / J, sum(p[1] for p in p_t) / J
    dot = na = nb = 0.0
    for (xi, yi), (xt, yt) in zip(p_i, p_t):
        ai, bi, at, bt = xi - cx_i, yi - cy_i, xt - cx_t, yt - cy_t
        dot += ai * at + bi * bt
        na += ai * ai + bi * bi
        nb += at * at + bt * bt
    if na == 0 or nb == 0:
        return 0.0
    return min(1.0, max(0.0, dot / (na**0.5 * nb**0.5)))


def attention_normalization_error(trials: int = 1000, seed: int = 0) -> float:
    """Largest |sum_m a_m - 1| of kernel-attention weights over random inputs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        m, c, r = int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 5))
        scale = 10.0 ** rng.uniform(-2, 2)
        branches = [ag.Tensor(rng.normal(0, scale, (2, c, 3))) for _ in range(m)]
        _, weights = kernel_attention(branches, ag.Tensor(rng.normal(size=(r, c))), ag.Tensor(rng.normal(size=(m, c, r))))
        worst = max(worst, float(np.abs(weights.data.sum(axis=1) - 1.0).max()))
    return worst


def temporal_init_error(trials: int = 50, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.choice([3, 9, 27]))
        window = rng.normal(size=(n, 17, 2))
        target = int(rng.integers(n))
        got = temporal_attention_init(window, target)
        want = np.array([ncc_oracle(window[i], window[target]) for i in range(n)])
        worst = max(worst, float(np.abs(got - want).max()))
    return worst


# ---------------------------------------------------------------- metrics


def random_similarity(rng: np.random.Generator):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q, float(rng.uniform(0.2, 5.0)), rng.normal(0, 1000, 3)


def procrustes_invariance_error(trials: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        gt = rng.normal(0, 300, (17, 3))
        rot, scale, trans = random_similarity(rng)
        worst = max(worst, p_mpjpe(scale * gt @ rot.T + trans, gt))
    return worst


# ---------------------------------------------------------------- causal


def causal_prefix_max_change(trials: int = 100, seed: int = 0, model: Model | None = None) -> float:
    """Largest change of already-emitted causal outputs after editing later frames."""
    rng = np.random.default_rng(seed)
    model = model or build(shrunk_config(causal=True))
    n, J = model.n, model.config.joints
    worst = 0.0
    for _ in range(trials):
        seq = rng.uniform(-0.8, 0.8, (n + 10, J, 2))
        t = int(rng.integers(0, n + 9))
        before = model.predict(window_array(seq, n, causal=True)[: t + 1])
        edited = seq.copy()
        edited[t + 1 :] += rng.normal(0, 0.5, edited[t + 1 :].shape)
        after = model.predict(window_array(edited, n, causal=True)[: t + 1])
        worst = max(worst, float(np.abs(after - before).max()))
    return worst


# ---------------------------------------------------------------- structure


PAPER_PARAMS = {"L4xV2": 5.69e6, "L6xV4": 11.25e6}


def param_audit() -> dict[str, float]:
    counts = {name: param_count_for(ModelConfig.prototype(name)) for name in ("L4xV2", "L5xV3", "L6xV4")}
    counts["L6xV4_G1"] = param_count_for(ModelConfig.prototype("L6xV4", groups=1))
    return counts


def receptive_field_audit() -> dict[str, int]:
    return {name: receptive_field(ModelConfig.prototype(name)) for name in ("L4xV2", "L5xV3", "L6xV4")}


# ---------------------------------------------------------------- overfit


OVERFIT_MODEL = dict(channels=64, reduction=16, dropout=0.0, seed=0)
OVERFIT_TRAIN = dict(lr=2e-2, decay=0.01, epochs=500, batch_size=32, lookahead_k=1, lookahead_alpha=1.0, seed=0)


def overfit_data(windows: int = 32, seed: int = 1):
    """``windows`` noise-free synthetic windows spread 20 frames apart."""
    seq3d, camera, seq2d = synth_generate(seed, windows * 20)
    full = build_dataset(seq2d, seq3d, 27, camera=camera)
    return full.subset(np.arange(0, windows * 20, 20))


def overfit_oracle(epochs: int = 500, on_epoch=None) -> dict:
    """Memorize 32 windows with a C=64, n=27 model.

    Returns the eval-mode training MPJPE at the end and the first epoch
    (1-based) at which it dropped below 1 mm, if any.
    """
    data = overfit_data()
    model = build(ModelConfig(**OVERFIT_MODEL))
    cfg = TrainConfig(**{**OVERFIT_TRAIN, "epochs": epochs})
    start = time.perf_counter()
    result = train_loop(model, data, cfg, on_epoch=on_epoch)
    seconds = time.perf_counter() - start
    below = [int(r["epoch"]) + 1 for r in result.curve if r["val_mpjpe_mm"] < 1.0]
    return {
        "final_mpjpe_mm": evaluate(model, data),
        "first_epoch_below_1mm": below[0] if below else None,
        "seconds": seconds,
        "curve": result.curve,
    }


# ---------------------------------------------------------------- data


def projection_consistency_error(seq2d: JointSequence, seq3d: JointSequence, camera: Camera) -> float:
    """Largest normalized-coordinate gap between the 2-D file and the
    projection of the 3-D file."""
    if seq2d.frames.shape[:2] != seq3d.frames.shape[:2]:
        return float("inf")
    return float(np.abs(camera.project(seq3d.frames) - seq2d.frames).max())


# ---------------------------------------------------------------- runner


def _timed(name: str, fn: Callable[[], tuple[bool, str, dict]]) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail, values = fn()
    except Exception as exc:  # a crashing check is a failing check
        passed, detail, values = False, f"{type(exc).__name__}: {exc}", {}
    return CheckResult(name, passed, detail, time.perf_counter() - start, values)


def _grad_primitives():
    errs = primitive_gradient_errors()
    worst = max(errs, key=errs.get)
    bad = [k for k, v in errs.items() if not v < GRAD_TOL]
    return not bad, f"worst {worst} {errs[worst]:.2e} over {len(errs)} primitives" + (f"; failing {bad}" if bad else ""), errs


def _grad_model():
    e_train, e_eval = model_gradient_error(True), model_gradient_error(False)
    return max(e_train, e_eval) < GRAD_TOL, f"train {e_train:.2e}, eval {e_eval:.2e}", {"train": e_train, "eval": e_eval}


def _attention():
    e_k, e_t = attention_normalization_error(), temporal_init_error()
    return e_k < 1e-9 and e_t < 1e-12, f"branch-sum error {e_k:.1e}, ncc error {e_t:.1e}", {"kernel": e_k, "temporal": e_t}


def _procrustes():
    e = procrustes_invariance_error()
    return e < 1e-9, f"max p_mpjpe(T(gt), gt) {e:.1e} mm", {"max": e}


def _causal():
    e = causal_prefix_max_change(trials=20)
    return e == 0.0, f"max change {e}", {"max": e}


def _receptive():
    rf = receptive_field_audit()
    return rf == {"L4xV2": 27, "L5xV3": 81, "L6xV4": 243}, str(rf), rf


def _params():
    c = param_audit()
    ok = all(abs(c[k] / v - 1) <= 0.15 for k, v in PAPER_PARAMS.items()) and c["L6xV4_G1"] > 3 * c["L6xV4"]
    detail = ", ".join(f"{k}={v:,}" for k, v in c.items())
    return ok, detail, c


def _overfit():
    res = overfit_oracle()
    return res["final_mpjpe_mm"] < 1.0, f"train MPJPE {res['final_mpjpe_mm']:.3f} mm in {res['seconds']:.0f}s", res


def _projection(seq2d, seq3d, camera):
    def run():
        e = projection_consistency_error(seq2d, seq3d, camera)
        return e < 1e-9, f"max normalized gap {e:.1e}", {"max": e}

    return run


def run_checks(level: str = "fast", data: tuple[JointSequence, JointSequence, Camera] | None = None, report=None) -> list[CheckResult]:
    """Run the checks for ``level``; ``report`` is called with each result."""
    checks: list[tuple[str, Callable]] = [
        ("gradients.primitives", _grad_primitives),
        ("gradients.model", _grad_model),
        ("attention.normalization", _attention),
        ("metrics.procrustes_invariance", _procrustes),
        ("model.causal_prefix", _causal),
    ]
    if data is not None:
        checks.append(("data.projection_consistency", _projection(*data)))
    if level == "full":
        checks += [
            ("model.receptive_field", _receptive),
            ("model.param_count", _params),
            ("train.overfit_oracle", _overfit),
        ]
    results = []
    for name, fn in checks:
        res = _timed(name, fn)
        results.append(res)
        if report is not None:
            report(res)
    return results
