import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atcn.errors import AlignmentError, InputError
from atcn.metrics import (
    joint_errors,
    mpjpe,
    n_mpjpe,
    n_mpjpe_errors,
    p_mpjpe,
    p_mpjpe_errors,
    procrustes_align,
    procrustes_transform,
    trace_errors,
)
from atcn.selfcheck import procrustes_invariance_error, random_similarity

seeds = st.integers(0, 2**31 - 1)


def random_pose(rng, J=17):
    return rng.normal(0, 300, (J, 3))


# ---------------------------------------------------------------- protocol 1


def test_mpjpe_examples():
    rng = np.random.default_rng(0)
    gt = random_pose(rng)
    assert mpjpe(gt, gt) == 0.0
    pred = gt.copy()
    pred[5] += [3.0, 4.0, 0.0]
    assert mpjpe(pred, gt) == pytest.approx(5 / 17, abs=1e-12)
    assert mpjpe(gt + [10.0, -4.0, 7.0], gt) == pytest.approx(0.0, abs=1e-12)


def test_mpjpe_root_offset_spreads_to_all_joints():
    gt = np.zeros((17, 3))
    gt[1:] = np.random.default_rng(1).normal(size=(16, 3))
    pred = gt.copy()
    pred[0] += [0.0, 0.0, 17.0]
    # moving the root shifts every other joint by 17 mm after alignment
    assert mpjpe(pred, gt) == pytest.approx(16.0, abs=1e-12)


def test_mpjpe_shape_errors():
    with pytest.raises(InputError):
        mpjpe(np.zeros((17, 3)), np.zeros((16, 3)))
    with pytest.raises(InputError):
        mpjpe(np.zeros((17, 2)), np.zeros((17, 2)))


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_mpjpe_symmetric_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(0, 200, (4, 17, 3)), rng.normal(0, 200, (4, 17, 3))
    assert mpjpe(a, b) == pytest.approx(mpjpe(b, a), abs=1e-9)
    perm = np.concatenate([[0], 1 + rng.permutation(16)])  # keep the root first
    assert mpjpe(a[:, perm], b[:, perm]) == pytest.approx(mpjpe(a, b), abs=1e-9)
    full_perm = rng.permutation(17)
    assert p_mpjpe(a[:, full_perm], b[:, full_perm]) == pytest.approx(p_mpjpe(a, b), abs=1e-8)


# ---------------------------------------------------------------- procrustes


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_procrustes_recovers_similarity(seed):
    rng = np.random.default_rng(seed)
    gt = random_pose(rng)
    rot, scale, trans = random_similarity(rng)
    np.testing.assert_allclose(procrustes_align(scale * gt @ rot.T + trans, gt), gt, atol=1e-9)


def test_procrustes_recovers_scale():
    gt = random_pose(np.random.default_rng(2))
    np.testing.assert_allclose(procrustes_align(2 * gt, gt), gt, atol=1e-9)
    _, scale, _ = procrustes_transform(2 * gt, gt)
    assert scale == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_procrustes_rotation_is_proper(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_pose(rng), random_pose(rng)
    rot, _, _ = procrustes_transform(pred, gt)
    np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-9)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)


def test_procrustes_reflection_is_not_used():
    gt = random_pose(np.random.default_rng(3))
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    rot, _, _ = procrustes_transform(mirrored, gt)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)
    assert p_mpjpe(mirrored, gt) > 1.0


def test_procrustes_beats_random_transforms():
    rng = np.random.default_rng(4)
    pred, gt = random_pose(rng), random_pose(rng)
    best = ((procrustes_align(pred, gt) - gt) ** 2).sum()
    assert best <= ((pred - gt) ** 2).sum()
    for _ in range(1000):
        rot, scale, trans = random_similarity(rng)
        assert best <= ((scale * pred @ rot.T + trans - gt) ** 2).sum()


def test_procrustes_frozen_values():
    # seed 7: the unconstrained optimum is a proper rotation, and
    # scipy.linalg.orthogonal_procrustes gives the same 293.358948691268 mm
    rng = np.random.default_rng(7)
    pred, gt = random_pose(rng, J=5), random_pose(rng, J=5)
    assert p_mpjpe(pred, gt) == pytest.approx(293.35894869126844, abs=1e-9)
    assert n_mpjpe(pred, gt) == pytest.approx(508.3144514780512, abs=1e-9)
    assert mpjpe(pred, gt) == pytest.approx(564.70615454776, abs=1e-9)


def test_procrustes_degenerate_input():
    with pytest.raises(AlignmentError):
        p_mpjpe(np.ones((17, 3)), random_pose(np.random.default_rng(6)))


# ---------------------------------------------------------------- protocol 2 / N


def test_p_mpjpe_of_transformed_gt_is_zero():
    assert procrustes_invariance_error(trials=100, seed=7) < 1e-9


def test_p_mpjpe_flipped_joint_is_positive():
    gt = random_pose(np.random.default_rng(8))
    pred = gt.copy()
    pred[9] = -pred[9]
    assert p_mpjpe(pred, gt) > 0.0


def test_n_mpjpe_examples():
    rng = np.random.default_rng(9)
    gt = random_pose(rng)
    gt -= gt[0]
    assert n_mpjpe(3 * gt, gt) == pytest.approx(0.0, abs=1e-9)
    rot, _, _ = random_similarity(rng)
    rotated = gt @ rot.T
    assert n_mpjpe(rotated, gt) > 1.0
    assert p_mpjpe(rotated, gt) < 1e-9


def test_n_mpjpe_zero_prediction_uses_zero_scale():
    gt = random_pose(np.random.default_rng(10))
    assert n_mpjpe(np.zeros((17, 3)), gt) == pytest.approx(mpjpe(np.zeros((17, 3)), gt))


def test_inequality_chain_on_random_sequence_pairs():
    rng = np.random.default_rng(11)
    for _ in range(100):
        pred, gt = rng.normal(0, 300, (10, 17, 3)), rng.normal(0, 300, (10, 17, 3))
        assert p_mpjpe(pred, gt) <= n_mpjpe(pred, gt) <= mpjpe(pred, gt)


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(0.0, 1.0))
def test_inequality_chain_holds_exactly_in_squared_error(seed, noise):
    # each protocol minimizes the summed squared error over a larger family of
    # transforms, so the chain is a theorem per frame for squared errors
    rng = np.random.default_rng(seed)
    gt = random_pose(rng)
    pred = gt + noise * random_pose(rng)
    sq = lambda e: float((e**2).sum())
    p, n, m = sq(p_mpjpe_errors(pred, gt)), sq(n_mpjpe_errors(pred, gt)), sq(joint_errors(pred, gt))
    assert p <= n * (1 + 1e-12) + 1e-9
    assert n <= m * (1 + 1e-12) + 1e-9


def test_mean_distance_chain_can_fail_for_single_frames():
    # the mean of distances is not what the alignments minimize; document that
    # single-frame counterexamples exist
    rng = np.random.default_rng(12)
    broken = 0
    for _ in range(2000):
        pred, gt = random_pose(rng), random_pose(rng)
        if not p_mpjpe(pred, gt) <= n_mpjpe(pred, gt) <= mpjpe(pred, gt):
            broken += 1
    assert 0 < broken < 200


# ---------------------------------------------------------------- traces


def test_trace_all_zero_for_perfect_prediction():
    gt = np.random.default_rng(13).normal(0, 300, (6, 17, 3))
    report = trace_errors(gt, gt)
    assert report.mpjpe_mm == 0.0
    assert report.n_mpjpe_mm == pytest.approx(0.0, abs=1e-9)
    assert report.p_mpjpe_mm == pytest.approx(0.0, abs=1e-9)
    assert not report.per_frame.any() and not report.per_joint.any()


def test_trace_isolates_bad_frame():
    rng = np.random.default_rng(14)
    gt = rng.normal(0, 300, (8, 17, 3))
    pred = gt + rng.normal(0, 1, gt.shape)
    pred[5] += rng.normal(0, 100, (17, 3))
    assert int(np.argmax(trace_errors(pred, gt).per_frame)) == 5


@pytest.mark.parametrize("protocol,key", [("1", "mpjpe_mm"), ("2", "p_mpjpe_mm"), ("n", "n_mpjpe_mm")])
def test_trace_csv_matches_report(protocol, key):
    rng = np.random.default_rng(15)
    gt = rng.normal(0, 300, (7, 17, 3))
    pred = gt + rng.normal(0, 20, gt.shape)
    report = trace_errors(pred, gt, protocol)
    rows = list(csv.DictReader(io.StringIO(report.trace_csv())))
    assert len(rows) == 7 * 17
    assert list(rows[0]) == ["frame", "joint", "err_mm"]
    errs = np.array([float(r["err_mm"]) for r in rows])
    summary = json.loads(report.to_json())
    assert abs(errs.mean() - summary[key]) < 1e-9
    assert sum(v is not None for k, v in summary.items() if k.endswith("_mm")) == 1
    per_frame = errs.reshape(7, 17).mean(axis=1)
    if protocol == "1":
        np.testing.assert_allclose(per_frame, report.per_frame, atol=1e-12)
        assert report.per_frame.mean() == pytest.approx(report.mpjpe_mm, abs=1e-12)


def test_trace_rejects_unknown_protocol():
    with pytest.raises(InputError):
        trace_errors(np.zeros((1, 17, 3)), np.zeros((1, 17, 3)), "3")
