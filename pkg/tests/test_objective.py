import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from tcl_lab import diffcore as dc
from tcl_lab.diffcore import Node
from tcl_lab.objective import (
    LOG_3_2,
    SegmentSchedule,
    alpha_regularizer,
    alpha_regularizer_grad,
    default_epochs,
    default_segments,
    gap_grid,
    lemma31_gap,
    lemma32_check,
    plain_multistage_loss,
    segment_mse,
    segment_sq_error,
    squash_alpha,
    stage1_loss,
    stage_k_loss,
    write_lemma_report,
)

REF = SegmentSchedule.from_lengths(10, [3, 9, 13], [50, 90, 120])


def _pair(rng, B=4, T=25, J=2, D=3):
    return rng.normal(size=(B, T, J, D)), rng.normal(size=(B, T, J, D))


# -- schedule --------------------------------------------------------------

def test_reference_schedule_boundaries():
    assert REF.boundaries == [13, 22, 35]
    assert [REF.segment(k) for k in (1, 2, 3)] == [(11, 13), (14, 22), (23, 35)]
    assert [REF.epochs_for_stage(k) for k in (1, 2, 3)] == [50, 40, 30]
    assert REF.total_epochs == 120


def test_per_stage_epoch_reading():
    sched = SegmentSchedule.from_lengths(10, [3, 9, 13], [50, 90, 120], cumulative=False)
    assert sched.epochs_for_stage(2) == 90 and sched.total_epochs == 260


@pytest.mark.parametrize(
    "t_h,bounds",
    [(10, [13, 13, 35]), (10, [10, 20, 35]), (10, [20, 15, 35])],
)
def test_schedule_rejects_bad_boundaries(t_h, bounds):
    with pytest.raises(ValueError):
        SegmentSchedule(t_h, bounds, [1, 2, 3])


@pytest.mark.parametrize("K", [1, 2, 3, 4, 5, 8])
def test_default_segments_cover_horizon(K):
    lengths = default_segments(25, K)
    assert len(lengths) == K and sum(lengths) == 25 and min(lengths) >= 1
    epochs = default_epochs(K)
    assert len(epochs) == K and epochs[-1] == 120
    assert all(b >= a for a, b in zip(epochs, epochs[1:]))


def test_default_segments_reference():
    assert default_segments(25, 3) == [3, 9, 13]
    assert default_epochs(3) == [50, 90, 120]


# -- squashing -------------------------------------------------------------

def test_squash_examples():
    assert squash_alpha(0.0) == pytest.approx(0.49995, abs=1e-15)
    assert squash_alpha(-800.0) == 0.0
    assert squash_alpha(800.0) == pytest.approx(1 - 1e-4, abs=1e-15)
    assert squash_alpha(800.0) < 1.0
    node = squash_alpha(Node([0.0, 2.0]))
    assert node.value[0] == pytest.approx(0.49995, abs=1e-15)


# -- segment losses --------------------------------------------------------

def test_segment_mse_examples():
    gt = np.zeros((1, 25, 2, 3))
    assert segment_mse(gt, gt, 11, 35, 10).value == 0.0
    pred = gt.copy()
    pred[0, 0, 1] = [1.0, 0.0, 0.0]
    assert segment_mse(pred, gt, 11, 11, 10).value == 1.0
    pred = gt.copy()
    pred[0, 3, 0] = [2.0, 0.0, 0.0]  # squared norm 4
    pred[0, 4, 1] = [0.0, 3.0, 0.0]  # squared norm 9
    assert segment_mse(pred, gt, 14, 15, 10).value == 13.0


def test_segment_mse_averages_over_batch():
    gt = np.zeros((2, 4, 1, 1))
    pred = gt.copy()
    pred[0, 0] = 2.0
    assert segment_mse(pred, gt, 2, 5, 1).value == 2.0


@pytest.mark.parametrize("lo,hi", [(14, 13), (10, 12), (30, 36)])
def test_segment_mse_range_errors(lo, hi):
    gt = np.zeros((1, 25, 1, 1))
    with pytest.raises(ValueError):
        segment_mse(gt, gt, lo, hi, 10)


def test_stage1_only_sees_first_segment():
    gt = np.zeros((1, 25, 2, 3))
    pred = gt.copy()
    pred[0, 3:] = 100.0  # frames 14..35 are ignored
    assert stage1_loss(pred, gt, REF).value == 0.0
    pred[0, 2, 0, 0] = 1.0  # frame 13
    assert stage1_loss(pred, gt, REF).value == 1.0
    rng = np.random.default_rng(0)
    p, g = _pair(rng)
    assert stage1_loss(p, g, REF).value == segment_mse(p, g, 11, 13, 10).value


# -- stage-k loss ----------------------------------------------------------

def test_stage_k_alpha_zero_is_sum_of_segments():
    rng = np.random.default_rng(1)
    p, g = _pair(rng)
    m1, m2 = segment_mse(p, g, 11, 13, 10).value, segment_mse(p, g, 14, 22, 10).value
    assert stage_k_loss(p, g, REF, 2, 0.0, []).value == pytest.approx(m1 + m2, abs=1e-12)


def test_stage_k_half_alpha_matches_high_precision():
    rng = np.random.default_rng(2)
    p, g = _pair(rng)
    m1 = float(segment_mse(p, g, 11, 13, 10).value)
    m2 = float(segment_mse(p, g, 14, 22, 10).value)
    mpmath.mp.dps = 40
    half = mpmath.mpf(1) / 2
    const = half * mpmath.log(half) + mpmath.log(1 + half)
    assert float(const) == pytest.approx(0.0588915, abs=1e-7)
    expected = float(half * m2 + const + m1)
    assert stage_k_loss(p, g, REF, 2, 0.5, []).value == pytest.approx(expected, abs=1e-12)


def test_stage_k_with_frozen_terms():
    rng = np.random.default_rng(3)
    p, g = _pair(rng)
    m = [float(segment_mse(p, g, *REF.segment(j), 10).value) for j in (1, 2, 3)]
    a, a2 = 0.3, 0.2
    expected = (1 - a) * m[2] + (1 - a) * math.log(1 - a) + math.log(1 + a) + (1 - a2) * m[1] + m[0]
    assert stage_k_loss(p, g, REF, 3, a, [a2]).value == pytest.approx(expected, abs=1e-12)


def test_stage_k_per_sample_alpha_averaging():
    rng = np.random.default_rng(4)
    p, g = _pair(rng, B=3)
    alphas = np.array([0.1, 0.4, 0.7])
    per = segment_sq_error(p, g, 14, 22, 10).value
    m1 = segment_mse(p, g, 11, 13, 10).value
    reg = [(1 - a) * math.log(1 - a) + math.log(1 + a) for a in alphas]
    expected = np.mean((1 - alphas) * per + reg) + m1
    assert stage_k_loss(p, g, REF, 2, Node(alphas), []).value == pytest.approx(expected, abs=1e-12)


def test_stage_k_gradient_at_zero_alpha():
    rng = np.random.default_rng(5)
    p, g = _pair(rng, B=1)
    m2 = float(segment_mse(p, g, 14, 22, 10).value)
    alpha = Node(0.0)
    dc.backward(stage_k_loss(p, g, REF, 2, alpha, []))
    assert alpha.grad == pytest.approx(-m2, rel=1e-12)
    h = 1e-6
    fd = (stage_k_loss(p, g, REF, 2, h, []).value - stage_k_loss(p, g, REF, 2, 0.0, []).value) / h
    assert alpha.grad == pytest.approx(fd, rel=1e-4)


def test_stage_k_errors():
    g = np.zeros((1, 25, 1, 1))
    with pytest.raises(ValueError, match="frozen"):
        stage_k_loss(g, g, REF, 3, 0.1, [])
    with pytest.raises(ValueError):
        stage_k_loss(g, g, REF, 1, 0.1, [])
    with pytest.raises(ValueError):
        stage_k_loss(g, g, REF, 2, 1.0, [])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 3))
def test_reduction_identity(seed, k):
    rng = np.random.default_rng(seed)
    p, g = _pair(rng, B=int(rng.integers(1, 5)))
    lhs = stage_k_loss(p, g, REF, k, 0.0, [0.0] * (k - 2)).value
    assert lhs == pytest.approx(plain_multistage_loss(p, g, REF, k).value, abs=1e-12)


def test_weight_on_current_segment_decreases_with_alpha():
    rng = np.random.default_rng(6)
    p, g = _pair(rng)
    weights = []
    for a in np.linspace(0.0, 0.9, 10):
        node = Node(p)
        dc.backward(stage_k_loss(node, g, REF, 2, float(a), []))
        # gradient on a frame of segment 2 scales with (1 - a)
        weights.append(node.grad[0, 5, 0, 0] / (2 * (p[0, 5, 0, 0] - g[0, 5, 0, 0]) / len(p)))
    assert np.allclose(weights, 1 - np.linspace(0.0, 0.9, 10), atol=1e-12)
    assert np.all(np.diff(weights) < 0)


# -- regularizer -----------------------------------------------------------

def test_regularizer_gradient_zero_at_origin_and_increasing():
    assert alpha_regularizer_grad(0.0) == 0.0
    grid = np.linspace(0.0, 0.999, 2000)
    vals = np.array([alpha_regularizer_grad(a) for a in grid])
    assert np.all(np.diff(vals) > 0)


def test_regularizer_gradient_matches_autodiff():
    for a in (0.05, 0.3, 0.8):
        node = Node(a)
        dc.backward(alpha_regularizer(node))
        assert node.grad == pytest.approx(alpha_regularizer_grad(a), rel=1e-12)


@pytest.mark.parametrize("m", [0.05, 0.2, 0.7, 1.5])
def test_stationary_alpha(m):
    # per-sample optimum of (1-a) m + reg(a) satisfies m = reg'(a)
    res = minimize_scalar(
        lambda a: (1 - a) * m + alpha_regularizer(a), bounds=(0.0, 1 - 1e-9), method="bounded",
        options={"xatol": 1e-12},
    )
    assert alpha_regularizer_grad(res.x) == pytest.approx(m, abs=1e-6)


# -- gap checks ------------------------------------------------------------

def test_gap_examples():
    for b in (0.01, 0.3, 1.0):
        assert lemma31_gap(0.0, b) == pytest.approx(0.0, abs=1e-15)
    assert lemma31_gap(0.5, 0.5) == pytest.approx(0.4054651, abs=1e-7)
    assert lemma31_gap(0.5, 0.5) == pytest.approx(LOG_3_2, abs=1e-15)


def test_gap_domain_errors():
    for a, b in [(0.6, 0.5), (-0.1, 0.5), (0.0, 0.0), (0.0, 1.2)]:
        with pytest.raises(ValueError):
            lemma31_gap(a, b)


def test_gap_matches_high_precision_oracle():
    mpmath.mp.dps = 30
    rng = np.random.default_rng(7)
    for _ in range(50):
        b = float(rng.uniform(0.01, 1.0))
        a = float(rng.uniform(0.0, 1.0 - b))
        A, Bm = mpmath.mpf(a), mpmath.mpf(b)
        ref = (1 - A) * (-mpmath.log(Bm)) + (1 - A) * mpmath.log(1 - A) + mpmath.log(1 + A) + mpmath.log(A + Bm)
        assert lemma31_gap(a, b) == pytest.approx(float(ref), abs=1e-13)


def test_gap_grid_nonnegative_200():
    _, _, g = gap_grid(200)
    assert g.shape == (200, 200)
    assert g.min() >= -1e-12


def test_b_equals_one_row_starts_at_zero():
    _, b, g = gap_grid(50)
    assert b[-1, 0] == 1.0 and g[-1, 0] == 0.0


def test_bound_report(tmp_path):
    rep = lemma32_check(200, K=4)
    assert rep.passed
    assert rep.stage_bounds[3] == 2 * LOG_3_2
    assert rep.stage_bounds[3] == pytest.approx(0.8109302, abs=1e-7)
    assert rep.argmax_restricted == pytest.approx((0.5, 0.5), abs=0.5 / 199)
    write_lemma_report(rep, tmp_path)
    assert (tmp_path / "lemma_summary.json").exists()
    assert (tmp_path / "lemma_grid.csv").read_text().startswith("a,b,gap\n")
