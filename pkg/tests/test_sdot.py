import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from sdotflow.errors import FormatError, NumericalError, ValidationError
from sdotflow.sdot import (Dataset, DualWeights, MetricsSnapshot, NoisePrior, SdotConfig, Stage,
                           adjacent_boundaries_1d, estimate_metrics, exact_cell_mass_1d,
                           gradient_estimate, hard_assign, hard_assign_batch, read_duals,
                           read_metrics_csv, soft_assign, soft_assign_batch, solve_dual,
                           warmup_steps, write_duals, write_metrics_csv)


def quantile_optimal_duals(y: np.ndarray) -> np.ndarray:
    """Duals whose 1D Laguerre boundaries sit at the normal quantiles i/N.

    Equal shifted cost of neighbours at the boundary x gives
    g[i+1] - g[i] = y[i+1]^2 - y[i]^2 - 2 (y[i+1] - y[i]) x.
    """
    n = y.size
    x = norm.ppf(np.arange(1, n) / n)
    steps = y[1:] ** 2 - y[:-1] ** 2 - 2.0 * (y[1:] - y[:-1]) * x
    return np.concatenate([[0.0], np.cumsum(steps)])


def brute_hard(x, points, g):
    costs = [float(np.sum((x - p) ** 2)) - gi for p, gi in zip(points, g)]
    best = min(costs)
    return costs.index(best)


finite = st.floats(min_value=-5, max_value=5, allow_nan=False)


# --- Dataset ----------------------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 1)), [0.5, 0.4])
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 1)), [1.0, 0.0])
    with pytest.raises(ValidationError):
        Dataset(np.zeros((0, 2)), [])
    with pytest.raises(ValidationError):
        Dataset(np.array([[np.nan]]), [1.0])


def test_dataset_restrict_renormalises():
    ds = Dataset([[0.0], [1.0], [2.0]], [0.2, 0.3, 0.5], class_ids=[0, 1, 1])
    sub = ds.restrict(1)
    assert sub.size == 2
    assert math.fsum(sub.weights) == 1.0
    assert np.allclose(sub.weights, [0.375, 0.625])
    assert ds.classes() == [0, 1]


# --- hard assignment --------------------------------------------------------------


def test_hard_assign_examples():
    assert hard_assign([1.0], Dataset.uniform([[0.0], [10.0]]), np.zeros(2)) == 0
    assert hard_assign([0.0], Dataset.uniform([[-1.0], [1.0]]), np.array([0.0, 3.0])) == 1


def test_hard_assign_ties_smallest_index():
    ds = Dataset.uniform([[-1.0], [1.0], [1.0]])
    assert hard_assign([0.0], ds, np.zeros(3)) == 0
    assert hard_assign([2.0], ds, np.zeros(3)) == 1


def test_hard_assign_dimension_mismatch():
    with pytest.raises(ValidationError):
        hard_assign([0.0, 0.0], Dataset.uniform([[0.0], [1.0]]), np.zeros(2))


def test_hard_assign_accepts_dual_weights_object():
    ds = Dataset.uniform([[-1.0], [1.0]])
    duals = DualWeights(g=np.zeros(2), g_ema=np.array([0.0, 3.0]))
    assert hard_assign([0.0], ds, duals) == 1


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_hard_assign_batch_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(7, 2))
    g = r.normal(size=7)
    x = r.normal(size=(30, 2))
    got = hard_assign_batch(x, Dataset.uniform(pts), g)
    assert got.tolist() == [brute_hard(xi, pts, g) for xi in x]


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3))
def test_hard_assign_shift_invariant(seed, c):
    r = np.random.default_rng(seed)
    ds = Dataset.uniform(r.normal(size=(6, 3)))
    g = r.normal(size=6)
    x = r.normal(size=(50, 3))
    assert np.array_equal(hard_assign_batch(x, ds, g), hard_assign_batch(x, ds, g + c))


# --- soft assignment --------------------------------------------------------------


def test_soft_assign_symmetric_pair():
    p = soft_assign([0.0], Dataset.uniform([[-1.0], [1.0]]), np.zeros(2), eps=0.3)
    assert np.allclose(p, [0.5, 0.5], atol=1e-15)


def test_soft_assign_direct_softmax():
    # shifted costs c - g = (0, 1) at x = 0 with points {0, 1}, g = 0
    p = soft_assign([0.0], Dataset.uniform([[0.0], [1.0]]), np.zeros(2), eps=1.0)
    expect = np.exp([0.0, -1.0]) / np.exp([0.0, -1.0]).sum()
    assert np.allclose(p, expect, atol=1e-12)
    assert np.allclose(p, [0.7311, 0.2689], atol=1e-4)


def test_soft_assign_small_eps_matches_hard(rng):
    for _ in range(100):
        pts = rng.normal(size=(5, 2))
        g = rng.normal(size=5)
        x = rng.normal(size=2)
        ds = Dataset.uniform(pts)
        p = soft_assign(x, ds, g, eps=1e-6)
        assert p.max() >= 1 - 1e-9
        assert int(np.argmax(p)) == hard_assign(x, ds, g)


def test_soft_assign_rejects_nonpositive_eps():
    ds = Dataset.uniform([[0.0], [1.0]])
    with pytest.raises(ValidationError):
        soft_assign([0.0], ds, np.zeros(2), eps=0.0)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3), st.sampled_from([1e-3, 0.1, 1.0, 10.0]))
def test_soft_assign_rows_and_shift(seed, c, eps):
    r = np.random.default_rng(seed)
    ds = Dataset.uniform(r.normal(size=(6, 2)))
    g = r.normal(size=6)
    x = r.normal(size=(40, 2))
    p = soft_assign_batch(x, ds, g, eps)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(p, soft_assign_batch(x, ds, g + c, eps), atol=1e-12)


def test_eps_limit_monotone(rng):
    pts = rng.normal(size=(6, 2))
    ds = Dataset.uniform(pts)
    g = rng.normal(size=6) * 0.3
    for _ in range(30):
        x = rng.normal(size=2)
        onehot = np.eye(6)[hard_assign(x, ds, g)]
        tv = [0.5 * np.abs(soft_assign(x, ds, g, e) - onehot).sum() for e in (1.0, 0.1, 0.01, 1e-4)]
        assert all(a >= b for a, b in zip(tv, tv[1:]))


# --- gradient ----------------------------------------------------------------------


def test_gradient_all_mass_in_one_cell():
    ds = Dataset.uniform([[-1.0], [1.0]])
    x = np.full((16, 1), -3.0)
    assert np.array_equal(gradient_estimate(x, ds, np.zeros(2)), [0.5, -0.5])


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.01, 1.0]), st.integers(1, 64))
def test_gradient_sums_to_zero(seed, eps, batch):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 20))
    w = r.random(n) + 0.1
    w /= w.sum()
    w[-1] = 1.0 - math.fsum(w[:-1])
    ds = Dataset(r.normal(size=(n, 2)), w)
    grad = gradient_estimate(r.normal(size=(batch, 2)), ds, r.normal(size=n), eps)
    assert abs(grad.sum()) <= 1e-9


def test_gradient_concentration_at_exact_optimum(quantile_dataset):
    y = quantile_dataset.points[:, 0]
    g = quantile_optimal_duals(y)
    assert np.allclose(exact_cell_mass_1d(quantile_dataset, g), 1 / 8, atol=1e-12)
    b = 1e6
    x = np.random.default_rng(3).standard_normal((int(b), 1))
    grad = gradient_estimate(x, quantile_dataset, g)
    bound = 4 * np.sqrt(quantile_dataset.weights * (1 - quantile_dataset.weights) / b)
    assert np.all(np.abs(grad) <= bound)


# --- metrics ---------------------------------------------------------------------


def test_estimate_metrics_examples():
    ds = Dataset.uniform([[0.0], [1.0]])
    snap = estimate_metrics(np.zeros(2), ds)
    assert snap.mre_est == 0 and snap.l1_est == 0
    snap = estimate_metrics(np.array([0.1, -0.1]), ds)
    assert math.isclose(snap.mre_est, 0.2) and math.isclose(snap.l1_est, 0.2)


def test_estimate_metrics_divides_by_weight():
    ds = Dataset([[0.0], [1.0]], [0.25, 0.75])
    snap = estimate_metrics(np.array([0.05, -0.05]), ds)
    assert math.isclose(snap.mre_est, 0.2)
    assert snap.l1_est >= snap.mre_est * ds.weights.min()


def test_warmup_steps():
    assert warmup_steps(0.5) == 10
    assert warmup_steps(0.99) == 100
    assert warmup_steps(0.999) == 1000


def test_exact_mre_zero_iff_balanced(quantile_dataset):
    g = quantile_optimal_duals(quantile_dataset.points[:, 0])
    exact = exact_cell_mass_1d(quantile_dataset, g) - quantile_dataset.weights
    assert estimate_metrics(exact, quantile_dataset).mre_est < 1e-12
    g2 = g.copy()
    g2[3] += 0.1
    exact2 = exact_cell_mass_1d(quantile_dataset, g2) - quantile_dataset.weights
    assert estimate_metrics(exact2, quantile_dataset).mre_est > 1e-3


# --- 1D oracle -------------------------------------------------------------------


def test_exact_mass_symmetric():
    ds = Dataset.uniform([[-1.0], [1.0]])
    assert np.allclose(adjacent_boundaries_1d(ds, np.zeros(2)), [0.0])
    assert np.allclose(exact_cell_mass_1d(ds, np.zeros(2)), [0.5, 0.5])


def test_exact_mass_shifted_boundary():
    ds = Dataset.uniform([[-1.0], [1.0]])
    g = np.array([0.0, 2.0])
    assert np.allclose(adjacent_boundaries_1d(ds, g), [-0.5])
    m = exact_cell_mass_1d(ds, g)
    assert np.allclose(m, [norm.cdf(-0.5), 1 - norm.cdf(-0.5)], atol=1e-12)
    assert np.allclose(m, [0.3085, 0.6915], atol=1e-4)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 20.0))
def test_exact_mass_sums_to_one(seed, scale):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 12))
    y = np.sort(r.normal(size=n) * 2)
    if n > 1 and np.any(np.diff(y) <= 0):
        return
    m = exact_cell_mass_1d(Dataset.uniform(y.reshape(-1, 1)), r.normal(size=n) * scale)
    assert np.all(m >= 0)
    assert abs(math.fsum(m) - 1.0) <= 1e-12


def test_exact_mass_matches_monte_carlo(rng):
    y = np.sort(rng.normal(size=6) * 1.5)
    ds = Dataset.uniform(y.reshape(-1, 1))
    g = rng.normal(size=6) * 2.0
    x = rng.standard_normal((400_000, 1))
    counts = np.bincount(hard_assign_batch(x, ds, g), minlength=6) / x.shape[0]
    assert np.allclose(counts, exact_cell_mass_1d(ds, g), atol=5e-3)


def test_exact_mass_empty_cells():
    # a very negative dual on the middle point removes its cell
    ds = Dataset.uniform([[-1.0], [0.0], [1.0]])
    m = exact_cell_mass_1d(ds, np.array([0.0, -50.0, 0.0]))
    assert m[1] == 0.0
    assert np.allclose(m, [0.5, 0.0, 0.5])


def test_exact_mass_rejects_unsorted():
    with pytest.raises(ValidationError):
        exact_cell_mass_1d(Dataset.uniform([[1.0], [0.0]]), np.zeros(2))
    with pytest.raises(ValidationError):
        exact_cell_mass_1d(Dataset.uniform([[0.0], [0.0]]), np.zeros(2))


# --- solver ----------------------------------------------------------------------


def test_single_point_converges_immediately():
    ds = Dataset.uniform([[0.3, -0.2]])
    res = solve_dual(ds, NoisePrior(2), SdotConfig((Stage(20, 0.1, 64),)))
    assert res.history[-1].mre_est == 0.0


def test_solver_is_deterministic():
    ds = Dataset.uniform(np.random.default_rng(0).normal(size=(20, 2)))
    cfg = SdotConfig((Stage(50, 0.1, 256, 0.9, 0.05), Stage(30, 0.01, 128)), master_seed=77)
    a = solve_dual(ds, NoisePrior(2), cfg)
    b = solve_dual(ds, NoisePrior(2), cfg)
    assert a.duals.g_ema.tobytes() == b.duals.g_ema.tobytes()
    assert a.history == b.history


def test_g_ema_is_replayed_convex_combination():
    ds = Dataset.uniform(np.random.default_rng(1).normal(size=(5, 1)))
    beta, k_max = 0.8, 12

    def run(k):
        return solve_dual(ds, NoisePrior(1), SdotConfig((Stage(k, 0.05, 64, beta),), master_seed=5))

    # prefixes of the same deterministic run give g after every step
    gs = [run(k).duals.g for k in range(1, k_max + 1)]
    final = run(k_max).duals.g_ema
    weights = [(1 - beta) * beta ** (k_max - k) for k in range(1, k_max + 1)]
    replay = sum(w * g for w, g in zip(weights, gs))  # remaining weight beta^K sits on g = 0
    assert np.allclose(final, replay, atol=1e-12)
    assert math.isclose(sum(weights) + beta ** k_max, 1.0)


def test_warmup_flags_in_history():
    ds = Dataset.uniform([[0.0], [1.0]])
    res = solve_dual(ds, NoisePrior(1), SdotConfig((Stage(30, 0.1, 16, 0.5),)))
    flags = [s.warmup for s in res.history]
    assert flags == [True] * 10 + [False] * 20
    assert [s.step for s in res.history] == list(range(1, 31))


def test_large_entropic_stage_runs():
    ds = Dataset.uniform(np.random.default_rng(2).normal(size=(30, 2)))
    res = solve_dual(ds, NoisePrior(2), SdotConfig((Stage(5, 10.0, 1024, 0.99, 1.0),)))
    assert np.all(np.isfinite(res.duals.g_ema))


def test_solver_aborts_with_step_on_overflow():
    ds = Dataset.uniform([[0.0], [1.0]])
    with pytest.raises(NumericalError) as info, np.errstate(all="ignore"):
        solve_dual(ds, NoisePrior(1), SdotConfig((Stage(10, 1e300, 16, 0.9, 1e-300),)))
    assert info.value.step == 2
    assert "step 2" in str(info.value)


def test_solver_rejects_dimension_mismatch():
    with pytest.raises(ValidationError):
        solve_dual(Dataset.uniform([[0.0], [1.0]]), NoisePrior(2), SdotConfig((Stage(1, 0.1, 4),)))


def test_stage_validation():
    with pytest.raises(ValidationError):
        Stage(0, 0.1, 4)
    with pytest.raises(ValidationError):
        Stage(1, 0.0, 4)
    with pytest.raises(ValidationError):
        Stage(1, 0.1, 0)
    with pytest.raises(ValidationError):
        Stage(1, 0.1, 4, 1.0)
    with pytest.raises(ValidationError):
        Stage(1, 0.1, 4, 0.9, -1.0)
    with pytest.raises(ValidationError):
        SdotConfig(())


# --- files -----------------------------------------------------------------------


def test_duals_roundtrip(tmp_path):
    d = DualWeights(g=np.array([1.5, -2.0, 3.25]), g_ema=np.array([0.1, 0.2, -0.3]))
    path = tmp_path / "d.bin"
    write_duals(d, path)
    raw = path.read_bytes()
    assert raw[:4] == b"ALNW" and len(raw) == 10 + 16 * 3
    back = read_duals(path)
    assert back.g.tobytes() == d.g.tobytes() and back.g_ema.tobytes() == d.g_ema.tobytes()


def test_duals_format_errors(tmp_path):
    path = tmp_path / "d.bin"
    write_duals(DualWeights.zeros(2), path)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as info:
        read_duals(tmp_path / "bad")
    assert info.value.offset == 0
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_duals(tmp_path / "short")


def test_metrics_csv_roundtrip(tmp_path):
    hist = [MetricsSnapshot(1, 0.5, 0.25, True), MetricsSnapshot(2, 0.1 / 3, 1e-17, False)]
    write_metrics_csv(hist, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "step,mre_est,l1_est,warmup"
    assert read_metrics_csv(tmp_path / "m.csv") == hist
