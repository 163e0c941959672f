import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.special import logsumexp
from scipy.stats import norm

from ganinfluence import metrics as mt
from ganinfluence import models, training
from ganinfluence.errors import DegenerateCovariance, NonFiniteValue
from ganinfluence.models import Dataset, GameSpec

floats = st.floats(-5, 5, allow_nan=False, width=64)


def kde_reference(gen, val, h):
    # independent implementation via scipy: log mean_i N(v; g_i, h^2)
    gen = np.asarray(gen, float).reshape(len(gen), -1)
    val = np.asarray(val, float).reshape(len(val), -1)
    logs = np.sum(norm.logpdf(val[:, None, :], loc=gen[None, :, :], scale=h), axis=2)
    return float(np.mean(logsumexp(logs, axis=1) - np.log(len(gen))))


def test_single_point_value():
    assert mt.all_metric([[0.0]], [[0.0]]).value == pytest.approx(-0.9189385332, abs=1e-9)


@given(hnp.arrays(np.float64, st.integers(1, 40), elements=floats),
       hnp.arrays(np.float64, st.integers(1, 40), elements=floats),
       st.floats(0.2, 5.0))
def test_kde_matches_reference(gen, val, h):
    assert mt.all_metric(gen[:, None], val[:, None], h).value == pytest.approx(
        kde_reference(gen, val, h), rel=1e-12, abs=1e-12)


def test_kde_two_dimensional_matches_reference(rng):
    gen, val = rng.normal(size=(30, 2)), rng.normal(size=(20, 2))
    assert mt.all_metric(gen, val, 0.7).value == pytest.approx(kde_reference(gen, val, 0.7), rel=1e-12)


@given(hnp.arrays(np.float64, st.integers(2, 50), elements=floats), st.randoms())
def test_permutation_invariance_is_bitwise(gen, rnd):
    val = np.linspace(-2, 2, 7)[:, None]
    perm = list(range(len(gen)))
    rnd.shuffle(perm)
    assert mt.all_metric(gen[:, None], val).value == mt.all_metric(gen[perm][:, None], val).value


def test_far_away_samples_are_finite():
    v = mt.all_metric([[1e3]], [[-1e3]]).value
    assert np.isfinite(v) and v == pytest.approx(-0.5 * 2e3**2 - 0.9189385332, rel=1e-12)


def test_adding_a_sample_at_a_validation_point_cannot_lower_all(rng):
    gen = rng.normal(size=(50, 1))
    val = rng.normal(size=(1, 1))
    # a kernel of height 1/sqrt(2 pi) at the point beats any average below it
    before = mt.all_metric(gen, val).value
    assert mt.all_metric(np.vstack([gen, val]), val).value >= before


def test_bad_inputs():
    with pytest.raises(ValueError):
        mt.all_metric(np.zeros((0, 1)), [[0.0]])
    with pytest.raises(ValueError):
        mt.all_metric([[0.0]], [[0.0]], bandwidth=0.0)


def test_grad_metric_matches_finite_differences(small_val):
    spec = GameSpec()
    cfg = mt.MetricConfig(n_gen=200)
    phi = np.array([0.9, 0.8])
    g = mt.grad_metric(spec, phi, cfg, small_val)
    assert np.all(g.vector[2:] == 0.0) and g.vector.shape == (4,)
    h = 1e-6
    fd = [(mt.evaluate(spec, phi + h * e, cfg, small_val).value
           - mt.evaluate(spec, phi - h * e, cfg, small_val).value) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(g.vector[:2], fd, atol=1e-5)
    assert g.value == pytest.approx(mt.evaluate(spec, phi, cfg, small_val).value, rel=1e-14)


def test_mlp_grad_metric_matches_finite_differences(small_val):
    spec = GameSpec.mlp(hidden=(4, 4))
    cfg = mt.MetricConfig(n_gen=64)
    phi = models.init_params(spec, np.random.default_rng(0))[: models.param_dims(spec)[0]]
    g = mt.grad_metric(spec, phi, cfg, small_val[:50])
    h = 1e-6
    for k in (0, 5, len(phi) - 1):
        e = np.zeros_like(phi)
        e[k] = h
        fd = (mt.evaluate(spec, phi + e, cfg, small_val[:50]).value
              - mt.evaluate(spec, phi - e, cfg, small_val[:50]).value) / (2 * h)
        assert g.vector[k] == pytest.approx(fd, abs=1e-5)


def test_huge_bandwidth_flattens_the_gradient(small_val):
    g = mt.grad_metric(GameSpec(), np.array([0.9, 0.8]), mt.MetricConfig(bandwidth=1e6, n_gen=100), small_val)
    assert np.abs(g.vector).max() < 1e-9


def test_frechet_basics(rng):
    a = rng.normal(size=(100, 2))
    assert mt.gauss_frechet(a, a).value == pytest.approx(0.0, abs=1e-10)
    b = rng.normal(1.0, 2.0, size=(80, 2))
    assert mt.gauss_frechet(a, b).value == pytest.approx(mt.gauss_frechet(b, a).value, rel=1e-9)
    x, y = rng.normal(size=200), rng.normal(0.5, 3.0, size=300)
    closed = (x.mean() - y.mean()) ** 2 + (x.std() - y.std()) ** 2
    assert mt.gauss_frechet(x[:, None], y[:, None]).value == pytest.approx(closed, rel=1e-10)
    assert mt.gauss_frechet(a, b).direction == mt.LOWER


def test_frechet_regularization_flag():
    # rank-deficient covariances in 3-d: sqrtm of a singular product
    a = np.zeros((10, 3))
    a[:, 0] = np.arange(10.0)
    flag = []
    try:
        v = mt.gauss_frechet(a, a, flag)
    except DegenerateCovariance:
        return
    assert np.isfinite(v.value)
    assert flag in ([], ["regularized"])


def test_frechet_tape_matches_fd(small_val):
    spec = GameSpec()
    cfg = mt.MetricConfig(name="frechet", n_gen=300)
    phi = np.array([0.7, 0.3])
    g = mt.grad_metric(spec, phi, cfg, small_val)
    h = 1e-6
    fd = [(mt.evaluate(spec, phi + h * e, cfg, small_val).value
           - mt.evaluate(spec, phi - h * e, cfg, small_val).value) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(g.vector[:2], fd, atol=1e-6)
    assert cfg.direction == mt.LOWER


def test_harm_convention():
    assert list(mt.is_harmful([1.0, -1.0], mt.HIGHER)) == [True, False]
    assert list(mt.is_harmful([1.0, -1.0], mt.LOWER)) == [False, True]
    np.testing.assert_array_equal(mt.harm_score([1.0, -2.0], mt.LOWER), [-1.0, 2.0])


def test_non_finite_value_rejected():
    with pytest.raises(NonFiniteValue):
        mt.MetricValue(float("nan"), mt.HIGHER)


def test_true_influence_zero_cases(small_data, small_val):
    spec = GameSpec()
    cfg = mt.MetricConfig(n_gen=100)
    t0 = training.run_agd(spec, small_data, 0, 0.01, seed=0)
    s, bad = mt.true_influence(t0, small_data, cfg, small_val, [0, 1])
    assert np.all(s == 0.0) and not bad.any()
    # an instance at the origin has zero discriminator gradient, so removing it changes nothing
    X = small_data.X.copy()
    X[0] = 0.0
    d = Dataset(X, small_data.Z)
    traj = training.run_agd(spec, d, 50, 0.01, seed=0)
    s, _ = mt.true_influence(traj, d, cfg, small_val, [0])
    assert s[0] == 0.0


def test_evaluate_many_consistent(small_val):
    spec, cfg = GameSpec(), mt.MetricConfig(n_gen=50)
    phis = [np.array([1.0, 0.0]), np.array([0.5, 1.0])]
    out = mt.evaluate_many(spec, phis, cfg, small_val)
    assert out[1] == mt.evaluate(spec, phis[1], cfg, small_val).value
