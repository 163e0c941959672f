import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import expit, log_expit

from ganinfluence import autodiff as ad
from ganinfluence import models, training
from ganinfluence.errors import SpecMismatch
from ganinfluence.models import Dataset, GameSpec

LOSSES = ["original", "nonsaturating", "wasserstein"]


def test_wasserstein_zero_discriminator_gives_zero_value(rng):
    spec = GameSpec(loss="wasserstein")
    theta = np.array([1.3, -0.2, 0.0, 0.0])
    assert models.value_V(spec, theta, rng.normal(size=(50, 1)), rng.normal(size=(40, 1))) == 0.0


def test_zero_parameters_give_minus_two_log_two(rng):
    # log sigmoid(0) = -log 2 for both terms under the concave loss convention
    v = models.value_V(GameSpec(), np.zeros(4), rng.normal(size=(7, 1)), rng.normal(size=(9, 1)))
    assert v == pytest.approx(-2 * np.log(2), abs=1e-15)


def _mlp_value_reference(spec, theta, X, Z):
    """Independent straight-line forward pass of the MLP game value."""
    def forward(params, sizes, h):
        off = 0
        for k in range(len(sizes) - 1):
            a, b = sizes[k], sizes[k + 1]
            W = params[off: off + a * b].reshape(a, b)
            off += a * b
            h = h @ W + params[off: off + b]
            off += b
            if k < len(sizes) - 2:
                h = np.tanh(h)
        return h

    gsz = [spec.latent_dim, *spec.hidden, spec.data_dim]
    dsz = [spec.data_dim, *spec.hidden, 1]
    n_phi = sum(a * b + b for a, b in zip(gsz[:-1], gsz[1:]))
    phi, psi = theta[:n_phi], theta[n_phi:]
    d_real = forward(psi, dsz, X)[:, 0]
    d_fake = forward(psi, dsz, forward(phi, gsz, Z))[:, 0]
    lam1, lam2 = spec.reg_rates
    return (log_expit(d_real).mean() + log_expit(-d_fake).mean()
            + 0.5 * lam1 * phi @ phi - 0.5 * lam2 * psi @ psi)


def test_mlp_value_matches_reference(rng):
    spec = GameSpec.mlp(hidden=(5, 4))
    theta = models.init_params(spec, rng) + rng.normal(0, 0.3, sum(models.param_dims(spec)))
    X, Z = rng.normal(size=(30, 1)), rng.normal(size=(25, 1))
    assert abs(models.value_V(spec, theta, X, Z) - _mlp_value_reference(spec, theta, X, Z)) < 1e-12


def test_long_agd_reaches_equilibrium(small_data):
    spec = GameSpec()
    traj = training.run_agd(spec, small_data, 30000, 0.01, seed=0)
    assert np.linalg.norm(models.game_gradient(spec, traj.final, small_data.X, small_data.Z)) < 1e-6


@pytest.mark.parametrize("loss", LOSSES)
def test_gradient_sign_convention(loss, rng, small_data):
    spec = GameSpec(loss=loss, reg_rates=(0.1, 0.2))
    theta = models.init_params(spec, rng)
    v = models.game_gradient(spec, theta, small_data.X, small_data.Z)
    if spec.zero_sum:
        gV = ad.grad(lambda t: models.objectives(spec, t, small_data.X, small_data.Z)[1], theta)
        assert np.array_equal(v[:2], gV[:2])
        assert np.array_equal(v[2:], -gV[2:])
    else:
        g_gen = ad.grad(lambda t: models.objectives(spec, t, small_data.X, small_data.Z)[0], theta)
        g_disc = ad.grad(lambda t: models.objectives(spec, t, small_data.X, small_data.Z)[1], theta)
        assert np.array_equal(v, np.concatenate([g_gen[:2], -g_disc[2:]]))


@pytest.mark.parametrize("loss", LOSSES)
def test_game_gradient_matches_fd(loss, rng, small_data):
    spec = GameSpec(loss=loss)
    theta = models.init_params(spec, rng)
    v = models.game_gradient(spec, theta, small_data.X, small_data.Z)
    fns = [lambda t: models.objectives(spec, t, small_data.X, small_data.Z)[0],
           lambda t: models.objectives(spec, t, small_data.X, small_data.Z)[1]]
    fd = np.concatenate([ad.fd_grad(fns[0], theta)[:2], -ad.fd_grad(fns[1], theta)[2:]])
    assert np.linalg.norm(v - fd) / np.linalg.norm(fd) < 1e-5


def test_removal_gradient_wasserstein_by_hand():
    spec = GameSpec(loss="wasserstein")
    theta = np.array([0.3, 0.1, -0.5, 0.2])
    out = models.removal_gradient(spec, theta, np.array([2.0]), eta=0.01, batch_size=10)
    np.testing.assert_allclose(out, [0.0, 0.0, -0.001 * 4.0, -0.001 * 2.0], rtol=0, atol=1e-18)
    assert out[0] == 0.0 and out[1] == 0.0


def test_removal_gradient_zero_at_origin_instance():
    out = models.removal_gradient(GameSpec(), np.array([1.0, 0.0, -0.1, 0.1]), np.array([0.0]), 0.01, 100)
    assert np.array_equal(out, np.zeros(4))


@given(x=st.floats(-5, 5), n=st.integers(1, 500))
def test_removal_gradient_halves_when_batch_doubles(x, n):
    theta = np.array([1.0, 0.0, -0.1, 0.1])
    a = models.removal_gradient(GameSpec(), theta, np.array([x]), 0.01, n)
    b = models.removal_gradient(GameSpec(), theta, np.array([x]), 0.01, 2 * n)
    np.testing.assert_allclose(b, a / 2, rtol=1e-15, atol=0)


@pytest.mark.parametrize("loss", LOSSES)
def test_dropping_an_instance_matches_removal_gradient(loss, rng, small_data):
    spec = GameSpec(loss=loss)
    theta = models.init_params(spec, rng)
    eta, j, n = 0.01, 17, small_data.n_x
    w = np.ones(n)
    w[j] = 0.0
    v_minus = models.game_gradient(spec, theta, small_data.X, small_data.Z, w, float(n))
    v = models.game_gradient(spec, theta, small_data.X, small_data.Z)
    dv = models.removal_gradient(spec, theta, small_data.X[j], eta, n)
    np.testing.assert_allclose(v_minus, v - dv / eta, rtol=0, atol=1e-12)


@pytest.mark.parametrize("loss", LOSSES)
def test_removal_dots_match_removal_gradient(loss, rng, small_data):
    spec = GameSpec(loss=loss)
    theta = models.init_params(spec, rng)
    u = rng.normal(size=4)
    dots = models.removal_dots(spec, theta, u, small_data.X[:20], 0.01, 200)
    ref = [models.removal_gradient(spec, theta, x, 0.01, 200) @ u for x in small_data.X[:20]]
    np.testing.assert_allclose(dots, ref, rtol=1e-12, atol=1e-20)
    np.testing.assert_allclose(models.lqgan_removal_dots(spec, theta, u, small_data.X[:20], 0.01, 200),
                               ref, rtol=1e-12, atol=1e-20)


@pytest.mark.parametrize("loss", LOSSES)
def test_closed_forms_match_autodiff(loss, small_data):
    spec = GameSpec(loss=loss, reg_rates=(0.05, 0.02))
    r = np.random.default_rng(7)
    for _ in range(100):
        theta = r.normal(0, 0.7, 4)
        u = r.normal(size=4)
        cf = models.lqgan_closed_forms(spec, theta, small_data.X, small_data.Z, u)
        np.testing.assert_allclose(cf["v"], models.game_gradient(spec, theta, small_data.X, small_data.Z),
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(cf["jtu"], models.jacobian_t_vector(spec, theta, u, small_data.X, small_data.Z),
                                   rtol=0, atol=1e-12)


def test_closed_forms_reject_mlp():
    with pytest.raises(SpecMismatch):
        models.lqgan_closed_forms(GameSpec.mlp(), np.zeros(10), np.zeros((2, 1)), np.zeros((2, 1)))


def test_two_point_wasserstein_gradient_at_zero():
    # generated samples are all 0 at theta = 0, so only the data term moves psi
    spec = GameSpec(loss="wasserstein")
    X = np.array([[1.0], [2.0]])
    v = models.lqgan_gradient(spec, np.zeros(4), X, np.array([[0.3], [-0.8]]))
    np.testing.assert_allclose(v, [0.0, 0.0, -2.5, -1.5], atol=1e-15)


def test_spec_validation():
    with pytest.raises(SpecMismatch):
        GameSpec(latent_dim=2)
    with pytest.raises(SpecMismatch):
        GameSpec(loss="hinge")
    with pytest.raises(SpecMismatch):
        GameSpec(reg_rates=(-1.0, 0.0))
    assert models.param_dims(GameSpec()) == (2, 2)
    assert GameSpec.from_dict(GameSpec.mlp().to_dict()) == GameSpec.mlp()


def test_param_vector_blocks():
    p = models.ParamVector(np.arange(5.0), 2)
    assert np.array_equal(p.phi, [0, 1]) and np.array_equal(p.psi, [2, 3, 4]) and p.dim == 5
    with pytest.raises(ValueError):
        models.ParamVector(np.arange(3.0), 3)


def test_dataset_invariants():
    d = Dataset([1.0, 2.0], [[0.0]])
    assert d.X.shape == (2, 1) and d.n_z == 1
    with pytest.raises(ValueError):
        d.X[0, 0] = 5.0
    with pytest.raises(ValueError):
        Dataset([np.nan], [0.0])
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 1)), [0.0])


def test_csv_and_sampler_roundtrip(tmp_path):
    rows, labels = models.sample_distribution(
        "mixture", {"means": [1, -2], "stds": [0.5, 0.5], "weights": [0.9, 0.1]}, 50, 3)
    again, _ = models.sample_distribution(
        "mixture", {"means": [1, -2], "stds": [0.5, 0.5], "weights": [0.9, 0.1]}, 50, 3)
    assert np.array_equal(rows, again)
    models.save_csv(tmp_path / "x.csv", rows, labels)
    back, lab = models.load_csv(tmp_path / "x.csv")
    assert np.array_equal(back, rows) and np.array_equal(lab, labels)
    assert (tmp_path / "x.csv").read_bytes().count(b"\r") == 0


@given(theta=arrays(np.float64, 4, elements=st.floats(-2, 2)))
def test_sigmoid_loss_derivatives_consistent(theta):
    fp, fpp, *_ = models.loss_derivatives("original")
    a = theta
    np.testing.assert_allclose(fp(a), expit(-a), rtol=1e-12)
    np.testing.assert_allclose(fpp(a), -expit(a) * expit(-a), rtol=1e-12, atol=1e-300)
