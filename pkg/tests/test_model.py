import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nhmm import diffmath as dm
from nhmm.data import WindowBatch
from nhmm.errors import ConfigError, DivergenceError, ShapeError
from nhmm.model import (NhmmModel, elbo, elbo_rows, enumerate_log_likelihood, exact_log_likelihood,
                        forecast, forward_log_likelihood, forward_recursion, gaussian_logpdf,
                        posterior_assignments, state_marginals)

from conftest import random_batch


def test_config_round_trip(small_model):
    clone = NhmmModel.from_config(small_model.config())
    clone.load_state_dict(small_model.state_dict())
    assert clone.config() == small_model.config()
    for g in ("emission", "prior", "posterior"):
        assert clone.group_hash(g) == small_model.group_hash(g)


def test_parameter_groups_partition_parameters(small_model):
    groups = small_model.parameter_groups()
    names = [p.name for ps in groups.values() for p in ps]
    assert len(names) == len(set(names)) == len(small_model.parameters())
    assert all(n.startswith("emission") for n in (p.name for p in groups["emission"]))


def test_default_signal_routing():
    m = NhmmModel(3, 2, 4, n_signals=1, hidden=(4,))
    assert m.signal_states == (2,)
    assert [e.use_signal for e in m.emissions] == [False, False, True]
    assert NhmmModel(3, 2, 4, hidden=(4,)).signal_states == ()


@pytest.mark.parametrize("kw", [{"n_states": 0}, {"scaler": "robust"}, {"signal_states": [3]},
                                {"signal_scaling": "global"}, {"signal_loc": [0.0, 1.0]}])
def test_invalid_model_config(kw):
    base = dict(n_states=2, horizon=2, lookback=3, n_signals=1, hidden=(4,))
    with pytest.raises(ConfigError):
        NhmmModel(**{**base, **kw})


def test_load_state_dict_checks_shapes(small_model):
    state = small_model.state_dict()
    name = next(iter(state))
    state[name] = np.zeros((1, 1))
    with pytest.raises(ShapeError):
        small_model.load_state_dict(state)
    del state[name]
    with pytest.raises(ConfigError, match="missing"):
        small_model.load_state_dict(state)


def test_prepare_checks_lookback_and_signals(small_model, rng):
    with pytest.raises(ShapeError):
        small_model.prepare(random_batch(rng, 2, 5, 3, E=1))
    with pytest.raises(ShapeError):
        small_model.prepare(random_batch(rng, 2, 6, 3, E=0))


def test_corpus_signal_scaler_keeps_absolute_level(rng):
    model = NhmmModel(2, 2, 4, n_signals=1, hidden=(4,))
    batch = random_batch(rng, 6, 4, 2, E=1)
    batch.past_w[:3] = 0.0
    batch.past_w[3:] = 1.0
    model.fit_signal_scaler(batch)
    scaled = model.prepare(batch)
    np.testing.assert_array_equal(scaled.past_w[:3], 0.0)
    np.testing.assert_array_equal(scaled.past_w[3:], 1.0)
    per_window = NhmmModel(2, 2, 4, n_signals=1, hidden=(4,), signal_scaling="window")
    per_window.fit_signal_scaler(batch)
    np.testing.assert_array_equal(per_window.prepare(batch).past_w, 0.0)


def test_elbo_decomposition(small_model, small_batch):
    terms = elbo(small_model, small_batch)
    assert terms.total == pytest.approx(terms.emission + terms.transition - terms.entropy)
    assert terms.entropy <= 0.0
    assert terms.rows["total"].shape == (5,)


def test_uniform_prior_transition_term(small_model, small_batch):
    terms = elbo(small_model, small_batch, uniform_prior=True)
    # sum_k beta_1k log(1/K) + (h - 1) steps of sum_jk beta beta log(1/K)
    assert terms.transition == pytest.approx(3 * np.log(0.5))


def test_hand_checked_elbo_rows():
    y = np.array([[0.5, -1.0]])
    mu = dm.Tensor(np.array([[[0.0, 1.0], [0.0, -1.0]]]))
    sigma = dm.Tensor(np.ones((1, 2, 2)))
    pi = dm.Tensor(np.array([[0.25, 0.75]]))
    alpha = dm.Tensor(np.array([[[[0.9, 0.1], [0.2, 0.8]]]]))
    beta = dm.Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
    rows = elbo_rows(y, mu, sigma, pi, alpha, beta)
    expected_emission = (-0.5 * np.log(2 * np.pi) - 0.125) + (-0.5 * np.log(2 * np.pi))
    assert rows["emission"].data[0] == pytest.approx(expected_emission)
    assert rows["transition"].data[0] == pytest.approx(np.log(0.25) + np.log(0.1))
    # beta = 0 entries are clamped before the log, contributing 0 * log(1e-6) = 0
    assert rows["entropy"].data[0] == pytest.approx(0.0)


def test_gaussian_logpdf_matches_closed_form():
    value = gaussian_logpdf(np.array([1.0]), dm.Tensor(np.array([0.0])), dm.Tensor(np.array([2.0])))
    assert value.data[0] == pytest.approx(-0.5 * np.log(2 * np.pi) - np.log(2.0) - 0.125)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 5), st.integers(0, 10**6))
def test_elbo_is_a_lower_bound(K, h, seed):
    rng = np.random.default_rng(seed)
    model = NhmmModel(K, h, 4, hidden=(5,), seed=seed)
    batch = random_batch(rng, 3, 4, h)
    exact = exact_log_likelihood(model, batch)
    assert np.all(elbo(model, batch).rows["total"] <= exact + 1e-8)
    np.testing.assert_allclose(forward_log_likelihood(model, batch), exact, atol=1e-8, rtol=0)


def test_forward_equals_enumeration_on_random_laws(rng):
    B, h, K = 4, 5, 3
    y = rng.normal(size=(B, h))
    mu = rng.normal(size=(B, h, K))
    sigma = rng.uniform(0.3, 2.0, size=(B, h, K))
    pi = dm.softmax_np(rng.normal(size=(B, K)))
    alpha = dm.softmax_np(3 * rng.normal(size=(B, h - 1, K, K)))
    np.testing.assert_allclose(forward_recursion(y, mu, sigma, pi, alpha),
                               enumerate_log_likelihood(y, mu, sigma, pi, alpha), atol=1e-10)


def test_enumeration_cap(small_model, small_batch):
    with pytest.raises(ValueError, match="cap"):
        exact_log_likelihood(small_model, small_batch, cap=4)


def test_single_state_reduces_to_gaussian(rng):
    model = NhmmModel(1, 4, 6, hidden=(5,), seed=3)
    batch = random_batch(rng, 6, 6, 4)
    scaled = model.prepare(batch)
    with dm.no_grad():
        mu, sigma = model.emission_params(scaled.past_y)
        direct = gaussian_logpdf(scaled.future_y, mu.data[:, :, 0], sigma.data[:, :, 0]).data.sum(1)
    terms = elbo(model, batch)
    assert np.max(np.abs(terms.rows["total"] - direct)) < 1e-10
    assert np.max(np.abs(exact_log_likelihood(model, batch) - direct)) < 1e-10


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_series(small_model, small_batch):
    # the squared standardized error overflows for this row only
    small_batch.future_y[2] = 1e300
    with pytest.raises(DivergenceError) as info:
        elbo(small_model, small_batch)
    assert info.value.series_id == "s2"


def test_state_marginals_chain():
    pi = np.array([[1.0, 0.0]])
    alpha = np.array([[[[0.5, 0.5], [0.0, 1.0]], [[0.5, 0.5], [0.0, 1.0]]]])
    np.testing.assert_allclose(state_marginals(pi, alpha)[0], [[1, 0], [0.5, 0.5], [0.25, 0.75]])


def test_forecast_outputs(small_model, small_batch):
    result = forecast(small_model, small_batch, n_traj=7, seed=1)
    assert result.mu.shape == result.sigma.shape == result.marginals.shape == (5, 3, 2)
    assert result.trajectories.shape == result.paths.shape == (5, 7, 3)
    np.testing.assert_allclose(result.marginals.sum(-1), 1.0)
    np.testing.assert_allclose(result.mixture_mean, (result.marginals * result.mu).sum(-1))
    again = forecast(small_model, small_batch, n_traj=7, seed=1)
    np.testing.assert_array_equal(result.trajectories, again.trajectories)
    other = forecast(small_model, small_batch, n_traj=7, seed=2)
    assert not np.array_equal(result.trajectories, other.trajectories)


def test_forecast_is_in_original_units(small_model, small_batch):
    shifted = WindowBatch(small_batch.past_y * 10 + 5, small_batch.future_y, small_batch.past_w,
                          small_batch.series_ids, small_batch.origins)
    a = forecast(small_model, small_batch)
    b = forecast(small_model, shifted)
    # minmax scaling is affine-equivariant
    np.testing.assert_allclose(b.mixture_mean, a.mixture_mean * 10 + 5, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(b.sigma, a.sigma * 10, rtol=1e-12)


def test_noiseless_trajectories_follow_state_means(small_model, small_batch):
    result = forecast(small_model, small_batch, n_traj=4, seed=0, noise=False)
    b, j, s = np.indices(result.paths.shape)
    np.testing.assert_allclose(result.trajectories, result.mu[b, s, result.paths])


def test_posterior_assignments_shape(small_model, small_batch):
    states = posterior_assignments(small_model, small_batch)
    assert states.shape == (5, 3)
    assert set(np.unique(states)) <= {0, 1}


# worked examples


def tensors(*arrays):
    return [dm.Tensor(np.asarray(a, dtype=np.float64)) for a in arrays]


def test_uniform_everything_two_states_two_steps():
    y = np.zeros((1, 2))
    mu, sigma, pi, alpha, beta = tensors(np.zeros((1, 2, 2)), np.ones((1, 2, 2)), np.full((1, 2), 0.5),
                                         np.full((1, 1, 2, 2), 0.5), np.full((1, 2, 2), 0.5))
    rows = elbo_rows(y, mu, sigma, pi, alpha, beta)
    assert rows["transition"].data[0] == pytest.approx(-2 * np.log(2), abs=1e-12)
    assert rows["entropy"].data[0] == pytest.approx(-2 * np.log(2), abs=1e-12)


def test_hand_expanded_four_path_likelihood():
    y = np.array([[0.3, -0.4]])
    mu = np.array([[[0.0, 1.0], [-1.0, 0.5]]])
    sigma = np.array([[[1.0, 0.5], [2.0, 0.7]]])
    pi = np.array([[0.3, 0.7]])
    alpha = np.array([[[[0.8, 0.2], [0.4, 0.6]]]])

    def density(s, k):
        z = (y[0, s] - mu[0, s, k]) / sigma[0, s, k]
        return np.exp(-0.5 * z * z) / (np.sqrt(2 * np.pi) * sigma[0, s, k])

    total = sum(pi[0, a] * density(0, a) * alpha[0, 0, a, b] * density(1, b) for a in (0, 1) for b in (0, 1))
    assert enumerate_log_likelihood(y, mu, sigma, pi, alpha)[0] == pytest.approx(np.log(total), abs=1e-12)
    assert forward_recursion(y, mu, sigma, pi, alpha)[0] == pytest.approx(np.log(total), abs=1e-12)


def test_elbo_is_tight_when_posterior_factorizes(rng):
    # identical alpha rows make the hidden states independent, so the exact
    # posterior is a product of per-step marginals and the bound is attained
    B, h, K = 3, 4, 3
    # mild emissions keep every probability above the 1e-6 clamp
    y = rng.normal(size=(B, h))
    mu = 0.5 * rng.normal(size=(B, h, K))
    sigma = rng.uniform(1.0, 2.0, size=(B, h, K))
    pi = dm.softmax_np(rng.normal(size=(B, K)))
    rows = dm.softmax_np(rng.normal(size=(B, h - 1, 1, K)))
    alpha = np.repeat(rows, K, axis=2)
    step_prior = np.concatenate([pi[:, None, :], rows[:, :, 0, :]], axis=1)
    log_post = np.log(step_prior) - np.log(sigma) - 0.5 * ((y[:, :, None] - mu) / sigma) ** 2
    beta = dm.softmax_np(log_post)
    elbo_value = elbo_rows(y, *tensors(mu, sigma, pi, alpha, beta))["total"].data
    exact = enumerate_log_likelihood(y, mu, sigma, pi, alpha)
    np.testing.assert_allclose(elbo_value, exact, atol=1e-8, rtol=0)


def test_likelihood_decreases_as_sigma_grows(rng):
    y = np.zeros((1, 3))
    mu = 0.1 * rng.normal(size=(1, 3, 2))
    pi = np.array([[0.4, 0.6]])
    alpha = np.full((1, 2, 2, 2), 0.5)
    values = [forward_recursion(y, mu, np.full((1, 3, 2), s), pi, alpha)[0] for s in (1.0, 10.0, 100.0)]
    assert values[0] > values[1] > values[2]


def test_entropy_zero_iff_one_hot(rng):
    y = rng.normal(size=(2, 3))
    mu, sigma = rng.normal(size=(2, 3, 2)), np.ones((2, 3, 2))
    pi, alpha = np.full((2, 2), 0.5), np.full((2, 2, 2, 2), 0.5)
    one_hot = np.eye(2)[rng.integers(0, 2, size=(2, 3))]
    soft = np.clip(one_hot, 0.1, 0.9)
    assert np.all(elbo_rows(y, *tensors(mu, sigma, pi, alpha, one_hot))["entropy"].data == 0.0)
    assert np.all(elbo_rows(y, *tensors(mu, sigma, pi, alpha, soft))["entropy"].data < 0.0)


def test_state_permutation_equivariance(rng):
    B, h, K = 3, 4, 3
    y = rng.normal(size=(B, h))
    mu, sigma = rng.normal(size=(B, h, K)), rng.uniform(0.5, 2, size=(B, h, K))
    pi = dm.softmax_np(rng.normal(size=(B, K)))
    alpha = dm.softmax_np(rng.normal(size=(B, h - 1, K, K)))
    beta = dm.softmax_np(rng.normal(size=(B, h, K)))
    perm = np.array([2, 0, 1])
    a = elbo_rows(y, *tensors(mu, sigma, pi, alpha, beta))["total"].data
    b = elbo_rows(y, *tensors(mu[..., perm], sigma[..., perm], pi[:, perm],
                              alpha[:, :, perm][:, :, :, perm], beta[..., perm]))["total"].data
    np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)


def test_single_state_mixture_mean_is_mu(rng):
    model = NhmmModel(1, 3, 5, hidden=(4,))
    result = forecast(model, random_batch(rng, 4, 5, 3))
    np.testing.assert_array_equal(result.mixture_mean, result.mu[..., 0])
    assert result.trajectories.shape == (4, 0, 3)


def test_negative_n_traj_rejected(small_model, small_batch):
    with pytest.raises(ValueError):
        forecast(small_model, small_batch, n_traj=-1)
