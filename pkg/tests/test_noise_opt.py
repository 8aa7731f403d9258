import math

import numpy as np
import pytest

from vstar.denoiser.data import default_specs, generate_dataset
from vstar.denoiser.model import ModelConfig
from vstar.denoiser.train import TrainConfig, train
from vstar.noise_opt import (
    NoiseDistributionParams,
    NoisePipeline,
    OptConfig,
    attention_match_loss,
    build_covariance,
    kl_to_standard,
    optimize_initial_noise,
    reference_attention,
    sample_noise,
)
from vstar.temporal_attention import TemporalAttentionMap
from vstar.tensor_core import NotPositiveDefiniteError, SeededRng, cholesky_factor, fd_gradient_check, softmax_rows


@pytest.fixture(scope="module")
def tiny():
    ds = generate_dataset(default_specs()[::5][:4], 4, seed=0)
    return train(ds, ModelConfig(channels=(16, 16, 16)), seed=2, cfg=TrainConfig(steps=0))


@pytest.fixture(scope="module")
def tiny_reference(tiny):
    video = generate_dataset(default_specs()[:1], 4, seed=1)[0].video
    return reference_attention(video, tiny, OptConfig(t_ref=(800,)), seed=0)


# -- covariance --------------------------------------------------------------


def test_covariance_identity():
    assert np.array_equal(build_covariance(1.0, 0.0, 4), np.eye(4))


def test_covariance_half():
    assert np.array_equal(build_covariance(1.0, 0.5, 3), [[1, 0.5, 0.25], [0.5, 1, 0.5], [0.25, 0.5, 1]])


@pytest.mark.parametrize("gamma", np.linspace(-0.99, 0.99, 50))
def test_unit_beta_always_psd(gamma):
    L = cholesky_factor(build_covariance(1.0, gamma, 16))
    assert np.all(np.diagonal(L) > 0)


def test_small_beta_large_gamma_not_psd():
    with pytest.raises(NotPositiveDefiniteError):
        cholesky_factor(build_covariance(0.2, 0.9, 8))


def test_gamma_zero_sampling_is_scaled_iid():
    shape = (5, 3, 4, 4)
    out = sample_noise(NoiseDistributionParams(0.0, 2.25, 0.0), shape, seed=3)
    np.testing.assert_allclose(out, 1.5 * SeededRng(3).normal(shape), atol=1e-15)


def test_sampled_frame_covariance():
    params = NoiseDistributionParams(0.2, 1.0, 0.6)
    x = sample_noise(params, (4, 50_000), seed=0)
    emp = np.cov(x)
    target = build_covariance(1.0, 0.6, 4)
    # standard error of a sample covariance entry, (s_ii s_jj + s_ij^2) / n
    se = np.sqrt((np.outer(np.diagonal(target), np.diagonal(target)) + target**2) / x.shape[1])
    assert np.all(np.abs(emp - target) < 3 * se)
    assert np.all(np.abs(x.mean(axis=1) - 0.2) < 3 * np.sqrt(1.0 / x.shape[1]))


def test_params_validation():
    with pytest.raises(ValueError):
        NoiseDistributionParams(gamma=1.0)
    with pytest.raises(ValueError):
        NoiseDistributionParams(beta=0.0)


# -- KL ----------------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 4, 16])
def test_kl_standard_zero(n):
    assert kl_to_standard(np.zeros(n), np.eye(n)) == 0.0


def test_kl_one_dim_closed_form():
    assert abs(kl_to_standard([0.0], [[2.0]]) - 0.5 * (1 - math.log(2))) < 1e-9
    assert kl_to_standard([0.0], [[2.0]]) == pytest.approx(0.153426, abs=1e-6)


def test_kl_monte_carlo():
    rng = SeededRng(17)
    mu = rng.normal(3) * 0.5
    b = rng.normal((3, 3))
    sigma = b @ b.T / 3 + 0.5 * np.eye(3)
    draws = 1_000_000
    L = np.linalg.cholesky(sigma)
    z = rng.normal((draws, 3))
    x = mu + z @ L.T
    logdet = 2 * np.sum(np.log(np.diagonal(L)))
    # log p(x) - log q(x), constants cancel
    log_ratio = -0.5 * np.sum(z**2, axis=1) - 0.5 * logdet + 0.5 * np.sum(x**2, axis=1)
    est, se = log_ratio.mean(), log_ratio.std(ddof=1) / math.sqrt(draws)
    assert abs(kl_to_standard(mu, sigma) - est) < 3 * se


def test_kl_rotation_invariant():
    rng = SeededRng(5)
    b = rng.normal((6, 6))
    sigma = b @ b.T + np.eye(6)
    q, _ = np.linalg.qr(rng.normal((6, 6)))
    assert kl_to_standard(np.zeros(6), q @ sigma @ q.T) == pytest.approx(kl_to_standard(np.zeros(6), sigma), rel=1e-10)


def test_kl_positive_off_standard():
    assert kl_to_standard([0.1, 0.0], np.eye(2)) > 0
    assert kl_to_standard([0.0, 0.0], build_covariance(1.0, 0.3, 2)) > 0


def test_kl_rejects_non_spd():
    with pytest.raises(NotPositiveDefiniteError):
        kl_to_standard(np.zeros(2), [[1.0, 2.0], [2.0, 1.0]])


# -- attention match ---------------------------------------------------------


def test_match_loss_equal_zero():
    a = softmax_rows(SeededRng(1).normal((5, 5)))
    assert attention_match_loss(a, a) == 0.0


def test_match_loss_identity_vs_uniform():
    assert attention_match_loss(np.eye(2), np.full((2, 2), 0.5)) == pytest.approx(1.0, abs=1e-15)


def test_match_loss_scalar_oracle():
    r = SeededRng(2)
    a, b = softmax_rows(r.normal((7, 7))), softmax_rows(r.normal((7, 7)))
    acc = 0.0
    for i in range(7):
        for j in range(7):
            acc += (a[i][j] - b[i][j]) ** 2
    assert abs(attention_match_loss(a, b) - math.sqrt(acc)) < 1e-12


def test_match_loss_mismatch():
    with pytest.raises(ValueError):
        attention_match_loss(np.eye(3), np.eye(4))
    with pytest.raises(ValueError, match="levels"):
        attention_match_loss(TemporalAttentionMap(16, np.eye(2)), TemporalAttentionMap(8, np.eye(2)))


# -- optimization ------------------------------------------------------------


def test_opt_config_validation():
    with pytest.raises(ValueError):
        OptConfig(step_size=0.0)
    with pytest.raises(ValueError):
        OptConfig(lam=-1.0)
    with pytest.raises(ValueError):
        OptConfig(t_ref=())


def test_pipeline_gradient_matches_finite_differences(tiny, tiny_reference):
    cfg = OptConfig(lam=0.05, t_ref=(800,))
    pipe = NoisePipeline(tiny, tiny_reference, cfg, SeededRng(4).normal((4, 3, 16, 16)))
    x0 = np.array([0.1, 1.5, 0.3])
    res = fd_gradient_check(pipe.joint, pipe.gradient, x0, h=1e-5)
    assert res.max_rel_error < 1e-4


def test_zero_steps_returns_init(tiny, tiny_reference):
    init = NoiseDistributionParams(0.05, 1.2, 0.1)
    res = optimize_initial_noise(tiny_reference, tiny, OptConfig(steps=0, t_ref=(800,)), seed=0, init=init)
    assert res.params == init and len(res.trace) == 1


def test_huge_lambda_stays_at_standard_normal(tiny, tiny_reference):
    res = optimize_initial_noise(tiny_reference, tiny, OptConfig(lam=1e6, steps=3, t_ref=(800,)), seed=0)
    assert np.max(np.abs(res.params.as_vector() - [0.0, 1.0, 0.0])) < 1e-3


def test_returned_params_never_worse(tiny, tiny_reference):
    res = optimize_initial_noise(tiny_reference, tiny, OptConfig(steps=3, t_ref=(800,)), seed=1)
    assert res.trace[-1]["l_joint"] <= res.trace[0]["l_joint"]
    joints = [r["l_joint"] for r in res.trace]
    assert all(b < a for a, b in zip(joints, joints[1:]))


def test_non_psd_step_is_halved(tiny, tiny_reference, monkeypatch):
    calls = []

    def fake_evaluate(self, x, with_grad=True):
        calls.append(np.array(x))
        # pretend descent always pushes beta down and gamma up
        return 1.0, 0.0, 1.0 - 0.01 * len(calls), np.array([0.0, 10.0, -10.0])

    monkeypatch.setattr(NoisePipeline, "evaluate", fake_evaluate)
    cfg = OptConfig(steps=1, step_size=1.0, t_ref=(800,))
    res = optimize_initial_noise(tiny_reference, tiny, cfg, seed=0, init=NoiseDistributionParams(0.0, 1.0, 0.0))
    accepted = res.params
    # a full step lands on beta=0.1, gamma=0.99 which is not PSD; the accepted step must be PSD
    cholesky_factor(build_covariance(accepted.beta, accepted.gamma, 4))
    assert accepted.gamma < 0.99
    assert res.improved
