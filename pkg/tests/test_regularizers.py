import numpy as np
import pytest

from funcnorm.autodiff import DimensionError, Tape
from funcnorm.gradcheck import check_case, random_case
from funcnorm.network import MlpSpec, TapedMlp, init, weight_decay_norm, zeros_like
from funcnorm.regularizers import (KINDS, RegConfig, display_norm, l2_norm_sq_estimate,
                                   regularized_loss, sobolev_norm_sq_estimate, train_output_penalty,
                                   unit_direction)
from funcnorm.samplers import GaussianSampler, SamplerSpec, fit


def taped(params, spec):
    return TapedMlp(Tape(), params, spec)


def identity_net(d=2):
    spec = MlpSpec((d, d, d))
    p = zeros_like(init(spec, 0))
    p.weights = [np.eye(d), np.eye(d)]
    return spec, p


def affine_net(rng, d=2, s=3, shift=10.0):
    """ReLU net that is affine for inputs with all coordinates above -shift."""
    spec = MlpSpec((d, d, s))
    p = zeros_like(init(spec, 0))
    p.weights = [np.eye(d), rng.standard_normal((d, s))]
    p.biases = [np.full(d, shift), rng.standard_normal(s)]
    return spec, p


def constant_net(c):
    spec = MlpSpec((3, 4, len(c)))
    p = zeros_like(init(spec, 0))
    p.biases[1] = np.asarray(c, float)
    return spec, p


def test_regconfig_validation():
    with pytest.raises(ValueError):
        RegConfig("lasso")
    with pytest.raises(ValueError):
        RegConfig("weighted_l2", lam=-1)
    with pytest.raises(ValueError):
        RegConfig("sobolev", sobolev_step=0)
    with pytest.raises(ValueError):
        RegConfig(batch_ratio=0)
    assert RegConfig("weighted_l2", batch_ratio=0.5).reg_batch_size(32) == 16
    assert RegConfig("weighted_l2", batch_ratio=0.01).reg_batch_size(32) == 1
    assert not RegConfig("weighted_l2", lam=0.0).active
    assert not RegConfig("none").active


def test_l2_zero_net():
    spec = MlpSpec((3, 4, 2))
    p = zeros_like(init(spec, 0))
    z = np.random.default_rng(0).standard_normal((7, 3))
    assert l2_norm_sq_estimate(taped(p, spec), z).item() == 0.0


def test_l2_constant_net():
    spec, p = constant_net([1.0, -2.0])
    for z in np.random.default_rng(0).standard_normal((3, 5, 3)):
        assert l2_norm_sq_estimate(taped(p, spec), z).item() == 5.0


def test_l2_identity_net_hand_value():
    spec, p = identity_net()
    assert l2_norm_sq_estimate(taped(p, spec), np.array([[1.0, 0.0], [0.0, 1.0]])).item() == 1.0


def test_l2_empty_batch():
    spec, p = identity_net()
    with pytest.raises(DimensionError):
        l2_norm_sq_estimate(taped(p, spec), np.zeros((0, 2)))


def test_l2_gradient_reaches_params_not_samples():
    spec, p = identity_net()
    model = taped(p, spec)
    out = l2_norm_sq_estimate(model, np.array([[1.0, 2.0]]))
    grads = model.tape.grad(out, model.leaves)
    assert any(np.any(g != 0) for g in grads)


def test_sobolev_constant_net_equals_l2():
    spec, p = constant_net([0.5, 2.0])
    z = np.random.default_rng(1).standard_normal((6, 3))
    u = unit_direction(3, np.random.default_rng(2))
    l2 = l2_norm_sq_estimate(taped(p, spec), z).item()
    assert sobolev_norm_sq_estimate(taped(p, spec), z, u).item() == l2


@pytest.mark.parametrize("h", [1e-3, 0.1, 1.0])
def test_sobolev_affine_net_gradient_term(h):
    rng = np.random.default_rng(3)
    spec, p = affine_net(rng)
    z = rng.uniform(-1, 1, (8, 2))
    u = unit_direction(2, rng)
    total = sobolev_norm_sq_estimate(taped(p, spec), z, u, h).item()
    l2 = l2_norm_sq_estimate(taped(p, spec), z).item()
    expected = float(np.sum((u @ p.weights[1]) ** 2))
    assert total - l2 == pytest.approx(expected, rel=1e-9)


def test_sobolev_dropout_passes_share_mask():
    spec = MlpSpec((3, 16, 2), dropout=(0.5,))
    p = init(spec, 5)
    z = np.random.default_rng(6).standard_normal((8, 3))
    u = unit_direction(3, np.random.default_rng(7))

    def slope_term(h):
        total = sobolev_norm_sq_estimate(taped(p, spec), z, u, h, rng=np.random.default_rng(8)).item()
        l2 = l2_norm_sq_estimate(taped(p, spec), z, rng=np.random.default_rng(8)).item()
        return total - l2

    # separate masks would make the term grow like 1/h^2
    assert slope_term(1e-5) == pytest.approx(slope_term(1e-3), rel=1e-3)
    assert slope_term(1e-3) < 10 * float(np.sum(p.weights[0] ** 2) * np.sum(p.weights[1] ** 2))


def test_sobolev_zero_net():
    spec = MlpSpec((3, 4, 2))
    p = zeros_like(init(spec, 0))
    z = np.random.default_rng(0).standard_normal((4, 3))
    assert sobolev_norm_sq_estimate(taped(p, spec), z, unit_direction(3, np.random.default_rng(0))).item() == 0


def test_sobolev_rejects_bad_direction_and_step():
    spec, p = identity_net()
    z = np.ones((3, 2))
    with pytest.raises(ValueError):
        sobolev_norm_sq_estimate(taped(p, spec), z, np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        sobolev_norm_sq_estimate(taped(p, spec), z, np.array([1.0, 0.0]), h=0.0)
    with pytest.raises(DimensionError):
        sobolev_norm_sq_estimate(taped(p, spec), z, np.array([1.0, 0.0, 0.0]))


def test_sobolev_at_least_l2():
    rng = np.random.default_rng(4)
    for _ in range(20):
        spec = MlpSpec((4, 8, 3))
        p = init(spec, int(rng.integers(1000)))
        z = rng.standard_normal((10, 4))
        u = unit_direction(4, rng)
        assert (sobolev_norm_sq_estimate(taped(p, spec), z, u).item()
                >= l2_norm_sq_estimate(taped(p, spec), z).item())


def test_train_output_penalty():
    spec, p = identity_net()
    x = np.array([[1.0, 0.0], [0.6, 0.8]])
    assert train_output_penalty(taped(p, spec), x).item() == pytest.approx(1.0, abs=1e-15)
    z = zeros_like(p)
    assert train_output_penalty(taped(z, spec), x).item() == 0.0
    q = init(MlpSpec((2, 5, 3)), 1)
    spec_q = MlpSpec((2, 5, 3))
    assert (train_output_penalty(taped(q, spec_q), x).item()
            == l2_norm_sq_estimate(taped(q, spec_q), x).item())


def test_output_scaling_is_quadratic():
    rng = np.random.default_rng(6)
    spec = MlpSpec((4, 8, 3))
    p = init(spec, 2)
    z = rng.standard_normal((9, 4))
    base = l2_norm_sq_estimate(taped(p, spec), z).item()
    for alpha in (0.5, 2.0, 3.0):
        q = p.copy()
        q.weights[-1] = alpha * q.weights[-1]
        q.biases[-1] = alpha * q.biases[-1]
        assert l2_norm_sq_estimate(taped(q, spec), z).item() == pytest.approx(alpha ** 2 * base, rel=1e-12)


def test_estimate_is_unbiased():
    rng = np.random.default_rng(8)
    spec, p = affine_net(rng)
    w, b = p.weights[1], p.biases[1]
    # z ~ N(0, I): f(z) = (z + 10) W + b, so E||f||^2 = ||10 * 1 W + b||^2 + ||W||_F^2
    exact = float(np.sum((10.0 * np.ones(2) @ w + b) ** 2) + np.sum(w * w))
    q = GaussianSampler(np.zeros(2), np.ones(2))
    estimates = np.array([l2_norm_sq_estimate(taped(p, spec), q.draw(10, rng)).item()
                          for _ in range(10_000)])
    se = estimates.std(ddof=1) / np.sqrt(len(estimates))
    assert abs(estimates.mean() - exact) <= 3 * se


def loss_value(p, spec, reg, sampler=None, seed=0, **kw):
    rng = np.random.default_rng(seed)
    x = np.random.default_rng(1).standard_normal((8, 4))
    y = np.arange(8) % 3
    terms = regularized_loss(taped(p, spec), x, y, reg, sampler, rng, **kw)
    return terms


def test_lambda_zero_equals_risk():
    spec = MlpSpec((4, 6, 3))
    p = init(spec, 0)
    sampler = fit(SamplerSpec("gaussian_fixed"), dim=4)
    for kind in KINDS:
        t = loss_value(p, spec, RegConfig(kind, lam=0.0), sampler)
        assert t.total.item() == t.risk.item()
        assert t.penalty is None


def test_weight_decay_kind():
    spec = MlpSpec((4, 6, 3))
    p = init(spec, 0)
    t = loss_value(p, spec, RegConfig("weight_decay", lam=0.3))
    assert t.total.item() == pytest.approx(t.risk.item() + 0.3 * weight_decay_norm(p), rel=1e-14)


def test_loss_affine_in_lambda():
    spec = MlpSpec((4, 6, 3))
    p = init(spec, 0)
    sampler = fit(SamplerSpec("gaussian_fixed"), dim=4)
    for kind in ("weighted_l2", "sobolev", "train_output", "weight_decay"):
        vals = [loss_value(p, spec, RegConfig(kind, lam=lam), sampler,
                           direction=unit_direction(4, np.random.default_rng(3))).total.item()
                for lam in (0.1, 0.2, 0.4)]
        assert vals[0] < vals[1] < vals[2]
        assert vals[2] - vals[1] == pytest.approx(2 * (vals[1] - vals[0]), rel=1e-9)


def test_missing_sampler():
    spec = MlpSpec((4, 6, 3))
    with pytest.raises(ValueError):
        loss_value(init(spec, 0), spec, RegConfig("weighted_l2"))


def test_extra_weight_decay_term():
    spec = MlpSpec((4, 6, 3))
    p = init(spec, 0)
    sampler = fit(SamplerSpec("gaussian_fixed"), dim=4)
    a = loss_value(p, spec, RegConfig("weighted_l2"), sampler)
    b = loss_value(p, spec, RegConfig("weighted_l2"), sampler, weight_decay=0.01)
    assert b.total.item() == pytest.approx(a.total.item() + 0.01 * weight_decay_norm(p), rel=1e-14)


def test_penalty_gradients_match_finite_differences():
    rng = np.random.default_rng(12)
    for net in range(3):
        case = random_case(rng)
        for kind in KINDS:
            assert check_case(case, kind, net).passed


def test_display_norm():
    assert display_norm(4.0) == 2.0
    assert display_norm(-1e-18) == 0.0
