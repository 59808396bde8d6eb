import math

import numpy as np
import pytest
from scipy import optimize

from unlearnaudit import backend
from unlearnaudit.accounting import account_epsilon, epsilon_at_order, noise_for_epsilon, optimal_order
from unlearnaudit.data import generate_synthetic
from unlearnaudit.errors import ArgumentError
from unlearnaudit.model import (
    CONF_MAX,
    CONF_MIN,
    DpConfig,
    ModelState,
    Recipe,
    TrainConfig,
    accuracy,
    batch_schedule,
    clip_gradient,
    confidence_of_true_label,
    dp_steps,
    init_model,
    load_model,
    loss,
    loss_gradient,
    per_sample_gradients,
    predict_proba,
    save_model,
    train,
    train_dp,
)


def fd_gradient(model, X, y, h=1e-6):
    g = np.zeros(model.params.size)
    for i in range(g.size):
        p = np.array(model.params)
        p[i] += h
        up = loss(model.replace(params=p), X, y)
        p[i] -= 2 * h
        down = loss(model.replace(params=p), X, y)
        g[i] = (up - down) / (2 * h)
    return g


def random_tiny_case(seed):
    rng = np.random.default_rng(seed)
    depth = rng.integers(1, 3)
    arch = [int(rng.integers(2, 5))] + [int(rng.integers(2, 6)) for _ in range(depth)] + [int(rng.integers(2, 4))]
    model = init_model(arch, seed)
    model = model.replace(params=model.params + 0.3 * rng.standard_normal(model.params.size))
    X = rng.standard_normal((5, arch[0]))
    y = rng.integers(0, arch[-1], 5)
    return model, X, y


def relative_error(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def test_init_shapes_and_determinism():
    m = init_model([2, 3], 0)
    (W, b), = m.layers
    assert W.shape == (2, 3) and b.shape == (3,) and not b.any()
    assert m == init_model([2, 3], 0)
    assert m != init_model([2, 3], 1)
    assert np.all(np.abs(W) <= 1 / math.sqrt(2))
    with pytest.raises(ArgumentError):
        init_model([3], 0)


def test_model_state_is_validated_and_frozen():
    with pytest.raises(ArgumentError):
        ModelState((2, 2), np.zeros(5))
    with pytest.raises(ArgumentError):
        ModelState((1, 2), np.array([np.inf, 0, 0, 0]))
    m = init_model([2, 2], 0)
    with pytest.raises(ValueError):
        m.params[0] = 1.0
    assert m.activation == "relu"


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    model, X, y = random_tiny_case(seed)
    assert relative_error(loss_gradient(model, X, y), fd_gradient(model, X, y)) < 1e-5


def test_per_sample_gradients_average_to_batch_gradient():
    model, X, y = random_tiny_case(3)
    g = per_sample_gradients(model, X, y)
    assert g.shape == (5, model.params.size)
    assert np.allclose(g.mean(axis=0), loss_gradient(model, X, y), atol=1e-12)


def test_predict_proba():
    zero = ModelState((3, 4), np.zeros(16))
    assert np.allclose(predict_proba(zero, np.ones(3)), 0.25)
    model, X, _ = random_tiny_case(1)
    P = predict_proba(model, X)
    assert np.all(P >= 0) and np.allclose(P.sum(axis=1), 1, atol=1e-9)
    with pytest.raises(ArgumentError):
        predict_proba(model, np.zeros(model.arch[0] + 1))


def test_predict_proba_hand_softmax():
    # logits = x @ W + b with x = [1, 2]
    W = np.array([[1.0, 0.0], [0.5, -1.0]])
    b = np.array([0.0, 1.0])
    m = ModelState((2, 2), np.concatenate([W.ravel(), b]))
    z = np.array([2.0, -1.0])
    expected = np.exp(z) / np.exp(z).sum()
    assert np.allclose(predict_proba(m, np.array([1.0, 2.0])), expected, atol=1e-15)


def test_confidence_of_true_label():
    from unlearnaudit.data import Sample

    zero = ModelState((3, 4), np.zeros(16))
    assert confidence_of_true_label(zero, Sample(0, np.zeros(3), 2)) == pytest.approx(0.25)
    saturated = ModelState((1, 2), np.array([0.0, 0.0, 0.0, 1e4]))
    assert confidence_of_true_label(saturated, Sample(0, np.zeros(1), 1)) == CONF_MAX
    assert confidence_of_true_label(saturated, Sample(0, np.zeros(1), 0)) == CONF_MIN
    model, X, y = random_tiny_case(2)
    s = Sample(0, X[0], int(y[0]))
    assert confidence_of_true_label(model, s) == pytest.approx(predict_proba(model, X[0])[y[0]], abs=0, rel=1e-15)


def test_train_epochs_zero_is_identity():
    ds = generate_synthetic(20, 2, 3, 1.0, 0)
    m = init_model([3, 4, 2], 0)
    out = train(m, ds, np.ones(20, bool), TrainConfig(epochs=0, batch_size=4))
    assert out == m


def test_single_step_matches_hand_gradient_step():
    ds = generate_synthetic(4, 2, 3, 1.0, 0)
    mask = np.zeros(4, bool)
    mask[2] = True
    m = init_model([3, 4, 2], 5)
    cfg = TrainConfig(learning_rate=0.3, epochs=1, batch_size=1)
    out = train(m, ds, mask, cfg)
    g = fd_gradient(m, ds.features[[2]], ds.labels[[2]])
    assert np.allclose(out.params, m.params - 0.3 * g, atol=1e-8)
    assert out.n_train == 1


def test_train_is_deterministic_and_pure():
    ds = generate_synthetic(64, 2, 4, 1.0, 0)
    m = init_model([4, 8, 2], 0)
    before = m.params.copy()
    cfg = TrainConfig(epochs=5, batch_size=8, seed=3, weight_decay=1e-3)
    a, b = train(m, ds, np.ones(64, bool), cfg), train(m, ds, np.ones(64, bool), cfg)
    assert a == b and np.array_equal(m.params, before)
    with pytest.raises(ArgumentError):
        train(m, ds, np.zeros(64, bool), cfg)
    with pytest.raises(ArgumentError):
        train(m, ds, np.eye(64, dtype=bool)[0], cfg)  # batch larger than members


def test_default_recipe_fits_low_spread_data():
    ds = generate_synthetic(512, 2, 8, 0.1, 0)
    model = Recipe((8, 32, 2), TrainConfig()).fit(ds, np.ones(512, bool), 0)
    assert accuracy(model, ds) >= 0.95


def test_batch_schedule_covers_each_epoch():
    idx, offsets = batch_schedule(np.arange(10), 3, 4, np.random.default_rng(0))
    assert offsets.tolist() == [0, 4, 8, 10, 14, 18, 20, 24, 28, 30]
    for e in range(3):
        assert sorted(idx[10 * e : 10 * e + 10]) == list(range(10))


def test_clip_gradient():
    g = np.zeros(5)
    g[0] = 10.0
    assert np.linalg.norm(clip_gradient(g, 1.0)) == pytest.approx(1.0, abs=1e-15)
    small = np.array([0.3, 0.4])
    assert clip_gradient(small, 1.0) is small
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = rng.standard_normal(7) * rng.uniform(0, 5)
        assert np.linalg.norm(clip_gradient(v, 1.5)) <= max(np.linalg.norm(v), 1.5) + 1e-12


def test_train_dp_spend_and_determinism():
    ds = generate_synthetic(64, 2, 4, 1.0, 0)
    mask = np.ones(64, bool)
    cfg = TrainConfig(epochs=2, batch_size=16, seed=1)
    dp = DpConfig(1.0, 1.3, 1e-5)
    m = init_model([4, 8, 2], 0)
    a, spend = train_dp(m, ds, mask, cfg, dp)
    b, _ = train_dp(m, ds, mask, cfg, dp)
    assert a == b
    assert spend.epsilon == account_epsilon(1.3, dp_steps(64, cfg), 1e-5)
    assert a.spend == spend
    with pytest.raises(ArgumentError):
        DpConfig(0.0, 1.0)
    with pytest.raises(ArgumentError):
        DpConfig(1.0, 0.0)


def test_dp_step_matches_manual_clip_and_noise():
    ds = generate_synthetic(6, 2, 3, 1.0, 2)
    mask = np.ones(6, bool)
    cfg = TrainConfig(learning_rate=0.2, epochs=1, batch_size=6, seed=4)
    dp = DpConfig(0.5, 0.7, 1e-3)
    m = init_model([3, 4, 2], 1)
    out, _ = train_dp(m, ds, mask, cfg, dp)
    g = per_sample_gradients(m, ds.features, ds.labels)
    clipped = sum(clip_gradient(row, 0.5) for row in g)
    noise = np.random.default_rng([4, 1]).standard_normal((1, m.params.size))[0] * 0.7 * 0.5
    expected = m.params - 0.2 * (clipped + noise) / 6
    assert np.allclose(out.params, expected, atol=1e-12)


def test_huge_noise_gives_chance_accuracy():
    ds = generate_synthetic(200, 2, 4, 0.5, 0)
    accs = []
    for seed in range(3):
        model = Recipe((4, 16, 2), TrainConfig(epochs=5, batch_size=20), DpConfig(1.0, 1e6)).fit(
            ds, np.ones(200, bool), seed)
        accs.append(accuracy(model, ds))
    assert abs(np.median(accs) - 0.5) <= 0.1


def test_save_load_round_trip(tmp_path):
    ds = generate_synthetic(32, 2, 3, 1.0, 0)
    model, _ = train_dp(init_model([3, 5, 2], 0), ds, np.ones(32, bool), TrainConfig(epochs=1, batch_size=8, seed=2),
                        DpConfig(1.0, 2.0))
    save_model(model, tmp_path / "m.npz")
    back = load_model(tmp_path / "m.npz")
    assert back == model and back.spend == model.spend and back.seed == 2 and back.n_train == 32
    plain = init_model([3, 2], 4)
    save_model(plain, tmp_path / "p.npz")
    assert load_model(tmp_path / "p.npz").spend is None


# -- accountant -------------------------------------------------------------------


def test_epsilon_zero_steps():
    assert account_epsilon(1.0, 0, 1e-5) == 0.0


def test_epsilon_reference_value():
    assert account_epsilon(1.0, 1, 1e-5) == pytest.approx(5.29853, abs=1e-5)


def test_closed_form_equals_numeric_minimum():
    for sigma, T, delta in [(1.0, 1, 1e-5), (0.8, 10, 1e-6), (3.0, 500, 1e-5), (10.0, 2, 0.01)]:
        res = optimize.minimize_scalar(lambda a: epsilon_at_order(a, sigma, T, delta),
                                       bounds=(1 + 1e-9, 1e4), method="bounded", options={"xatol": 1e-12})
        assert account_epsilon(sigma, T, delta) == pytest.approx(res.fun, abs=1e-6)
        assert epsilon_at_order(optimal_order(sigma, T, delta), sigma, T, delta) == pytest.approx(
            account_epsilon(sigma, T, delta), abs=1e-12)


def test_epsilon_monotone():
    sigmas = np.linspace(0.5, 5, 20)
    eps = [account_epsilon(s, 100, 1e-5) for s in sigmas]
    assert all(a > b for a, b in zip(eps, eps[1:]))
    eps_t = [account_epsilon(1.0, t, 1e-5) for t in range(1, 50)]
    assert all(a < b for a, b in zip(eps_t, eps_t[1:]))


def test_noise_for_epsilon_inverts():
    for eps, T in [(2.0, 800), (6.0, 50), (0.5, 3)]:
        assert account_epsilon(noise_for_epsilon(eps, T, 1e-5), T, 1e-5) == pytest.approx(eps, rel=1e-12)


@pytest.mark.parametrize("args", [(0.0, 1, 1e-5), (1.0, -1, 1e-5), (1.0, 1, 0.0), (1.0, 1, 1.0)])
def test_accountant_rejects_bad_arguments(args):
    with pytest.raises(ArgumentError):
        account_epsilon(*args)


# -- kernels ----------------------------------------------------------------------


@pytest.mark.skipif(not backend.compiled_available(), reason="compiled kernels not built")
def test_backends_agree():
    ds = generate_synthetic(100, 3, 5, 1.0, 0)
    arch = (5, 7, 6, 3)
    rows = np.arange(60)
    idx, offsets = batch_schedule(rows, 4, 16, np.random.default_rng(0))
    start = init_model(arch, 2).params
    decay = np.full(start.size, 1e-3)
    mask = (np.arange(start.size) % 3 != 0).astype(float)
    noise = np.random.default_rng(3).standard_normal((offsets.size - 1, start.size))
    outs = {}
    for name in ("python", "c"):
        k = backend.get(name)
        a = start.copy()
        k.sgd_steps(a, arch, ds.features, ds.labels, idx, offsets, 0.1, decay, mask, -1.0)
        b = start.copy()
        k.dp_sgd_steps(b, arch, ds.features, ds.labels, idx, offsets, 0.1, decay, 0.7, noise)
        outs[name] = (a, b)
    assert np.allclose(outs["python"][0], outs["c"][0], rtol=0, atol=1e-12)
    assert np.allclose(outs["python"][1], outs["c"][1], rtol=0, atol=1e-12)
