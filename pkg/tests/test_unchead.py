import dataclasses
import math

import numpy as np
import pytest

from repunc.cpa import auroc
from repunc.datamodel import EmbeddingSet, LossVector
from repunc.errors import TrainingError, ValidationError
from repunc.selftest import check_gradients, random_grad_case
from repunc.unchead import (
    TENSORS,
    AdamState,
    HeadConfig,
    HeadParams,
    adamw_step,
    forward,
    init_head,
    load_head,
    lr_at_epoch,
    ranking_loss,
    ranking_loss_grad,
    save_head,
    train_head,
)

SMALL = HeadConfig(unc_width=32, epochs=40, warmup_epochs=5, batch_size=64, base_lr=1e-3)


def _zero_head(d=3, w=4, b3=0.0):
    return HeadParams(np.zeros((d, w)), np.zeros(w), np.zeros((w, w)), np.zeros(w), np.zeros((w, 1)), np.array([b3]))


def _scalar_params(v):
    arr = lambda: np.array([[float(v)]])  # noqa: E731
    return HeadParams(arr(), np.array([float(v)]), arr(), np.array([float(v)]), arr(), np.array([float(v)]))


def test_init_determinism_and_shapes():
    cfg = HeadConfig(input_dim=8, unc_width=256, seed=3)
    a, b = init_head(cfg), init_head(cfg)
    assert a.equals(b)
    assert not a.equals(init_head(dataclasses.replace(cfg, seed=4)))
    assert a.W1.shape == (8, 256) and a.W2.shape == (256, 256) and a.W3.shape == (256, 1)
    assert a.b1.shape == (256,) and a.b3.shape == (1,)
    assert not a.b1.any() and not a.b2.any() and not a.b3.any()
    lim = math.sqrt(6 / (8 + 256))
    assert np.abs(a.W1).max() <= lim
    assert np.abs(a.W1).max() > 0.9 * lim


def test_init_requires_input_dim():
    with pytest.raises(ValidationError):
        init_head(HeadConfig())


@pytest.mark.parametrize(
    "kw", [{"margin": 0}, {"final_lr": 1e-3}, {"unc_width": 0}, {"batch_size": 1}, {"warmup_epochs": 2000}, {"objective": "x"}]
)
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        HeadConfig(**kw)


def test_config_round_trip():
    cfg = HeadConfig(input_dim=5, unc_width=7, skip_tied_pairs=True)
    assert HeadConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError, match="unknown"):
        HeadConfig.from_dict({"widht": 3})


def test_forward_closed_forms():
    assert forward(_zero_head(), np.ones(3)) == pytest.approx(math.log(2), abs=1e-15)
    assert abs(forward(_zero_head(b3=30.0), np.zeros(3)) - 30.0) <= 1e-9
    U = forward(_zero_head(), np.ones((5, 3)))
    assert U.shape == (5,)


def test_forward_dimension_mismatch():
    with pytest.raises(ValidationError):
        forward(_zero_head(d=3), np.ones(4))


def test_forward_batch_matches_single():
    rng = np.random.default_rng(0)
    p = init_head(HeadConfig(input_dim=6, unc_width=16, seed=1))
    X = rng.standard_normal((20, 6))
    np.testing.assert_array_equal(forward(p, X), [forward(p, x) for x in X])


def test_positivity():
    rng = np.random.default_rng(1)
    p = init_head(HeadConfig(input_dim=16, unc_width=64, seed=2)).map(lambda t: t * 3.0)
    U = forward(p, 10.0 * rng.standard_normal((100_000, 16)))
    assert U.min() > 0


def test_ranking_loss_examples():
    assert ranking_loss(0.5, 0.2, 2.0, 1.0, 0.1) == (0.0, 1)
    loss, s = ranking_loss(0.2, 0.5, 2.0, 1.0, 0.1)
    assert s == 1 and loss == pytest.approx(0.4, abs=1e-15)
    loss, s = ranking_loss(0.3, 0.25, 1.0, 1.0, 0.1)
    assert s == -1 and loss == pytest.approx(0.15, abs=1e-15)


def test_inactive_hinge_gradient_is_zero():
    rng = np.random.default_rng(2)
    params, e1, e2, l1, l2, m = random_grad_case(rng, active=False)
    g = ranking_loss_grad(params, e1, e2, l1, l2, m)
    assert all(not t.any() for t in g.tensors().values())


def test_active_hinge_output_derivative():
    # with W3 = 0 and b3 = 0 the output derivative is sigmoid(0) = 1/2, so
    # dloss/dW3 = -s/2 (a2(e1) - a2(e2)) and dloss/db3 = 0
    rng = np.random.default_rng(3)
    p = init_head(HeadConfig(input_dim=3, unc_width=4, seed=2))
    p.W3[:] = 0.0
    e1, e2 = rng.standard_normal(3), rng.standard_normal(3)
    g = ranking_loss_grad(p, e1, e2, 2.0, 1.0, 0.1)

    def a2(e):
        h = e @ p.W1
        h = np.where(h > 0, h, 0.01 * h) @ p.W2
        return np.where(h > 0, h, 0.01 * h)

    np.testing.assert_allclose(g.W3[:, 0], -0.5 * (a2(e1) - a2(e2)), rtol=1e-12, atol=1e-15)
    assert g.b3[0] == 0.0


def test_gradient_check_suite():
    res = check_gradients(cases=40, seed=11)
    assert res.passed, res.detail


def test_schedule_constants():
    cfg = HeadConfig()
    assert lr_at_epoch(0, cfg) == 1e-4
    assert lr_at_epoch(49, cfg) == 1e-4
    assert lr_at_epoch(999, cfg) == 1e-8
    lrs = [lr_at_epoch(e, cfg) for e in range(1000)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert 1e-8 < lr_at_epoch(50, cfg) <= 1e-4
    with pytest.raises(ValidationError):
        lr_at_epoch(1000, cfg)


def test_adam_zero_gradient_no_decay():
    cfg = HeadConfig(weight_decay=0.0)
    p = _scalar_params(0.7)
    new, _ = adamw_step(p, p.map(np.zeros_like), AdamState.zeros_like(p), 0.1, cfg)
    assert new.equals(p)


def test_adam_first_step():
    cfg = HeadConfig(weight_decay=0.0, beta1=0.8, beta2=0.95)
    p = _scalar_params(0.0)
    new, state = adamw_step(p, p.map(np.ones_like), AdamState.zeros_like(p), 0.1, cfg)
    for t in new.tensors().values():
        assert t.ravel()[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_adam_decoupled_decay():
    cfg = HeadConfig(weight_decay=0.1)
    p = _scalar_params(1.0)
    new, _ = adamw_step(p, p.map(np.zeros_like), AdamState.zeros_like(p), 0.1, cfg)
    for t in new.tensors().values():
        assert t.ravel()[0] == pytest.approx(0.99, abs=1e-15)


def test_adam_rejects_non_finite_gradient():
    p = _scalar_params(1.0)
    g = p.map(np.zeros_like)
    g.W2[0, 0] = np.nan
    with pytest.raises(TrainingError, match="W2"):
        adamw_step(p, g, AdamState.zeros_like(p), 0.1, HeadConfig())


def _toy(n=512, d=6, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    return EmbeddingSet(X), LossVector(np.exp(X[:, 0]))


def test_train_determinism_and_log_shape():
    E, L = _toy()
    p1, log1 = train_head(E, L, SMALL)
    p2, log2 = train_head(E, L, SMALL)
    assert p1.equals(p2) and log1 == log2
    assert len(log1.loss) == len(log1.lr) == len(log1.pair_agreement) == SMALL.epochs
    assert all(np.isfinite(t).all() for t in p1.tensors().values())


def test_train_loss_scale_invariance():
    E, L = _toy(seed=1)
    p1, log1 = train_head(E, L, SMALL)
    p2, log2 = train_head(E, LossVector(2 * L.values + 3), SMALL)
    assert log1 == log2 and p1.equals(p2)


def test_train_max_epochs_is_a_prefix():
    E, L = _toy(seed=2)
    _, full = train_head(E, L, SMALL)
    _, part = train_head(E, L, SMALL, max_epochs=10)
    assert part.loss == full.loss[:10] and part.lr == full.lr[:10]


def test_train_input_validation():
    E, L = _toy(n=100)
    with pytest.raises(ValidationError, match="losses"):
        train_head(E, LossVector(L.values[:50]), SMALL)
    with pytest.raises(ValidationError, match="batch_size"):
        train_head(E, L, dataclasses.replace(SMALL, batch_size=256))
    with pytest.raises(ValidationError, match="input_dim"):
        train_head(E, L, dataclasses.replace(SMALL, input_dim=3))


def test_constant_loss_collapses_spread():
    E, _ = _toy(seed=3)
    cfg = dataclasses.replace(SMALL, epochs=150, seed=5)
    init = init_head(dataclasses.replace(cfg, input_dim=E.dim)).map(lambda t: 4.0 * t)
    before = forward(init, E.data)
    params, log = train_head(E, LossVector(np.ones(E.count)), cfg, init=init)
    after = forward(params, E.data)
    assert np.ptp(after) < np.ptp(before)
    assert log.loss[-1] < log.loss[0]


def test_tied_pairs_can_be_skipped():
    E, _ = _toy(seed=3)
    cfg = dataclasses.replace(SMALL, epochs=3, warmup_epochs=3, skip_tied_pairs=True)
    params, log = train_head(E, LossVector(np.ones(E.count)), cfg)
    assert log.loss == [0.0, 0.0, 0.0]
    # zero gradients leave only the decoupled decay: 8 batches x 3 epochs
    init = init_head(dataclasses.replace(cfg, input_dim=E.dim))
    factor = (1 - cfg.base_lr * cfg.weight_decay) ** 24
    np.testing.assert_allclose(params.W2, init.W2 * factor, rtol=1e-12)


def test_l2_objective_runs():
    E, L = _toy(seed=4)
    _, log = train_head(E, L, dataclasses.replace(SMALL, objective="l2", epochs=20))
    assert log.loss[-1] < log.loss[0]


def test_rank_objective_linear_planted():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((1024, 8))
    w = rng.standard_normal(8)
    L = X @ w
    L = L - L.min()
    cfg = HeadConfig(unc_width=64, epochs=60, warmup_epochs=10, base_lr=1e-3, batch_size=128, seed=1)
    params, _ = train_head(EmbeddingSet(X), LossVector(L), cfg)
    top = (L >= np.quantile(L, 0.9)).astype(float)
    assert auroc(forward(params, X), top) >= 0.95


@pytest.mark.slow
def test_pair_agreement_visible_coordinate():
    # loss is an increasing function of one coordinate at a scale the head resolves
    best = []
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        X = rng.standard_normal((2000, 16))
        X[:, 0] *= 5.0
        L = np.exp(X[:, 0] / 5.0)
        _, log = train_head(EmbeddingSet(X), LossVector(L), HeadConfig(unc_width=256, seed=seed), max_epochs=200)
        best.append(max(log.pair_agreement))
    assert np.mean(best) >= 0.95


def test_save_load_bit_exact(tmp_path):
    cfg = HeadConfig(input_dim=5, unc_width=9, seed=8)
    p = init_head(cfg).map(lambda t: t + 0.1)
    save_head(tmp_path / "h.bin", p, cfg)
    q, cfg2 = load_head(tmp_path / "h.bin")
    assert cfg2 == cfg
    for name in TENSORS:
        assert getattr(q, name).tobytes() == getattr(p, name).tobytes()
    blob = (tmp_path / "h.bin").read_bytes()
    assert (blob.index(b"\n") + 1) % 64 == 0


def test_load_head_rejects_other_kinds(tmp_path):
    from repunc.datamodel import save_losses

    save_losses(tmp_path / "l.bin", LossVector([1.0, 2.0]))
    with pytest.raises(ValidationError, match="not a head file"):
        load_head(tmp_path / "l.bin")
