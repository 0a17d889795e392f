import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mupar.coordcheck import fit_slope
from mupar.data import MarkovLM, TeacherTask
from mupar.models import Batch, MlpConfig, Model, ParamTensor, TransformerConfig, build_mlp, build_transformer
from mupar.numcore import SeededRng, relative_error
from mupar.optim import (
    AdamConfig, OptimConfigError, Schedule, SgdConfig, Trainer, _adam_fused, _adam_fused_py,
    adam_step, clip_gradients, effective_eps, schedule_value, sgd_step,
)
from mupar.parametrize import FAN_IN, FAN_OUT, AbcTriple, Expr, InfShape, Optimizer, Scheme, finite


def vector_model(values):
    m = Model(Scheme.SP)
    p = m.add(ParamTensor("w", InfShape([finite(len(values))]), {o: AbcTriple() for o in Optimizer}))
    p.tensor.data = np.array(values, dtype=float)
    return m, p


def set_grad(p, g):
    p.tensor.grad = np.array(g, dtype=float)


def trajectory(model, opt, batches, clip=None):
    tr = Trainer(model, opt, Schedule("linear_decay", len(batches) + 5), clip=clip)
    return np.array([tr.train_step(b) for b in batches])


def test_schedules():
    assert all(schedule_value(Schedule("constant", 10), t) == 1.0 for t in range(12))
    assert schedule_value(Schedule("linear_decay", 10), 10) == 0.0
    assert schedule_value(Schedule("cosine", 10), 10) == pytest.approx(0.0)
    assert schedule_value(Schedule("step", 10, (5, 8), 0.1), 6) == pytest.approx(0.1)
    assert schedule_value(Schedule("step", 10, (5, 8), 0.1), 9) == pytest.approx(0.01)
    assert schedule_value(Schedule("inv_sqrt", 10), 3) == 0.5
    with pytest.raises(OptimConfigError):
        Schedule("warmup", 10)
    with pytest.raises(OptimConfigError):
        Schedule("constant", 0)
    with pytest.raises(OptimConfigError):
        Schedule("step", 10, (0, 5))


@given(st.sampled_from(Schedule.KINDS), st.integers(1, 1000), st.integers(0, 2000))
def test_schedule_range(kind, total, t):
    s = Schedule(kind, total, (max(1, total // 3), max(1, total // 2)))
    assert schedule_value(s, 0) == 1.0
    assert 0.0 <= schedule_value(s, t) <= 1.0


def test_vanilla_sgd_step():
    m, p = vector_model([1.0, -2.0, 0.5])
    set_grad(p, [0.5, 1.0, -4.0])
    sgd_step(m, SgdConfig(0.1), Schedule(), 0)
    np.testing.assert_array_equal(p.data, [1.0 - 0.05, -2.0 - 0.1, 0.5 + 0.4])


def test_sgd_momentum_buffer():
    m, p = vector_model([0.0])
    cfg = SgdConfig(1.0, momentum=0.9)
    for g in (1.0, 1.0):
        set_grad(p, [g])
        sgd_step(m, cfg, Schedule(), 0)
    # buffers: 1, then 0.9 + 1
    assert p.data[0] == pytest.approx(-(1.0 + 1.9))


def test_config_validation():
    with pytest.raises(OptimConfigError):
        SgdConfig(0.0)
    with pytest.raises(OptimConfigError):
        SgdConfig(0.1, momentum=1.0)
    with pytest.raises(OptimConfigError):
        AdamConfig(0.1, beta1=1.0)
    with pytest.raises(OptimConfigError):
        AdamConfig(0.1, eps_placement="inside")
    with pytest.raises(OptimConfigError):
        AdamConfig(0.1, variant="lamb")


def test_coupled_weight_decay_rejected_for_adam():
    with pytest.raises(OptimConfigError, match="decoupled"):
        AdamConfig(1e-3, weight_decay=1e-2)


def test_effective_eps():
    assert effective_eps(AdamConfig(1e-3, eps=1e-8, eps_placement="pre_sqrt"), 4.0) == pytest.approx(1e-8 / 16)
    assert effective_eps(AdamConfig(1e-3, eps=1e-8), 4.0) == pytest.approx(1e-8 / 4)


def test_adam_first_step_is_sign():
    m = build_mlp(MlpConfig(32, 10, 256, 64, scheme="mup-t3"), SeededRng(0))
    b = next(TeacherTask(n_train=64).batches(16, 1, 0))
    before = {n: p.data.copy() for n, p in m.params.items()}
    Trainer(m, AdamConfig(0.01)).train_step(b)
    for name, p in m.params.items():
        lr = 0.01 * p.lr_scale("adam")
        delta = p.data - before[name]
        g = np.sign(p.grad)
        np.testing.assert_allclose(delta, -lr * g, rtol=1e-9, atol=1e-15)
    hidden = np.abs(m.params["layers.1.weight"].data - before["layers.1.weight"])
    assert np.max(hidden) == pytest.approx(0.01 / 4)


def test_adam_zero_gradient_is_safe():
    m, p = vector_model([1.0, 2.0])
    set_grad(p, [0.0, 0.0])
    adam_step(m, AdamConfig(0.1), Schedule(), 0)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert not m.diverged


def test_fused_kernel_matches_numpy():
    rng = np.random.default_rng(0)
    args = [rng.standard_normal(50) for _ in range(2)] + [rng.standard_normal(50), rng.random(50)]
    a = [x.copy() for x in args]
    b = [x.copy() for x in args]
    for pre in (False, True):
        ok1 = _adam_fused(*a, 0.9, 0.99, 0.1, 0.01, 1e-3, 1e-6, pre, 1e-4)
        ok2 = _adam_fused_py(*b, 0.9, 0.99, 0.1, 0.01, 1e-3, 1e-6, pre, 1e-4)
        assert ok1 and ok2
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-15)


def test_clip_gradients():
    m, p = vector_model([0.0, 0.0])
    set_grad(p, [0.3, 0.4])
    assert clip_gradients(m, 1.0) == 1.0
    set_grad(p, [0.0, 0.0])
    assert clip_gradients(m, 1.0) == 1.0
    set_grad(p, [1.2, 1.6])
    assert clip_gradients(m, 1.0) == pytest.approx(0.5)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0)
    with pytest.raises(OptimConfigError):
        clip_gradients(m, 0.0)


def test_divergence_flag():
    m = build_mlp(MlpConfig(32, 10, 64, 64, scheme="sp"), SeededRng(0))
    tr = Trainer(m, SgdConfig(1e200))
    for b in TeacherTask(n_train=64).batches(8, 5, 0):
        tr.train_step(b)
    assert m.diverged


def _one_step_output(scheme, n, seed):
    cfg = MlpConfig(1, 1, n, 64, depth=1, activation="identity", scheme=scheme, bias=False, loss="mse")
    m = build_mlp(cfg, SeededRng(seed))
    b = Batch(np.ones((1, 1)), np.ones((1, 1)))
    Trainer(m, SgdConfig(1.0)).train_step(b)
    _, acts = m.forward(b, capture=True)
    return abs(float(acts["output"][0, 0]))


@pytest.mark.parametrize("scheme,expected", [("sp", 1.0), ("mup-t3", 0.0)])
def test_linear_net_one_step_growth(scheme, expected):
    widths = [2 ** k for k in range(6, 14)]
    sizes = [np.mean([_one_step_output(scheme, n, s) for s in range(20)]) for n in widths]
    slope, _, _ = fit_slope(list(zip(widths, sizes)))
    assert slope == pytest.approx(expected, abs=0.15)


THETAS = {
    "layers.0.weight": FAN_OUT ** 0.5 * Expr(3),
    "layers.0.bias": Expr(2),
    "layers.1.weight": Expr(0.5),
    "layers.1.bias": FAN_OUT ** -1,
    "out.weight": FAN_IN ** -1,
}

OPTS = {
    "sgd": SgdConfig(0.05),
    "sgd_momentum": SgdConfig(0.02, momentum=0.9),
    "adam": AdamConfig(3e-3),
    "adamw": AdamConfig(3e-3, decoupled_weight_decay=1e-2),
    "adagrad": AdamConfig(3e-3, variant="adagrad"),
    "rmsprop": AdamConfig(1e-3, variant="rmsprop"),
}


@pytest.mark.parametrize("name", sorted(OPTS))
def test_theta_rescaling_leaves_trajectory_invariant(name):
    cfg = MlpConfig(32, 10, 256, 64, scheme="mup-t3")
    bs = list(TeacherTask(n_train=256).batches(16, 20, 1))
    ref = trajectory(build_mlp(cfg, SeededRng(2)), OPTS[name], bs, clip=None)
    moved = trajectory(build_mlp(cfg, SeededRng(2), thetas=THETAS), OPTS[name], bs, clip=None)
    assert relative_error(moved, ref) <= 1e-8


@pytest.mark.parametrize("name", ["sgd", "adam"])
def test_theta_rescaling_transformer(name):
    cfg = TransformerConfig(64, 32, vocab=16, context=8, n_head=2, scheme="mup-t3")
    thetas = {"emb.word": Expr(4), "blocks.0.attn.q": FAN_IN ** -1, "blocks.1.mlp.fc2": Expr(0.25),
              "unemb": FAN_IN ** -0.5, "blocks.0.ln1.gain": Expr(2)}
    bs = list(MarkovLM(vocab=16, n_val=4).batches(4, 8, 20, 0))
    ref = trajectory(build_transformer(cfg, SeededRng(0)), OPTS[name], bs)
    moved = trajectory(build_transformer(cfg, SeededRng(0), thetas=thetas), OPTS[name], bs)
    assert relative_error(moved, ref) <= 1e-8


def test_schedule_applied_to_updates():
    m, p = vector_model([0.0])
    set_grad(p, [1.0])
    sgd_step(m, SgdConfig(1.0), Schedule("step", 10, (1,), 0.1), 1)
    assert p.data[0] == pytest.approx(-0.1)
    assert math.isfinite(p.data[0])
