import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mupar.transfer import (
    DIVERGED, Grid, HpError, HpPoint, ModelTemplate, NoViableHp, RandomSearch, ScalePoint, SweepRecord,
    aggregate, count_violations, divergence_frontier, lr_grid, mu_transfer, primer_argmin, primer_curve,
    primer_estimate, primer_function, primer_limit_argmin, primer_limit_curve, reverse_transfer, run_trial,
    select_best, simulated, sweep, window_mean, wider_is_better_scan,
)
from mupar.numcore import SeededRng

TPL = ModelTemplate("mlp", "mup-t8", "adam", base_width=16,
                    task_kwargs=(("n_train", 256), ("n_val", 64)))
SMALL = ScalePoint(1, 2, 16, 1, 20)


def rec(lr, seed, loss, diverged=False, **hp):
    return SweepRecord(HpPoint(master_lr=lr, **hp), SMALL, seed,
                       DIVERGED if diverged else loss, DIVERGED if diverged else loss, diverged)


# ---------------------------------------------------------------------------
# HpPoint / ScalePoint


def test_hp_rejects_regularization_and_unknown():
    for bad in ("weight_decay", "dropout", "decoupled_weight_decay"):
        with pytest.raises(HpError, match="regularization"):
            HpPoint({bad: 0.1})
    with pytest.raises(HpError):
        HpPoint(batch_size=32)
    with pytest.raises(HpError):
        HpPoint(master_lr=math.nan)
    with pytest.raises(HpError):
        HpPoint(schedule=3)


def test_hp_is_immutable_value():
    a = HpPoint(master_lr=0.1, alpha_output=2)
    assert a == HpPoint(alpha_output=2.0, master_lr=0.1) and hash(a) == hash(HpPoint(alpha_output=2.0, master_lr=0.1))
    with pytest.raises(AttributeError):
        a.x = 1
    assert pickle.loads(pickle.dumps(a)) == a
    assert a.with_(master_lr=0.2)["master_lr"] == 0.2 and a["master_lr"] == 0.1
    assert "alpha_output" in a and a.get("beta1") is None


@given(st.dictionaries(st.sampled_from(["master_lr", "alpha_output", "init_std", "beta1"]),
                       st.floats(1e-6, 10), max_size=4))
def test_hp_dict_round_trip(d):
    assert HpPoint(HpPoint(d).as_dict()) == HpPoint(d)


def test_scale_point_validation():
    with pytest.raises(HpError):
        ScalePoint(width_mult=0.5)
    with pytest.raises(HpError):
        ScalePoint(steps=0)


# ---------------------------------------------------------------------------
# selection


def test_select_best_averages_seeds():
    # A holds the single best record but B has the better mean
    records = [rec(0.1, 0, 1.0), rec(0.1, 1, 4.0), rec(0.2, 0, 2.0), rec(0.2, 1, 2.2)]
    assert select_best(records) == HpPoint(master_lr=0.2)
    agg = aggregate(records)
    assert agg[HpPoint(master_lr=0.1)] == (2.5, 2)
    assert agg[HpPoint(master_lr=0.2)][0] == pytest.approx(2.1)


def test_select_best_single_record():
    assert select_best([rec(0.3, 0, 5.0)]) == HpPoint(master_lr=0.3)


def test_select_best_all_diverged():
    with pytest.raises(NoViableHp, match="no viable HP"):
        select_best([rec(0.1, 0, 0, True), rec(0.2, 0, 0, True)])


def test_partially_diverged_point_is_not_viable():
    records = [rec(0.1, 0, 1.0), rec(0.1, 1, 0, True), rec(0.05, 0, 3.0), rec(0.05, 1, 3.0)]
    assert select_best(records) == HpPoint(master_lr=0.05)


def test_ties_prefer_smaller_lr_then_key():
    assert select_best([rec(0.2, 0, 1.0), rec(0.1, 0, 1.0)]) == HpPoint(master_lr=0.1)
    a, b = rec(0.1, 0, 1.0, alpha_output=2.0), rec(0.1, 0, 1.0, alpha_output=1.0)
    assert select_best([a, b]) == HpPoint(master_lr=0.1, alpha_output=1.0)


def test_select_best_metric_validation():
    with pytest.raises(HpError):
        select_best([rec(0.1, 0, 1.0)], metric="accuracy")


@given(st.permutations(list(range(6))))
def test_select_best_order_independent(perm):
    records = [rec(0.1, 0, 1.0), rec(0.1, 1, 1.2), rec(0.2, 0, 0.9), rec(0.2, 1, 1.2),
               rec(0.4, 0, 0, True), rec(0.4, 1, 0.1)]
    assert select_best([records[i] for i in perm]) == HpPoint(master_lr=0.2)


def test_window_mean():
    curve = np.arange(1, 201, dtype=float)
    assert window_mean(curve, 5) == 5.0
    assert window_mean(curve, 100) == pytest.approx(np.mean(curve[90:100]))
    assert window_mean(curve, 200) == pytest.approx(np.mean(curve[180:200]))


# ---------------------------------------------------------------------------
# search spaces and sweeps


def test_grid_and_random_search():
    g = Grid.of(master_lr=[0.1, 0.2], alpha_output=[1.0, 2.0, 4.0])
    assert len(g.points()) == 6
    r = RandomSearch((("master_lr", (1e-4, 1e-1, "log")), ("alpha_output", (1.0, 2.0))), k=20, seed=3)
    pts = r.points()
    assert pts == RandomSearch(r.axes, 20, 3).points()
    assert all(1e-4 <= p["master_lr"] <= 1e-1 and p["alpha_output"] in (1.0, 2.0) for p in pts)
    assert lr_grid(-3, -1) == [0.125, 0.25, 0.5]


def test_single_point_grid_one_record_per_seed():
    recs = sweep(Grid.of(master_lr=[1e-2]), SMALL, TPL, seeds=[0, 1, 2])
    assert [r.seed for r in recs] == [0, 1, 2]
    assert all(r.hp == HpPoint(master_lr=1e-2) and not r.diverged for r in recs)


def test_empty_search_rejected():
    with pytest.raises(HpError):
        sweep([], SMALL, TPL, seeds=[0])


def test_sweep_deterministic():
    g = Grid.of(master_lr=[1e-3, 1e-2])
    a = sweep(g, SMALL, TPL, seeds=[0, 1])
    b = sweep(g, SMALL, TPL, seeds=[0, 1])
    assert [(r.hp, r.seed, r.train_loss, r.val_loss) for r in a] == [(r.hp, r.seed, r.train_loss, r.val_loss) for r in b]
    assert all(np.array_equal(x.curve, y.curve) for x, y in zip(a, b))


def test_sweep_parallel_matches_serial():
    g = Grid.of(master_lr=[1e-3, 1e-2])
    a = sweep(g, SMALL, TPL, seeds=[0, 1], workers=1)
    b = sweep(g, SMALL, TPL, seeds=[0, 1], workers=2)
    assert [(r.hp, r.seed, r.train_loss) for r in a] == [(r.hp, r.seed, r.train_loss) for r in b]


def test_divergence_sentinel_halts_run():
    r = run_trial(TPL, HpPoint(master_lr=50.0), SMALL, 0)
    assert r.diverged and r.train_loss == DIVERGED and r.val_loss == DIVERGED
    assert np.isnan(r.curve[-1])
    assert r.loss("train_loss") == DIVERGED


def test_checkpoint_is_prefix_of_longer_run():
    long = run_trial(TPL, HpPoint(master_lr=1e-2), ScalePoint(1, 2, 16, 1, 40), 0, checkpoints=[20])
    short = run_trial(TPL, HpPoint(master_lr=1e-2), SMALL, 0)
    assert long.checkpoints[20] == short.train_loss
    assert np.array_equal(long.curve[:20], short.curve)


def test_transformer_template_runs():
    tpl = ModelTemplate("transformer", "mup-t8", "adam", base_width=16, task="markov",
                        task_kwargs=(("vocab", 8), ("n_val", 4)), model_kwargs=(("n_head", 2),))
    r = run_trial(tpl, HpPoint(master_lr=1e-2), ScalePoint(2, 1, 4, 8, 5), 0)
    assert r.width == 32 and not r.diverged and math.isfinite(r.val_loss)


def test_template_validation():
    with pytest.raises(HpError):
        ModelTemplate(kind="cnn")
    with pytest.raises(ValueError):
        ModelTemplate(scheme="mup-t4")


# ---------------------------------------------------------------------------
# transfer


def test_identity_transfer_reproduces_proxy():
    hp = HpPoint(master_lr=1e-2)
    _, report = mu_transfer(hp, SMALL, TPL, seeds=[0, 1])
    direct = [run_trial(TPL, hp, SMALL, s).train_loss for s in (0, 1)]
    assert report.target_losses == direct and report.mode == "mup"


def test_transfer_report_with_oracle_and_naive():
    target = ScalePoint(4, 2, 16, 1, 20)
    g = Grid.of(master_lr=lr_grid(-8, -4))
    model, report = mu_transfer(HpPoint(master_lr=2 ** -6), target, TPL, seeds=[0], oracle_search=g,
                                naive=(TPL.with_(scheme="sp"), HpPoint(master_lr=2 ** -6)))
    assert model.cfg.width == 64
    assert report.oracle_loss <= report.target_loss + 1e-12
    assert report.relative_gap == pytest.approx(report.target_loss / report.oracle_loss - 1)
    assert report.naive_loss is not None
    assert set(report.as_dict()) >= {"target_loss", "oracle_loss", "naive_loss", "relative_gap"}


def test_sp_transfer_warns():
    with pytest.warns(UserWarning, match="naive transfer"):
        _, report = mu_transfer(HpPoint(master_lr=1e-2), SMALL, TPL.with_(scheme="sp"))
    assert report.mode == "naive"


def test_count_violations():
    assert count_violations([3.0, 2.0, 2.05, 1.0], 0.02) == 1
    assert count_violations([3.0, 2.0, 2.01], 0.02) == 0
    assert count_violations([1.0], 0.02) == 0


def test_single_width_scan_is_monotone():
    rep = wider_is_better_scan(TPL, HpPoint(master_lr=1e-2), [1.0], SMALL, seeds=[0])
    assert rep.monotone and rep.widths == [16]


def test_width_scan_checkpoints():
    rep = wider_is_better_scan(TPL, HpPoint(master_lr=1e-2), [1.0, 2.0], SMALL, seeds=[0], checkpoints=[10])
    assert rep.steps == [10, 20] and all(len(v) == 2 for v in rep.mean_loss.values())


# ---------------------------------------------------------------------------
# reverse transfer and simulated width


def test_simulated_width_scalings():
    sim = simulated(TPL, 256, 16)
    m = sim.build(HpPoint(master_lr=1e-2), ScalePoint(1, 2, 16, 1, 1), 0)
    out = m.params["out.weight"]
    assert m.cfg.width == 16
    # base 256, width 16: the width multiplier is 1/16
    assert out.lr_scale("adam") == 1.0
    assert out.multiplier == pytest.approx(256 / 16)
    assert m.params["layers.1.weight"].lr_scale("adam") == pytest.approx(256 / 16)
    with pytest.raises(HpError):
        simulated(TPL.with_(scheme="sp"), 256, 16)


def test_reverse_same_scale_is_rerun():
    hp = HpPoint(master_lr=1e-2)
    rep = reverse_transfer(TPL, hp, 128, 128, SMALL, seeds=[0, 1])
    assert rep.from_losses == rep.to_losses
    direct = run_trial(simulated(TPL, 128, 16), hp, SMALL, 0).train_loss
    assert rep.to_losses[0] == direct
    assert rep.replication_rate == 0.0


def test_reverse_replicates_blowup():
    rep = reverse_transfer(TPL, HpPoint(master_lr=50.0), 256, 128, SMALL, seeds=[0, 1])
    assert all(rep.to_diverged) and rep.replication_rate == 1.0


def test_divergence_frontier_bisection():
    hp = HpPoint(master_lr=1e-2)
    f = divergence_frontier(TPL, hp, SMALL, 0, 1e-3, 100.0, iters=6)
    assert 1e-3 < f <= 100.0
    assert run_trial(TPL, hp.with_(master_lr=f), SMALL, 0).diverged
    with pytest.raises(ValueError):
        divergence_frontier(TPL, hp, SMALL, 0, 100.0, 200.0)


# ---------------------------------------------------------------------------
# primer


GRID = np.round(np.arange(0, 3.0001, 0.05), 10)


def test_primer_registry():
    with pytest.raises(HpError, match="unbounded"):
        primer_function("square")
    with pytest.raises(HpError):
        primer_function("cubic")
    with pytest.raises(HpError):
        primer_estimate(16, [0.1], "bump", 100, SeededRng(0))


def test_primer_constant_is_flat():
    assert primer_estimate(64, [0.3], "const", 10_000, SeededRng(0)) == 1.0
    assert np.all(primer_curve(64, GRID, "const", 10_000, 0) == 1.0)


def test_primer_estimate_sums_cs():
    a = primer_estimate(64, [0.1, 0.05], "bump", 20_000, SeededRng(4))
    b = primer_estimate(64, [0.15], "bump", 20_000, SeededRng(4))
    assert a == b


def test_primer_limit_quadrature():
    # E tanh(aZ - 1)^2 against a fine Riemann sum
    z = np.linspace(-12, 12, 400_001)
    dens = np.exp(-z * z / 2) / math.sqrt(2 * math.pi)
    for a in (0.0, 0.7, 2.0):
        ref = np.sum(np.tanh(a * z - 1) ** 2 * dens) * (z[1] - z[0])
        assert primer_limit_curve([a], "tanh_sq")[0] == pytest.approx(ref, abs=1e-6)


def test_primer_sq_trunc_stable():
    grid = np.round(np.arange(-1.5, 1.5001, 0.1), 10)
    assert primer_limit_argmin(grid, "sq_trunc") == pytest.approx(0.0, abs=1e-9)
    for n in (64, 256, 1024):
        assert abs(primer_argmin(n, grid, "sq_trunc", 50_000)) <= 0.1 + 1e-9


def test_primer_bump_converges():
    limit = primer_limit_argmin(GRID, "bump")
    for n in (256, 1024):
        assert abs(primer_argmin(n, GRID, "bump", 100_000) - limit) <= 0.05 + 1e-9


def test_primer_partial_reparametrization_drifts():
    grid = np.round(np.arange(-6, 6.0001, 0.1), 10)
    stars = [abs(primer_argmin(n, grid, "sq_trunc", 50_000, fixed_c=[0.1])) for n in (64, 256, 1024)]
    assert stars[0] < stars[1] < stars[2]
    assert stars[2] >= 1.5 * stars[0]


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 400))
def test_rademacher_sum_parity(n):
    # sums of n signs share n's parity and lie in [-n, n]
    from mupar.transfer import _rademacher_sums
    s = _rademacher_sums(n, 1000, SeededRng(0))
    assert np.all(np.abs(s) <= n) and np.all((s - n) % 2 == 0)
