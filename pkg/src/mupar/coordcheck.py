"""Coordinate checking: how activation sizes and their updates scale with width."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .models import Batch, Model
from .numcore import SeededRng
from .optim import AdamConfig, Schedule, SgdConfig, Trainer


@dataclass(frozen=True)
class CoordStat:
    activation: str
    width: int
    step: int
    seed: int
    delta_std: float
    mean_abs: float
    diverged: bool = False


@dataclass
class SlopeFit:
    slope: float | None
    intercept: float | None
    residual: float | None
    n_points: int


@dataclass
class CoordCheckReport:
    widths: list[int]
    steps: int
    stats: list[CoordStat]
    delta_fits: dict[tuple[str, int], SlopeFit]
    abs_fits: dict[tuple[str, int], SlopeFit]
    diverged_widths: list[int] = field(default_factory=list)

    @property
    def activations(self) -> list[str]:
        return sorted({s.activation for s in self.stats})

    def slope(self, activation: str, step: int) -> float | None:
        return self.delta_fits[(activation, step)].slope

    def mean_table(self, metric: str = "delta_std") -> dict[tuple[str, int, int], float]:
        """Seed-averaged metric keyed by (activation, width, step), excluding diverged cells."""
        acc: dict[tuple[str, int, int], list[float]] = {}
        for s in self.stats:
            if not s.diverged:
                acc.setdefault((s.activation, s.width, s.step), []).append(getattr(s, metric))
        return {k: float(np.mean(v)) for k, v in acc.items()}


def fit_slope(points: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """Least-squares line through (log width, log metric); returns slope, intercept, RMS residual."""
    if len(points) < 2:
        raise ValueError("need at least two points")
    x = np.log([p[0] for p in points])
    y = np.log([p[1] for p in points])
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    return float(slope), float(intercept), float(np.sqrt(np.mean(resid ** 2)))


def _fit(table: dict, activation: str, step: int, widths: Sequence[int]) -> SlopeFit:
    pts = [(w, table[(activation, w, step)]) for w in widths
           if (activation, w, step) in table and table[(activation, w, step)] > 0]
    if len(pts) < 3:
        return SlopeFit(None, None, None, len(pts))
    return SlopeFit(*fit_slope(pts), len(pts))


def _stats_for(model: Model, probe: Batch, train: Sequence[Batch], opt, schedule: Schedule,
               width: int, seed: int) -> list[CoordStat]:
    trainer = Trainer(model, opt, schedule)
    out: list[CoordStat] = []
    x0: dict[str, np.ndarray] = {}
    for t in range(len(train) + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            _, acts = model.forward(probe, capture=True)
        bad = model.diverged or any(not np.all(np.isfinite(a)) for a in acts.values())
        if t == 0:
            x0 = {k: v.copy() for k, v in acts.items()}
        for name, a in acts.items():
            d = 0.0 if t == 0 else float(np.std(a - x0[name]))
            out.append(CoordStat(name, width, t, seed, d, float(np.mean(np.abs(a))), bad))
        if bad or t == len(train):
            if bad:
                # the remaining steps are recorded as diverged so the width drops out of every fit
                for s in range(t + 1, len(train) + 1):
                    out.extend(CoordStat(n, width, s, seed, math.nan, math.nan, True) for n in acts)
            break
        trainer.train_step(train[t])
    return out


def run_coord_check(model_family: Callable[[int, int], Model], widths: Sequence[int], steps: int,
                    batches: Sequence[Batch] | Callable[[int], Sequence[Batch]],
                    opt: SgdConfig | AdamConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                    schedule: Schedule | None = None, probe: Batch | None = None) -> CoordCheckReport:
    """Train each (width, seed) copy for ``steps`` updates, recording activations on a fixed probe batch.

    ``batches`` is either one list used for every seed or a function of the seed; the
    first batch doubles as the probe unless one is given. Data order never depends on width.
    """
    widths = sorted(set(int(w) for w in widths))
    if len(widths) < 3 or widths[-1] < 8 * widths[0]:
        raise ValueError("need at least 3 widths spanning an 8x range")
    if steps < 1:
        raise ValueError("need at least one step")
    schedule = schedule or Schedule("constant", max(1, steps))
    stats: list[CoordStat] = []
    for seed in seeds:
        data = list(batches(seed) if callable(batches) else batches)
        if len(data) < steps:
            raise ValueError(f"{steps} steps need {steps} batches, got {len(data)}")
        pb = probe or data[0]
        for w in widths:
            stats.extend(_stats_for(model_family(w, seed), pb, data[:steps], opt, schedule, w, seed))
    return assemble_report(stats, widths, steps)


def assemble_report(stats: list[CoordStat], widths: Sequence[int], steps: int) -> CoordCheckReport:
    stats = sorted(stats, key=lambda s: (s.activation, s.width, s.step, s.seed))
    widths = sorted(widths)
    bad = sorted({s.width for s in stats if s.diverged})
    rep = CoordCheckReport(widths, steps, stats, {}, {}, bad)
    dt, at = rep.mean_table("delta_std"), rep.mean_table("mean_abs")
    for name in rep.activations:
        for t in range(steps + 1):
            if t > 0:
                rep.delta_fits[(name, t)] = _fit(dt, name, t, widths)
            rep.abs_fits[(name, t)] = _fit(at, name, t, widths)
    return rep


@dataclass
class Verdict:
    passed: bool
    labels: dict[str, str]
    worst: dict[str, float]

    @property
    def overall(self) -> str:
        return "pass" if self.passed else "fail"


def classify_slopes(slopes: Sequence[float], tol: float) -> str:
    if any(s > tol for s in slopes):
        return "blowup"
    if any(s < -tol for s in slopes):
        return "vanish"
    return "stable"


def verdict(report: CoordCheckReport, tol: float = 0.2, check_init: bool = False) -> Verdict:
    """Label every activation by the slopes of its update sizes; optionally also its size at init."""
    labels, worst = {}, {}
    for name in report.activations:
        slopes = [f.slope for (a, t), f in report.delta_fits.items() if a == name and f.slope is not None]
        if check_init:
            f0 = report.abs_fits.get((name, 0))
            if f0 is not None and f0.slope is not None:
                slopes.append(f0.slope)
        labels[name] = classify_slopes(slopes, tol)
        worst[name] = max(slopes, key=abs) if slopes else 0.0
    return Verdict(all(v == "stable" for v in labels.values()), labels, worst)


# ---------------------------------------------------------------------------
# entry size of A v for structured A


ENTRY_KINDS = ("gaussian", "tensor_product", "nonlinear_tensor_product", "vector")


@dataclass
class LawCheck:
    kind: str
    correlated: bool
    n_list: list[int]
    sizes: list[float]
    slope: float
    expected: float


def expected_slope(kind: str, correlated: bool) -> float:
    if kind == "gaussian":
        return 0.5
    return 1.0 if correlated else 0.5


def _entry_rms(kind: str, n: int, correlated: bool, rng: SeededRng, rows: int) -> float:
    """RMS of sampled coordinates of A v for one draw; A has Theta(1) entries."""
    g = rng.generator
    if kind == "gaussian":
        if correlated:
            A = g.standard_normal((n, n))
            x = A.T @ np.ones(n) / math.sqrt(n)
            Ax = A[:rows] @ x
        else:
            Ax = g.standard_normal((rows, n)) @ g.standard_normal(n)
    elif kind == "tensor_product":
        u = g.choice([-1.0, 1.0], size=(rows, 2))
        v = g.choice([-1.0, 1.0], size=(2, n))
        x = v[0] if correlated else g.choice([-1.0, 1.0], size=n)
        Ax = u @ (v @ x)
    elif kind == "nonlinear_tensor_product":
        u = g.standard_normal((rows, 2))
        v = g.standard_normal((2, n))
        A = np.sign(u[:, :1] * v[:1] + u[:, 1:] * v[1:])
        x = np.sign(v[0]) if correlated else g.standard_normal(n)
        Ax = A @ x
    elif kind == "vector":
        a = g.standard_normal(n)
        x = a if correlated else g.standard_normal(n)
        Ax = np.array([a @ x])
    else:
        raise ValueError(f"unknown kind {kind!r}; expected one of {ENTRY_KINDS}")
    return float(np.mean(Ax ** 2))


def entry_size_law_check(kind: str, n_list: Sequence[int], correlated: bool, rng: SeededRng,
                         reps: int = 100, rows: int = 16) -> LawCheck:
    """Measure the coordinate size of A v against n and fit its log-log slope.

    Only ``rows`` coordinates of A v are drawn per repetition; rows are exchangeable so this
    estimates the same size at a fraction of the cost.
    """
    sizes = []
    for i, n in enumerate(n_list):
        r = rng.spawn(rng.stream * 7919 + i + 1)
        ms = [_entry_rms(kind, int(n), correlated, r, rows) for _ in range(reps)]
        sizes.append(math.sqrt(float(np.mean(ms))))
    slope, _, _ = fit_slope(list(zip(n_list, sizes)))
    return LawCheck(kind, correlated, list(n_list), sizes, slope, expected_slope(kind, correlated))


def correlated_gaussian_coords(n: int, rng: SeededRng) -> np.ndarray:
    """Coordinates of A A^T 1 for A with N(0, 1/n) entries; each is roughly N(1, 1)."""
    A = rng.normal((n, n)) / math.sqrt(n)
    return A @ (A.T @ np.ones(n))
