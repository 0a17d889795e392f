"""Hyperparameter sweeps, best-point selection and zero-shot transfer across model scale."""

from __future__ import annotations

import functools
import itertools
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .data import CharCorpus, MarkovLM, TeacherTask
from .models import Batch, MlpConfig, TransformerConfig, build_mlp, build_transformer
from .numcore import SeededRng
from .optim import AdamConfig, Schedule, SgdConfig, Trainer
from .parametrize import parse_scheme

DIVERGED = math.inf
DIVERGENCE_FACTOR = 10.0

TRANSFERABLE = frozenset({
    "master_lr", "lr_input", "lr_hidden", "lr_output", "lr_bias", "lr_ln",
    "init_std", "output_init_std", "emb_init_std",
    "alpha_output", "alpha_attn", "alpha_emb",
    "schedule", "momentum", "beta1", "beta2",
})
NOT_TRANSFERABLE = frozenset({"dropout", "weight_decay", "decoupled_weight_decay"})


class NoViableHp(RuntimeError):
    pass


class HpError(ValueError):
    pass


class HpPoint:
    """Immutable map of width-independent hyperparameters."""

    __slots__ = ("_items",)

    def __init__(self, values: dict | None = None, **kw):
        vals = dict(values or {}, **kw)
        for k, v in vals.items():
            if k in NOT_TRANSFERABLE:
                raise HpError(f"{k} is a regularization HP and is not transferred across width")
            if k not in TRANSFERABLE:
                raise HpError(f"unknown hyperparameter {k!r}")
            if k == "schedule":
                if not isinstance(v, str):
                    raise HpError("schedule must be a schedule name")
            elif not isinstance(v, (int, float)) or not math.isfinite(v):
                raise HpError(f"{k} must be a finite number")
        object.__setattr__(self, "_items", tuple(sorted(
            (k, v if k == "schedule" else float(v)) for k, v in vals.items())))

    def __setattr__(self, key, value):
        raise AttributeError("HpPoint is immutable")

    def get(self, key: str, default=None):
        return dict(self._items).get(key, default)

    def __getitem__(self, key: str):
        return dict(self._items)[key]

    def __contains__(self, key: str) -> bool:
        return key in dict(self._items)

    def as_dict(self) -> dict:
        return dict(self._items)

    def key(self) -> tuple:
        return self._items

    def with_(self, **kw) -> "HpPoint":
        return HpPoint(self.as_dict(), **kw)

    def __eq__(self, other) -> bool:
        return isinstance(other, HpPoint) and self._items == other._items

    def __hash__(self) -> int:
        return hash(self._items)

    def __repr__(self) -> str:
        return "HpPoint(" + ", ".join(f"{k}={v!r}" for k, v in self._items) + ")"

    def __getstate__(self):
        return self._items

    def __setstate__(self, state):
        object.__setattr__(self, "_items", state)


@dataclass(frozen=True)
class ScalePoint:
    width_mult: float = 1.0
    depth: int = 2
    batch: int = 32
    seq_len: int = 32
    steps: int = 100

    def __post_init__(self):
        for name in ("width_mult", "depth", "batch", "seq_len", "steps"):
            if not getattr(self, name) >= 1:
                raise HpError(f"scale field {name} must be >= 1")


@dataclass
class SweepRecord:
    hp: HpPoint
    scale: ScalePoint
    seed: int
    train_loss: float
    val_loss: float
    diverged: bool
    curve: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    checkpoints: dict[int, float] = field(default_factory=dict)
    width: int = 0

    def loss(self, metric: str = "train_loss", step: int | None = None) -> float:
        if self.diverged:
            return DIVERGED
        if step is not None:
            return self.checkpoints[step]
        return getattr(self, metric)


def window_mean(curve: Sequence[float], upto: int) -> float:
    """Training loss at step ``upto``: mean of the last min(50, max(1, upto // 10)) minibatch losses."""
    w = min(50, max(1, upto // 10))
    return float(np.mean(curve[upto - w:upto]))


# ---------------------------------------------------------------------------
# model templates


@functools.lru_cache(maxsize=8)
def _task(name: str, frozen_kwargs: tuple):
    kw = dict(frozen_kwargs)
    if name == "teacher":
        return TeacherTask(**kw)
    if name == "markov":
        return MarkovLM(**kw)
    if name == "char":
        return CharCorpus(kw["path"])
    raise HpError(f"unknown task {name!r}")


@dataclass(frozen=True)
class ModelTemplate:
    """Everything except width-independent HPs and the scale point needed to build a trial.

    ``base_width`` is both the base shape and the width at ``width_mult = 1``;
    ``sim_base`` overrides the base shape only, which simulates a model of that width.
    """

    kind: str = "mlp"
    scheme: str = "mup-t3"
    optimizer: str = "adam"
    base_width: int = 64
    sim_base: int | None = None
    task: str = "teacher"
    task_kwargs: tuple = ()
    model_kwargs: tuple = ()
    ffn_ratio: float = 4.0
    clip: float | None = None

    def __post_init__(self):
        parse_scheme(self.scheme)
        if self.kind not in ("mlp", "transformer"):
            raise HpError(f"unknown model kind {self.kind!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise HpError(f"unknown optimizer {self.optimizer!r}")

    def with_(self, **kw) -> "ModelTemplate":
        return replace(self, **kw)

    def data(self):
        return _task(self.task, tuple(self.task_kwargs))

    def width(self, scale: ScalePoint) -> int:
        return max(1, int(round(self.base_width * scale.width_mult)))

    def model_config(self, hp: HpPoint, scale: ScalePoint):
        width = self.width(scale)
        base = self.sim_base or self.base_width
        kw = dict(self.model_kwargs)
        lr_mults = {g: hp[f"lr_{g}"] for g in ("input", "hidden", "output", "bias", "ln") if f"lr_{g}" in hp}
        for k in ("init_std", "output_init_std", "alpha_output"):
            if k in hp:
                kw[k] = hp[k]
        if self.kind == "mlp":
            task = self.data()
            return MlpConfig(d_in=task.d_in, d_out=task.n_classes, width=width, base_width=base,
                             depth=scale.depth, scheme=self.scheme, lr_mults=lr_mults, **kw)
        for k in ("emb_init_std", "alpha_attn", "alpha_emb"):
            if k in hp:
                kw[k] = hp[k]
        n_head = kw.pop("n_head", 4)
        return TransformerConfig(
            d_model=width, d_model_base=base, vocab=self.data().vocab,
            context=max(scale.seq_len, kw.pop("context", scale.seq_len)), depth=scale.depth,
            n_head=n_head, d_ffn=max(1, round(self.ffn_ratio * width)),
            d_ffn_base=max(1, round(self.ffn_ratio * base)), scheme=self.scheme,
            lr_mults=lr_mults, **kw)

    def optimizer_config(self, hp: HpPoint):
        lr = hp["master_lr"]
        if self.optimizer == "adam":
            return AdamConfig(lr, beta1=hp.get("beta1", 0.9), beta2=hp.get("beta2", 0.999))
        return SgdConfig(lr, momentum=hp.get("momentum", 0.0))

    def build(self, hp: HpPoint, scale: ScalePoint, seed: int):
        cfg = self.model_config(hp, scale)
        rng = SeededRng(seed, 0)
        model = build_mlp(cfg, rng) if self.kind == "mlp" else build_transformer(cfg, rng)
        return model

    def batches(self, scale: ScalePoint, seed: int):
        task = self.data()
        if self.kind == "mlp":
            return task.batches(scale.batch, scale.steps, seed)
        return task.batches(scale.batch, scale.seq_len, scale.steps, seed)

    def val_batch(self, scale: ScalePoint) -> Batch:
        task = self.data()
        return task.val_batch() if self.kind == "mlp" else task.val_batch(scale.seq_len)


def run_trial(template: ModelTemplate, hp: HpPoint, scale: ScalePoint, seed: int,
              checkpoints: Iterable[int] = (), return_model: bool = False):
    """Train one model; the run halts once the loss is non-finite or exceeds 10x its initial value."""
    model = template.build(hp, scale, seed)
    trainer = Trainer(model, template.optimizer_config(hp),
                      Schedule(hp.get("schedule", "constant"), scale.steps), clip=template.clip)
    curve = np.full(scale.steps, np.nan)
    diverged = False
    first = None
    for t, batch in enumerate(template.batches(scale, seed)):
        loss = trainer.train_step(batch)
        curve[t] = loss
        if first is None:
            first = loss
        if model.diverged or not math.isfinite(loss) or loss > DIVERGENCE_FACTOR * first:
            diverged = True
            break
    marks = sorted(set(int(c) for c in checkpoints if 0 < c <= scale.steps) | {scale.steps})
    if diverged:
        train, val = DIVERGED, DIVERGED
        ck = {c: DIVERGED for c in marks}
    else:
        train = window_mean(curve, scale.steps)
        ck = {c: window_mean(curve, c) for c in marks}
        with np.errstate(over="ignore", invalid="ignore"):
            v, _ = model.forward(template.val_batch(scale))
        val = float(v.data) if math.isfinite(float(v.data)) else DIVERGED
    rec = SweepRecord(hp, scale, seed, train, val, diverged, curve, ck, template.width(scale))
    return (rec, model) if return_model else rec


def _run_job(job):
    template, hp, scale, seed, checkpoints = job
    return run_trial(template, hp, scale, seed, checkpoints)


def default_workers() -> int:
    env = os.environ.get("MUPAR_WORKERS")
    if env:
        return max(1, int(env))
    return 1


# ---------------------------------------------------------------------------
# search spaces


@dataclass(frozen=True)
class Grid:
    axes: tuple  # ((name, (v1, v2, ...)), ...)

    @classmethod
    def of(cls, **axes) -> "Grid":
        return cls(tuple((k, tuple(v)) for k, v in axes.items()))

    def points(self) -> list[HpPoint]:
        names = [k for k, _ in self.axes]
        return [HpPoint(dict(zip(names, combo))) for combo in itertools.product(*(v for _, v in self.axes))]


@dataclass(frozen=True)
class RandomSearch:
    """``k`` draws; each axis is a list of choices or a (low, high, 'log'|'linear') range."""

    axes: tuple
    k: int
    seed: int = 0

    def points(self) -> list[HpPoint]:
        rng = SeededRng(self.seed, 23)
        out = []
        for _ in range(self.k):
            vals = {}
            for name, spec in self.axes:
                if isinstance(spec, tuple) and len(spec) == 3 and spec[2] in ("log", "linear"):
                    lo, hi, how = spec
                    u = float(rng.uniform())
                    vals[name] = math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo))) if how == "log" \
                        else lo + u * (hi - lo)
                else:
                    vals[name] = spec[int(rng.integers(0, len(spec)))]
            out.append(HpPoint(vals))
        return out


def lr_grid(lo_exp: int, hi_exp: int, base: float = 2.0) -> list[float]:
    return [base ** e for e in range(lo_exp, hi_exp + 1)]


def sweep(search, scale: ScalePoint | Sequence[ScalePoint], template: ModelTemplate,
          seeds: Sequence[int], workers: int | None = None,
          checkpoints: Iterable[int] = ()) -> list[SweepRecord]:
    """One record per (HP point, scale, seed); records come back in a fixed order."""
    points = search.points() if hasattr(search, "points") else list(search)
    if not points:
        raise HpError("empty search space")
    scales = [scale] if isinstance(scale, ScalePoint) else list(scale)
    cps = tuple(checkpoints)
    jobs = [(template, hp, sc, seed, cps) for sc in scales for hp in points for seed in seeds]
    workers = workers or default_workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    keyed = {(si, pi, seed): r for (si, pi, seed), r in zip(
        ((si, pi, seed) for si in range(len(scales)) for pi in range(len(points)) for seed in seeds), results)}
    return [keyed[k] for k in sorted(keyed)]


# ---------------------------------------------------------------------------
# selection


def aggregate(records: Iterable[SweepRecord], metric: str = "train_loss",
              step: int | None = None) -> dict[HpPoint, tuple[float, int]]:
    """Mean loss per HP point over seeds (``inf`` when any seed diverged) and the seed count."""
    groups: dict[HpPoint, list[float]] = {}
    for r in records:
        groups.setdefault(r.hp, []).append(r.loss(metric, step))
    out = {}
    for hp, vals in groups.items():
        out[hp] = (DIVERGED if any(not math.isfinite(v) for v in vals) else float(np.mean(vals)), len(vals))
    return out


def _order_key(hp: HpPoint):
    return (hp.get("master_lr", 0.0), hp.key())


def select_best(records: Iterable[SweepRecord], metric: str = "train_loss", step: int | None = None) -> HpPoint:
    if metric not in ("train_loss", "val_loss"):
        raise HpError(f"unknown metric {metric!r}")
    agg = aggregate(records, metric, step)
    viable = [(loss, _order_key(hp), hp) for hp, (loss, _) in agg.items() if math.isfinite(loss)]
    if not viable:
        raise NoViableHp("no viable HP: every candidate diverged")
    viable.sort(key=lambda t: (t[0], t[1]))
    return viable[0][2]


def best_loss(records: Iterable[SweepRecord], metric: str = "train_loss", step: int | None = None) -> float:
    agg = aggregate(records, metric, step)
    return min((v for v, _ in agg.values()), default=DIVERGED)


# ---------------------------------------------------------------------------
# transfer


@dataclass
class TransferReport:
    mode: str
    target_width: int
    hp: HpPoint
    target_loss: float
    target_losses: list[float]
    target_diverged: bool
    oracle_hp: HpPoint | None = None
    oracle_loss: float | None = None
    relative_gap: float | None = None
    naive_hp: HpPoint | None = None
    naive_loss: float | None = None
    naive_diverged: bool | None = None
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items()}
        for k in ("hp", "oracle_hp", "naive_hp"):
            d[k] = d[k].as_dict() if d[k] is not None else None
        return d


def mu_transfer(proxy_best: HpPoint, target: ScalePoint, template: ModelTemplate,
                seeds: Sequence[int] = (0,), oracle: Sequence[SweepRecord] | None = None,
                oracle_search=None, naive: tuple[ModelTemplate, HpPoint] | None = None,
                metric: str = "train_loss", workers: int | None = None):
    """Train the target with the proxy's HPs copied verbatim; returns (model of the first seed, report)."""
    notes = []
    mode = "mup"
    if not parse_scheme(template.scheme).is_mup:
        mode = "naive"
        msg = f"naive transfer: scheme {template.scheme} does not keep HPs width-independent"
        warnings.warn(msg)
        notes.append(msg)
    runs = [run_trial(template, proxy_best, target, s, return_model=True) for s in seeds]
    losses = [r.loss(metric) for r, _ in runs]
    diverged = any(r.diverged for r, _ in runs)
    report = TransferReport(mode, template.width(target), proxy_best,
                            DIVERGED if diverged else float(np.mean(losses)), losses, diverged, warnings=notes)
    if oracle is None and oracle_search is not None:
        oracle = sweep(oracle_search, target, template, seeds, workers)
    if oracle:
        try:
            report.oracle_hp = select_best(oracle, metric)
            report.oracle_loss = aggregate(oracle, metric)[report.oracle_hp][0]
            report.relative_gap = report.target_loss / report.oracle_loss - 1.0
        except NoViableHp:
            notes.append("oracle grid had no viable point")
    if naive is not None:
        sp_template, sp_hp = naive
        recs = [run_trial(sp_template, sp_hp, target, s) for s in seeds]
        report.naive_hp = sp_hp
        report.naive_diverged = any(r.diverged for r in recs)
        report.naive_loss = DIVERGED if report.naive_diverged else float(np.mean([r.loss(metric) for r in recs]))
    return runs[0][1], report


@dataclass
class WidthScanReport:
    widths: list[int]
    steps: list[int]
    mean_loss: dict[int, list[float]]  # step -> loss per width
    violations: dict[int, int]
    band: float

    @property
    def monotone(self) -> bool:
        return all(v == 0 for v in self.violations.values())

    def as_dict(self) -> dict:
        return {"widths": self.widths, "steps": self.steps, "band": self.band, "monotone": self.monotone,
                "mean_loss": {str(k): v for k, v in self.mean_loss.items()},
                "violations": {str(k): v for k, v in self.violations.items()}}


def count_violations(losses: Sequence[float], band: float) -> int:
    """Adjacent pairs where the wider model is worse by more than ``band`` (relative)."""
    return sum(1 for a, b in zip(losses, losses[1:]) if not b <= a * (1.0 + band))


def wider_is_better_scan(template: ModelTemplate, hp: HpPoint, width_mults: Sequence[float],
                         scale: ScalePoint, seeds: Sequence[int], checkpoints: Iterable[int] = (),
                         band: float = 0.02, workers: int | None = None,
                         records: list[SweepRecord] | None = None) -> WidthScanReport:
    scales = [replace(scale, width_mult=m) for m in width_mults]
    recs = records if records is not None else sweep([hp], scales, template, seeds, workers, checkpoints)
    steps = sorted(set(int(c) for c in checkpoints if 0 < c <= scale.steps) | {scale.steps})
    widths = [template.width(s) for s in scales]
    mean_loss = {}
    for st in steps:
        row = []
        for sc in scales:
            vals = [r.loss("train_loss", st) for r in recs if r.scale == sc]
            row.append(float(np.mean(vals)))
        mean_loss[st] = row
    return WidthScanReport(widths, steps, mean_loss,
                           {st: count_violations(v, band) for st, v in mean_loss.items()}, band)


@dataclass
class ReverseReport:
    actual_width: int
    from_sim_width: int
    to_sim_width: int
    from_diverged: list[bool]
    to_diverged: list[bool]
    from_losses: list[float]
    to_losses: list[float]
    reference_loss: float | None
    replicated: list[bool]

    @property
    def replication_rate(self) -> float:
        return float(np.mean(self.replicated)) if self.replicated else 0.0

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["replication_rate"] = self.replication_rate
        return d


def simulated(template: ModelTemplate, sim_width: int, actual_width: int) -> ModelTemplate:
    """Template whose models have ``actual_width`` but the per-layer scalings of width ``sim_width`` in SP."""
    if parse_scheme(template.scheme).is_mup is False:
        raise HpError("simulated width needs a muP template")
    return template.with_(base_width=actual_width, sim_base=sim_width)


def reverse_transfer(template: ModelTemplate, bad_hp: HpPoint, from_sim_width: int, to_sim_width: int,
                     scale: ScalePoint, seeds: Sequence[int], reference_loss: float | None = None,
                     blowup_factor: float = 2.0) -> ReverseReport:
    """Replay an HP at two simulated widths on a model of width ``template.base_width``.

    A seed replicates the instability when it diverges at ``to_sim_width`` or ends with a loss of
    at least ``blowup_factor`` times ``reference_loss``.
    """
    actual = template.base_width
    unit = replace(scale, width_mult=1.0)
    src = simulated(template, from_sim_width, actual)
    dst = simulated(template, to_sim_width, actual)
    a = [run_trial(src, bad_hp, unit, s) for s in seeds]
    b = a if to_sim_width == from_sim_width else [run_trial(dst, bad_hp, unit, s) for s in seeds]
    rep = []
    for r in b:
        bad = r.diverged
        if not bad and reference_loss is not None:
            bad = r.train_loss >= blowup_factor * reference_loss
        rep.append(bad)
    return ReverseReport(actual, from_sim_width, to_sim_width, [r.diverged for r in a], [r.diverged for r in b],
                         [r.train_loss for r in a], [r.train_loss for r in b], reference_loss, rep)


def divergence_frontier(template: ModelTemplate, hp: HpPoint, scale: ScalePoint, seed: int,
                        lo: float, hi: float, iters: int = 8) -> float:
    """Bisect (in log LR) the smallest master LR that diverges; ``lo`` must be stable and ``hi`` divergent."""
    def bad(lr):
        return run_trial(template, hp.with_(master_lr=lr), scale, seed).diverged

    if bad(lo) or not bad(hi):
        raise ValueError("bracket does not straddle the divergence frontier")
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if bad(mid):
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# the one-dimensional toy problem


def _sq_trunc(x):
    return np.minimum((x - 2.0) ** 2, 10.0)


def _bump(x):
    return -np.exp(-0.5 * (x * x - 1.0) ** 2)


def _const(x):
    return np.full_like(np.asarray(x, dtype=float), 1.0)


PRIMER_FUNCTIONS = {
    "sq_trunc": _sq_trunc,
    "bump": _bump,
    "tanh_sq": lambda x: np.tanh(x - 1.0) ** 2,
    "const": _const,
}
UNBOUNDED = frozenset({"square", "identity", "exp"})


def primer_function(f_id: str):
    if f_id in UNBOUNDED:
        raise HpError(f"{f_id!r} is unbounded; the toy problem needs a bounded continuous f")
    try:
        return PRIMER_FUNCTIONS[f_id]
    except KeyError:
        raise HpError(f"unknown primer function {f_id!r}") from None


def _rademacher_sums(n: int, samples: int, rng: SeededRng) -> np.ndarray:
    # the sum of n independent +-1 signs is 2 * Binomial(n, 1/2) - n
    return 2.0 * rng.generator.binomial(n, 0.5, size=samples) - n


def primer_estimate(n: int, c_vec: Sequence[float], f_id: str, samples: int, rng: SeededRng) -> float:
    """Monte-Carlo value of E f((c1 + ... + ck) * (x1 + ... + xn)) with Rademacher x."""
    if samples < 10_000:
        raise HpError("need at least 10^4 samples")
    f = primer_function(f_id)
    return float(np.mean(f(sum(c_vec) * _rademacher_sums(n, samples, rng))))


def primer_curve(n: int, alpha_grid: Sequence[float], f_id: str, samples: int, seed: int,
                 fixed_c: Sequence[float] = ()) -> np.ndarray:
    """G_n over the grid, with c1 = alpha / sqrt(n) and any remaining c's held fixed.

    The same samples are reused at every grid point so the curve is smooth in alpha.
    """
    if samples < 10_000:
        raise HpError("need at least 10^4 samples")
    f = primer_function(f_id)
    s = _rademacher_sums(n, samples, SeededRng(seed, n))
    rest = float(sum(fixed_c))
    return np.array([np.mean(f((a / math.sqrt(n) + rest) * s)) for a in alpha_grid])


def primer_argmin(n: int, alpha_grid: Sequence[float], f_id: str = "sq_trunc", samples: int = 200_000,
                  seed: int = 0, fixed_c: Sequence[float] = ()) -> float:
    curve = primer_curve(n, alpha_grid, f_id, samples, seed, fixed_c)
    return float(np.asarray(alpha_grid)[int(np.argmin(curve))])


def primer_limit_curve(alpha_grid: Sequence[float], f_id: str, order: int = 120) -> np.ndarray:
    """E f(N(0, alpha^2)) by Gauss-Hermite quadrature."""
    f = primer_function(f_id)
    z, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    return np.array([float(np.dot(w, f(a * z))) for a in alpha_grid])


def primer_limit_argmin(alpha_grid: Sequence[float], f_id: str = "sq_trunc") -> float:
    return float(np.asarray(alpha_grid)[int(np.argmin(primer_limit_curve(alpha_grid, f_id)))])
