"""SGD, Adam-family optimizers and LR schedules driven by per-parameter abc triples."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .parametrize import Optimizer

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


class OptimConfigError(ValueError):
    pass


@dataclass
class Schedule:
    kind: str = "constant"
    total_steps: int = 1
    milestones: tuple[int, ...] = ()
    factor: float = 0.1

    KINDS = ("constant", "linear_decay", "cosine", "inv_sqrt", "step")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise OptimConfigError(f"unknown schedule {self.kind!r}")
        if self.total_steps < 1:
            raise OptimConfigError("total_steps must be >= 1")
        self.milestones = tuple(sorted(int(m) for m in self.milestones))
        if self.milestones and self.milestones[0] < 1:
            raise OptimConfigError("step milestones must be >= 1 so the schedule starts at 1")


def schedule_value(schedule: Schedule, step: int) -> float:
    t, T = step, schedule.total_steps
    k = schedule.kind
    if k == "constant":
        return 1.0
    if k == "linear_decay":
        return max(0.0, 1.0 - t / T)
    if k == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * min(t, T) / T))
    if k == "inv_sqrt":
        return 1.0 / math.sqrt(1.0 + t)
    passed = sum(1 for m in schedule.milestones if m <= t)
    return schedule.factor ** passed


@dataclass
class SgdConfig:
    master_lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    kind = Optimizer.SGD

    def __post_init__(self):
        if not self.master_lr > 0:
            raise OptimConfigError("master_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise OptimConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise OptimConfigError("weight_decay must be nonnegative")


@dataclass
class AdamConfig:
    master_lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 0.0
    eps_placement: str = "post_sqrt"
    decoupled_weight_decay: float = 0.0
    weight_decay: float = 0.0
    variant: str = "adam"

    kind = Optimizer.ADAM

    def __post_init__(self):
        if not self.master_lr > 0:
            raise OptimConfigError("master_lr must be positive")
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise OptimConfigError("betas must lie in [0, 1)")
        if self.eps < 0 or self.decoupled_weight_decay < 0:
            raise OptimConfigError("eps and weight decay must be nonnegative")
        if self.eps_placement not in ("pre_sqrt", "post_sqrt"):
            raise OptimConfigError("eps_placement must be pre_sqrt or post_sqrt")
        if self.variant not in ("adam", "adagrad", "rmsprop"):
            raise OptimConfigError(f"unknown adaptive variant {self.variant!r}")
        if self.weight_decay != 0:
            raise OptimConfigError("coupled weight decay is not scale-correct with Adam; "
                                   "use decoupled_weight_decay (AdamW)")


def effective_eps(cfg: AdamConfig, fan_in_mult: float) -> float:
    if cfg.eps_placement == "pre_sqrt":
        return cfg.eps / fan_in_mult ** 2
    return cfg.eps / fan_in_mult


def _adam_fused_py(w, g, m, v, b1, b2, c1, c2, lr, eps, pre_sqrt, wd):
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * g * g
    second = v / c2
    denom = np.sqrt(second + eps) if pre_sqrt else np.sqrt(second) + eps
    upd = np.divide(m / c1, denom, out=np.zeros_like(m), where=denom > 0)
    new = w - lr * upd
    if wd:
        new -= wd * w
    w[...] = new
    return bool(np.isfinite(new.sum()))


if njit is not None:
    @njit(cache=True)
    def _adam_fused(w, g, m, v, b1, b2, c1, c2, lr, eps, pre_sqrt, wd):
        ok = True
        for i in range(w.size):
            gi = g[i]
            mi = b1 * m[i] + (1 - b1) * gi
            vi = b2 * v[i] + (1 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            vh = vi / c2
            d = np.sqrt(vh + eps) if pre_sqrt else np.sqrt(vh) + eps
            u = (mi / c1) / d if d > 0 else 0.0
            wi = w[i]
            nw = wi - lr * u
            if wd != 0.0:
                nw -= wd * wi
            w[i] = nw
            if not np.isfinite(nw):
                ok = False
        return ok
else:  # pragma: no cover
    _adam_fused = _adam_fused_py


def _check_finite(model) -> None:
    for p in model.parameters():
        if not np.isfinite(p.data.sum()):
            model.diverged = True
            return


def sgd_step(model, cfg: SgdConfig, schedule: Schedule, step: int) -> None:
    s = schedule_value(schedule, step)
    for p in model.parameters():
        g = p.grad
        if g is None:
            continue
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        if cfg.momentum:
            buf = p.state.get("momentum")
            if buf is None:
                buf = p.state["momentum"] = g.copy()
            else:
                buf *= cfg.momentum
                buf += g
            g = buf
        lr = cfg.master_lr * p.lr_scale(Optimizer.SGD) * s
        p.tensor.data = p.data - lr * g
    _check_finite(model)


def adam_step(model, cfg: AdamConfig, schedule: Schedule, step: int) -> None:
    """One update of Adam (or Adagrad / RMSProp); ``step`` counts from 0."""
    s = schedule_value(schedule, step)
    b1, b2 = cfg.beta1, cfg.beta2
    for p in model.parameters():
        g = p.grad
        if g is None:
            continue
        st = p.state
        n = st["t"] = st.get("t", 0) + 1
        eps = effective_eps(cfg, p.infshape.fan_in_mult())
        lr = cfg.master_lr * p.lr_scale(Optimizer.ADAM) * s
        if cfg.variant == "adam":
            if "m" not in st:
                st["m"] = np.zeros(p.data.size)
                st["v"] = np.zeros(p.data.size)
            w = np.ascontiguousarray(p.data)
            ok = _adam_fused(w.reshape(-1), np.ascontiguousarray(g).reshape(-1), st["m"], st["v"],
                             b1, b2, 1 - b1 ** n, 1 - b2 ** n, lr, eps,
                             cfg.eps_placement == "pre_sqrt", cfg.decoupled_weight_decay * s)
            p.tensor.data = w
            if not ok:
                model.diverged = True
            continue
        v = st.get("v")
        if cfg.variant == "adagrad":
            if v is None:
                v = st["v"] = g * g
            else:
                v += g * g
        else:
            if v is None:
                v = st["v"] = (1 - b2) * g * g
            else:
                v *= b2
                v += (1 - b2) * g * g
        if cfg.eps_placement == "pre_sqrt":
            denom = np.sqrt(v + eps)
        else:
            denom = np.sqrt(v) + eps
        upd = np.divide(g, denom, out=np.zeros_like(g), where=denom > 0)
        new = p.data - lr * upd
        if cfg.decoupled_weight_decay:
            new -= cfg.decoupled_weight_decay * s * p.data
        p.tensor.data = new
    _check_finite(model)


def optimizer_step(model, cfg: SgdConfig | AdamConfig, schedule: Schedule, step: int) -> None:
    if isinstance(cfg, AdamConfig):
        adam_step(model, cfg, schedule, step)
    else:
        sgd_step(model, cfg, schedule, step)


def clip_gradients(model, max_norm: float) -> float:
    """Rescale all gradients so their global norm is at most ``max_norm``; returns the factor used."""
    if not max_norm > 0:
        raise OptimConfigError("max_norm must be positive")
    sq = sum(float(np.vdot(p.grad, p.grad)) for p in model.parameters() if p.grad is not None)
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for p in model.parameters():
        if p.grad is not None:
            p.tensor.grad = p.grad * factor
    return factor


@dataclass
class Trainer:
    """Glue for the usual zero-grad / forward / backward / update cycle."""

    model: object
    opt: SgdConfig | AdamConfig
    schedule: Schedule = field(default_factory=Schedule)
    clip: float | None = None
    step: int = 0

    def train_step(self, batch) -> float:
        m = self.model
        m.zero_grad()
        # overflow is expected on divergent runs; it is caught by the finiteness checks instead
        with np.errstate(over="ignore", invalid="ignore"):
            loss, _ = m.forward(batch)
            value = float(loss.data)
            if not math.isfinite(value):
                m.diverged = True
                return value
            loss.backward()
            if self.clip:
                clip_gradients(m, self.clip)
            optimizer_step(m, self.opt, self.schedule, self.step)
        self.step += 1
        return value
