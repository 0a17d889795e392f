"""MLPs and small Transformers whose every parameter carries an InfShape, a role and abc triples."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import numcore as nc
from .numcore import SeededRng, Tensor
from .parametrize import (
    AbcTriple,
    Expr,
    InfShape,
    Optimizer,
    ParamRole,
    Scheme,
    assign_role,
    finite,
    infinite,
    parse_scheme,
    rescale_theta,
    scheme_lookup,
)


class ConfigError(ValueError):
    pass


class BuildError(RuntimeError):
    pass


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray


class ParamTensor:
    """A parameter plus everything needed to initialize and update it under a parametrization."""

    def __init__(self, name: str, shape: InfShape, abc: dict[Optimizer, AbcTriple], *,
                 role: ParamRole | None = None, group: str | None = None,
                 init_mean: float = 0.0, init_var: float = 1.0):
        self.name = name
        self.infshape = shape
        self.role = role if role is not None else assign_role(shape)
        if self.role is not assign_role(shape):
            raise BuildError(f"{name}: role {self.role.value} does not match its shape {shape.shape}")
        self.abc = dict(abc)
        self.group = group or self.role.value
        self.init_mean = init_mean
        self.init_var = init_var
        self.tensor = Tensor(np.zeros(shape.shape), requires_grad=True, name=name)
        self.state: dict[str, np.ndarray | float] = {}

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, role={self.role.value}, shape={self.infshape.shape})"

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def multiplier(self) -> float:
        return self.abc[Optimizer.SGD].mult.at(self.infshape)

    def init_scale(self) -> float:
        return self.abc[Optimizer.SGD].init_var.at(self.infshape)

    def lr_scale(self, optimizer: Optimizer | str) -> float:
        return self.abc[Optimizer(optimizer)].lr.at(self.infshape)

    def initialize(self, rng: SeededRng) -> None:
        s = self.init_scale()
        t = nc.gaussian_init(self.infshape.shape, self.init_mean * math.sqrt(s), self.init_var * s,
                             rng.spawn(nc.stream_id(self.name)))
        self.tensor.data = t.data
        self.tensor.grad = None
        self.state.clear()

    def rescale(self, theta: Expr) -> None:
        self.abc = {opt: rescale_theta(t, theta, opt) for opt, t in self.abc.items()}


def _lookup(role: ParamRole, scheme: Scheme, mult_const: float = 1.0, lr_const: float = 1.0
            ) -> dict[Optimizer, AbcTriple]:
    return {opt: scheme_lookup(role, scheme, opt).with_constants(mult=mult_const, lr=lr_const)
            for opt in Optimizer}


class Model:
    kind = "model"

    def __init__(self, scheme: Scheme):
        self.scheme = scheme
        self.params: dict[str, ParamTensor] = {}
        self.diverged = False

    def add(self, p: ParamTensor) -> ParamTensor:
        if p.name in self.params:
            raise BuildError(f"duplicate parameter {p.name}")
        self.params[p.name] = p
        return p

    def parameters(self) -> Iterator[ParamTensor]:
        return iter(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def initialize(self, rng: SeededRng) -> None:
        for p in self.params.values():
            p.initialize(rng)
        self.diverged = False

    def rescale(self, thetas: dict[str, Expr]) -> None:
        """Apply per-tensor theta rescalings; call :meth:`initialize` afterwards to redraw."""
        for name, theta in thetas.items():
            self.params[name].rescale(theta)

    def check_roles(self) -> None:
        for p in self.params.values():
            if not isinstance(p.role, ParamRole) or not p.abc:
                raise BuildError(f"parameter {p.name} is unclassified")

    def forward(self, batch: Batch, capture: bool = False) -> tuple[Tensor, dict[str, np.ndarray]]:
        raise NotImplementedError


def forward_loss(model: Model, batch: Batch, capture: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value plus captured activations; a non-finite loss sets ``model.diverged``."""
    with np.errstate(over="ignore", invalid="ignore"):
        loss, acts = model.forward(batch, capture=capture)
    value = float(loss.data)
    if not math.isfinite(value):
        model.diverged = True
    return value, acts


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpConfig:
    d_in: int
    d_out: int
    width: int
    base_width: int
    depth: int = 2
    activation: str = "relu"
    scheme: Scheme | str = Scheme.MUP_T3
    output_zero_init: bool = False
    bias: bool = True
    loss: str = "xent"
    init_std: float = 1.0
    output_init_std: float = 1.0
    alpha_output: float = 1.0
    lr_mults: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.scheme = parse_scheme(self.scheme)
        if self.width < 1 or self.base_width < 1:
            raise ConfigError("width and base width must be >= 1")
        if self.depth < 1:
            raise ConfigError("depth (number of hidden layers) must be >= 1")
        if self.activation not in nc.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.loss not in ("xent", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")


class Mlp(Model):
    kind = "mlp"

    def __init__(self, cfg: MlpConfig):
        super().__init__(cfg.scheme)
        self.cfg = cfg
        n = infinite(cfg.width, cfg.base_width)
        lr = cfg.lr_mults
        fan_ins = [finite(cfg.d_in)] + [n] * (cfg.depth - 1)
        for i, fin in enumerate(fan_ins):
            shape = InfShape([n, fin])
            role = assign_role(shape)
            group = role.value.replace("_weight", "")
            self.add(ParamTensor(f"layers.{i}.weight", shape,
                                 _lookup(role, cfg.scheme, lr_const=lr.get(group, 1.0)),
                                 group=group, init_var=cfg.init_std ** 2 / fin.base))
            if cfg.bias:
                self.add(ParamTensor(f"layers.{i}.bias", InfShape([n]),
                                     _lookup(ParamRole.BIAS, cfg.scheme, lr_const=lr.get("bias", 1.0)),
                                     group="bias", init_var=0.0))
        var_out = 0.0 if cfg.output_zero_init else cfg.output_init_std ** 2 / n.base
        self.add(ParamTensor("out.weight", InfShape([finite(cfg.d_out), n]),
                             _lookup(ParamRole.OUTPUT_WEIGHT, cfg.scheme, mult_const=cfg.alpha_output,
                                     lr_const=lr.get("output", 1.0)),
                             group="output", init_var=var_out))
        self.check_roles()

    def forward(self, batch: Batch, capture: bool = False):
        cfg = self.cfg
        act = nc.ACTIVATIONS[cfg.activation]
        h = Tensor(batch.inputs)
        acts: dict[str, np.ndarray] = {}
        for i in range(cfg.depth):
            w = self.params[f"layers.{i}.weight"]
            z = nc.linear(h, w.tensor, w.multiplier)
            if cfg.bias:
                b = self.params[f"layers.{i}.bias"]
                z = nc.bias_add(z, b.tensor, b.multiplier)
            if capture:
                acts[f"layer{i}.pre"] = z.data
            h = act(z)
        w = self.params["out.weight"]
        out = nc.linear(h, w.tensor, w.multiplier)
        if capture:
            acts["output"] = out.data
        if cfg.loss == "xent":
            loss = nc.softmax_cross_entropy(out, batch.targets)
        else:
            loss = nc.mse_loss(out, batch.targets)
        return loss, acts


def build_mlp(cfg: MlpConfig, rng: SeededRng, thetas: dict[str, Expr] | None = None) -> Mlp:
    model = Mlp(cfg)
    if thetas:
        model.rescale(thetas)
    model.initialize(rng)
    return model


# ---------------------------------------------------------------------------
# Transformer


@dataclass
class TransformerConfig:
    d_model: int
    d_model_base: int
    vocab: int
    context: int
    depth: int = 2
    n_head: int = 4
    d_head: int | None = None
    d_head_base: int | None = None
    d_ffn: int | None = None
    d_ffn_base: int | None = None
    ln_position: str = "pre"
    scheme: Scheme | str = Scheme.MUP_T3
    alpha_output: float = 1.0
    alpha_attn: float = 1.0
    alpha_emb: float = 1.0
    output_zero_init: bool = False
    query_zero_init: bool = False
    tie_embeddings: bool = False
    activation: str = "relu"
    init_std: float = 1.0
    emb_init_std: float = 1.0
    output_init_std: float = 1.0
    lr_mults: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.scheme = parse_scheme(self.scheme)
        if self.d_head is None:
            self.d_head = max(1, self.d_model // self.n_head)
        if self.d_head_base is None:
            self.d_head_base = max(1, self.d_model_base // self.n_head)
        if self.d_ffn is None:
            self.d_ffn = 4 * self.d_model
        if self.d_ffn_base is None:
            self.d_ffn_base = 4 * self.d_model_base
        if self.ln_position not in ("pre", "post"):
            raise ConfigError("ln_position must be 'pre' or 'post'")
        if self.depth < 1 or self.n_head < 1:
            raise ConfigError("depth and n_head must be >= 1")
        if self.activation not in nc.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.tie_embeddings and self.scheme not in (Scheme.SP, Scheme.MUP_T8, Scheme.MUP_T9):
            raise ConfigError(f"tied embeddings need sp, mup-t8 or mup-t9 (input and output init/LR "
                              f"rules differ under {self.scheme.value})")


def attention_logit(q, k, d_head: int, d_head_base: int, alpha_attn: float = 1.0) -> float:
    """``alpha * sqrt(d_head_base) / d_head * <q, k>``; equals ``alpha * <q,k> / sqrt(d)`` at the base."""
    return attention_scale(True, d_head, d_head_base, alpha_attn) * float(np.dot(q, k))


def attention_scale(mup: bool, d_head: int, d_head_base: int, alpha_attn: float = 1.0) -> float:
    if mup:
        return alpha_attn * math.sqrt(d_head_base) / d_head
    return alpha_attn / math.sqrt(d_head)


class Transformer(Model):
    kind = "transformer"

    def __init__(self, cfg: TransformerConfig):
        super().__init__(cfg.scheme)
        self.cfg = cfg
        S = cfg.scheme
        lr = cfg.lr_mults
        dm = infinite(cfg.d_model, cfg.d_model_base)
        dqk = infinite(cfg.n_head * cfg.d_head, cfg.n_head * cfg.d_head_base)
        dff = infinite(cfg.d_ffn, cfg.d_ffn_base)
        vocab, ctx = finite(cfg.vocab), finite(cfg.context)
        hidden_var = lambda fin: cfg.init_std ** 2 / fin.base

        def add(name, dims, role_group, init_var, init_mean=0.0, mult=1.0):
            shape = InfShape(dims)
            role = assign_role(shape)
            self.add(ParamTensor(name, shape, _lookup(role, S, mult, lr.get(role_group, 1.0)),
                                 group=role_group, init_mean=init_mean, init_var=init_var))

        emb_var = cfg.emb_init_std ** 2
        add("emb.word", [dm, vocab], "input", emb_var, mult=cfg.alpha_emb)
        add("emb.pos", [dm, ctx], "input", emb_var)
        for l in range(cfg.depth):
            p = f"blocks.{l}"
            add(f"{p}.ln1.gain", [dm], "ln", 0.0, init_mean=1.0)
            add(f"{p}.ln1.bias", [dm], "ln", 0.0)
            q_var = 0.0 if cfg.query_zero_init else hidden_var(dm)
            add(f"{p}.attn.q", [dqk, dm], "hidden", q_var)
            add(f"{p}.attn.k", [dqk, dm], "hidden", hidden_var(dm))
            add(f"{p}.attn.v", [dqk, dm], "hidden", hidden_var(dm))
            add(f"{p}.attn.o", [dm, dqk], "hidden", hidden_var(dqk))
            add(f"{p}.ln2.gain", [dm], "ln", 0.0, init_mean=1.0)
            add(f"{p}.ln2.bias", [dm], "ln", 0.0)
            add(f"{p}.mlp.fc1", [dff, dm], "hidden", hidden_var(dm))
            add(f"{p}.mlp.fc1_bias", [dff], "bias", 0.0)
            add(f"{p}.mlp.fc2", [dm, dff], "hidden", hidden_var(dff))
            add(f"{p}.mlp.fc2_bias", [dm], "bias", 0.0)
        if cfg.ln_position == "pre":
            add("ln_f.gain", [dm], "ln", 0.0, init_mean=1.0)
            add("ln_f.bias", [dm], "ln", 0.0)

        out_shape = InfShape([vocab, dm])
        out_abc = _lookup(ParamRole.OUTPUT_WEIGHT, S, cfg.alpha_output, lr.get("output", 1.0))
        if cfg.tie_embeddings:
            # the shared table keeps the word embedding's init and LR; only the output multiplier applies
            self.unemb_mult_abc = out_abc[Optimizer.SGD].mult
        else:
            var_out = 0.0 if cfg.output_zero_init else cfg.output_init_std ** 2 / dm.base
            self.add(ParamTensor("unemb", out_shape, out_abc, group="output", init_var=var_out))
        self.attn_scale = attention_scale(S.is_mup, cfg.d_head, cfg.d_head_base, cfg.alpha_attn)
        self.check_roles()

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        g, b = self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"]
        return nc.layernorm(x, g.tensor, b.tensor, g.multiplier, b.multiplier)

    def _lin(self, x: Tensor, name: str) -> Tensor:
        w = self.params[name]
        return nc.linear(x, w.tensor, w.multiplier)

    def _attn(self, x: Tensor, p: str, acts: dict | None, l: int) -> Tensor:
        cap = {} if acts is not None else None
        q, k, v = (self._lin(x, f"{p}.attn.{n}") for n in "qkv")
        o = nc.scaled_dot_attention(q, k, v, self.cfg.n_head, self.attn_scale, causal=True, capture=cap)
        if acts is not None:
            T = x.shape[1]
            rows, cols = np.tril_indices(T)
            acts[f"block{l}.attn_logits"] = cap["logits"][..., rows, cols]
        return self._lin(o, f"{p}.attn.o")

    def _mlp(self, x: Tensor, p: str) -> Tensor:
        act = nc.ACTIVATIONS[self.cfg.activation]
        b1, b2 = self.params[f"{p}.mlp.fc1_bias"], self.params[f"{p}.mlp.fc2_bias"]
        h = act(nc.bias_add(self._lin(x, f"{p}.mlp.fc1"), b1.tensor, b1.multiplier))
        return nc.bias_add(self._lin(h, f"{p}.mlp.fc2"), b2.tensor, b2.multiplier)

    def forward(self, batch: Batch, capture: bool = False):
        cfg = self.cfg
        tokens = np.asarray(batch.inputs)
        B, T = tokens.shape
        if T > cfg.context:
            raise ValueError(f"sequence length {T} exceeds context {cfg.context}")
        acts: dict[str, np.ndarray] | None = {} if capture else None
        word = self.params["emb.word"]
        pos = self.params["emb.pos"]
        e = nc.embedding_lookup(word.tensor, tokens, word.multiplier)
        if acts is not None:
            acts["word_emb"] = e.data
        x = nc.add(e, nc.embedding_lookup(pos.tensor, np.broadcast_to(np.arange(T), (B, T)), pos.multiplier))
        for l in range(cfg.depth):
            p = f"blocks.{l}"
            if cfg.ln_position == "pre":
                x = nc.add(x, self._attn(self._ln(x, f"{p}.ln1"), p, acts, l))
                x = nc.add(x, self._mlp(self._ln(x, f"{p}.ln2"), p))
            else:
                x = self._ln(nc.add(x, self._attn(x, p, acts, l)), f"{p}.ln1")
                x = self._ln(nc.add(x, self._mlp(x, p)), f"{p}.ln2")
            if acts is not None:
                acts[f"block{l}.out"] = x.data
        if cfg.ln_position == "pre":
            x = self._ln(x, "ln_f")
        if cfg.tie_embeddings:
            mult = self.unemb_mult_abc.at(self.params["emb.word"].infshape.transposed())
            logits = nc.linear(x, _Transposed(word.tensor), mult)
        else:
            logits = self._lin(x, "unemb")
        if acts is not None:
            acts["logits"] = logits.data
        loss = nc.softmax_cross_entropy(logits, batch.targets)
        return loss, (acts or {})


def _Transposed(t: Tensor) -> Tensor:
    """View of a (width, vocab) table as a (vocab, width) weight that routes gradients back to ``t``."""
    out = Tensor(t.data.T)
    out._parents = (t,)
    out._backward = lambda g: [(t, g.T)]
    return out


def build_transformer(cfg: TransformerConfig, rng: SeededRng, thetas: dict[str, Expr] | None = None) -> Transformer:
    model = Transformer(cfg)
    if thetas:
        model.rescale(thetas)
    model.initialize(rng)
    return model


def with_width(cfg, width: int):
    """Copy of an MLP or Transformer config at a new width (base shape unchanged)."""
    if isinstance(cfg, MlpConfig):
        return replace(cfg, width=width)
    ratio = width / cfg.d_model
    d_head = max(1, round(cfg.d_head * ratio))
    return replace(cfg, d_model=width, d_ffn=max(1, round(cfg.d_ffn * ratio)), d_head=d_head)
