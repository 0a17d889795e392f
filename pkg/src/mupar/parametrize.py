"""abc-parametrizations: symbolic width scalings for multipliers, init variances and learning rates.

A scaling expression is ``constant * fan_in_mult**p * fan_out_mult**q`` where the
multipliers are ``size / base`` of the corresponding dimension.  Powers are exact
rationals and constants are kept as exact binary fractions where possible, so
table equivalences can be compared with ``==``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

Number = int | float | Fraction


def _frac(x: Number) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


@dataclass(frozen=True)
class Dim:
    size: int
    base: int
    infinite: bool

    def __post_init__(self):
        if self.size < 1 or self.base < 1:
            raise ValueError(f"dimension sizes must be positive, got {self.size}/{self.base}")
        if not self.infinite and self.size != self.base:
            raise ValueError(f"finite dimension must equal its base ({self.size} != {self.base})")

    @property
    def mult(self) -> float:
        return self.size / self.base


def finite(size: int) -> Dim:
    return Dim(size, size, False)


def infinite(size: int, base: int) -> Dim:
    return Dim(size, base, True)


class Category(enum.Enum):
    MATRIX_LIKE = "matrix_like"
    VECTOR_LIKE = "vector_like"
    SCALAR_LIKE = "scalar_like"


class ParamRole(enum.Enum):
    INPUT_WEIGHT = "input_weight"
    OUTPUT_WEIGHT = "output_weight"
    HIDDEN_WEIGHT = "hidden_weight"
    BIAS = "bias"
    SCALAR_LIKE = "scalar_like"


@dataclass(frozen=True)
class InfShape:
    """Per-dimension (size, base, infinite) record; matrices are (fan_out, fan_in)."""

    dims: tuple[Dim, ...]

    def __init__(self, dims: Sequence[Dim]):
        object.__setattr__(self, "dims", tuple(dims))
        if len(self.dims) > 2:
            raise ValueError("only scalars, vectors and matrices are supported")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(d.size for d in self.dims)

    def n_infinite(self) -> int:
        return sum(d.infinite for d in self.dims)

    def fan_in(self) -> Dim:
        # the fan_in of a bias or other vector is 1
        return self.dims[1] if len(self.dims) == 2 else finite(1)

    def fan_out(self) -> Dim:
        return self.dims[0] if self.dims else finite(1)

    def fan_in_mult(self) -> float:
        return self.fan_in().mult

    def fan_out_mult(self) -> float:
        return self.fan_out().mult

    def width_mult(self) -> float:
        """fan_in / base_fan_in for matrix-like tensors, the infinite dim's multiplier for vector-like ones."""
        for d in reversed(self.dims):
            if d.infinite:
                return d.mult
        return 1.0

    def transposed(self) -> "InfShape":
        return InfShape(tuple(reversed(self.dims)))

    def at_base(self) -> "InfShape":
        return InfShape([Dim(d.base, d.base, d.infinite) for d in self.dims])


def classify(shape: InfShape) -> Category:
    n = shape.n_infinite()
    if n == 2:
        return Category.MATRIX_LIKE
    if n == 1:
        return Category.VECTOR_LIKE
    return Category.SCALAR_LIKE


def assign_role(shape: InfShape) -> ParamRole:
    """Structural role: input maps finite->infinite, output infinite->finite, hidden infinite->infinite."""
    cat = classify(shape)
    if cat is Category.SCALAR_LIKE:
        return ParamRole.SCALAR_LIKE
    if len(shape.dims) == 1:
        return ParamRole.BIAS
    if cat is Category.MATRIX_LIKE:
        return ParamRole.HIDDEN_WEIGHT
    out_dim, in_dim = shape.dims
    return ParamRole.INPUT_WEIGHT if out_dim.infinite else ParamRole.OUTPUT_WEIGHT


@dataclass(frozen=True)
class Expr:
    """``constant * fan_in_mult**p_in * fan_out_mult**p_out``."""

    constant: Fraction = Fraction(1)
    p_in: Fraction = Fraction(0)
    p_out: Fraction = Fraction(0)

    def __init__(self, constant: Number = 1, p_in: Number = 0, p_out: Number = 0):
        c = _frac(constant)
        if c <= 0:
            raise ValueError(f"scaling constants must be positive, got {constant}")
        object.__setattr__(self, "constant", c)
        object.__setattr__(self, "p_in", _frac(p_in))
        object.__setattr__(self, "p_out", _frac(p_out))

    def __mul__(self, other: "Expr | Number") -> "Expr":
        if not isinstance(other, Expr):
            other = Expr(other)
        return Expr(self.constant * other.constant, self.p_in + other.p_in, self.p_out + other.p_out)

    __rmul__ = __mul__

    def __truediv__(self, other: "Expr | Number") -> "Expr":
        if not isinstance(other, Expr):
            other = Expr(other)
        return Expr(self.constant / other.constant, self.p_in - other.p_in, self.p_out - other.p_out)

    def __pow__(self, k: Number) -> "Expr":
        k = _frac(k)
        if k.denominator == 1:
            c = self.constant ** int(k)
        else:
            c = Fraction(float(self.constant) ** float(k))
        return Expr(c, self.p_in * k, self.p_out * k)

    def evaluate(self, fan_in_mult: float = 1.0, fan_out_mult: float = 1.0) -> float:
        value = float(self.constant)
        if self.p_in:
            value *= fan_in_mult ** float(self.p_in)
        if self.p_out:
            value *= fan_out_mult ** float(self.p_out)
        return value

    def at(self, shape: InfShape) -> float:
        return self.evaluate(shape.fan_in_mult(), shape.fan_out_mult())

    def drop_fan_in(self) -> "Expr":
        return Expr(self.constant, 0, self.p_out)

    def drop_fan_out(self) -> "Expr":
        return Expr(self.constant, self.p_in, 0)

    def __str__(self) -> str:
        parts = [] if self.constant == 1 else [f"{float(self.constant):g}"]
        if self.p_in:
            parts.append(f"fan_in^{self.p_in}")
        if self.p_out:
            parts.append(f"fan_out^{self.p_out}")
        return "*".join(parts) or "1"


ONE = Expr()
FAN_IN = Expr(1, 1, 0)
FAN_OUT = Expr(1, 0, 1)


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


class Scheme(str, enum.Enum):
    SP = "sp"
    NTP = "ntp"
    MUP_T3 = "mup-t3"
    MUP_T8 = "mup-t8"
    MUP_T9 = "mup-t9"

    @property
    def is_mup(self) -> bool:
        return self in (Scheme.MUP_T3, Scheme.MUP_T8, Scheme.MUP_T9)


def parse_scheme(name: "str | Scheme") -> Scheme:
    if isinstance(name, Scheme):
        return name
    key = str(name).strip().lower().replace("_", "-")
    aliases = {"mup": "mup-t3", "mup-t3": "mup-t3", "mup-t8": "mup-t8", "mup-t9": "mup-t9",
               "sp": "sp", "ntp": "ntp"}
    if key not in aliases:
        raise ValueError(f"unknown scheme {name!r}; expected one of sp, ntp, mup-t3, mup-t8, mup-t9")
    return Scheme(aliases[key])


@dataclass(frozen=True)
class AbcTriple:
    mult: Expr = ONE
    init_var: Expr = ONE
    lr: Expr = ONE

    def with_constants(self, mult: Number = 1, init_var: Number = 1, lr: Number = 1) -> "AbcTriple":
        return AbcTriple(self.mult * mult, self.init_var * init_var, self.lr * lr)

    def __str__(self) -> str:
        return f"(mult={self.mult}, init_var={self.init_var}, lr={self.lr})"


# Column cells as printed: (multiplier, init variance, SGD LR, Adam LR).
_INPUT, _OUTPUT, _HIDDEN = "input", "output", "hidden"
_HALF = Fraction(1, 2)

_TABLES: dict[Scheme, dict[str, tuple[Expr, Expr, Expr, Expr]]] = {
    Scheme.SP: {
        _INPUT: (ONE, FAN_IN ** -1, ONE, ONE),
        _OUTPUT: (ONE, FAN_IN ** -1, ONE, ONE),
        _HIDDEN: (ONE, FAN_IN ** -1, ONE, ONE),
    },
    Scheme.MUP_T3: {
        _INPUT: (ONE, FAN_IN ** -1, FAN_OUT, ONE),
        _OUTPUT: (ONE, FAN_IN ** -2, FAN_IN ** -1, FAN_IN ** -1),
        _HIDDEN: (ONE, FAN_IN ** -1, ONE, FAN_IN ** -1),
    },
    Scheme.MUP_T8: {
        _INPUT: (ONE, FAN_IN ** -1, FAN_OUT, ONE),
        _OUTPUT: (FAN_IN ** -1, ONE, FAN_IN, ONE),
        _HIDDEN: (ONE, FAN_IN ** -1, ONE, FAN_IN ** -1),
    },
    Scheme.MUP_T9: {
        _INPUT: (FAN_OUT ** _HALF, FAN_OUT ** -1, ONE, FAN_OUT ** -_HALF),
        _OUTPUT: (FAN_IN ** -_HALF, FAN_IN ** -1, ONE, FAN_IN ** -_HALF),
        _HIDDEN: (ONE, FAN_IN ** -1, ONE, FAN_IN ** -1),
    },
    # kernel-regime control: unit-variance weights behind a 1/sqrt(fan_in) multiplier
    Scheme.NTP: {
        _INPUT: (FAN_IN ** -_HALF, ONE, ONE, FAN_IN ** -_HALF),
        _OUTPUT: (FAN_IN ** -_HALF, ONE, ONE, FAN_IN ** -_HALF),
        _HIDDEN: (FAN_IN ** -_HALF, ONE, ONE, FAN_IN ** -_HALF),
    },
}

_COLUMN = {
    ParamRole.INPUT_WEIGHT: _INPUT,
    ParamRole.BIAS: _INPUT,
    ParamRole.OUTPUT_WEIGHT: _OUTPUT,
    ParamRole.HIDDEN_WEIGHT: _HIDDEN,
}


def canonical(triple: AbcTriple, role: ParamRole) -> AbcTriple:
    """Drop powers of dimensions that are finite for this role (their multiplier is always 1)."""
    if role in (ParamRole.INPUT_WEIGHT, ParamRole.BIAS):
        f = Expr.drop_fan_in
    elif role is ParamRole.OUTPUT_WEIGHT:
        f = Expr.drop_fan_out
    elif role is ParamRole.SCALAR_LIKE:
        return AbcTriple(Expr(triple.mult.constant), Expr(triple.init_var.constant), Expr(triple.lr.constant))
    else:
        return triple
    return AbcTriple(f(triple.mult), f(triple.init_var), f(triple.lr))


def scheme_lookup(role: ParamRole | str, scheme: Scheme | str, optimizer: Optimizer | str) -> AbcTriple:
    role = ParamRole(role)
    scheme = parse_scheme(scheme)
    optimizer = Optimizer(optimizer)
    if role is ParamRole.SCALAR_LIKE:
        return AbcTriple()
    mult, var, sgd_lr, adam_lr = _TABLES[scheme][_COLUMN[role]]
    lr = sgd_lr if optimizer is Optimizer.SGD else adam_lr
    return canonical(AbcTriple(mult, var, lr), role)


def rescale_theta(triple: AbcTriple, theta: Expr, optimizer: Optimizer | str) -> AbcTriple:
    """Multiplier * theta, init std / theta, LR / theta**2 (SGD) or / theta (Adam).

    The function computed after any number of steps is unchanged; init variance is
    stored, so it is divided by theta**2.
    """
    if not isinstance(theta, Expr):
        theta = Expr(theta)
    optimizer = Optimizer(optimizer)
    lr_power = 2 if optimizer is Optimizer.SGD else 1
    return AbcTriple(triple.mult * theta, triple.init_var / theta ** 2, triple.lr / theta ** lr_power)


def effective_multiplier(triple: AbcTriple, shape: InfShape, master_value: float = 1.0) -> float:
    return master_value * triple.mult.at(shape)


def effective_init_var(triple: AbcTriple, shape: InfShape, master_value: float = 1.0) -> float:
    if master_value < 0:
        raise ValueError("master init variance must be nonnegative")
    return master_value * triple.init_var.at(shape)


def effective_lr(triple: AbcTriple, shape: InfShape, master_value: float = 1.0) -> float:
    return master_value * triple.lr.at(shape)


def table_theta(scheme: Scheme | str, role: ParamRole | str) -> Expr:
    """The rescaling that maps the Table-3 cell of ``role`` onto ``scheme``'s cell."""
    scheme, role = parse_scheme(scheme), ParamRole(role)
    if scheme is Scheme.MUP_T3 or role in (ParamRole.HIDDEN_WEIGHT, ParamRole.SCALAR_LIKE):
        return ONE
    if scheme is Scheme.MUP_T8:
        return FAN_IN ** -1 if role is ParamRole.OUTPUT_WEIGHT else ONE
    if scheme is Scheme.MUP_T9:
        return FAN_IN ** -_HALF if role is ParamRole.OUTPUT_WEIGHT else FAN_OUT ** _HALF
    raise ValueError(f"{scheme.value} is not a muP table")
