"""Sectioned key-value run configuration with strict parsing and exact round-trips."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .transfer import TRANSFERABLE


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _items(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


def _floats(s: str) -> list[float]:
    out = []
    for item in _items(s):
        if ":" in item and item.startswith("2^"):
            # 2^a:2^b expands to every power of two in between
            lo, hi = (int(p.strip()[2:]) for p in item.split(":"))
            out.extend(2.0 ** e for e in range(lo, hi + 1))
        else:
            out.append(_float(item))
    return out


def _float(s: str) -> float:
    s = s.strip()
    if s.startswith("2^"):
        return 2.0 ** float(s[2:])
    return float(s)


def _ints(s: str) -> list[int]:
    return [int(x) for x in _items(s)]


PARSERS = {
    "int": int, "float": _float, "str": lambda s: s.strip(), "bool": _bool,
    "ints": _ints, "floats": _floats, "strs": _items,
}


def _fmt(kind: str, v: Any) -> str:
    if kind == "bool":
        return "true" if v else "false"
    if kind == "float":
        return repr(float(v))
    if kind == "floats":
        return ", ".join(repr(float(x)) for x in v)
    if kind in ("ints", "strs"):
        return ", ".join(str(x) for x in v)
    return str(v)


SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "experiment": {"seeds": ("ints", [0]), "workers": ("int", 0), "plots": ("bool", True)},
    "model": {
        "kind": ("str", "mlp"), "scheme": ("str", "mup-t8"), "optimizer": ("str", "adam"),
        "base_width": ("int", 64), "sim_base": ("int", 0), "n_head": ("int", 4),
        "ffn_ratio": ("float", 4.0), "activation": ("str", "relu"), "ln_position": ("str", "pre"),
        "output_zero_init": ("bool", False), "query_zero_init": ("bool", False),
        "tie_embeddings": ("bool", False), "clip": ("float", 0.0),
    },
    "task": {
        "name": ("str", "teacher"), "seed": ("int", -1), "d_in": ("int", 32), "n_classes": ("int", 10),
        "n_train": ("int", 4096), "vocab": ("int", 32), "order": ("int", 1),
        "concentration": ("float", 0.1), "path": ("str", ""),
    },
    "hp": {k: ("str" if k == "schedule" else "float", None) for k in sorted(TRANSFERABLE)},
    "search": dict({"mode": ("str", "grid"), "k": ("int", 8), "seed": ("int", 0)},
                   **{k: ("floats", None) for k in sorted(TRANSFERABLE - {"schedule"})}),
    "scale": {
        "width_mult": ("float", 1.0), "depth": ("int", 2), "batch": ("int", 32),
        "seq_len": ("int", 32), "steps": ("int", 100), "checkpoints": ("ints", []),
    },
    "ladder": {"width_mults": ("floats", [1.0, 2.0, 4.0, 8.0])},
    "coordcheck": {
        "widths": ("ints", [64, 128, 256, 512, 1024]), "steps": ("int", 4), "tol": ("float", 0.2),
        "batch": ("int", 32), "seq_len": ("int", 16), "depth": ("int", 2), "check_init": ("bool", False),
    },
    "transfer": {
        "proxy_width_mult": ("float", 1.0), "target_width_mult": ("float", 4.0),
        "oracle": ("bool", True), "naive_scheme": ("str", "sp"), "metric": ("str", "train_loss"),
    },
    "widthscan": {"band": ("float", 0.02)},
    "reverse": {
        "from_sim_width": ("int", 4096), "to_sim_width": ("int", 2048),
        "reference_loss": ("float", 0.0), "blowup_factor": ("float", 2.0),
    },
    "primer": {
        "n": ("ints", [64, 256, 1024]), "f": ("str", "bump"), "alpha_min": ("float", 0.0),
        "alpha_max": ("float", 3.0), "alpha_points": ("int", 61), "samples": ("int", 200000),
        "fixed_c": ("floats", []),
    },
    "lawcheck": {
        "kinds": ("strs", ["gaussian", "tensor_product", "nonlinear_tensor_product", "vector"]),
        "n": ("ints", [128, 256, 512, 1024, 2048, 4096, 8192]), "reps": ("int", 100),
        "correlated": ("bool", True),
    },
}


@dataclass
class RunConfig:
    """Parsed configuration; ``values`` holds only keys present in the source, typed."""

    values: dict[str, dict[str, Any]] = field(default_factory=dict)

    def get(self, section: str, key: str, default: Any = None) -> Any:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        if key in self.values.get(section, {}):
            return self.values[section][key]
        d = SCHEMA[section][key][1]
        return default if d is None else (list(d) if isinstance(d, list) else d)

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.values.get(name, {}))

    def set(self, section: str, key: str, raw: str) -> None:
        self.values.setdefault(section, {})[key] = _parse_value(section, key, raw)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values


def _parse_value(section: str, key: str, raw: str) -> Any:
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    kind = SCHEMA[section][key][0]
    try:
        return PARSERS[kind](raw)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"{section}.{key}: {e}") from None


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    cfg = RunConfig()
    for sec in cp.sections():
        for key, raw in cp.items(sec):
            cfg.set(sec, key, raw)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


def serialize_config(cfg: RunConfig) -> str:
    buf = io.StringIO()
    for sec in SCHEMA:
        vals = cfg.values.get(sec)
        if not vals:
            continue
        buf.write(f"[{sec}]\n")
        for key in SCHEMA[sec]:
            if key in vals:
                buf.write(f"{key} = {_fmt(SCHEMA[sec][key][0], vals[key])}\n")
        buf.write("\n")
    return buf.getvalue()


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings on top of a config."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        sec, key = lhs.strip().split(".", 1)
        cfg.set(sec, key, raw)
    return cfg


def bundled_config_path(name: str) -> Path:
    return Path(__file__).with_name("configs") / f"{name}.cfg"
