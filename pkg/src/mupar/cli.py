"""Command-line entry point: ``mupar <subcommand> [--config FILE] [--output-dir DIR]``."""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import plots
from . import report as rp
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    bundled_config_path,
    load_config,
    serialize_config,
)
from .coordcheck import entry_size_law_check, run_coord_check, verdict
from .data import MarkovLM, TeacherTask
from .numcore import SeededRng
from .parametrize import parse_scheme
from .transfer import (
    Grid,
    HpPoint,
    ModelTemplate,
    NoViableHp,
    RandomSearch,
    ScalePoint,
    aggregate,
    default_workers,
    mu_transfer,
    primer_curve,
    primer_limit_argmin,
    primer_limit_curve,
    reverse_transfer,
    select_best,
    sweep,
    wider_is_better_scan,
)

EXIT_OK, EXIT_CONFIG, EXIT_NO_VIABLE = 0, 2, 3
COMMANDS = ("coordcheck", "sweep", "transfer", "widthscan", "reverse", "primer", "lawcheck")


@dataclass
class Context:
    cfg: RunConfig
    out: Path
    workers: int
    seeds: list[int]
    plots: bool

    def log(self, msg: str) -> None:
        print(msg, flush=True)


# ---------------------------------------------------------------------------
# config -> objects


def _task_kwargs(cfg: RunConfig) -> tuple:
    name = cfg.get("task", "name")
    if name == "teacher":
        keys = [f.name for f in dataclasses.fields(TeacherTask)]
    elif name == "markov":
        keys = [f.name for f in dataclasses.fields(MarkovLM)]
    elif name == "char":
        path = cfg.get("task", "path")
        if not path:
            raise ConfigError("task.path is required for the char task")
        return (("path", path),)
    else:
        raise ConfigError(f"unknown task {name!r}")
    given = cfg.section("task")
    kw = {k: v for k, v in given.items() if k in keys}
    if kw.get("seed", 0) < 0:
        kw.pop("seed")
    return tuple(sorted(kw.items()))


def build_template(cfg: RunConfig, scheme: str | None = None) -> ModelTemplate:
    m = lambda k: cfg.get("model", k)
    kind = m("kind")
    extra: dict = {"activation": m("activation"), "output_zero_init": m("output_zero_init")}
    if kind == "transformer":
        extra.update(n_head=m("n_head"), ln_position=m("ln_position"),
                     query_zero_init=m("query_zero_init"), tie_embeddings=m("tie_embeddings"))
    tpl = ModelTemplate(kind=kind, scheme=parse_scheme(scheme or m("scheme")).value, optimizer=m("optimizer"),
                        base_width=m("base_width"), sim_base=m("sim_base") or None,
                        task=cfg.get("task", "name"), task_kwargs=_task_kwargs(cfg),
                        model_kwargs=tuple(sorted(extra.items())), ffn_ratio=m("ffn_ratio"),
                        clip=m("clip") or None)
    # building once surfaces invalid model settings as config errors before any training starts
    tpl.model_config(build_hp(cfg), build_scale(cfg))
    return tpl


def build_hp(cfg: RunConfig) -> HpPoint:
    vals = cfg.section("hp")
    vals.setdefault("master_lr", 2.0 ** -9)
    return HpPoint(vals)


def build_scale(cfg: RunConfig, **kw) -> ScalePoint:
    s = {k: cfg.get("scale", k) for k in ("width_mult", "depth", "batch", "seq_len", "steps")}
    s.update(kw)
    return ScalePoint(**s)


def build_search(cfg: RunConfig):
    sec = cfg.section("search")
    mode = sec.pop("mode", "grid")
    k, seed = sec.pop("k", 8), sec.pop("seed", 0)
    fixed = build_hp(cfg).as_dict()
    axes = {name: vals for name, vals in sec.items()}
    if "master_lr" not in axes:
        raise ConfigError("search.master_lr must list at least one learning rate")
    base = {n: [v] for n, v in fixed.items() if n not in axes}
    if mode == "grid":
        return Grid.of(**{**base, **axes})
    if mode == "random":
        return RandomSearch(tuple(sorted({**base, **axes}.items())), k, seed)
    raise ConfigError(f"unknown search mode {mode!r}")


def _checkpoints(cfg: RunConfig) -> list[int]:
    return cfg.get("scale", "checkpoints")


# ---------------------------------------------------------------------------
# subcommands


def cmd_coordcheck(ctx: Context) -> int:
    cfg = ctx.cfg
    tpl = build_template(cfg)
    hp = build_hp(cfg)
    g = lambda k: cfg.get("coordcheck", k)
    steps = g("steps")
    scale = build_scale(cfg, batch=g("batch"), seq_len=g("seq_len"), depth=g("depth"), steps=steps)
    base = tpl.base_width
    widths = g("widths")
    if min(widths) < base:
        raise ConfigError("coordcheck widths must be at least model.base_width")
    family = lambda w, seed: tpl.build(hp, replace(scale, width_mult=w / base), seed)
    batches = lambda seed: list(tpl.batches(scale, seed))
    rep = run_coord_check(family, widths, steps, batches, tpl.optimizer_config(hp), ctx.seeds)
    v = verdict(rep, g("tol"), g("check_init"))
    rp.write_csv(ctx.out / "coordcheck.csv", rp.COORD_COLUMNS, rp.coord_rows(rep))
    rp.write_csv(ctx.out / "coordcheck_abs.csv", rp.COORD_COLUMNS, rp.coord_rows(rep, "mean_abs"))
    size_rows = rp.coord_size_rows(rep)
    rp.write_csv(ctx.out / "coordcheck_size.csv", rp.SIZE_COLUMNS, size_rows)
    rp.write_json(ctx.out / "coordcheck_report.json", rp.coord_report_dict(rep, v))
    if ctx.plots:
        plots.coord_sizes(size_rows, ctx.out / "coordcheck.png")
    for name, label in sorted(v.labels.items()):
        ctx.log(f"{name:24s} {label:8s} worst slope {v.worst[name]:+.3f}")
    ctx.log(f"verdict: {v.overall}")
    return EXIT_OK


def _ladder_scales(cfg: RunConfig) -> list[ScalePoint]:
    return [build_scale(cfg, width_mult=m) for m in cfg.get("ladder", "width_mults")]


def _write_sweep(ctx: Context, records, name: str = "sweep") -> None:
    rp.write_csv(ctx.out / f"{name}.csv", rp.SWEEP_COLUMNS, rp.sweep_rows(records))
    rows = rp.lr_vs_loss_rows(records)
    rp.write_csv(ctx.out / "lr_vs_loss.csv", rp.LR_COLUMNS, rows)
    if ctx.plots:
        plots.lr_vs_loss(rows, ctx.out / "lr_vs_loss.png")


def cmd_sweep(ctx: Context) -> int:
    cfg = ctx.cfg
    tpl = build_template(cfg)
    search = build_search(cfg)
    scales = _ladder_scales(cfg)
    records = sweep(search, scales, tpl, ctx.seeds, ctx.workers, _checkpoints(cfg))
    _write_sweep(ctx, records)
    best = {}
    for sc in scales:
        recs = [r for r in records if r.scale == sc]
        try:
            hp = select_best(recs)
            best[str(tpl.width(sc))] = {"hp": hp.as_dict(), "train_loss": aggregate(recs)[hp][0]}
        except NoViableHp:
            best[str(tpl.width(sc))] = None
    rp.write_json(ctx.out / "sweep_report.json", {"scheme": tpl.scheme, "best": best})
    for w, b in best.items():
        ctx.log(f"width {w}: " + (f"best master_lr 2^{math.log2(b['hp']['master_lr']):g} loss {b['train_loss']:.4f}"
                                  if b else "no viable HP"))
    if all(b is None for b in best.values()):
        raise NoViableHp("no viable HP at any width")
    return EXIT_OK


def cmd_transfer(ctx: Context) -> int:
    cfg = ctx.cfg
    t = lambda k: cfg.get("transfer", k)
    tpl = build_template(cfg)
    search = build_search(cfg)
    proxy = build_scale(cfg, width_mult=t("proxy_width_mult"))
    target = build_scale(cfg, width_mult=t("target_width_mult"))
    metric = t("metric")
    proxy_recs = sweep(search, proxy, tpl, ctx.seeds, ctx.workers)
    best = select_best(proxy_recs, metric)
    oracle = sweep(search, target, tpl, ctx.seeds, ctx.workers) if t("oracle") else None
    naive = None
    naive_scheme = t("naive_scheme")
    if naive_scheme and naive_scheme != "none" and parse_scheme(naive_scheme).value != tpl.scheme:
        sp_tpl = tpl.with_(scheme=parse_scheme(naive_scheme).value)
        try:
            naive = (sp_tpl, select_best(sweep(search, proxy, sp_tpl, ctx.seeds, ctx.workers), metric))
        except NoViableHp:
            naive = None
    _, report = mu_transfer(best, target, tpl, ctx.seeds, oracle=oracle, naive=naive, metric=metric)
    _write_sweep(ctx, proxy_recs + (oracle or []))
    rp.write_json(ctx.out / "transfer_report.json", report)
    ctx.log(f"proxy best master_lr {best['master_lr']:g}; target loss {report.target_loss:.4f}"
            + (f"; oracle {report.oracle_loss:.4f} (gap {report.relative_gap:+.2%})"
               if report.oracle_loss is not None else "")
            + (f"; naive {report.naive_loss:.4f}" if report.naive_loss is not None else ""))
    return EXIT_OK


def cmd_widthscan(ctx: Context) -> int:
    cfg = ctx.cfg
    tpl = build_template(cfg)
    hp = build_hp(cfg)
    scale = build_scale(cfg)
    rep = wider_is_better_scan(tpl, hp, cfg.get("ladder", "width_mults"), scale, ctx.seeds,
                               _checkpoints(cfg), cfg.get("widthscan", "band"), ctx.workers)
    rows = [[w, st, rep.mean_loss[st][i]] for st in rep.steps for i, w in enumerate(rep.widths)]
    rp.write_csv(ctx.out / "widthscan.csv", ("width", "step", "mean_loss"), rows)
    rp.write_json(ctx.out / "widthscan_report.json", rep)
    if ctx.plots:
        plots.width_scan(rep.widths, rep.mean_loss, ctx.out / "widthscan.png")
    ctx.log(f"monotone within {rep.band:.0%}: {rep.monotone} (violations {rep.violations})")
    return EXIT_OK


def cmd_reverse(ctx: Context) -> int:
    cfg = ctx.cfg
    r = lambda k: cfg.get("reverse", k)
    tpl = build_template(cfg)
    if not parse_scheme(tpl.scheme).is_mup:
        raise ConfigError("reverse transfer needs a muP scheme")
    ref = r("reference_loss") or None
    rep = reverse_transfer(tpl, build_hp(cfg), r("from_sim_width"), r("to_sim_width"), build_scale(cfg),
                           ctx.seeds, ref, r("blowup_factor"))
    rp.write_json(ctx.out / "reverse_report.json", rep)
    ctx.log(f"diverged at simulated width {rep.from_sim_width}: {sum(rep.from_diverged)}/{len(rep.from_diverged)}; "
            f"replicated at {rep.to_sim_width}: {sum(rep.replicated)}/{len(rep.replicated)}")
    return EXIT_OK


def cmd_primer(ctx: Context) -> int:
    cfg = ctx.cfg
    p = lambda k: cfg.get("primer", k)
    grid = np.linspace(p("alpha_min"), p("alpha_max"), p("alpha_points"))
    f, samples, fixed = p("f"), p("samples"), p("fixed_c")
    step = float(grid[1] - grid[0]) if len(grid) > 1 else 0.0
    limit = primer_limit_argmin(grid, f)
    rows, curve_rows, curves = [], [], {"limit": primer_limit_curve(grid, f)}
    seed = ctx.seeds[0]
    for n in p("n"):
        g = primer_curve(n, grid, f, samples, seed)
        a = float(grid[int(np.argmin(g))])
        row = [n, a, limit, abs(a - limit) <= step + 1e-12]
        if fixed:
            gp = primer_curve(n, grid, f, samples, seed, fixed)
            row.append(float(grid[int(np.argmin(gp))]))
        rows.append(row)
        curves[f"n={n}"] = g
        curve_rows.extend([n, float(x), float(y)] for x, y in zip(grid, g))
    cols = ["n", "alpha_star", "alpha_star_limit", "within_one_cell"] + (["alpha1_star_partial"] if fixed else [])
    rp.write_csv(ctx.out / "primer.csv", cols, rows)
    rp.write_csv(ctx.out / "primer_curves.csv", ("n", "alpha", "value"), curve_rows)
    if ctx.plots:
        plots.primer_curves(grid, curves, ctx.out / "primer.png")
    for r in rows:
        ctx.log(f"n={r[0]}: alpha* = {r[1]:+.3f} (limit {r[2]:+.3f})")
    return EXIT_OK


def cmd_lawcheck(ctx: Context) -> int:
    cfg = ctx.cfg
    lc = lambda k: cfg.get("lawcheck", k)
    rng = SeededRng(ctx.seeds[0], 5)
    checks = []
    for i, kind in enumerate(lc("kinds")):
        corr = lc("correlated") and kind != "gaussian"
        checks.append(entry_size_law_check(kind, lc("n"), corr, rng.spawn(100 + i), lc("reps")))
    rp.write_csv(ctx.out / "lawcheck.csv", ("kind", "correlated", "n", "size"), rp.lawcheck_rows(checks))
    rp.write_json(ctx.out / "lawcheck_report.json",
                  {c.kind: {"correlated": c.correlated, "slope": c.slope, "expected": c.expected} for c in checks})
    if ctx.plots:
        plots.law_sizes(checks, ctx.out / "lawcheck.png")
    for c in checks:
        ctx.log(f"{c.kind:26s} slope {c.slope:.3f} (expected {c.expected})")
    return EXIT_OK


HANDLERS: dict[str, Callable[[Context], int]] = {
    "coordcheck": cmd_coordcheck, "sweep": cmd_sweep, "transfer": cmd_transfer,
    "widthscan": cmd_widthscan, "reverse": cmd_reverse, "primer": cmd_primer, "lawcheck": cmd_lawcheck,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mupar", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="config file (defaults to the bundled one for this command)")
        sp.add_argument("--output-dir", default="mupar_out", help="directory for every output file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value; may repeat")
        sp.add_argument("--seeds", help="comma-separated seeds, overriding experiment.seeds")
        sp.add_argument("--no-plots", action="store_true", help="skip PNG figures")
        if name == "primer":
            sp.add_argument("--n", help="comma-separated problem sizes, overriding primer.n")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        path = args.config or bundled_config_path(args.command)
        cfg = load_config(path)
        overrides = list(args.set)
        if args.seeds:
            overrides.append(f"experiment.seeds={args.seeds}")
        if getattr(args, "n", None):
            overrides.append(f"primer.n={args.n}")
        apply_overrides(cfg, overrides)
        env = os.environ.get("MUPAR_WORKERS")
        workers = default_workers() if env else (cfg.get("experiment", "workers") or 1)
        out = Path(args.output_dir)
        ctx = Context(cfg, out, workers, cfg.get("experiment", "seeds"),
                      cfg.get("experiment", "plots") and not args.no_plots)
        if not ctx.seeds:
            raise ConfigError("experiment.seeds is empty")
        rp.atomic_write(out / "config.cfg", serialize_config(cfg))
        return HANDLERS[args.command](ctx)
    except NoViableHp as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_VIABLE
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
