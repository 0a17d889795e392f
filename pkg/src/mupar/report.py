"""CSV and JSON emission with atomic writes and fixed column orders."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .coordcheck import CoordCheckReport, LawCheck
from .transfer import SweepRecord, aggregate

HP_COLUMNS = ("master_lr", "lr_input", "lr_hidden", "lr_output", "lr_bias", "lr_ln", "init_std",
              "output_init_std", "emb_init_std", "alpha_output", "alpha_attn", "alpha_emb",
              "schedule", "momentum", "beta1", "beta2")
SCALE_COLUMNS = ("width_mult", "depth", "batch", "seq_len", "steps")
SWEEP_COLUMNS = HP_COLUMNS + SCALE_COLUMNS + ("width", "seed", "step", "train_loss", "val_loss", "diverged")
COORD_COLUMNS = ("activation", "width", "step", "metric", "seed")
LR_COLUMNS = ("width", "log2_lr", "mean_loss", "n_seeds")
SIZE_COLUMNS = ("activation", "step", "width", "mean_metric", "n_seeds")


def atomic_write(path: str | Path, text: str) -> Path:
    """Write via a temporary file in the same directory and rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def csv_text(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return atomic_write(path, csv_text(columns, rows))


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else ("inf" if f > 0 else "-inf" if f < 0 else "nan")
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if hasattr(o, "as_dict"):
        return _jsonable(o.as_dict())
    return o


def write_json(path: str | Path, obj) -> Path:
    return atomic_write(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# row builders


def sweep_rows(records: Iterable[SweepRecord]) -> list[list]:
    rows = []
    for r in records:
        hp = r.hp.as_dict()
        head = [hp.get(c) for c in HP_COLUMNS] + [getattr(r.scale, c) for c in SCALE_COLUMNS] + [r.width, r.seed]
        for step in sorted(r.checkpoints):
            rows.append(head + [step, r.loss("train_loss", step),
                                r.val_loss if step == r.scale.steps else None, r.diverged])
    return rows


def coord_rows(report: CoordCheckReport, metric: str = "delta_std") -> list[list]:
    return [[s.activation, s.width, s.step, getattr(s, metric), s.seed] for s in report.stats]


def lr_vs_loss_rows(records: Iterable[SweepRecord], metric: str = "train_loss") -> list[list]:
    by_width: dict[int, list[SweepRecord]] = {}
    for r in records:
        by_width.setdefault(r.width, []).append(r)
    rows = []
    for w in sorted(by_width):
        agg = aggregate(by_width[w], metric)
        for hp in sorted(agg, key=lambda h: h.get("master_lr", 0.0)):
            loss, n = agg[hp]
            rows.append([w, math.log2(hp["master_lr"]), loss, n])
    return rows


def coord_size_rows(report: CoordCheckReport) -> list[list]:
    counts: dict[tuple, int] = {}
    for s in report.stats:
        if not s.diverged:
            counts[(s.activation, s.width, s.step)] = counts.get((s.activation, s.width, s.step), 0) + 1
    table = report.mean_table("delta_std")
    return [[a, t, w, table[(a, w, t)], counts[(a, w, t)]]
            for (a, w, t) in sorted(table, key=lambda k: (k[0], k[2], k[1]))]


def coord_report_dict(report: CoordCheckReport, verdict) -> dict:
    fits = {}
    for (name, t), f in sorted(report.delta_fits.items()):
        fits.setdefault(name, {})[str(t)] = {"slope": f.slope, "intercept": f.intercept,
                                             "residual": f.residual, "n_points": f.n_points}
    init = {name: report.abs_fits[(name, 0)].slope for name in report.activations}
    return {"widths": report.widths, "steps": report.steps, "delta_fits": fits,
            "init_size_slopes": init, "diverged_widths": report.diverged_widths,
            "labels": verdict.labels, "worst_slope": verdict.worst, "verdict": verdict.overall}


def lawcheck_rows(checks: Iterable[LawCheck]) -> list[list]:
    return [[c.kind, c.correlated, n, s] for c in checks for n, s in zip(c.n_list, c.sizes)]


def emit_plotdata(out_dir: str | Path, records: Sequence[SweepRecord] = (),
                  coord: CoordCheckReport | None = None) -> list[Path]:
    """Write one CSV per figure analog: LR against loss per width, coordinate size against width."""
    out = Path(out_dir)
    paths = [write_csv(out / "lr_vs_loss.csv", LR_COLUMNS, lr_vs_loss_rows(records))]
    if coord is not None:
        paths.append(write_csv(out / "coordcheck_size.csv", SIZE_COLUMNS, coord_size_rows(coord)))
    return paths
