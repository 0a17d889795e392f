import csv
import json
import os

import pytest
from hypothesis import given, settings, strategies as st

from mupar import cli
from mupar.config import (
    SCHEMA, ConfigError, RunConfig, apply_overrides, bundled_config_path, load_config, parse_config,
    serialize_config,
)
from mupar.report import COORD_COLUMNS, LR_COLUMNS, atomic_write, emit_plotdata, write_csv
from mupar.transfer import default_workers

WORD = st.text(st.sampled_from("abcdefghijklmnopqrstuvwxyz0123456789-_./"), min_size=1, max_size=12)
FLOAT = st.floats(allow_nan=False, allow_infinity=False, width=64)
VALUES = {
    "int": st.integers(-10 ** 6, 10 ** 6),
    "float": FLOAT,
    "str": WORD,
    "bool": st.booleans(),
    "ints": st.lists(st.integers(-1000, 10 ** 6), max_size=5),
    "floats": st.lists(FLOAT, max_size=5),
    "strs": st.lists(WORD, max_size=5),
}


@st.composite
def configs(draw):
    cfg = RunConfig()
    for sec, keys in SCHEMA.items():
        chosen = draw(st.lists(st.sampled_from(sorted(keys)), unique=True, max_size=4))
        for key in chosen:
            cfg.values.setdefault(sec, {})[key] = draw(VALUES[keys[key][0]])
    return cfg


@settings(max_examples=60, deadline=None)
@given(configs())
def test_config_round_trip(cfg):
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("[model]\nwidth_of_everything = 3\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[optimiser]\nlr = 3\n")
    with pytest.raises(ConfigError):
        parse_config("[model]\nbase_width = 3\nbase_width = 4\n")
    with pytest.raises(ConfigError):
        parse_config("[model]\nbase_width = wide\n")


def test_power_of_two_syntax():
    cfg = parse_config("[search]\nmaster_lr = 2^-3:2^-1, 0.75\n[hp]\nmaster_lr = 2^-9\n")
    assert cfg.get("search", "master_lr") == [0.125, 0.25, 0.5, 0.75]
    assert cfg.get("hp", "master_lr") == 2 ** -9


def test_defaults_and_overrides():
    cfg = parse_config("[model]\nkind = mlp\n")
    assert cfg.get("model", "base_width") == 64
    assert cfg.get("hp", "master_lr") is None
    apply_overrides(cfg, ["model.base_width=128", "experiment.seeds=3,4"])
    assert cfg.get("model", "base_width") == 128 and cfg.get("experiment", "seeds") == [3, 4]
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["base_width=3"])
    with pytest.raises(ConfigError):
        cfg.get("model", "nope")


@pytest.mark.parametrize("name", cli.COMMANDS)
def test_bundled_configs_parse(name):
    cfg = load_config(bundled_config_path(name))
    assert cfg.get("experiment", "seeds")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_atomic_write_keeps_old_file_on_failure(tmp_path):
    p = tmp_path / "out.csv"
    atomic_write(p, "old\n")
    with pytest.raises(TypeError):
        atomic_write(p, 123)
    assert p.read_text() == "old\n"
    assert os.listdir(tmp_path) == ["out.csv"]


def test_empty_records_header_only(tmp_path):
    [path] = emit_plotdata(tmp_path, [])
    assert path.read_text() == ",".join(LR_COLUMNS) + "\n"


def test_csv_cells(tmp_path):
    p = write_csv(tmp_path / "x.csv", ("a", "b", "c", "d"), [[1.5, float("inf"), True, None]])
    assert p.read_text().splitlines() == ["a,b,c,d", "1.5,inf,true,"]


def test_workers_env(monkeypatch):
    monkeypatch.setenv("MUPAR_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.delenv("MUPAR_WORKERS")
    assert default_workers() == 1


# ---------------------------------------------------------------------------
# subcommands


def run(tmp_path, *argv):
    return cli.main([*argv, "--output-dir", str(tmp_path), "--no-plots"])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def write_cfg(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return str(p)


TINY_MLP = """
[experiment]
seeds = 0
[model]
kind = mlp
scheme = mup-t8
base_width = 16
[task]
name = teacher
n_train = 256
[search]
master_lr = 2^-8:2^-5
[scale]
depth = 2
batch = 16
steps = 10
[ladder]
width_mults = 1, 2
"""


def test_cli_unknown_key_exit_2(tmp_path, capsys):
    path = write_cfg(tmp_path, "[model]\nwidht = 3\n")
    assert run(tmp_path, "sweep", "--config", path) == 2
    assert "unknown key" in capsys.readouterr().err


def test_cli_bad_override_exit_2(tmp_path):
    assert run(tmp_path, "primer", "--set", "primer.n=many") == 2


def test_cli_no_viable_hp_exit_3(tmp_path):
    path = write_cfg(tmp_path, TINY_MLP.replace("2^-8:2^-5", "2^7:2^8"))
    assert run(tmp_path, "sweep", "--config", path) == 3


def test_cli_sweep_outputs(tmp_path):
    path = write_cfg(tmp_path, TINY_MLP)
    assert cli.main(["sweep", "--config", path, "--output-dir", str(tmp_path)]) == 0
    sweep_rows = rows(tmp_path / "sweep.csv")
    assert len(sweep_rows) == 1 + 4 * 2
    lr = rows(tmp_path / "lr_vs_loss.csv")
    assert lr[0] == list(LR_COLUMNS) and len(lr) == 1 + 8
    assert (tmp_path / "lr_vs_loss.png").stat().st_size > 0
    report = json.loads((tmp_path / "sweep_report.json").read_text())
    assert set(report["best"]) == {"16", "32"}
    assert load_config(tmp_path / "config.cfg") == load_config(path)


def test_cli_transfer_report(tmp_path):
    path = write_cfg(tmp_path, TINY_MLP + "[transfer]\ntarget_width_mult = 2\n")
    assert run(tmp_path, "transfer", "--config", path) == 0
    report = json.loads((tmp_path / "transfer_report.json").read_text())
    assert report["target_width"] == 32 and report["oracle_loss"] is not None


def test_cli_widthscan_and_reverse(tmp_path):
    path = write_cfg(tmp_path, TINY_MLP + "[hp]\nmaster_lr = 2^-6\n[reverse]\nfrom_sim_width = 64\n"
                                          "to_sim_width = 32\n")
    assert run(tmp_path, "widthscan", "--config", path) == 0
    assert json.loads((tmp_path / "widthscan_report.json").read_text())["widths"] == [16, 32]
    assert run(tmp_path, "reverse", "--config", path) == 0
    assert len(json.loads((tmp_path / "reverse_report.json").read_text())["replicated"]) == 1


def test_cli_coordcheck_csv_schema(tmp_path):
    path = write_cfg(tmp_path, TINY_MLP + "[coordcheck]\nwidths = 16, 32, 64, 128\nsteps = 2\nbatch = 8\n")
    assert run(tmp_path, "coordcheck", "--config", path) == 0
    r = rows(tmp_path / "coordcheck.csv")
    assert r[0] == list(COORD_COLUMNS)
    assert json.loads((tmp_path / "coordcheck_report.json").read_text())["verdict"] in ("pass", "fail")


def test_cli_coordcheck_rejects_narrow_widths(tmp_path):
    path = write_cfg(tmp_path, TINY_MLP + "[coordcheck]\nwidths = 8, 32, 64\n")
    assert run(tmp_path, "coordcheck", "--config", path) == 2


def test_cli_primer(tmp_path):
    assert run(tmp_path, "primer", "--n", "64,256", "--set", "primer.samples=20000") == 0
    r = rows(tmp_path / "primer.csv")
    assert r[0][:2] == ["n", "alpha_star"]
    assert [x[0] for x in r[1:]] == ["64", "256"]


def test_cli_lawcheck(tmp_path):
    assert run(tmp_path, "lawcheck", "--set", "lawcheck.n=128,256,512", "--set", "lawcheck.reps=5") == 0
    report = json.loads((tmp_path / "lawcheck_report.json").read_text())
    assert set(report) == {"gaussian", "tensor_product", "nonlinear_tensor_product", "vector"}
