import json
import math
from pathlib import Path

import numpy as np
import pytest

from nvecho import cli_io
from nvecho import constants as K
from nvecho.cli_io import (ConfigError, Settings, config_to_dict, defaults_table, dump_config,
                           load_config, main, parse_config, parse_quantity, run_subcommand,
                           table_bytes)
from nvecho.dynamics import IntegrationError

GOLDEN = Path(__file__).parent / "golden"

FAST_TOML = """
[experiment]
n_freq = 400
n_g = 2
tau = "8 us"
refocus = "ideal"
decay_stop = "60 us"
decay_points = 61

[bath]
n_configs = 3
n_traj = 2000
id_samples = 2000
bath_radius = "4 nm"

[run]
decay_tau_start = "4 us"
decay_tau_stop = "10 us"
decay_tau_points = 4
decay_sim_points = 2
spectrum_points = 401
scan_points = 401
pump_points = 21
"""


@pytest.fixture
def fast_config(tmp_path):
    p = tmp_path / "fast.toml"
    p.write_text(FAST_TOML)
    return p


@pytest.mark.parametrize("text,dim,value", [
    ("2.915 GHz", "angfreq", 2 * math.pi * 2.915e9),
    ("1 Hz", "angfreq", 2 * math.pi),
    ("1.74 mT", "field", 1.74e-3),
    ("50 us", "time", 50e-6),
    ("50 μs", "time", 50e-6),
    ("0.5 nm", "length", 0.5e-9),
    ("30 dBm", "power", 1.0),
    ("213 ppm", "ppm", 213.0),
    ("10.705 MHz/T", "gyro", 2 * math.pi * 10.705e6),
    (650, "number", 650.0),
    ("3e3 rad/s", "angfreq", 3e3),
])
def test_parse_quantity(text, dim, value):
    assert parse_quantity(text, dim) == pytest.approx(value, rel=1e-15)


def test_decimal_prefixes_are_exact():
    assert parse_quantity("50 us", "time") == 50e-6
    assert parse_quantity("1.74 mT", "field") == 1.74e-3


@pytest.mark.parametrize("text,token", [("2.9 GHZ", "GHZ"), ("abc mT", "abc"),
                                        ("1.0 mT", "mT")])
def test_bad_units_name_the_token(text, token):
    dim = "field" if token != "mT" else "time"
    with pytest.raises(ConfigError, match=token):
        parse_quantity(text, dim, "x")


def test_empty_experiment_gives_defaults():
    s = parse_config("[experiment]\n")
    e = s.experiment
    assert e.cavity.omega_r == pytest.approx(2 * math.pi * 2.915e9)
    assert e.cavity.q == pytest.approx(650)
    assert e.ensemble.g_ens == pytest.approx(2 * math.pi * 410e3)
    assert (e.bath.c13_ppm, e.bath.p1_ppm, e.bath.nv_ppm) == (213.0, 0.6, 0.2)
    assert e.bath.B == 1.74e-3
    assert e.tau == 50e-6


def test_round_trip_is_identity(fast_config):
    s = cli_io.load_settings(fast_config)
    text = dump_config(s)
    s2 = parse_config(text)
    assert s2 == s
    assert dump_config(s2) == text
    d = parse_config("[experiment]\n")
    assert parse_config(dump_config(d)) == d


def test_units_in_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[cavity]\nomega_r = "2.9 GHz"\nQ = 500\n[bath]\nB = "18 G"\n'
                 '[experiment]\ntau = "40 us"\n')
    cfg = load_config(p)
    assert cfg.cavity.omega_r == pytest.approx(2 * math.pi * 2.9e9)
    assert cfg.cavity.q == pytest.approx(500)
    assert cfg.bath.B == pytest.approx(1.8e-3)
    assert cfg.tau == 40e-6


@pytest.mark.parametrize("text,match", [
    ('[cavity]\nQ = "-5"\n[experiment]\n', "Q > 0"),
    ('[cavity]\nfoo = 1\n[experiment]\n', "foo"),
    ('[bogus]\n[experiment]\n', "bogus"),
    ('[cavity]\nQ = 600\n', "experiment"),
    ('[pump]\nalpha = 0.5\n[experiment]\n', "tau1"),
    ('[experiment]\ntau = "50 parsecs"\n', "parsecs"),
    ('[experiment]\nrefocus = "sometimes"\n', "refocus"),
    ('[cavity]\nQ = 600\nkappa_ext = 1e6\n[experiment]\n', "either Q or kappa_ext"),
    ('[experiment\n', "cannot parse"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/x.toml")


def test_defaults_table_covers_schema():
    rows = defaults_table()
    keys = {r[0] for r in rows}
    assert "cavity.omega_r" in keys and "bath.c13_ppm" in keys and "experiment.tau" in keys
    assert len(keys) == len(rows)


def test_csv_format():
    b = table_bytes({"x": np.array([0.1, 1e-20, 3.0]), "n": np.array([1, 2, 3])})
    text = b.decode()
    assert "\r" not in text
    lines = text.split("\n")
    assert lines[0] == "x,n"
    assert lines[1] == "0.1,1" and lines[2] == "1e-20,2"
    assert float(lines[1].split(",")[0]) == 0.1
    with pytest.raises(ValueError):
        table_bytes({"a": [1, 2], "b": [1]})
    j = json.loads(table_bytes({"x": np.array([0.5])}, "json"))
    assert j == {"x": [0.5]}


def test_decay_golden_header(fast_config, tmp_path):
    s = cli_io.load_settings(fast_config)
    man = run_subcommand("decay", s, tmp_path / "d")
    got = (tmp_path / "d" / "decay.csv").read_text().split("\n")[0] + "\n"
    assert got == (GOLDEN / "decay_header.csv").read_text()
    assert set(man.files) == {"decay.csv", "summary.json"}
    rows = np.loadtxt(tmp_path / "d" / "decay.csv", delimiter=",", skiprows=1)
    assert rows.shape == (4, 6)
    assert np.allclose(rows[:, 5], rows[:, 2] * rows[:, 3] * rows[:, 4])


def test_spectroscopy_round_trip(tmp_path):
    run_subcommand("spectroscopy", Settings(), tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["omega_r_fit_Hz"] == pytest.approx(2.915e9, rel=1e-4)
    assert summary["Q_fit"] == pytest.approx(650, rel=0.02)
    head = (tmp_path / "spectrum.csv").read_text().split("\n")[0]
    assert head == "x,re,im"


def test_manifest_checksums(fast_config, tmp_path):
    s = cli_io.load_settings(fast_config)
    man = run_subcommand("pump-curve", s, tmp_path, svg=True)
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert data["files"] == man.files
    for name, sha in man.files.items():
        assert cli_io.sha256_file(tmp_path / name) == sha
    assert "pump_curve.svg" in man.files
    assert (tmp_path / "pump_curve.csv").read_text().startswith("T_L_s,p\n")
    assert data["seeds"] == {"experiment": 0, "bath": 0}
    assert parse_config(cli_io.tomli_w.dumps(data["config"])) == s


def test_cli_echo_seed_deterministic(fast_config, tmp_path):
    args = ["echo", "--config", str(fast_config), "--seed", "7", "--svg"]
    assert main(args + ["--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["files"] == mb["files"]
    assert ma["seeds"] == {"experiment": 7, "bath": 7}
    head = (tmp_path / "a" / "trace.csv").read_text().split("\n")[0]
    assert head == "t_s,aout_re,aout_im,acav_re,acav_im,dip_re,dip_im"
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    for k in ("efficiency", "E_absorbed_photons", "E_echo_photons", "echo_peak_time_s",
              "T2_fit_s", "config"):
        assert k in summary


def test_cli_json_format(fast_config, tmp_path):
    assert main(["decoherence", "--config", str(fast_config), "--format", "json",
                 "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "L_total.json").read_text())
    assert set(d) == {"two_tau_s", "L"} and d["L"][0] == 1.0
    assert (tmp_path / "bath_config.json").exists()


def test_cli_exit_codes(fast_config, tmp_path, monkeypatch, capsys):
    assert main(["nonsense"]) == 2
    assert main([]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text('[cavity]\nQ = "-5"\n[experiment]\n')
    assert main(["echo", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "Q > 0" in capsys.readouterr().err
    assert main(["echo", "--seed", "-1", "--out", str(tmp_path)]) == 2

    def boom(*a, **k):
        raise IntegrationError("non-finite state")

    monkeypatch.setitem(cli_io._RUNNERS, "echo", boom)
    assert main(["echo", "--config", str(fast_config), "--out", str(tmp_path)]) == 3
    assert main(["--dump-config"]) == 0
    assert "[experiment]" in capsys.readouterr().out
