"""Configuration files with explicit units, tabular output, run manifests and the command line.

A configuration is a TOML file with one table per component::

    [cavity]
    omega_r = "2.915 GHz"
    Q = 650

    [bath]
    B = "1.74 mT"

    [experiment]
    tau = "50 us"

Quantities are strings ``"<number> <unit>"`` or bare numbers in the canonical SI unit
(``rad/s`` for frequencies, so ``"1 Hz"`` becomes 2 pi rad/s). The ``[experiment]`` table
is required, everything else falls back to the defaults in :func:`defaults_table`.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import re
import sys
import time
from decimal import Decimal
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import __version__
from . import constants as K
from . import decoherence as dec
from .dynamics import IntegrationError, StepPolicyError
from .ensemble import CouplingDistribution, EnsembleConfig, resonant_field
from .experiments import (DEFAULT_COUPLING, ExperimentConfig, bath_refocus, discretize_for,
                          run_hahn_echo, scan_echo_decay)
from .pumping import PumpModel, calibrate_pump_model, polarization_after_pump, pump_curve, \
    repetition_rate
from .spectroscopy import (CavityParams, field_scan, fit_resonator, fit_triplet, local_minima,
                           reflection_spectrum)

SUBCOMMANDS = ("spectroscopy", "field-scan", "pump-curve", "echo", "decay", "efficiency",
               "decoherence")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    """Bad configuration: unknown or missing key, malformed unit, failed validation."""


# --- units ---------------------------------------------------------------------------

_W = K.TWO_PI
# unit -> (power of ten, extra factor); decimal prefixes are applied exactly, so
# "50 us" parses to the same float as 50e-6
UNITS = {
    "angfreq": {"rad/s": (0, 1.0), "Hz": (0, _W), "kHz": (3, _W), "MHz": (6, _W),
                "GHz": (9, _W)},
    "time": {"s": (0, 1.0), "ms": (-3, 1.0), "us": (-6, 1.0), "μs": (-6, 1.0),
             "µs": (-6, 1.0), "ns": (-9, 1.0)},
    "field": {"T": (0, 1.0), "mT": (-3, 1.0), "uT": (-6, 1.0), "μT": (-6, 1.0), "G": (-4, 1.0)},
    "length": {"m": (0, 1.0), "um": (-6, 1.0), "μm": (-6, 1.0), "nm": (-9, 1.0),
               "pm": (-12, 1.0)},
    "power": {"W": (0, 1.0), "mW": (-3, 1.0), "uW": (-6, 1.0), "μW": (-6, 1.0),
              "nW": (-9, 1.0), "dBm": None},
    "gyro": {"rad/s/T": (0, 1.0), "Hz/T": (0, _W), "kHz/T": (3, _W), "MHz/T": (6, _W),
             "GHz/T": (9, _W), "MHz/mT": (9, _W)},
    "density": {"m^-3": (0, 1.0), "cm^-3": (6, 1.0), "nm^-3": (27, 1.0)},
    "ppm": {"ppm": (0, 1.0), "ppb": (-3, 1.0)},
    "angle": {"rad": (0, 1.0), "deg": (0, math.pi / 180.0)},
}
CANONICAL = {"angfreq": "rad/s", "time": "s", "field": "T", "length": "m", "power": "W",
             "gyro": "rad/s/T", "density": "m^-3", "ppm": "ppm", "angle": "rad"}
_QTY = re.compile(r"\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?inf)\s*(\S*)\s*")


def parse_quantity(value, dim: str, key: str = "value") -> float:
    """Convert ``"2.915 GHz"`` (or a bare number, taken as canonical SI) to a float."""
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a quantity, got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a quantity string, got {type(value).__name__}")
    m = _QTY.fullmatch(value)
    if m is None:
        tok = value.split()[0] if value.split() else value
        raise ConfigError(f"{key}: malformed quantity {value!r} (offending token {tok!r})")
    tok, unit = m.group(1), m.group(2)
    num = float(tok)
    if dim == "number":
        if unit:
            raise ConfigError(f"{key}: dimensionless value takes no unit (offending token {unit!r})")
        return num
    table = UNITS[dim]
    if unit == "":
        return num
    if unit not in table:
        raise ConfigError(f"{key}: unknown unit {unit!r} (expected one of {', '.join(table)})")
    if unit == "dBm":
        return 1e-3 * 10.0 ** (num / 10.0)
    exp, factor = table[unit]
    if exp and math.isfinite(num):
        num = float(Decimal(tok).scaleb(exp))
    return num * factor if factor != 1.0 else num


def format_quantity(v: float, dim: str):
    if dim == "number":
        return float(v)
    return f"{float(v)!r} {CANONICAL[dim]}"


# --- schema --------------------------------------------------------------------------
# dims: a unit family, "number", "int", "str", "numbers" (list), "opt:<dim>" (may be "auto")

SCHEMA: dict[str, dict[str, str]] = {
    "cavity": {"omega_r": "angfreq", "Q": "number", "kappa_ext": "angfreq",
               "kappa_int": "angfreq"},
    "ensemble": {"zero_field_splitting": "angfreq", "hyperfine_splitting": "angfreq",
                 "line_hwhm": "angfreq", "lineshape": "str", "g_ens": "angfreq",
                 "gamma_e": "gyro", "nv_axis_angle": "angle", "n_spins": "number"},
    "ensemble.coupling": {"kind": "str", "g0": "opt:number", "median": "number",
                          "log_sd": "number", "clip_sd": "opt:number", "values": "numbers",
                          "weights": "numbers"},
    "bath": {"c13_ppm": "ppm", "p1_ppm": "ppm", "nv_ppm": "ppm", "B": "field",
             "carbon_density": "density", "gamma_e": "gyro", "gamma_c13": "gyro",
             "bath_radius": "length", "n_configs": "int", "seed": "int",
             "nv_axis_angle": "angle", "lattice_constant": "length", "core_radius": "length",
             "pair_cutoff": "length", "p1_linewidth": "angfreq", "sd_tau_c": "opt:time",
             "sd_delta": "opt:angfreq", "n_traj": "int", "id_samples": "int"},
    "pump": {"p_max": "number", "alpha": "number", "tau1": "time", "tau2": "time",
             "laser_power": "power", "dead_time": "time"},
    "experiment": {"T_L": "time", "tau": "time", "n_photons": "number",
                   "pulse_duration": "time", "pi_duration": "time", "refocus": "str",
                   "refocus_scale": "number", "attenuation": "str", "n_freq": "int",
                   "n_g": "int", "coupling_layout": "str", "sample_dt": "time",
                   "window_factor": "number", "gamma2_hom": "angfreq", "decay_start": "time",
                   "decay_stop": "time", "decay_points": "int", "seed": "int"},
    "run": {"spectrum_span": "angfreq", "spectrum_points": "int", "spectrum_noise": "number",
            "scan_probe": "opt:angfreq", "scan_center": "opt:field", "scan_span": "field",
            "scan_points": "int", "pump_T_max": "time", "pump_points": "int",
            "decay_tau_start": "time", "decay_tau_stop": "time", "decay_tau_points": "int",
            "decay_sim_points": "int"},
}
REQUIRED_SECTIONS = ("experiment",)
DOC = {
    "cavity.omega_r": "resonator frequency", "cavity.Q": "loaded quality factor (> 0)",
    "cavity.kappa_ext": "coupling rate (alternative to Q)", "cavity.kappa_int": "internal loss",
    "ensemble.zero_field_splitting": "NV zero-field splitting D",
    "ensemble.hyperfine_splitting": "14N hyperfine splitting A",
    "ensemble.line_hwhm": "inhomogeneous HWHM per hyperfine line",
    "ensemble.lineshape": "lorentzian | gaussian",
    "ensemble.g_ens": "collective coupling at full polarization",
    "ensemble.gamma_e": "electron gyromagnetic ratio",
    "ensemble.nv_axis_angle": "angle between B and the NV axis",
    "ensemble.n_spins": "number of spins (sets the saturation scale)",
    "ensemble.coupling.kind": "delta | lognormal | histogram",
    "ensemble.coupling.log_sd": "lognormal spread of the single-spin couplings",
    "bath.c13_ppm": "13C concentration", "bath.p1_ppm": "P1 concentration",
    "bath.nv_ppm": "NV concentration", "bath.B": "static field for the echo",
    "bath.p1_linewidth": "P1 flip-flop rate scale (sets the SD correlation time)",
    "bath.n_configs": "CCE bath configurations", "bath.n_traj": "SD Monte Carlo trajectories",
    "pump.p_max": "saturated polarization", "pump.alpha": "fast-component weight",
    "pump.tau1": "fast pump time", "pump.tau2": "slow pump time",
    "pump.dead_time": "per-shot dead time", "experiment.T_L": "laser pulse duration",
    "experiment.tau": "pulse separation", "experiment.n_photons": "mean photons of the storage pulse",
    "experiment.refocus": "realistic | ideal | none",
    "experiment.refocus_scale": "refocusing amplitude / mean-coupling pi amplitude",
    "experiment.attenuation": "fit | curve | none (bath factor on the echo)",
    "experiment.n_freq": "frequency bins", "experiment.n_g": "coupling classes",
    "experiment.window_factor": "echo window in pulse durations",
}


@dataclass(frozen=True)
class RunParams:
    """Grid settings of the individual subcommands."""

    spectrum_span: float = K.TWO_PI * 40e6
    spectrum_points: int = 2001
    spectrum_noise: float = 0.01
    scan_probe: float | None = None  # None -> omega_r
    scan_center: float | None = None  # None -> resonant field of the probe
    scan_span: float = 0.6e-3
    scan_points: int = 1201
    pump_T_max: float = 2.0
    pump_points: int = 201
    decay_tau_start: float = 10e-6
    decay_tau_stop: float = 70e-6
    decay_tau_points: int = 13
    decay_sim_points: int = 4

    def __post_init__(self):
        if not self.spectrum_span > 0 or self.spectrum_points < 16:
            raise ValueError("spectrum_span must be > 0 and spectrum_points >= 16")
        if self.spectrum_noise < 0:
            raise ValueError("spectrum_noise must be >= 0")
        if not self.scan_span > 0 or self.scan_points < 16:
            raise ValueError("scan_span must be > 0 and scan_points >= 16")
        if not self.pump_T_max > 0 or self.pump_points < 2:
            raise ValueError("pump_T_max must be > 0 and pump_points >= 2")
        if not 0 < self.decay_tau_start < self.decay_tau_stop:
            raise ValueError("need 0 < decay_tau_start < decay_tau_stop")
        if self.decay_tau_points < 3 or not 2 <= self.decay_sim_points <= self.decay_tau_points:
            raise ValueError("need decay_tau_points >= 3 and 2 <= decay_sim_points <= decay_tau_points")


@dataclass(frozen=True)
class Settings:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    run: RunParams = field(default_factory=RunParams)


def _convert(value, dim: str, key: str):
    if dim.startswith("opt:"):
        if isinstance(value, str) and value.strip().lower() in ("auto", "none"):
            return None
        return _convert(value, dim[4:], key)
    if dim == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string")
        return value
    if dim == "int":
        if isinstance(value, str) and re.fullmatch(r"\s*\d+\s*", value):
            return int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if dim == "numbers":
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list of numbers")
        return tuple(parse_quantity(v, "number", key) for v in value)
    return parse_quantity(value, dim, key)


def _section(doc: dict, name: str) -> dict:
    node = doc
    for part in name.split("."):
        node = node.get(part, {}) if isinstance(node, dict) else {}
    if not isinstance(node, dict):
        raise ConfigError(f"[{name}] must be a table")
    return node


def _check_keys(doc: dict):
    for key, val in doc.items():
        if key not in ("cavity", "ensemble", "bath", "pump", "experiment", "run"):
            raise ConfigError(f"unknown key {key!r} (top level)")
        if not isinstance(val, dict):
            raise ConfigError(f"{key!r} must be a table")
        allowed = set(SCHEMA[key])
        if key == "ensemble":
            allowed.add("coupling")
        for k in val:
            if k not in allowed:
                raise ConfigError(f"unknown key {k!r} in [{key}]")
    for k in _section(doc, "ensemble.coupling"):
        if k not in SCHEMA["ensemble.coupling"]:
            raise ConfigError(f"unknown key {k!r} in [ensemble.coupling]")
    for sec in REQUIRED_SECTIONS:
        if sec not in doc:
            raise ConfigError(f"missing required key {sec!r} (the [{sec}] table, may be empty)")


def _parsed(doc: dict, name: str) -> dict:
    sec = _section(doc, name)
    dims = SCHEMA[name]
    return {k: _convert(v, dims[k], f"{name}.{k}") for k, v in sec.items() if k in dims}


def _build(where: str, fn, **kw):
    try:
        return fn(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{where}] {err}") from None


def settings_from_dict(doc: dict) -> Settings:
    _check_keys(doc)
    c = _parsed(doc, "cavity")
    if "Q" in c and "kappa_ext" in c:
        raise ConfigError("[cavity] give either Q or kappa_ext, not both")
    if "Q" in c:
        if not c["Q"] > 0:
            raise ConfigError(f"Q must satisfy Q > 0 (got {c['Q']!r})")
        cav = _build("cavity", CavityParams.from_q, omega_r=c.get("omega_r", K.OMEGA_R),
                     q=c["Q"], kappa_int=c.get("kappa_int", 0.0))
    elif "kappa_ext" in c:
        cav = _build("cavity", CavityParams, **c)
    else:
        cav = _build("cavity", CavityParams.from_q, omega_r=c.get("omega_r", K.OMEGA_R),
                     kappa_int=c.get("kappa_int", 0.0))

    cp = _parsed(doc, "ensemble.coupling")
    coupling = _build("ensemble.coupling", lambda **kw: replace(DEFAULT_COUPLING, **kw), **cp) if cp \
        else DEFAULT_COUPLING
    ens = _build("ensemble", EnsembleConfig, coupling=coupling, **_parsed(doc, "ensemble"))
    bath = _build("bath", dec.BathSpec, **_parsed(doc, "bath"))

    pp = _parsed(doc, "pump")
    shape = [k for k in ("alpha", "tau1", "tau2") if k in pp]
    if shape and len(shape) < 3:
        missing = next(k for k in ("alpha", "tau1", "tau2") if k not in pp)
        raise ConfigError(f"missing required key {missing!r} in [pump] "
                          "(alpha, tau1 and tau2 go together)")
    if shape:
        pump = _build("pump", PumpModel, **pp)
    else:
        pump = _build("pump", calibrate_pump_model, **pp)

    ex = _parsed(doc, "experiment")
    lo, hi, n = ExperimentConfig.__dataclass_fields__["decay_grid"].default
    grid = (ex.pop("decay_start", lo), ex.pop("decay_stop", hi), ex.pop("decay_points", n))
    cfg = _build("experiment", ExperimentConfig, cavity=cav, ensemble=ens, bath=bath, pump=pump,
                 decay_grid=grid, **ex)
    run = _build("run", RunParams, **_parsed(doc, "run"))
    return Settings(cfg, run)


def parse_config(text: str) -> Settings:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"cannot parse configuration: {err}") from None
    return settings_from_dict(doc)


def load_settings(path) -> Settings:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


def load_config(path) -> ExperimentConfig:
    return load_settings(path).experiment


def _emit(obj, section: str, skip=()) -> dict:
    out = {}
    for k, dim in SCHEMA[section].items():
        if k in skip:
            continue
        v = getattr(obj, k)
        if v is None:
            out[k] = "auto"
        elif dim.startswith("opt:"):
            out[k] = format_quantity(v, dim[4:])
        elif dim == "str":
            out[k] = v
        elif dim == "int":
            out[k] = int(v) if int(v) < 2**63 else str(int(v))
        elif dim == "numbers":
            out[k] = [float(x) for x in v]
        else:
            out[k] = format_quantity(v, dim)
    return out


def config_to_dict(cfg: ExperimentConfig | Settings) -> dict:
    """Canonical (SI, explicit units, shortest float repr) form of a configuration."""
    s = cfg if isinstance(cfg, Settings) else Settings(cfg)
    e = s.experiment
    cav = {"omega_r": format_quantity(e.cavity.omega_r, "angfreq"),
           "kappa_ext": format_quantity(e.cavity.kappa_ext, "angfreq"),
           "kappa_int": format_quantity(e.cavity.kappa_int, "angfreq")}
    ens = _emit(e.ensemble, "ensemble")
    ens["coupling"] = _emit(e.ensemble.coupling, "ensemble.coupling")
    ex = _emit(e, "experiment", skip=("decay_start", "decay_stop", "decay_points"))
    lo, hi, n = e.decay_grid
    ex.update(decay_start=format_quantity(lo, "time"), decay_stop=format_quantity(hi, "time"),
              decay_points=int(n))
    return {"cavity": cav, "ensemble": ens, "bath": _emit(e.bath, "bath"),
            "pump": _emit(e.pump, "pump"), "experiment": ex, "run": _emit(s.run, "run")}


def dump_config(cfg: ExperimentConfig | Settings) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def defaults_table() -> list[tuple[str, str, str]]:
    """(key, default, description) rows for every configuration key."""
    d = config_to_dict(Settings())
    rows = []
    for sec in ("cavity", "ensemble", "ensemble.coupling", "bath", "pump", "experiment", "run"):
        node = _section(d, sec)
        for k, v in node.items():
            if isinstance(v, dict):
                continue
            rows.append((f"{sec}.{k}", str(v), DOC.get(f"{sec}.{k}", "")))
    return rows


# --- output --------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def table_bytes(columns: dict, fmt: str = "csv") -> bytes:
    """Columns (name -> 1-D array) as CSV (header, LF, repr floats) or JSON."""
    names = list(columns)
    cols = [np.asarray(columns[k]) for k in names]
    n = {c.shape[0] for c in cols}
    if len(n) != 1:
        raise ValueError("table columns must have equal length")
    if fmt == "json":
        data = {k: [_json_value(v) for v in c.tolist()] for k, c in zip(names, cols)}
        return (json.dumps(data, indent=1) + "\n").encode()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in zip(*cols):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue().encode()


def _json_value(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_json_value(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {str(k): _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    return v


def json_bytes(obj) -> bytes:
    return (json.dumps(_json_value(obj), indent=2, sort_keys=True) + "\n").encode()


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seeds: dict
    version: str
    files: dict = field(default_factory=dict)  # name -> sha256
    timings: dict = field(default_factory=dict)  # seconds, not reproducible

    def to_json(self) -> bytes:
        return json_bytes(asdict(self))


class _Writer:
    def __init__(self, out: Path, fmt: str):
        self.out, self.fmt, self.files = out, fmt, {}

    def write(self, name: str, data: bytes) -> Path:
        p = self.out / name
        p.write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()
        return p

    def table(self, stem: str, columns: dict) -> Path:
        ext = "json" if self.fmt == "json" else "csv"
        return self.write(f"{stem}.{ext}", table_bytes(columns, self.fmt))

    def svg(self, name: str, plot, *args, **kw):
        p = plot(self.out / name, *args, **kw)
        self.files[name] = sha256_file(p)


# --- subcommands ---------------------------------------------------------------------

def _spectroscopy(s: Settings, w: _Writer, svg: bool, threads):
    cfg, run = s.experiment, s.run
    cav = cfg.cavity
    grid = cav.omega_r + np.linspace(-0.5, 0.5, run.spectrum_points) * run.spectrum_span
    spec = reflection_spectrum(grid, cav)
    rng = np.random.default_rng(cfg.seed)
    noise = run.spectrum_noise * (rng.standard_normal(grid.size) + 1j * rng.standard_normal(grid.size))
    spec = replace(spec, s11=spec.s11 + noise)
    fit = fit_resonator(spec)
    f_hz = grid / K.TWO_PI
    w.table("spectrum", {"x": f_hz, "re": spec.s11.real, "im": spec.s11.imag})
    if svg:
        from .plotting import spectrum_plot
        w.svg("spectrum.svg", spectrum_plot, f_hz, spec.s11)
    return {"omega_r_fit_Hz": fit["omega_r"] / K.TWO_PI, "Q_fit": fit["Q"],
            "omega_r_Hz": cav.omega_r / K.TWO_PI, "Q": cav.q,
            "omega_r_stderr_Hz": fit.stderr["omega_r"] / K.TWO_PI, "Q_stderr": fit.stderr["Q"],
            "converged": fit.converged}


def _field_scan(s: Settings, w: _Writer, svg: bool, threads):
    cfg, run = s.experiment, s.run
    probe = cfg.cavity.omega_r if run.scan_probe is None else run.scan_probe
    center = resonant_field(probe, cfg.ensemble) if run.scan_center is None else run.scan_center
    b = center + np.linspace(-0.5, 0.5, run.scan_points) * run.scan_span
    s11 = field_scan(b, probe, cfg.cavity, cfg.ensemble, cfg.polarization, complex_out=True)
    mag = np.abs(s11)
    minima = local_minima(mag)
    w.table("field_scan", {"x": b, "re": s11.real, "im": s11.imag})
    summary = {"probe_Hz": probe / K.TWO_PI, "polarization": cfg.polarization,
               "n_minima": int(minima.size), "minima_T": b[minima]}
    try:
        fit = fit_triplet(b, mag)
        summary["triplet_fit"] = fit.params
    except ValueError as err:
        summary["triplet_fit"] = f"failed: {err}"
    if svg:
        from .plotting import field_scan_plot
        w.svg("field_scan.svg", field_scan_plot, b, s11, minima)
    return summary


def _pump_curve(s: Settings, w: _Writer, svg: bool, threads):
    cfg, run = s.experiment, s.run
    T, p = pump_curve(cfg.pump, run.pump_T_max, run.pump_points)
    w.table("pump_curve", {"T_L_s": T, "p": p})
    seq = cfg.pulse_duration / 2 + 2 * cfg.tau + 0.5 * cfg.window_factor * cfg.pulse_duration
    rates = {f"{tl!r}": repetition_rate(cfg.pump, tl, seq) for tl in (0.1, 0.2)}
    if svg:
        from .plotting import line_plot
        w.svg("pump_curve.svg", line_plot, T, {"p": p}, "T_L (s)", "polarization")
    return {"p_max": cfg.pump.p_max, "alpha": cfg.pump.alpha, "tau1_s": cfg.pump.tau1,
            "tau2_s": cfg.pump.tau2, "repetition_rate_Hz": rates,
            "relative": {f"{tl!r}": cfg.pump.relative(tl) for tl in (0.1, 0.2, 1.0)},
            "polarization_at_T_L": polarization_after_pump(cfg.pump, cfg.T_L)}


def _echo_common(s: Settings, threads):
    return run_hahn_echo(s.experiment, threads=threads)


def _echo(s: Settings, w: _Writer, svg: bool, threads):
    cfg = s.experiment
    r = _echo_common(s, threads)
    tr = r.trace
    w.table("trace", {"t_s": tr.t, "aout_re": tr.a_out.real, "aout_im": tr.a_out.imag,
                      "acav_re": tr.a_cav.real, "acav_im": tr.a_cav.imag,
                      "dip_re": tr.collective_dipole.real, "dip_im": tr.collective_dipole.imag})
    w.table("echo", {"t_s": tr.t, "echo_re": r.echo.real, "echo_im": r.echo.imag})
    if svg:
        from .plotting import echo_plot
        T = cfg.pulse_duration
        w.svg("echo.svg", echo_plot, tr.t, r.echo, T / 2, T / 2 + 2 * cfg.tau)
    return r.metrics.as_dict()


def _efficiency(s: Settings, w: _Writer, svg: bool, threads):
    r = _echo_common(s, threads)
    m = r.metrics.as_dict()
    w.table("efficiency", {k: [np.nan if v is None else v] for k, v in m.items()})
    if svg:
        from .plotting import echo_plot
        cfg = s.experiment
        T = cfg.pulse_duration
        w.svg("echo.svg", echo_plot, r.trace.t, r.echo, T / 2, T / 2 + 2 * cfg.tau)
    return m


def _decay(s: Settings, w: _Writer, svg: bool, threads):
    cfg, run = s.experiment, s.run
    taus = np.linspace(run.decay_tau_start, run.decay_tau_stop, run.decay_tau_points)
    sim = np.linspace(run.decay_tau_start, run.decay_tau_stop, run.decay_sim_points)
    d = scan_echo_decay(cfg, taus, sim_taus=sim, threads=threads)
    w.table("decay", {"two_tau_s": d.two_tau, "amp": d.amp, "L_c13": d.L_c13, "L_sd": d.L_sd,
                      "L_id": d.L_id, "L_total": d.L_total})
    if svg:
        from .plotting import decay_plot
        w.svg("decay.svg", decay_plot, d.two_tau, d.amp, (d.T2, d.A0),
              {"13C": d.L_c13, "P1 (SD)": d.L_sd, "NV (ID)": d.L_id, "total": d.L_total})
    return {"T2_fit_s": d.T2, "A0": d.A0, "simulated_two_tau_s": 2 * sim}


def _decoherence(s: Settings, w: _Writer, svg: bool, threads):
    cfg = s.experiment
    lo, hi, n = cfg.decay_grid
    grid = np.linspace(lo, hi, int(n))
    ens = discretize_for(cfg)
    refocus = bath_refocus(cfg, ens)
    d = dec.decompose(cfg.bath, grid, refocus, threads=threads)
    curves = {"L_c13": d.c13, "L_sd": d.p1, "L_id": d.nv, "L_total": d.total}
    for name, c in curves.items():
        w.table(name, {"two_tau_s": c.two_tau, "L": c.L})
    conf = dec.sample_bath(cfg.bath, "c13", seed=cfg.bath.seed, index=0)
    w.table("bath_config", {"x_m": conf.positions[:, 0], "y_m": conf.positions[:, 1],
                            "z_m": conf.positions[:, 2], "species": conf.species})
    try:
        f_c13 = dec.oscillation_frequency(d.c13) / K.TWO_PI
    except ValueError:
        f_c13 = float("nan")
    if svg:
        from .plotting import line_plot
        w.svg("decoherence.svg", line_plot, grid * 1e6, {k: c.L for k, c in curves.items()},
              "2 tau (us)", "L")
    delta, tau_c = d.sd_params
    return {"T2_fit_s": d.T2, "A0": d.amplitude, "T_id_s": d.t_id, "sd_tau_c_s": tau_c,
            "sd_delta_rad_s": delta, "c13_oscillation_Hz": f_c13,
            "c13_larmor_Hz": cfg.bath.gamma_c13 * cfg.bath.B / K.TWO_PI,
            "mean_flip": refocus.mean_flip()}


_RUNNERS = {"spectroscopy": _spectroscopy, "field-scan": _field_scan, "pump-curve": _pump_curve,
            "echo": _echo, "decay": _decay, "efficiency": _efficiency,
            "decoherence": _decoherence}


def with_seed(s: Settings, seed: int | None) -> Settings:
    if seed is None:
        return s
    if not 0 <= seed < 2**64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")
    e = s.experiment
    return replace(s, experiment=e.with_(seed=seed, bath=replace(e.bath, seed=seed)))


def run_subcommand(name: str, cfg: ExperimentConfig | Settings, out_dir, svg: bool = False,
                   fmt: str = "csv", threads: int | None = None) -> RunManifest:
    """Run one experiment, write its tables, ``summary.json``, plots and ``manifest.json``."""
    if name not in _RUNNERS:
        raise ConfigError(f"unknown subcommand {name!r}; choose from {', '.join(SUBCOMMANDS)}")
    if fmt not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    s = cfg if isinstance(cfg, Settings) else Settings(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    w = _Writer(out, fmt)
    t0 = time.perf_counter()
    result = _RUNNERS[name](s, w, svg, threads)
    elapsed = time.perf_counter() - t0
    conf = config_to_dict(s)
    w.write("summary.json", json_bytes({"subcommand": name, **result, "config": conf}))
    e = s.experiment
    man = RunManifest(name, conf, {"experiment": e.seed, "bath": e.bath.seed}, __version__,
                      dict(sorted(w.files.items())), {"run_s": elapsed})
    (out / "manifest.json").write_bytes(man.to_json())
    return man


# --- command line --------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nvecho", description="NV-ensemble microwave memory simulator")
    ap.add_argument("command", nargs="?", choices=SUBCOMMANDS, metavar="COMMAND",
                    help=" | ".join(SUBCOMMANDS))
    ap.add_argument("--config", type=Path, help="TOML configuration (default: built-in defaults)")
    ap.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    ap.add_argument("--seed", type=int, help="seed for every random stream (unsigned 64-bit)")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads (default: all cores, or NVECHO_THREADS)")
    ap.add_argument("--svg", action="store_true", help="also write SVG line plots")
    ap.add_argument("--format", choices=("csv", "json"), default="csv", dest="fmt",
                    help="format of the tabular outputs")
    ap.add_argument("--dump-config", action="store_true",
                    help="print the canonical configuration and exit")
    return ap


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse: usage error -> 2, --help -> 0
        return int(exc.code or 0)
    try:
        s = load_settings(args.config) if args.config else parse_config("[experiment]\n")
        s = with_seed(s, args.seed)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.dump_config:
            sys.stdout.write(dump_config(s))
            return EXIT_OK
        if args.command is None:
            ap.print_usage(sys.stderr)
            return EXIT_CONFIG
        threads = args.threads or dec.default_threads()
        man = run_subcommand(args.command, s, args.out, args.svg, args.fmt, threads)
    except (IntegrationError, StepPolicyError, FloatingPointError, ArithmeticError,
            np.linalg.LinAlgError) as err:
        print(f"nvecho: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as err:
        print(f"nvecho: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as err:
        print(f"nvecho: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{args.command}: wrote {len(man.files)} files to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
