"""Figure-level drivers: Hahn-echo storage and retrieval, efficiency, echo-decay scans."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import simpson

from . import constants as K
from . import decoherence as dec
from .dynamics import Drive, IdealRotation, Idle, PulseSequence, RunResult, integrate_sequence
from .ensemble import (LAYOUTS, CouplingDistribution, EnsembleConfig, EnsembleModel,
                       discretize_ensemble)
from .pumping import PumpModel, calibrate_pump_model, polarization_after_pump
from .spectroscopy import CavityParams, drive_amplitude_for_photons

REFOCUS_MODES = ("realistic", "ideal", "none")
ATTENUATION_MODES = ("fit", "curve", "none")

# spread of the collective-scale couplings (inhomogeneous microwave field over the
# sample); it sets how far a nominal pi pulse misses for most spins
DEFAULT_COUPLING = CouplingDistribution.lognormal(1.0, 0.3)
DEFAULT_N_G = 4


def default_ensemble(**kw) -> EnsembleConfig:
    return EnsembleConfig(coupling=DEFAULT_COUPLING, **kw)


def _default_pump() -> PumpModel:
    return calibrate_pump_model()


@dataclass(frozen=True)
class ExperimentConfig:
    cavity: CavityParams = field(default_factory=CavityParams.from_q)
    ensemble: EnsembleConfig = field(default_factory=default_ensemble)
    bath: dec.BathSpec = field(default_factory=dec.BathSpec)
    pump: PumpModel = field(default_factory=_default_pump)
    T_L: float = 0.2
    tau: float = 50e-6
    n_photons: float = 60.0
    pulse_duration: float = 1e-6
    pi_duration: float = 1e-6
    refocus: str = "realistic"
    refocus_scale: float = 0.355  # amplitude relative to a mean-coupling pi pulse
    attenuation: str = "fit"
    n_freq: int = 2000
    n_g: int = DEFAULT_N_G
    coupling_layout: str = "product"
    sample_dt: float = 1e-8
    window_factor: float = 6.0
    gamma2_hom: float = 0.0
    decay_grid: tuple[float, float, int] = (0.0, 300e-6, 301)
    seed: int = 0

    def __post_init__(self):
        if self.refocus not in REFOCUS_MODES:
            raise ValueError(f"refocus must be one of {REFOCUS_MODES}")
        if self.attenuation not in ATTENUATION_MODES:
            raise ValueError(f"attenuation must be one of {ATTENUATION_MODES}")
        if not self.n_photons > 0:
            raise ValueError("n_photons must be > 0")
        if not (self.pulse_duration > 0 and self.pi_duration > 0):
            raise ValueError("pulse durations must be > 0")
        if not self.tau > max(self.pulse_duration, self.pi_duration):
            raise ValueError("tau must exceed the pulse durations")
        if not self.refocus_scale > 0:
            raise ValueError("refocus_scale must be > 0")
        if self.T_L < 0:
            raise ValueError("T_L must be >= 0")
        if self.window_factor <= 0:
            raise ValueError("window_factor must be > 0")
        if self.gamma2_hom < 0:
            raise ValueError("gamma2_hom must be >= 0")
        if self.coupling_layout not in LAYOUTS:
            raise ValueError(f"coupling_layout must be one of {LAYOUTS}")
        if self.n_freq < 3 or self.n_g < 1:
            raise ValueError("n_freq must be >= 3 and n_g >= 1")
        lo, hi, n = self.decay_grid
        if not (0 <= lo < hi and int(n) >= 8):
            raise ValueError("decay_grid needs 0 <= start < stop and >= 8 points")

    @property
    def polarization(self) -> float:
        return polarization_after_pump(self.pump, self.T_L)

    def with_(self, **kw) -> ExperimentConfig:
        return replace(self, **kw)


@dataclass
class EchoMetrics:
    E_absorbed: float
    E_echo: float
    efficiency: float
    echo_peak_time: float  # relative to the centre of the storage pulse
    echo_fwhm: float
    window_sensitivity: float = 0.0  # E(8 durations) / E(6 durations) - 1, before attenuation
    attenuation: float = 1.0  # amplitude factor L applied to the echo
    T2: float | None = None
    E_echo_raw: float = 0.0

    def as_dict(self) -> dict:
        return {"efficiency": self.efficiency, "E_absorbed_photons": self.E_absorbed,
                "E_echo_photons": self.E_echo, "echo_peak_time_s": self.echo_peak_time,
                "echo_fwhm_s": self.echo_fwhm, "T2_fit_s": self.T2,
                "echo_attenuation": self.attenuation, "E_echo_raw_photons": self.E_echo_raw,
                "window_sensitivity": self.window_sensitivity}


@dataclass
class EchoRun:
    trace: object  # TimeTrace of the driven run
    echo: np.ndarray  # background-subtracted output field
    metrics: EchoMetrics
    ensemble: EnsembleModel
    sequence: PulseSequence
    result: RunResult
    background: RunResult | None = None


def discretize_for(cfg: ExperimentConfig) -> EnsembleModel:
    return discretize_ensemble(cfg.ensemble, cfg.polarization, cfg.n_freq, cfg.n_g,
                               layout=cfg.coupling_layout)


def _snap(t: float, dt: float) -> float:
    return round(t / dt) * dt


def build_sequence(cfg: ExperimentConfig, ens: EnsembleModel, store: bool = True,
                   refocus: str | None = None, tail: float | None = None) -> PulseSequence:
    """theta pulse centred at T/2, refocusing pulse centred at T/2 + tau, record past 2 tau."""
    refocus = cfg.refocus if refocus is None else refocus
    dt = cfg.sample_dt
    T, Tp = cfg.pulse_duration, cfg.pi_duration
    amp = drive_amplitude_for_photons(cfg.n_photons, cfg.cavity) if store else 0.0
    segs = [Drive(amp, T) if store else Idle(T)]
    t_echo = T / 2 + 2 * cfg.tau
    tail = 5.0 * T if tail is None else tail
    if refocus == "realistic":
        g_mean = float(np.sum(ens.weight * ens.coupling))
        a_ss = math.pi * math.sqrt(ens.config.n_spins) / (2.0 * g_mean * Tp)
        amp_r = cfg.refocus_scale * a_ss * cfg.cavity.kappa / (2.0 * math.sqrt(cfg.cavity.kappa_ext))
        gap = _snap(cfg.tau - T / 2 - Tp / 2, dt)
        segs += [Idle(gap), Drive(amp_r, Tp)]
        used = T + gap + Tp
    else:
        gap = _snap(cfg.tau - T / 2, dt)
        segs.append(Idle(gap))
        if refocus == "ideal":
            segs.append(IdealRotation(math.pi))
        used = T + gap
    segs.append(Idle(_snap(t_echo + tail - used, dt)))
    return PulseSequence(segs, dt)


def _fwhm(t, y):
    k = int(np.argmax(y))
    half = 0.5 * y[k]
    left = np.nonzero(y[:k] < half)[0]
    right = np.nonzero(y[k:] < half)[0]
    if left.size == 0 or right.size == 0:
        return float("nan")
    i, j = left[-1], k + right[0]
    tl = np.interp(half, [y[i], y[i + 1]], [t[i], t[i + 1]])
    tr = np.interp(half, [y[j], y[j - 1]], [t[j], t[j - 1]])
    return float(tr - tl)


def bath_refocus(cfg: ExperimentConfig, ens: EnsembleModel) -> dec.RefocusDistribution:
    """Partner flip angles under the configured refocusing pulse."""
    if cfg.bath.refocus is not None:
        return cfg.bath.refocus
    if cfg.refocus == "ideal":
        return dec.RefocusDistribution.fixed(math.pi)
    if cfg.refocus == "none":
        return dec.RefocusDistribution.fixed(0.0)
    return dec.refocus_from_ensemble(ens.detuning, ens.coupling, ens.weight, cfg.pi_duration,
                                     cfg.refocus_scale)


def decay_decomposition(cfg: ExperimentConfig, ens: EnsembleModel | None = None,
                        threads: int | None = None) -> dec.DecayDecomposition:
    ens = ens if ens is not None else discretize_for(cfg)
    lo, hi, n = cfg.decay_grid
    grid = np.linspace(lo, hi, int(n))
    return dec.decompose(cfg.bath, grid, bath_refocus(cfg, ens), threads=threads)


def run_hahn_echo(cfg: ExperimentConfig, threads: int | None = None,
                  decomposition: dec.DecayDecomposition | None = None) -> EchoRun:
    """pump -> discretize -> integrate (theta, idle, refocus, idle) -> echo metrics.

    With a realistic refocusing pulse the same sequence without the storage pulse is run
    as well and subtracted, which removes the free-induction signal of the refocusing
    pulse itself (a two-shot background subtraction).
    """
    p = cfg.polarization
    ens = discretize_for(cfg)
    T = cfg.pulse_duration
    half_win = 0.5 * max(cfg.window_factor, 8.0) * T
    seq = build_sequence(cfg, ens, tail=half_win + 2.0 * T)
    res = integrate_sequence(ens, cfg.cavity, seq, gamma2=cfg.gamma2_hom)
    tr = res.trace
    bg = None
    echo = tr.a_out.copy()
    if cfg.refocus == "realistic":
        bg = integrate_sequence(ens, cfg.cavity, build_sequence(cfg, ens, store=False,
                                                                tail=half_win + 2.0 * T),
                                gamma2=cfg.gamma2_hom)
        echo = echo - bg.trace.a_out

    # storage window: from the start to the refocusing pulse
    t_ref = seq.segment_starts()[2]
    k = int(np.searchsorted(tr.t, t_ref - 1e-15))
    e_abs = float(tr.e_in[k] - tr.e_out[k])
    if cfg.refocus == "realistic":
        e_abs -= float(bg.trace.e_in[k] - bg.trace.e_out[k])

    t_echo = T / 2 + 2 * cfg.tau
    if t_echo + 0.5 * cfg.window_factor * T > tr.t[-1] + 1e-12:
        raise ValueError("echo window exceeds the simulated trace")

    def window_energy(width):
        w = tr.window(t_echo - 0.5 * width * T, t_echo + 0.5 * width * T)
        return float(simpson(np.abs(echo[w]) ** 2, x=tr.t[w])), w

    e_raw, w = window_energy(cfg.window_factor)
    e_wide, _ = window_energy(8.0)
    pw = np.abs(echo[w]) ** 2
    t_peak = float(tr.t[w][np.argmax(pw)] - T / 2)
    fwhm = _fwhm(tr.t[w], pw)

    L, T2 = 1.0, None
    if cfg.attenuation != "none" and cfg.refocus != "none":
        d = decomposition or decay_decomposition(cfg, ens, threads)
        T2 = float(d.T2)
        if cfg.attenuation == "fit":
            L = math.exp(-2.0 * cfg.tau / d.T2)
        else:
            L = float(np.interp(2.0 * cfg.tau, d.total.two_tau, d.total.L))
    e_echo = e_raw * L * L
    eff = e_echo / e_abs if e_abs > 0 else 0.0
    sens = e_wide / e_raw - 1.0 if e_raw > 0 else 0.0
    m = EchoMetrics(e_abs, e_echo, eff, t_peak, fwhm, sens, L, T2, e_raw)
    return EchoRun(tr, echo, m, ens, seq, res, bg)


def echo_efficiency(cfg: ExperimentConfig, threads: int | None = None) -> EchoMetrics:
    return run_hahn_echo(cfg, threads).metrics


@dataclass
class DecayScan:
    two_tau: np.ndarray
    amp_sim: np.ndarray
    L_c13: np.ndarray
    L_sd: np.ndarray
    L_id: np.ndarray
    L_total: np.ndarray
    amp: np.ndarray
    T2: float
    A0: float
    simulated: np.ndarray  # mask of tau points that were simulated (others interpolated)

    def residual(self) -> np.ndarray:
        return self.amp / (self.A0 * np.exp(-self.two_tau / self.T2)) - 1.0


def scan_echo_decay(cfg: ExperimentConfig, tau_list, sim_taus=None, threads: int | None = None,
                    bath: bool = True) -> DecayScan:
    """Echo amplitude vs 2 tau: A(2 tau) = A_sim(2 tau) * L_total(2 tau), exponential fit.

    A_sim is integrated at ``sim_taus`` (default: every tau) and interpolated linearly in
    between; with ``bath=False`` every L is 1 (the decoherence-off control).
    """
    taus = np.asarray(tau_list, float)
    if taus.ndim != 1 or taus.size < 2 or np.any(np.diff(taus) <= 0):
        raise ValueError("tau_list must be increasing with >= 2 entries")
    sim = taus if sim_taus is None else np.asarray(sim_taus, float)
    if np.any(np.diff(sim) <= 0) or sim[0] > taus[0] or sim[-1] < taus[-1]:
        raise ValueError("sim_taus must be increasing and cover tau_list")
    ens = discretize_for(cfg)
    cells = np.unique(ens.detuning)
    spacing = float(cells[1] - cells[0]) if cells.size > 1 else 0.0
    if spacing > 0:
        revival = 2.0 * math.pi / spacing
        need = 2.0 * sim[-1] + cfg.pulse_duration * (1 + cfg.window_factor)
        if revival < need:
            raise ValueError(f"bin spacing revives the signal after {revival * 1e6:.1f} us, "
                             f"before the last echo window ({need * 1e6:.1f} us); "
                             "raise n_freq")
    base = cfg.with_(attenuation="none")
    a_sim = np.array([math.sqrt(run_hahn_echo(base.with_(tau=float(t)), threads).metrics.E_echo)
                      for t in sim])
    amp_sim = np.interp(taus, sim, a_sim)
    two_tau = 2.0 * taus
    if bath:
        d = dec.decompose(cfg.bath, np.concatenate([[0.0], two_tau]), bath_refocus(cfg, ens),
                          threads=threads)
        Lc, Ls, Li = d.c13.L[1:], d.p1.L[1:], d.nv.L[1:]
    else:
        Lc = Ls = Li = np.ones_like(two_tau)
    Lt = Lc * Ls * Li
    amp = amp_sim * Lt
    m = amp > 0.1 * amp.max()
    if m.sum() >= 2 and np.ptp(np.log(amp[m])) > 1e-12:
        slope, icpt = np.polyfit(two_tau[m], np.log(amp[m]), 1)
        T2 = -1.0 / slope if slope < 0 else math.inf
        A0 = math.exp(icpt)
    else:
        T2, A0 = math.inf, float(amp.max())
    return DecayScan(two_tau, amp_sim, Lc, Ls, Li, Lt, amp, T2, A0, np.isin(taus, sim))
