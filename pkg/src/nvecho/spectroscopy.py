"""Frequency-domain response of the resonator + spin ensemble, and its calibration fits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal, special

from . import constants as K
from .ensemble import EnsembleConfig, EnsembleModel, zeeman_frequency


@dataclass(frozen=True)
class CavityParams:
    omega_r: float = K.OMEGA_R
    kappa_ext: float = K.OMEGA_R / K.Q_LOADED
    kappa_int: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.omega_r) and self.omega_r > 0):
            raise ValueError("omega_r must be > 0")
        if not self.kappa_ext > 0:
            raise ValueError("kappa_ext must be > 0")
        if not self.kappa_int >= 0:
            raise ValueError("kappa_int must be >= 0")

    @classmethod
    def from_q(cls, omega_r: float = K.OMEGA_R, q: float = K.Q_LOADED, kappa_int: float = 0.0):
        if not q > 0:
            raise ValueError(f"Q must be > 0, got {q}")
        return cls(omega_r, omega_r / q - kappa_int, kappa_int)

    @property
    def kappa(self) -> float:
        return self.kappa_ext + self.kappa_int

    @property
    def q(self) -> float:
        return self.omega_r / self.kappa


@dataclass
class ReflectionSpectrum:
    frequencies: np.ndarray  # rad/s
    s11: np.ndarray


@dataclass
class FitResult:
    params: dict[str, float]
    stderr: dict[str, float]
    residual_norm: float
    converged: bool
    iterations: int
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]


def _line_response(x, hwhm, lineshape, gamma_hom):
    """int rho(w') / (i (w' - w) + gamma_hom) dw' for a unit-area line, x = w_line - w."""
    if lineshape == "lorentzian":
        return 1.0 / (1j * x + hwhm + gamma_hom)
    # Gaussian line: i*sqrt(pi)/(sigma sqrt2) * w(z), Faddeeva with z = (-x + i gamma)/(sigma sqrt 2)
    sigma = hwhm / math.sqrt(2.0 * math.log(2.0))
    zz = (-x + 1j * gamma_hom) / (sigma * math.sqrt(2.0))
    return -1j * math.sqrt(math.pi) / (sigma * math.sqrt(2.0)) * special.wofz(zz)


def spin_susceptibility(omega, ens: EnsembleModel | EnsembleConfig, p: float | None = None,
                        center: float = 0.0, gamma_hom: float = 0.0, discrete: bool = False):
    """Spin load W(omega) on the cavity, in rad/s.

    By default the continuous triplet lineshape is used (exact for the configured line);
    ``discrete=True`` sums over the bins of an :class:`EnsembleModel` instead, which needs
    ``gamma_hom`` of the order of the bin spacing to avoid comb artifacts.
    """
    omega = np.asarray(omega, dtype=float)
    if isinstance(ens, EnsembleModel):
        cfg = ens.config
        p = ens.polarization if p is None else p
    else:
        cfg = ens
        if p is None:
            raise ValueError("polarization required with an EnsembleConfig")
    if discrete:
        if not isinstance(ens, EnsembleModel):
            raise TypeError("discrete susceptibility needs an EnsembleModel")
        det = center + ens.detuning
        gw = ens.weight * ens.coupling**2
        return p * np.sum(gw[None, :] / (1j * (det[None, :] - omega[..., None]) + gamma_hom), axis=-1)
    a = cfg.hyperfine_splitting
    chi = sum(_line_response(center + m * a - omega, cfg.line_hwhm, cfg.lineshape, gamma_hom)
              for m in (-1, 0, 1)) / 3.0
    return p * cfg.g_ens**2 * chi


def reflection_coefficient(omega, cav: CavityParams, load=0.0):
    """S11 = 1 - kappa_ext / (i (omega - omega_r) + kappa/2 + conj(W)).

    Phase convention: the phase winds down by 2 pi as omega crosses omega_r. The
    time-domain output of :mod:`nvecho.dynamics` (``a_out = sqrt(kappa_ext) a - a_in``,
    frame rotating as exp(-i omega t)) equals ``-conj(S11)`` times the input.
    """
    omega = np.asarray(omega, dtype=float)
    return 1.0 - cav.kappa_ext / (1j * (omega - cav.omega_r) + 0.5 * cav.kappa + np.conj(load))


def reflection_spectrum(grid, cav: CavityParams, ens: EnsembleModel | None = None,
                        center: float | None = None, gamma_hom: float = 0.0) -> ReflectionSpectrum:
    """Reflection of a weak probe; the spin triplet sits at ``center`` (default omega_r)."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("reflection_spectrum: empty frequency grid")
    load = 0.0
    if ens is not None:
        center = cav.omega_r if center is None else center
        load = spin_susceptibility(grid, ens, center=center, gamma_hom=gamma_hom)
    return ReflectionSpectrum(grid, reflection_coefficient(grid, cav, load))


def field_scan(b_grid, probe: float, cav: CavityParams, ens_cfg: EnsembleConfig, p: float,
               gamma_hom: float = 0.0, complex_out: bool = False) -> np.ndarray:
    """|S11| (or complex S11) at fixed probe frequency while the field sweeps the triplet."""
    b = np.asarray(b_grid, dtype=float)
    if b.size < 2 or not (np.all(np.diff(b) > 0) or np.all(np.diff(b) < 0)):
        raise ValueError("field_scan: field grid must be strictly monotone")
    centers = zeeman_frequency(b, ens_cfg)
    load = spin_susceptibility(np.full_like(b, probe), ens_cfg, p=p, center=centers,
                               gamma_hom=gamma_hom)
    s11 = reflection_coefficient(probe, cav, load)
    return s11 if complex_out else np.abs(s11)


def local_minima(y) -> np.ndarray:
    y = np.asarray(y)
    return np.flatnonzero((y[1:-1] < y[:-2]) & (y[1:-1] < y[2:])) + 1


def cooperativity(g_eff: float, kappa: float, gamma: float, scale: float = 1.0) -> float:
    """C = scale * g_eff^2 / (kappa * gamma), gamma being the line half-width."""
    if not (g_eff >= 0 and kappa > 0 and gamma > 0 and scale > 0):
        raise ValueError("cooperativity: rates must be positive")
    return scale * g_eff**2 / (kappa * gamma)


def ensemble_cooperativity(p: float, cfg: EnsembleConfig | None = None,
                           cav: CavityParams | None = None) -> float:
    """C = p g_ens^2 / (kappa * Gamma), Gamma the full inhomogeneous linewidth (2 x HWHM).

    kappa is the full cavity energy decay rate (omega_r / Q), so both widths are FWHM.
    """
    cfg = cfg or EnsembleConfig()
    cav = cav or CavityParams()
    if not 0.0 <= p <= 1.0:
        raise ValueError("polarization must lie in [0, 1]")
    return cooperativity(math.sqrt(p) * cfg.g_ens, cav.kappa, 2.0 * cfg.line_hwhm)


def calibrate_cooperativity_scale(c_target: float, p: float, cfg: EnsembleConfig | None = None,
                                  cav: CavityParams | None = None) -> float:
    """Scale factor making ``cooperativity`` return ``c_target`` at polarization ``p``."""
    cfg = cfg or EnsembleConfig()
    cav = cav or CavityParams()
    return c_target * cav.kappa * cfg.line_hwhm / (p * cfg.g_ens**2)


def mean_photons(p_in: float, cav: CavityParams) -> float:
    """Resonant steady-state intracavity photon number for input power ``p_in`` (W)."""
    if p_in < 0:
        raise ValueError("input power must be >= 0")
    return 4.0 * cav.kappa_ext * p_in / (K.HBAR * cav.omega_r * cav.kappa**2)


def power_for_photons(n_bar: float, cav: CavityParams) -> float:
    return n_bar * K.HBAR * cav.omega_r * cav.kappa**2 / (4.0 * cav.kappa_ext)


def drive_amplitude_for_photons(n_bar: float, cav: CavityParams) -> float:
    """Input amplitude (sqrt(photons/s)) giving ``n_bar`` photons on resonance, no spins."""
    return math.sqrt(n_bar) * cav.kappa / (2.0 * math.sqrt(cav.kappa_ext))


# --- fitting -------------------------------------------------------------------------

def _covariance(res) -> np.ndarray:
    j = res.jac
    dof = max(1, j.shape[0] - j.shape[1])
    s2 = 2.0 * res.cost / dof
    try:
        return np.linalg.inv(j.T @ j) * s2
    except np.linalg.LinAlgError:
        return np.full((j.shape[1], j.shape[1]), np.inf)


def _lm(fun, x0, x_scale=1.0, max_iter=200, xtol=1e-10):
    res = optimize.least_squares(fun, x0, method="lm", x_scale=x_scale, xtol=xtol, ftol=1e-12,
                                 gtol=1e-12, max_nfev=max_iter * (len(x0) + 1))
    return res


def fit_resonator(spectrum: ReflectionSpectrum, max_iter: int = 200) -> FitResult:
    """Fit the phase of a bare, lossless single-port resonator: (omega_r, Q, phase offset)."""
    w = np.asarray(spectrum.frequencies, float)
    s = np.asarray(spectrum.s11, complex)
    phase = np.unwrap(np.angle(s))
    slope = np.gradient(phase, w)
    k = int(np.argmax(np.abs(slope)))
    w0 = w[k]
    kappa0 = 4.0 / abs(slope[k])
    if np.ptp(w) < 5.0 * kappa0:
        raise ValueError("fit_resonator: spectrum must span at least 5 linewidths")
    sign = 1.0 if slope[k] < 0 else -1.0
    phi0 = float(np.angle(s[k] / reflection_coefficient(w0, CavityParams(w0, kappa0))))

    def model(x):
        dw, q, off = x
        wr = w0 * (1.0 + dw)
        kap = wr / q
        r = 1.0 - kap / (1j * sign * (w - wr) + 0.5 * kap)
        return r * np.exp(1j * off)

    def resid(x):
        return np.angle(s * np.conj(model(x)))

    x0 = np.array([0.0, w0 / kappa0, phi0])
    res = _lm(resid, x0, x_scale=np.array([1e-4, x0[1] * 0.01, 0.01]), max_iter=max_iter)
    cov = _covariance(res)
    dw, q, off = res.x
    wr = w0 * (1.0 + dw)
    err = np.sqrt(np.clip(np.diag(cov), 0, np.inf))
    converged = bool(res.success and res.status > 0)
    return FitResult({"omega_r": wr, "Q": q, "phase_offset": off},
                     {"omega_r": w0 * err[0], "Q": err[1], "phase_offset": err[2]},
                     float(np.linalg.norm(res.fun)), converged, int(res.nfev),
                     extra={"kappa": wr / q, "phase_sign": sign})


def three_lorentzians(x, baseline, *p):
    y = np.full_like(np.asarray(x, float), baseline)
    for c, hw, d in zip(p[0::3], p[1::3], p[2::3]):
        y = y - d / (1.0 + ((x - c) / hw) ** 2)
    return y


def fit_triplet(x, y, max_iter: int = 200) -> FitResult:
    """Baseline minus three Lorentzian dips; returns centres, FWHM linewidths and depths."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    depth_scale = y.max() - y.min()
    peaks, props = signal.find_peaks(-y, prominence=0.2 * depth_scale)
    if peaks.size < 3:
        raise ValueError(f"fit_triplet: found {peaks.size} dips, need 3")
    top = np.sort(peaks[np.argsort(props["prominences"])[-3:]])
    base = float(np.median(y))
    widths = signal.peak_widths(-y, top, rel_height=0.5)[0] * np.mean(np.diff(x))
    p0 = [base]
    for i, k in enumerate(top):
        p0 += [x[k], max(widths[i] / 2.0, abs(x[1] - x[0])), base - y[k]]
    p0 = np.asarray(p0)
    scale = np.abs(p0) + 1e-30
    scale[0] = depth_scale
    for i in range(3):
        scale[1 + 3 * i] = widths.mean()

    def resid(p):
        return three_lorentzians(x, *p) - y

    res = _lm(resid, p0, x_scale=scale, max_iter=max_iter)
    cov = _covariance(res)
    err = np.sqrt(np.clip(np.diag(cov), 0, np.inf))
    params = {"baseline": res.x[0]}
    stderr = {"baseline": err[0]}
    order = np.argsort(res.x[1::3])
    for n, i in enumerate(order):
        c, hw, d = res.x[1 + 3 * i: 4 + 3 * i]
        ec, ehw, ed = err[1 + 3 * i: 4 + 3 * i]
        params.update({f"center{n}": c, f"fwhm{n}": 2 * abs(hw), f"depth{n}": d})
        stderr.update({f"center{n}": ec, f"fwhm{n}": 2 * ehw, f"depth{n}": ed})
    return FitResult(params, stderr, float(np.linalg.norm(res.fun)),
                     bool(res.success and res.status > 0), int(res.nfev))
