"""Spectral and coupling structure of the NV ensemble, and its discretization into bins.

Frequencies are angular (rad/s) throughout. The ensemble is the hyperfine triplet of
the m_S=0 -> +1 transition of one field-aligned NV family; each hyperfine line has the
same lineshape of half-width ``line_hwhm``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import special

from . import constants as K

LINESHAPES = ("lorentzian", "gaussian")


@dataclass(frozen=True)
class CouplingDistribution:
    """Distribution of collective-scale coupling constants over the ensemble.

    ``kind`` is one of ``"delta"``, ``"lognormal"`` or ``"histogram"``. Only the shape
    matters downstream: discretization rescales the couplings so that the weighted
    second moment reproduces ``g_ens**2``.
    """

    kind: str = "delta"
    g0: float | None = None
    median: float = 1.0
    log_sd: float = 0.0
    values: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()
    clip_sd: float | None = None  # lognormal truncated at +-clip_sd standard deviations

    def __post_init__(self):
        if self.kind not in ("delta", "lognormal", "histogram"):
            raise ValueError(f"unknown coupling distribution kind {self.kind!r}")
        if self.kind == "delta" and self.g0 is not None and not self.g0 > 0:
            raise ValueError("delta coupling g0 must be > 0")
        if self.kind == "lognormal":
            if not self.median > 0 or not self.log_sd >= 0:
                raise ValueError("lognormal coupling needs median > 0 and log_sd >= 0")
            if self.clip_sd is not None and not self.clip_sd > 0:
                raise ValueError("lognormal clip_sd must be > 0")
        if self.kind == "histogram":
            v = np.asarray(self.values, float)
            w = np.asarray(self.weights, float)
            if v.size == 0 or v.shape != w.shape:
                raise ValueError("histogram coupling needs matching values and weights")
            if np.any(v <= 0) or np.any(w < 0):
                raise ValueError("histogram couplings must be > 0 with weights >= 0")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("histogram coupling weights must sum to 1")

    @classmethod
    def delta(cls, g0=None):
        return cls("delta", g0=g0)

    @classmethod
    def lognormal(cls, median, log_sd, clip_sd=None):
        return cls("lognormal", median=median, log_sd=log_sd, clip_sd=clip_sd)

    @classmethod
    def histogram(cls, values, weights):
        return cls("histogram", values=tuple(map(float, values)), weights=tuple(map(float, weights)))

    def nodes(self, n_g: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(values, weights)`` of an ``n_g``-point discretization (unnormalized scale)."""
        if n_g < 1:
            raise ValueError("n_g must be >= 1")
        if self.kind == "delta":
            g0 = 1.0 if self.g0 is None else self.g0
            return np.full(n_g, g0), np.full(n_g, 1.0 / n_g)
        if self.kind == "lognormal":
            if n_g == 1 or self.log_sd == 0:
                return np.full(n_g, self.median), np.full(n_g, 1.0 / n_g)
            # midpoints of equal-probability strata
            return self.quantile((np.arange(n_g) + 0.5) / n_g), np.full(n_g, 1.0 / n_g)
        values = np.asarray(self.values, float)
        weights = np.asarray(self.weights, float)
        if n_g != values.size:
            raise ValueError(f"histogram coupling has {values.size} values, n_g={n_g}")
        return values, weights

    def quantile(self, u) -> np.ndarray:
        """Inverse CDF (unnormalized scale) at probabilities ``u`` in (0, 1)."""
        u = np.asarray(u, float)
        if self.kind == "delta":
            return np.full(u.shape, 1.0 if self.g0 is None else self.g0)
        if self.kind == "lognormal":
            if self.clip_sd is not None:
                lo = special.ndtr(-self.clip_sd)
                u = lo + u * (1.0 - 2.0 * lo)
            return self.median * np.exp(self.log_sd * special.ndtri(u))
        values = np.asarray(self.values, float)
        order = np.argsort(values)
        cdf = np.cumsum(np.asarray(self.weights, float)[order])
        idx = np.minimum(np.searchsorted(cdf, u, side="right"), values.size - 1)
        return values[order][idx]


@dataclass(frozen=True)
class EnsembleConfig:
    zero_field_splitting: float = K.D_ZFS
    hyperfine_splitting: float = K.A_HF
    line_hwhm: float = K.LINE_HWHM
    lineshape: str = "lorentzian"
    g_ens: float = K.G_ENS
    gamma_e: float = K.GAMMA_E
    nv_axis_angle: float = K.NV_AXIS_ANGLE
    n_spins: float = K.N_SPINS
    coupling: CouplingDistribution = field(default_factory=CouplingDistribution)

    def __post_init__(self):
        for name in ("zero_field_splitting", "hyperfine_splitting", "line_hwhm", "g_ens",
                     "gamma_e", "n_spins"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value!r}")
        if not 0.0 <= self.nv_axis_angle <= math.pi / 2:
            raise ValueError("nv_axis_angle must lie in [0, pi/2]")
        if self.lineshape not in LINESHAPES:
            raise ValueError(f"lineshape must be one of {LINESHAPES}, got {self.lineshape!r}")

    @classmethod
    def measured_linewidth(cls, **kw):
        """Preset with a broader 200 kHz FWHM line (HWHM 2pi x 100 kHz) in place of the default width."""
        return cls(line_hwhm=K.TWO_PI * 100e3, **kw)


class SpinBin(NamedTuple):
    detuning: float
    coupling: float
    weight: float
    bloch: tuple[float, float, float]


@dataclass
class EnsembleModel:
    """Discretized ensemble: per-bin detuning, coupling, weight and Bloch state.

    The transverse state is stored as the per-spin coherence ``s = <sigma_minus>``
    ``= (u - i v) / 2``; ``z`` is the per-spin population inversion ``w^z``.
    """

    detuning: np.ndarray
    coupling: np.ndarray
    weight: np.ndarray
    s: np.ndarray
    z: np.ndarray
    polarization: float
    config: EnsembleConfig

    @property
    def n_bins(self) -> int:
        return self.detuning.size

    @property
    def bloch(self) -> np.ndarray:
        return np.stack([2.0 * self.s.real, -2.0 * self.s.imag, self.z], axis=-1)

    @property
    def bins(self) -> list[SpinBin]:
        b = self.bloch
        return [SpinBin(float(d), float(g), float(w), tuple(map(float, v)))
                for d, g, w, v in zip(self.detuning, self.coupling, self.weight, b)]

    def copy(self) -> EnsembleModel:
        return replace(self, s=self.s.copy(), z=self.z.copy())

    def reset(self, p: float | None = None) -> EnsembleModel:
        """Fresh copy with every bin at (0, 0, -p)."""
        p = self.polarization if p is None else p
        return replace(self, s=np.zeros_like(self.s), z=np.full_like(self.z, -p), polarization=p)

    def collective_coupling(self) -> float:
        return math.sqrt(float(np.sum(self.weight * self.coupling**2)))


def _unit_line_cdf(x, hwhm, lineshape):
    if lineshape == "lorentzian":
        return 0.5 + np.arctan(x / hwhm) / math.pi
    sigma = hwhm / math.sqrt(2.0 * math.log(2.0))
    return 0.5 * special.erfc(-x / (sigma * math.sqrt(2.0)))


def _unit_line(x, hwhm, lineshape):
    if lineshape == "lorentzian":
        return hwhm / math.pi / (x * x + hwhm * hwhm)
    sigma = hwhm / math.sqrt(2.0 * math.log(2.0))
    return np.exp(-0.5 * (x / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))


def triplet_density(omega, cfg: EnsembleConfig, center: float = 0.0):
    """Normalized spectral density (s/rad) of the hyperfine triplet centred on ``center``."""
    omega = np.asarray(omega, dtype=float)
    if not np.all(np.isfinite(omega)):
        raise ValueError("triplet_density: non-finite frequency")
    x = omega - center
    a, h = cfg.hyperfine_splitting, cfg.line_hwhm
    out = (_unit_line(x + a, h, cfg.lineshape) + _unit_line(x, h, cfg.lineshape)
           + _unit_line(x - a, h, cfg.lineshape)) / 3.0
    return out if out.ndim else float(out)


def triplet_cdf(omega, cfg: EnsembleConfig, center: float = 0.0):
    x = np.asarray(omega, dtype=float) - center
    a, h = cfg.hyperfine_splitting, cfg.line_hwhm
    return (_unit_line_cdf(x + a, h, cfg.lineshape) + _unit_line_cdf(x, h, cfg.lineshape)
            + _unit_line_cdf(x - a, h, cfg.lineshape)) / 3.0


def default_span(cfg: EnsembleConfig) -> float:
    """Half-width of the frequency window, enough for >99% of the Lorentzian triplet mass."""
    return cfg.hyperfine_splitting + 60.0 * cfg.line_hwhm


LAYOUTS = ("product", "interleaved")
LAYOUT_SEED = 20150301


def discretize_ensemble(cfg: EnsembleConfig, p: float, n_freq: int = 2000, n_g: int = 1,
                        span: float | None = None, layout: str = "product") -> EnsembleModel:
    """Tile ``[-span, span]`` with ``n_freq`` uniform cells and attach couplings.

    ``layout="product"`` crosses every cell with ``n_g`` equal-probability coupling classes.
    ``layout="interleaved"`` gives each cell a single coupling: the stratified quantiles
    (k + 1/2)/n_freq of the distribution, dealt to the cells by a fixed pseudo-random
    permutation (``n_g`` is then ignored). A random deal is used because any regular
    pattern of couplings across the frequency comb would revive the free-induction signal
    at a fraction of the comb period.
    Cell weights are the exact integral of the triplet density over each cell, renormalized
    to the covered mass. Couplings are rescaled so that ``sum(w g^2) == g_ens**2``.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"layout must be one of {LAYOUTS}, got {layout!r}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"polarization must lie in [0, 1], got {p}")
    if n_freq < 3:
        raise ValueError("n_freq must be >= 3")
    span = default_span(cfg) if span is None else float(span)
    if span < cfg.hyperfine_splitting + 10.0 * cfg.line_hwhm:
        raise ValueError(f"span {span:.4g} rad/s is below A + 10*line_hwhm")
    edges = np.linspace(-span, span, n_freq + 1)
    cdf = triplet_cdf(edges, cfg)
    mass = np.diff(cdf)
    covered = cdf[-1] - cdf[0]
    if covered < 0.99:
        raise ValueError(f"span covers only {covered:.2%} of the triplet density (need 99%)")
    f_weight = mass / mass.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])

    if layout == "interleaved":
        perm = np.random.default_rng(LAYOUT_SEED).permutation(n_freq)
        u = (perm + 0.5) / n_freq
        weight = f_weight.copy()
        detuning = centers
        coupling = cfg.coupling.quantile(u)
    else:
        g_vals, g_w = cfg.coupling.nodes(n_g)
        weight = np.outer(f_weight, g_w).ravel()
        weight /= weight.sum()
        detuning = np.repeat(centers, n_g)
        coupling = np.tile(g_vals, n_freq)
    coupling = coupling * (cfg.g_ens / math.sqrt(float(np.sum(weight * coupling**2))))
    n = detuning.size
    return EnsembleModel(detuning, coupling, weight, np.zeros(n, complex), np.full(n, -float(p)),
                         float(p), cfg)


def zeeman_frequency(B, cfg: EnsembleConfig | None = None):
    """Transition frequency (rad/s) of the m_S=0 -> +1 branch in the linear low-field model."""
    cfg = cfg or EnsembleConfig()
    B = np.asarray(B, dtype=float)
    if not np.all(np.isfinite(B)) or np.any(B < 0):
        raise ValueError("zeeman_frequency: field must be finite and >= 0")
    out = cfg.zero_field_splitting + cfg.gamma_e * B * math.cos(cfg.nv_axis_angle)
    return out if out.ndim else float(out)


def resonant_field(omega: float, cfg: EnsembleConfig | None = None) -> float:
    cfg = cfg or EnsembleConfig()
    return (omega - cfg.zero_field_splitting) / (cfg.gamma_e * math.cos(cfg.nv_axis_angle))


def effective_coupling(g_ens: float, p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"polarization must lie in [0, 1], got {p}")
    return g_ens * math.sqrt(p)
