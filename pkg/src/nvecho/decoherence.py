"""Echo attenuation L(2 tau) from the nuclear, P1 and NV baths.

Three independent mechanisms are modelled and multiplied:

* 13C nuclei: pair-order cluster-correlation expansion (CCE-2) of the Hahn echo with
  the electron treated as a two-level system in {m_S=0, m_S=+1}; an exact-diagonalization
  routine for small baths serves as an oracle.
* P1 centres: spectral diffusion from Ornstein-Uhlenbeck frequency noise, sampled
  exactly on the time grid and checked against the Gaussian cumulant closed form.
* NV centres: instantaneous diffusion from resonant partners flipped by the refocusing
  pulse, rate from a Poisson-gas Monte Carlo.

All frequencies are angular (rad/s); lengths in metres.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import constants as K

SPECIES = ("c13", "p1", "nv")
_SPECIES_CODE = {"c13": 13, "p1": 7, "nv": 14}

# spin-1/2 operators
_SX = np.array([[0, 0.5], [0.5, 0]], complex)
_SY = np.array([[0, -0.5j], [0.5j, 0]], complex)
_SZ = np.array([[0.5, 0], [0, -0.5]], complex)
_SPIN = np.stack([_SX, _SY, _SZ])
_I2 = np.eye(2, dtype=complex)


def default_threads() -> int:
    env = os.environ.get("NVECHO_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _map(fn, items, threads):
    """Ordered map; results come back in input order whatever the worker count."""
    items = list(items)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *keys]))


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class RefocusDistribution:
    """Discrete distribution of refocusing rotation angles seen by partner spins."""

    angles: tuple[float, ...] = (math.pi,)
    weights: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        a = np.asarray(self.angles, float)
        w = np.asarray(self.weights, float)
        if a.size == 0 or a.shape != w.shape:
            raise ValueError("refocus distribution needs matching, non-empty angles/weights")
        if np.any(w < 0) or not np.all(np.isfinite(a)):
            raise ValueError("refocus distribution: weights must be >= 0 and angles finite")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("refocus distribution weights must sum to 1")

    @classmethod
    def fixed(cls, angle: float) -> RefocusDistribution:
        return cls((float(angle),), (1.0,))

    def mean_flip(self) -> float:
        """<sin^2(theta/2)>, the mean partner flip probability."""
        a = np.asarray(self.angles)
        return float(np.dot(self.weights, np.sin(a / 2.0) ** 2))


@dataclass(frozen=True)
class BathSpec:
    c13_ppm: float = 213.0
    p1_ppm: float = 0.6
    nv_ppm: float = 0.2
    B: float = K.B_ECHO
    carbon_density: float = 1.76e29
    gamma_e: float = K.GAMMA_E
    gamma_c13: float = K.GAMMA_C13
    bath_radius: float = 8e-9
    n_configs: int = 50
    seed: int = 0
    refocus: RefocusDistribution | None = None
    nv_axis_angle: float = K.NV_AXIS_ANGLE
    lattice_constant: float = K.DIAMOND_A
    core_radius: float = 0.5e-9
    pair_cutoff: float = 2.5e-9
    p1_linewidth: float = K.TWO_PI * 1.8e6
    sd_tau_c: float | None = None
    sd_delta: float | None = None
    n_traj: int = 100_000
    id_samples: int = 20_000

    def __post_init__(self):
        for name in ("c13_ppm", "p1_ppm", "nv_ppm", "B"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")
        for name in ("carbon_density", "gamma_e", "gamma_c13", "bath_radius",
                     "lattice_constant", "pair_cutoff", "p1_linewidth"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")
        if self.core_radius < 0 or self.core_radius >= self.bath_radius:
            raise ValueError("core_radius must lie in [0, bath_radius)")
        if self.n_configs < 1:
            raise ValueError("n_configs must be >= 1")
        if self.n_traj < 100:
            raise ValueError("n_traj must be >= 100")
        for name in ("sd_tau_c", "sd_delta"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")

    def field_direction(self) -> np.ndarray:
        """Unit field vector in the NV frame (z along the NV axis)."""
        t = self.nv_axis_angle
        return np.array([math.sin(t), 0.0, math.cos(t)])


@dataclass(frozen=True)
class BathConfiguration:
    positions: np.ndarray  # (n, 3) metres, NV frame, centre spin at the origin
    species: np.ndarray  # (n,) str
    expected_count: float = 0.0
    warning: str | None = None

    def __post_init__(self):
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must have shape (n, 3)")
        if self.species.shape != (self.positions.shape[0],):
            raise ValueError("one species tag per position")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def select(self, species: str) -> BathConfiguration:
        m = self.species == species
        return BathConfiguration(self.positions[m], self.species[m], self.expected_count,
                                 self.warning)

    def hyperfine_vectors(self, spec: BathSpec) -> np.ndarray:
        return hyperfine_vectors(self.positions, spec)

    def couplings(self, spec: BathSpec) -> dict[str, np.ndarray]:
        """Derived couplings (rad/s): hyperfine vectors and the pair dipolar tensors."""
        r = self.positions
        d = r[:, None, :] - r[None, :, :]
        iu = np.triu_indices(self.n, 1)
        return {"hyperfine": self.hyperfine_vectors(spec),
                "pair_dipolar": dipolar_tensor(d[iu], nuclear_dipolar_constant(spec))}


@dataclass(frozen=True)
class CoherenceCurve:
    two_tau: np.ndarray
    L: np.ndarray
    label: str = ""

    def __post_init__(self):
        t = np.asarray(self.two_tau, float)
        L = np.asarray(self.L, float)
        if t.ndim != 1 or t.shape != L.shape:
            raise ValueError("two_tau and L must be 1-D of equal length")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("two_tau grid must be strictly increasing")
        if np.any(t < 0):
            raise ValueError("two_tau must be >= 0")
        if np.any(L < 0) or np.any(L > 1 + 1e-9) or not np.all(np.isfinite(L)):
            raise ValueError("coherence must lie in [0, 1 + 1e-9]")
        if t.size and t[0] == 0 and L[0] != 1.0:
            raise ValueError("L(0) must equal 1")
        object.__setattr__(self, "two_tau", t)
        object.__setattr__(self, "L", L)


def _curve(two_tau, L, label):
    L = np.clip(L, 0.0, 1.0)
    L[two_tau == 0] = 1.0
    return CoherenceCurve(two_tau, L, label)


def _check_grid(two_tau) -> np.ndarray:
    t = np.asarray(two_tau, float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("two_tau grid must be a non-empty 1-D array")
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise ValueError("two_tau must be finite and >= 0")
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise ValueError("two_tau grid must be strictly increasing")
    return t


# ---------------------------------------------------------------------------
# bath sampling


def _nv_frame() -> np.ndarray:
    """Rows are the NV-frame axes expressed in cubic coordinates."""
    z = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
    x = np.array([1.0, 1.0, -2.0]) / math.sqrt(6.0)
    return np.stack([x, np.cross(z, x), z])


@lru_cache(maxsize=8)
def lattice_sites(radius: float, a: float = K.DIAMOND_A, core: float = 0.0) -> np.ndarray:
    """Diamond-lattice carbon sites within ``radius`` of the vacancy, NV frame, metres.

    The vacancy sits on the origin and the nitrogen at a/4 (1,1,1); both are excluded,
    as is every site closer than ``core``.
    """
    n = int(math.ceil(radius / a)) + 1
    r = np.arange(-n, n + 1)
    cells = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3).astype(float)
    basis = np.array([[0, 0, 0], [0, .5, .5], [.5, 0, .5], [.5, .5, 0]], float)
    basis = np.concatenate([basis, basis + 0.25])
    pts = (cells[:, None, :] + basis[None]).reshape(-1, 3) * a
    pts = pts @ _nv_frame().T
    d = np.linalg.norm(pts, axis=1)
    nitrogen = np.array([0.0, 0.0, math.sqrt(3.0) / 4.0 * a])
    keep = (d <= radius) & (d > max(core, 1e-3 * a))
    keep &= np.linalg.norm(pts - nitrogen, axis=1) > 1e-3 * a
    pts = pts[keep]
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], np.round(d[keep] / a, 9)))
    out = pts[order]
    out.setflags(write=False)
    return out


def sample_bath(spec: BathSpec, species: str, seed: int | None = None,
                index: int = 0) -> BathConfiguration:
    """One Monte Carlo bath realization for ``species`` ("c13", "p1" or "nv")."""
    if species not in SPECIES:
        raise ValueError(f"unknown bath species {species!r}")
    seed = spec.seed if seed is None else seed
    ppm = {"c13": spec.c13_ppm, "p1": spec.p1_ppm, "nv": spec.nv_ppm}[species]
    R = spec.bath_radius
    rng = _rng(seed, _SPECIES_CODE[species], index)
    if species == "c13":
        sites = lattice_sites(R, spec.lattice_constant, spec.core_radius)
        prob = ppm * 1e-6
        expected = prob * sites.shape[0]
        pos = sites[rng.random(sites.shape[0]) < prob] if prob > 0 else np.empty((0, 3))
    else:
        dens = ppm * 1e-6 * spec.carbon_density
        vol = 4.0 / 3.0 * math.pi * (R**3 - spec.core_radius**3)
        expected = dens * vol
        count = rng.poisson(expected) if expected > 0 else 0
        u = rng.random((count, 3))
        rr = np.cbrt(spec.core_radius**3 + u[:, 0] * (R**3 - spec.core_radius**3))
        ct = 2.0 * u[:, 1] - 1.0
        st = np.sqrt(1.0 - ct * ct)
        ph = 2.0 * math.pi * u[:, 2]
        pos = np.stack([rr * st * np.cos(ph), rr * st * np.sin(ph), rr * ct], -1)
    warn = None
    if 0 < expected < 1:
        warn = f"expected {species} count {expected:.3g} < 1 in the bath sphere"
    pos = np.ascontiguousarray(pos, float).reshape(-1, 3)
    return BathConfiguration(pos, np.full(pos.shape[0], species), float(expected), warn)


# ---------------------------------------------------------------------------
# couplings and cluster Hamiltonians


def nuclear_dipolar_constant(spec: BathSpec) -> float:
    return K.MU0_OVER_4PI * K.HBAR * spec.gamma_c13**2


def dipolar_tensor(d: np.ndarray, const: float) -> np.ndarray:
    """(const / r^3)(1 - 3 r r), shape (..., 3, 3)."""
    r = np.linalg.norm(d, axis=-1)
    u = d / r[..., None]
    return (const / r**3)[..., None, None] * (np.eye(3) - 3.0 * u[..., :, None] * u[..., None, :])


def hyperfine_vectors(pos: np.ndarray, spec: BathSpec) -> np.ndarray:
    """Secular point-dipole hyperfine vectors A_i (rad/s): H = S_z A_i . I_i."""
    c = K.MU0_OVER_4PI * K.HBAR * spec.gamma_e * spec.gamma_c13
    r = np.linalg.norm(pos, axis=-1)
    u = pos / r[:, None]
    zhat = np.array([0.0, 0.0, 1.0])
    return -(c / r**3)[:, None] * (zhat - 3.0 * u[:, 2:3] * u)


def larmor_vector(spec: BathSpec) -> np.ndarray:
    return -spec.gamma_c13 * spec.B * spec.field_direction()


def _single_hamiltonians(A, w):
    """H0, H1 for lone nuclei, shape (n, 2, 2)."""
    H0 = np.einsum("k,kij->ij", w, _SPIN)
    H0 = np.broadcast_to(H0, (A.shape[0], 2, 2))
    H1 = H0 + np.einsum("nk,kij->nij", A, _SPIN)
    return H0, H1


def _pair_hamiltonians(A1, A2, D, w):
    """H0, H1 for nuclear pairs, shape (n, 4, 4)."""
    s1 = np.stack([np.kron(s, _I2) for s in _SPIN])
    s2 = np.stack([np.kron(_I2, s) for s in _SPIN])
    zee = np.einsum("k,kij->ij", w, s1 + s2)
    dd = np.einsum("nab,aij,bjk->nik", D, s1, s2)
    H0 = zee[None] + dd
    H1 = H0 + np.einsum("nk,kij->nij", A1, s1) + np.einsum("nk,kij->nij", A2, s2)
    return H0, H1


def _hahn_cluster(H0, H1, tau, chunk=64):
    """Complex Hahn coherence Tr[(e0 e1)^dag (e1 e0)] / d for each cluster and tau."""
    n, d, _ = H0.shape
    E0, V0 = np.linalg.eigh(H0)
    E1, V1 = np.linalg.eigh(H1)
    out = np.empty((n, tau.size), complex)
    for s in range(0, tau.size, chunk):
        t = tau[s:s + chunk]
        p0 = np.exp(-1j * E0[:, None, :] * t[None, :, None])  # (n, T, d)
        p1 = np.exp(-1j * E1[:, None, :] * t[None, :, None])
        U0 = np.einsum("nij,ntj,nkj->ntik", V0, p0, V0.conj())
        U1 = np.einsum("nij,ntj,nkj->ntik", V1, p1, V1.conj())
        a = U0 @ U1
        b = U1 @ U0
        out[:, s:s + chunk] = np.einsum("ntij,ntij->nt", a.conj(), b) / d
    return out


def cce_config_coherence(config: BathConfiguration, spec: BathSpec, two_tau) -> np.ndarray:
    """Complex CCE-2 Hahn coherence for one configuration."""
    two_tau = _check_grid(two_tau)
    tau = 0.5 * two_tau
    nuc = config.select("c13")
    n = nuc.n
    if n == 0:
        return np.ones(tau.size, complex)
    A = nuc.hyperfine_vectors(spec)
    w = larmor_vector(spec)
    H0, H1 = _single_hamiltonians(A, w)
    L1 = _hahn_cluster(H0, H1, tau)
    # log-sum of single-cluster factors in fixed order
    total = np.prod(L1, axis=0)
    if n >= 2:
        i, j = np.triu_indices(n, 1)
        d = nuc.positions[i] - nuc.positions[j]
        near = np.linalg.norm(d, axis=1) <= spec.pair_cutoff
        i, j, d = i[near], j[near], d[near]
        if i.size:
            D = dipolar_tensor(d, nuclear_dipolar_constant(spec))
            P0, P1 = _pair_hamiltonians(A[i], A[j], D, w)
            L2 = _hahn_cluster(P0, P1, tau)
            den = L1[i] * L1[j]
            ok = np.abs(den) > 1e-12
            tilde = np.where(ok, L2 / np.where(ok, den, 1.0), 1.0)
            total = total * np.prod(tilde, axis=0)
    total[two_tau == 0] = 1.0
    return total


def cce2_coherence(spec: BathSpec, two_tau, configs: list[BathConfiguration] | None = None,
                   threads: int | None = None, n_pulses: int = 1) -> CoherenceCurve:
    """Configuration-averaged 13C Hahn-echo attenuation by CCE-2."""
    if n_pulses != 1:
        raise ValueError("only the Hahn echo (one refocusing pulse) is supported")
    two_tau = _check_grid(two_tau)
    if configs is None:
        configs = [sample_bath(spec, "c13", index=k) for k in range(spec.n_configs)]
    parts = _map(lambda c: cce_config_coherence(c, spec, two_tau), configs, threads)
    acc = np.zeros(two_tau.size, complex)
    for p in parts:
        acc += p
    return _curve(two_tau, np.abs(acc / len(parts)), "c13")


def exact_hahn_coherence(config: BathConfiguration, spec: BathSpec, two_tau) -> CoherenceCurve:
    """Exact Hahn echo of the centre spin plus every nucleus in ``config`` (small baths only)."""
    two_tau = _check_grid(two_tau)
    nuc = config.select("c13")
    n = nuc.n
    if n > 8:
        raise ValueError("exact diagonalization limited to 8 nuclei")
    dim = 2**n

    def op(s, k):
        m = np.array([[1.0 + 0j]])
        for q in range(n):
            m = np.kron(m, s if q == k else _I2)
        return m

    ops = [[op(s, k) for s in _SPIN] for k in range(n)]
    w = larmor_vector(spec)
    A = nuc.hyperfine_vectors(spec)
    c = nuclear_dipolar_constant(spec)
    H0 = np.zeros((dim, dim), complex)
    Hhf = np.zeros((dim, dim), complex)
    for k in range(n):
        for a in range(3):
            H0 += w[a] * ops[k][a]
            Hhf += A[k, a] * ops[k][a]
    for k in range(n):
        for q in range(k + 1, n):
            D = dipolar_tensor(nuc.positions[k] - nuc.positions[q], c)
            for a in range(3):
                for b in range(3):
                    H0 += D[a, b] * ops[k][a] @ ops[q][b]
    P0 = np.diag([1.0, 0.0]).astype(complex)
    P1 = np.diag([0.0, 1.0]).astype(complex)
    H = np.kron(P0, H0) + np.kron(P1, H0 + Hhf)
    E, V = np.linalg.eigh(H)
    X = np.kron(np.array([[0, 1], [1, 0]], complex), np.eye(dim))
    plus = np.full((2, 2), 0.5, complex)
    rho0 = np.kron(plus, np.eye(dim) / dim)
    L = np.empty(two_tau.size)
    for k, t2 in enumerate(two_tau):
        U = (V * np.exp(-1j * E * 0.5 * t2)) @ V.conj().T
        seq = U @ X @ U
        rho = seq @ rho0 @ seq.conj().T
        # coherence of the electron after the echo: 2 |<0| rho_e |1>|
        rho_e = rho.reshape(2, dim, 2, dim).trace(axis1=1, axis2=3)
        L[k] = 2.0 * abs(rho_e[0, 1])
    return _curve(two_tau, L, "c13-exact")


# ---------------------------------------------------------------------------
# spectral diffusion


def dilute_dipolar_width(ppm: float, density: float = 1.76e29,
                         gamma_e: float = K.GAMMA_E) -> float:
    """Half-width (rad/s) of the Lorentzian dipolar field distribution of a dilute
    electron-spin gas: 4 pi^2 n C / (9 sqrt 3), C = mu0 hbar gamma_e^2 / 4 pi."""
    c = K.MU0_OVER_4PI * K.HBAR * gamma_e**2
    return 4.0 * math.pi**2 * ppm * 1e-6 * density * c / (9.0 * math.sqrt(3.0))


def p1_correlation_time(ppm: float, linewidth: float, density: float = 1.76e29,
                        gamma_e: float = K.GAMMA_E) -> float:
    """Inverse mean P1 flip-flop rate, linewidth / b^2, with b the P1-P1 dipolar width."""
    b = dilute_dipolar_width(ppm, density, gamma_e)
    return math.inf if b == 0 else linewidth / b**2


def sd_parameters(spec: BathSpec) -> tuple[float, float]:
    """(delta, tau_c) for the P1 bath, honouring the explicit overrides."""
    delta = spec.sd_delta
    if delta is None:
        delta = dilute_dipolar_width(spec.p1_ppm, spec.carbon_density, spec.gamma_e)
    tau_c = spec.sd_tau_c
    if tau_c is None:
        tau_c = p1_correlation_time(spec.p1_ppm, spec.p1_linewidth, spec.carbon_density,
                                    spec.gamma_e)
    return delta, tau_c


def ou_echo_variance(two_tau, delta: float, tau_c: float):
    """Hahn-echo phase variance for OU noise of rms ``delta`` and correlation time ``tau_c``."""
    t = np.asarray(two_tau, float)
    x = t / tau_c
    small = x < 1e-3
    with np.errstate(over="ignore"):
        big = x - 3.0 + 4.0 * np.exp(-0.5 * x) - np.exp(-x)
    # series for short times avoids cancellation: x^3/12 - x^4/32
    ser = x**3 / 12.0 - x**4 / 32.0
    return 2.0 * delta**2 * tau_c**2 * np.where(small, ser, big)


def ou_echo_attenuation(two_tau, delta: float, tau_c: float):
    return np.exp(-0.5 * ou_echo_variance(two_tau, delta, tau_c))


def _ou_step_moments(h, delta, tau_c):
    e1 = np.exp(-h / tau_c)
    e2 = np.exp(-2.0 * h / tau_c)
    vx = delta**2 * (1.0 - e2)
    r = h / tau_c
    vi = delta**2 * tau_c**2 * np.where(r < 1e-3, 2.0 * r**3 / 3.0 - r**4 / 2.0,
                                        2.0 * r - 3.0 + 4.0 * e1 - e2)
    cv = delta**2 * tau_c * (1.0 - e1) ** 2
    return e1, tau_c * (1.0 - e1), vx, vi, cv


def spectral_diffusion_decay(two_tau, p1_ppm: float | None = None, tau_c: float | None = None,
                             delta: float | None = None, n_traj: int = 100_000, seed: int = 0,
                             spec: BathSpec | None = None, threads: int | None = None,
                             chunk: int = 5000) -> CoherenceCurve:
    """|<exp(i phi_echo)>| over OU frequency trajectories, phi = int_0^tau - int_tau^2tau.

    Trajectories are sampled exactly at the needed times (no discretization error) from
    the joint Gaussian of the OU value and its time integral over each step.
    """
    two_tau = _check_grid(two_tau)
    if n_traj < 100:
        raise ValueError("n_traj must be >= 100")
    spec = spec or BathSpec()
    if p1_ppm is not None:
        spec = BathSpec(**{**spec.__dict__, "p1_ppm": p1_ppm})
    d0, t0 = sd_parameters(spec)
    delta = d0 if delta is None else delta
    tau_c = t0 if tau_c is None else tau_c
    if delta == 0 or not math.isfinite(tau_c):
        return _curve(two_tau, np.ones_like(two_tau), "p1")
    if not tau_c > 0:
        raise ValueError("tau_c must be > 0")
    times = np.unique(np.concatenate([[0.0], 0.5 * two_tau, two_tau]))
    i_half = np.searchsorted(times, 0.5 * two_tau)
    i_full = np.searchsorted(times, two_tau)
    h = np.diff(times)
    a, b, vx, vi, cv = _ou_step_moments(h, delta, tau_c)
    # Cholesky factors of the per-step 2x2 covariance
    l11 = np.sqrt(vx)
    l21 = np.where(l11 > 0, cv / np.where(l11 > 0, l11, 1.0), 0.0)
    l22 = np.sqrt(np.maximum(vi - l21**2, 0.0))
    sizes = [min(chunk, n_traj - s) for s in range(0, n_traj, chunk)]

    def run(k):
        m = sizes[k]
        rng = _rng(seed, 0x5D, k)
        z = rng.standard_normal((h.size, 2, m))
        x = delta * rng.standard_normal(m)
        integ = np.zeros((times.size, m))
        acc = np.zeros(m)
        for j in range(h.size):
            dI = b[j] * x + l21[j] * z[j, 0] + l22[j] * z[j, 1]
            x = a[j] * x + l11[j] * z[j, 0]
            acc = acc + dI
            integ[j + 1] = acc
        phi = 2.0 * integ[i_half] - integ[i_full]
        return np.cos(phi).sum(axis=1), np.sin(phi).sum(axis=1)

    parts = _map(run, range(len(sizes)), threads)
    re = np.zeros(two_tau.size)
    im = np.zeros(two_tau.size)
    for c, s in parts:
        re += c
        im += s
    return _curve(two_tau, np.hypot(re, im) / n_traj, "p1")


# ---------------------------------------------------------------------------
# instantaneous diffusion


def id_rate_analytic(nv_ppm: float, mean_flip: float, density: float = 1.76e29,
                     gamma_e: float = K.GAMMA_E) -> float:
    """Dilute-gas rate 1/T_ID (per unit 2 tau) = 4 pi^2 n C <sin^2(theta/2)> / (9 sqrt 3)."""
    return dilute_dipolar_width(nv_ppm, density, gamma_e) * mean_flip


def instantaneous_diffusion_rate(nv_ppm: float, refocus: RefocusDistribution | None = None,
                                 seed: int = 0, n_samples: int = 20_000,
                                 density: float = 1.76e29, gamma_e: float = K.GAMMA_E,
                                 phase_cut: float = 0.02) -> float:
    """Monte Carlo 1/T_ID (1/s) from a Poisson gas of partner NV spins.

    Each partner at (r, theta) couples with J = C (1 - 3 cos^2 theta) / r^3 and is flipped
    with probability sin^2(theta_R/2); a flipped partner imprints phase +-J tau. The mean
    echo factor prod(1 - P + P cos J tau) is evaluated at a reference delay where L ~ 1/2
    inside a sphere whose edge coupling gives phases below ``phase_cut``.
    """
    refocus = refocus or RefocusDistribution()
    if nv_ppm < 0:
        raise ValueError("nv_ppm must be >= 0")
    p_mean = refocus.mean_flip()
    if nv_ppm == 0 or p_mean == 0:
        return 0.0
    n = nv_ppm * 1e-6 * density
    c = K.MU0_OVER_4PI * K.HBAR * gamma_e**2
    guess = id_rate_analytic(nv_ppm, p_mean, density, gamma_e)
    tau = 0.5 * math.log(2.0) / guess
    R = (c * tau / phase_cut) ** (1.0 / 3.0)
    mean_count = n * 4.0 / 3.0 * math.pi * R**3
    rng = _rng(seed, 0x1D)
    counts = rng.poisson(mean_count, n_samples)
    m = int(counts.max()) if counts.size else 0
    u = rng.random((n_samples, m, 3))
    r = R * np.cbrt(u[..., 0])
    ct = 2.0 * u[..., 1] - 1.0
    ang = np.asarray(refocus.angles)
    pick = rng.choice(ang.size, size=(n_samples, m), p=np.asarray(refocus.weights))
    P = np.sin(ang[pick] / 2.0) ** 2
    J = c * (1.0 - 3.0 * ct * ct) / r**3
    fac = 1.0 - P + P * np.cos(J * tau)
    fac[np.arange(m)[None, :] >= counts[:, None]] = 1.0
    L = float(np.mean(np.prod(fac, axis=1)))
    if L <= 0:
        raise FloatingPointError("instantaneous-diffusion Monte Carlo gave non-positive echo")
    return -math.log(L) / (2.0 * tau)


def instantaneous_diffusion_decay(two_tau, nv_ppm: float,
                                  refocus: RefocusDistribution | None = None, seed: int = 0,
                                  n_samples: int = 20_000, density: float = 1.76e29,
                                  gamma_e: float = K.GAMMA_E) -> CoherenceCurve:
    two_tau = _check_grid(two_tau)
    rate = instantaneous_diffusion_rate(nv_ppm, refocus, seed, n_samples, density, gamma_e)
    return _curve(two_tau, np.exp(-rate * two_tau), "nv")


def refocus_from_ensemble(detuning, coupling, weight, duration: float,
                          scale: float = 1.0) -> RefocusDistribution:
    """Flip angles of a square refocusing pulse of ``scale`` times a mean-coupling pi rotation.

    Bin j sees Rabi rate Omega_j = scale pi g_j / (<g> T) and detuning Delta_j; its flip
    probability (Omega/Omega_eff)^2 sin^2(Omega_eff T / 2) is expressed as an
    equivalent on-resonance angle.
    """
    g = np.asarray(coupling, float)
    wt = np.asarray(weight, float)
    dl = np.asarray(detuning, float)
    omega = scale * math.pi * g / (np.dot(wt, g) * duration)
    eff = np.hypot(omega, dl)
    P = (omega / eff) ** 2 * np.sin(0.5 * eff * duration) ** 2
    ang = 2.0 * np.arcsin(np.sqrt(np.clip(P, 0.0, 1.0)))
    return RefocusDistribution(tuple(ang), tuple(wt / wt.sum()))


# ---------------------------------------------------------------------------
# combination and analysis


def combined_decay(curves: list[CoherenceCurve]) -> CoherenceCurve:
    if not curves:
        raise ValueError("combined_decay needs at least one curve")
    t = curves[0].two_tau
    L = np.ones_like(t)
    for c in curves:
        if c.two_tau.shape != t.shape or np.any(c.two_tau != t):
            raise ValueError("coherence curves are on different grids")
        L = L * c.L
    return _curve(t, L, "total")


def exponential_fit(curve: CoherenceCurve, threshold: float = 0.1) -> tuple[float, float]:
    """Least-squares line through ln L on points with L > threshold; returns (T2, A0)."""
    m = (curve.L > threshold) & (curve.two_tau > 0)
    if m.sum() < 2:
        raise ValueError("fewer than two points above the fit threshold")
    slope, icpt = np.polyfit(curve.two_tau[m], np.log(curve.L[m]), 1)
    if slope >= 0:
        raise ValueError("coherence does not decay over the fit range")
    return -1.0 / slope, math.exp(icpt)


def fit_exponential(curve: CoherenceCurve, threshold: float = 0.1) -> float:
    return exponential_fit(curve, threshold)[0]


def oscillation_frequency(curve: CoherenceCurve, axis: str = "tau", pad: int = 16,
                          f_min: float | None = None) -> float:
    """Dominant angular frequency of 1 - L (rad/s) against tau (``axis="tau"``) or 2 tau.

    The grid must be uniform. A Hann window and zero padding are used and the peak is
    refined by parabolic interpolation; frequencies below ``f_min`` (default: three
    bins of the unpadded transform) are ignored to keep the slow envelope out.
    """
    x = curve.two_tau * (0.5 if axis == "tau" else 1.0)
    if axis not in ("tau", "two_tau"):
        raise ValueError("axis must be 'tau' or 'two_tau'")
    dx = np.diff(x)
    if x.size < 8 or np.ptp(dx) > 1e-9 * dx.mean():
        raise ValueError("oscillation_frequency needs a uniform grid of >= 8 points")
    y = 1.0 - curve.L
    y = y - np.polyval(np.polyfit(x, y, 1), x)
    y = y * np.hanning(y.size)
    nfft = pad * y.size
    spec = np.abs(np.fft.rfft(y, nfft))
    f = np.fft.rfftfreq(nfft, dx.mean())
    f_min = 3.0 / (x[-1] - x[0]) if f_min is None else f_min
    valid = np.nonzero(f >= f_min)[0]
    k = valid[np.argmax(spec[valid])]
    if 0 < k < spec.size - 1:
        a, b, c = np.log(spec[k - 1:k + 2] + 1e-300)
        shift = 0.5 * (a - c) / (a - 2 * b + c) if (a - 2 * b + c) != 0 else 0.0
    else:
        shift = 0.0
    return 2.0 * math.pi * (f[k] + shift * (f[1] - f[0]))


@dataclass
class DecayDecomposition:
    c13: CoherenceCurve
    p1: CoherenceCurve
    nv: CoherenceCurve
    total: CoherenceCurve
    T2: float
    amplitude: float
    t_id: float
    sd_params: tuple[float, float]
    extra: dict = field(default_factory=dict)


def decompose(spec: BathSpec, two_tau, refocus: RefocusDistribution | None = None,
              threads: int | None = None) -> DecayDecomposition:
    """All three bath curves on one grid, their product and its exponential fit."""
    two_tau = _check_grid(two_tau)
    refocus = refocus or spec.refocus
    c13 = cce2_coherence(spec, two_tau, threads=threads)
    p1 = spectral_diffusion_decay(two_tau, spec=spec, n_traj=spec.n_traj, seed=spec.seed,
                                  threads=threads)
    rate = instantaneous_diffusion_rate(spec.nv_ppm, refocus, spec.seed, spec.id_samples,
                                        spec.carbon_density, spec.gamma_e)
    nv = _curve(two_tau, np.exp(-rate * two_tau), "nv")
    total = combined_decay([c13, p1, nv])
    T2, A0 = exponential_fit(total)
    return DecayDecomposition(c13, p1, nv, total, T2, A0, 1.0 / rate if rate > 0 else math.inf,
                              sd_parameters(spec))


def warn_if_sparse(config: BathConfiguration):
    if config.warning:
        warnings.warn(config.warning, RuntimeWarning, stacklevel=2)
