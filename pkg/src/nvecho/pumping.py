"""Optical repumping: laser pulse duration -> spin polarization, and repetition-rate bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from . import constants as K

# relative polarization p/p_max read off the pump curve, and a saturation anchor for the
# statement that the curve is nearly flat beyond 1 s
CALIBRATION_POINTS = ((0.1, 0.62), (0.2, 0.72))
SATURATION_ANCHOR = (1.0, 0.97)


@dataclass(frozen=True)
class PumpModel:
    """p(T_L) = p_max [1 - alpha exp(-T_L/tau1) - (1 - alpha) exp(-T_L/tau2)]."""

    p_max: float = K.P_MAX
    alpha: float = 0.5
    tau1: float = 0.05
    tau2: float = 0.5
    laser_power: float = 2.8e-4
    dead_time: float = 3e-4

    def __post_init__(self):
        if not 0.0 < self.p_max <= 1.0:
            raise ValueError("p_max must lie in (0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ValueError("tau1 and tau2 must be > 0")
        if self.dead_time < 0 or self.laser_power < 0:
            raise ValueError("dead_time and laser_power must be >= 0")

    def relative(self, T_L):
        T = np.asarray(T_L, float)
        r = 1.0 - self.alpha * np.exp(-T / self.tau1) - (1.0 - self.alpha) * np.exp(-T / self.tau2)
        return r if r.ndim else float(r)


def _biexp(params, T):
    alpha, l1, l2 = params
    return 1.0 - alpha * np.exp(-T / math.exp(l1)) - (1.0 - alpha) * np.exp(-T / math.exp(l2))


def calibrate_pump_model(points=None, p_max: float = K.P_MAX,
                         saturation: tuple[float, float] | None = SATURATION_ANCHOR,
                         **kw) -> PumpModel:
    """Least-squares bi-exponential through ``points`` = [(T_L, p/p_max), ...].

    With only two measured points the three shape parameters are underdetermined, so the
    saturation anchor (default (1 s, 0.97)) is appended; pass ``saturation=None`` to fit
    the points alone (then at least three are needed for a unique answer).
    """
    pts = list(CALIBRATION_POINTS if points is None else points)
    if saturation is not None and all(abs(t - saturation[0]) > 0 for t, _ in pts):
        pts.append(tuple(saturation))
    if len(pts) < 2:
        raise ValueError("need at least two calibration points")
    T = np.array([p[0] for p in pts], float)
    y = np.array([p[1] for p in pts], float)
    if np.unique(T).size != T.size:
        raise ValueError("duplicate T_L in calibration points")
    if np.any(T <= 0) or np.any(y <= 0) or np.any(y > 1):
        raise ValueError("calibration points need T_L > 0 and p/p_max in (0, 1]")

    best = None
    # a few deterministic starts; keep the best residual
    for a0 in (0.3, 0.6, 0.9):
        for s1, s2 in ((0.3, 3.0), (0.5, 10.0), (0.2, 1.5)):
            x0 = [a0, math.log(s1 * T.min()), math.log(s2 * T.max() / 2)]
            res = least_squares(lambda x: _biexp(x, T) - y, x0,
                                bounds=([0.0, -20.0, -20.0], [1.0, 10.0, 10.0]),
                                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=5000)
            if best is None or res.cost < best.cost:
                best = res
    alpha, l1, l2 = best.x
    t1, t2 = math.exp(l1), math.exp(l2)
    if t1 > t2:  # canonical order: tau1 is the fast component
        alpha, t1, t2 = 1.0 - alpha, t2, t1
    return PumpModel(p_max=p_max, alpha=float(alpha), tau1=t1, tau2=t2, **kw)


def polarization_after_pump(model: PumpModel, T_L):
    """Spin polarization after a laser pulse of duration ``T_L`` from a depolarized start."""
    T = np.asarray(T_L, float)
    if np.any(T < 0):
        raise ValueError("T_L must be >= 0")
    p = np.clip(model.p_max * np.asarray(model.relative(T)), 0.0, model.p_max)
    return p if p.ndim else float(p)


def repetition_rate(model: PumpModel, T_L: float, sequence_duration: float) -> float:
    if T_L < 0 or sequence_duration < 0:
        raise ValueError("durations must be >= 0")
    period = T_L + model.dead_time + sequence_duration
    if period <= 0:
        raise ValueError("repetition period is zero")
    return 1.0 / period


def pump_curve(model: PumpModel, T_max: float = 2.0, n: int = 201):
    T = np.linspace(0.0, T_max, n)
    return T, polarization_after_pump(model, T)
