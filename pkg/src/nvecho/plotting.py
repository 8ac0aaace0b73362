"""Static SVG line charts for the report path.

Figures are built on bare ``Figure`` objects (no pyplot state) and written with a fixed
hash salt and no date stamp, so the same data always gives the same bytes.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib as mpl  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

STYLE = {
    "font.family": "sans-serif",
    "font.sans-serif": ["DejaVu Sans"],
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "axes.prop_cycle": mpl.cycler(color=["#08589e", "#d95f02", "#1b9e77", "#7570b3", "#666666"]),
    "svg.hashsalt": "nvecho",
    "svg.fonttype": "path",
    "path.simplify": False,
}
FIGSIZE = (4.6, 3.2)


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    with mpl.rc_context({"svg.hashsalt": STYLE["svg.hashsalt"]}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    return path


def _figure(nrows=1, sharex=False):
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(FIGSIZE[0], FIGSIZE[1] * (1 + 0.55 * (nrows - 1))),
                     layout="constrained")
        axes = fig.subplots(nrows, 1, sharex=sharex, squeeze=False)[:, 0]
    return fig, axes


def line_plot(path, x, series: dict, xlabel: str, ylabel: str, logy: bool = False,
              title: str | None = None, markers: dict | None = None) -> Path:
    """One panel; ``series`` maps legend label -> y array (same x for all)."""
    with mpl.rc_context(STYLE):
        fig, (ax,) = _figure()
        for label, y in series.items():
            ax.plot(x, y, label=label)
        for label, (mx, my) in (markers or {}).items():
            ax.plot(mx, my, "o", ms=3, label=label)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) + len(markers or {}) > 1:
            ax.legend()
        return _save(fig, path)


def spectrum_plot(path, freq_hz, s11) -> Path:
    """|S11| and unwrapped phase against probe frequency (GHz)."""
    with mpl.rc_context(STYLE):
        fig, (a1, a2) = _figure(2, sharex=True)
        f = np.asarray(freq_hz) * 1e-9
        a1.plot(f, np.abs(s11))
        a1.set_ylabel("|S11|")
        a2.plot(f, np.unwrap(np.angle(s11)))
        a2.set_ylabel("arg S11 (rad)")
        a2.set_xlabel("frequency (GHz)")
        return _save(fig, path)


def field_scan_plot(path, b_tesla, s11, minima=None) -> Path:
    markers = None
    b_mt = np.asarray(b_tesla) * 1e3
    mag = np.abs(s11)
    if minima is not None and len(minima):
        markers = {"minima": (b_mt[minima], mag[minima])}
    return line_plot(path, b_mt, {"|S11|": mag}, "B (mT)", "|S11|", markers=markers)


def echo_plot(path, t, echo, t_theta: float, t_echo: float) -> Path:
    """Output power around the storage pulse and the echo, in photons/us."""
    with mpl.rc_context(STYLE):
        fig, (ax,) = _figure()
        ax.plot(np.asarray(t) * 1e6, np.abs(echo) ** 2 * 1e-6)
        for tm in (t_theta, t_echo):
            ax.axvline(tm * 1e6, color="#999999", lw=0.6, ls="--")
        ax.set_yscale("log")
        finite = np.abs(echo) ** 2 * 1e-6
        top = float(finite.max()) if finite.size else 1.0
        ax.set_ylim(max(top * 1e-9, 1e-12), top * 3 if top > 0 else 1.0)
        ax.set_xlabel("t (us)")
        ax.set_ylabel("|a_out|^2 (photons/us)")
        return _save(fig, path)


def decay_plot(path, two_tau, amp, fit: tuple[float, float] | None, curves: dict) -> Path:
    with mpl.rc_context(STYLE):
        fig, (a1, a2) = _figure(2, sharex=True)
        x = np.asarray(two_tau) * 1e6
        a1.plot(x, amp, "o", ms=3, label="echo amplitude")
        if fit is not None and math.isfinite(fit[0]):
            T2, A0 = fit
            a1.plot(x, A0 * np.exp(-np.asarray(two_tau) / T2), label=f"fit T2 = {T2 * 1e6:.1f} us")
        a1.set_yscale("log")
        a1.set_ylabel("amplitude (arb.)")
        a1.legend()
        for label, y in curves.items():
            a2.plot(x, y, label=label)
        a2.set_xlabel("2 tau (us)")
        a2.set_ylabel("L")
        a2.legend()
        return _save(fig, path)
