import math

import numpy as np
import pytest

from nvecho import decoherence as dec
from nvecho.dynamics import Drive, IdealRotation, Idle
from nvecho.experiments import (ExperimentConfig, build_sequence, discretize_for, run_hahn_echo,
                                scan_echo_decay)

# coarse grid: bin revival at ~33 us, so keep 2 tau well below that
FAST = dict(n_freq=400, n_g=2, tau=10e-6, attenuation="none")


@pytest.fixture(scope="module")
def fast_cfg():
    return ExperimentConfig(**FAST)


def test_defaults_and_validation():
    cfg = ExperimentConfig()
    assert cfg.tau == 50e-6 and cfg.n_freq == 2000
    assert cfg.polarization == pytest.approx(0.9 * 0.72, abs=1e-3)
    for bad in [dict(refocus="x"), dict(n_photons=0), dict(tau=0.5e-6), dict(n_freq=2),
                dict(decay_grid=(0, 1e-4, 3)), dict(refocus_scale=0)]:
        with pytest.raises(ValueError):
            ExperimentConfig(**bad)


def test_sequence_timing(fast_cfg):
    ens = discretize_for(fast_cfg)
    seq = build_sequence(fast_cfg, ens)
    T, tau = fast_cfg.pulse_duration, fast_cfg.tau
    kinds = [type(s) for s in seq.segments]
    assert kinds[:3] == [Drive, Idle, Drive]
    starts = seq.segment_starts()
    # refocusing pulse centred at T/2 + tau
    assert starts[2] + fast_cfg.pi_duration / 2 == pytest.approx(T / 2 + tau, abs=1e-12)
    assert seq.duration > T / 2 + 2 * tau
    ideal = build_sequence(fast_cfg.with_(refocus="ideal"), ens)
    rot = [s for s in ideal.segments if isinstance(s, IdealRotation)]
    assert len(rot) == 1 and rot[0].angle == math.pi
    assert ideal.segment_starts()[2] == pytest.approx(T / 2 + tau, abs=1e-12)


@pytest.mark.parametrize("refocus", ["ideal", "realistic"])
def test_echo_appears_at_two_tau(fast_cfg, refocus):
    r = run_hahn_echo(fast_cfg.with_(refocus=refocus))
    m = r.metrics
    assert m.echo_peak_time == pytest.approx(2 * fast_cfg.tau, abs=1e-6)
    assert m.E_absorbed > 0 and m.E_echo > 0
    assert 0 < m.efficiency < 1
    assert (r.background is not None) == (refocus == "realistic")


def test_no_refocus_no_echo(fast_cfg):
    on = run_hahn_echo(fast_cfg.with_(refocus="ideal")).metrics
    off = run_hahn_echo(fast_cfg.with_(refocus="none")).metrics
    assert off.E_echo < 1e-3 * on.E_echo


def test_attenuation_modes(fast_cfg):
    cfg = fast_cfg.with_(refocus="ideal", bath=dec.BathSpec(n_configs=4, n_traj=2000,
                                                            id_samples=2000),
                         decay_grid=(0.0, 100e-6, 101))
    raw = run_hahn_echo(cfg).metrics
    fit = run_hahn_echo(cfg.with_(attenuation="fit")).metrics
    assert fit.attenuation == pytest.approx(math.exp(-2 * cfg.tau / fit.T2))
    assert fit.E_echo == pytest.approx(raw.E_echo * fit.attenuation**2)
    curve = run_hahn_echo(cfg.with_(attenuation="curve")).metrics
    assert 0 < curve.attenuation <= 1


def test_decay_scan_checks_revival(fast_cfg):
    with pytest.raises(ValueError, match="raise n_freq"):
        scan_echo_decay(fast_cfg.with_(refocus="ideal"), [10e-6, 40e-6])


def test_decay_scan_without_bath(fast_cfg):
    cfg = fast_cfg.with_(refocus="ideal")
    d = scan_echo_decay(cfg, [4e-6, 6e-6, 8e-6, 10e-6], sim_taus=[4e-6, 10e-6], bath=False)
    assert np.all(d.L_total == 1.0)
    assert d.simulated.tolist() == [True, False, False, True]
    assert np.all(np.isfinite(d.residual()))
