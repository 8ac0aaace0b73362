import numpy as np
import pytest

from nvecho.pumping import (CALIBRATION_POINTS, PumpModel, calibrate_pump_model,
                            polarization_after_pump, pump_curve, repetition_rate)


def test_calibration_hits_points():
    m = calibrate_pump_model()
    for t, r in CALIBRATION_POINTS:
        assert m.relative(t) == pytest.approx(r, abs=1e-6)
    assert m.tau1 < m.tau2
    assert m.relative(1.0) == pytest.approx(0.97, abs=1e-6)


def test_round_trip_from_synthetic_curve():
    true = PumpModel(alpha=0.4, tau1=0.03, tau2=0.4)
    T = np.array([0.02, 0.05, 0.1, 0.2, 0.4, 0.8, 1.5])
    fit = calibrate_pump_model(list(zip(T, true.relative(T))), saturation=None)
    assert fit.alpha == pytest.approx(0.4, rel=1e-4)
    assert fit.tau1 == pytest.approx(0.03, rel=1e-4)
    assert fit.tau2 == pytest.approx(0.4, rel=1e-4)


def test_polarization_limits():
    m = calibrate_pump_model()
    assert polarization_after_pump(m, 0.0) == 0.0
    assert polarization_after_pump(m, 50.0) == pytest.approx(0.9)
    T, p = pump_curve(m, 2.0, 11)
    assert np.all(np.diff(p) > 0) and p.max() <= 0.9
    with pytest.raises(ValueError):
        polarization_after_pump(m, -1.0)


def test_repetition_rate():
    m = calibrate_pump_model()
    assert repetition_rate(m, 0.2, 1e-4) <= 5.0
    assert repetition_rate(m, 0.1, 1e-4) <= 10.0
    with pytest.raises(ValueError, match="zero"):
        repetition_rate(PumpModel(dead_time=0.0), 0.0, 0.0)


def test_validation():
    with pytest.raises(ValueError):
        PumpModel(p_max=1.2)
    with pytest.raises(ValueError):
        calibrate_pump_model([(0.1, 0.5), (0.1, 0.6)], saturation=None)
    with pytest.raises(ValueError):
        calibrate_pump_model([(0.1, 1.5)], saturation=(1.0, 0.97))
