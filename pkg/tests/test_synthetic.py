import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sendai.spectral import spectrum_energy
from sendai.synthetic import (Mode, WaveSpec, extract_slice, generate_wave, simulation_variant, three_mode_wave,
                              two_season_proxy)


def test_three_mode_shape_and_origin():
    f = generate_wave(three_mode_wave())
    assert f.shape == (200, 128, 1)
    assert f.dt == 0.05
    assert f.values[0, 0, 0] == pytest.approx(0.0, abs=1e-12)


def test_three_mode_at_quarter_pi():
    # oracle: direct scalar evaluation of the three-term sum at x = pi/4, t = 0
    expected = math.sin(2 * math.pi / 4) + 0.4 * math.sin(5 * math.pi / 4) + 0.25 * math.sin(11 * math.pi / 4)
    assert expected == pytest.approx(0.8939, abs=1e-4)
    f = generate_wave(three_mode_wave())
    assert f.values[0, 16, 0] == pytest.approx(expected, abs=1e-12)


def test_time_axis():
    f = generate_wave(three_mode_wave())
    t = 0.05 * 7
    x = 2 * np.pi * 40 / 128
    expected = math.sin(2 * x - t) + 0.4 * math.sin(5 * x - 3 * t) + 0.25 * math.sin(11 * x - 7 * t)
    assert f.values[7, 40, 0] == pytest.approx(expected, abs=1e-12)


def test_keep_all_equals_generate():
    spec = three_mode_wave()
    assert np.array_equal(simulation_variant(spec, 3).values, generate_wave(spec).values)


def test_keep_one_is_first_mode():
    spec = three_mode_wave()
    sim = simulation_variant(spec, 1).values[:, :, 0]
    t = spec.times[:, None]
    x = spec.x[None, :]
    assert np.allclose(sim, np.sin(2 * x - t), atol=1e-12)


def test_residual_spectrum_only_at_5_and_11():
    spec = three_mode_wave()
    resid = generate_wave(spec).values - simulation_variant(spec, 1).values
    power = spectrum_energy(resid)[:, 0]
    total = power.sum()
    share = {k: (power[k] + power[-k]) / total for k in range(1, 64)}
    assert share[5] + share[11] == pytest.approx(1.0, abs=1e-10)
    # energy ratio follows the squared amplitudes
    assert share[5] / share[11] == pytest.approx((0.4 / 0.25) ** 2, rel=1e-8)


def test_unresolvable_wavenumber():
    with pytest.raises(ValueError):
        WaveSpec((Mode(1.0, 64, 1.0),), n=128)
    with pytest.raises(ValueError):
        WaveSpec((Mode(1.0, 2, 1.0, 1),), n=16, width=1)


def test_bad_keep():
    with pytest.raises(ValueError):
        simulation_variant(three_mode_wave(), 0)
    with pytest.raises(ValueError):
        simulation_variant(three_mode_wave(), 4)


def test_spec_json_round_trip():
    spec = two_season_proxy(32, 40)[1]
    assert WaveSpec.from_json(spec.to_json()) == spec


def test_two_season_proxy_differs_in_one_mode():
    sim, gt = two_season_proxy(32, 50)
    assert set(gt.modes) - set(sim.modes) == {gt.modes[-1]}
    assert len(gt.modes) == len(sim.modes) + 1
    f = generate_wave(gt)
    assert f.shape == (50, 32, 32)


def test_extract_slice():
    f = generate_wave(two_season_proxy(16, 10)[1])
    s = extract_slice(f, 4)
    assert s.shape == (10, 16, 1)
    assert np.array_equal(s.values[:, :, 0], f.values[:, :, 4])
    with pytest.raises(IndexError):
        extract_slice(f, 16)


@settings(max_examples=25, deadline=None)
@given(k=st.integers(1, 15), amp=st.floats(0.1, 3.0), omega=st.floats(-5, 5))
def test_single_mode_energy_is_on_its_bin(k, amp, omega):
    f = generate_wave(WaveSpec((Mode(amp, k, omega),), n=32, t_end=0.5, dt=0.05))
    power = spectrum_energy(f.values)[:, 0]
    assert (power[k] + power[-k]) / power.sum() == pytest.approx(1.0, abs=1e-9)
