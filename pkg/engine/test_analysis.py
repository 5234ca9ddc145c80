"""
Tests for on-axis errors, the localisedness map and the convergence studies.
"""
import math

import numpy as np
import pandas as pd
import pytest

import config
from analysis import (ConvergenceRecord, OnAxisProfile, box_taper, domain_shrink_study, fit_loglog_slope,
                      localisedness_map, on_axis_error, on_axis_profile, one_percent_fractions,
                      quadrature_convergence_study, rule_of_thumb_fractions, study_workers, write_records)
from config import find_preset
from grid import DomainBox, HarmonicField, VoxelGrid, rule_of_thumb_fraction_x
from transducer import transducer_preset

L_H131 = math.sqrt(0.035 ** 2 - 0.0165 ** 2) - 1e-4
D_H131 = 10.2e-3


def _profile(x, values, n=2):
    return OnAxisProfile(np.asarray(x, dtype=float), np.asarray(values, dtype=complex), n)


def test_profile_takes_the_axis_column():
    grid = VoxelGrid.anchored(DomainBox.axial(-2e-3, 2e-3, 1e-3), 5e-4, 2)
    c = grid.centres().reshape(*grid.dims, 3)
    values = c[..., 0] + 1j * (c[..., 1] ** 2 + c[..., 2] ** 2)
    profile = on_axis_profile(HarmonicField(grid, values))
    np.testing.assert_allclose(profile.x, grid.axis_centres(0))
    np.testing.assert_allclose(profile.values, grid.axis_centres(0), atol=1e-15)


def test_tied_columns_are_averaged():
    # Centres at +-delta/2 straddle the axis
    grid = VoxelGrid.anchored(DomainBox.axial(-2e-3, 2e-3, 1e-3), 5e-4, 2, (0.0, -2.5e-4, -2.5e-4))
    c = grid.centres().reshape(*grid.dims, 3)
    profile = on_axis_profile(HarmonicField(grid, (c[..., 1] + c[..., 2] + 1.0).astype(complex)))
    np.testing.assert_allclose(profile.values, 1.0, rtol=1e-12)


def test_error_of_identical_and_of_zero_profiles():
    x = np.linspace(0.0, 1.0, 11)
    ref = _profile(x, np.exp(1j * x))
    assert on_axis_error(ref, ref) == 0.0
    assert on_axis_error(_profile(x, np.zeros(11)), ref) == pytest.approx(100.0)


def test_error_uses_the_normalizer():
    x = np.linspace(0.0, 1.0, 11)
    ref = _profile(x, np.ones(11))
    p = _profile(x, 1.1 * np.ones(11))
    big = _profile(x, 10 * np.ones(11), 1)
    assert on_axis_error(p, ref) == pytest.approx(10.0)
    assert on_axis_error(p, ref, big) == pytest.approx(1.0)


def test_error_is_measured_on_the_shared_range():
    ref = _profile(np.linspace(0.0, 2.0, 21), np.ones(21))
    p = _profile(np.linspace(0.0, 1.0, 6), np.ones(6))
    assert on_axis_error(p, ref) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError, match='overlap'):
        on_axis_error(_profile([5.0, 6.0], [1.0, 1.0]), ref)


def test_profile_needs_increasing_x():
    with pytest.raises(ValueError, match='increasing'):
        _profile([0.0, 0.0, 1.0], [1, 2, 3])


def test_profile_frame():
    frame = _profile([0.0, 1.0], [3 + 4j, 1j]).to_frame()
    assert list(frame.columns) == ['x_m', 're_Pa', 'im_Pa', 'abs_Pa']
    assert frame['abs_Pa'].tolist() == [5.0, 1.0]


def test_localisedness_map():
    grid = VoxelGrid.anchored(DomainBox.axial(-1e-3, 1e-3, 5e-4), 5e-4, 2)
    values = np.zeros(grid.dims, dtype=complex)
    values[2, 1, 1] = 10.0
    values[1, 1, 1] = 1.0j
    q = localisedness_map(HarmonicField(grid, values)).values
    assert q[2, 1, 1] == 0.0
    assert q[1, 1, 1] == pytest.approx(-1.0)
    assert q[0, 0, 0] == -np.inf
    with pytest.raises(ValueError):
        localisedness_map(HarmonicField(grid, np.zeros(grid.dims, dtype=complex)))


def test_loglog_slope():
    n_w = np.array([4.0, 6.0, 8.0, 10.0])
    slope, intercept = fit_loglog_slope(n_w, 50.0 * n_w ** -2)
    assert slope == pytest.approx(-2.0, abs=1e-12)
    assert intercept == pytest.approx(math.log(50.0), abs=1e-12)
    with pytest.raises(ValueError):
        fit_loglog_slope([4.0, 6.0], [1.0, 0.0])


def test_negative_error_is_rejected():
    with pytest.raises(ValueError):
        ConvergenceRecord(2, 'n_w', 4.0, -1.0)


def _sweep(harmonic, control, pairs):
    return [ConvergenceRecord(harmonic, control, v, e) for v, e in pairs]


def test_one_percent_fractions():
    records = (_sweep(2, 'fraction_x', [(1.0, 0.0), (0.5, 0.5), (0.25, 2.0)])
               + _sweep(2, 'fraction_yz', [(1.0, 0.0), (0.5, 2.0), (0.25, 0.5)])
               + _sweep(3, 'fraction_x', [(1.0, 0.0), (0.5, 0.2), (0.25, 0.9)])
               + _sweep(3, 'fraction_yz', [(1.0, 3.0), (0.5, 0.1)])
               + _sweep(3, 'Q0', [(-1.0, 50.0)]))
    row = one_percent_fractions(records)
    assert row['x'] == [0.5, 0.25]
    assert row['yz'] == [1.0, 1.0]
    assert one_percent_fractions(records, threshold=0.15)['x'] == [1.0, 1.0]


def test_rule_of_thumb_row():
    row = rule_of_thumb_fractions(5, L_H131, D_H131)
    assert row['x'] == pytest.approx([rule_of_thumb_fraction_x(i, L_H131, D_H131) for i in range(2, 6)])
    assert row['x'][0] == pytest.approx(1.0)
    assert row['yz'] == pytest.approx([1.0, 2 / 3, 0.5, 0.4])


@pytest.mark.parametrize('name', ['h131-water-100w', 'h131-water-150w', 'h131-liver-100w'])
def test_measured_tables_sit_inside_the_rule_of_thumb(name):
    measured = find_preset('domain_fractions', name)
    rule = rule_of_thumb_fractions(5, L_H131, D_H131)
    assert all(m <= r + 1e-12 for m, r in zip(measured['x'], rule['x']))
    assert all(m <= r + 1e-12 for m, r in zip(measured['yz'], rule['yz']))


def test_study_workers_follow_the_memory_budget(monkeypatch):
    monkeypatch.setitem(config.ANALYSIS_CONFIG, 'memory_budget_bytes', 10)
    assert study_workers(3, 5) == 3
    assert study_workers(3, 2) == 2
    assert study_workers(100, 5) == 1


def test_write_records(tmp_path):
    records = [ConvergenceRecord(2, 'n_w', 4.0, 3.0), ConvergenceRecord(3, 'Q0', -1.0, 0.5, 0.8, 0.6, 0.2)]
    records_path, plot_path = write_records(records, tmp_path, 'demo')
    assert records_path.name == 'records_demo.csv'

    frame = pd.read_csv(records_path)
    assert list(frame.columns) == ['harmonic', 'control_variable', 'value', 'error_percent',
                                   'fraction_x', 'fraction_yz', 'trend']
    assert math.isnan(frame['fraction_x'][0])
    plot = pd.read_csv(plot_path)
    assert plot['series'].tolist() == ['p2:n_w', 'p3:Q0']


def test_domain_shrink_study(small_cascade):
    records = domain_shrink_study(small_cascade.config, Q0_values=[-3.0, -1.0], fractions=[1.0, 0.5])
    assert len(records) == 2 * (2 + 2 * 2)
    assert {r.harmonic for r in records} == {2, 3}

    for r in records:
        if r.value == 1.0 and r.control_variable != 'Q0':
            assert r.error_percent < 1e-9
        if r.control_variable == 'Q0':
            assert r.trend > 0
            assert 0 < r.fraction_x <= 1 and 0 < r.fraction_yz <= 1
        else:
            assert math.isnan(r.trend)

    # A looser threshold keeps a larger box
    for i in (2, 3):
        loose, tight = (next(r for r in records if r.harmonic == i and r.value == q0) for q0 in (-3.0, -1.0))
        assert loose.fraction_x >= tight.fraction_x


@pytest.mark.slow
def test_quadrature_converges_at_second_order(liver):
    # 2 cm about the focus, source windowed to zero at the faces
    h131 = transducer_preset('H131', power=100.0, n_points=1024)
    l = h131.focal_length
    box = DomainBox.axial(l - 0.01, l + 0.01, 1.5e-3)
    study = quadrature_convergence_study(h131, liver, [4, 6, 8, 10], 30, domain=box, taper=1e-3)

    errors = {r.value: r.error_percent for r in study.records}
    assert errors[4.0] > errors[6.0] > errors[8.0] > errors[10.0]
    assert -2.2 <= study.slope <= -1.8
    assert errors[6.0] < 1.5


def test_box_taper():
    box = DomainBox.axial(-2e-3, 2e-3, 1e-3)
    grid = VoxelGrid.anchored(DomainBox.axial(-3e-3, 3e-3, 1.5e-3), 2.5e-4, 2)
    window = box_taper(grid, box, 5e-4)
    x, y = grid.axis_centres(0), grid.axis_centres(1)
    centre = (np.argmin(np.abs(x)), np.argmin(np.abs(y)), np.argmin(np.abs(y)))

    assert window[centre] == 1.0
    assert window.min() == 0.0 and window.max() == 1.0
    assert np.all(window[np.abs(x) > 1.99e-3] < 1e-12)
    assert np.all(window[:, np.abs(y) > 0.99e-3] < 1e-12)
    # Half way through the ramp
    i = np.argmin(np.abs(x - 1.75e-3))
    assert window[i, centre[1], centre[2]] == pytest.approx(0.5)
    with pytest.raises(ValueError, match='Taper'):
        box_taper(grid, box, 1.5e-3)


def test_reference_resolution_must_be_finer(low_frequency_h131, water):
    with pytest.raises(ValueError, match='exceed'):
        quadrature_convergence_study(low_frequency_h131, water, [4, 6], 6)
