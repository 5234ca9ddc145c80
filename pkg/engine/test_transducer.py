"""
Tests for the bowl discretisation, the monopole field and power normalisation.
"""
import math

import numpy as np
import pytest

import config
from config import ConfigError
from medium import complex_wavenumber
from transducer import (BowlTransducer, IncidentField, SourceField, aperture_disc, distribute_points,
                        normalize_to_power, radiated_power, resolve_transducer, spherical_cap_on_axis,
                        transducer_from_dict, transducer_preset, unnormalized_field)

L_H131, R_H131 = 0.035, 0.0165


@pytest.mark.parametrize('n_p', [2, 7, 64, 500, 4096])
def test_points_lie_on_the_cap(n_p):
    points = distribute_points(L_H131, R_H131, n_p)
    assert points.shape == (n_p, 3)

    radii = np.linalg.norm(points - np.array([L_H131, 0.0, 0.0]), axis=1)
    np.testing.assert_allclose(radii, L_H131, rtol=1e-12)

    rim_depth = L_H131 - math.sqrt(L_H131 ** 2 - R_H131 ** 2)
    assert points[:, 0].min() >= -1e-15
    assert points[:, 0].max() <= rim_depth * (1 + 1e-12)
    assert np.hypot(points[:, 1], points[:, 2]).max() <= R_H131 * (1 + 1e-12)


def test_single_point_is_the_apex():
    np.testing.assert_array_equal(distribute_points(L_H131, R_H131, 1), np.zeros((1, 3)))


def test_distribution_is_deterministic():
    np.testing.assert_array_equal(distribute_points(L_H131, R_H131, 1000), distribute_points(L_H131, R_H131, 1000))


def test_points_carry_equal_area():
    # Area-midpoint rings put the mean depth at half the rim depth
    points = distribute_points(L_H131, R_H131, 4096)
    rim_depth = L_H131 - math.sqrt(L_H131 ** 2 - R_H131 ** 2)
    assert points[:, 0].mean() == pytest.approx(rim_depth / 2, rel=1e-9)


@pytest.mark.parametrize('l, R, n_p', [(0.035, 0.035, 10), (0.035, 0.0, 10), (0.035, 0.0165, 0)])
def test_degenerate_bowl(l, R, n_p):
    with pytest.raises(ValueError):
        distribute_points(l, R, n_p)


def test_bowl_geometry(h131):
    assert h131.rim_depth == pytest.approx(0.035 - math.sqrt(0.035 ** 2 - 0.0165 ** 2), rel=1e-12)
    assert h131.area == pytest.approx(2 * math.pi * 0.035 * h131.rim_depth, rel=1e-12)
    np.testing.assert_array_equal(h131.focus, [0.035, 0.0, 0.0])
    with pytest.raises(ValueError):
        h131.source_points[0, 0] = 1.0


def test_transducer_from_dict_rejects_wide_aperture():
    with pytest.raises(ConfigError, match='outer_radius'):
        transducer_from_dict({'f0': 1e6, 'focal_length': 0.03, 'outer_radius': 0.03})


def test_resolve_transducer_overrides():
    transducer = resolve_transducer('H101', power=25.0, n_points=128)
    assert (transducer.name, transducer.power, transducer.n_points) == ('H101', 25.0, 128)
    assert len(transducer.source_points) == 128
    with pytest.raises(ConfigError):
        resolve_transducer('H999')


def _reference_axis(transducer, n=400):
    # [l - L, l + d] of the default reference domain
    l, R = transducer.focal_length, transducer.outer_radius
    return np.linspace(l - (math.sqrt(l ** 2 - R ** 2) - 1e-4), l + 10.2e-3, n)


def _cap_error(transducer, water, x):
    k = complex_wavenumber(water, transducer.f0, 1)
    points = np.column_stack((x, np.zeros_like(x), np.zeros_like(x)))
    discrete = unnormalized_field(transducer, points, k)
    exact = spherical_cap_on_axis(transducer, x, k)
    return discrete, np.linalg.norm(discrete - exact) / np.linalg.norm(exact), exact


def test_monopole_sum_matches_the_continuous_cap_on_axis(h131, water):
    x = _reference_axis(h131)
    assert x[0] > h131.rim_depth
    _, error, _ = _cap_error(h131, water, x)
    assert error < 0.01


def test_more_sources_converge_to_the_cap(water):
    x = _reference_axis(transducer_preset('H131'))
    coarse, coarse_error, exact = _cap_error(transducer_preset('H131', n_points=1024), water, x)
    fine, fine_error, _ = _cap_error(transducer_preset('H131', n_points=4096), water, x)
    assert fine_error < coarse_error
    assert np.linalg.norm(coarse - fine) < coarse_error * np.linalg.norm(exact)


def test_cap_formula_at_the_focus(h131, water):
    k = complex_wavenumber(water, h131.f0, 1)
    at_focus = spherical_cap_on_axis(h131, np.array([h131.focal_length]), k)[0]
    near_focus = spherical_cap_on_axis(h131, np.array([h131.focal_length * (1 - 1e-8)]), k)[0]
    assert at_focus == pytest.approx(near_focus, rel=1e-5)


def test_threaded_evaluation_is_identical(monkeypatch, h131, water):
    monkeypatch.setitem(config.TRANSDUCER_CONFIG, 'eval_chunk_pairs', 50_000)
    k = complex_wavenumber(water, h131.f0, 1)
    points = np.random.default_rng(3).uniform([0.02, -0.005, -0.005], [0.045, 0.005, 0.005], (200, 3))
    np.testing.assert_array_equal(unnormalized_field(h131, points, k, threads=4),
                                  unnormalized_field(h131, points, k, threads=1))


def test_evaluation_at_a_source_point_is_rejected(h131, water):
    k = complex_wavenumber(water, h131.f0, 1)
    with pytest.raises(ValueError, match='coincides'):
        unnormalized_field(h131, h131.source_points[:1], k)


def test_aperture_disc_weights_sum_to_disc_area(h131):
    points, weights = aperture_disc(h131, 2e-4, standoff=1e-3)
    assert weights.sum() == pytest.approx(math.pi * h131.outer_radius ** 2, rel=1e-12)
    np.testing.assert_allclose(points[:, 0], h131.rim_depth + 1e-3)


def test_normalisation_reaches_target_power(water):
    transducer = transducer_preset('H131', power=80.0, n_points=512)
    incident = IncidentField(transducer, water)
    normalized = normalize_to_power(incident.disc_field(), transducer, water)
    assert radiated_power(normalized, water) == pytest.approx(80.0, rel=1e-12)
    assert normalized.normalization == pytest.approx(incident.normalization, rel=1e-12)


def test_normalisation_is_idempotent(water):
    transducer = transducer_preset('H131', power=30.0, n_points=256)
    once = normalize_to_power(IncidentField(transducer, water).disc_field(), transducer, water)
    twice = normalize_to_power(once, transducer, water)
    np.testing.assert_allclose(twice.values, once.values, rtol=1e-12)
    assert twice.normalization == pytest.approx(once.normalization, rel=1e-12)


def test_disc_lies_in_the_rim_plane(h131, water):
    incident = IncidentField(h131, water)
    assert incident.disc_standoff == 0.0
    np.testing.assert_allclose(incident.disc_field().points[:, 0], h131.rim_depth, rtol=1e-12)


def test_disc_power_is_resolved(h131, water):
    incident = IncidentField(h131, water)
    finer = incident.disc_field(incident.disc_spacing / 2)
    measured = radiated_power(SourceField(finer.points, incident.normalization * finer.values, finer.weights), water)
    assert measured == pytest.approx(h131.power, rel=1e-3)


def test_pressure_scales_with_root_power(water):
    points = np.array([[0.035, 0.0, 0.0], [0.03, 0.002, -0.001]])
    low = IncidentField(transducer_preset('H131', power=25.0, n_points=256), water).evaluate(points)
    high = IncidentField(transducer_preset('H131', power=100.0, n_points=256), water).evaluate(points)
    np.testing.assert_array_equal(high, 2 * low)


def test_zero_power_gives_zero_field(water):
    incident = IncidentField(transducer_preset('H131', power=0.0, n_points=64), water)
    np.testing.assert_array_equal(incident.on_axis(np.array([0.03, 0.035])), 0)


def test_zero_field_cannot_be_normalised(h131, water):
    points, weights = aperture_disc(h131, 1e-3)
    silent = SourceField(points, np.zeros(len(points), dtype=complex), weights)
    with pytest.raises(ValueError, match='zero'):
        normalize_to_power(silent, h131, water)


def test_power_needs_quadrature_weights(water):
    with pytest.raises(ValueError, match='weights'):
        radiated_power(SourceField(np.zeros((2, 3)), np.ones(2, dtype=complex)), water)


def test_invalid_transducer_parameters():
    with pytest.raises(ValueError):
        BowlTransducer(f0=0.0, focal_length=0.035, outer_radius=0.0165)
    with pytest.raises(ValueError):
        BowlTransducer(f0=1e6, focal_length=0.035, outer_radius=0.0165, power=-1.0)
