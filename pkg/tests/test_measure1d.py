import math

import numpy as np
import pytest

from poincare_hitting.measure1d import (
    MeasureError, PotentialSpec, build_measure, catalog, cdf, density_ratio_bounds, level_radii,
    lemma_radii_bounds, modified_measure, node_cdf, node_sf, parse_potential, quantile,
    superlinear_certificate, certificate_violation, total_variation,
)


def test_exp_power_one_moments():
    m = build_measure(PotentialSpec("exp_power", {"p": 1.0}, (-40.0, 40.0)), 4096)
    assert m.Z == pytest.approx(2.0, rel=1e-4)
    assert abs(m.mean) < 1e-10
    assert m.variance == pytest.approx(2.0, rel=1e-4)
    assert m.mean_abs_dev == pytest.approx(1.0, rel=1e-4)


def test_gaussian_moments():
    m = build_measure(PotentialSpec("gaussian", {"sigma": 1.0}, (-8.0, 8.0)), 4096)
    assert m.variance == pytest.approx(1.0, rel=1e-6)
    assert m.Z == pytest.approx(math.sqrt(2 * math.pi), rel=1e-6)


def test_uniform_moments():
    m = build_measure(parse_potential("uniform:r=1"))
    assert m.Z == pytest.approx(2.0, rel=1e-9)
    assert m.variance == pytest.approx(1 / 3, rel=1e-6)
    assert abs(m.median) < 1e-9


def test_weights_normalised_for_catalog():
    for spec in catalog().values():
        m = build_measure(spec)
        assert abs(m.weights.sum() - 1.0) < 1e-12
        # node weights and the cell rule agree to second order in the spacing
        assert m.variance == pytest.approx(float(m.weights @ (m.grid - m.mean) ** 2), rel=1e-4)


def test_cdf_values():
    g = build_measure(parse_potential("gaussian"))
    assert cdf(g, 0.0) == pytest.approx(0.5, abs=1e-9)
    e = build_measure(parse_potential("exp_power:p=1"))
    assert cdf(e, math.log(2)) == pytest.approx(0.75, abs=1e-4)
    u = build_measure(parse_potential("uniform:r=1"))
    assert cdf(u, 0.5) == pytest.approx(0.75, abs=1e-9)
    assert cdf(u, -5.0) == 0.0 and cdf(u, 5.0) == 1.0


def test_quantile_inverts_cdf():
    m = build_measure(parse_potential("exp_power:p=1.5"))
    for p in (0.01, 0.3, 0.5, 0.9):
        assert cdf(m, quantile(m, p)) == pytest.approx(p, abs=1e-12)


def test_tail_functions_add_up():
    m = build_measure(parse_potential("gaussian"))
    assert np.allclose(node_cdf(m) + node_sf(m), 1.0, atol=1e-12)


def test_level_radii():
    # radii are grid quantities measured from a grid argmin: exact up to two cells
    m = build_measure(parse_potential("exp_power:p=1"))
    e = level_radii(m, 1.0)
    assert e.R_minus == pytest.approx(1.0, abs=2 * m.dx) and e.R_plus == pytest.approx(1.0, abs=2 * m.dx)
    m = build_measure(parse_potential("gaussian"))
    g = level_radii(m, 2.0)
    assert g.R_minus == pytest.approx(2.0, abs=2 * m.dx) and g.R_plus == pytest.approx(2.0, abs=2 * m.dx)
    m = build_measure(parse_potential("uniform:r=1"))
    u = level_radii(m, 0.3)
    assert u.capped and u.R_plus == pytest.approx(1.0, abs=2 * m.dx)


@pytest.mark.parametrize("text,beta,c", [("exp_power:p=1", 1.0, 1.0), ("gaussian", 2.0, 2.0),
                                         ("exp_power:p=4", 1.0, 1.0)])
def test_certificates(text, beta, c):
    m = build_measure(parse_potential(text))
    cert = superlinear_certificate(m, beta)
    assert cert.valid
    assert cert.h_beta == 0.0
    assert cert.c_beta >= c * (1 - 0.01)
    assert certificate_violation(m, cert) <= 1e-9


def test_compact_support_has_no_certificate():
    cert = superlinear_certificate(build_measure(parse_potential("uniform:r=1")), 1.0)
    assert not cert.valid and cert.reason == "compact support"


def test_lemma_radii_closed_form():
    lo, hi = lemma_radii_bounds(2.0, 1.0, 1.0, 0.0)
    assert lo == pytest.approx(0.0690, abs=1e-4)
    assert hi == pytest.approx(12 * 2 * math.e * 3, rel=1e-12)


def test_modified_measure_ratio_bounds():
    m = build_measure(parse_potential("exp_power:p=1"))
    mb = modified_measure(m, 1.0)
    cert = superlinear_certificate(m, 1.0)
    lo, hi = density_ratio_bounds(cert)
    ratio = mb.weights / m.weights
    assert ratio.min() >= lo * (1 - 1e-9) and ratio.max() <= hi * (1 + 1e-9)
    inside = np.abs(m.grid) < 0.99
    assert np.ptp(mb.density[inside]) < 1e-12 * mb.density[inside].max()


def test_modified_measure_degenerates():
    m = build_measure(parse_potential("gaussian"))
    assert total_variation(m, modified_measure(m, 1e-4)) < 1e-3


def test_modified_measure_needs_certificate():
    with pytest.raises(MeasureError, match="superlinearity required"):
        modified_measure(build_measure(parse_potential("uniform:r=1")), 1.0)


def test_bad_inputs():
    with pytest.raises(MeasureError):
        build_measure(parse_potential("gaussian"), 10)
    with pytest.raises(MeasureError):
        parse_potential("nope:x=1")


def test_refinement_is_stable():
    for name in catalog():
        spec = catalog()[name]
        a, b = build_measure(spec, 4096), build_measure(spec, 8192)
        assert b.variance == pytest.approx(a.variance, rel=1e-6)
        assert b.Z == pytest.approx(a.Z, rel=1e-6)
        assert abs(b.mean - a.mean) <= 1e-6 * max(1.0, abs(a.mean))
