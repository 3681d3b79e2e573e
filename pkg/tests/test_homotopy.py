import numpy as np
import pytest

from homotopy_gym.homotopy import (
    HomotopyParams, interpolate_model, lambda_schedule, timestep_schedule,
)
from homotopy_gym.rigid_body import builtin_model_path, load_model, nominal_composite


@pytest.fixture(scope="module")
def model():
    return load_model(builtin_model_path())


def test_lambda_one_recovers_full_model(model):
    out = interpolate_model(model, 1.0)
    for a, b in zip(out.links, model.links):
        assert a.mass == b.mass
        np.testing.assert_array_equal(a.inertia, b.inertia)
        np.testing.assert_array_equal(a.com, b.com)
        np.testing.assert_array_equal(a.origin_xyz, b.origin_xyz)


def test_lambda_min_scales_leg_links(model):
    out = interpolate_model(model, 0.01)
    for a, b in zip(out.links[1:], model.links[1:]):
        assert a.mass == pytest.approx(0.01 * b.mass, rel=1e-12)
        np.testing.assert_allclose(a.inertia, 0.01 * b.inertia, rtol=1e-12)


def test_total_mass_constant(model):
    total = model.total_mass
    for lam in np.linspace(0.01, 1.0, 50):
        out = interpolate_model(model, lam)
        assert abs(out.total_mass - total) < 1e-10


def test_trunk_inertia_positive_definite(model):
    for lam in np.linspace(0.01, 1.0, 50):
        out = interpolate_model(model, lam)
        assert np.min(np.linalg.eigvalsh(out.links[0].inertia)) > 0.0


def test_mass_fields_affine_in_lambda(model):
    # model(lam) = lam * model(1) + (1 - lam) * model(0-extrapolated).
    m_comp, _, _ = nominal_composite(model)
    for lam in (0.2, 0.5, 0.77):
        out = interpolate_model(model, lam)
        trunk_extrap0 = m_comp            # trunk absorbs everything at lam -> 0
        expected_trunk = lam * model.links[0].mass + (1 - lam) * trunk_extrap0
        assert abs(out.links[0].mass - expected_trunk) < 1e-12
        for a, b in zip(out.links[1:], model.links[1:]):
            assert abs(a.mass - lam * b.mass) < 1e-12


def test_composite_com_follows_closed_form(model):
    """The linear trunk-COM interpolation shifts the composite COM by
    lam (1 - lam) (m_trunk - m_comp)(c_comp - c_trunk) / m_comp; exact at the
    endpoints and bounded in between."""
    m_comp, _, c_comp = nominal_composite(model)
    m_tr = model.links[0].mass
    c_tr_pose = c_comp * 0.0              # trunk COM in base frame at nominal pose
    c_tr_pose = model.links[0].com
    for lam in np.linspace(0.01, 1.0, 21):
        out = interpolate_model(model, lam)
        _, _, c_out = nominal_composite(out)
        expected = c_comp + lam * (1 - lam) * (m_tr - m_comp) * (c_comp - c_tr_pose) / m_comp
        np.testing.assert_allclose(c_out, expected, atol=1e-9)
    _, _, c_end = nominal_composite(interpolate_model(model, 1.0))
    np.testing.assert_allclose(c_end, c_comp, atol=1e-12)


def test_geometry_unchanged(model):
    out = interpolate_model(model, 0.3)
    for a, b in zip(out.links, model.links):
        np.testing.assert_array_equal(a.origin_xyz, b.origin_xyz)
        np.testing.assert_array_equal(a.axis, b.axis)
    np.testing.assert_array_equal(out.foot_offsets, model.foot_offsets)


def test_lambda_out_of_range_rejected(model):
    with pytest.raises(ValueError):
        interpolate_model(model, 0.0)
    with pytest.raises(ValueError):
        interpolate_model(model, 1.2)


def test_lambda_schedule_endpoints():
    assert lambda_schedule(0, 900) == pytest.approx(0.01)
    assert lambda_schedule(900, 900) == pytest.approx(1.0)
    assert lambda_schedule(5000, 900) == pytest.approx(1.0)


def test_lambda_schedule_midpoint():
    assert lambda_schedule(450, 900) == pytest.approx(0.505)


def test_timestep_schedule_values():
    assert timestep_schedule(1.0, 2e-3) == pytest.approx(2e-3)
    assert timestep_schedule(0.01, 2e-3, 0.25) == pytest.approx(0.2575 * 2e-3)


def test_timestep_schedule_monotone():
    lams = np.linspace(0.01, 1.0, 100)
    dts = [timestep_schedule(l, 2e-3) for l in lams]
    assert np.all(np.diff(dts) >= 0.0)


def test_homotopy_params_validation():
    with pytest.raises(ValueError):
        HomotopyParams(lam=0.0)
    with pytest.raises(ValueError):
        HomotopyParams(lam=0.5, total_iterations=0)
    with pytest.raises(ValueError):
        HomotopyParams(lam=0.5, dt_min_fraction=0.0)
