from dataclasses import replace

import numpy as np
import pytest

from homotopy_gym.geom import so3_exp
from homotopy_gym.rigid_body import (
    ArticulatedModel, ContactParams, Link, builtin_model_path, contact_force,
    convert_actions, foot_jacobian, forward_dynamics, forward_kinematics,
    fullbody_step, load_model, mass_matrix, nominal_q,
)
from homotopy_gym.rigid_body.dynamics import SWING_KD, SWING_KP
from homotopy_gym.rigid_body.kinematics import (
    angular_momentum_about_com, mechanical_energy,
)


@pytest.fixture(scope="module")
def model():
    return load_model(builtin_model_path())


def random_q(model, rng, angle_scale=0.5):
    q = nominal_q(model)
    q[0:3] = rng.standard_normal(3)
    q[3:12] = so3_exp(rng.standard_normal(3) * 0.6).reshape(-1)
    q[12:] += rng.standard_normal(model.n_joints) * angle_scale
    return q


def integrate_q(model, q, qd, h):
    out = q.copy()
    out[0:3] += h * qd[0:3]
    R = q[3:12].reshape(3, 3)
    out[3:12] = (so3_exp(qd[3:6] * h) @ R).reshape(-1)
    out[12:] += h * qd[6:]
    return out


# -- forward kinematics -------------------------------------------------------


def test_fk_zero_configuration(model):
    q = nominal_q(model)
    q[2] = 0.0
    q[12:] = 0.0
    _, _, feet = forward_kinematics(model, q)
    expected = np.array([
        [0.19, 0.172, -0.4], [0.19, -0.172, -0.4],
        [-0.19, 0.172, -0.4], [-0.19, -0.172, -0.4],
    ])
    np.testing.assert_allclose(feet, expected, atol=1e-12)


def test_fk_rigid_translation(model):
    rng = np.random.default_rng(0)
    q = random_q(model, rng)
    _, _, feet = forward_kinematics(model, q)
    d = np.array([0.3, -1.2, 0.7])
    q2 = q.copy()
    q2[0:3] += d
    _, _, feet2 = forward_kinematics(model, q2)
    np.testing.assert_allclose(feet2, feet + d, atol=1e-12)


def test_fk_velocity_finite_difference(model):
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(5):
        q = random_q(model, rng)
        qd = rng.standard_normal(18)
        for f in range(4):
            J = foot_jacobian(model, q, f)
            _, _, feet0 = forward_kinematics(model, q)
            _, _, feet1 = forward_kinematics(model, integrate_q(model, q, qd, h))
            v_fd = (feet1[f] - feet0[f]) / h
            np.testing.assert_allclose(J @ qd, v_fd, atol=1e-4)


# -- foot jacobian --------------------------------------------------------------


def test_jacobian_other_leg_columns_zero(model):
    rng = np.random.default_rng(2)
    q = random_q(model, rng)
    for f in range(4):
        J = foot_jacobian(model, q, f)
        for other in range(4):
            if other == f:
                continue
            block = J[:, 6 + 3 * other: 9 + 3 * other]
            np.testing.assert_array_equal(block, np.zeros((3, 3)))


def test_jacobian_central_difference(model):
    rng = np.random.default_rng(3)
    q = random_q(model, rng)
    qd = rng.standard_normal(18)
    h = 1e-6
    for f in range(4):
        J = foot_jacobian(model, q, f)
        _, _, fp = forward_kinematics(model, integrate_q(model, q, qd, h))
        _, _, fm = forward_kinematics(model, integrate_q(model, q, qd, -h))
        v_fd = (fp[f] - fm[f]) / (2 * h)
        np.testing.assert_allclose(J @ qd, v_fd, atol=1e-5)


def test_jacobian_base_translation_block(model):
    rng = np.random.default_rng(4)
    q = random_q(model, rng)
    for f in range(4):
        np.testing.assert_array_equal(foot_jacobian(model, q, f)[:, 0:3], np.eye(3))


def test_jacobian_transpose_duality(model):
    rng = np.random.default_rng(5)
    q = random_q(model, rng)
    for _ in range(20):
        f = rng.standard_normal(3)
        qd = rng.standard_normal(18)
        J = foot_jacobian(model, q, 1)
        lhs = (J.T @ f) @ qd
        rhs = f @ (J @ qd)
        assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


# -- forward dynamics -------------------------------------------------------------


def test_fd_zero_everything(model):
    weightless = replace(model, gravity=np.zeros(3))
    q = nominal_q(model)
    qdd = forward_dynamics(weightless, q, np.zeros(18), np.zeros(18))
    np.testing.assert_allclose(qdd, np.zeros(18), atol=1e-12)


def test_fd_free_fall(model):
    q = nominal_q(model)
    qdd = forward_dynamics(model, q, np.zeros(18), np.zeros(18))
    np.testing.assert_allclose(qdd[0:3], model.gravity, atol=1e-10)
    np.testing.assert_allclose(qdd[3:], np.zeros(15), atol=1e-10)


def test_fd_pendulum_reduction():
    """Heavy supported base with one revolute link reduces to the analytic
    pendulum: qdd = -(m g l_c cos theta) / I_total."""
    m_p, l_c, g = 1.3, 0.25, 9.81
    rod_iyy = m_p * (2 * l_c) ** 2 / 12.0
    big = 1e9
    links = (
        Link(name="base", parent=-1, joint_type="floating", axis=np.zeros(3),
             origin_xyz=np.zeros(3), origin_rpy=np.zeros(3), mass=big,
             inertia=big * np.eye(3), com=np.zeros(3)),
        Link(name="rod", parent=0, joint_type="revolute", axis=np.array([0.0, 1.0, 0.0]),
             origin_xyz=np.zeros(3), origin_rpy=np.zeros(3), mass=m_p,
             inertia=np.diag([1e-8, rod_iyy, rod_iyy]), com=np.array([-l_c, 0.0, 0.0])),
    )
    pend = ArticulatedModel(
        links=links, foot_links=np.array([0]), foot_offsets=np.zeros((1, 3)),
        foot_radius=0.01, workspace_radius=1.0, torque_limit=100.0, mu=0.6,
        gravity=np.array([0.0, 0.0, -g]), nominal_base_height=0.0,
        nominal_joints=np.zeros(1))
    support = np.array([[0.0, 0.0, (big + m_p) * g]])
    I_tot = rod_iyy + m_p * l_c ** 2
    for theta in (0.0, 0.4, -1.1, 2.0):
        q = np.zeros(13)
        q[3:12] = np.eye(3).reshape(-1)
        q[12] = theta
        qdd = forward_dynamics(pend, q, np.zeros(7), np.zeros(7), support)
        expected = -(m_p * g * l_c * np.cos(theta)) / I_tot
        assert qdd[6] == pytest.approx(expected, rel=1e-6)


def test_mass_matrix_spd(model):
    rng = np.random.default_rng(6)
    worst = np.inf
    for _ in range(1000):
        q = random_q(model, rng, angle_scale=1.0)
        M = mass_matrix(model, q)
        np.testing.assert_allclose(M, M.T, atol=1e-10)
        worst = min(worst, np.linalg.eigvalsh(0.5 * (M + M.T)).min())
    assert worst > 0.0


# -- contact model ------------------------------------------------------------------


def test_contact_separated_no_force():
    np.testing.assert_array_equal(
        contact_force(-0.001, 0.0, np.zeros(3), ContactParams()), np.zeros(3))


def test_contact_static_spring():
    params = ContactParams()
    out = contact_force(0.002, 0.0, np.zeros(3), params)
    assert out[2] == pytest.approx(params.k_n * 0.002)
    np.testing.assert_array_equal(out[:2], np.zeros(2))


def test_contact_cone_bound_sweep():
    params = ContactParams()
    rng = np.random.default_rng(7)
    for _ in range(500):
        pen = rng.uniform(0, 0.01)
        vn = rng.uniform(-1, 1)
        vt = rng.standard_normal(3) * rng.uniform(0, 2)
        vt[2] = 0.0
        out = contact_force(pen, vn, vt, params)
        assert out[2] >= 0.0
        assert np.hypot(out[0], out[1]) <= params.mu * out[2] + 1e-12


def test_contact_never_pulls():
    params = ContactParams()
    out = contact_force(0.0005, 10.0, np.zeros(3), params)   # fast separation
    assert out[2] == 0.0


# -- action conversion -----------------------------------------------------------------


def test_paper_pd_gains():
    assert SWING_KP == 500.0
    assert SWING_KD == 5.0


def test_convert_actions_swing_at_target_zero_torque(model):
    q = nominal_q(model)
    _, _, feet = forward_kinematics(model, q)
    tau = convert_actions(model, q, np.zeros(18), np.zeros((4, 3)), feet,
                          swing_flags=np.ones(4, dtype=bool))
    np.testing.assert_allclose(tau, np.zeros(12), atol=1e-12)


def test_convert_actions_stance_virtual_work(model):
    """tau = J^T f must match the virtual-work quotient f . dr/dq."""
    rng = np.random.default_rng(8)
    q = random_q(model, rng)
    f = np.array([3.0, -2.0, -0.25 * model.total_mass * 9.81])
    grf = np.tile(f, (4, 1))
    tau = convert_actions(model, q, np.zeros(18), grf, np.zeros((4, 3)),
                          swing_flags=np.zeros(4, dtype=bool),
                          contacts=np.ones(4, dtype=bool))
    h = 1e-7
    for leg in range(4):
        for j in range(3):
            dof = 12 + 3 * leg + j
            qp, qm = q.copy(), q.copy()
            qp[dof] += h
            qm[dof] -= h
            _, _, fp = forward_kinematics(model, qp)
            _, _, fm = forward_kinematics(model, qm)
            expected = f @ (fp[leg] - fm[leg]) / (2 * h)
            assert tau[3 * leg + j] == pytest.approx(expected, abs=1e-4)


def test_convert_actions_stance_without_contact_zero(model):
    q = nominal_q(model)
    grf = np.full((4, 3), 30.0)
    tau = convert_actions(model, q, np.zeros(18), grf, np.zeros((4, 3)),
                          swing_flags=np.zeros(4, dtype=bool),
                          contacts=np.zeros(4, dtype=bool))
    np.testing.assert_array_equal(tau, np.zeros(12))


def test_convert_actions_respects_torque_limit(model):
    q = nominal_q(model)
    grf = np.full((4, 3), 5000.0)
    tau = convert_actions(model, q, np.zeros(18), grf, np.zeros((4, 3)),
                          swing_flags=np.zeros(4, dtype=bool),
                          contacts=np.ones(4, dtype=bool))
    assert np.abs(tau).max() <= model.torque_limit + 1e-12


# -- full-body stepping -------------------------------------------------------------------


def test_step_zero_gravity_zero_torque_unchanged(model):
    weightless = replace(model, gravity=np.zeros(3))
    q = nominal_q(model)
    q[2] = 1.0          # no contact
    qd = np.zeros(18)
    q1, qd1, fault, _ = fullbody_step(weightless, q, qd, np.zeros(12),
                                      ContactParams(), 1e-3, n_substeps=100)
    assert fault == 0
    np.testing.assert_allclose(q1, q, atol=1e-12)
    np.testing.assert_allclose(qd1, qd, atol=1e-12)


def test_drop_settles_to_weight(model):
    cp = ContactParams()
    q = nominal_q(model)
    q[2] = 0.5
    qd = np.zeros(18)
    qn = model.nominal_joints
    dt = 5e-4
    for _ in range(2000):
        tau = np.clip(150.0 * (qn - q[12:]) - 4.0 * qd[6:],
                      -model.torque_limit, model.torque_limit)
        q, qd, fault, contacts = fullbody_step(model, q, qd, tau, cp, dt)
        assert fault == 0
    _, _, feet = forward_kinematics(model, q)
    pen = np.maximum(0.0, model.foot_radius - feet[:, 2])
    normal_sum = np.sum(cp.k_n * pen)
    weight = model.total_mass * 9.81
    assert abs(normal_sum - weight) / weight < 0.02
    assert contacts.all()


def test_ballistic_flight_conserves_momentum(model):
    q = nominal_q(model)
    q[2] = 5.0
    qd = np.zeros(18)
    qd[0:3] = [0.3, 0.1, 1.0]
    qd[3:6] = [0.5, 1.0, 0.3]
    qd[6:] = np.linspace(-1.0, 1.0, 12)
    L0 = angular_momentum_about_com(model, q, qd)
    q, qd, fault, _ = fullbody_step(model, q, qd, np.zeros(12), ContactParams(),
                                    5e-4, n_substeps=2000)
    assert fault == 0
    L1 = angular_momentum_about_com(model, q, qd)
    assert np.linalg.norm(L1 - L0) / np.linalg.norm(L0) < 1e-3


def test_energy_audit_torque_free(model):
    q = nominal_q(model)
    q[2] = 5.0
    qd = np.zeros(18)
    qd[0:3] = [0.5, 0.2, 2.0]
    qd[3:6] = [1.0, 2.0, 0.5]
    qd[6:] = np.linspace(-2.0, 2.0, 12)
    E0 = mechanical_energy(model, q, qd)
    q, qd, fault, _ = fullbody_step(model, q, qd, np.zeros(12), ContactParams(),
                                    5e-4, n_substeps=2000)
    assert fault == 0
    E1 = mechanical_energy(model, q, qd)
    assert abs(E1 - E0) / abs(E0) < 1e-3


def test_trunk_collision_faults(model):
    q = nominal_q(model)
    q[2] = 0.5
    qd = np.zeros(18)
    fault = 0
    for _ in range(3000):
        # No torque: the legs give way and the trunk must hit the ground.
        q, qd, fault, _ = fullbody_step(model, q, qd, np.zeros(12),
                                        ContactParams(), 1e-3)
        if fault:
            break
    assert fault == 2


def test_loader_validates(tmp_path):
    import yaml

    with open(builtin_model_path()) as fh:
        data = yaml.safe_load(fh)
    data["links"][3]["mass"] = -1.0
    bad = tmp_path / "bad.yaml"
    with open(bad, "w") as fh:
        yaml.safe_dump(data, fh)
    from homotopy_gym.rigid_body import ModelError

    with pytest.raises(ModelError, match="mass"):
        load_model(bad)


def test_loader_reports_composite(model):
    from homotopy_gym.rigid_body import nominal_composite

    m, I, com = nominal_composite(model)
    assert m == pytest.approx(12.0)
    assert np.min(np.linalg.eigvalsh(I)) > 0.0
    assert com[2] < 0.0          # legs hang below the trunk origin
