import numpy as np
import pytest

from homotopy_gym import nets


def test_identity_single_layer_passthrough():
    p = nets.MlpParams(weights=[np.eye(5)], biases=[np.zeros(5)], activations=["linear"])
    x = np.random.default_rng(0).standard_normal((3, 5))
    y, _ = nets.mlp_forward(p, x)
    np.testing.assert_array_equal(y, x)


def test_zero_weights_bias_through_activation():
    b = np.array([-1.0, 0.5, 2.0])
    p = nets.MlpParams(weights=[np.zeros((4, 3))], biases=[b], activations=["elu"])
    y, _ = nets.mlp_forward(p, np.ones((2, 4)))
    expected = np.where(b > 0, b, np.expm1(b))
    np.testing.assert_allclose(y, np.tile(expected, (2, 1)), atol=1e-15)


def test_dimension_mismatch_raises():
    rng = np.random.default_rng(1)
    p = nets.mlp_init(rng, [4, 8, 2])
    with pytest.raises(ValueError, match="dimension"):
        nets.mlp_forward(p, np.zeros((3, 5)))


def test_gradients_match_central_differences():
    """Every layer of random small float64 nets: < 1e-4 relative error."""
    rng = np.random.default_rng(2)
    for sizes in ([5, 8, 3], [4, 16, 16, 2], [7, 6, 6, 6, 1]):
        p = nets.mlp_init(rng, sizes, dtype=np.float64)
        x = rng.standard_normal((12, sizes[0]))
        t = rng.standard_normal((12, sizes[-1]))

        def loss():
            y, _ = nets.mlp_forward(p, x)
            return float((y * t).sum())

        y, cache = nets.mlp_forward(p, x)
        _, grads = nets.mlp_backward(p, cache, t)
        h = 1e-5
        arrays = list(p.flat_arrays())
        for arr, g in zip(arrays, grads):
            flat = arr.reshape(-1)
            gf = np.asarray(g).reshape(-1)
            for idx in rng.choice(len(flat), size=min(5, len(flat)), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                lp = loss()
                flat[idx] = orig - h
                lm = loss()
                flat[idx] = orig
                fd = (lp - lm) / (2 * h)
                assert abs(gf[idx] - fd) / max(abs(fd), abs(gf[idx]), 1e-6) < 1e-4


def test_backward_input_gradient():
    rng = np.random.default_rng(3)
    p = nets.mlp_init(rng, [6, 10, 4], dtype=np.float64)
    x = rng.standard_normal((1, 6))
    t = rng.standard_normal((1, 4))
    y, cache = nets.mlp_forward(p, x)
    d_in, _ = nets.mlp_backward(p, cache, t)
    h = 1e-6
    for k in range(6):
        xp, xm = x.copy(), x.copy()
        xp[0, k] += h
        xm[0, k] -= h
        lp = float((nets.mlp_forward(p, xp)[0] * t).sum())
        lm = float((nets.mlp_forward(p, xm)[0] * t).sum())
        assert d_in[0, k] == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-9)


def test_orthogonal_init_properties():
    rng = np.random.default_rng(4)
    w = nets.orthogonal(rng, (32, 8), gain=1.0)
    np.testing.assert_allclose(w.T @ w, np.eye(8), atol=1e-12)
    w2 = nets.orthogonal(rng, (8, 32), gain=2.0)
    np.testing.assert_allclose(w2 @ w2.T, 4.0 * np.eye(8), atol=1e-12)


# -- policy --------------------------------------------------------------------


def test_policy_sample_zero_std_limit():
    rng = np.random.default_rng(5)
    policy = nets.policy_init(rng, obs_dim=6, action_dim=3, hidden=(8,),
                              dtype=np.float64, log_std0=-40.0)
    obs = rng.standard_normal((4, 6))
    mean = nets.policy_mean(policy, obs)
    act, _ = nets.policy_sample(policy, obs, np.random.default_rng(0))
    np.testing.assert_allclose(act, mean, atol=1e-12)


def test_log_prob_at_mean():
    rng = np.random.default_rng(6)
    policy = nets.policy_init(rng, obs_dim=5, action_dim=4, hidden=(8,),
                              dtype=np.float64, log_std0=np.log(0.7))
    obs = rng.standard_normal((2, 5))
    mean = nets.policy_mean(policy, obs)
    lp = nets.gaussian_log_prob(mean, policy.log_std, mean)
    expected = -policy.log_std.sum() - 0.5 * 4 * np.log(2 * np.pi)
    np.testing.assert_allclose(lp, expected, atol=1e-12)


def test_policy_sample_monte_carlo_mean():
    rng = np.random.default_rng(7)
    policy = nets.policy_init(rng, obs_dim=3, action_dim=2, hidden=(8,),
                              dtype=np.float64, log_std0=np.log(0.5))
    obs = np.tile(rng.standard_normal(3), (100_000, 1))
    mean = nets.policy_mean(policy, obs[:1])[0]
    acts, _ = nets.policy_sample(policy, obs, np.random.default_rng(8))
    emp = acts.mean(axis=0)
    bound = 3 * 0.5 / np.sqrt(len(obs))
    assert np.all(np.abs(emp - mean) < bound + 1e-12)


def test_log_prob_integrates_to_one_1d():
    rng = np.random.default_rng(9)
    policy = nets.policy_init(rng, obs_dim=2, action_dim=1, hidden=(6,),
                              dtype=np.float64, log_std0=np.log(0.8))
    obs = np.zeros((1, 2))
    mean = float(nets.policy_mean(policy, obs)[0, 0])
    grid = np.linspace(mean - 8.0, mean + 8.0, 4001)[:, None]
    lp = nets.gaussian_log_prob(np.full((4001, 1), mean), policy.log_std, grid)
    integral = np.trapezoid(np.exp(lp), grid[:, 0])
    assert abs(integral - 1.0) < 0.02


def test_policy_entropy_formula():
    rng = np.random.default_rng(10)
    policy = nets.policy_init(rng, obs_dim=3, action_dim=5, hidden=(4,),
                              log_std0=np.log(0.8))
    expected = 5 * (np.log(0.8) + 0.5 * (1 + np.log(2 * np.pi)))
    assert nets.policy_entropy(policy) == pytest.approx(expected, rel=1e-6)


# -- estimator ------------------------------------------------------------------


def test_estimator_contact_threshold():
    assert nets.contact_from_probability(np.array([0.51]))[0]
    assert not nets.contact_from_probability(np.array([0.49]))[0]
    assert not nets.contact_from_probability(np.array([0.5]))[0]


def test_estimator_probabilities_in_unit_interval():
    rng = np.random.default_rng(11)
    est = nets.estimator_init(rng, dtype=np.float64)
    hist = rng.standard_normal((16, nets.HISTORY_LEN * nets.FRAME_DIM)) * 10
    extra = rng.standard_normal((16, nets.ESTIMATOR_EXTRA)) * 10
    _, c_prob, _ = nets.estimator_forward(est, hist, extra)
    assert np.all(c_prob > 0.0) and np.all(c_prob < 1.0)


def test_estimator_loss_values():
    v = np.array([[0.3, -0.2, 1.0]])
    c = np.array([[1.0, 0.0, 1.0, 0.0]])
    assert nets.estimator_loss(v, v, c, c) == 0.0
    v_hat = v + np.array([[1.0, 0.0, 0.0]])
    assert nets.estimator_loss(v_hat, v, c, c) == pytest.approx(1.0)


def test_estimator_loss_random_hand_computed():
    rng = np.random.default_rng(12)
    v_hat, v = rng.standard_normal((2, 3, 3))
    c_prob = rng.uniform(0, 1, (3, 4))
    c = rng.integers(0, 2, (3, 4)).astype(float)
    expected = np.mean(((v_hat - v) ** 2).sum(1) + ((c_prob - c) ** 2).sum(1))
    assert nets.estimator_loss(v_hat, v, c_prob, c) == pytest.approx(expected, rel=1e-12)


def test_estimator_gradient_matches_fd():
    rng = np.random.default_rng(13)
    est = nets.mlp_init(rng, [10, 8, 8, 7], dtype=np.float64)
    hist = rng.standard_normal((6, 4))
    extra = rng.standard_normal((6, 6))
    v_lab = rng.standard_normal((6, 3))
    c_lab = rng.integers(0, 2, (6, 4)).astype(float)

    def loss():
        v_hat, c_prob, _ = nets.estimator_forward(est, hist, extra)
        return nets.estimator_loss(v_hat, v_lab, c_prob, c_lab)

    v_hat, c_prob, cache = nets.estimator_forward(est, hist, extra)
    grads = nets.estimator_loss_grad(est, cache, v_hat, v_lab, c_prob, c_lab)
    h = 1e-6
    w = est.weights[1]
    g = grads[2]
    for idx in [(0, 0), (3, 5), (7, 2)]:
        orig = w[idx]
        w[idx] = orig + h
        lp = loss()
        w[idx] = orig - h
        lm = loss()
        w[idx] = orig
        fd = (lp - lm) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-10)


# -- observations and history ------------------------------------------------------


def test_observation_dimension_and_layout():
    n = 3
    obs = nets.build_observation(
        gravity_b=np.tile([0, 0, -1.0], (n, 1)), v_b=np.full((n, 3), 0.5),
        w_b=np.zeros((n, 3)), feet_b=np.ones((n, 4, 3)),
        contacts=np.array([[1, 0, 1, 0]] * n), phase=np.full(n, 0.25))
    assert obs.shape == (n, 27)
    np.testing.assert_allclose(obs[0, 0:3], [0, 0, -1])
    np.testing.assert_allclose(obs[0, 3:6], 0.5)
    np.testing.assert_allclose(obs[0, 21:25], [1, 0, 1, 0])
    assert obs[0, 25] == pytest.approx(np.sin(np.pi / 2))
    assert obs[0, 26] == pytest.approx(np.cos(np.pi / 2), abs=1e-12)


def test_strip_privileged_removes_velocity_and_contacts():
    obs = np.arange(27.0)[None]
    out = nets.strip_privileged(obs)
    assert out.shape == (1, 20)
    assert 3.0 not in out and 22.0 not in out
    assert out[0, 0] == 0.0 and out[0, -1] == 26.0


def test_history_buffer_order_and_reset():
    buf = nets.HistoryBuffer(2, length=3, frame_dim=2)
    np.testing.assert_array_equal(buf.flat(), np.zeros((2, 6)))
    for k in range(1, 4):
        buf.push(np.full((2, 2), float(k)))
    np.testing.assert_array_equal(buf.flat()[0], [1, 1, 2, 2, 3, 3])
    buf.push(np.full((2, 2), 4.0))
    np.testing.assert_array_equal(buf.flat()[0], [2, 2, 3, 3, 4, 4])
    buf.reset(np.array([True, False]))
    np.testing.assert_array_equal(buf.flat()[0], np.zeros(6))
    np.testing.assert_array_equal(buf.flat()[1], [2, 2, 3, 3, 4, 4])


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_bit_exact_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    payload = {
        "f64": rng.standard_normal((5, 7)),
        "f32": rng.standard_normal((3, 2)).astype(np.float32),
        "ints": np.arange(6, dtype=np.int64),
        "nested": {"list": [rng.standard_normal(4), "text", 7, 2.5, None, True]},
    }
    path = tmp_path / "ck.bin"
    nets.save_checkpoint(path, payload)
    back = nets.load_checkpoint(path)
    for key in ("f64", "f32", "ints"):
        assert back[key].dtype == payload[key].dtype
        np.testing.assert_array_equal(back[key], payload[key])
    np.testing.assert_array_equal(back["nested"]["list"][0], payload["nested"]["list"][0])
    assert back["nested"]["list"][1:] == ["text", 7, 2.5, None, True]


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(ValueError, match="not a checkpoint"):
        nets.load_checkpoint(path)


def test_mlp_payload_roundtrip():
    rng = np.random.default_rng(15)
    p = nets.mlp_init(rng, [4, 6, 2])
    back = nets.mlp_from_payload(nets.mlp_to_payload(p))
    for a, b in zip(back.flat_arrays(), p.flat_arrays()):
        np.testing.assert_array_equal(a, b)
    assert back.activations == p.activations
