import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddq import nncore
from ddq.errors import ConfigError, UsageError
from ddq.nncore import LayerSpec, ModelParams, backward, conv_forward, fc_forward, forward, relu

from naive import conv_loops, finite_difference_check, forward_loops


def test_relu_examples():
    assert relu(np.array([3.0]))[0] == 3.0
    assert relu(np.array([-2.0]))[0] == 0.0
    assert relu(np.array([0.0]))[0] == 0.0
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert relu(x).shape == x.shape


def test_conv_zero_input_leaves_bias():
    out = conv_forward(np.zeros((2, 5, 5)), np.ones((1, 2, 3, 3)), np.array([0.5]), 1)
    assert out.shape == (1, 3, 3)
    assert np.all(out == 0.5)


def test_conv_degenerate_scalar():
    out = conv_forward(np.array([[[1.5]]]), np.array([[[[-2.0]]]]), np.array([0.25]), 1)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 1.5 * -2.0 + 0.25


def test_conv_window_dot_products():
    x = np.arange(9.0).reshape(1, 3, 3)
    w = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = conv_forward(x, w, np.zeros(1), 1)
    # frozen from the sliding-window loop oracle
    np.testing.assert_array_equal(out, [[[27.0, 37.0], [57.0, 67.0]]])
    np.testing.assert_array_equal(out, conv_loops(x, w, np.zeros(1), 1))


@pytest.mark.parametrize("stride,k,size", [(1, 3, 7), (2, 3, 7), (2, 4, 10), (3, 2, 8)])
def test_conv_matches_loops(stride, k, size):
    rng = np.random.default_rng(stride * 100 + k)
    x = rng.normal(size=(3, size, size))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    np.testing.assert_allclose(conv_forward(x, w, b, stride), conv_loops(x, w, b, stride), rtol=1e-12, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ConfigError):
        conv_forward(np.zeros((2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1), 1)
    with pytest.raises(ConfigError):
        conv_forward(np.zeros((1, 6, 6)), np.zeros((1, 1, 3, 3)), np.zeros(1), 2)


def test_fc_examples():
    x = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(fc_forward(x, np.eye(3), np.zeros(3)), x)
    b = np.array([1.0, 2.0])
    np.testing.assert_array_equal(fc_forward(np.zeros(3), np.ones((2, 3)), b), b)
    np.testing.assert_array_equal(fc_forward(np.ones(2), np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2)), [3.0, 7.0])
    with pytest.raises(ConfigError):
        fc_forward(np.ones(3), np.ones((2, 2)), np.zeros(2))


SMALL = [LayerSpec.conv(3, 3, 1), LayerSpec.relu(), LayerSpec.conv(2, 2, 2), LayerSpec.relu(),
         LayerSpec.fc(5), LayerSpec.relu(), LayerSpec.fc(4)]


def _small_model():
    model = nncore.init_model(SMALL, (2, 6, 6), np.random.default_rng(42), 0.5)
    for _, b in model.layers:
        b[...] = np.random.default_rng(7).normal(0, 0.1, b.shape)
    state = np.random.default_rng(3).random((2, 6, 6))
    return model, state


def test_forward_zero_model():
    specs = nncore.default_architecture(4)
    shapes, _ = nncore.layer_shapes(specs, (4, 32, 32))
    q = forward(ModelParams(shapes), specs, np.random.default_rng(0).random((4, 32, 32)))
    np.testing.assert_array_equal(q, np.zeros(4))


def test_forward_output_per_action():
    specs = nncore.default_architecture(4)
    model = nncore.init_model(specs, (4, 32, 32), np.random.default_rng(1))
    assert forward(model, specs, np.zeros((4, 32, 32))).shape == (4,)


def test_forward_regression_value():
    model, state = _small_model()
    # recorded from naive.forward_loops on this seeded model/state
    expected = [-0.0033537842594518717, 0.04243244211080946, -0.041293656543900596, -0.11104269312667654]
    np.testing.assert_allclose(forward(model, SMALL, state), expected, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(forward_loops(model.layers, SMALL, state), expected, rtol=1e-12, atol=1e-15)


def test_batched_forward_matches_single():
    model, _ = _small_model()
    states = np.random.default_rng(5).random((6, 2, 6, 6))
    batch = nncore.q_values(model, SMALL, states)
    for i in range(6):
        np.testing.assert_allclose(batch[i], forward(model, SMALL, states[i]), rtol=1e-13, atol=1e-15)


def test_backward_zero_residual():
    model, _ = _small_model()
    states = np.random.default_rng(9).random((5, 2, 6, 6))
    actions = np.array([0, 1, 2, 3, 1])
    targets = nncore.q_values(model, SMALL, states)[np.arange(5), actions]
    loss, grad = backward(model, SMALL, states, actions, targets)
    assert loss == 0.0
    assert not grad.flat.any()


def test_backward_linear_by_hand():
    specs = [LayerSpec.fc(1)]
    model = ModelParams([((1, 2), (1,))], np.array([0.5, -1.0, 0.0]))
    x = np.array([2.0, 3.0])
    loss, grad = backward(model, specs, x.reshape(1, 1, 1, 2), [0], [1.0])
    # Q = 0.5*2 - 3 = -2, residual -3
    assert loss == pytest.approx(4.5)
    np.testing.assert_allclose(grad.layers[0][0], [[-6.0, -9.0]])
    np.testing.assert_allclose(grad.layers[0][1], [-3.0])


def test_backward_only_taken_action_gets_error():
    specs = [LayerSpec.fc(3)]
    model = nncore.init_model(specs, (1, 1, 4), np.random.default_rng(0), 1.0)
    _, grad = backward(model, specs, np.ones((1, 1, 1, 4)), [1], [10.0])
    gw, gb = grad.layers[0]
    assert not gw[[0, 2]].any() and not gb[[0, 2]].any()
    assert gw[1].all() and gb[1] != 0


def test_backward_empty_minibatch():
    model, _ = _small_model()
    with pytest.raises(UsageError):
        backward(model, SMALL, np.zeros((0, 2, 6, 6)), [], [])


def test_gradient_matches_finite_differences():
    model, _ = _small_model()
    rng = np.random.default_rng(11)
    states = rng.random((3, 2, 6, 6))
    actions = np.array([0, 3, 2])
    targets = rng.normal(size=3)
    _, grad = backward(model, SMALL, states, actions, targets)
    worst, skipped = finite_difference_check(model, SMALL, states, actions, targets, grad.flat)
    assert worst < 1e-4
    assert skipped < grad.size // 10


def test_determinism():
    model, _ = _small_model()
    states = np.random.default_rng(4).random((4, 2, 6, 6))
    a = backward(model, SMALL, states, [0, 1, 2, 3], np.ones(4))
    b = backward(model, SMALL, states, [0, 1, 2, 3], np.ones(4))
    assert a[0] == b[0]
    assert a[1].flat.tobytes() == b[1].flat.tobytes()


def test_param_count():
    assert nncore.param_count([LayerSpec.fc(7)], 1, 5) == 7 * 5 + 7
    assert nncore.param_count([], 32, 4) == 0
    specs = nncore.default_architecture(4)
    # conv 16x4x4x4+16, conv 32x16x3x3+32, fc 128x(32*13*13)+128, fc 4x128+4
    by_hand = (16 * 4 * 16 + 16) + (32 * 16 * 9 + 32) + (128 * 32 * 13 * 13 + 128) + (4 * 128 + 4)
    model = nncore.init_model(specs, (4, 32, 32), np.random.default_rng(0))
    assert nncore.param_count(specs, 32, 4) == by_hand == sum(t.size for t in model.tensors())


def test_layer_spec_validation():
    with pytest.raises(ConfigError):
        nncore.layer_shapes([LayerSpec.conv(0, 3, 1)], (1, 5, 5))
    with pytest.raises(ConfigError):
        nncore.layer_shapes([LayerSpec.conv(2, 6, 1)], (1, 5, 5))
    with pytest.raises(ConfigError):
        nncore.layer_shapes([LayerSpec.fc(0)], (1, 5, 5))


def test_init_distribution():
    specs = nncore.default_architecture(4)
    model = nncore.init_model(specs, (4, 32, 32), np.random.default_rng(0), std=0.01)
    weights = np.concatenate([w.ravel() for w, _ in model.layers])
    assert abs(weights.mean()) < 1e-4
    assert weights.std() == pytest.approx(0.01, rel=0.01)
    assert all(not b.any() for _, b in model.layers)
    assert model.generation == 0


def test_checkpoint_roundtrip(tmp_path):
    model, _ = _small_model()
    model.generation = 17
    path = tmp_path / "m.ddq"
    nncore.save_checkpoint(path, model)
    raw = path.read_bytes()
    assert raw[:4] == b"DDQ1"
    assert int.from_bytes(raw[-8:], "little") == 17
    # first tensor: rank 4, dims 3,2,3,3
    assert raw[4:24] == (4).to_bytes(4, "little") + b"".join(d.to_bytes(4, "little") for d in (3, 2, 3, 3))
    back = nncore.load_checkpoint(path)
    assert back.generation == 17
    assert back.shapes == model.shapes
    assert back.flat.tobytes() == model.flat.tobytes()


def test_copy_is_deep():
    model, _ = _small_model()
    c = model.copy()
    model.flat += 1.0
    assert not np.array_equal(c.flat, model.flat)


@st.composite
def spec_chains(draw):
    d = draw(st.integers(4, 9))
    c = draw(st.integers(1, 3))
    specs, size = [], d
    for _ in range(draw(st.integers(0, 2))):
        k = draw(st.integers(1, min(3, size)))
        stride = draw(st.sampled_from([s for s in (1, 2) if (size - k) % s == 0]))
        specs += [LayerSpec.conv(draw(st.integers(1, 3)), k, stride), LayerSpec.relu()]
        size = (size - k) // stride + 1
    for _ in range(draw(st.integers(0, 2))):
        specs += [LayerSpec.fc(draw(st.integers(1, 6))), LayerSpec.relu()]
    specs.append(LayerSpec.fc(draw(st.integers(1, 4))))
    return specs, (c, d, d)


@settings(max_examples=40, deadline=None)
@given(spec_chains(), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_grad_shape_congruent(chain, batch, seed):
    specs, shape = chain
    rng = np.random.default_rng(seed)
    model = nncore.init_model(specs, shape, rng, 0.3)
    n_out = specs[-1].size
    loss, grad = backward(model, specs, rng.random((batch,) + shape), rng.integers(0, n_out, batch),
                          rng.normal(size=batch))
    assert [(w.shape, b.shape) for w, b in grad.layers] == [(w.shape, b.shape) for w, b in model.layers]
    assert np.isfinite(loss) and np.isfinite(grad.flat).all()
    assert grad.size == nncore.param_count(specs, shape[1], shape[0])


def test_param_breakdown():
    specs = nncore.default_architecture(4)
    parts = nncore.param_breakdown(specs, 32, 4)
    assert parts == {"conv": 16 * 4 * 16 + 16 + 32 * 16 * 9 + 32, "bridge": 128 * 32 * 13 * 13 + 128,
                     "fc": 4 * 128 + 4}
    assert sum(parts.values()) == nncore.param_count(specs, 32, 4)
