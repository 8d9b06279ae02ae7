import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpulse import neural as nn

from oracles import jitter_biases, numeric_gradient, rel_err


def test_init_shapes_and_determinism():
    a = nn.init_network((8, 32, 64, 32, 27), seed=7)
    b = nn.init_network((8, 32, 64, 32, 27), seed=7)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert all(not bias.any() for bias in a.biases)
    big = nn.init_network((11, 44, 88, 176, 88, 44, 27), seed=0)
    assert len(big.weights) == 6
    assert big.weights[0].shape == (11, 44)
    bound = math.sqrt(6 / 11)
    assert np.abs(big.weights[0]).max() <= bound


@pytest.mark.parametrize("sizes", [(8, 0, 27), (8, 27)])
def test_init_rejects_bad_layouts(sizes):
    with pytest.raises(ValueError):
        nn.init_network(sizes, 0)


def test_forward_zero_weights_and_width_check():
    p = nn.init_network((4, 3, 5), 0)
    for W in p.weights:
        W[:] = 0
    np.testing.assert_array_equal(nn.forward(p, np.ones(4)), np.zeros(5))
    with pytest.raises(ValueError):
        nn.forward(p, np.ones(3))


def test_relu_clamps_negative_preactivation():
    # one hidden unit: h = relu(x - 2), out = 3 h + 1
    p = nn.MlpParameters((1, 1, 1), [np.array([[1.0]]), np.array([[3.0]])],
                         [np.array([-2.0]), np.array([1.0])])
    assert nn.forward(p, [1.0])[0] == pytest.approx(1.0)
    assert nn.forward(p, [5.0])[0] == pytest.approx(10.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_log_softmax_normalised(seed):
    rng = np.random.default_rng(seed)
    p = nn.init_network((11, 8, 27), seed, head="logsoftmax")
    out = nn.forward(p, rng.normal(scale=5, size=(6, 11)))
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)


def test_dqn_loss_examples():
    p = nn.init_network((3, 4, 5), 1)
    x = np.array([[0.2, -0.1, 0.5]])
    q = nn.forward(p, x)[0]
    loss, grads = nn.dqn_loss_and_gradient(p, x, [2], [q[2]])
    assert loss == pytest.approx(0.0, abs=1e-20)
    assert all(np.allclose(g, 0) for g in grads)
    loss, _ = nn.dqn_loss_and_gradient(p, x, [2], [q[2] + 0.7])
    assert loss == pytest.approx(0.49)


def test_nll_loss_examples():
    p = nn.init_network((3, 4, 27), 1, head="logsoftmax")
    for W in p.weights:
        W[:] = 0
    loss, _ = nn.nll_loss_and_gradient(p, np.ones((5, 3)), [0, 1, 2, 3, 26])
    assert loss == pytest.approx(math.log(27), abs=1e-12)
    assert loss == pytest.approx(3.2958, abs=1e-4)
    p.biases[-1][4] = 60.0
    loss, _ = nn.nll_loss_and_gradient(p, np.ones((2, 3)), [4, 4])
    assert loss < 1e-20
    with pytest.raises(ValueError):
        nn.nll_loss_and_gradient(nn.init_network((3, 4, 5), 0), np.ones((1, 3)), [0])


@pytest.mark.parametrize("trial", range(20))
def test_gradients_against_finite_differences(trial):
    rng = np.random.default_rng(100 + trial)
    X = rng.normal(size=(7, 11))
    q = jitter_biases(nn.init_network((11, 8, 8, 27), trial), rng)
    a = rng.integers(27, size=7)
    y = rng.normal(size=7)
    _, g = nn.dqn_loss_and_gradient(q, X, a, y)
    num = numeric_gradient(lambda: nn.dqn_loss_and_gradient(q, X, a, y)[0], q)
    assert max(rel_err(x, z) for x, z in zip(g, num)) < 1e-4

    c = jitter_biases(nn.init_network((11, 8, 8, 27), trial, head="logsoftmax"), rng)
    labels = rng.integers(27, size=7)
    _, g = nn.nll_loss_and_gradient(c, X, labels)
    num = numeric_gradient(lambda: nn.nll_loss_and_gradient(c, X, labels)[0], c)
    assert max(rel_err(x, z) for x, z in zip(g, num)) < 1e-4


def test_sgd_step_examples():
    p = nn.init_network((2, 3, 2), 0)
    before = [a.copy() for a in p.arrays()]
    nn.sgd_step(p, [np.zeros_like(a) for a in p.arrays()], 0.1)
    nn.sgd_step(p, [np.ones_like(a) for a in p.arrays()], 0.0)
    for a, b in zip(p.arrays(), before):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(FloatingPointError):
        nn.sgd_step(p, [np.full_like(a, np.nan) for a in p.arrays()], 0.1)


def test_sgd_descends_quadratic():
    # single linear output through a ReLU unit kept active: loss (y - w2 * w1 x)^2
    p = nn.MlpParameters((1, 1, 1), [np.array([[1.0]]), np.array([[1.0]])],
                         [np.zeros(1), np.zeros(1)])
    x, y = np.array([[1.0]]), np.array([3.0])
    l0, g = nn.dqn_loss_and_gradient(p, x, [0], y)
    nn.sgd_step(p, g, 0.05)
    l1, _ = nn.dqn_loss_and_gradient(p, x, [0], y)
    assert l0 == pytest.approx(4.0) and l1 < l0


def test_adam_step_descends_and_is_deterministic():
    def run():
        p = nn.init_network((3, 6, 4), 5)
        opt = nn.Optimizer("adam", 0.01)
        rng = np.random.default_rng(0)
        X, a, y = rng.normal(size=(16, 3)), rng.integers(4, size=16), rng.normal(size=16)
        losses = []
        for _ in range(50):
            loss, g = nn.dqn_loss_and_gradient(p, X, a, y)
            opt.step(p, g)
            losses.append(loss)
        return p, losses
    p1, l1 = run()
    p2, _ = run()
    assert l1[-1] < l1[0]
    for x, z in zip(p1.arrays(), p2.arrays()):
        np.testing.assert_array_equal(x, z)
    with pytest.raises(ValueError):
        nn.Optimizer("rmsprop", 0.1)


def test_copy_parameters_isolation():
    src = nn.init_network((4, 5, 3), 1)
    dst = nn.init_network((4, 5, 3), 2)
    nn.copy_parameters(src, dst)
    for a, b in zip(src.arrays(), dst.arrays()):
        np.testing.assert_array_equal(a, b)
    nn.sgd_step(src, [np.ones_like(a) for a in src.arrays()], 0.1)
    assert not np.array_equal(src.weights[0], dst.weights[0])
    with pytest.raises(ValueError):
        nn.copy_parameters(src, nn.init_network((4, 6, 3), 1))


def test_checkpoint_round_trip(tmp_path):
    p = nn.init_network((11, 7, 27), 3, head="logsoftmax")
    path = tmp_path / "ck.json"
    nn.save_checkpoint(path, p, 3, {"seed": 3, "epoch": 12})
    q, case, meta = nn.load_checkpoint(path)
    probe = np.linspace(-1, 1, 11)
    assert nn.forward(q, probe).tobytes() == nn.forward(p, probe).tobytes()
    assert case == 3 and meta == {"seed": 3, "epoch": 12} and q.head == "logsoftmax"
    doc = json.loads(path.read_text())
    assert set(doc) >= {"schema_version", "head", "case", "layer_sizes", "weights", "biases", "metadata"}


def test_checkpoint_errors(tmp_path):
    p = nn.init_network((3, 4, 5), 0)
    path = tmp_path / "ck.json"
    nn.save_checkpoint(path, p, 2)
    doc = json.loads(path.read_text())
    doc["schema_version"] = 2
    (tmp_path / "v2.json").write_text(json.dumps(doc))
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(tmp_path / "v2.json")
    (tmp_path / "cut.json").write_text(path.read_text()[:40])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(tmp_path / "cut.json")


def test_parameter_shape_validation():
    with pytest.raises(ValueError):
        nn.MlpParameters((2, 3), [np.zeros((3, 2))], [np.zeros(3)])
    with pytest.raises(ValueError):
        nn.MlpParameters((2, 3), [np.zeros((2, 3))], [np.zeros(3)], head="softmax")


def test_adam_matches_reference_formula_bitwise():
    rng = np.random.default_rng(2)
    p = nn.init_network((3, 5, 4), 0)
    ref = [a.copy() for a in p.arrays()]
    m = [np.zeros_like(a) for a in ref]
    v = [np.zeros_like(a) for a in ref]
    opt = nn.Adam(0.01)
    for t in range(1, 6):
        grads = [rng.normal(size=a.shape) for a in ref]
        opt.step(p, grads)
        for r, g, mm, vv in zip(ref, grads, m, v):
            mm[:] = 0.9 * mm + (1 - 0.9) * g
            vv[:] = 0.999 * vv + (1 - 0.999) * g * g
            r -= 0.01 * (mm / (1 - 0.9 ** t)) / (np.sqrt(vv / (1 - 0.999 ** t)) + 1e-8)
    for a, r in zip(p.arrays(), ref):
        np.testing.assert_array_equal(a, r)


def test_adam_flushes_vanishing_moments():
    p = nn.init_network((2, 3, 2), 0)
    opt = nn.Adam(0.01)
    zeros = [np.zeros_like(a) for a in p.arrays()]
    opt.step(p, [np.ones_like(a) for a in p.arrays()])
    for m, v in zip(opt.m, opt.v):
        m[:] = 1e-300
        v[:] = 1e-300
    before = [a.copy() for a in p.arrays()]
    opt.step(p, zeros)
    assert all(not m.any() and not v.any() for m, v in zip(opt.m, opt.v))
    for a, b in zip(p.arrays(), before):
        np.testing.assert_array_equal(a, b)
