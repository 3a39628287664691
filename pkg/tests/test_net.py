import numpy as np
import pytest

from _fd import away_from_zero, central_fd, graph_fd_errors, rel_err
from lid_align.net import (ACTIVATIONS, ConstantCritic, Graph, GraphError, LinearCritic, MLPCritic,
                           backward, build_generator, clip_by_global_norm, forward, generator_input,
                           gradient_penalty, load_checkpoint, penalty_param_grads_fd, save_checkpoint,
                           sgd_step)


def single_op_graph(op, rng):
    """A float64 graph exercising one op, plus its input batch."""
    g = Graph(seed=int(rng.integers(1 << 30)), dtype=np.float64)
    if op == "affine":
        x = g.input("x", (4,))
        g.output("out", g.affine(x, 3, name="fc"))
        return g, {"x": rng.normal(size=(2, 4))}
    if op.startswith("conv2d"):
        stride = 2 if op.endswith("s2") else 1
        x = g.input("x", (5, 6, 2))
        g.output("out", g.conv2d(x, 3, stride=stride, name="conv"))
        return g, {"x": rng.normal(size=(2, 5, 6, 2))}
    if op == "upsample":
        x = g.input("x", (2, 3, 2))
        g.output("out", g.upsample(x))
        return g, {"x": rng.normal(size=(2, 2, 3, 2))}
    if op in ACTIVATIONS:
        x = g.input("x", (7,))
        g.output("out", g.activation(x, op))
        return g, {"x": away_from_zero(rng, (3, 7))}
    if op == "reshape":
        x = g.input("x", (2, 3, 2))
        g.output("out", g.reshape(x, (12,)))
        return g, {"x": rng.normal(size=(2, 2, 3, 2))}
    if op == "add":
        a, b = g.input("a", (5,)), g.input("b", (5,))
        g.output("out", g.add(a, b))
        return g, {"a": rng.normal(size=(2, 5)), "b": rng.normal(size=(2, 5))}
    if op in ("sum", "mean"):
        x = g.input("x", (3, 4))
        g.output("out", g.reduce(x, op))
        return g, {"x": rng.normal(size=(2, 3, 4))}
    raise ValueError(op)


OPS = ["affine", "conv2d", "conv2d_s2", "upsample", *ACTIVATIONS, "reshape", "add", "sum", "mean"]


@pytest.mark.parametrize("op", OPS)
@pytest.mark.parametrize("seed", range(3))
def test_op_gradients_fd(op, seed):
    rng = np.random.default_rng(seed)
    g, inputs = single_op_graph(op, rng)
    errs = graph_fd_errors(g, inputs, rng)
    assert max(errs.values()) < 1e-4, errs


def test_composed_mlp_gradients_fd():
    rng = np.random.default_rng(3)
    g = Graph(seed=5)
    x = g.input("x", (3, 3, 1))
    h = g.reshape(x, (9,))
    h = g.activation(g.affine(h, 6, name="l1"), "tanh")
    h = g.activation(g.affine(h, 4, name="l2"), "sigmoid")
    g.output("out", g.reduce(g.affine(h, 2, name="l3"), "mean"))
    errs = graph_fd_errors(g, {"x": rng.normal(size=(2, 3, 3, 1))}, rng)
    assert max(errs.values()) < 1e-4, errs


def test_generator_gradients_fd():
    rng = np.random.default_rng(0)
    g = build_generator((8, 8, 1), width=2, seed=1, dtype=np.float64)
    x = rng.random((1, 8, 8, 1))
    t = np.ones((1, 8, 8, 1))
    t[:, 2:6, 2:6] = 0
    errs = graph_fd_errors(g, {"x": generator_input(x * t, t)}, rng, output="image")
    assert max(errs.values()) < 1e-4, errs


def test_affine_identity():
    g = Graph()
    x = g.input("x", (3,))
    g.output("y", g.affine(x, 3, name="fc"))
    g.params["fc.weight"] = np.eye(3)
    g.params["fc.bias"] = np.zeros(3)
    v = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(forward(g, {"x": v})["y"], v)


def test_two_relus_equal_one(rng):
    g1, g2 = Graph(), Graph()
    a = g1.input("x", (5,))
    g1.output("y", g1.activation(g1.activation(a, "relu"), "relu"))
    b = g2.input("x", (5,))
    g2.output("y", g2.activation(b, "relu"))
    v = rng.normal(size=(4, 5))
    assert np.array_equal(g1.forward({"x": v})["y"], g2.forward({"x": v})["y"])


def test_mlp_matches_script(rng):
    g = Graph(seed=11)
    x = g.input("x", (4,))
    h = g.activation(g.affine(x, 5, name="a"), "relu")
    h = g.activation(g.affine(h, 3, name="b"), "tanh")
    g.output("y", g.affine(h, 2, name="c"))
    v = rng.normal(size=(3, 4))
    p = g.params
    ref = np.maximum(v @ p["a.weight"] + p["a.bias"], 0)
    ref = np.tanh(ref @ p["b.weight"] + p["b.bias"])
    ref = ref @ p["c.weight"] + p["c.bias"]
    assert np.allclose(g.forward({"x": v})["y"], ref, rtol=1e-12, atol=1e-12)


def test_linear_input_gradient_is_weight(rng):
    g = Graph()
    x = g.input("x", (4,))
    g.output("y", g.affine(x, 1, name="fc"))
    g.forward({"x": rng.normal(size=(2, 4))})
    gi = backward(g, np.ones((2, 1))).inputs["x"]
    assert np.allclose(gi, np.tile(g.params["fc.weight"][:, 0], (2, 1)))


def test_zero_output_grad(rng):
    g, inputs = single_op_graph("conv2d", rng)
    g.forward(inputs)
    grads = g.backward(np.zeros((2, 5, 6, 3)))
    assert all(not v.any() for v in grads.params.values())
    assert not grads.inputs["x"].any()


def test_graph_errors(rng):
    g = Graph()
    x = g.input("x", (4,))
    with pytest.raises(GraphError):
        g.conv2d(x, 2)
    with pytest.raises(GraphError):
        g.activation(x, "swish")
    with pytest.raises(GraphError):
        g.reshape(x, (3,))
    g.output("y", g.affine(x, 2))
    with pytest.raises(GraphError):
        g.backward(np.ones((1, 2)))
    with pytest.raises(GraphError):
        g.forward({"x": np.ones((1, 5))})
    with pytest.raises(GraphError):
        g.forward({})


def test_init_is_seeded_and_bounded():
    a, b = Graph(seed=3), Graph(seed=3)
    for g in (a, b):
        g.affine(g.input("x", (16,)), 4, name="fc")
    assert np.array_equal(a.params["fc.weight"], b.params["fc.weight"])
    assert np.all(np.abs(a.params["fc.weight"]) <= 0.25)


def test_sgd_examples():
    p = {"p": np.array([1.0])}
    assert sgd_step(p, {"p": np.array([2.0])}, 0.5)["p"][0] == 0.0
    q = {"w": np.arange(3.0)}
    assert np.array_equal(sgd_step(q, {"w": np.ones(3)}, 0.0)["w"], q["w"])
    f32 = {"w": np.ones(2, dtype=np.float32)}
    assert sgd_step(f32, {"w": np.ones(2)}, 0.1)["w"].dtype == np.float32
    with pytest.raises(KeyError):
        sgd_step(p, {"q": np.ones(1)}, 0.1)


def test_sgd_quadratic_bowl():
    # f(p) = 0.5 * p^T A p with curvature up to 4: any lr < 2/4 contracts monotonically
    A = np.diag([4.0, 1.0, 0.25])
    p = {"p": np.array([1.0, -2.0, 3.0])}
    vals = []
    for _ in range(200):
        vals.append(0.5 * p["p"] @ A @ p["p"])
        p = sgd_step(p, {"p": A @ p["p"]}, 0.45)
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-6


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    c, n = clip_by_global_norm(g, 1.0)
    assert n == 5.0 and np.allclose([c["a"][0], c["b"][0]], [0.6, 0.8])
    same, _ = clip_by_global_norm(g, 10.0)
    assert same is g


def test_critic_penalties(rng):
    x = rng.normal(size=(5, 2, 2))
    unit = np.full(4, 0.5)  # norm exactly 1 in floating point
    assert gradient_penalty(LinearCritic(unit), x) == 0.0
    assert gradient_penalty(LinearCritic(3 * unit), x) == 4.0
    w = rng.normal(size=4)
    assert gradient_penalty(LinearCritic(w / np.linalg.norm(w)), x) < 1e-28
    assert gradient_penalty(ConstantCritic(2.0), x) == 1.0


def test_linear_critic_param_grads(rng):
    c = LinearCritic(rng.normal(size=6), 0.3)
    x = rng.normal(size=(4, 6))
    og = rng.normal(size=4)
    g = c.param_grads(x, og)

    def f(wv):
        return float(LinearCritic(wv, 0.3).score(x) @ og)

    assert rel_err(g["weight"], central_fd(f, c.params["weight"])) < 1e-8
    _, pg = c.penalty(x)
    fd = central_fd(lambda wv: gradient_penalty(LinearCritic(wv), x), c.params["weight"])
    assert rel_err(pg["weight"], fd) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_mlp_critic_penalty_grad_matches_fd(seed):
    rng = np.random.default_rng(seed)
    D = MLPCritic((3, 3, 1), hidden=5, seed=seed, dtype=np.float64)
    x = rng.random((4, 3, 3, 1))
    value, grads = D.penalty(x)
    assert value == pytest.approx(gradient_penalty(D, x), rel=1e-12)
    fd = penalty_param_grads_fd(D, x, eps=1e-3)
    for k in grads:
        assert rel_err(grads[k], fd[k]) < 1e-4, k


def test_mlp_critic_input_grad_fd(rng):
    D = MLPCritic((2, 2, 2), hidden=4, seed=0, dtype=np.float64)
    x = rng.random((1, 2, 2, 2))
    fd = central_fd(lambda xp: float(D.score(xp)[0]), x)
    assert rel_err(D.input_grad(x), fd) < 1e-6


def test_checkpoint_roundtrip(tmp_path):
    g = build_generator((8, 8, 3), width=2, seed=4)
    save_checkpoint(tmp_path / "ck", g.params, {"step": 7, "seed": 4})
    params, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"step": "7", "seed": "4"}
    assert set(params) == set(g.params)
    for k in params:
        assert params[k].dtype == np.float32 and np.array_equal(params[k], g.params[k])


def test_checkpoint_rejects_float64(tmp_path):
    with pytest.raises(TypeError):
        save_checkpoint(tmp_path / "ck", {"w": np.ones(2)})


def test_generator_shape_checks():
    with pytest.raises(GraphError):
        build_generator((10, 12, 3))
    g = build_generator((16, 16, 3), width=4)
    x = np.zeros((2, 16, 16, 3))
    t = np.ones((2, 16, 16, 1))
    assert g.forward({"x": generator_input(x, t)})["image"].shape == (2, 16, 16, 3)
