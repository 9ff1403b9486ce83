"""
自动微分核心测试：逐算子与整模型梯度对照中心差分（64 位）
"""

import numpy as np
import pytest

from app.autodiff.graph import Graph, evaluate, gradient
from app.autodiff.tensor import ParameterSet
from app.core.errors import GraphStateError, NonFiniteError, ShapeError, UnboundInputError

FD_STEP = 1e-6


def _scalar_graph(build, inputs, weight_seed=99):
    """out = build(...)，标量 = Σ out ⊙ W（W 为固定随机常数）"""
    graph = Graph()
    nodes = {name: graph.placeholder(name) for name in inputs}
    out = build(graph, nodes)
    probe = Graph()
    probe_nodes = {name: probe.placeholder(name) for name in inputs}
    shape = evaluate(_with_output(probe, build(probe, probe_nodes)), inputs)["out"].shape
    weight = np.random.default_rng(weight_seed).standard_normal(shape)
    scalar = graph.sum(graph.mul(out, graph.constant(weight))) if shape else out
    return graph, scalar


def _with_output(graph, node):
    graph.output("out", node)
    return graph


def _numeric_gradient(build, inputs, name):
    base = {k: v.copy() for k, v in inputs.items()}
    grad = np.zeros_like(base[name])
    for index in np.ndindex(base[name].shape):
        values = []
        for sign in (1.0, -1.0):
            shifted = {k: v.copy() for k, v in base.items()}
            shifted[name][index] += sign * FD_STEP
            graph, scalar = _scalar_graph(build, shifted)
            graph.output("s", scalar)
            values.append(float(evaluate(graph, shifted)["s"].data))
        grad[index] = (values[0] - values[1]) / (2 * FD_STEP)
    return grad


def _check_op(build, shapes, seed, positive=()):
    rng = np.random.default_rng(seed)
    inputs = {}
    for name, shape in shapes.items():
        value = rng.standard_normal(shape)
        inputs[name] = np.abs(value) + 0.5 if name in positive else value
    graph, scalar = _scalar_graph(build, inputs)
    evaluate(graph, inputs)
    analytic = gradient(graph, scalar, list(inputs))
    for name in inputs:
        numeric = _numeric_gradient(build, inputs, name)
        np.testing.assert_allclose(analytic[name], numeric, rtol=1e-4, atol=1e-6, err_msg=name)


LABELS = np.array([0, 2, 1, 2])
RUNNING_MEAN = np.array([0.1, -0.2, 0.3])
RUNNING_VAR = np.array([1.5, 0.7, 2.0])

OP_CASES = {
    "add_broadcast": (lambda g, n: n["a"] + n["b"], {"a": (3, 4), "b": (4,)}, ()),
    "sub_broadcast": (lambda g, n: n["a"] - n["b"], {"a": (3, 4), "b": (3, 1)}, ()),
    "mul_broadcast": (lambda g, n: n["a"] * n["b"], {"a": (3, 4), "b": (1, 4)}, ()),
    "neg": (lambda g, n: -n["a"], {"a": (5,)}, ()),
    "scale_shift": (lambda g, n: n["a"] * 2.5 + 1.0, {"a": (2, 3)}, ()),
    "matmul": (lambda g, n: n["a"] @ n["b"], {"a": (3, 4), "b": (4, 2)}, ()),
    "conv2d_pad1": (lambda g, n: g.conv2d(n["x"], n["w"], pad=1), {"x": (2, 2, 4, 4), "w": (3, 2, 3, 3)}, ()),
    "conv2d_pad0": (lambda g, n: g.conv2d(n["x"], n["w"], pad=0), {"x": (1, 1, 5, 5), "w": (2, 1, 3, 3)}, ()),
    "relu": (lambda g, n: g.relu(n["a"]), {"a": (4, 3)}, ()),
    "leaky_relu": (lambda g, n: g.leaky_relu(n["a"]), {"a": (4, 3)}, ()),
    "batch_norm_train_2d": (lambda g, n: g.batch_norm(n["x"], n["gamma"], n["beta"], "train"),
                            {"x": (6, 3), "gamma": (3,), "beta": (3,)}, ()),
    "batch_norm_train_4d": (lambda g, n: g.batch_norm(n["x"], n["gamma"], n["beta"], "train"),
                            {"x": (3, 3, 2, 2), "gamma": (3,), "beta": (3,)}, ()),
    "batch_norm_eval": (lambda g, n: g.batch_norm(n["x"], n["gamma"], n["beta"], "eval",
                                                  running_mean=RUNNING_MEAN, running_var=RUNNING_VAR),
                        {"x": (4, 3), "gamma": (3,), "beta": (3,)}, ()),
    "reshape": (lambda g, n: g.reshape(n["a"], (2, 6)), {"a": (3, 4)}, ()),
    "transpose": (lambda g, n: g.transpose(n["a"]), {"a": (3, 4)}, ()),
    "sum_axis": (lambda g, n: g.sum(n["a"], axis=1), {"a": (3, 4)}, ()),
    "mean_axes": (lambda g, n: g.mean(n["a"], axis=(1, 3)), {"a": (2, 3, 2, 2)}, ()),
    "logsumexp": (lambda g, n: g.logsumexp(n["a"], axis=1), {"a": (4, 5)}, ()),
    "softmax_cross_entropy": (lambda g, n: g.softmax_cross_entropy(n["a"], LABELS), {"a": (4, 3)}, ()),
    "pick": (lambda g, n: g.pick(n["a"], LABELS), {"a": (4, 3)}, ()),
    "l2_norm": (lambda g, n: g.l2_norm(n["a"]), {"a": (3, 3)}, ()),
}


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("case", sorted(OP_CASES))
def test_op_gradients_match_central_differences(case, seed):
    """每个可微算子 5 组随机输入（共 100+ 组）"""
    build, shapes, positive = OP_CASES[case]
    _check_op(build, shapes, seed, positive)


def test_node_sugar_records_ops():
    graph = Graph()
    a, b = graph.placeholder("a"), graph.placeholder("b")
    out = graph.output("out", (2.0 * a - b) * a + 1.0 - (-b))
    result = evaluate(graph, {"a": np.array([1.0, 2.0]), "b": np.array([3.0, 4.0])})
    np.testing.assert_array_equal(result["out"].data, np.array([3.0, 5.0]))
    assert out.op == "sub"


def test_placeholder_dedupes_by_name():
    graph = Graph()
    assert graph.placeholder("x") is graph.placeholder("x")


def test_shared_placeholder_accumulates_gradient():
    graph = Graph()
    x = graph.placeholder("x")
    y = graph.sum(x * x + x)
    evaluate(graph, {"x": np.array([1.0, -2.0])})
    np.testing.assert_array_equal(gradient(graph, y, ["x"])["x"], np.array([3.0, -3.0]))


def test_gradient_of_unused_input_is_zero():
    graph = Graph()
    x, z = graph.placeholder("x"), graph.placeholder("z")
    y = graph.sum(x)
    evaluate(graph, {"x": np.ones(3), "z": np.ones((2, 2))})
    np.testing.assert_array_equal(gradient(graph, y, ["z"])["z"], np.zeros((2, 2)))


def test_gradient_keeps_placeholder_dtype():
    graph = Graph()
    x = graph.placeholder("x")
    y = graph.sum(x * x)
    evaluate(graph, {"x": np.ones(3, dtype=np.float32)})
    assert gradient(graph, y, ["x"])["x"].dtype == np.float32


def test_unbound_input_raises():
    graph = Graph()
    graph.output("y", graph.placeholder("x") + graph.placeholder("w"))
    with pytest.raises(UnboundInputError):
        evaluate(graph, {"x": np.ones(2)})


def test_shape_mismatch_raises():
    graph = Graph()
    graph.output("y", graph.placeholder("a") @ graph.placeholder("b"))
    with pytest.raises(ShapeError):
        evaluate(graph, {"a": np.ones((2, 3)), "b": np.ones((2, 3))})


def test_gradient_requires_evaluated_scalar():
    graph = Graph()
    x = graph.placeholder("x")
    y = x * 2.0
    with pytest.raises(GraphStateError):
        gradient(graph, graph.sum(y), ["x"])

    graph = Graph()
    x = graph.placeholder("x")
    y = x * 2.0
    evaluate(graph, {"x": np.ones(3)})
    with pytest.raises(GraphStateError):
        gradient(graph, y, ["x"])


def test_evaluated_graph_is_frozen():
    graph = Graph()
    x = graph.placeholder("x")
    graph.output("y", x + 1.0)
    evaluate(graph, {"x": np.ones(2)})
    with pytest.raises(GraphStateError):
        graph.relu(x)


def test_strict_mode_names_non_finite_node():
    graph = Graph(strict=True)
    x = graph.placeholder("x")
    graph.output("y", graph.logsumexp(x * 1e308 * 10.0, axis=0))
    with pytest.raises(NonFiniteError):
        evaluate(graph, {"x": np.array([1.0, 2.0])})


def test_non_strict_mode_propagates_inf():
    graph = Graph(strict=False)
    x = graph.placeholder("x")
    graph.output("y", x * 1e308 * 10.0)
    assert np.isinf(evaluate(graph, {"x": np.array([1.0])})["y"].data).all()


def test_parameter_set_helpers():
    params = ParameterSet([("w", np.array([3.0, 4.0])), ("b", np.array([0.0]))])
    assert params.global_norm() == pytest.approx(5.0)
    moved = params.add_scaled({"w": np.array([1.0, 1.0])}, 2.0)
    np.testing.assert_array_equal(moved["w"].data, np.array([5.0, 6.0]))
    assert moved.checksum() != params.checksum()
    assert params.add_scaled({"w": np.zeros(2)}).checksum() == params.checksum()


# ---- 整模型梯度 ----

def _model_input_fd(model, x, conditional=None):
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += FD_STEP
        minus[index] -= FD_STEP
        if conditional is None:
            e_plus, e_minus = model.energy(plus).sum(), model.energy(minus).sum()
        else:
            e_plus = model.conditional_energy(plus, conditional).sum()
            e_minus = model.conditional_energy(minus, conditional).sum()
        grad[index] = (e_plus - e_minus) / (2 * FD_STEP)
    return grad


@pytest.mark.parametrize("fixture", ["mlp64", "cnn64"])
def test_energy_input_gradient_matches_fd(fixture, request, rng):
    model = request.getfixturevalue(fixture)
    x = rng.uniform(-1, 1, (3, *model.config.input_shape))
    energies, grad = model.input_gradient(x)
    np.testing.assert_allclose(energies, model.energy(x))
    np.testing.assert_allclose(grad, _model_input_fd(model, x), rtol=1e-4, atol=1e-7)

    _, cond_grad = model.input_gradient(x, conditional_class=1)
    np.testing.assert_allclose(cond_grad, _model_input_fd(model, x, conditional=1), rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("fixture", ["mlp64", "cnn64"])
def test_loss_parameter_gradient_matches_fd(fixture, request, rng):
    model = request.getfixturevalue(fixture)
    x = rng.uniform(-1, 1, (4, *model.config.input_shape))
    y = np.arange(4) % model.config.class_count

    def loss_at(params):
        graph = Graph()
        logits = model.build(graph, graph.placeholder("x"), mode="train").logits
        loss = graph.softmax_cross_entropy(logits, y)
        evaluate(graph, model.bindings(params, x=x))
        return graph, loss

    graph, loss = loss_at(model.params)
    grads = gradient(graph, loss, model.params.names())
    check_rng = np.random.default_rng(7)
    for name, tensor in model.params.items():
        flat = tensor.data.reshape(-1)
        for i in check_rng.choice(flat.size, size=min(4, flat.size), replace=False):
            index = np.unravel_index(i, tensor.shape)
            values = []
            for sign in (1.0, -1.0):
                moved = tensor.data.copy()
                moved[index] += sign * FD_STEP
                g, l = loss_at(model.params.replace({name: moved}))
                values.append(float(g.value(l)))
            numeric = (values[0] - values[1]) / (2 * FD_STEP)
            assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-7), name
