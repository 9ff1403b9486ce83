"""
优化器测试：SAM / ASAM 扰动、两遍更新、动量与学习率调度
"""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from app.autodiff.graph import Graph, evaluate
from app.autodiff.tensor import ParameterSet
from app.core.errors import DivergenceError, ShapeError
from app.schemas.training import OptimConfig, SamConfig
from app.services.optimizer_service import (
    OptState,
    asam_perturbation,
    sam_perturbation,
    schedule_lr,
    sgd_momentum_update,
    sharpness_aware_step,
)


def quadratic_loss(target, strict=None):
    """L(θ) = ½‖w − c‖²，∇L = w − c"""
    def loss_fn(params):
        graph = Graph(strict=strict)
        diff = graph.sub(graph.placeholder("w"), graph.constant(target))
        loss = graph.scale(graph.sum(graph.mul(diff, diff)), 0.5)
        evaluate(graph, params.arrays())
        return graph, loss
    return loss_fn


def holder(w):
    return SimpleNamespace(params=ParameterSet({"w": np.asarray(w, dtype=np.float64)}))


def fresh_opt(params, lr=0.1, momentum=0.9, **kwargs):
    return OptState.create(params, OptimConfig(lr=lr, momentum=momentum, **kwargs), total_epochs=10)


@pytest.mark.parametrize("seed", range(5))
def test_sam_perturbation_has_radius_rho(seed):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5) * 1e-3}
    offsets, degenerate = sam_perturbation(grads, rho=0.05)
    norm = math.sqrt(sum(float(np.sum(v ** 2)) for v in offsets.values()))
    assert not degenerate
    assert abs(norm - 0.05) < 1e-9
    # 方向与梯度一致
    for name, g in grads.items():
        assert np.all(np.sign(offsets[name]) == np.sign(g))


def test_sam_perturbation_zero_gradient_is_degenerate():
    offsets, degenerate = sam_perturbation({"w": np.zeros(3)}, rho=0.05)
    assert degenerate
    assert not offsets["w"].any()
    with pytest.raises(ValueError):
        sam_perturbation({}, rho=0.05)


def test_asam_perturbation_exact(rng):
    params = ParameterSet({"w": np.array([[-2.0, 0.0], [0.5, 3.0]])})
    grads = {"w": np.array([[1.0, -4.0], [-0.1, 0.0]])}
    offsets = asam_perturbation(params, grads, rho=0.1)
    np.testing.assert_array_equal(offsets["w"], [[0.2, 0.0], [-0.05, 0.0]])
    with pytest.raises(ShapeError):
        asam_perturbation(params, {"w": np.zeros(3)}, rho=0.1)
    with pytest.raises(ShapeError):
        asam_perturbation(params, {"v": np.zeros((2, 2))}, rho=0.1)


def test_sam_step_on_quadratic_is_exact():
    target = np.array([1.0, -1.0, 0.5])
    model = holder([3.0, 1.0, -0.5])
    opt = fresh_opt(model.params)
    g = model.params["w"].data - target
    norm = np.linalg.norm(g)

    result = sharpness_aware_step(model, quadratic_loss(target), SamConfig(variant="sam", rho=0.05), opt, epoch=0)

    g_perturbed = g * (1.0 + 0.05 / norm)
    np.testing.assert_allclose(model.params["w"].data, [3.0, 1.0, -0.5] - 0.1 * g_perturbed, rtol=1e-12)
    assert result.loss == pytest.approx(0.5 * norm ** 2)
    assert result.perturbed_loss == pytest.approx(0.5 * (norm + 0.05) ** 2)
    assert result.grad_norm == pytest.approx(norm)
    assert result.lr == pytest.approx(0.1)
    assert not result.degenerate


def test_sam_step_at_minimum_is_degenerate_noop():
    target = np.array([0.5, 0.5])
    model = holder(target)
    result = sharpness_aware_step(model, quadratic_loss(target), SamConfig(variant="sam", rho=0.05),
                                  fresh_opt(model.params), epoch=0)
    assert result.degenerate
    np.testing.assert_array_equal(model.params["w"].data, target)


def test_sam_with_tiny_rho_matches_plain_sgd():
    target = np.array([0.3, -0.7])
    plain, sharp = holder([1.0, 2.0]), holder([1.0, 2.0])
    sharpness_aware_step(plain, quadratic_loss(target), SamConfig(variant="none"), fresh_opt(plain.params), 0)
    sharpness_aware_step(sharp, quadratic_loss(target), SamConfig(variant="sam", rho=1e-10), fresh_opt(sharp.params), 0)
    np.testing.assert_allclose(sharp.params["w"].data, plain.params["w"].data, atol=1e-10)


@pytest.mark.parametrize("variant", ["sam", "asam"])
def test_gap_to_plain_step_is_linear_in_rho(variant):
    """二次损失上扰动点梯度 = g + ε，两者更新之差恰为 lr·‖ε‖"""
    target = np.array([0.3, -0.7, 0.2])
    start = [1.0, 2.0, -0.5]
    plain = holder(start)
    sharpness_aware_step(plain, quadratic_loss(target), SamConfig(variant="none"), fresh_opt(plain.params), 0)

    rhos = (1e-2, 1e-3, 1e-4)
    ratios = []
    for rho in rhos:
        sharp = holder(start)
        sharpness_aware_step(sharp, quadratic_loss(target), SamConfig(variant=variant, rho=rho),
                             fresh_opt(sharp.params), 0)
        ratios.append(np.linalg.norm(sharp.params["w"].data - plain.params["w"].data) / rho)
    assert max(ratios) <= 2 * min(ratios)
    if variant == "sam":
        np.testing.assert_allclose(ratios, 0.1, rtol=1e-6)


def test_asam_step_uses_elementwise_offsets():
    target = np.zeros(2)
    model = holder([2.0, -1.0])
    result = sharpness_aware_step(model, quadratic_loss(target), SamConfig(variant="asam", rho=0.5),
                                  fresh_opt(model.params, lr=0.1), epoch=0)
    # ε = 0.5·|θ|·sign(θ) = [1, -0.5]，扰动点梯度 = [3, -1.5]
    np.testing.assert_allclose(model.params["w"].data, [2.0 - 0.3, -1.0 + 0.15], rtol=1e-12)
    assert result.perturbed_loss == pytest.approx(0.5 * (9.0 + 2.25))


def test_non_finite_loss_raises_divergence():
    model = holder([0.0])
    with pytest.raises(DivergenceError) as info:
        sharpness_aware_step(model, quadratic_loss(np.array([np.inf]), strict=False), SamConfig(variant="none"),
                             fresh_opt(model.params), epoch=0)
    assert info.value.reason == "LOSS_NON_FINITE"


def test_momentum_and_weight_decay():
    params = ParameterSet({"w": np.array([1.0, -2.0])})
    opt = fresh_opt(params, momentum=0.5)
    g = {"w": np.array([0.2, 0.4])}
    first = sgd_momentum_update(params, g, opt, lr=0.1)
    np.testing.assert_allclose(first["w"].data, [0.98, -2.04])
    second = sgd_momentum_update(first, g, opt, lr=0.1)
    np.testing.assert_allclose(second["w"].data, [0.98 - 0.03, -2.04 - 0.06])
    assert opt.step_count == 2

    decayed = sgd_momentum_update(params, {"w": np.zeros(2)}, fresh_opt(params), lr=0.1, weight_decay=0.25)
    np.testing.assert_allclose(decayed["w"].data, [1.0 - 0.05, -2.0 + 0.1])


def test_step_schedule():
    opt = fresh_opt(ParameterSet({"w": np.zeros(1)}), lr=0.1, milestones=[2, 4], decay=0.1)
    lrs = [schedule_lr(opt, epoch) for epoch in range(6)]
    np.testing.assert_allclose(lrs, [0.1, 0.1, 0.01, 0.01, 0.001, 0.001])
    with pytest.raises(ValueError):
        schedule_lr(opt, -1)


def test_cosine_schedule():
    opt = fresh_opt(ParameterSet({"w": np.zeros(1)}), lr=0.2, schedule="cosine")
    assert schedule_lr(opt, 0) == pytest.approx(0.2)
    assert schedule_lr(opt, 5) == pytest.approx(0.1)
    assert schedule_lr(opt, 10) == pytest.approx(0.0, abs=1e-15)
    assert schedule_lr(opt, 50) == pytest.approx(0.0, abs=1e-15)
    lrs = [schedule_lr(opt, e) for e in range(11)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sam_perturbation_normalizes():
    offsets, _ = sam_perturbation({"w": np.array([3.0, 4.0])}, rho=1.0)
    np.testing.assert_allclose(offsets["w"], [0.6, 0.8])


def test_asam_perturbation_zero_cases():
    params = ParameterSet({"w": np.array([2.0, -1.0, 0.0, 5.0])})
    offsets = asam_perturbation(params, {"w": np.array([0.5, -3.0, 7.0, 0.0])}, rho=1.0)
    np.testing.assert_array_equal(offsets["w"], [2.0, -1.0, 0.0, 0.0])


def test_default_step_schedule_after_two_milestones():
    opt = fresh_opt(ParameterSet({"w": np.zeros(1)}))
    assert schedule_lr(opt, 130) == pytest.approx(0.004)


def test_stationary_point_with_weight_decay():
    model = holder([0.0, 0.0])
    sharpness_aware_step(model, quadratic_loss(np.zeros(2)), SamConfig(variant="sam", rho=0.05, weight_decay=0.5),
                         fresh_opt(model.params), epoch=0)
    np.testing.assert_array_equal(model.params["w"].data, [0.0, 0.0])
