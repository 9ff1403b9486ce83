"""
能量地形切片测试
"""

import numpy as np
import pytest

from app.autodiff.tensor import ParameterSet
from app.services.landscape_service import (
    landscape_slice,
    landscape_subset,
    offset_grid,
    random_direction,
)


class QuadraticEnergy:
    """E_w(x) = ½(x·w)²，总能量是 w 的二次函数"""

    def __init__(self, params, limit=None):
        self.params = params
        self.limit = limit

    def with_params(self, params):
        return QuadraticEnergy(params, self.limit)

    def output_axes(self):
        return {name: None for name in self.params.names()}

    def energy(self, x):
        w = self.params["w"].data
        if self.limit is not None and np.abs(w).max() > self.limit:
            return np.full(len(x), np.nan)
        return 0.5 * (np.asarray(x, dtype=np.float64) @ w) ** 2


@pytest.fixture
def quadratic():
    return QuadraticEnergy(ParameterSet({"w": np.array([0.7, -1.3, 0.4])}))


def test_offset_grid_contains_exact_zero():
    grid = offset_grid(-1.0, 1.0, 41)
    assert len(grid) == 41 and grid[20] == 0.0
    assert grid[0] == -1.0 and grid[-1] == 1.0
    assert 0.0 in offset_grid(-0.3, 0.3, 7)


def test_center_equals_unperturbed_energy(mlp64, toy_ds):
    subset = toy_ds.samples[:100]
    checksum = mlp64.params.checksum()
    result = landscape_slice(mlp64, subset, directions=1, grid=offset_grid(-1, 1, 41), seed=5)
    assert len(result.energies) == 41
    assert result.energies[20] == float(np.sum(mlp64.energy(subset).astype(np.float64)))
    assert result.energies[20] == result.base_energy
    assert mlp64.params.checksum() == checksum
    assert result.direction_seeds == [5] and result.normalization == "filter"


def test_slice_is_deterministic(mlp64, toy_ds):
    subset = toy_ds.samples[:50]
    grid = [-0.5, 0.0, 0.5]
    a = landscape_slice(mlp64, subset, grid=grid, seed=2)
    b = landscape_slice(mlp64, subset, grid=grid, seed=2)
    assert a.energies == b.energies
    c = landscape_slice(mlp64, subset, grid=grid, seed=3)
    assert c.energies != a.energies


def test_two_dimensional_slice(mlp64, toy_ds):
    subset = toy_ds.samples[:40]
    result = landscape_slice(mlp64, subset, directions=2, grid=offset_grid(-0.5, 0.5, 5), seed=1)
    assert len(result.energies) == 5 and all(len(row) == 5 for row in result.energies)
    assert result.energies[2][2] == result.base_energy
    assert result.direction_seeds == [1, 2]
    assert result.offsets == [offset_grid(-0.5, 0.5, 5)] * 2


@pytest.mark.parametrize("normalization", ["none", "filter"])
def test_quadratic_model_gives_exact_parabola(quadratic, normalization, rng):
    x = rng.standard_normal((64, 3))
    grid = offset_grid(-2, 2, 21)
    result = landscape_slice(quadratic, x, grid=grid, normalization=normalization, seed=9)
    coeffs, residual, *_ = np.polyfit(grid, result.energies, 2, full=True)
    assert coeffs[0] > 0
    assert (residual[0] if len(residual) else 0.0) < 1e-8


def test_non_finite_points_are_flagged(rng):
    model = QuadraticEnergy(ParameterSet({"w": np.array([0.5, 0.5])}), limit=10.0)
    result = landscape_slice(model, rng.standard_normal((8, 2)), grid=[-1000.0, 0.0, 1000.0],
                             normalization="none", seed=0)
    assert result.flagged
    for (index,) in result.flagged:
        assert result.energies[index] is None
    assert result.energies[1] is not None


def test_invalid_arguments(mlp64, toy_ds):
    with pytest.raises(ValueError):
        landscape_slice(mlp64, toy_ds.samples[:10], grid=[-1.0, 1.0])
    with pytest.raises(ValueError):
        landscape_slice(mlp64, toy_ds.samples[:10], directions=3)
    with pytest.raises(ValueError):
        random_direction(mlp64.params, mlp64.output_axes(), 0, normalization="layer")


def test_filter_normalization_matches_unit_norms(mlp64):
    direction = random_direction(mlp64.params, mlp64.output_axes(), seed=4, normalization="filter")
    weight = mlp64.params["fc0.weight"].data
    np.testing.assert_allclose(np.linalg.norm(direction["fc0.weight"], axis=0), np.linalg.norm(weight, axis=0))
    bias = mlp64.params["fc0.bias"].data
    np.testing.assert_array_equal(np.abs(direction["fc0.bias"]), np.abs(bias))


def test_landscape_subset(toy_ds):
    subset = landscape_subset(toy_ds, fraction=0.1, cap=4096, rng=np.random.default_rng(0))
    assert len(subset) == 26
    capped = landscape_subset(toy_ds, fraction=0.5, cap=10, rng=np.random.default_rng(0))
    assert len(capped) == 10
