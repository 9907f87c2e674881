from fractions import Fraction

import numpy as np
import pytest

from halftune.merge import (StructureError, apply_vector, drop_ratio, half_reset, layer_elements_equal,
                            reset_strategies, task_vector, two_sum)
from halftune.model import ModelConfig, build_model
from halftune.selection import complement, plan_category

from conftest import perturbed


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_two_sum_is_error_free(dtype):
    rng = np.random.default_rng(0)
    a = (rng.standard_normal(300) * 10.0 ** rng.integers(-8, 8, 300)).astype(dtype)
    b = (rng.standard_normal(300) * 10.0 ** rng.integers(-8, 8, 300)).astype(dtype)
    s, e = two_sum(a, b)
    for x, y, hi, lo in zip(a, b, s, e):
        assert Fraction(float(hi)) + Fraction(float(lo)) == Fraction(float(x)) + Fraction(float(y))


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_reconstruction_is_bitwise(dtype):
    base = build_model(ModelConfig(64, 16, 2, 2, 32, 16, dtype), 0)
    for seed in range(5):
        ft = perturbed(base, seed, scale=10.0 ** -seed)
        tv = task_vector(ft, base.registry)
        assert apply_vector(base.registry, tv).equals(ft)


def test_half_reset_splits_exactly(tiny_model):
    ft = perturbed(tiny_model)
    plan = plan_category(tiny_model.registry, 1, 0)
    out = half_reset(ft, tiny_model.registry, plan)
    for name in out.names():
        src = ft if name in plan.trainable else tiny_model.registry
        assert np.array_equal(out.array(name), src.array(name))
    eq, total = layer_elements_equal(out, tiny_model.registry)
    assert 2 * eq == total
    assert apply_vector(tiny_model.registry, task_vector(ft, tiny_model.registry), plan).equals(out)
    assert half_reset(out, tiny_model.registry, plan).equals(out)


def test_task_vector_norms_by_category(tiny_model):
    ft = tiny_model.registry.copy()
    ft.set("lm_head", ft.array("lm_head") + 1.0)
    tv = task_vector(ft, tiny_model.registry)
    norms = tv.norms()
    assert norms["HEAD"] == pytest.approx(np.sqrt(ft.array("lm_head").size))
    assert norms["SAN"] == 0 and not tv.is_zero()
    assert task_vector(tiny_model.registry, tiny_model.registry).is_zero()


def test_structure_mismatch_rejected(tiny_model):
    other = build_model(ModelConfig(64, 16, 4, 2, 32, 16, "f64"), 0)
    with pytest.raises(StructureError):
        task_vector(other.registry, tiny_model.registry)
    f32 = build_model(ModelConfig(64, 16, 2, 2, 32, 16, "f32"), 0)
    with pytest.raises(StructureError):
        task_vector(f32.registry, tiny_model.registry)


def test_drop_ratio(tiny_model):
    tv = task_vector(perturbed(tiny_model), tiny_model.registry)
    n = len(tv.names())
    dropped = drop_ratio(tv, 0.5, 3)
    zero = [k for k in dropped.names() if not dropped.array(k).any()]
    assert len(zero) == round(0.5 * n)
    assert drop_ratio(tv, 0.0, 3).names() == tv.names()
    assert drop_ratio(tv, 1.0, 3).is_zero()
    with pytest.raises(ValueError):
        drop_ratio(tv, 1.5, 0)


def test_reset_strategies_keep_io_by_default(tiny_model):
    ft = perturbed(tiny_model)
    for strategy in ("model", "layer", "category"):
        out = reset_strategies(ft, tiny_model.registry, strategy, 0)
        assert np.array_equal(out.array("lm_head"), ft.array("lm_head"))
    out = reset_strategies(ft, tiny_model.registry, "category", 0, reset_io=True)
    assert np.array_equal(out.array("embed"), tiny_model.registry.array("embed"))
    with pytest.raises(ValueError):
        reset_strategies(ft, tiny_model.registry, "ratio", 0)


def test_complement_plans_cover_registry(tiny_model):
    ft = perturbed(tiny_model)
    plan = plan_category(tiny_model.registry, 1, 0)
    a = half_reset(ft, tiny_model.registry, plan)
    b = half_reset(ft, tiny_model.registry, complement(plan))
    for name in ft.names():
        assert {a.array(name).tobytes(), b.array(name).tobytes()} == \
            {ft.array(name).tobytes(), tiny_model.registry.array(name).tobytes()} or \
            ft.array(name).tobytes() == tiny_model.registry.array(name).tobytes()
