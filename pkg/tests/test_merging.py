# featcal/tests/test_merging.py

import numpy as np
import pytest

from core.errors import MergeError
from core.parameters import ParameterSet, Role
from merging.mergers import (
    MERGE_METHODS,
    merge,
    register_merger,
    simple_average,
    task_arithmetic,
    task_vector,
    task_vector_cosine,
    with_task_head,
)
from tests.helpers import expert_family, linear_spec, residual_spec


@pytest.fixture
def family():
    spec = residual_spec()
    base, experts = expert_family(spec, 3, seed=1)
    return spec, base, experts


def test_average_is_entrywise_mean(family):
    _, _, experts = family
    merged = simple_average(experts)
    assert merged.role == Role.merged()
    for key in merged.keys():
        np.testing.assert_allclose(merged[key], sum(e[key] for e in experts) / 3, atol=1e-15)


def test_task_arithmetic_adds_scaled_task_vectors(family):
    _, base, experts = family
    merged = task_arithmetic(base, experts, scale=0.3)
    vectors = [task_vector(base, e) for e in experts]
    for key in merged.keys():
        np.testing.assert_allclose(merged[key], base[key] + 0.3 * sum(v[key] for v in vectors), atol=1e-14)


def test_single_expert_average_returns_that_expert(family):
    _, _, experts = family
    merged = merge("average", experts[:1])
    assert merged.same_values(experts[0])


def test_task_arithmetic_with_unit_scale_and_one_expert(family):
    _, base, experts = family
    merged = merge("task-arithmetic", experts[:1], base=base, scale=1.0)
    for key in merged.keys():
        np.testing.assert_allclose(merged[key], experts[0][key], atol=1e-14)


def test_zero_scale_returns_base(family):
    _, base, experts = family
    assert merge("task-arithmetic", experts, base=base, scale=0.0).same_values(base)


def test_incompatible_experts_are_rejected(family):
    _, _, experts = family
    other = expert_family(linear_spec([4, 6]), 1, seed=2)[1][0]
    with pytest.raises(MergeError):
        simple_average([experts[0], other])


def test_task_arithmetic_needs_a_base(family):
    _, _, experts = family
    with pytest.raises(MergeError):
        merge("task-arithmetic", experts, base=None)


def test_unknown_method(family):
    _, _, experts = family
    with pytest.raises(MergeError):
        merge("ties", experts)


def test_registry_is_open(family):
    _, _, experts = family

    @register_merger("first")
    def first(experts, **_):
        return experts[0].with_role(Role.merged())

    try:
        assert merge("first", experts).same_values(experts[0])
    finally:
        MERGE_METHODS.pop("first")


def test_with_task_head_only_touches_the_head(family):
    _, _, experts = family
    merged = simple_average(experts)
    scored = with_task_head(merged, experts[2])
    for key in merged.keys():
        source = experts[2] if key.startswith("head.") else merged
        np.testing.assert_array_equal(scored[key], source[key])


def test_task_vector_cosine(family):
    _, base, experts = family
    assert task_vector_cosine(experts[1], base, experts[1]) == pytest.approx(1.0)
    assert task_vector_cosine(base, base, base) == 1.0
    assert task_vector_cosine(base, base, experts[0]) == 0.0
    assert -1.0 <= task_vector_cosine(experts[0], base, experts[1]) <= 1.0


def test_merged_model_is_a_parameter_set(family):
    spec, base, experts = family
    merged = merge("task-arithmetic", experts, base=base)
    assert isinstance(merged, ParameterSet)
    merged.check_against(spec)


@pytest.mark.parametrize("c", [0.0, 0.5, -2.0])
def test_mergers_are_linear_in_the_task_vectors(family, c):
    _, base, experts = family
    scaled = [
        ParameterSet(role=e.role, entries={k: base[k] + c * (e[k] - base[k]) for k in base.keys()})
        for e in experts
    ]
    for merged, merged_scaled in [
        (task_arithmetic(base, experts, scale=0.3), task_arithmetic(base, scaled, scale=0.3)),
        (simple_average(experts), simple_average(scaled)),
    ]:
        for key in base.keys():
            np.testing.assert_allclose(merged_scaled[key] - base[key], c * (merged[key] - base[key]),
                                       atol=1e-12, err_msg=key)
