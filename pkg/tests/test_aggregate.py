import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acelt.acemodel import LogitBundle
from acelt.aggregate import (
    AGGREGATORS,
    get_aggregator,
    group_average,
    group_average_unscaled,
    group_concat,
    group_max,
    rescale,
    solo_prediction,
)
from acelt.errors import ConfigurationError, ContractError
from acelt.planner import assign


def make_bundle(raw, norms):
    raw = [np.atleast_2d(np.asarray(z, dtype=float)) for z in raw]
    return LogitBundle(raw, norms, assign(raw[0].shape[1], len(raw)))


def random_bundle(rng, k, c, b=5, equal_norms=False):
    raw = [rng.normal(size=(b, c)) for _ in range(k)]
    norms = np.full(k, 2.5) if equal_norms else rng.uniform(0.5, 3.0, k)
    return make_bundle(raw, norms)


# -------------------------------------------------------- brute-force oracles


def oracle(bundle, kind):
    """Per-category loops over experts; independent of the vectorised code."""
    k = len(bundle.raw)
    b, c = bundle.raw[0].shape
    starts = [(i * c) // k + 1 for i in range(k)]  # 1-based slice starts
    out = np.zeros((b, c))
    for r in range(b):
        for cat in range(1, c + 1):
            seen = [i for i in range(k) if cat >= starts[i]]
            scaled = [
                bundle.raw[i][r, cat - 1] * bundle.weight_sq_norms[i] / bundle.weight_sq_norms[0]
                for i in seen
            ]
            raw = [bundle.raw[i][r, cat - 1] for i in seen]
            if kind == "avg_scaled":
                out[r, cat - 1] = sum(scaled) / len(scaled)
            elif kind == "avg_raw":
                out[r, cat - 1] = sum(raw) / len(raw)
            elif kind == "max":
                out[r, cat - 1] = max(scaled)
            elif kind == "concat":
                owner = max(seen)  # newest expert to add this slice
                out[r, cat - 1] = bundle.raw[owner][r, cat - 1]
    return out


# ---------------------------------------------------------------- examples


def test_rescale_examples():
    b = make_bundle([[0.0, 0.0, 0.0], [1.0, -1.0, 0.5]], [2.0, 4.0])
    np.testing.assert_array_equal(rescale(b)[1], [[2.0, -2.0, 1.0]])
    np.testing.assert_array_equal(rescale(b)[0], b.raw[0])
    b = make_bundle([[1.0, 2.0], [3.0, 4.0]], [3.0, 3.0])
    np.testing.assert_array_equal(rescale(b)[1], b.raw[1])


def test_rescale_rejects_zero_first_norm():
    with pytest.raises(ContractError):
        rescale(make_bundle([[1.0, 2.0], [1.0, 2.0]], [0.0, 1.0]))


def test_group_average_two_term_mean():
    # C=3, K=3: category 3 is seen by all three experts, category 1 only by expert 1
    raw = [[0.1, 0.0, 0.2], [9.0, 0.3, 0.9], [9.0, 9.0, 0.6]]
    b = make_bundle(raw, [1.0, 1.0, 1.0])
    o = group_average(b).fused_logits[0]
    assert o[0] == pytest.approx(0.1)
    assert o[1] == pytest.approx(0.15)
    assert o[2] == pytest.approx((0.2 + 0.9 + 0.6) / 3)


def test_group_average_subset_of_experts():
    # C=4, K=2: category 4 is seen by experts {1, 2}
    b = make_bundle([[0, 0, 0, 0.2], [0, 0, 0, 0.6]], [1.0, 1.0])
    assert group_average(b).fused_logits[0, 3] == pytest.approx(0.4)
    assert group_average_unscaled(b).fused_logits[0, 3] == pytest.approx(0.4)
    assert group_max(b).fused_logits[0, 3] == pytest.approx(0.6)
    assert group_average(b).fused_logits[0, 0] == 0.0


@pytest.mark.parametrize("name", list(AGGREGATORS))
def test_single_expert_degenerates_to_plain_classifier(name):
    z = np.random.default_rng(0).normal(size=(4, 5))
    pred = get_aggregator(name)(make_bundle([z], [1.7]))
    np.testing.assert_array_equal(pred.fused_logits, z)
    np.testing.assert_array_equal(pred.predicted_label, z.argmax(1) + 1)


def test_group_concat_slice_ownership():
    raw = [np.full((1, 6), 1.0), np.full((1, 6), 2.0), np.full((1, 6), 3.0)]
    o = group_concat(make_bundle(raw, [1.0, 5.0, 9.0])).fused_logits[0]
    np.testing.assert_array_equal(o, [1, 1, 2, 2, 3, 3])


def test_predictions_are_softmax_rows_and_ties_go_low():
    b = make_bundle([[1.0, 3.0, 3.0, 0.0]], [1.0])
    pred = group_average(b)
    assert pred.predicted_label.tolist() == [2]
    np.testing.assert_allclose(pred.confidences.sum(1), 1.0, atol=1e-12)


def test_unknown_aggregator():
    with pytest.raises(ConfigurationError):
        get_aggregator("median")


def test_solo_prediction_never_picks_interfering():
    z = np.array([[10.0, 9.0, 1.0, 0.5]])
    b = make_bundle([z, z], [1.0, 1.0])
    assert solo_prediction(b, 2).predicted_label.tolist() == [3]
    assert solo_prediction(b, 1).predicted_label.tolist() == [1]


# --------------------------------------------------------------- properties


@pytest.mark.parametrize("name", list(AGGREGATORS))
def test_matches_bruteforce_on_random_bundles(name):
    rng = np.random.default_rng(42)
    for _ in range(100):
        c = int(rng.integers(1, 9))
        k = int(rng.integers(1, min(4, c) + 1))
        b = random_bundle(rng, k, c)
        np.testing.assert_allclose(
            get_aggregator(name)(b).fused_logits, oracle(b, name), rtol=0, atol=1e-12
        )


def test_avg_unscaled_differs_when_norms_differ():
    rng = np.random.default_rng(1)
    b = random_bundle(rng, 3, 6)
    assert not np.allclose(group_average(b).fused_logits, group_average_unscaled(b).fused_logits)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1), st.data())
def test_equal_norms_make_average_variants_agree(c, seed, data):
    k = data.draw(st.integers(1, min(4, c)))
    b = random_bundle(np.random.default_rng(seed), k, c, equal_norms=True)
    np.testing.assert_array_equal(
        group_average(b).fused_logits, group_average_unscaled(b).fused_logits
    )


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1), st.floats(0.1, 10.0), st.data())
def test_shape_permutation_and_scale_invariance(c, seed, factor, data):
    k = data.draw(st.integers(1, min(4, c)))
    rng = np.random.default_rng(seed)
    b = random_bundle(rng, k, c, b=6)
    perm = rng.permutation(6)
    permuted = LogitBundle([z[perm] for z in b.raw], b.weight_sq_norms, b.assignments)
    boosted = LogitBundle([z * factor for z in b.raw], b.weight_sq_norms, b.assignments)
    for fn in AGGREGATORS.values():
        pred = fn(b)
        assert pred.fused_logits.shape == (6, c)
        np.testing.assert_array_equal(fn(permuted).fused_logits, pred.fused_logits[perm])
        np.testing.assert_array_equal(fn(boosted).predicted_label, pred.predicted_label)
        np.testing.assert_array_equal(fn(b).fused_logits, pred.fused_logits)
