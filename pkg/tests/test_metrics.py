import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from compatseg.labels import encode_full, numeric_encoding, restrict
from compatseg.metrics import DiceResult, dice, dice_batch, dice_masks, harden

GT = encode_full(np.array([[0, 0, 1, 2]]), 3)


def test_perfect_prediction():
    r = dice(numeric_encoding(GT), GT)
    assert np.array_equal(r.per_class, [1.0, 1.0, 1.0])
    assert r.mean == 1.0 and r.foreground_mean == 1.0


def test_partial_overlap():
    pred = numeric_encoding(encode_full(np.array([[0, 1, 1, 2]]), 3))
    r = dice(pred, GT)
    assert r.per_class[0] == pytest.approx(2 / 3)
    assert r.per_class[1] == pytest.approx(2 / 3)
    assert r.per_class[2] == 1.0
    assert r.foreground_mean == pytest.approx(2 / 3)


def test_empty_vs_empty_scores_one():
    assert dice_masks(np.zeros(4), np.zeros(4)) == 1.0
    assert dice_masks(np.ones(4), np.zeros(4)) == 0.0


def test_split_prediction_recomposed():
    m = 3
    y = numeric_encoding(GT)
    z = np.concatenate([0.5 * y, 0.5 * y], axis=1)
    assert np.array_equal(dice(z, GT).per_sample, dice(y, GT).per_sample)
    assert z.shape[1] == 2 * m


def test_argmax_ties_to_lower_index():
    assert harden(np.array([[0.5, 0.5, 0.0]])).tolist() == [0]


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((3, 3)), GT)
    with pytest.raises(ValueError):
        dice_batch(np.zeros((2, 4, 3)), [GT])


def test_needs_ground_truth():
    with pytest.raises(ValueError):
        dice(np.zeros((4, 3)), restrict(GT, {0}))


def test_batch_matches_singles():
    rng = np.random.default_rng(0)
    preds = rng.uniform(size=(3, 4, 3))
    r = dice_batch(preds, [GT] * 3)
    assert isinstance(r, DiceResult)
    for k in range(3):
        assert np.array_equal(r.per_sample[k], dice(preds[k], GT).per_sample[0])


@given(arrays(np.float64, (6, 3), elements=st.floats(0, 1)), arrays(np.int64, (1, 6), elements=st.integers(0, 2)))
def test_range_and_symmetry(pred, cmap):
    gt = encode_full(cmap, 3)
    r = dice(pred, gt)
    assert np.all((r.per_class >= 0) & (r.per_class <= 1))
    hard = numeric_encoding(encode_full(harden(pred)[None], 3))
    assert np.array_equal(dice(numeric_encoding(gt), encode_full(harden(pred)[None], 3)).per_class,
                          dice(hard, gt).per_class)
