import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from compatseg.labels import (ClassSet, LabelError, LabelField, State, complete, default_p, encode_full,
                              is_ground_truth, masks, numeric_encoding, restrict)

N, P, U = State.NEGATIVE, State.POSITIVE, State.UNKNOWN


@st.composite
def gt_and_keep(draw, max_side=5):
    m = draw(st.integers(3, 5))
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    cmap = draw(arrays(np.int64, (h, w), elements=st.integers(0, m - 1)))
    keep = draw(st.sets(st.integers(0, m - 1), min_size=1, max_size=m - 1))
    return encode_full(cmap, m), ClassSet.of(keep, m)


class TestEncodeFull:
    def test_single_pixel(self):
        gt = encode_full(np.array([[1]]), 3)
        assert gt.states.tolist() == [[N, P, N]]

    def test_uniform_map(self):
        gt = encode_full(np.zeros((2, 2), dtype=int), 4)
        assert gt.states.tolist() == [[P, N, N, N]] * 4

    def test_two_pixels(self):
        gt = encode_full(np.array([[0, 2]]), 3)
        assert gt.states.tolist() == [[P, N, N], [N, N, P]]
        assert is_ground_truth(gt)

    def test_out_of_range(self):
        with pytest.raises(LabelError):
            encode_full(np.array([[3]]), 3)
        with pytest.raises(LabelError):
            encode_full(np.array([[-1]]), 3)


class TestRestrict:
    def test_kept_pixel_stays_one_hot(self):
        gt = encode_full(np.array([[1]]), 4)
        assert restrict(gt, {1}).states.tolist() == [[N, P, N, N]]

    def test_unkept_pixel(self):
        gt = encode_full(np.array([[1]]), 4)
        label = restrict(gt, {0})
        assert label.states.tolist() == [[N, U, U, U]]
        assert np.allclose(numeric_encoding(label), [[0, 1 / 3, 1 / 3, 1 / 3]])

    def test_all_but_one_class_completes_to_gt(self):
        gt = encode_full(np.array([[0, 1], [2, 3]]), 4)
        assert restrict(gt, {0, 1, 2}) == gt
        assert restrict(gt, {1, 2, 3}) == gt

    def test_rejects_bad_keep(self):
        gt = encode_full(np.array([[0]]), 3)
        with pytest.raises(LabelError):
            restrict(gt, {3})
        with pytest.raises(LabelError):
            restrict(gt, set())

    @given(gt_and_keep())
    def test_counting(self, case):
        gt, keep = case
        label = restrict(gt, keep)
        kept_pixels = np.isin(gt.class_map(), keep.indices()).sum()
        if len(keep) == gt.m - 1:
            kept_pixels = gt.num_pixels
        assert (label.states == P).sum() == kept_pixels

    @given(gt_and_keep())
    def test_never_contradicts_gt(self, case):
        gt, keep = case
        label = restrict(gt, keep)
        known = label.states != U
        assert np.array_equal(label.states[known], gt.states[known])

    @given(gt_and_keep(), st.data())
    def test_monotone_in_keep(self, case, data):
        gt, small = case
        extra = data.draw(st.sets(st.integers(0, gt.m - 1)))
        big = ClassSet.of(set(small) | extra, gt.m)
        if len(big) == gt.m:
            return
        a, b = restrict(gt, small), restrict(gt, big)
        known = a.states != U
        assert np.array_equal(a.states[known], b.states[known])

    @given(gt_and_keep())
    def test_complete_resolves_forced_pixels(self, case):
        gt, keep = case
        done = complete(restrict(gt, keep))
        known = done.states != U
        assert np.array_equal(done.states[known], gt.states[known])
        if len(keep) == gt.m - 2:
            assert not (done.states == U).any() or (done.states == U).sum(axis=1).max() == 2


class TestNumericEncoding:
    def test_substitution(self):
        label = LabelField(1, 1, np.array([[U, U, N, U]]), ClassSet.of({2}, 4))
        assert numeric_encoding(label, 0.5).tolist() == [[0.5, 0.5, 0.0, 0.5]]

    def test_one_hot_unchanged(self):
        gt = encode_full(np.array([[2]]), 3)
        for p in (0.1, 0.5, 0.9):
            assert numeric_encoding(gt, p).tolist() == [[0.0, 0.0, 1.0]]

    def test_default_p_sums_to_one(self):
        gt = encode_full(np.array([[3, 0]]), 4)
        label = restrict(gt, {0})
        assert default_p(label) == pytest.approx(1 / 3)
        assert numeric_encoding(label)[0].sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_open_interval(self, p):
        label = restrict(encode_full(np.array([[1]]), 3), {0})
        with pytest.raises(LabelError):
            numeric_encoding(label, p)


class TestMasks:
    def test_full_field_has_no_unknown(self):
        _, _, unk = masks(encode_full(np.array([[0, 1, 2]]), 3))
        assert not unk.any()

    def test_kept_pixel(self):
        pos, _, _ = masks(restrict(encode_full(np.array([[2]]), 4), {2}))
        assert pos.tolist() == [[False, False, True, False]]

    @given(gt_and_keep())
    def test_partition(self, case):
        pos, neg, unk = masks(restrict(*case))
        total = pos.astype(int) + neg + unk
        assert np.all(total == 1)


class TestLabelField:
    def test_two_positives_rejected(self):
        with pytest.raises(LabelError):
            LabelField(1, 1, np.array([[P, P, N]]), ClassSet.full(3))

    def test_unknown_next_to_positive_rejected(self):
        with pytest.raises(LabelError):
            LabelField(1, 1, np.array([[P, U, N]]), ClassSet.of({0, 2}, 3))

    def test_unknown_in_known_column_rejected(self):
        with pytest.raises(LabelError):
            LabelField(1, 1, np.array([[U, U, N]]), ClassSet.of({0, 2}, 3))

    def test_states_read_only(self):
        gt = encode_full(np.array([[0]]), 3)
        with pytest.raises(ValueError):
            gt.states[0, 0] = 2

    @given(gt_and_keep())
    def test_bytes_round_trip(self, case):
        label = restrict(*case)
        back = LabelField.from_bytes(label.to_bytes())
        assert np.array_equal(back.states, label.states)
        assert (back.height, back.width, back.m) == (label.height, label.width, label.m)

    def test_byte_layout(self):
        label = restrict(encode_full(np.array([[1, 0]]), 3), {0})
        data = label.to_bytes()
        assert data[:12] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert list(data[12:]) == [0, 2, 2, 1, 0, 0]
