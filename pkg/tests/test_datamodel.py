import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from hsfusion import datamodel as dm
from hsfusion.errors import FormatError, LabelRangeError, NotFound, RangeError, SizeError


def test_fmb_palette():
    p = dm.FMB_PALETTE
    assert p.n == 14
    assert p.thermal_ids == frozenset({4, 8, 9, 10, 11, 12})
    assert p.names[4] == "lamp" and p.names[13] == "pole"
    assert dm.LabelPalette.from_dict(p.to_dict()) == p


def test_palette_rejects_thermal_id_out_of_range():
    with pytest.raises(LabelRangeError):
        dm.LabelPalette(names=("a", "b"), thermal_ids={2})


def test_image_pair_shape_checks():
    ir, vis = np.zeros((4, 5, 1)), np.zeros((4, 5, 3))
    dm.ImagePair("x", ir, vis)
    with pytest.raises(FormatError):
        dm.ImagePair("x", np.zeros((4, 5, 3)), vis)
    with pytest.raises(SizeError):
        dm.ImagePair("x", np.zeros((4, 6, 1)), vis)
    with pytest.raises(SizeError):
        dm.ImagePair("x", ir, vis, label=np.zeros((5, 4), int))


def test_signed_endpoints_and_range():
    assert dm.to_signed(np.array([0.0, 1.0, 0.5])).tolist() == [-1.0, 1.0, 0.0]
    assert dm.from_signed(np.array([-1.0, 1.0, 0.0])).tolist() == [0.0, 1.0, 0.5]
    with pytest.raises(RangeError):
        dm.to_signed(np.array([1.5]))
    with pytest.raises(RangeError):
        dm.from_signed(np.array([-1.2]))
    t = dm.to_signed(torch.tensor([0.25]))
    assert torch.is_tensor(t) and float(t) == -0.5


def test_signed_round_trip_1000():
    v = np.random.default_rng(0).random(1000)
    np.testing.assert_allclose(dm.from_signed(dm.to_signed(v)), v, atol=1e-7)
    s = np.random.default_rng(1).uniform(-1, 1, 1000)
    np.testing.assert_allclose(dm.to_signed(dm.from_signed(s)), s, atol=1e-7)


def test_onehot_definition():
    seg = dm.onehot(np.array([[3]]), 4)
    assert seg.normalized
    assert seg.scores[0, 0].tolist() == [0, 0, 0, 1]
    with pytest.raises(LabelRangeError):
        dm.onehot(np.array([[4]]), 4)
    with pytest.raises(LabelRangeError):
        dm.onehot(np.array([[-1]]), 4)


def test_onehot_fmb_sums_to_one():
    label = dm.synth_scene(3).label
    seg = dm.onehot(label, 14)
    np.testing.assert_allclose(seg.scores.sum(-1), 1.0, atol=1e-5)
    np.testing.assert_allclose(seg.probs().sum(-1), 1.0, atol=1e-5)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_onehot_argmax_inverse_exhaustive_small(n):
    # every 2x2 map over n classes
    for cells in itertools.product(range(n), repeat=4):
        label = np.array(cells).reshape(2, 2)
        np.testing.assert_array_equal(dm.argmax_decode(dm.onehot(label, n)), label)


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, (6, 7), elements=st.integers(0, 13)))
def test_onehot_argmax_inverse_random_fmb(label):
    np.testing.assert_array_equal(dm.argmax_decode(dm.onehot(label, 14)), label)


def test_argmax_tie_rule_and_definition():
    uniform = dm.SegMap(np.full((3, 3, 3), 1 / 3))
    assert (dm.argmax_decode(uniform) == 0).all()
    seg = dm.SegMap(np.array([[[0.1, 0.7, 0.2]]]))
    assert dm.argmax_decode(seg).tolist() == [[1]]


def test_segmap_probs_normalises_raw_scores():
    s = dm.SegMap(np.array([[[1.0, 3.0], [0.0, 0.0]]]))
    np.testing.assert_allclose(s.probs(), [[[0.25, 0.75], [0.5, 0.5]]])


def test_synth_deterministic_and_in_range():
    a, b = dm.synth_scene(0), dm.synth_scene(0)
    for k in ("ir", "vis", "label"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    assert a.label.min() >= 0 and a.label.max() < 14
    assert a.ir.shape == (128, 128, 1) and a.vis.shape == (128, 128, 3)
    assert 0 <= a.ir.min() and a.ir.max() <= 1 and 0 <= a.vis.min() and a.vis.max() <= 1
    assert not np.array_equal(dm.synth_scene(1).label, a.label)


def test_synth_rejects_bad_size():
    with pytest.raises(SizeError):
        dm.synth_scene(0, (100, 128), stride=8)


def test_synth_thermal_brighter_in_ir_100_seeds():
    for seed in range(100):
        p = dm.synth_scene(seed, (64, 64))
        hot = np.isin(p.label, sorted(dm.THERMAL_IDS))
        assert hot.any() and (~hot).any()
        assert p.ir[hot].mean() > p.ir[~hot].mean()
        # and dim in the visible image
        y = p.vis.mean(-1)
        assert y[hot].mean() < y[~hot].mean()


def _write_trio(root, role, pair):
    dm.save_pair(root, role, pair)
    return dm.DatasetSplit.discover(root, role)


def test_save_load_round_trip(tmp_path):
    pair = dm.synth_scene(5, (32, 32))
    pair.id = "00001"
    split = _write_trio(tmp_path, "train", pair)
    assert split.ids == ["00001"] and split.has_labels()
    back = dm.load_pair(split, "00001")
    np.testing.assert_array_equal(back.ir, pair.ir)
    np.testing.assert_array_equal(back.vis, pair.vis)
    np.testing.assert_array_equal(back.label, pair.label)


def test_discover_sorted(tmp_path):
    for i in ("b", "a", "c"):
        p = dm.synth_scene(0, (16, 16))
        p.id = i
        dm.save_pair(tmp_path, "test", p)
    assert dm.DatasetSplit.discover(tmp_path, "test").ids == ["a", "b", "c"]
    with pytest.raises(NotFound):
        dm.DatasetSplit.discover(tmp_path, "train")


def test_load_errors(tmp_path):
    pair = dm.synth_scene(5, (16, 16))
    pair.id = "x"
    split = _write_trio(tmp_path, "train", pair)
    with pytest.raises(NotFound):
        dm.load_pair(split, "nope")

    Image.fromarray(np.zeros((16, 16), np.uint8)).save(split.path(dm.VIS_DIR, "x"))
    with pytest.raises(FormatError):
        dm.load_pair(split, "x")

    dm.save_pair(tmp_path, "train", pair)
    bad = pair.label.astype(np.uint8).copy()
    bad[0, 0] = 14
    Image.fromarray(bad).save(split.path(dm.LABEL_DIR, "x"))
    with pytest.raises(LabelRangeError):
        dm.load_pair(split, "x")

    split.path(dm.LABEL_DIR, "x").unlink()
    with pytest.raises(NotFound):
        dm.load_pair(split, "x")


def test_test_split_label_optional(tmp_path):
    pair = dm.synth_scene(6, (16, 16))
    pair.id = "y"
    pair.label = None
    split = _write_trio(tmp_path, "test", pair)
    assert dm.load_pair(split, "y").label is None
