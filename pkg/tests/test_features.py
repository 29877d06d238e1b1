import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectag.features import (INVALID, LbpConfig, assemble_features, average_spectrum, describe_regions,
                              feature_matrix, lbp_code_map, lbp_histogram, riu2_code, sample_offsets,
                              write_feature_csv)
from spectag.imaging import ChannelStack
from spectag.superpixel import SuperpixelSegmentation


def stack(data, n_c=None):
    data = np.asarray(data, dtype=float)
    n_c = data.shape[2]
    return ChannelStack(data, tuple(float(500 + 10 * k) for k in range(n_c)))


def test_histogram_length_and_feature_lengths():
    assert LbpConfig().histogram_length == 54
    assert 10 + 18 + 26 == 54
    lab = np.zeros((40, 40), dtype=int)
    lab[:, 20:] = 1
    seg = SuperpixelSegmentation.from_labels(lab)
    rng = np.random.default_rng(0)
    for n_c, length in ((8, 440), (3, 165)):
        fs = assemble_features(stack(rng.uniform(0.2, 0.8, (40, 40, n_c))), seg)
        assert fs.matrix.shape == (2, length)


def test_sample_offsets():
    off = sample_offsets(1, 4)
    assert off.tolist() == [[0, 1], [-1, 0], [0, -1], [1, 0]]
    off = sample_offsets(2, 16)
    assert np.allclose(np.hypot(off[:, 0], off[:, 1]), 2)


@pytest.mark.parametrize("r,p", [(1, 8), (2, 16), (3, 24)])
def test_code_alphabet(rng, r, p):
    codes = lbp_code_map(rng.uniform(size=(60, 60)), r, p)
    valid = codes[codes != INVALID]
    assert set(np.unique(valid)) <= set(range(p + 2))
    # all P + 2 codes are reachable: enumerate every rotation class directly
    seen = set()
    for ones in range(p + 1):
        seen.add(int(riu2_code(np.array([1] * ones + [0] * (p - ones)))))
    seen.add(int(riu2_code(np.array([1, 0] * (p // 2)))))
    assert seen == set(range(p + 2))


def test_constant_grid_gives_code_p():
    codes = lbp_code_map(np.full((12, 12), 0.4), 1, 8)
    inner = codes[1:-1, 1:-1]
    assert np.all(inner == 8)
    assert np.all(codes[0] == INVALID) and np.all(codes[:, -1] == INVALID)


def test_hand_computed_codes():
    assert riu2_code(np.array([1, 0, 1, 0, 1, 0, 1, 0])) == 9
    assert riu2_code(np.array([1, 1, 1, 1, 0, 0, 0, 0])) == 4
    # centre 0.5; upper half above, lower half below -> four contiguous ones
    g = np.array([[0.9, 0.9, 0.9], [0.9, 0.5, 0.1], [0.1, 0.1, 0.1]])
    assert lbp_code_map(g, 1, 8)[1, 1] == 4
    # neighbours alternate around the centre
    g = np.array([[0.1, 0.9, 0.1], [0.9, 0.5, 0.9], [0.1, 0.9, 0.1]])
    assert lbp_code_map(g, 1, 4)[1, 1] == 4
    # diagonal samples interpolate between axis and corner pixels, giving a non-uniform pattern
    assert lbp_code_map(g, 1, 8)[1, 1] == 9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=4, max_size=32), st.integers(0, 100))
def test_rotation_invariance(bits, shift):
    bits = np.array(bits)
    assert riu2_code(bits) == riu2_code(np.roll(bits, shift % len(bits)))


def test_additive_and_scale_invariance(rng):
    g = rng.uniform(size=(30, 30))
    codes = lbp_code_map(g, 2, 16)
    assert np.array_equal(codes, lbp_code_map(g + 0.25, 2, 16))
    assert np.array_equal(codes, lbp_code_map(g * 3.0, 2, 16))


def test_mask_invalidates_neighbourhoods():
    mask = np.zeros((15, 15), dtype=bool)
    mask[7, 7] = True
    codes = lbp_code_map(np.full((15, 15), 0.3), 1, 8, mask)
    assert np.all(codes[6:9, 6:9] == INVALID)
    assert codes[4, 4] == 8


def test_histograms():
    codes = np.full((10, 10), 8, dtype=np.int16)
    codes[0] = INVALID
    h = lbp_histogram(codes, np.arange(100), 8)
    assert h.shape == (10,)
    assert h[8] == 1.0 and h.sum() == 1.0
    assert h.sum() == pytest.approx(1.0, abs=1e-9)


def test_pixel_checkerboard_under_bilinear_sampling():
    # diagonal samples interpolate to ~0.586: below a bright centre, above a dark one,
    # so bright pixels code 0 and dark pixels code 8
    checker = (np.indices((20, 20)).sum(axis=0) % 2).astype(float)
    cc = lbp_code_map(checker, 1, 8)
    hist = lbp_histogram(cc, np.arange(400), 8)
    assert hist[0] == pytest.approx(0.5) and hist[8] == pytest.approx(0.5)
    assert hist[9] == 0.0
    # with P = 4 only axis neighbours are sampled, all opposite to the centre
    cc4 = lbp_code_map(checker, 1, 4)
    h4 = lbp_histogram(cc4, np.arange(400), 4)
    assert h4[0] == pytest.approx(0.5) and h4[4] == pytest.approx(0.5)


def test_average_spectrum():
    sr = stack(np.full((4, 4, 5), 0.3))
    assert np.allclose(average_spectrum(sr, np.arange(16)), 1 / np.sqrt(5))
    data = np.zeros((1, 2, 4))
    data[0, 0, 0] = 1.0
    data[0, 1, 1] = 1.0
    sr = stack(data)
    assert np.allclose(average_spectrum(sr, np.array([0, 1])), np.array([0.5, 0.5, 0, 0]) / np.sqrt(0.5))
    assert np.allclose(average_spectrum(sr, np.array([1])), [0, 1, 0, 0])


def test_region_features(rng):
    lab = np.zeros((48, 48), dtype=int)
    lab[:, 24:] = 1
    lab[40:, :4] = 2  # tiny corner region: too few valid LBP pixels
    seg = SuperpixelSegmentation.from_labels(lab)
    sr = stack(rng.uniform(0.1, 0.9, size=(48, 48, 4)))
    fs = assemble_features(sr, seg)
    assert len(fs) == 2
    assert fs.degenerate == [seg.labels[45, 1]]
    x = fs.matrix.reshape(2, 4, 55)
    assert np.allclose(x[:, :, :10].sum(axis=2), 1)
    assert np.allclose(x[:, :, 10:28].sum(axis=2), 1)
    assert np.allclose(x[:, :, 28:54].sum(axis=2), 1)
    assert np.allclose(np.linalg.norm(x[:, :, 54], axis=1), 1)
    # positive scaling of reflectance leaves every feature unchanged
    scaled = assemble_features(stack(sr.data * 0.5), seg)
    assert np.allclose(scaled.matrix, fs.matrix, atol=1e-12)


def test_enumeration_order_independence(rng):
    lab = np.repeat(np.arange(4), 16).reshape(8, 8).T.repeat(4, 0).repeat(4, 1)  # 4 vertical strips
    data = rng.uniform(size=lab.shape + (3,))
    seg_a = SuperpixelSegmentation.from_labels(lab)
    seg_b = SuperpixelSegmentation.from_labels(lab[:, ::-1])
    a = assemble_features(stack(data), seg_a)
    b = assemble_features(stack(data[:, ::-1]), seg_b)
    # strip k in a is strip 3-k in b (mirrored); LBP codes mirror too, so only AS blocks compare
    as_a = a.matrix.reshape(len(a), 3, 55)[:, :, 54]
    as_b = b.matrix.reshape(len(b), 3, 55)[:, :, 54]
    assert np.allclose(np.sort(as_a, axis=0), np.sort(as_b, axis=0))


def test_masked_region_is_degenerate():
    lab = np.zeros((30, 30), dtype=int)
    lab[:, 15:] = 1
    seg = SuperpixelSegmentation.from_labels(lab)
    mask = np.zeros((30, 30), bool)
    mask[:, 15:] = True
    desc = describe_regions(stack(np.full((30, 30, 2), 0.5)), seg, mask)
    assert desc.degenerate == [1]
    assert desc.ids.tolist() == [0]


def test_channel_subset_renormalises_as(rng):
    lab = np.zeros((32, 32), dtype=int)
    seg = SuperpixelSegmentation.from_labels(lab)
    desc = describe_regions(stack(rng.uniform(0.2, 0.8, (32, 32, 8))), seg)
    sub = feature_matrix(desc, [7, 3, 0]).reshape(1, 3, 55)
    assert np.linalg.norm(sub[0, :, 54]) == pytest.approx(1.0)
    full = feature_matrix(desc).reshape(1, 8, 55)
    assert np.array_equal(sub[0, 0, :54], full[0, 7, :54])


def test_feature_csv(tmp_path):
    path = tmp_path / "f.csv"
    write_feature_csv(path, [("img", 3, np.array([0.5, 0.25]), "liver")])
    lines = path.read_text().splitlines()
    assert lines[0] == "image_id,spx_id,f0,f1,gt_label"
    assert lines[1] == "img,3,0.5,0.25,liver"
