import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mirrornet.dataset import (
    DatasetError,
    SampleRecord,
    SyntheticConfig,
    chi2_distance,
    compute_stats,
    decode_pnm,
    encode_pnm,
    generate_synthetic,
    load_pairs,
    preprocess,
    resize_nearest,
    rgb_histogram,
    split_by_group,
    write_dataset,
)


def rec(image, mask, group="g"):
    return SampleRecord(None, None, group, np.asarray(image, np.uint8), np.asarray(mask, np.uint8))


def flat_image(h, w, colour=(10, 20, 30)):
    img = np.empty((h, w, 3), np.uint8)
    img[:] = colour
    return img


def components(mask):
    """4-connected component count by flood fill."""
    seen = np.zeros_like(mask, bool)
    count = 0
    for y, x in zip(*np.nonzero(mask)):
        if seen[y, x]:
            continue
        count += 1
        stack = [(y, x)]
        seen[y, x] = True
        while stack:
            cy, cx = stack.pop()
            for ny, nx in ((cy + 1, cx), (cy - 1, cx), (cy, cx + 1), (cy, cx - 1)):
                if 0 <= ny < mask.shape[0] and 0 <= nx < mask.shape[1] and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
    return count


# ---------------------------------------------------------------- PNM and loading


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.booleans(), st.integers(0, 2**31 - 1))
def test_pnm_round_trip(h, w, rgb, seed):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, (h, w, 3) if rgb else (h, w)).astype(np.uint8)
    np.testing.assert_array_equal(decode_pnm(encode_pnm(arr)), arr)


def test_pnm_header_comments_and_errors():
    buf = b"P5\n# made by hand\n2 1\n255\n\x00\xff"
    np.testing.assert_array_equal(decode_pnm(buf), [[0, 255]])
    with pytest.raises(DatasetError, match="unsupported"):
        decode_pnm(b"P2\n1 1\n255\n0")
    with pytest.raises(DatasetError, match="truncated"):
        decode_pnm(b"P5\n2 2\n255\n\x00")
    with pytest.raises(DatasetError, match="8-bit"):
        decode_pnm(b"P5\n1 1\n65535\n\x00\x00")


def test_load_pairs_order_groups_and_binarisation(tmp_path):
    records = [rec(flat_image(4, 4), np.eye(4), group=g) for g in ("b", "a", "b")]
    write_dataset(records, tmp_path)
    (tmp_path / "x_9.ppm").write_bytes(encode_pnm(flat_image(4, 4)))
    (tmp_path / "x_9_mask.pgm").write_bytes(encode_pnm(np.full((4, 4), 127, np.uint8)))
    loaded = load_pairs(tmp_path)
    assert [r.stem for r in loaded] == ["a_0001", "b_0000", "b_0002", "x_9"]
    assert [r.group for r in loaded] == ["a", "b", "b", "x"]
    np.testing.assert_array_equal(loaded[0].mask, np.eye(4))
    assert not loaded[-1].mask.any()  # 127 is below the mirror threshold


def test_load_pairs_errors(tmp_path):
    (tmp_path / "lonely.ppm").write_bytes(encode_pnm(flat_image(2, 2)))
    with pytest.raises(DatasetError, match="lonely"):
        load_pairs(tmp_path)
    (tmp_path / "lonely_mask.pgm").write_bytes(encode_pnm(np.zeros((3, 3), np.uint8)))
    with pytest.raises(DatasetError, match="differ in size"):
        load_pairs(tmp_path)
    with pytest.raises(DatasetError, match="not a directory"):
        load_pairs(tmp_path / "missing")


# ---------------------------------------------------------------- preprocessing


def test_preprocess_shapes_ranges_and_nearest_mask():
    mask = np.zeros((8, 8), np.uint8)
    mask[:4] = 1
    img, m = preprocess(rec(flat_image(8, 8, (255, 0, 51)), mask), 4)
    assert img.shape == (3, 4, 4) and img.dtype == np.float32
    np.testing.assert_allclose(img[:, 0, 0], [1.0, 0.0, 0.2], atol=1e-6)
    assert set(np.unique(m)) == {0.0, 1.0}
    np.testing.assert_array_equal(m[0, :2], 1)
    np.testing.assert_array_equal(m[0, 2:], 0)


def test_flip_augmentation_moves_image_and_mask_together():
    mask = np.zeros((4, 4), np.uint8)
    mask[:, 0] = 1
    image = flat_image(4, 4)
    image[:, 0] = 255
    flipped = 0
    rng = np.random.default_rng(0)
    for _ in range(20):
        img, m = preprocess(rec(image, mask), 4, augment=True, rng=rng)
        np.testing.assert_array_equal(img[0] == 1.0, m[0] == 1.0)
        flipped += int(m[0, 0, -1] == 1)
    assert 0 < flipped < 20


def test_resize_nearest_identity():
    m = np.arange(12).reshape(3, 4)
    np.testing.assert_array_equal(resize_nearest(m, 3, 4), m)


# ---------------------------------------------------------------- splitting


def test_split_never_leaks_a_group():
    recs = []
    for g in range(12):
        recs += [rec(flat_image(2, 2), np.zeros((2, 2)), f"g{g}") for _ in range(1 + g % 4)]
    for seed in range(100):
        train, test = split_by_group(recs, 0.25, np.random.default_rng(seed))
        assert {r.group for r in train}.isdisjoint({r.group for r in test})
        assert len(train) + len(test) == len(recs) and train and test
        assert abs(len(test) - 0.25 * len(recs)) <= 0.5


def test_split_errors():
    one = [rec(flat_image(2, 2), np.zeros((2, 2)), "same") for _ in range(3)]
    with pytest.raises(DatasetError, match="2 groups"):
        split_by_group(one, 0.5, np.random.default_rng(0))
    with pytest.raises(DatasetError, match="group"):
        split_by_group([rec(flat_image(2, 2), np.zeros((2, 2)), "")], 0.5, np.random.default_rng(0))


# ---------------------------------------------------------------- statistics


def test_stats_hand_values():
    a = np.zeros((2, 2), np.uint8)
    a[0, 0] = 1
    b = np.zeros((2, 2), np.uint8)
    b[0] = 1
    stats = compute_stats([rec(flat_image(2, 2), a), rec(flat_image(2, 2), b)], area_bins=4)
    np.testing.assert_array_equal(stats.area_ratios, [0.25, 0.5])
    np.testing.assert_array_equal(stats.area_hist, [0, 1, 1, 0])
    np.testing.assert_array_equal(stats.location_map, [[1.0, 0.5], [0.0, 0.0]])


def test_chi2_identical_and_disjoint():
    h = rgb_histogram(np.array([[0, 0, 0], [255, 255, 255], [100, 100, 100]], np.uint8))
    assert chi2_distance(h, h) == 0.0
    g = rgb_histogram(np.array([[200, 0, 0]], np.uint8))
    assert chi2_distance(h, g) == 1.0


def test_chi2_through_stats():
    mask = np.zeros((4, 4), np.uint8)
    mask[:2] = 1
    same = compute_stats([rec(flat_image(4, 4), mask)])
    image = flat_image(4, 4)
    image[:2] = (250, 250, 250)
    split = compute_stats([rec(image, mask)])
    assert same.chi2.tolist() == [0.0] and split.chi2.tolist() == [1.0]
    empty = compute_stats([rec(image, np.zeros((4, 4)))])
    assert empty.chi2_skipped == 1 and len(empty.chi2) == 0


def test_location_map_resampled_to_requested_size():
    mask = np.zeros((4, 4), np.uint8)
    mask[:, :2] = 1
    stats = compute_stats([rec(flat_image(4, 4), mask)], map_size=2)
    np.testing.assert_array_equal(stats.location_map, [[1, 0], [1, 0]])


def test_stats_records_format():
    text = compute_stats([rec(flat_image(2, 2), np.eye(2))], area_bins=2).records()
    assert text.splitlines()[:3] == ["n_images=1", "chi2_skipped=0", "area_bin=0.00:0.50 count=0"]


# ---------------------------------------------------------------- synthetic scenes


def test_synthetic_is_deterministic_and_seed_sensitive():
    a = generate_synthetic(5, 32, seed=4)
    b = generate_synthetic(5, 32, seed=4)
    c = generate_synthetic(5, 32, seed=5)
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))
    assert not all(np.array_equal(x.image, y.image) for x, y in zip(a, c))


def test_synthetic_prefix_stability():
    short, long = generate_synthetic(3, 32, seed=1), generate_synthetic(6, 32, seed=1)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(short, long))


def test_synthetic_masks_in_range_and_connected():
    cfg = SyntheticConfig(area_range=(0.1, 0.3))
    for r in generate_synthetic(20, 48, seed=0, config=cfg):
        assert 0.1 <= r.mask.mean() <= 0.3
        assert components(r.mask) == 1
        assert r.image.dtype == np.uint8 and r.image.shape == (48, 48, 3)


def test_synthetic_mirror_content_differs_from_surroundings():
    # the reflected patch is a different histogram than the rest of the scene
    recs = generate_synthetic(10, 64, seed=2)
    stats = compute_stats(recs)
    assert stats.chi2_skipped == 0 and np.all(stats.chi2 > 0.05)


def test_synthetic_groups_and_bad_config():
    cfg = SyntheticConfig(shapes=("rect",), frame_styles=2)
    assert {r.group for r in generate_synthetic(12, 32, seed=0, config=cfg)} <= {"rect0", "rect1"}
    with pytest.raises(ValueError):
        generate_synthetic(0, 32)
