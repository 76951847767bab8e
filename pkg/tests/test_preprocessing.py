import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egoaction.dataset_io import DatasetManifest, LabelMap, VideoRecord, loso_splits
from egoaction.preprocessing import (CropConfig, DatasetStats, RunningStats, central_crop,
                                     compute_dataset_stats, crop_offset, make_splices,
                                     preprocess_batch, preprocess_frame, random_crop, read_tensor,
                                     resize_bilinear, write_tensor)

from . import oracles


def coords(h, w):
    # pixel (y, x) encodes its own position, so a crop tells where it came from
    yy, xx = np.mgrid[0:h, 0:w]
    return np.stack([yy, xx], axis=-1).astype(float)


# -- crops ----------------------------------------------------------------------

def test_central_crop_landscape():
    out = central_crop(coords(480, 640), 480, 480)
    assert out.shape[:2] == (480, 480)
    assert out[0, 0, 1] == 80 and out[0, -1, 1] == 559
    assert out[0, 0, 0] == 0 and out[-1, 0, 0] == 479


def test_central_crop_identity_and_odd_margin():
    img = coords(7, 9)
    np.testing.assert_array_equal(central_crop(img, 9, 7), img)
    out = central_crop(coords(5, 5), 2, 2)
    assert sorted(set(out[..., 0].ravel())) == [1, 2]
    assert sorted(set(out[..., 1].ravel())) == [1, 2]


def test_central_crop_too_large():
    with pytest.raises(ValueError):
        central_crop(np.zeros((10, 10)), 11, 5)


def test_random_crop_rules():
    img = np.random.default_rng(0).random((12, 12))
    for seed in range(5):
        assert random_crop(img, 12, np.random.default_rng(seed))[1] == (0, 0)
    a = [random_crop(img, 5, np.random.default_rng(3))[1] for _ in range(2)]
    assert a[0] == a[1]
    assert crop_offset((300, 300), 224) == (38, 38)
    with pytest.raises(ValueError):
        crop_offset((10, 10), 11)


def test_crop_config_rejects_oversized_crop():
    with pytest.raises(ValueError):
        CropConfig(40, 40, 48, 48)


# -- resize ---------------------------------------------------------------------

def test_resize_same_size_and_constant():
    img = np.random.default_rng(1).random((6, 8, 3))
    np.testing.assert_allclose(resize_bilinear(img, 8, 6), img, atol=1e-6)
    np.testing.assert_allclose(resize_bilinear(np.full((5, 7), 0.3), 11, 4), 0.3, atol=1e-12)


def test_resize_checkerboard_matches_oracle():
    cb = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(resize_bilinear(cb, 4, 4), oracles.bilinear_resize(cb, 4, 4),
                               atol=1e-12)


def test_resize_random_matches_oracle_and_channel_first():
    img = np.random.default_rng(2).random((5, 7, 2))
    ref = oracles.bilinear_resize(img, 9, 4)
    np.testing.assert_allclose(resize_bilinear(img, 9, 4), ref, atol=1e-12)
    batch = img.transpose(2, 0, 1)[None]
    np.testing.assert_allclose(resize_bilinear(batch, 9, 4)[0], ref.transpose(2, 0, 1),
                               atol=1e-12)


# -- statistics --------------------------------------------------------------------

def stats_manifest(frames_by_video):
    videos = [VideoRecord(f"v{i}", f"S{i % 2}", [f"v{i}/{j}" for j in range(len(fr))],
                          [0] * len(fr)) for i, fr in enumerate(frames_by_video)]
    table = {f"v{i}/{j}": f for i, fr in enumerate(frames_by_video) for j, f in enumerate(fr)}
    return DatasetManifest(videos, LabelMap(["a", "b"]), "s"), lambda p: table[str(p)]


def test_stats_constant_frames():
    m, load = stats_manifest([[np.full((4, 4, 3), 0.5)] * 2])
    s = compute_dataset_stats(m, loader=load)
    np.testing.assert_allclose(s.mean, 0.5)
    np.testing.assert_allclose(s.var, 0.0, atol=1e-15)


def test_stats_zero_and_one():
    m, load = stats_manifest([[np.zeros((3, 3, 3)), np.ones((3, 3, 3))]])
    s = compute_dataset_stats(m, loader=load)
    np.testing.assert_allclose(s.mean, 0.5)
    np.testing.assert_allclose(s.var, 0.25)


def test_stats_use_training_videos_only():
    m, load = stats_manifest([[np.zeros((2, 2, 1))], [np.ones((2, 2, 1))]])
    split = loso_splits(m)[0]  # holds out S0, i.e. video v0
    np.testing.assert_allclose(compute_dataset_stats(m, split, loader=load).mean, 1.0)


def test_stats_match_two_pass_oracle():
    rng = np.random.default_rng(3)
    frames = [[rng.random((3, 4, 3)) * rng.uniform(0.5, 3) for _ in range(3)] for _ in range(3)]
    m, load = stats_manifest(frames)
    s = compute_dataset_stats(m, loader=load)
    pixels = [tuple(p) for fr in frames for f in fr for p in f.reshape(-1, 3)]
    mean, var = oracles.two_pass_stats(pixels)
    np.testing.assert_allclose(s.mean, mean, rtol=1e-12)
    np.testing.assert_allclose(s.var, var, rtol=1e-10)
    assert s.count == len(pixels)


@given(st.lists(st.integers(0, 40), min_size=1, max_size=6), st.integers(0, 2 ** 16))
@settings(max_examples=50, deadline=None)
def test_running_stats_merge_equals_pooled(sizes, seed):
    rng = np.random.default_rng(seed)
    chunks = [rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 3), (n, 2)) for n in sizes]
    pooled = np.concatenate(chunks)
    if len(pooled) == 0:
        return
    merged = RunningStats(2)
    for c in chunks:
        merged.merge(RunningStats(2).update(c))
    r = merged.result()
    np.testing.assert_allclose(r.mean, pooled.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(r.var, pooled.var(axis=0), atol=1e-9)


def test_stats_hash_and_json():
    s = DatasetStats(np.array([0.1, 0.2]), np.array([0.3, 0.4]), 7)
    back = DatasetStats.from_json(s.to_json())
    assert back.hash() == s.hash() and back.count == 7
    assert DatasetStats(s.mean, s.var + 1e-9).hash() != s.hash()


# -- splices -------------------------------------------------------------------------

def test_eval_tiling_len30():
    sp = make_splices(np.zeros(30, int), 11, "eval")
    assert [s.frame_indices[0] for s in sp] == [0, 11, 19]
    assert sp[-1].frame_indices == tuple(range(19, 30))


def test_train_splice_clamps_at_start():
    sp = make_splices(np.arange(20) % 3, 11, "train")
    assert len(sp) == 20
    assert list(sp[0].frame_indices) == [0, 0, 0, 0, 0, 0, 1, 2, 3, 4, 5]
    assert sp[7].label == 7 % 3
    assert sp[19].frame_indices[-1] == 19


def test_single_eval_splice_and_short_video():
    assert len(make_splices(np.zeros(11, int), 11, "eval")) == 1
    sp = make_splices(np.zeros(4, int), 5, "eval")
    assert len(sp) == 1 and sp[0].frame_indices == (0, 1, 2, 3, 3)


def test_eval_majority_label_ties_to_lowest():
    labels = [2] * 5 + [1] * 5 + [0]
    assert make_splices(labels, 11, "eval")[0].label == 1


@pytest.mark.parametrize("W", [0, 4])
def test_splice_length_must_be_odd(W):
    with pytest.raises(ValueError):
        make_splices(np.zeros(10, int), W)


@given(st.integers(1, 80), st.sampled_from([1, 3, 5, 11]))
@settings(max_examples=60, deadline=None)
def test_eval_tiles_cover_every_frame(n, W):
    sp = make_splices(np.zeros(n, int), W, "eval")
    covered = set()
    for s in sp:
        assert s.W == W
        covered |= set(s.frame_indices)
    assert covered == set(range(n))


# -- frame chain ------------------------------------------------------------------------

def test_preprocess_mean_equal_constant_is_zero():
    cfg = CropConfig(20, 20, 16, 24)
    stats = DatasetStats(np.array([0.2, 0.4, 0.6]), np.array([0.1, 0.1, 0.1]))
    img = np.broadcast_to(np.array([0.2, 0.4, 0.6]), (30, 40, 3))
    out = preprocess_frame(img, cfg, stats)
    assert out.shape == (3, 24, 24) and out.dtype == np.float32
    assert np.abs(out).max() < 1e-6


def test_preprocess_seeded_and_normalised():
    cfg = CropConfig(32, 32, 20, 28)
    img = np.random.default_rng(4).random((40, 48, 3))
    a = preprocess_frame(img, cfg, None, rng=np.random.default_rng(5))
    b = preprocess_frame(img, cfg, None, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    sq = img[:, 4:44]
    flat = sq.reshape(-1, 3)
    stats = DatasetStats(flat.mean(0), flat.var(0))
    full = preprocess_frame(sq, CropConfig(40, 40, 40, 40), stats)
    np.testing.assert_allclose(full.mean(axis=(1, 2)), 0, atol=1e-5)
    np.testing.assert_allclose(full.var(axis=(1, 2)), 1, atol=1e-4)


def test_no_resize_keeps_crop_size():
    cfg = CropConfig(32, 32, 20, 28)
    assert preprocess_frame(np.zeros((32, 32, 3)), cfg, None, resize=False).shape == (3, 20, 20)


def test_batch_matches_single_frame_chain():
    rng = np.random.default_rng(6)
    cfg = CropConfig(24, 24, 16, 20)
    stats = DatasetStats(np.array([0.5, 0.4, 0.3]), np.array([0.05, 0.06, 0.07]))
    frames = rng.random((3, 24, 24, 3)).astype(np.float32)
    offsets = np.array([[0, 0], [8, 3], [4, 8]])
    batch = preprocess_batch(frames, cfg, stats, offsets)
    for f, off, b in zip(frames, offsets, batch):
        np.testing.assert_allclose(preprocess_frame(f, cfg, stats, offset=tuple(off)), b,
                                   atol=1e-5)


def test_tensor_cache_invalidation(tmp_path):
    arr = np.random.default_rng(7).random((2, 3, 4)).astype(np.float32)
    write_tensor(tmp_path / "t", arr, stats_hash="abc")
    np.testing.assert_array_equal(read_tensor(tmp_path / "t", "abc"), arr)
    assert read_tensor(tmp_path / "t", "other") is None
    assert read_tensor(tmp_path / "missing") is None
