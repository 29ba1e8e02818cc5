import filecmp

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mskd.errors import ConfigError, DataError, InvalidInputError, SamplingError
from mskd.data import (Dataset, SynthConfig, clip_normalize_intensity, derive_binary_dataset,
                       generate_synthetic_dataset, load_dataset, read_tensor, sample_batch,
                       save_dataset, write_tensor)

TINY = SynthConfig(num_train=12, num_test=4, image_size=32, axis_range=(3.0, 6.0))


def test_tensor_file_round_trip(tmp_path):
    for arr in (np.arange(6, dtype=np.float32).reshape(2, 3), np.ones((2, 2), np.uint8),
                np.array([-3, 4], dtype=np.int64)):
        write_tensor(tmp_path / "t.mskt", arr)
        back = read_tensor(tmp_path / "t.mskt")
        assert back.dtype == arr.dtype and np.array_equal(back, arr)
    raw = (tmp_path / "t.mskt").read_bytes()
    assert raw[:4] == b"MSKT"
    (tmp_path / "short.mskt").write_bytes(raw[:-3])
    with pytest.raises(DataError):
        read_tensor(tmp_path / "short.mskt")


def test_generation_deterministic(tmp_path):
    a = generate_synthetic_dataset(TINY)
    b = generate_synthetic_dataset(TINY)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == []
    test = generate_synthetic_dataset(TINY, "test")
    assert not np.array_equal(test.images[0], a.images[0])


def test_single_organ_noise_free_intensities():
    cfg = SynthConfig(num_organs=1, noise_std=0.0, num_train=10, image_size=32,
                      axis_range=(3.0, 6.0))
    ds = generate_synthetic_dataset(cfg)
    lo, hi = cfg.bands()[0]
    fg = ds.images[ds.labels == 1]
    assert fg.size > 0
    assert fg.min() >= lo - 1e-4 and fg.max() <= hi + 1e-4


def test_default_corpus_has_every_label():
    ds = generate_synthetic_dataset(SynthConfig(num_test=0))
    assert set(np.unique(ds.labels).tolist()) == {0, 1, 2, 3}
    assert ds.images.shape == (200, 64, 64)


def test_config_errors():
    with pytest.raises(ConfigError):
        SynthConfig(image_size=32, axis_range=(6.0, 12.0))
    with pytest.raises(ConfigError):
        SynthConfig(noise_std=-1.0)
    with pytest.raises(ConfigError):
        SynthConfig(organ_bands=((0, 100), (50, 150), (200, 300)))
    with pytest.raises(ConfigError):
        SynthConfig(num_organs=0)


def test_canonical_regions_disjoint():
    for k in range(1, 7):
        cells = SynthConfig(num_organs=k, image_size=128, axis_range=(2.0, 4.0)).canonical_regions()
        occupied = np.zeros((128, 128), int)
        for r0, c0, size in cells:
            occupied[r0:r0 + size, c0:c0 + size] += 1
        assert occupied.max() == 1


def _multi(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return Dataset(images=np.zeros(labels.shape, np.float32), labels=labels,
                   kind="multi-organ", num_organs=2)


def test_derive_binary_examples():
    multi = _multi([[[0, 1, 2]]])
    assert derive_binary_dataset(multi, 1).labels.tolist() == [[[0, 1, 0]]]
    assert derive_binary_dataset(multi, 2).labels.tolist() == [[[0, 0, 1]]]
    assert derive_binary_dataset(multi, 2).kind == "binary-organ-2"
    with pytest.raises(InvalidInputError):
        derive_binary_dataset(multi, 3)


def test_derive_binary_disjoint_subsets(tmp_path):
    multi = generate_synthetic_dataset(SynthConfig(num_train=150, num_test=0, image_size=32,
                                                   axis_range=(3.0, 6.0)))
    parts = [derive_binary_dataset(multi, k, disjoint=True) for k in (1, 2, 3)]
    assert [len(p) for p in parts] == [50, 50, 50]
    sources = [set(p.sources) for p in parts]
    assert not (sources[0] & sources[1] or sources[0] & sources[2] or sources[1] & sources[2])


def test_binary_union_reconstructs_support():
    multi = generate_synthetic_dataset(TINY)
    union = np.zeros_like(multi.labels, dtype=bool)
    for k in (1, 2, 3):
        union |= derive_binary_dataset(multi, k).labels.astype(bool)
    assert np.array_equal(union, multi.labels > 0)


def test_dataset_directory_round_trip(tmp_path):
    multi = generate_synthetic_dataset(TINY)
    binary = derive_binary_dataset(multi, 2)
    save_dataset(binary, tmp_path / "b")
    back = load_dataset(tmp_path / "b")
    assert back.kind == "binary-organ-2" and back.organ == 2
    assert np.array_equal(back.images, binary.images)
    assert np.array_equal(back.labels, binary.labels)
    assert back.annotated == binary.annotated and back.sources == binary.sources


def test_missing_file_is_data_error(tmp_path):
    save_dataset(generate_synthetic_dataset(TINY), tmp_path / "d")
    (tmp_path / "d" / "lbl_0003.mskt").unlink()
    with pytest.raises(DataError):
        load_dataset(tmp_path / "d")


def test_clip_normalize_examples():
    assert clip_normalize_intensity(np.array([-325.0, 325.0, 0.0])).tolist() == [-1, 1, 0]
    assert clip_normalize_intensity(np.array([10.0, 30.0, 20.0]), 10, 30).tolist() == [-1, 1, 0]
    with pytest.raises(ConfigError):
        clip_normalize_intensity(np.zeros(2), 5, 5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_clip_normalize_range(values):
    out = clip_normalize_intensity(np.array(values))
    assert out.min() >= -1 and out.max() <= 1


def test_sample_batch_default_fraction():
    flags = np.array([True] * 3 + [False] * 97)
    rng = np.random.default_rng(0)
    for _ in range(200):
        idx = sample_batch(flags, 4, 0.33, rng)
        assert len(idx) == 4 and flags[idx].sum() >= 2


def test_sample_batch_deterministic_and_uniform_case():
    flags = np.zeros(10, bool)
    a = sample_batch(flags, 5, 0.0, np.random.default_rng([1, 2]))
    b = sample_batch(flags, 5, 0.0, np.random.default_rng([1, 2]))
    assert np.array_equal(a, b)
    assert sample_batch(np.ones(3, bool), 4, 1.0, np.random.default_rng(0)).shape == (4,)


def test_sample_batch_errors():
    with pytest.raises(SamplingError):
        sample_batch(np.zeros(5, bool), 4, 0.33, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        sample_batch(np.ones(5, bool), 4, 1.5, np.random.default_rng(0))
