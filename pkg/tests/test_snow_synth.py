import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from desnow.errors import InvalidInputError
from desnow.snow_synth import (DatasetManifest, SnowMaskSpec, SynthSample, center_crop, chromatic_map,
                               composite, entry_rngs, entry_seed, gen_snow_mask, make_dataset,
                               procedural_clean, random_crop_flip, regenerate_chroma, save_image,
                               split_counts, synthesize)

EMPTY = dict(flake_density=0.0, streak_count_range=(0, 0))


def test_empty_spec_gives_zero_mask():
    m = gen_snow_mask(32, 48, SnowMaskSpec(**EMPTY), np.random.default_rng(0))
    assert m.shape == (1, 32, 48) and not m.any()


def test_single_flake_is_disc_of_ones():
    spec = SnowMaskSpec(flake_count=1, flake_radius_range=(4.0, 4.0), opacity_range=(1.0, 1.0),
                        blur_sigma_range=(0.0, 0.0), streak_count_range=(0, 0))
    m = gen_snow_mask(40, 40, spec, np.random.default_rng(5))[0]
    # replay the draws: radius, sigma, opacity, cy, cx
    g = np.random.default_rng(5)
    g.uniform(4, 4), g.uniform(0, 0), g.uniform(1, 1)
    cy, cx = g.uniform(0, 40), g.uniform(0, 40)
    yy, xx = np.mgrid[0:40, 0:40]
    disc = ((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2) <= 16.0
    assert np.array_equal(m, disc.astype(np.float32))


def test_mask_deterministic_and_in_range():
    spec = SnowMaskSpec()
    a = gen_snow_mask(64, 64, spec, np.random.default_rng(7))
    b = gen_snow_mask(64, 64, spec, np.random.default_rng(7))
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1 and a.any()


def test_mask_rejects_small():
    with pytest.raises(InvalidInputError):
        gen_snow_mask(16, 64, SnowMaskSpec(), np.random.default_rng(0))


def test_streaks_only():
    spec = SnowMaskSpec(flake_density=0.0, streak_count_range=(3, 3))
    assert gen_snow_mask(64, 64, spec, np.random.default_rng(1)).any()


def test_spec_validation_and_kv_roundtrip():
    spec = SnowMaskSpec(flake_density=1.5, streak_count_range=(1, 2), seed=9)
    assert SnowMaskSpec.from_kv(spec.to_kv()) == spec
    with pytest.raises(InvalidInputError):
        SnowMaskSpec(opacity_range=(0.5, 1.2))
    with pytest.raises(InvalidInputError):
        SnowMaskSpec(flake_radius_range=(3.0, 1.0))


def test_chromatic_map():
    g = np.random.default_rng(2)
    assert np.array_equal(chromatic_map(32, 40, g, jitter=0.0), np.ones((3, 32, 40), np.float32))
    r = chromatic_map(32, 40, np.random.default_rng(3))
    assert r.shape == (3, 32, 40) and r.min() >= 0.9 and r.max() <= 1.0
    assert np.array_equal(r, chromatic_map(32, 40, np.random.default_rng(3)))


def test_composite_boundaries(rng):
    clean = rng.random((3, 32, 32)).astype(np.float32)
    chroma = chromatic_map(32, 32, rng)
    assert np.array_equal(composite(clean, np.zeros((1, 32, 32)), chroma), clean)
    assert np.array_equal(composite(clean, np.ones((1, 32, 32)), chroma), chroma)
    half = composite(np.zeros((3, 8, 8)), np.full((1, 8, 8), 0.5), np.ones((3, 8, 8)))
    assert np.array_equal(half, np.full((3, 8, 8), 0.5, np.float32))
    with pytest.raises(InvalidInputError):
        composite(clean, np.zeros((1, 16, 16)), chroma)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_composite_monotone_toward_r(c, r, m1, m2):
    lo, hi = sorted((m1, m2))
    a = composite(np.full((3, 1, 1), c), np.full((1, 1, 1), lo), np.full((3, 1, 1), r))[0, 0, 0]
    b = composite(np.full((3, 1, 1), c), np.full((1, 1, 1), hi), np.full((3, 1, 1), r))[0, 0, 0]
    assert abs(b - r) <= abs(a - r) + 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_support_containment(seed):
    s = entry_seed(11, seed)
    clean = procedural_clean(64, 64, entry_rngs(s)[0])
    sample = synthesize(clean, SnowMaskSpec(), s)
    changed = np.any(sample.snow != sample.clean, axis=0)
    assert not np.any(changed & (sample.mask[0] == 0))


def test_split_counts():
    assert split_counts(10, (0.8, 0.1, 0.1)) == (8, 1, 1)
    assert split_counts(232, (200 / 232, 32 / 232, 0.0)) == (200, 32, 0)
    assert sum(split_counts(7, (0.5, 0.3, 0.2))) == 7
    with pytest.raises(InvalidInputError):
        split_counts(10, (0.5, 0.5, 0.5))


def test_make_dataset_counts_and_determinism(tmp_path):
    a = make_dataset(tmp_path / "a", SnowMaskSpec(), 10, (0.8, 0.1, 0.1), size=48, master_seed=4)
    b = make_dataset(tmp_path / "b", SnowMaskSpec(), 10, (0.8, 0.1, 0.1), size=48, master_seed=4)
    assert [len(a[k]) for k in ("train", "val", "test")] == [8, 1, 1]
    for k in a:
        assert a[k].to_text() == b[k].to_text()
    for sub in ("clean", "snow", "mask"):
        files = sorted((tmp_path / "a" / sub).iterdir())
        assert len(files) == 10
        for f in files:
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
    assert (tmp_path / "a" / "spec.txt").is_file()


def test_roundtrip_satisfies_model_within_quantization(tmp_path):
    mans = make_dataset(tmp_path, SnowMaskSpec(), 12, (0.5, 0.25, 0.25), size=64, master_seed=2)
    for man in mans.values():
        loaded = DatasetManifest.load(tmp_path / f"{man.split}.txt")
        for i in range(len(loaded)):
            s = loaded.load_sample(i)
            r = regenerate_chroma(loaded.entries[i].seed, 64, 64)
            assert np.abs(composite(s.clean, s.mask, r) - s.snow).max() <= 1 / 255 + 1e-6


def test_make_dataset_from_clean_dir(tmp_path, caplog):
    src = tmp_path / "photos"
    src.mkdir()
    g = np.random.default_rng(0)
    for k in range(2):
        save_image(src / f"p{k}.png", g.random((3, 80, 72)))
    (src / "broken.png").write_bytes(b"not an image")
    with caplog.at_level("WARNING"):
        mans = make_dataset(tmp_path / "out", SnowMaskSpec(), 4, (0.5, 0.25, 0.25), clean_dir=src, size=64)
    assert "skipped 1" in caplog.text
    assert mans["train"].load_sample(0).clean.shape == (3, 64, 64)


def test_make_dataset_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(InvalidInputError):
        make_dataset(tmp_path / "out", SnowMaskSpec(), 2, clean_dir=tmp_path / "empty")


def test_manifest_validation(tmp_path):
    make_dataset(tmp_path, SnowMaskSpec(), 4, (0.5, 0.25, 0.25), size=48)
    text = (tmp_path / "train.txt").read_text()
    (tmp_path / "nohdr.txt").write_text("\n".join(text.splitlines()[1:]))
    with pytest.raises(InvalidInputError):
        DatasetManifest.load(tmp_path / "nohdr.txt")
    lines = text.splitlines()
    (tmp_path / "dup.txt").write_text("\n".join([lines[0], lines[1], lines[1]]) + "\n")
    with pytest.raises(InvalidInputError):
        DatasetManifest.load(tmp_path / "dup.txt")
    (tmp_path / "snow" / "000000.png").unlink()
    with pytest.raises(InvalidInputError):
        DatasetManifest.load(tmp_path / "train.txt")


def _sample(seed=0, size=64):
    s = entry_seed(0, seed)
    return synthesize(procedural_clean(size, size, entry_rngs(s)[0]), SnowMaskSpec(), s)


def test_crop_full_size_is_identity_up_to_flips():
    s = _sample()
    c = random_crop_flip(s, 64, np.random.default_rng(1))
    fh, fv = c.meta["flip"]
    ref = s.clean[:, ::-1 if fv else 1, ::-1 if fh else 1]
    assert np.array_equal(c.clean, ref)


def test_crop_keeps_planes_aligned():
    s = _sample(3)
    for k in range(5):
        c = random_crop_flip(s, 32, np.random.default_rng(k))
        assert c.snow.shape == c.clean.shape == (3, 32, 32) and c.mask.shape == (1, 32, 32)
        assert np.allclose(composite(c.clean, c.mask, c.chroma), c.snow, atol=1e-6)


def test_crop_reproducible_and_center():
    s = _sample(4)
    a = random_crop_flip(s, 40, np.random.default_rng(9))
    b = random_crop_flip(s, 40, np.random.default_rng(9))
    assert np.array_equal(a.snow, b.snow) and a.meta == b.meta
    c = center_crop(s, 32)
    assert np.array_equal(c.clean, s.clean[:, 16:48, 16:48])
    with pytest.raises(InvalidInputError):
        center_crop(s, 80)


def test_sample_shape_check():
    with pytest.raises(InvalidInputError):
        SynthSample(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)), np.zeros((1, 4, 4)))


def test_entry_seeds_unique():
    seeds = {entry_seed(0, i) for i in range(1000)}
    assert len(seeds) == 1000 and all(0 <= s < 2 ** 64 for s in seeds)
    assert math.isfinite(float(entry_seed(1, 0)))
