import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image
from scipy import ndimage

from passseg import data
from passseg.data import DomainSpec
from passseg.errors import ConfigError, DataError


def _write_pairs(root, n, size=512, masks=None):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    rng = np.random.default_rng(0)
    for i in range(n):
        Image.fromarray(rng.integers(0, 256, (size, size), dtype=np.uint8)).save(root / "images" / f"s{i}.png")
        m = np.zeros((size, size), np.uint8) if masks is None else masks
        Image.fromarray(m).save(root / "masks" / f"s{i}.png")


def test_load_folder_resizes(tmp_path):
    _write_pairs(tmp_path, 10)
    ds = data.load_folder(tmp_path / "images", tmp_path / "masks", resolution=64)
    assert len(ds) == 10
    assert ds.images.shape == (10, 64, 64, 1) and ds.masks.shape == (10, 64, 64, 1)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert not ds.masks.any()  # all-black mask files


def test_load_folder_rgb_and_threshold(tmp_path, caplog):
    m = np.zeros((32, 32), np.uint8)
    m[:16] = 200
    m[16:, :4] = 40
    _write_pairs(tmp_path, 2, size=32, masks=m)
    with caplog.at_level(logging.WARNING):
        ds = data.load_folder(tmp_path / "images", tmp_path / "masks", resolution=16, channels=3)
    assert "not binary" in caplog.text
    assert ds.images.shape == (2, 16, 16, 3)
    assert set(np.unique(ds.masks)) == {0.0, 1.0}
    assert ds.masks[0, :8].all() and not ds.masks[0, 8:].any()


def test_unmatched_stems_listed(tmp_path):
    _write_pairs(tmp_path, 2, size=8)
    (tmp_path / "masks" / "s1.png").rename(tmp_path / "masks" / "extra.png")
    with pytest.raises(DataError, match="extra.*s1|s1.*extra"):
        data.load_folder(tmp_path / "images", tmp_path / "masks")
    with pytest.raises(DataError):
        data.load_folder(tmp_path / "nope", tmp_path / "masks")


def test_export_roundtrip(tmp_path):
    ds = data.generate_synthetic_domain(DomainSpec("B", resolution=32), 6, seed=3)
    ds = data.make_splits(ds, 3, 1, 2, seed=1)
    data.export_dataset(ds, tmp_path / "B")
    back = data.load_dataset_dir(tmp_path / "B")
    np.testing.assert_array_equal(back.masks, ds.masks)
    np.testing.assert_allclose(back.images, ds.images, atol=0.5 / 255 + 1e-6)
    assert back.split == ds.split and back.name == "B"
    # a second pass through disk is exact
    data.export_dataset(back, tmp_path / "B2")
    again = data.load_dataset_dir(tmp_path / "B2")
    assert again.images.tobytes() == back.images.tobytes()


def test_mcu_split():
    ds = data.generate_synthetic_domain(DomainSpec(resolution=16), 138, seed=0)
    s = data.make_splits(ds, 93, 10, 35, seed=0)
    parts = [s.indices(p) for p in ("train", "val", "test")]
    assert [len(p) for p in parts] == [93, 10, 35]
    assert sorted(sum(parts, [])) == list(range(138))
    assert s.split == data.make_splits(ds, 93, 10, 35, seed=0).split
    assert s.split != data.make_splits(ds, 93, 10, 35, seed=1).split
    with pytest.raises(ConfigError):
        data.make_splits(ds, 93, 10, 34)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.data())
def test_splits_disjoint_and_covering(n, draw):
    a = draw.draw(st.integers(0, n))
    b = draw.draw(st.integers(0, n - a))
    ds = data.Dataset("x", np.zeros((n, 2, 2, 1), np.float32), np.zeros((n, 2, 2, 1), np.float32))
    s = data.make_splits(ds, a, b, n - a - b, seed=draw.draw(st.integers(0, 99)))
    idx = s.indices("train") + s.indices("val") + s.indices("test")
    assert sorted(idx) == list(range(n))


def test_lungs_two_components_and_binary():
    ds = data.generate_synthetic_domain(DomainSpec(resolution=64), 16, seed=0)
    for m in ds.masks:
        assert set(np.unique(m)) <= {0.0, 1.0}
        assert ndimage.label(m[..., 0])[1] == 2
    assert ds.images.min() >= 0 and ds.images.max() <= 1


@pytest.mark.parametrize("family", ["lungs", "vessels"])
def test_foreground_fraction_in_declared_range(family):
    lo, hi = data.FOREGROUND_RANGE[family]
    ds = data.generate_synthetic_domain(DomainSpec(shape_family=family, resolution=64), 200, seed=7)
    frac = ds.masks.mean(axis=(1, 2, 3))
    assert frac.min() >= lo and frac.max() <= hi


def test_vessels_stroke_width():
    ds = data.generate_synthetic_domain(DomainSpec(shape_family="vessels", resolution=64), 8, seed=2)
    for m in ds.masks[..., 0].astype(bool):
        # no 4x4 block is entirely foreground, so strokes stay at most three pixels wide
        assert not ndimage.binary_erosion(m, np.ones((4, 4))).any()
        assert ndimage.label(m)[1] == 1


def test_intensity_offset_shift():
    a = data.generate_synthetic_domain(DomainSpec(offset=0.0, resolution=32), 16, seed=4)
    b = data.generate_synthetic_domain(DomainSpec(offset=0.3, resolution=32), 16, seed=4)
    assert b.images.mean() - a.images.mean() == pytest.approx(0.3, abs=0.05)


def test_benchmark_domains_share_masks_differ_in_appearance():
    doms = {k: data.generate_synthetic_domain(v, 16, seed=5) for k, v in data.benchmark_domains(32).items()}
    fracs = [d.masks.mean() for d in doms.values()]
    assert max(fracs) - min(fracs) < 0.02
    assert all(np.array_equal(d.masks, doms["A"].masks) for d in doms.values())
    means = sorted(d.images.mean() for d in doms.values())
    assert min(np.diff(means)) > 0.02


def test_generation_is_pure():
    spec = DomainSpec("C", texture_amplitude=0.1, resolution=32)
    a, b = (data.generate_synthetic_domain(spec, 4, seed=9) for _ in range(2))
    assert a.images.tobytes() == b.images.tobytes() and a.fingerprint() == b.fingerprint()
    assert data.generate_synthetic_domain(spec, 4, seed=10).fingerprint() != a.fingerprint()


def test_domain_validation():
    with pytest.raises(ConfigError):
        DomainSpec(shape_family="stars").validate()
    with pytest.raises(ConfigError):
        data.generate_synthetic_domain(DomainSpec(), 0)
    with pytest.raises(ConfigError, match="colour"):
        data.domain_spec_from_dict({"colour": 1})


def test_dataset_is_immutable():
    ds = data.generate_synthetic_domain(DomainSpec(resolution=16), 2)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1.0
    with pytest.raises(DataError):
        data.Dataset("bad", np.zeros((1, 4, 4, 1)), np.zeros((1, 4, 5, 1)))
