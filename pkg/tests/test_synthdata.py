import warnings

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from minmaxsim.data import scan_dataset
from minmaxsim.synthdata import SynthConfig, generate_dataset, generate_unlabeled_variants, render


def _read(path):
    return np.asarray(Image.open(path))


def test_generate_dataset_contract(tmp_path):
    cfg = SynthConfig(n_images=8, size=(64, 64), seed=7)
    summary = generate_dataset(cfg, tmp_path)
    assert summary["n_images"] == 8
    masks = sorted((tmp_path / "masks").glob("*.png"))
    assert len(masks) == 8 and len(list((tmp_path / "images").glob("*.png"))) == 8
    for m in masks:
        arr = _read(m)
        assert arr.shape == (64, 64)
        assert set(np.unique(arr).tolist()) <= {0, 255}
        assert 0.02 <= (arr == 255).mean() <= 0.40
    assert _read(tmp_path / "images" / "img0000.png").shape == (64, 64, 3)


def test_generation_is_byte_identical(tmp_path):
    cfg = SynthConfig(n_images=3, size=(32, 48), seed=4)
    generate_dataset(cfg, tmp_path / "a")
    generate_dataset(cfg, tmp_path / "b")
    for sub in ("images", "masks"):
        for f in (tmp_path / "a" / sub).iterdir():
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()


def test_start_offset_gives_new_images(tmp_path):
    cfg = SynthConfig(n_images=2, size=(32, 32), seed=4)
    generate_dataset(cfg, tmp_path / "a")
    generate_dataset(cfg, tmp_path / "b", start=2)
    assert not np.array_equal(_read(tmp_path / "a/images/img0000.png"), _read(tmp_path / "b/images/img0002.png"))
    assert np.array_equal(render(cfg, 2)[1], _read(tmp_path / "b/masks/img0002.png") > 0)


def test_single_thin_tool_is_one_component():
    cfg = SynthConfig(size=(64, 64), tools_per_image=(1, 1), tool_width=(3, 3), seed=1)
    for i in range(20):
        _, mask = render(cfg, i)
        assert ndimage.label(mask)[1] == 1


def test_foreground_distribution():
    cfg = SynthConfig(size=(64, 64), seed=0)
    fr = np.array([render(cfg, i)[1].mean() for i in range(100)])
    assert 0.05 <= fr.mean() <= 0.30
    assert fr.min() >= 0.02 and fr.max() <= 0.40


def test_unlabeled_variants(tmp_path):
    cfg = SynthConfig(n_images=8, size=(32, 32), seed=2)
    assert generate_unlabeled_variants(cfg, 4, tmp_path / "u") == 32
    assert generate_unlabeled_variants(cfg, 4, tmp_path / "v") == 32
    files = sorted((tmp_path / "u" / "images").glob("*.png"))
    assert len(files) == 32 and not (tmp_path / "u" / "masks").exists()
    base = np.round(render(cfg, 0)[0] * 255)
    for f in files[:4]:
        arr = _read(f).astype(float)
        assert np.abs(arr - base).mean() > 0
        assert f.read_bytes() == (tmp_path / "v" / "images" / f.name).read_bytes()
    with pytest.raises(ValueError):
        generate_unlabeled_variants(cfg, 0, tmp_path / "w")


def test_output_scans_cleanly(tmp_path):
    cfg = SynthConfig(n_images=4, size=(32, 32), seed=3)
    generate_dataset(cfg, tmp_path)
    generate_unlabeled_variants(cfg, 2, tmp_path)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        labeled, unlabeled = scan_dataset(tmp_path)
    assert len(labeled) == 4 and len(unlabeled) == 8


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_images=0)
    with pytest.raises(ValueError):
        SynthConfig(size=(60, 64))
    with pytest.raises(ValueError):
        SynthConfig(tools_per_image=(0, 2))
