import json

import numpy as np
import pytest

from gadetect.dataset import AreaCategory, Centrality, Eye, apply_exclusions, parse_manifest
from gadetect.errors import ConfigError
from gadetect.imageio import read_image
from gadetect.synth import (
    AREA_RANGES_DA,
    LesionSpec,
    SpecError,
    SynthSpec,
    area_pixel_range,
    center_pixel,
    generate_dataset,
    generate_eye,
    load_mask,
)


def test_area_pixel_range_inside_category():
    da = SynthSpec(image_size=128).disc_area
    for cat, (lo, hi) in AREA_RANGES_DA.items():
        n_lo, n_hi = area_pixel_range(cat, da)
        assert n_lo <= n_hi
        assert lo <= n_lo / da and n_hi / da < hi


def test_mask_area_and_centrality_property():
    rng = np.random.default_rng(0)
    cats = list(AreaCategory)
    size = 96
    cy, cx = center_pixel(size)
    for _ in range(200):
        cat = cats[int(rng.integers(len(cats)))]
        central = bool(rng.random() < 0.5)
        spec = SynthSpec(
            image_size=size,
            seed=int(rng.integers(2**31)),
            eye=Eye.LEFT if rng.random() < 0.5 else Eye.RIGHT,
            lesion=LesionSpec(cat, central=central, multifocal=bool(rng.random() < 0.3)),
        )
        image, grade, mask = generate_eye(spec)
        lo, hi = AREA_RANGES_DA[cat]
        area_da = mask.sum() / spec.disc_area
        assert lo <= area_da < hi, (cat, area_da)
        assert mask[cy, cx] == central
        assert grade.cga == central and grade.area_category is cat
        assert image.shape == (size, size, 3) and image.dtype == np.uint8


def test_no_lesion():
    image, grade, mask = generate_eye(SynthSpec(image_size=64, seed=3))
    assert not mask.any() and not grade.ga_present and grade.centrality is Centrality.NO_GA


def test_deterministic_in_seed():
    spec = SynthSpec(image_size=64, seed=11, lesion=LesionSpec(AreaCategory.ONE_TO_2_DA, central=True))
    a, _, ma = generate_eye(spec)
    b, _, mb = generate_eye(spec)
    assert a.tobytes() == b.tobytes() and np.array_equal(ma, mb)


def test_lesion_is_brighter():
    spec = SynthSpec(image_size=128, seed=5, lesion=LesionSpec(AreaCategory.GE_2_DA, depigmentation=1.0))
    image, _, mask = generate_eye(spec)
    lum = image.astype(float).mean(axis=2)
    ring = (~mask) & (np.hypot(*np.mgrid[-64:64, -64:64]) < 40)
    assert lum[mask].mean() > lum[ring].mean() + 10


def test_spec_validation():
    with pytest.raises(SpecError):
        LesionSpec(AreaCategory.LT_I2, central=False, questionable_center=True)
    with pytest.raises(ConfigError):
        SynthSpec(image_size=64, disc_diameter_px=40)


def test_questionable_center_grade():
    spec = SynthSpec(
        image_size=64, seed=2, lesion=LesionSpec(AreaCategory.HALF_TO_1_DA, central=True, questionable_center=True)
    )
    assert generate_eye(spec)[1].centrality is Centrality.QUESTIONABLE_CP_DEFINITE_SUBFIELD


def test_generate_dataset_manifest_validates(tmp_path):
    manifest = generate_dataset(60, 0.25, 0.5, seed=4, out_dir=tmp_path, image_size=64, nv_fraction=0.2)
    records = parse_manifest(manifest)
    assert len(records) == 60
    assert sum(r.grade.ga_present for r in records) == 15
    assert sum(r.grade.cga for r in records) == round(15 * 0.5)
    assert any(r.grade.nv_amd for r in records)
    n_both = sum(r.grade.ga_present and r.grade.nv_amd for r in records)
    assert len(apply_exclusions(records)) == 60 - n_both
    for r in records[:5]:
        assert read_image(r.image_path).shape == (64, 64, 3)
        assert load_mask(r.image_path).any() == r.grade.ga_present
    for r in records:
        if r.visit != "baseline":
            assert r.grade.specialist_ga is None
    tally = json.loads((tmp_path / "synth_tally.json").read_text())
    assert tally["n_ga"] == 15 and sum(tally["area_counts"].values()) == 15


def test_generate_dataset_reproducible(tmp_path):
    a = generate_dataset(10, 0.3, 0.5, seed=1, out_dir=tmp_path / "a", image_size=64)
    b = generate_dataset(10, 0.3, 0.5, seed=1, out_dir=tmp_path / "b", image_size=64)
    ra, rb = parse_manifest(a), parse_manifest(b)
    assert [r.grade for r in ra] == [r.grade for r in rb]
    assert all(read_image(x.image_path).tobytes() == read_image(y.image_path).tobytes() for x, y in zip(ra, rb))


def test_generate_dataset_rejects_bad_prevalence(tmp_path):
    with pytest.raises(ConfigError):
        generate_dataset(10, 1.5, 0.5, seed=0, out_dir=tmp_path)
