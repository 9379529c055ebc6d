import hashlib

import numpy as np
import pytest
from scipy import ndimage

from banet.phantom import (ARTERY, KIDNEY, TUMOR, VEIN, PhantomGeometryError, PhantomSpec, cohort_specs,
                           generate_cohort, generate_phantom, write_dataset)
from banet.volume import load_volume


def _touches(labels, a, b):
    return (ndimage.binary_dilation(labels == a) & (labels == b)).any()


def test_default_spec_has_all_classes():
    img, lab = generate_phantom(PhantomSpec())
    assert set(np.unique(lab.data)) == {0, 1, 2, 3, 4}
    assert img.shape == lab.shape == (64, 64, 64)
    assert img.spacing == lab.spacing == (3.0, 0.6, 0.6)


def test_same_seed_bitwise_identical():
    a = generate_phantom(PhantomSpec(seed=4))
    b = generate_phantom(PhantomSpec(seed=4))
    assert a[0] == b[0] and a[1] == b[1]
    c = generate_phantom(PhantomSpec(seed=5))
    assert not (c[1] == a[1])


def test_noise_free_image_is_piecewise_constant():
    spec = PhantomSpec(noise_sigma=0.0, seed=2)
    img, lab = generate_phantom(spec)
    assert len(np.unique(img.data)) == 5
    for c, level in spec.intensity.items():
        assert np.all(img.data[lab.data == c] == np.float32(level))


def test_intensities_inside_clip_window():
    assert all(918 <= v <= 1396 for v in PhantomSpec().intensity.values())


def test_tumor_straddles_kidney_surface():
    for seed in range(4):
        _, lab = generate_phantom(PhantomSpec(seed=seed))
        assert _touches(lab.data, TUMOR, KIDNEY)
        assert _touches(lab.data, TUMOR, 0)


def test_vessels_are_thin_tubes():
    _, lab = generate_phantom(PhantomSpec(seed=1))
    for c in (ARTERY, VEIN):
        mask = lab.data == c
        # a tube radius of a few voxels erodes away after a handful of iterations
        assert not ndimage.binary_erosion(mask, iterations=4).any()


def test_geometry_that_cannot_fit_is_rejected():
    with pytest.raises(PhantomGeometryError):
        generate_phantom(PhantomSpec(shape=(16, 16, 16)))
    with pytest.raises(ValueError):
        PhantomSpec(tumor_radius=(3, 2))
    with pytest.raises(ValueError):
        PhantomSpec(noise_sigma=-1)


def test_cohort_distinct_and_tumor_sizes_spread():
    cases = generate_cohort(8, seed=0)
    digests = {hashlib.sha256(lab.data.tobytes()).hexdigest() for _, _, lab in cases}
    assert len(digests) == 8
    counts = [int((lab.data == TUMOR).sum()) for _, _, lab in cases]
    assert max(counts) >= 4 * min(counts)
    assert [c[0] for c in cases] == [f"case_{k:05d}" for k in range(8)]
    for _, _, lab in cases:
        assert set(np.unique(lab.data)) == {0, 1, 2, 3, 4}


def test_single_case_cohort_is_first_jitter():
    base = PhantomSpec()
    (cid, img, lab), = generate_cohort(1, base, seed=3)
    ref_img, ref_lab = generate_phantom(cohort_specs(1, base, 3)[0])
    assert img == ref_img and lab == ref_lab


def test_write_dataset_layout(tmp_path):
    cases = generate_cohort(2, PhantomSpec(), seed=1)
    root = write_dataset(cases, tmp_path / "ds")
    for cid, img, lab in cases:
        assert load_volume(root / "images" / f"{cid}.raw") == img
        assert load_volume(root / "labels" / f"{cid}.raw", num_classes=5) == lab
