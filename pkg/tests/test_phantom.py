import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wdm_inpaint.masking import MaskSpec, localize_patella, make_inpainting_mask
from wdm_inpaint.phantom import (
    PATELLA_LABEL,
    InconsistentGeometryError,
    PhantomSpec,
    generate_phantom,
    groove_from_landmarks,
    measure_sulcus_angle,
    patella_slice,
    sample_specs,
    save_phantom,
    spec_from_dict,
)
from wdm_inpaint.volume import Volume

FINE = dict(dims=(128, 128, 8), spacing=(0.5, 0.5, 4.5))


def _spec(sa, w=15.0, **kw):
    return PhantomSpec(sulcus_angle_deg=sa, groove_depth_mm=w / math.tan(math.radians(sa) / 2), **kw)


def _v_slice(slope_deg, n=64):
    """Bright half-plane below a symmetric V with the given facet inclination."""
    y, x = np.mgrid[:n, :n].astype(np.float64)
    c = n // 2
    surf = 10 + 20 - np.abs(x - c) * math.tan(math.radians(slope_deg))
    surf = np.maximum(np.round(surf, 9), 10)
    sl = np.where(y >= surf, 1.0, 0.2)
    sl[:, :4] = sl[:, -4:] = 0
    return Volume(sl[None].astype(np.float32), (1.0, 1.0, 1.0))


def test_landmark_geometry():
    sa, tgd = groove_from_landmarks((-1.0, 0.0), (1.0, 0.0), (0.0, 1.0))
    assert sa == pytest.approx(90.0) and tgd == pytest.approx(1.0)


@pytest.mark.parametrize("sa,tgd", [(154.0, 3.6), (145.0, 5.2)])
def test_ground_truth_matches_spec(sa, tgd):
    _, _, gt = generate_phantom(PhantomSpec(sulcus_angle_deg=sa, groove_depth_mm=tgd))
    assert gt.sulcus_angle_deg == pytest.approx(sa, abs=0.5)
    assert gt.groove_depth_mm == pytest.approx(tgd, abs=0.1)
    assert gt.measurable


@pytest.mark.parametrize("sa", range(130, 171, 5))
def test_roundtrip_fine_grid(sa):
    spec = _spec(sa, **FINE)
    img, _, gt = generate_phantom(spec)
    m = measure_sulcus_angle(img, gt.slice_index)
    assert abs(m.sulcus_angle_deg - sa) <= 2.0
    assert abs(m.groove_depth_mm - spec.groove_depth_mm) <= 0.3


def test_roundtrip_desk_grid_150():
    img, _, gt = generate_phantom(_spec(150.0))
    m = measure_sulcus_angle(img, gt.slice_index)
    assert m.sulcus_angle_deg == pytest.approx(150.0, abs=2.0)


def test_v_groove_45_degrees():
    m = measure_sulcus_angle(_v_slice(45.0), 0)
    assert m.measurable
    assert m.sulcus_angle_deg == pytest.approx(90.0, abs=1.0)


def test_flat_surface_unmeasurable():
    m = measure_sulcus_angle(_v_slice(0.0), 0)
    assert not m.measurable and m.sulcus_angle_deg == 180.0 and m.groove_depth_mm == 0.0


def test_empty_slice_unmeasurable():
    v = Volume(np.zeros((2, 8, 8), np.float32), (1, 1, 1))
    assert not measure_sulcus_angle(v, 0).measurable
    with pytest.raises(IndexError):
        measure_sulcus_angle(v, 2)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 20.0), st.floats(135, 165))
def test_intensity_scale_invariance(k, sa):
    img, _, gt = generate_phantom(_spec(sa))
    a = measure_sulcus_angle(img, gt.slice_index)
    b = measure_sulcus_angle(Volume(img.data * np.float32(k), img.spacing), gt.slice_index)
    # scaling float32 voxels rounds each product, so equality holds only to rounding
    assert b.sulcus_angle_deg == pytest.approx(a.sulcus_angle_deg, abs=1e-4)
    assert b.groove_depth_mm == pytest.approx(a.groove_depth_mm, abs=1e-5)


@settings(max_examples=15, deadline=None)
@given(st.floats(12.0, 17.0), st.floats(1.5, 6.0), st.floats(0.2, 2.0))
def test_deeper_groove_never_larger_angle(w, d, extra):
    # fixed facet width: more depth means a sharper groove
    shallow = PhantomSpec(sulcus_angle_deg=2 * math.degrees(math.atan(w / d)), groove_depth_mm=d, **FINE)
    deep = PhantomSpec(sulcus_angle_deg=2 * math.degrees(math.atan(w / (d + extra))), groove_depth_mm=d + extra, **FINE)
    z = FINE["dims"][2] // 2
    ms = measure_sulcus_angle(generate_phantom(shallow)[0], z)
    md = measure_sulcus_angle(generate_phantom(deep)[0], z)
    assert md.sulcus_angle_deg <= ms.sulcus_angle_deg


def test_noise_free_is_deterministic_and_bounded():
    a, la, _ = generate_phantom(PhantomSpec(seed=1))
    b, lb, _ = generate_phantom(PhantomSpec(seed=2))
    assert np.array_equal(a.data, b.data) and np.array_equal(la.data, lb.data)
    n1 = generate_phantom(PhantomSpec(noise_sigma=0.05, seed=3))[0]
    n2 = generate_phantom(PhantomSpec(noise_sigma=0.05, seed=3))[0]
    assert np.array_equal(n1.data, n2.data)
    assert n1.data.min() >= 0 and n1.data.max() <= 1
    assert a.dims == (32, 32, 8) and a.spacing == (2.0, 2.0, 4.5)


def test_inconsistent_geometry():
    with pytest.raises(InconsistentGeometryError):
        generate_phantom(PhantomSpec(sulcus_angle_deg=175.0, groove_depth_mm=5.2))
    with pytest.raises(InconsistentGeometryError):
        generate_phantom(PhantomSpec(sulcus_angle_deg=80.0))
    with pytest.raises(InconsistentGeometryError):
        generate_phantom(PhantomSpec(groove_depth_mm=-1.0))


def test_patella_is_separate_anterior_component():
    _, labels, gt = generate_phantom(PhantomSpec())
    found, patella = localize_patella(labels, (0.3, 10.0))
    assert found
    assert np.array_equal(patella.data, labels.data == PATELLA_LABEL)
    assert patella_slice(labels) == gt.slice_index


def test_phantom_inpainting_mask_uses_bowl():
    img, labels, _ = generate_phantom(PhantomSpec())
    m, found = make_inpainting_mask(img, labels, MaskSpec(offset_mm=12.0, patella_volume_cm3=(0.3, 10.0)))
    assert found
    assert not np.any(m.data & (labels.data == PATELLA_LABEL))


def test_sample_specs_ranges():
    specs = sample_specs(30, (154, 170), np.random.default_rng(0))
    for s in specs:
        assert 154 <= s.sulcus_angle_deg <= 170
        assert 14.0 <= s.facet_half_width_mm <= 17.0 + 1e-9
        generate_phantom(s)


def test_save_and_spec_json(tmp_path):
    spec = PhantomSpec(sulcus_angle_deg=154, groove_depth_mm=3.6)
    paths = save_phantom(tmp_path, spec, "p")
    truth = json.loads(paths["truth"].read_text())
    assert spec_from_dict(truth["spec"]) == spec
    assert truth["ground_truth"]["sulcus_angle_deg"] == pytest.approx(154.0)
    with pytest.raises(ValueError):
        spec_from_dict({"bogus": 1})
