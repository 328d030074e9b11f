import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from fusion_pilot import depth as dp
from fusion_pilot import sensors

R = dp.RangeSpec()


def _map(v, missing=None):
    return dp.DepthMap(np.asarray(v, dtype=np.float64), missing)


def test_range_spec_validation():
    with pytest.raises(ValueError):
        dp.RangeSpec(min_m=5, max_m=1)
    with pytest.raises(ValueError):
        dp.RangeSpec(step_m=0)


def test_trim_range_examples():
    out = dp.trim_range(_map([[150.0, 0.5, 100.0, 1.0]]))
    assert out.missing.tolist() == [[True, True, False, False]]
    assert out.values[0, 2] == 100.0


@pytest.mark.parametrize("value,expected", [(10.037, 10.04), (10.04, 10.04), (10.02, 10.00), (10.06, 10.08)])
def test_requantize_examples(value, expected):
    out = dp.requantize(_map([[value]]))
    assert out.values[0, 0] == pytest.approx(expected, abs=1e-12)


def test_requantize_rejects_untrimmed():
    with pytest.raises(dp.PipelineError, match="trim_range"):
        dp.requantize(_map([[500.0]]))


def test_inpaint_examples():
    clean = _map(np.full((4, 4), 7.0))
    assert np.array_equal(dp.inpaint(clean).values, clean.values)
    v = np.full((3, 3), 5.0)
    m = np.zeros((3, 3), bool)
    m[1, 1] = True
    assert dp.inpaint(_map(v, m)).values[1, 1] == pytest.approx(5.0)
    v = np.zeros((6, 5))
    v[:, :2] = 2.0
    v[:, 3:] = 4.0
    m = np.zeros_like(v, bool)
    m[:, 2] = True
    filled = dp.inpaint(_map(v, m)).values[:, 2]
    assert np.all((filled >= 2.0) & (filled <= 4.0))


def test_pipeline_saturates_frame_with_nothing_in_range():
    near = np.full((4, 5), 0.4)
    near[1, 1] = 0.0  # no return
    near[2, 3] = 250.0
    out = dp.realism_pipeline(_map(near))
    assert not out.missing.any()
    # the lone far pixels are outvoted by the median; the wall reads as the near limit
    assert np.all(out.values == 1.0)
    assert np.all(dp.realism_pipeline(_map(np.zeros((3, 3)))).values == 100.0)


def test_inpaint_rejects_all_missing():
    with pytest.raises(dp.PipelineError):
        dp.inpaint(_map(np.ones((3, 3)), np.ones((3, 3), bool)))


def test_median_filter_examples():
    v = np.ones((3, 3))
    v[1, 1] = 9.0
    assert dp.median_filter(_map(v)).values[1, 1] == 1.0
    const = _map(np.full((5, 6), 3.2))
    assert np.array_equal(dp.median_filter(const).values, const.values)
    with pytest.raises(dp.PipelineError):
        dp.median_filter(const, 4)


def test_median_filter_brute_force_5x5():
    v = np.random.default_rng(0).uniform(1, 100, size=(5, 5))
    padded = np.pad(v, 1, mode="edge")
    ref = np.array([[np.sort(padded[i:i + 3, j:j + 3].ravel())[4] for j in range(5)] for i in range(5)])
    assert np.array_equal(dp.median_filter(_map(v)).values, ref)


def test_pipeline_examples():
    grid = dp.snap_to_grid(np.random.default_rng(1).uniform(1, 100, size=(8, 8)), R.step_m)
    np.testing.assert_array_equal(dp.realism_pipeline(_map(grid)).values, dp.median_filter(_map(grid)).values)
    far = grid.copy()
    far[2:4, 2:5] = 500.0
    assert dp.realism_pipeline(_map(far)).values.max() <= 100.0


def test_normalize_examples():
    out = dp.normalize_depth_channel(np.array([1.0, 100.0, 50.5]))
    np.testing.assert_allclose(out, [0.0, 255.0, 127.5])


def test_crop_and_downscale_examples():
    src = np.random.default_rng(2).uniform(0, 255, size=(600, 800, 3))
    assert dp.crop_and_downscale(src, dp.PROFILES["paper"]).shape == (88, 200, 3)
    small = np.random.default_rng(3).uniform(size=(24, 48))
    np.testing.assert_allclose(dp.crop_and_downscale(small, (48, 24), dp.CropSpec(0, 0)), small, atol=1e-12)
    const = np.full((48, 64), 9.25)
    np.testing.assert_allclose(dp.crop_and_downscale(const, (48, 24)), 9.25, atol=1e-12)
    with pytest.raises(dp.PipelineError):
        dp.CropSpec(0.6, 0.4)


def test_semantic_remap_examples():
    idx = dp.SOURCE_CLASSES.index
    src = np.array([idx("sidewalk"), idx("vehicle"), idx("building"), idx("road-line"), idx("road"),
                    idx("pedestrian")])
    assert dp.semantic_remap(src).tolist() == [4, 2, 0, 4, 1, 3]
    with pytest.raises(dp.PipelineError, match="12"):
        dp.semantic_remap(np.array([12]))


def test_semantic_remap_total_and_onto():
    out = dp.semantic_remap(np.arange(12))
    assert set(out.tolist()) == {0, 1, 2, 3, 4}
    # seven of the twelve source classes collapse onto "other"
    assert int((out == 0).sum()) == 7


def test_one_hot_semantic_channels():
    oh = dp.one_hot_semantic(np.array([[0, 4]]))
    assert oh.shape == (1, 2, 5)
    assert oh.sum(axis=-1).tolist() == [[255.0, 255.0]]


def test_png_units_round_trip():
    d = dp.snap_to_grid(np.random.default_rng(4).uniform(1, 100, size=(6, 7)), R.step_m)
    units = sensors.depth_to_png_units(d)
    assert units.dtype == np.uint16
    np.testing.assert_allclose(sensors.png_units_to_depth(units), d, atol=1e-9)


# ---------------------------------------------------------------- properties

depth_maps = arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(3, 12)),
                    elements=st.floats(0.1, 400.0, allow_nan=False))


def _on_grid(v):
    q = v / R.step_m
    return np.allclose(q, np.round(q), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(depth_maps)
def test_pipeline_output_in_range_and_on_grid(v):
    d = _map(v)
    out = dp.realism_pipeline(d)
    assert not out.missing.any()
    assert out.values.min() >= R.min_m and out.values.max() <= R.max_m
    assert _on_grid(out.values)


@settings(max_examples=60, deadline=None)
@given(depth_maps)
def test_stage_idempotence(v):
    d = dp.trim_range(_map(v))
    assert np.array_equal(dp.trim_range(d).missing, d.missing)
    q = dp.requantize(d)
    assert np.array_equal(dp.requantize(q).values[~q.missing], q.values[~q.missing])


@settings(max_examples=60, deadline=None)
@given(depth_maps)
def test_inpaint_respects_region_boundary_bounds(v):
    d = dp.requantize(dp.trim_range(_map(v)))
    if d.missing.all():
        return
    out = dp.inpaint(d)
    assert np.array_equal(out.values[~d.missing], d.values[~d.missing])
    labels, n = ndimage.label(d.missing)
    cross = ndimage.generate_binary_structure(2, 1)
    for lab in range(1, n + 1):
        region = labels == lab
        ring = ndimage.binary_dilation(region, structure=cross) & ~d.missing
        assert out.values[region].min() >= d.values[ring].min() - 1e-9
        assert out.values[region].max() <= d.values[ring].max() + 1e-9


@settings(max_examples=40, deadline=None)
@given(depth_maps)
def test_second_pipeline_pass_only_filters(v):
    d = _map(v)
    if dp.trim_range(d).missing.all():
        return
    once = dp.realism_pipeline(d)
    front = dp.inpaint(dp.requantize(dp.trim_range(once)))
    np.testing.assert_allclose(front.values, once.values, atol=1e-9)
    np.testing.assert_allclose(dp.realism_pipeline(once).values, dp.median_filter(once).values, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1.0, 100.0), min_size=2, max_size=20, unique=True))
def test_normalize_strictly_monotone(vals):
    v = np.sort(np.array(vals))
    assert np.all(np.diff(dp.normalize_depth_channel(v)) > 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(10, 40), st.integers(10, 40)), elements=st.floats(-50, 50)),
       st.integers(2, 10), st.integers(2, 10))
def test_crop_and_downscale_preserves_range(img, w, h):
    out = dp.crop_and_downscale(img, (w, h))
    top, bottom = dp.CropSpec().rows(img.shape[0])
    band = img[top:img.shape[0] - bottom]
    assert out.shape == (h, w)
    assert out.min() >= band.min() and out.max() <= band.max()
