import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from thermal_slam.preproc import (
    ChainStageError,
    FilterChain,
    FilterError,
    FilterKind,
    FilterSpec,
    ImageBuffer,
    apply_chain,
    bandpass_filter,
    bandpass_response,
    bilateral_filter,
    chambolle_tv,
    chambolle_tv_denoise,
    clahe,
    default_chain,
    histogram_equalize,
    median_filter,
    read_image,
    rof_energy,
    to_8bit,
    write_image,
)

ALL_FILTERS = [
    lambda im: histogram_equalize(im),
    lambda im: clahe(im),
    lambda im: median_filter(im),
    lambda im: bilateral_filter(im),
    lambda im: bandpass_filter(im),
    lambda im: chambolle_tv_denoise(im),
]

images8 = arrays(np.uint8, st.tuples(st.integers(3, 24), st.integers(3, 24)))


def test_image_buffer_rejects_out_of_range():
    with pytest.raises(FilterError):
        ImageBuffer(np.array([[300]]), 8)
    with pytest.raises(FilterError):
        ImageBuffer(np.zeros((2, 2)), 12)
    with pytest.raises(FilterError):
        ImageBuffer(np.zeros((2, 2, 3), np.uint8), 8)


def test_image_roundtrip_16bit(tmp_path):
    img = ImageBuffer(np.arange(12, dtype=np.uint16).reshape(3, 4) * 5000, 16)
    write_image(img, tmp_path / "a.png")
    assert read_image(tmp_path / "a.png") == img
    assert (img.width, img.height) == (4, 3)


@settings(max_examples=60, deadline=None)
@given(value=st.integers(0, 65535), h=st.integers(4, 20), w=st.integers(4, 20), which=st.integers(0, 5))
def test_every_filter_maps_constants_to_constants(value, h, w, which):
    img = ImageBuffer(np.full((h, w), value, np.uint16), 16)
    out = ALL_FILTERS[which](img)
    assert np.unique(out.data).size == 1


@settings(max_examples=40, deadline=None)
@given(value=st.integers(0, 255), which=st.integers(0, 5))
def test_constants_8bit(value, which):
    out = ALL_FILTERS[which](ImageBuffer(np.full((9, 13), value, np.uint8), 8))
    assert np.unique(out.data).size == 1


def test_histeq_constant_16bit_gives_constant_8bit():
    out = histogram_equalize(ImageBuffer(np.full((6, 7), 500, np.uint16), 16))
    assert out.depth == 8 and np.unique(out.data).size == 1


def test_histeq_four_levels_span_full_range():
    # cdf = 1,2,3,4; (cdf - 1) * 255 / 3
    out = histogram_equalize(ImageBuffer(np.array([[0, 85, 170, 255]], np.uint8), 8), 10000)
    assert out.data.tolist() == [[0, 85, 170, 255]]


def test_histeq_clip_threshold_limits_dominant_bin():
    data = np.array([[0] * 90 + [100] * 5 + [200] * 5], np.uint8)
    # unclipped: cdf 90, 95, 100 -> 100 maps to 255*5/10 = 127.5
    # clipped at 5: cdf 5, 10, 15 -> 100 maps to 255*5/10 as well; 0 stays 0
    out = histogram_equalize(ImageBuffer(data, 8), clip_threshold=5)
    assert out.data[0, 0] == 0 and out.data[0, -1] == 255
    assert out.data[0, 90] == 128


@settings(max_examples=60, deadline=None)
@given(images8)
def test_histeq_preserves_order(a):
    out = histogram_equalize(ImageBuffer(a, 8)).data.astype(int)
    src = a.astype(int).ravel()
    order = np.argsort(src, kind="stable")
    assert np.all(np.diff(out.ravel()[order]) >= 0)


def test_histeq_rejects_empty():
    with pytest.raises(FilterError):
        histogram_equalize(ImageBuffer(np.zeros((0, 4), np.uint8), 8))


def _clahe_oracle_lut(value, n, clip_limit):
    # one-level tile: clip = clip_limit*n/256, excess spread uniformly over 256 bins
    clip = max(clip_limit * n / 256.0, 1.0)
    hist = np.full(256, (n - clip) / 256.0)
    hist[value] += clip
    return np.cumsum(hist) * 255.0 / n


def test_clahe_two_tone_matches_per_tile_oracle():
    a = np.full((16, 16), 10, np.uint8)
    a[:, 8:] = 200
    out = clahe(ImageBuffer(a, 8), tile_grid=2, clip_limit=2.0).data
    left = _clahe_oracle_lut(10, 64, 2.0)
    right = _clahe_oracle_lut(200, 64, 2.0)
    # tile centers at columns 3.5 and 11.5; columns outside [3.5, 11.5] use one tile only
    xs = np.arange(16.0)
    f = np.clip((xs - 3.5) / 8.0, 0, 1)
    expect = np.where(xs < 8, (1 - f) * left[10] + f * right[10], (1 - f) * left[200] + f * right[200])
    assert np.array_equal(out, np.tile(np.rint(expect), (16, 1)))
    # frozen: the left half blends toward the right tile's mapping near the seam
    assert out[0].tolist() == [15, 15, 15, 15, 15, 14, 14, 13] + [201] * 8
    # constant regions stay constant wherever a single tile mapping applies
    assert np.unique(out[:, :4]).size == 1 and np.unique(out[:, 8:]).size == 1


def test_clahe_tile_larger_than_image_falls_back_to_single_tile():
    a = (np.arange(20).reshape(4, 5) * 12).astype(np.uint8)
    assert clahe(ImageBuffer(a, 8), tile_grid=8) == clahe(ImageBuffer(a, 8), tile_grid=1)


def test_clahe_bad_params():
    img = ImageBuffer(np.zeros((8, 8), np.uint8), 8)
    with pytest.raises(FilterError):
        clahe(img, tile_grid=0)
    with pytest.raises(FilterError):
        clahe(img, clip_limit=0)


def test_median_removes_single_spike():
    a = np.full((5, 5), 100, np.uint8)
    a[2, 2] = 255
    assert np.all(median_filter(ImageBuffer(a, 8), 3).data == 100)


def test_median_even_kernel_rejected():
    with pytest.raises(FilterError):
        median_filter(ImageBuffer(np.zeros((5, 5), np.uint8), 8), 4)


@settings(max_examples=60, deadline=None)
@given(images8, st.sampled_from([1, 3, 5]))
def test_median_and_bilateral_stay_in_input_range(a, k):
    img = ImageBuffer(a, 8)
    for out in (median_filter(img, k), bilateral_filter(img, diameter=k + 1, sigma_spatial=3.0, sigma_range=20.0)):
        assert out.data.min() >= a.min() and out.data.max() <= a.max()


def _bilateral_reference(f, diameter, ss, sr):
    h, w = f.shape
    r = diameter // 2
    out = np.zeros_like(f)
    for y in range(h):
        for x in range(w):
            num = den = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dx * dx + dy * dy > r * r:
                        continue
                    v = f[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]
                    wt = np.exp(-(dx * dx + dy * dy) / (2 * ss * ss)) * np.exp(-((v - f[y, x]) ** 2) / (2 * sr * sr))
                    num += wt * v
                    den += wt
            out[y, x] = num / den
    return out


def test_bilateral_step_edge_against_reference():
    rng = np.random.default_rng(4)
    f = np.zeros((32, 32))
    f[:, 16:] = 255
    f = np.clip(f + rng.uniform(-5, 5, f.shape), 0, 255).round()
    img = ImageBuffer(f.astype(np.uint8), 8)
    out = bilateral_filter(img, diameter=4, sigma_spatial=35.0).as_float()
    ref = _bilateral_reference(f, 4, 35.0, 35.0)
    assert np.max(np.abs(out - np.rint(ref))) <= 1
    assert out[:, 2:14].var() < f[:, 2:14].var()
    assert out[:, 18:30].var() < f[:, 18:30].var()
    # edge midline: column where the row profile crosses 127.5
    prof = out.mean(axis=0)
    k = np.flatnonzero(prof > 127.5)[0]
    cross = k - 1 + (127.5 - prof[k - 1]) / (prof[k] - prof[k - 1])
    assert abs(cross - 15.5) < 1.0


def test_bandpass_kills_out_of_band_sinusoid():
    n = 256
    x = np.arange(n)
    amp = 1000.0
    f = 30000.0 + amp * np.sin(2 * np.pi * 90 * x / n)[None, :] * np.ones((n, 1))
    out = bandpass_filter(ImageBuffer.from_float(f, 16), 0, 87).as_float()
    assert np.max(np.abs(out - out.mean())) < 0.01 * amp


def test_bandpass_keeps_in_band_sinusoid():
    n = 128
    x = np.arange(n)
    f = 1000.0 + 200.0 * np.cos(2 * np.pi * 10 * x / n)[None, :] * np.ones((n, 1))
    np.testing.assert_allclose(bandpass_response(f, 0, 87), f, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (12, 10), elements=st.floats(-100, 100)),
    arrays(np.float64, (12, 10), elements=st.floats(-100, 100)),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_bandpass_is_linear_before_clamp(x, y, a, b):
    lhs = bandpass_response(a * x + b * y, 1.5, 4.0)
    rhs = a * bandpass_response(x, 1.5, 4.0) + b * bandpass_response(y, 1.5, 4.0)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_bandpass_bad_bounds():
    with pytest.raises(FilterError):
        bandpass_filter(ImageBuffer(np.zeros((4, 4), np.uint8), 8), 5, 5)


def _noisy_step(seed, scale=255.0):
    rng = np.random.default_rng(seed)
    f = np.zeros((32, 32))
    f[:, 16:] = scale
    return f + rng.normal(0, 0.1 * scale, f.shape)


@pytest.mark.parametrize("seed", range(5))
def test_chambolle_energy_decreases_monotonically(seed):
    f = _noisy_step(seed)
    energies = []
    u = chambolle_tv(f, 4.0, max_iters=200, tol=0.0, energies=energies)
    assert rof_energy(u, f, 4.0) < rof_energy(f, f, 4.0)
    assert np.all(np.diff(energies) <= 1e-9 * abs(energies[0]))


def test_chambolle_constant_is_fixed_point():
    f = np.full((10, 10), 123.0)
    np.testing.assert_array_equal(chambolle_tv(f, 4.0), f)


def test_chambolle_stops_on_tolerance():
    energies = []
    chambolle_tv(_noisy_step(1), 4.0, max_iters=10000, tol=1e-2, energies=energies)
    assert len(energies) < 10000


def test_chambolle_bad_params():
    img = ImageBuffer(np.zeros((4, 4), np.uint8), 8)
    with pytest.raises(FilterError):
        chambolle_tv_denoise(img, weight=0)
    with pytest.raises(FilterError):
        chambolle_tv_denoise(img, max_iters=0)


def test_to_8bit_min_max():
    out = to_8bit(ImageBuffer(np.array([[1000, 2000, 3000]], np.uint16), 16))
    assert out.data.tolist() == [[0, 128, 255]]


def test_empty_chain_is_identity():
    img = ImageBuffer(np.arange(30, dtype=np.uint16).reshape(5, 6) * 999, 16)
    assert apply_chain(FilterChain(), img) is img


def test_default_chain_values():
    chain = default_chain()
    assert [s.kind for s in chain.stages] == [FilterKind.CHAMBOLLE_TV, FilterKind.HIST_EQ, FilterKind.MEDIAN]
    assert chain.stages[0].params["weight"] == 4.0
    assert chain.stages[1].params["clip_threshold"] == 10000
    assert chain.stages[2].params["kernel"] == 3


def test_chain_matches_manual_composition():
    rng = np.random.default_rng(2)
    img = ImageBuffer(rng.integers(0, 65535, (20, 30), dtype=np.uint16), 16)
    chain = FilterChain([FilterSpec("hist_eq"), FilterSpec("median")])
    assert apply_chain(chain, img) == median_filter(histogram_equalize(img))


@settings(max_examples=25, deadline=None)
@given(images8)
def test_chain_split_equals_whole(a):
    img = ImageBuffer(a, 8)
    A, B = FilterSpec("median", {"kernel": 3}), FilterSpec("clahe", {"tile_grid": 2})
    assert apply_chain(FilterChain([A, B]), img) == apply_chain(FilterChain([B]), apply_chain(FilterChain([A]), img))


def test_chain_error_carries_stage_index():
    chain = FilterChain([FilterSpec("median"), FilterSpec("hist_eq")])
    with pytest.raises(ChainStageError) as err:
        apply_chain(chain, ImageBuffer(np.zeros((0, 3), np.uint8), 8))
    assert err.value.index == 0


def test_filter_spec_validation_and_roundtrip():
    with pytest.raises(FilterError):
        FilterSpec("median", {"size": 3})
    with pytest.raises(FilterError):
        FilterSpec("unsharp")
    spec = FilterSpec("bilateral", {"sigma_spatial": 10})
    assert spec.params["sigma_range"] == 10.0
    assert FilterSpec.from_dict(spec.to_dict()) == spec
    assert FilterChain.from_list(default_chain().to_list()) == default_chain()
