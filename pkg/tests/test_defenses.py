import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import fft as sfft

from cia import defenses as D
from cia import netlib
from cia.harness.dataset import generate_dataset

images = hnp.arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(3, 12), st.just(3)),
                    elements=st.floats(0, 1))


@pytest.fixture(scope="module")
def natural():
    _, test = generate_dataset(seed=7, n_train=1, n_test=20)
    return test.floats()


# --------------------------------------------------------------- smoothing


def test_mean_kernel_sums_to_one():
    k = D.mean_kernel(3, 3, np.float64)
    assert np.all(k[:, :, 0, 0] == 1 / 9)
    assert np.allclose(k.sum(axis=(0, 1, 2)), 1.0, atol=1e-15)
    assert k[1, 1, 0, 1] == 0.0  # depthwise: no cross-channel mixing


def test_mean_filter_examples():
    const = np.full((5, 5, 3), 0.42)
    assert np.allclose(D.mean_filter(const), 0.42, atol=1e-15)
    x = np.random.default_rng(0).random((4, 4, 3))
    assert np.array_equal(D.mean_filter(x, D.SmoothingSpec(1)), x)
    nine = np.arange(1, 10, dtype=np.float64).reshape(3, 3, 1)
    assert D.mean_filter(nine)[1, 1, 0] == pytest.approx(5.0, abs=1e-14)
    with pytest.raises(ValueError):
        D.mean_filter(np.zeros((2, 5, 3)))
    with pytest.raises(ValueError):
        D.SmoothingSpec(4)


def test_mean_filter_replicate_border():
    # top-left corner with replicate padding: 4 copies of x00, 2 of x01, 2 of x10, one x11
    x = np.arange(1, 10, dtype=np.float64).reshape(3, 3, 1)
    expected = (4 * 1 + 2 * 2 + 2 * 4 + 5) / 9
    assert D.mean_filter(x)[0, 0, 0] == pytest.approx(expected, abs=1e-14)


@given(images)
@settings(max_examples=40)
def test_mean_filter_stays_in_range(img):
    out = D.mean_filter(img)
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


# ------------------------------------------------------------------ colour


def test_ycbcr_examples():
    assert np.allclose(D.rgb_to_ycbcr(np.array([[[0.3, 0.3, 0.3]]])), [0.3, 0.5, 0.5], atol=1e-12)
    red = D.rgb_to_ycbcr(np.array([[[1.0, 0.0, 0.0]]]))[0, 0]
    assert red == pytest.approx([0.299, 0.331264, 1.0], abs=1e-12)
    with pytest.raises(ValueError):
        D.rgb_to_ycbcr(np.zeros((2, 2, 4)))


@given(images)
@settings(max_examples=40)
def test_ycbcr_roundtrip(img):
    assert np.allclose(D.ycbcr_to_rgb(D.rgb_to_ycbcr(img)), img, atol=1e-5)


# ------------------------------------------------------------ jpeg approx


def test_jpeg_approx_constant_gray_unchanged():
    g = np.full((8, 8, 3), 0.37, np.float32)
    assert np.allclose(D.jpeg_approx(g), g, atol=1e-5)


def test_jpeg_approx_unit_kernels_identity():
    x = np.random.default_rng(1).random((8, 8, 3)).astype(np.float32)
    assert np.allclose(D.jpeg_approx(x, D.JpegApproxSpec(1, 1)), x, atol=1e-5)


def test_box_filter_matches_loop_reference():
    rng = np.random.default_rng(2)
    x = rng.random((7, 9, 3))
    sizes = (3, 6, 4)
    got = D.box_filter(x, sizes)
    ref = np.empty_like(x)
    for c, k in enumerate(sizes):
        lo = -(k // 2)  # even windows lean one pixel towards the top-left
        for i in range(7):
            for j in range(9):
                rows = np.clip(np.arange(i + lo, i + lo + k), 0, 6)
                cols = np.clip(np.arange(j + lo, j + lo + k), 0, 8)
                ref[i, j, c] = x[np.ix_(rows, cols, [c])].mean()
    assert np.allclose(got, ref, atol=1e-12)


@pytest.mark.parametrize("padding", ["replicate", "zero"])
def test_box_filter_adjoint(padding):
    rng = np.random.default_rng(3)
    x, g = rng.normal(size=(2, 7, 8, 3)), rng.normal(size=(2, 7, 8, 3))
    sizes = (3, 6, 2)
    lhs = np.sum(D.box_filter(x, sizes, padding) * g)
    assert np.sum(x * D.box_filter_adjoint(g, sizes, padding)) == pytest.approx(lhs, rel=1e-12)


# ---------------------------------------------------------------- as layers


def test_smoothing_layers_equal_mean_filter():
    layers = D.defense_as_layers(D.SmoothingSpec(3))
    assert len(layers) == 1 and isinstance(layers[0], netlib.Conv)
    x = np.random.default_rng(4).random((2, 9, 9, 3)).astype(np.float32)
    y, _ = layers[0].forward(x)
    assert np.array_equal(y, D.mean_filter(x))


def test_jpeg_approx_layers_equal_pipeline():
    layers = D.defense_as_layers(D.JpegApproxSpec())
    assert [l.transform_id for l in layers] == ["rgb_to_ycbcr", "box_filter", "ycbcr_to_rgb", "clamp01"]
    x = np.random.default_rng(5).random((2, 9, 9, 3)).astype(np.float32)
    h = x
    for l in layers:
        h, _ = l.forward(h)
    assert np.allclose(h, D.jpeg_approx(x), atol=1e-6)


def test_codec_has_no_layer_form():
    with pytest.raises(TypeError, match="non-differentiable defense"):
        D.defense_as_layers(D.JpegCodecSpec(50))


# ------------------------------------------------------------------- codec


def test_quality_bounds():
    for q in (0, 101):
        with pytest.raises(ValueError):
            D.JpegCodecSpec(q)
        with pytest.raises(ValueError):
            D.scaled_quant_table(D.LUMA_QUANT, q)


def test_annex_tables():
    assert D.LUMA_QUANT[0, 0] == 16 and D.LUMA_QUANT[7, 7] == 99
    assert D.CHROMA_QUANT[0, 0] == 17 and D.CHROMA_QUANT[4, 4] == 99


def test_quality_50_leaves_tables_unchanged():
    assert np.array_equal(D.scaled_quant_table(D.LUMA_QUANT, 50), D.LUMA_QUANT)
    assert np.array_equal(D.scaled_quant_table(D.CHROMA_QUANT, 50), D.CHROMA_QUANT)


@given(st.integers(1, 100))
def test_scaled_tables_in_range(q):
    for base in (D.LUMA_QUANT, D.CHROMA_QUANT):
        t = D.scaled_quant_table(base, q)
        assert t.min() >= 1 and t.max() <= 255


def test_scaled_table_reference_values():
    # IJG scaling by hand: Q=20 -> scale 250, Q=80 -> scale 40, Q=100 -> all ones
    assert D.scaled_quant_table(D.LUMA_QUANT, 20)[0, 0] == (16 * 250 + 50) // 100
    assert D.scaled_quant_table(D.LUMA_QUANT, 80)[7, 7] == (99 * 40 + 50) // 100
    assert np.all(D.scaled_quant_table(D.LUMA_QUANT, 100) == 1)
    assert D.scaled_quant_table(D.LUMA_QUANT, 1)[7, 7] == 255


def test_dct_matches_scipy():
    blocks = np.random.default_rng(6).normal(size=(5, 8, 8))
    assert np.allclose(D.block_dct(blocks), sfft.dctn(blocks, type=2, norm="ortho", axes=(1, 2)), atol=1e-12)
    assert np.allclose(D.block_idct(D.block_dct(blocks)), blocks, atol=1e-12)


@given(hnp.arrays(np.float64, (8, 8), elements=st.floats(-200, 200)))
def test_dct_parseval(block):
    assert np.sum(D.block_dct(block) ** 2) == pytest.approx(np.sum(block**2), rel=1e-9, abs=1e-9)


def test_round_half_away():
    assert D.round_half_away(np.array([-2.5, -0.5, 0.5, 1.5, 2.4])).tolist() == [-3.0, -1.0, 1.0, 2.0, 2.0]


@pytest.mark.parametrize("q", [50, 75, 90, 100])
def test_codec_constant_image(q):
    levels = np.arange(256) / 255.0
    gray = np.broadcast_to(levels[:, None, None, None], (256, 8, 8, 3))
    assert np.abs(D.jpeg_encode_decode(gray, q) - gray).max() <= 1 / 255 + 1e-12


@pytest.mark.parametrize("q", [5, 20, 40])
def test_codec_constant_image_low_quality(q):
    # a flat block keeps only its DC term; its error is at most half a DC step / 8
    levels = np.arange(256) / 255.0
    gray = np.broadcast_to(levels[:, None, None, None], (256, 8, 8, 3))
    step = D.scaled_quant_table(D.LUMA_QUANT, q)[0, 0]
    out = D.jpeg_encode_decode(gray, q)
    assert np.allclose(out, out[:, :1, :1], atol=1e-12)
    assert np.abs(out - gray).max() <= step / 16 / 255 + 1e-12


def test_codec_q100_near_lossless(natural):
    out = D.jpeg_encode_decode(natural, 100)
    mse = np.mean((out.astype(np.float64) - natural) ** 2)
    assert 10 * np.log10(1.0 / mse) >= 45.0


def test_codec_error_grows_as_quality_drops(natural):
    mse = [np.mean((D.jpeg_encode_decode(natural, q) - natural) ** 2) for q in (95, 80, 50, 20, 5)]
    assert all(a <= b for a, b in zip(mse, mse[1:]))


def test_codec_handles_non_multiple_of_8_and_dtype():
    x = np.random.default_rng(8).random((13, 10, 3)).astype(np.float32)
    out = D.jpeg_encode_decode(x, 75)
    assert out.shape == x.shape and out.dtype == np.float32
    assert out.min() >= 0 and out.max() <= 1


def test_codec_batch_equals_single(natural):
    batch = D.jpeg_encode_decode(natural[:3], 30)
    for i in range(3):
        assert np.array_equal(batch[i], D.jpeg_encode_decode(natural[i], 30))


def test_apply_defense_dispatch():
    x = np.random.default_rng(9).random((8, 8, 3)).astype(np.float32)
    assert np.array_equal(D.apply_defense(x, None), x)
    assert np.array_equal(D.apply_defense(x, D.SmoothingSpec()), D.mean_filter(x))
    assert np.array_equal(D.apply_defense(x, D.JpegCodecSpec(40)), D.jpeg_encode_decode(x, 40))
    with pytest.raises(TypeError):
        D.apply_defense(x, "blur")
