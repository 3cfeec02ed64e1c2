import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cia import defenses, netlib
from cia import tensor_core as tc

from conftest import rel_err

FD_TOL = 1e-3


def small_net(seed=0, padding="zero", shape=(8, 8, 3), m=5):
    rng = np.random.default_rng(seed)
    H, W, C = shape
    layers = [
        netlib.Conv(rng.normal(0, 0.5, (3, 3, C, 4)), rng.normal(0, 0.1, 4), padding),
        netlib.ReLU(),
        netlib.AvgPool(2),
        netlib.Flatten(),
        netlib.Dense(rng.normal(0, 0.3, (m, H // 2 * W // 2 * 4)), rng.normal(0, 0.1, m)),
    ]
    return netlib.Network(layers, m, shape)


def fd_input_grad(net, x, cls):
    """Float64 central-difference gradient of CE(net(x), cls)."""
    net64 = net.astype(np.float64)
    f = lambda v: netlib.cross_entropy(net64.logits(v)[0], cls)[0]
    return tc.finite_difference_gradient(f, np.asarray(x, np.float64), h=1e-5)


def analytic_input_grad(net, x, cls):
    _, gl = netlib.cross_entropy(netlib.forward(net, x).logits, cls)
    return netlib.backward_input(net, x, gl)


# ----------------------------------------------------------- softmax / CE


def test_zero_final_layer_gives_uniform_probs():
    net = small_net()
    last = net.layers[-1]
    zeroed = netlib.Network(
        list(net.layers[:-1]) + [netlib.Dense(np.zeros_like(last.weight), np.zeros(5))], 5, net.input_shape
    )
    out = netlib.forward(zeroed, np.random.default_rng(1).random((8, 8, 3)))
    assert np.allclose(out.probs, 0.2)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)), elements=st.floats(-1e4, 1e4)))
def test_softmax_is_distribution(logits):
    p = netlib.softmax(logits)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-5)


def test_cross_entropy_examples():
    loss, grad = netlib.cross_entropy(np.zeros(10), 3)
    assert loss == pytest.approx(np.log(10), abs=1e-12)
    assert loss == pytest.approx(2.302585, abs=1e-6)
    logits = np.zeros(10)
    logits[7] = 40.0
    assert netlib.cross_entropy(logits, 7)[0] < 1e-6
    with pytest.raises(ValueError):
        netlib.cross_entropy(np.zeros(4), 4)
    with pytest.raises(ValueError):
        netlib.cross_entropy(np.zeros(4), -1)


def test_cross_entropy_float32_no_overflow():
    logits = np.array([1e4, -1e4, 0.0], dtype=np.float32)
    loss, grad = netlib.cross_entropy(logits, 1)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


@given(hnp.arrays(np.float64, 6, elements=st.floats(-50, 50)), st.integers(0, 5))
def test_cross_entropy_grad_sums_to_zero(logits, cls):
    _, grad = netlib.cross_entropy(logits, cls)
    assert abs(grad.sum()) < 1e-9


def test_cross_entropy_batched_matches_single():
    rng = np.random.default_rng(0)
    logits, cls = rng.normal(size=(4, 6)), np.array([0, 5, 2, 2])
    loss, grad = netlib.cross_entropy(logits, cls)
    for i in range(4):
        l, g = netlib.cross_entropy(logits[i], cls[i])
        assert loss[i] == pytest.approx(l) and np.allclose(grad[i], g)


# ----------------------------------------------------------- backward_input


def test_zero_grad_logits_gives_zero_input_grad():
    net = small_net()
    x = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    assert np.array_equal(netlib.backward_input(net, x, np.zeros(5)), np.zeros_like(x))


def test_identity_network_passes_grad_through():
    net = netlib.Network([netlib.FixedTransform("identity"), netlib.Dense(np.eye(6), np.zeros(6))], 6, (6,))
    g = np.arange(6, dtype=np.float32)
    assert np.array_equal(netlib.backward_input(net, np.ones(6, np.float32), g), g)


def test_backward_input_rejects_bad_grad_shape():
    with pytest.raises(ValueError):
        netlib.backward_input(small_net(), np.zeros((8, 8, 3), np.float32), np.zeros(4))


@pytest.mark.parametrize("padding", ["zero", "replicate"])
@pytest.mark.parametrize("seed", range(10))
def test_backward_input_matches_finite_differences(backend, padding, seed):
    net = small_net(seed, padding)
    x = np.random.default_rng(100 + seed).random((8, 8, 3))
    cls = seed % 5
    got = analytic_input_grad(net.astype(np.float64), x, cls)
    assert rel_err(got, fd_input_grad(net, x, cls)) < FD_TOL


@pytest.mark.parametrize(
    "layer, shape",
    [
        (lambda r: netlib.Conv(r.normal(size=(3, 3, 2, 3)), r.normal(size=3), "zero"), (5, 4, 2)),
        (lambda r: netlib.Conv(r.normal(size=(5, 5, 2, 2)), r.normal(size=2), "replicate"), (6, 6, 2)),
        (lambda r: netlib.ReLU(), (4, 4, 2)),
        (lambda r: netlib.AvgPool(2), (4, 6, 2)),
        (lambda r: netlib.Flatten(), (3, 2, 2)),
        (lambda r: netlib.FixedTransform("clamp01"), (4, 4, 3)),
        (lambda r: netlib.FixedTransform("rgb_to_ycbcr"), (4, 4, 3)),
        (lambda r: netlib.FixedTransform("ycbcr_to_rgb"), (4, 4, 3)),
        (lambda r: netlib.FixedTransform("box_filter", (1, 3, 6, 6)), (8, 8, 3)),
    ],
    ids=["conv3", "conv5_replicate", "relu", "avgpool", "flatten", "clamp", "to_ycbcr", "to_rgb", "box"],
)
def test_per_layer_gradient(layer, shape):
    """Each layer kind, sandwiched before a dense read-out, against the oracle."""
    rng = np.random.default_rng(7)
    lay = layer(rng).astype(np.float64)
    out = lay.output_shape(shape)
    n = int(np.prod(out))
    tail = [] if len(out) == 1 else [netlib.Flatten()]
    net = netlib.Network([lay] + tail + [netlib.Dense(rng.normal(size=(4, n)), rng.normal(size=4))], 4, shape)
    for trial in range(3):
        x = rng.uniform(-0.2, 1.2, shape)
        assert rel_err(analytic_input_grad(net, x, trial), fd_input_grad(net, x, trial)) < FD_TOL


def test_dense_param_grads_match_fd():
    rng = np.random.default_rng(3)
    net = netlib.Network([netlib.Dense(rng.normal(size=(3, 4)), rng.normal(size=3))], 3, (4,)).astype(np.float64)
    x = rng.normal(size=(2, 4))
    cls = np.array([0, 2])
    logits, caches = net.forward_cached(x)
    _, gl = netlib.cross_entropy(logits, cls)
    _, grads = net.backward(caches, gl, param_grads=True)
    W = np.array(net.layers[0].weight)

    def loss_of(w):
        n = netlib.Network([netlib.Dense(w, net.layers[0].bias)], 3, (4,))
        return netlib.cross_entropy(n.logits(x), cls)[0].sum()

    assert rel_err(grads[0][0], tc.finite_difference_gradient(loss_of, W, h=1e-6)) < 1e-6


def test_conv_param_grads_match_fd():
    rng = np.random.default_rng(4)
    k0, b0 = rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2)
    x = rng.normal(size=(2, 4, 4, 2))
    cls = np.array([1, 0])
    head = [netlib.Flatten(), netlib.Dense(rng.normal(size=(2, 32)), np.zeros(2))]

    def build(k):
        return netlib.Network([netlib.Conv(k, b0, "replicate")] + head, 2, (4, 4, 2)).astype(np.float64)

    net = build(k0)
    logits, caches = net.forward_cached(x)
    _, gl = netlib.cross_entropy(logits, cls)
    _, grads = net.backward(caches, gl, param_grads=True)
    f = lambda k: netlib.cross_entropy(build(k).logits(x), cls)[0].sum()
    assert rel_err(grads[0][0], tc.finite_difference_gradient(f, k0, h=1e-6)) < 1e-6


# ------------------------------------------------------------------ prepend


def test_prepend_identity_is_noop():
    net = small_net()
    x = np.random.default_rng(0).random((3, 8, 8, 3)).astype(np.float32)
    assert np.array_equal(netlib.prepend(net, [netlib.FixedTransform("identity")]).logits(x), net.logits(x))


def test_prepend_mean_filter_equals_filter_then_net():
    net = small_net()
    x = np.random.default_rng(1).random((3, 8, 8, 3)).astype(np.float32)
    front = defenses.defense_as_layers(defenses.SmoothingSpec(3))
    smoothed = np.stack([defenses.mean_filter(xi) for xi in x])
    assert np.array_equal(netlib.prepend(net, front).logits(x), net.logits(smoothed))


def test_prepend_leaves_original_untouched():
    net = small_net()
    n_layers = len(net.layers)
    netlib.prepend(net, defenses.defense_as_layers(defenses.SmoothingSpec()))
    assert len(net.layers) == n_layers


def test_prepend_rejects_shape_change():
    with pytest.raises(netlib.ShapeInconsistencyError):
        netlib.prepend(small_net(), [netlib.AvgPool(2)])


@pytest.mark.parametrize("seed", range(4))
def test_prepend_jpeg_approx_gradient(seed):
    net = netlib.prepend(small_net(seed), defenses.defense_as_layers(defenses.JpegApproxSpec()))
    # stay inside [0, 1] after the round trip so the clamp is smooth here
    x = np.random.default_rng(seed).uniform(0.2, 0.8, (8, 8, 3))
    got = analytic_input_grad(net.astype(np.float64), x, 1)
    assert rel_err(got, fd_input_grad(net, x, 1)) < FD_TOL


# ---------------------------------------------------------------- building


def test_network_rejects_inconsistent_shapes():
    with pytest.raises(netlib.ShapeInconsistencyError):
        netlib.Network([netlib.Flatten(), netlib.Dense(np.zeros((3, 5)))], 3, (2, 2, 1))
    with pytest.raises(netlib.ShapeInconsistencyError):
        netlib.Network([netlib.Flatten(), netlib.Dense(np.zeros((3, 4)))], 4, (2, 2, 1))


def test_forward_rejects_wrong_input_shape():
    with pytest.raises(ValueError):
        netlib.forward(small_net(), np.zeros((7, 8, 3)))


@pytest.mark.parametrize("variant", sorted(netlib.ARCH_VARIANTS))
def test_variants_build_and_differ(variant):
    net = netlib.build_network(variant, seed=1)
    assert net.input_shape == (32, 32, 3) and net.num_classes == 10
    ref = netlib.build_network("A", seed=1)
    if variant != "A":
        assert [p.shape for l in net.layers for p in l.params()] != [p.shape for l in ref.layers for p in l.params()]


def test_glorot_bounds():
    net = netlib.build_network("A", seed=3)
    conv = net.layers[0]
    s = np.sqrt(6 / (3 * 3 * 3 + 3 * 3 * 8))
    assert np.abs(conv.kernel).max() <= s
    assert np.abs(conv.kernel).max() > 0.9 * s
    assert not np.any(conv.bias)


def test_weights_are_immutable():
    net = netlib.build_network("A", seed=0)
    with pytest.raises(ValueError):
        net.layers[0].kernel[0, 0, 0, 0] = 1.0


# ------------------------------------------------------------------ training


def _toy_data(n=200):
    rng = np.random.default_rng(0)
    labels = np.arange(n) % 3
    images = rng.normal(0.5, 0.05, (n, 6, 6, 1))
    images[labels == 0, :3] += 0.3
    images[labels == 1, 3:] += 0.3
    return np.clip(images, 0, 1).astype(np.float32), labels


def _toy_net(seed):
    rng = np.random.default_rng(seed)
    return netlib.Network(
        [netlib.Conv(rng.normal(0, 0.3, (3, 3, 1, 2))), netlib.ReLU(), netlib.Flatten(),
         netlib.Dense(rng.normal(0, 0.1, (3, 72)))], 3, (6, 6, 1))


def test_zero_epochs_keeps_initialization():
    net = _toy_net(0)
    trained = netlib.train(net, _toy_data(), epochs=0)
    for a, b in zip(net.layers, trained.layers):
        for p, q in zip(a.params(), b.params()):
            assert np.array_equal(p, q)


def test_training_is_deterministic_and_learns():
    data = _toy_data()
    a = netlib.train(_toy_net(0), data, epochs=20, batch=32, lr=1e-2, seed=5)
    b = netlib.train(_toy_net(0), data, epochs=20, batch=32, lr=1e-2, seed=5)
    assert netlib.to_bytes(a) == netlib.to_bytes(b)
    assert netlib.accuracy(a, *data) > 0.95
    c = netlib.train(_toy_net(0), data, epochs=20, batch=32, lr=1e-2, seed=6)
    assert netlib.to_bytes(a) != netlib.to_bytes(c)


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        netlib.train(_toy_net(0), (np.zeros((0, 6, 6, 1), np.float32), np.zeros(0, int)))


# ------------------------------------------------------------- serialization


def test_roundtrip_is_bit_exact(tmp_path):
    net = netlib.prepend(netlib.build_network("E", seed=2), defenses.defense_as_layers(defenses.JpegApproxSpec()))
    path = tmp_path / "m.cian"
    netlib.save(net, path)
    back = netlib.load(path)
    assert netlib.to_bytes(back) == path.read_bytes()
    x = np.random.default_rng(0).random((100, 32, 32, 3)).astype(np.float32)
    assert np.array_equal(back.logits(x), net.logits(x))


def test_header_layout():
    net = small_net()
    data = netlib.to_bytes(net)
    assert data[:4] == b"CIAN"
    assert struct.unpack("<6I", data[4:28]) == (1, 5, 8, 8, 3, 5)


def test_bad_magic():
    data = bytearray(netlib.to_bytes(small_net()))
    data[0:4] = b"NAIC"
    with pytest.raises(netlib.BadMagicError, match="bad magic"):
        netlib.from_bytes(bytes(data))


def test_version_mismatch():
    data = bytearray(netlib.to_bytes(small_net()))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(netlib.VersionMismatchError):
        netlib.from_bytes(bytes(data))


def test_truncated_file():
    data = netlib.to_bytes(small_net())
    for cut in (2, 20, 40, len(data) - 1):
        with pytest.raises(netlib.TruncatedFileError):
            netlib.from_bytes(data[:cut])


def test_shape_contradiction():
    net = netlib.Network([netlib.Flatten(), netlib.Dense(np.ones((3, 12)))], 3, (2, 2, 3))
    data = bytearray(netlib.to_bytes(net))
    data[12:16] = struct.pack("<I", 3)  # header H: 2 -> 3, flatten now yields 18 != 12
    with pytest.raises(netlib.ShapeInconsistencyError):
        netlib.from_bytes(bytes(data))
    with pytest.raises(netlib.ShapeInconsistencyError):
        netlib.from_bytes(netlib.to_bytes(net) + b"\0\0\0\0")


def test_error_kinds_are_distinct():
    kinds = [netlib.BadMagicError, netlib.VersionMismatchError, netlib.TruncatedFileError,
             netlib.ShapeInconsistencyError]
    assert len(set(kinds)) == 4
    assert all(issubclass(k, netlib.ModelFormatError) for k in kinds)
