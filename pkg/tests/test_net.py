"""Descriptor network: shapes, parameter count, serialization, gradients."""

import numpy as np
import pytest

from bagdesc.net import (
    FULL_PARAM_COUNT,
    IntegrityError,
    Patch,
    REDUCED_CHANNELS,
    REDUCED_DESCRIPTOR_DIM,
    describe,
    forward,
    forward_bag,
    init_net,
    load_net,
    save_net,
)
from bagdesc.tensor import (
    DegenerateInputError,
    ShapeError,
    Tensor,
    affine,
    conv2d,
    finite_diff_gradcheck,
    flatten,
    l2_normalize,
    maxpool2x2,
    relu,
)

RNG = np.random.default_rng(42)


def random_patch(rng):
    return rng.uniform(0.0, 1.0, (3, 32, 32))


def test_param_count_is_exact():
    for seed in (0, 1, 99):
        assert init_net(seed).param_count == FULL_PARAM_COUNT == 185_504


def test_init_deterministic_and_seed_sensitive():
    a, b = init_net(5), init_net(5)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
    c = init_net(6)
    assert any(
        not np.array_equal(a.params[name].data, c.params[name].data) for name in a.params
    )


def test_init_scales_and_zero_biases():
    net = init_net(3)
    for name, tensor in net.params.items():
        if name.endswith("_b"):
            assert np.array_equal(tensor.data, np.zeros_like(tensor.data))
        else:
            fan_in = int(np.prod(tensor.data.shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            assert np.max(np.abs(tensor.data)) <= bound
            # uniform draws should come close to the bound
            assert np.max(np.abs(tensor.data)) > 0.8 * bound


def test_forward_pipeline_shapes_layer_by_layer():
    net = init_net(0)
    p = net.params
    x = Tensor(random_patch(RNG))
    a1 = relu(conv2d(x, p["conv1_w"], p["conv1_b"], stride=1))
    assert a1.data.shape == (32, 30, 30)
    a2 = relu(conv2d(a1, p["conv2_w"], p["conv2_b"], stride=2))
    assert a2.data.shape == (64, 14, 14)
    a3 = conv2d(a2, p["conv3_w"], p["conv3_b"], stride=1)
    assert a3.data.shape == (128, 12, 12)
    a3p = maxpool2x2(a3)
    assert a3p.data.shape == (128, 6, 6)
    a4 = conv2d(a3p, p["conv4_w"], p["conv4_b"], stride=1)
    assert a4.data.shape == (32, 6, 6)
    flat = flatten(a4)
    assert flat.data.shape == (1152,)
    out = l2_normalize(affine(flat, p["fc_w"], p["fc_b"]))
    assert out.data.shape == (64,)
    assert np.array_equal(out.data, forward(net, x.data).data)


def test_forward_unit_norm_and_determinism():
    net = init_net(7)
    patch = random_patch(np.random.default_rng(3))
    d1 = forward(net, patch).data
    d2 = forward(net, patch).data
    assert abs(np.linalg.norm(d1) - 1.0) < 1e-9
    assert np.array_equal(d1, d2)


def test_forward_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        forward(init_net(0), np.zeros((3, 16, 16)))


def test_zero_patch_with_zero_biases_is_degenerate():
    net = init_net(0)  # biases start at zero
    with pytest.raises(DegenerateInputError):
        forward(net, np.zeros((3, 32, 32)))


def test_patch_clamps_and_validates():
    p = Patch(np.linspace(-1.0, 2.0, 3 * 32 * 32).reshape(3, 32, 32))
    assert p.pixels.min() >= 0.0 and p.pixels.max() <= 1.0
    with pytest.raises(ShapeError):
        Patch(np.zeros((3, 16, 16)))


def test_forward_bag_rows():
    net = init_net(1)
    rng = np.random.default_rng(0)
    patch = random_patch(rng)
    same = np.stack([patch] * 5)
    rows = forward_bag(net, same).data
    assert rows.shape == (5, 64)
    for i in range(1, 5):
        # BLAS tail blocks can round identical columns apart by 1 ulp
        assert np.max(np.abs(rows[0] - rows[i])) < 1e-12

    stack = rng.uniform(0, 1, (32, 3, 32, 32))
    rows = forward_bag(net, stack).data
    assert rows.shape == (32, 64)
    norms = np.linalg.norm(rows, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-9
    gram_diag = np.diag(rows @ rows.T)
    assert np.max(np.abs(gram_diag - 1.0)) < 1e-8


def test_describe_matches_forward():
    net = init_net(4)
    stack = np.random.default_rng(8).uniform(0, 1, (7, 3, 32, 32))
    a = describe(net, stack, chunk=3)
    b = forward_bag(net, stack).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_save_load_round_trip(tmp_path):
    net = init_net(11)
    path = tmp_path / "model.net"
    save_net(net, path)
    loaded = load_net(path)
    # disk format is float32; the first save quantizes, after that the
    # round trip is exact
    for name in net.params:
        assert np.array_equal(
            loaded.params[name].data, net.params[name].data.astype(np.float32).astype(np.float64)
        )
    path2 = tmp_path / "model2.net"
    save_net(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()
    reloaded = load_net(path2)
    probe = random_patch(np.random.default_rng(2))
    assert np.array_equal(forward(loaded, probe).data, forward(reloaded, probe).data)


def test_load_rejects_corruption(tmp_path):
    net = init_net(0)
    path = tmp_path / "model.net"
    save_net(net, path)
    raw = path.read_bytes()

    truncated = tmp_path / "truncated.net"
    truncated.write_bytes(raw[:-17])
    with pytest.raises(IntegrityError):
        load_net(truncated)

    bad_magic = tmp_path / "magic.net"
    bad_magic.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(IntegrityError):
        load_net(bad_magic)

    nan_payload = tmp_path / "nan.net"
    header_end = raw.index(b"\n") + 1
    payload = bytearray(raw)
    payload[header_end : header_end + 4] = np.array([np.nan], "<f4").tobytes()
    nan_payload.write_bytes(bytes(payload))
    with pytest.raises(IntegrityError):
        load_net(nan_payload)


def test_load_rejects_wrong_parameter_count(tmp_path):
    net = init_net(0, channels=REDUCED_CHANNELS, descriptor_dim=REDUCED_DESCRIPTOR_DIM)
    path = tmp_path / "small.net"
    save_net(net, path)
    with pytest.raises(ShapeError):
        load_net(path)


def test_reduced_net_end_to_end_gradients():
    net = init_net(9, channels=REDUCED_CHANNELS, descriptor_dim=REDUCED_DESCRIPTOR_DIM)
    rng = np.random.default_rng(17)
    patch = rng.uniform(0.05, 0.95, (3, 32, 32))
    probe = rng.normal(size=REDUCED_DESCRIPTOR_DIM)
    for name in net.params:
        original = net.params[name]

        def objective(t, name=name, original=original):
            net.params[name] = t
            try:
                d = forward(net, patch)
                return Tensor(
                    float(d.data @ probe), (d,), lambda g: d.accumulate_grad(float(g) * probe)
                )
            finally:
                net.params[name] = original

        assert finite_diff_gradcheck(objective, original, h=1e-6) < 1e-4
