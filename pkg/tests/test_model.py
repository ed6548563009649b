import time

import numpy as np
import pytest

from drunet.autodiff import ShapeError, Tensor
from drunet.model import (
    CheckpointFormatError,
    ConstructionError,
    build_drunet104,
    conv_ledger,
    count_conv_layers,
    he_init,
    load_checkpoint,
    make_bottleneck_block,
    make_decoder_block,
    parameter_count,
    read_checkpoint,
    save_checkpoint,
)
from drunet.ops import INFER, TRAIN, add, batch_norm, conv2d, relu

FULL_PARAMS = 55_819_660


def conv_p(k, i, o):
    return k * k * i * o + o


def bottleneck_p(i, f, stride):
    total = 2 * i + conv_p(1, i, f) + 2 * f + conv_p(3, f, f) + 2 * f + conv_p(1, f, 4 * f)
    if i != 4 * f or stride != 1:
        total += conv_p(1, i, 4 * f)
    return total


def expected_params(in_ch=4, n_class=4, div=1):
    """Parameter total worked out layer by layer from the level table."""
    widths = [16, 32, 64, 128, 256]
    blocks = [2, 3, 3, 5, 14]
    decoder = [32, 64, 128, 256, 512]
    total, ch = 0, in_ch
    for level, (f, n) in enumerate(zip(widths, blocks)):
        f //= div
        for k in range(n):
            total += bottleneck_p(ch, f, 2 if (k == 0 and level > 0) else 1)
            ch = 4 * f
    f = 512 // div
    for k in range(4):
        total += bottleneck_p(ch, f, 2 if k == 0 else 1)
        ch = 4 * f
    for level in reversed(range(5)):
        d, skip = decoder[level] // div, 4 * widths[level] // div
        total += conv_p(2, ch, d)
        i = d + skip
        total += 2 * i + conv_p(3, i, d) + 2 * d + conv_p(3, d, d) + conv_p(1, i, d)
        ch = d
    return total + conv_p(1, ch, n_class)


@pytest.fixture(scope="module")
def full_model():
    return build_drunet104()


# -- ledger -------------------------------------------------------------------------


def test_build_is_fast_and_ledger_exact():
    t0 = time.perf_counter()
    model = build_drunet104()
    assert time.perf_counter() - t0 < 1.0
    assert count_conv_layers(model) == 104
    ledger = conv_ledger(model)
    assert ledger["encoder"] + ledger["bridge"] == 93
    assert ledger["decoder"] == 10 and ledger["head"] == 1
    assert ledger["upsample"] == 5
    assert len(model.dropout_sites) == 10
    assert len(model.skips) == 5


def test_block_counts_and_channel_trace(full_model):
    assert [len(level) for level in full_model.encoder] == [2, 3, 3, 5, 14]
    assert len(full_model.bridge) == 4
    outs = [level[-1].out_ch for level in full_model.encoder] + [full_model.bridge[-1].out_ch]
    assert outs == [64, 128, 256, 512, 1024, 2048]
    assert [d.out_ch for d in full_model.decoder] == [32, 64, 128, 256, 512]


def test_parameter_count_frozen(full_model):
    assert expected_params() == FULL_PARAMS
    assert parameter_count(full_model) == FULL_PARAMS


def test_parameter_count_matches_materialised_tensors():
    model = build_drunet104(width_divisor=4)
    assert sum(p.data.size for p in model.parameters()) == parameter_count(model) == expected_params(div=4)


@pytest.mark.parametrize("rate", [0.0, 0.2, 0.5])
def test_dropout_rate_leaves_structure_alone(rate):
    model = build_drunet104(dropout_rate=rate)
    assert conv_ledger(model) == conv_ledger(build_drunet104())
    assert parameter_count(model) == FULL_PARAMS
    assert len(model.dropout_sites) == 10


def test_other_class_count_keeps_104():
    model = build_drunet104(n_class=3)
    assert count_conv_layers(model) == 104
    assert model.head.out_ch == 3
    assert parameter_count(model) == expected_params(n_class=3)


def test_construction_errors():
    with pytest.raises(ConstructionError):
        build_drunet104(n_class=1)
    with pytest.raises(ConstructionError):
        build_drunet104(dropout_rate=1.0)
    with pytest.raises(ConstructionError):
        make_bottleneck_block(8, 2, stride=3)


# -- He init -----------------------------------------------------------------------


def test_he_init_statistics():
    w = he_init(64 * 9, (100_000,), np.random.default_rng(0))
    assert abs(w.std() / np.sqrt(2 / 576) - 1) < 0.05
    assert abs(w.mean()) < 3 * np.sqrt(2 / 576) / np.sqrt(1e5)
    v = he_init(2, (100_000,), np.random.default_rng(1))
    assert abs(v.var() - 1.0) < 0.05


def test_he_init_rejects_bad_fan_in():
    with pytest.raises(ValueError):
        he_init(0, (2,), np.random.default_rng(0))


def test_weights_deterministic_per_seed():
    a = build_drunet104(width_divisor=4, seed=7).state_dict()
    b = build_drunet104(width_divisor=4, seed=7).state_dict()
    c = build_drunet104(width_divisor=4, seed=8).state_dict()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
    assert not np.array_equal(a["enc1.0.conv2.weight"], c["enc1.0.conv2.weight"])
    # different layers draw from different streams
    assert not np.array_equal(a["enc2.1.conv2.weight"], a["enc2.2.conv2.weight"])


def test_lazy_weights_independent_of_access_order():
    a = build_drunet104(width_divisor=4, seed=3)
    b = build_drunet104(width_divisor=4, seed=3)
    late = b.head.params.weight.numpy().copy()  # touch the head first
    a.state_dict()
    np.testing.assert_array_equal(a.head.params.weight.numpy(), late)


# -- blocks -------------------------------------------------------------------------


def test_strided_bottleneck_example():
    block = make_bottleneck_block(512, 256, stride=2, seed=0)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 512, 30, 30)))
    assert block(x, INFER).shape == (1, 1024, 15, 15)


def test_identity_bottleneck_has_no_projection():
    block = make_bottleneck_block(64, 16, stride=1, seed=0)
    assert block.projection is None
    size = sum(c.size for c in block.convs()) + sum(2 * n.params.channels for n in block.norms())
    assert size == bottleneck_p(64, 16, 1)


def test_zero_residual_gives_projected_shortcut():
    block = make_bottleneck_block(8, 4, stride=2, seed=1)
    block.conv3.params.weight.data[...] = 0
    block.conv3.params.bias.data[...] = 0
    x = Tensor(np.random.default_rng(2).normal(size=(2, 8, 6, 6)))
    pre = relu(batch_norm(x, block.bn1.params, INFER))
    expected = conv2d(pre, block.projection.params)
    np.testing.assert_allclose(block(x, INFER).numpy(), expected.numpy(), rtol=1e-6, atol=1e-6)


def test_zero_residual_identity_block_is_identity():
    block = make_bottleneck_block(16, 4, stride=1, seed=1)
    block.conv3.params.weight.data[...] = 0
    block.conv3.params.bias.data[...] = 0
    x = Tensor(np.random.default_rng(2).normal(size=(1, 16, 5, 5)))
    np.testing.assert_array_equal(block(x, INFER).numpy(), x.numpy())


def test_decoder_block_example():
    block = make_decoder_block(96, 32, seed=0)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 96, 12, 12)))
    assert block(x, TRAIN).shape == (1, 32, 12, 12)
    assert block.projection is not None
    assert make_decoder_block(32, 32).projection is None


# -- forward -----------------------------------------------------------------------


def test_full_resolution_forward_and_trace(full_model):
    trace = []
    t0 = time.perf_counter()
    out = full_model.forward(Tensor(np.random.default_rng(0).random((1, 4, 240, 240))), INFER, trace=trace)
    assert time.perf_counter() - t0 < 30
    assert out.shape == (1, 4, 240, 240)
    shapes = dict(trace)
    assert [shapes[f"enc{l}"][2] for l in range(1, 6)] == [240, 120, 60, 30, 15]
    assert shapes["bridge"] == (1, 2048, 8, 8)
    for level in range(1, 6):
        up, skip = shapes[f"up{level}"], shapes[f"enc{level}"]
        assert up[2:] == skip[2:]


@pytest.mark.parametrize("size", [64, 96, 100])
def test_shapes_follow_input_extent(size):
    model = build_drunet104(width_divisor=8)
    trace = []
    out = model.forward(Tensor(np.zeros((2, 4, size, size))), INFER, trace=trace)
    assert out.shape == (2, 4, size, size)
    shapes = dict(trace)
    for level in range(1, 6):
        assert shapes[f"up{level}"][2:] == shapes[f"enc{level}"][2:]


def test_forward_input_checks():
    model = build_drunet104(width_divisor=8)
    with pytest.raises(ShapeError, match="channels"):
        model.forward(Tensor(np.zeros((1, 3, 64, 64))))
    with pytest.raises(ShapeError, match="minimum"):
        model.forward(Tensor(np.zeros((1, 4, 16, 64))))


def test_infer_mode_is_deterministic():
    model = build_drunet104(width_divisor=8, dropout_rate=0.5)
    x = Tensor(np.random.default_rng(0).random((1, 4, 64, 64)))
    np.testing.assert_array_equal(model.forward(x, INFER).numpy(), model.forward(x, INFER).numpy())


def test_train_mode_dropout_varies():
    model = build_drunet104(width_divisor=8, dropout_rate=0.5)
    x = Tensor(np.random.default_rng(0).random((2, 4, 64, 64)))
    assert not np.array_equal(model.forward(x, TRAIN).numpy(), model.forward(x, TRAIN).numpy())


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = build_drunet104(width_divisor=4, dropout_rate=0.5, seed=11)
    model.norms()[3].params.running_mean[...] = 1.25  # make running stats non-trivial
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {"adam/t": np.array([3.0])})
    back, extra = load_checkpoint(path, seed=99)
    assert back.dropout_rate == 0.5 and back.width_divisor == 4
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(back.state_dict()[name], value, err_msg=name)
    assert list(extra) == ["adam/t"]
    save_checkpoint(tmp_path / "again.ckpt", back, extra)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
    x = Tensor(np.random.default_rng(0).random((1, 4, 64, 64)))
    np.testing.assert_array_equal(model.forward(x).numpy(), back.forward(x).numpy())


def test_checkpoint_format_errors(tmp_path):
    model = build_drunet104(width_divisor=8)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    blob = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"X" + blob[1:])
    with pytest.raises(CheckpointFormatError, match="magic"):
        read_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "short.ckpt").write_bytes(blob[:-10])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        read_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "long.ckpt").write_bytes(blob + b"\0")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        read_checkpoint(tmp_path / "long.ckpt")


def test_load_state_dict_rejects_wrong_shapes():
    small = build_drunet104(width_divisor=8)
    with pytest.raises(CheckpointFormatError, match="shape"):
        small.load_state_dict(build_drunet104(width_divisor=4).state_dict())
    state = small.state_dict()
    del state["head.bias"]
    with pytest.raises(CheckpointFormatError, match="missing"):
        build_drunet104(width_divisor=8).load_state_dict(state)


def test_add_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 4, 3))))
