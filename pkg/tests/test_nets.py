import struct

import numpy as np
import pytest

from passseg import nets
from passseg import tensor as T
from passseg.errors import ConfigError, DataError
from passseg.nets import NetworkSpec
from passseg.tensor import ShapeError, Tensor

from oracles import GOLDEN_D, GOLDEN_E, compare_trace

DESK = NetworkSpec(64, 1, 1, 4, 4)
FULL = NetworkSpec(256, 3, 1, 16, 5)


@pytest.fixture(scope="module")
def full_traces():
    """Traces from a zero-weight run at full scale (values are irrelevant to shapes)."""
    out = {}
    with T.no_grad():
        e = nets.build_encoder(FULL)
        trace = []
        z = nets.forward_encoder(e, Tensor(np.zeros((1, 256, 256, 3))), Tensor(np.zeros((1, 256, 256, 1))), trace)
        out["E"] = (trace, z.shape)
        for s in (1, 2, 4, 8):
            d = nets.build_discriminator(s, FULL)
            r = 256 // s
            trace = []
            o = nets.forward_discriminator(d, Tensor(np.zeros((1, r, r, 3))), Tensor(np.zeros((1, r, r, 1))), trace)
            out[s] = (trace, o.features.shape)
    return out


def test_full_scale_encoder_table(full_traces):
    trace, zshape = full_traces["E"]
    compare_trace(trace, GOLDEN_E, 4)
    assert zshape == (1, 256)


@pytest.mark.parametrize("scale", [1, 2, 4, 8])
def test_full_scale_discriminator_tables(full_traces, scale):
    trace, feat = full_traces[scale]
    compare_trace(trace, GOLDEN_D[scale], 4)
    assert feat == (1, 16, 16, 128)


def test_full_scale_segmentor_filters():
    s = nets.build_segmentor(FULL)
    assert [s[f"enc{i}.conv_b.w"].shape[-1] for i in range(5)] == [16, 32, 64, 128, 256]


def test_desk_segmentor_side_outputs():
    s = nets.build_segmentor(DESK)
    with T.no_grad():
        out = nets.forward_segmentor(s, Tensor(np.random.default_rng(0).random((2, 64, 64, 1))))
    assert [y.shape for y in out.as_list()] == [(2, 8, 8, 1), (2, 16, 16, 1), (2, 32, 32, 1), (2, 64, 64, 1)]
    for y in out.as_list():
        assert np.all((y.data > 0) & (y.data < 1))
    assert out.y1 is out.as_list()[-1]


@pytest.mark.parametrize("spec", [DESK, NetworkSpec(32, 1, 1, 2, 4), NetworkSpec(64, 3, 1, 4, 5),
                                  NetworkSpec(128, 1, 1, 2, 5)])
def test_side_resolutions_for_valid_specs(spec):
    assert spec.side_resolutions() == tuple(spec.base_resolution // f for f in (8, 4, 2, 1))
    with T.no_grad():
        out = nets.forward_segmentor(nets.build_segmentor(spec),
                                     Tensor(np.zeros((1, spec.base_resolution, spec.base_resolution,
                                                      spec.image_channels))))
    assert tuple(y.shape[1] for y in out.as_list()) == spec.side_resolutions()


def _segmentor_count(spec):
    f = [spec.base_filters * 2 ** i for i in range(spec.depth)]

    def block(cin, cout):
        return 9 * cin * cout + 9 * cout * cout + 4 * cout

    n, cin = 0, spec.image_channels
    for c in f:
        n += block(cin, c)
        cin = c
    for lvl in range(spec.depth - 2, -1, -1):
        n += 9 * f[lvl + 1] * f[lvl] + 2 * f[lvl] + block(2 * f[lvl], f[lvl])
    return n + sum(f[i] + 1 for i in (3, 2, 1, 0))


def _disc_count(spec, scale):
    f = [spec.base_filters * 2 ** i for i in range(4)]
    n, cin = 0, spec.pair_channels
    for lvl in range(int(np.log2(scale)), 4):
        n += 9 * cin * f[lvl] + 9 * f[lvl] ** 2 + 4 * f[lvl]
        cin = f[lvl]
    return n + (spec.base_resolution // 16) ** 2 * cin + 1


def _encoder_count(spec):
    n, cin = 0, spec.pair_channels
    for lvl in range(5):
        c = spec.base_filters * 2 ** lvl
        n += 9 * cin * c + 9 * c * c + 4 * c
        cin = c
    return n + (spec.base_resolution // 16) ** 2 * cin * 256 + 256


GOLDEN_COUNTS = {
    # (S, D1, D2, D4, D8, E)
    DESK: (33916, 19113, 18737, 17121, 10433, 336552),
    FULL: (2160644, 326913, 320513, 293889, 185345, 17957376),
}


@pytest.mark.parametrize("spec", [DESK, FULL])
def test_parameter_counts(spec):
    counts = (nets.build_segmentor(spec).count(),
              *[nets.build_discriminator(s, spec).count() for s in (1, 2, 4, 8)],
              nets.build_encoder(spec).count())
    derived = (_segmentor_count(spec), *[_disc_count(spec, s) for s in (1, 2, 4, 8)], _encoder_count(spec))
    assert counts == derived
    assert counts == GOLDEN_COUNTS[spec]


def test_spec_validation():
    with pytest.raises(ConfigError):
        NetworkSpec(96, 1, 1, 4, 4).validate()  # not a power of two
    with pytest.raises(ConfigError):
        NetworkSpec(32, 1, 1, 4, 6).validate()  # not divisible by 2^depth
    with pytest.raises(ConfigError):
        NetworkSpec(64, 1, 1, 4, 3).validate()
    with pytest.raises(ConfigError):
        nets.build_discriminator(3, DESK)


def test_forward_shape_errors():
    with pytest.raises(ShapeError):
        nets.forward_segmentor(nets.build_segmentor(DESK), Tensor(np.zeros((1, 32, 32, 1))))
    d = nets.build_discriminator(2, DESK)
    with pytest.raises(ShapeError):
        nets.forward_discriminator(d, Tensor(np.zeros((1, 64, 64, 1))), Tensor(np.zeros((1, 64, 64, 1))))


def test_discriminator_and_encoder_outputs():
    rng = np.random.default_rng(1)
    x = Tensor(rng.random((2, 64, 64, 1)))
    y = Tensor((rng.random((2, 64, 64, 1)) > 0.5).astype(np.float32))
    with T.no_grad():
        for s in (1, 2, 4, 8):
            d = nets.build_discriminator(s, DESK)
            o = nets.forward_discriminator(d, nets.downsample(x, s), nets.downsample(y, s))
            assert o.prob.shape == (2, 1) and np.all((o.prob.data > 0) & (o.prob.data < 1))
            assert o.features.shape == (2, 4, 4, 32)
        e = nets.build_encoder(DESK)
        z1, z2 = nets.forward_encoder(e, x, y), nets.forward_encoder(e, x, y)
        assert z1.shape == (2, 256)
        assert z1.data.tobytes() == z2.data.tobytes()
        m = nets.build_encoder(NetworkSpec(64, 1, 1, 4, 4, encoder_input="mask_only"))
        assert nets.forward_encoder(m, x, y).shape == (2, 256)


def test_zero_image_finite():
    with T.no_grad():
        out = nets.forward_segmentor(nets.build_segmentor(DESK), Tensor(np.zeros((1, 64, 64, 1))))
    assert all(np.all(np.isfinite(y.data)) for y in out.as_list())


def test_dropout_only_in_training():
    s = nets.build_segmentor(DESK)
    x = Tensor(np.random.default_rng(0).random((1, 64, 64, 1)))
    with T.no_grad():
        a = nets.forward_segmentor(s, x).y1.data
        b = nets.forward_segmentor(s, x).y1.data
        c = nets.forward_segmentor(s, x, train=True, rng=np.random.default_rng(0)).y1.data
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_build_deterministic_and_seeded():
    a, b = nets.PassNetworks.build(DESK, 3), nets.PassNetworks.build(DESK, 3)
    c = nets.PassNetworks.build(DESK, 4)
    for k, v in a.arrays().items():
        assert v.tobytes() == b.arrays()[k].tobytes()
    assert any(not np.array_equal(v, c.arrays()[k]) for k, v in a.arrays().items())


def test_checkpoint_roundtrip_and_layout(tmp_path):
    nw = nets.PassNetworks.build(DESK, 1)
    path = tmp_path / "n.ckpt"
    nets.save_checkpoint(path, nw.arrays())
    back = nets.load_checkpoint(path)
    assert list(back) == list(nw.arrays())
    for k, v in nw.arrays().items():
        assert back[k].tobytes() == v.tobytes()

    # hand-decode the first record
    blob = path.read_bytes()
    assert blob[:8] == b"PASSCKPT"
    version, count = struct.unpack_from("<II", blob, 8)
    assert version == 1 and count == len(back)
    (n,) = struct.unpack_from("<I", blob, 16)
    name = blob[20:20 + n].decode()
    assert name == next(iter(back))

    other = nets.PassNetworks.build(DESK, 9)
    other.load_arrays(back)
    assert other.segmentor["enc0.conv_a.w"].data.tobytes() == nw.segmentor["enc0.conv_a.w"].data.tobytes()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(DataError):
        nets.load_checkpoint(bad)
    s = nets.build_segmentor(DESK)
    with pytest.raises(DataError):
        s.load_arrays({})
