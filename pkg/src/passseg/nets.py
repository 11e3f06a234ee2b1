"""Segmentor, discriminators and shape encoder, plus the checkpoint file format.

Networks are plain dictionaries of named parameter tensors (:class:`ParamStore`)
and stateless forward functions. Every 3x3 convolution is followed by instance
normalization and a leaky ReLU; those convolutions carry no bias because the
normalization removes it.

Checkpoint format (all integers little-endian uint32)::

    b"PASSCKPT" | version | count | count x record
    record = name_len | name (utf-8) | rank | rank x extent | float32 LE values
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import ShapeError, Tensor

SIDE_FACTORS = (8, 4, 2, 1)
DISCRIMINATOR_SCALES = (8, 4, 2, 1)
CHECKPOINT_MAGIC = b"PASSCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    base_resolution: int = 64
    image_channels: int = 1
    mask_channels: int = 1
    base_filters: int = 16
    depth: int = 5
    latent_dim: int = 256
    slope: float = 0.2
    dropout: float = 0.25
    encoder_input: str = "stacked"

    def validate(self) -> "NetworkSpec":
        r = self.base_resolution
        if r <= 0 or r & (r - 1):
            raise ConfigError(f"base_resolution must be a power of two, got {r}")
        if self.depth < 4:
            raise ConfigError(f"depth must be at least 4 to expose a base/8 side output, got {self.depth}")
        if r % (2 ** self.depth) or r < 16:
            raise ConfigError(f"base_resolution {r} is not divisible by 2^depth = {2 ** self.depth}")
        if self.image_channels not in (1, 3) or self.mask_channels != 1:
            raise ConfigError("image_channels must be 1 or 3 and mask_channels 1")
        if self.base_filters < 1:
            raise ConfigError("base_filters must be positive")
        if self.encoder_input not in ("stacked", "mask_only"):
            raise ConfigError(f"encoder_input must be 'stacked' or 'mask_only', got {self.encoder_input!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self

    @property
    def pair_channels(self) -> int:
        return self.image_channels + self.mask_channels

    def side_resolutions(self) -> tuple[int, ...]:
        return tuple(self.base_resolution // f for f in SIDE_FACTORS)


@dataclass
class ParamStore:
    """Flat, ordered collection of the learnable tensors of one network."""

    kind: str
    spec: NetworkSpec
    scale: int = 1
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise DataError(f"checkpoint lacks parameter {name!r}")
            if arrays[name].shape != p.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint {arrays[name].shape} vs {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float32)
            p.grad = None

    def _add(self, name: str, shape: tuple[int, ...], rng: np.random.Generator,
             init: str = "he", fan_in: int | None = None) -> None:
        if init == "he":
            bound = np.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, shape)
        elif init == "ones":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _conv(self, name: str, k: int, cin: int, cout: int, rng, bias: bool = False) -> None:
        self._add(f"{name}.w", (k, k, cin, cout), rng, fan_in=k * k * cin)
        if bias:
            self._add(f"{name}.b", (cout,), rng, init="zeros")

    def _norm(self, name: str, c: int, rng) -> None:
        self._add(f"{name}.gain", (c,), rng, init="ones")
        self._add(f"{name}.shift", (c,), rng, init="zeros")

    def _block(self, name: str, cin: int, cout: int, rng) -> None:
        self._conv(f"{name}.conv_a", 3, cin, cout, rng)
        self._norm(f"{name}.norm_a", cout, rng)
        self._conv(f"{name}.conv_b", 3, cout, cout, rng)
        self._norm(f"{name}.norm_b", cout, rng)


@dataclass
class SegmentorOutput:
    y8: Tensor
    y4: Tensor
    y2: Tensor
    y1: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.y8, self.y4, self.y2, self.y1]


@dataclass
class DiscriminatorOutput:
    prob: Tensor
    features: Tensor


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _filters(spec: NetworkSpec, level: int) -> int:
    return spec.base_filters * 2 ** level


def build_segmentor(spec: NetworkSpec, seed: int = 0) -> ParamStore:
    spec.validate()
    rng = _rng(seed, 0)
    store = ParamStore("segmentor", spec)
    cin = spec.image_channels
    for level in range(spec.depth):
        store._block(f"enc{level}", cin, _filters(spec, level), rng)
        cin = _filters(spec, level)
    for level in range(spec.depth - 2, -1, -1):
        c = _filters(spec, level)
        store._conv(f"dec{level}.up", 3, _filters(spec, level + 1), c, rng)
        store._norm(f"dec{level}.up_norm", c, rng)
        store._block(f"dec{level}", 2 * c, c, rng)
    for factor in SIDE_FACTORS:
        level = factor.bit_length() - 1
        store._conv(f"head{factor}", 1, _filters(spec, level), spec.mask_channels, rng, bias=True)
    return store


def build_discriminator(scale: int, spec: NetworkSpec, seed: int = 0) -> ParamStore:
    """Discriminator for stacked (image, mask) pairs at ``base / scale``.

    Coarser discriminators keep only the deeper stages, so all four end in a
    ``base/16 x base/16 x 8*base_filters`` feature map.
    """
    if scale not in DISCRIMINATOR_SCALES:
        raise ConfigError(f"discriminator scale must be one of 1, 2, 4, 8; got {scale}")
    spec.validate()
    rng = _rng(seed, 10 + scale)
    store = ParamStore("discriminator", spec, scale=scale)
    first = scale.bit_length() - 1
    cin = spec.pair_channels
    for stage, level in enumerate(range(first, 4)):
        store._block(f"stage{stage}", cin, _filters(spec, level), rng)
        cin = _filters(spec, level)
    side = spec.base_resolution // 16
    store._add("dense.w", (side * side * cin, 1), rng, fan_in=side * side * cin)
    store._add("dense.b", (1,), rng, init="zeros")
    return store


def build_encoder(spec: NetworkSpec, seed: int = 0) -> ParamStore:
    spec.validate()
    rng = _rng(seed, 20)
    store = ParamStore("encoder", spec)
    cin = spec.pair_channels if spec.encoder_input == "stacked" else spec.mask_channels
    for level in range(5):
        store._block(f"stage{level}", cin, _filters(spec, level), rng)
        cin = _filters(spec, level)
    side = spec.base_resolution // 16
    store._add("dense.w", (side * side * cin, spec.latent_dim), rng, fan_in=side * side * cin)
    store._add("dense.b", (spec.latent_dim,), rng, init="zeros")
    return store


# ---------------------------------------------------------------------------
# forward passes


class _Tracer:
    """Optional recorder of (layer name, input shape, output shape)."""

    def __init__(self, sink: list | None):
        self.sink = sink

    def __call__(self, name: str, x: Tensor, y: Tensor) -> Tensor:
        if self.sink is not None:
            self.sink.append((name, tuple(x.shape[1:]), tuple(y.shape[1:])))
        return y


def _conv_norm(p: ParamStore, name: str, norm: str, x: Tensor) -> Tensor:
    y = T.conv2d(x, p[f"{name}.w"])
    y = T.instance_norm(y, p[f"{norm}.gain"], p[f"{norm}.shift"])
    return T.leaky_relu(y, p.spec.slope)


def _block(p: ParamStore, name: str, x: Tensor, trace: _Tracer, label: str) -> Tensor:
    h = trace(f"{label}a", x, _conv_norm(p, f"{name}.conv_a", f"{name}.norm_a", x))
    return trace(f"{label}b", h, _conv_norm(p, f"{name}.conv_b", f"{name}.norm_b", h))


def _check_input(x: Tensor, resolution: int, channels: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1:] != (resolution, resolution, channels):
        raise ShapeError(f"{what} must be [N, {resolution}, {resolution}, {channels}], got {x.shape}")


def forward_segmentor(p: ParamStore, images: Tensor, train: bool = False,
                      rng: np.random.Generator | None = None,
                      trace: list | None = None) -> SegmentorOutput:
    """Side outputs at base/8, base/4, base/2 and base, each in (0, 1).

    With ``train=True`` inverted dropout is applied after every encoder stage
    using ``rng``.
    """
    spec = p.spec
    _check_input(images, spec.base_resolution, spec.image_channels, "segmentor input")
    tr = _Tracer(trace)
    skips = []
    h = images
    for level in range(spec.depth):
        h = _block(p, f"enc{level}", h, tr, f"Conv layer - {level + 1}")
        if train and spec.dropout > 0:
            h = T.dropout(h, spec.dropout, rng)
        if level < spec.depth - 1:
            skips.append(h)
            h = tr(f"Max pool - {level + 1}", h, T.maxpool2(h))
    features = {spec.depth - 1: h}
    for level in range(spec.depth - 2, -1, -1):
        up = T.upsample2(h)
        up = tr(f"Up conv - {level + 1}", up, _conv_norm(p, f"dec{level}.up", f"dec{level}.up_norm", up))
        h = T.concat([up, skips[level]], axis=-1)
        h = _block(p, f"dec{level}", h, tr, f"Decoder conv - {level + 1}")
        features[level] = h
    outs = []
    for factor in SIDE_FACTORS:
        f = features[factor.bit_length() - 1]
        y = T.sigmoid(T.conv2d(f, p[f"head{factor}.w"], p[f"head{factor}.b"]))
        outs.append(tr(f"Side output - x/{factor}", f, y))
    return SegmentorOutput(*outs)


def forward_discriminator(p: ParamStore, image: Tensor, mask: Tensor,
                          trace: list | None = None) -> DiscriminatorOutput:
    spec = p.spec
    res = spec.base_resolution // p.scale
    _check_input(image, res, spec.image_channels, f"D{p.scale} image")
    _check_input(mask, res, spec.mask_channels, f"D{p.scale} mask")
    tr = _Tracer(trace)
    h = T.concat([image, mask], axis=-1)
    stages = 4 - (p.scale.bit_length() - 1)
    for stage in range(stages):
        h = _block(p, f"stage{stage}", h, tr, f"Conv layer - {stage + 1}")
        h = tr(f"Max pool - {stage + 1}", h, T.maxpool2(h))
    features = h
    flat = T.flatten(h)
    if trace is not None:
        trace.append((f"discriminator flatten - {stages}", tuple(h.shape[1:]), tuple(flat.shape[1:])))
    logit = tr("discriminator dense - l", flat, T.dense(flat, p["dense.w"], p["dense.b"]))
    return DiscriminatorOutput(T.sigmoid(logit), features)


def forward_encoder(p: ParamStore, image: Tensor, mask: Tensor,
                    trace: list | None = None) -> Tensor:
    """Latent code of shape [N, latent_dim] for an (image, mask) pair."""
    spec = p.spec
    res = spec.base_resolution
    _check_input(mask, res, spec.mask_channels, "encoder mask")
    if spec.encoder_input == "stacked":
        _check_input(image, res, spec.image_channels, "encoder image")
        h = T.concat([image, mask], axis=-1)
    else:
        h = mask
    tr = _Tracer(trace)
    for level in range(5):
        h = _block(p, f"stage{level}", h, tr, f"Conv layer - {level + 1}")
        if level < 4:
            h = tr(f"Max pool - {level + 1}", h, T.maxpool2(h))
    flat = T.flatten(h)
    if trace is not None:
        trace.append(("encoder flatten - 5", tuple(h.shape[1:]), tuple(flat.shape[1:])))
    return tr("encoder dense - z", flat, T.dense(flat, p["dense.w"], p["dense.b"]))


def downsample(x: Tensor, factor: int) -> Tensor:
    """Average-pool an image by a power-of-two factor (no gradient)."""
    with T.no_grad():
        out = Tensor(x.data)
        while factor > 1:
            out = T.avgpool2(out)
            factor //= 2
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    return out


@dataclass
class PassNetworks:
    """The full set of PASS networks built from one spec."""

    spec: NetworkSpec
    segmentor: ParamStore
    discriminators: dict[int, ParamStore]
    encoder: ParamStore

    @classmethod
    def build(cls, spec: NetworkSpec, seed: int = 0) -> "PassNetworks":
        return cls(spec, build_segmentor(spec, seed),
                   {s: build_discriminator(s, spec, seed) for s in DISCRIMINATOR_SCALES},
                   build_encoder(spec, seed))

    def stores(self) -> dict[str, ParamStore]:
        out = {"S": self.segmentor}
        out.update({f"D{s}": d for s, d in self.discriminators.items()})
        out["E"] = self.encoder
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"{prefix}/{name}": arr
                for prefix, store in self.stores().items() for name, arr in store.arrays().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for prefix, store in self.stores().items():
            store.load_arrays({k[len(prefix) + 1:]: v for k, v in arrays.items()
                               if k.startswith(prefix + "/")})


def spec_to_dict(spec: NetworkSpec) -> dict:
    return asdict(spec)
