"""Reduction lenses: map a K x T embedding matrix to a fixed D vector.

Three lens kinds are supported: parameter-less mean pooling, a single
affine layer with relu + max pooling over time ("simple"), and a gated
convolutional encoder/controller stack with a fusion layer ("gatedconv").
Lens checkpoints use the CLLP binary format (bit-exact round trip).
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tl
from .corpus import (
    BadMagicError,
    CorpusFormatError,
    EmbeddingCorpus,
    TruncatedFileError,
    VersionMismatchError,
    _Cursor,
    _read_exact,
)
from .tensor import ConfigError, DimensionError, EmptySequenceError, Tape, Tensor

__all__ = [
    "MeanPoolLens",
    "SimpleLens",
    "GatedConvLens",
    "LensParameters",
    "EncodeError",
    "init_simple_lens",
    "init_gatedconv_lens",
    "encode_meanpool",
    "encode_simple",
    "encode_gatedconv",
    "encode",
    "batch_encode",
    "save_lens",
    "load_lens",
]

CLLP_MAGIC = b"CLLP"
CLLP_VERSION = 1

_KIND_TAGS = {"meanpool": 0, "simple": 1, "gatedconv": 2}
_ACT_TAGS = {"relu": 0, "tanh": 1, "sigmoid": 2}


class EncodeError(RuntimeError):
    """Encoding a specific record failed; the message names its id."""


@dataclass
class MeanPoolLens:
    """Column mean of E; no parameters, output dimension equals K."""

    dim: int
    kind = "meanpool"

    @property
    def input_dim(self) -> int:
        return self.dim

    @property
    def output_dim(self) -> int:
        return self.dim

    def parameters(self) -> list[Tensor]:
        return []


@dataclass
class SimpleLens:
    """Per-column affine transform + activation, max pooled over time."""

    weight: Tensor
    bias: Tensor
    activation: str = "relu"
    kind = "simple"

    def __post_init__(self):
        if self.weight.data.ndim != 2 or self.bias.data.shape != (self.weight.data.shape[0],):
            raise DimensionError("simple lens needs (D, K) weight and (D,) bias")
        if self.activation not in tl.ACTIVATION_KINDS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.weight.data.shape[1]

    @property
    def output_dim(self) -> int:
        return self.weight.data.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class GatedConvLens:
    """Gated convolutional lens.

    Layer 0 of both stacks is a linear projection into the gating channels;
    layers 1..M are same-padded width-w convolutions. The controller mirrors
    the encoder shapes exactly and ends in a sigmoid (the encoder ends in
    tanh); their fusion is H_M * G_M + G_0 followed by an affine layer,
    activation and max pooling over time.
    """

    encoder_weights: list[Tensor]
    encoder_biases: list[Tensor]
    controller_weights: list[Tensor]
    controller_biases: list[Tensor]
    fusion_weight: Tensor
    fusion_bias: Tensor
    encoder_activations: list[str] = field(default_factory=list)
    controller_activations: list[str] = field(default_factory=list)
    fusion_activation: str = "relu"
    kind = "gatedconv"

    def __post_init__(self):
        n = len(self.encoder_weights)
        if n < 2:
            raise ConfigError("gatedconv needs at least one convolution layer")
        if not self.encoder_activations:
            self.encoder_activations = ["relu"] * (n - 1) + ["tanh"]
        if not self.controller_activations:
            self.controller_activations = ["relu"] * (n - 1) + ["sigmoid"]
        same = (len(self.controller_weights) == n
                and all(e.data.shape == c.data.shape
                        for e, c in zip(self.encoder_weights, self.controller_weights))
                and all(e.data.shape == c.data.shape
                        for e, c in zip(self.encoder_biases, self.controller_biases)))
        if not same:
            raise DimensionError("encoder and controller stacks must have identical shapes")
        if len(self.encoder_activations) != n or len(self.controller_activations) != n:
            raise ConfigError("one activation kind per stack layer required")

    @property
    def depth(self) -> int:
        return len(self.encoder_weights) - 1

    @property
    def width(self) -> int:
        return self.encoder_weights[1].data.shape[2]

    @property
    def channels(self) -> int:
        return self.encoder_weights[0].data.shape[0]

    @property
    def input_dim(self) -> int:
        return self.encoder_weights[0].data.shape[1]

    @property
    def output_dim(self) -> int:
        return self.fusion_weight.data.shape[0]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.encoder_weights, self.encoder_biases):
            out.extend([w, b])
        for w, b in zip(self.controller_weights, self.controller_biases):
            out.extend([w, b])
        out.extend([self.fusion_weight, self.fusion_bias])
        return out


LensParameters = MeanPoolLens | SimpleLens | GatedConvLens


def init_simple_lens(rng: np.random.Generator, output_dim: int, input_dim: int,
                     activation: str = "relu", dtype=np.float32) -> SimpleLens:
    scale = np.sqrt(2.0 / input_dim)
    weight = Tensor(scale * rng.standard_normal((output_dim, input_dim)), dtype=dtype)
    bias = Tensor(np.zeros(output_dim), dtype=dtype)
    return SimpleLens(weight, bias, activation)


def init_gatedconv_lens(rng: np.random.Generator, output_dim: int, input_dim: int,
                        channels: int = 128, depth: int = 2, width: int = 3,
                        dtype=np.float32) -> GatedConvLens:
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    if width % 2 == 0:
        raise ConfigError("convolution width must be odd")

    def stack():
        weights = [Tensor(np.sqrt(2.0 / input_dim)
                          * rng.standard_normal((channels, input_dim)), dtype=dtype)]
        biases = [Tensor(np.zeros(channels), dtype=dtype)]
        for _ in range(depth):
            weights.append(Tensor(np.sqrt(2.0 / (channels * width))
                                  * rng.standard_normal((channels, channels, width)),
                                  dtype=dtype))
            biases.append(Tensor(np.zeros(channels), dtype=dtype))
        return weights, biases

    enc_w, enc_b = stack()
    ctl_w, ctl_b = stack()
    fusion_w = Tensor(np.sqrt(2.0 / channels)
                      * rng.standard_normal((output_dim, channels)), dtype=dtype)
    fusion_b = Tensor(np.zeros(output_dim), dtype=dtype)
    return GatedConvLens(enc_w, enc_b, ctl_w, ctl_b, fusion_w, fusion_b)


def _as_tensor(E) -> Tensor:
    if isinstance(E, Tensor):
        return E
    arr = np.asarray(E)
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    return Tensor(arr, dtype=dtype)


def _check_input(E: Tensor, input_dim: int) -> None:
    if E.data.ndim != 2 or E.data.shape[0] != input_dim:
        raise DimensionError(
            f"embedding matrix shape {E.data.shape} does not match lens input dim {input_dim}")
    if E.data.shape[1] == 0:
        raise EmptySequenceError("cannot encode an empty sequence")


def encode_meanpool(E) -> Tensor:
    E = _as_tensor(E)
    if E.data.ndim != 2:
        raise DimensionError(f"expected K x T matrix, got shape {E.data.shape}")
    if E.data.shape[1] == 0:
        raise EmptySequenceError("cannot encode an empty sequence")
    return Tensor._wrap(E.data.mean(axis=1))


def encode_simple(E, lens: SimpleLens, tape: Tape | None = None) -> Tensor:
    E = _as_tensor(E)
    _check_input(E, lens.input_dim)
    h = tl.linear(lens.weight, lens.bias, E, tape)
    a = tl.activation(lens.activation, h, tape)
    return tl.maxpool_time(a, tape)[0]


def encode_gatedconv(E, lens: GatedConvLens, tape: Tape | None = None) -> Tensor:
    E = _as_tensor(E)
    _check_input(E, lens.input_dim)

    def run_stack(weights, biases, acts):
        h = tl.activation(acts[0], tl.linear(weights[0], biases[0], E, tape), tape)
        first = h
        for i in range(1, len(weights)):
            h = tl.activation(acts[i], tl.conv1d_same(weights[i], biases[i], h, tape), tape)
        return first, h

    _, enc_top = run_stack(lens.encoder_weights, lens.encoder_biases,
                           lens.encoder_activations)
    ctl_first, ctl_top = run_stack(lens.controller_weights, lens.controller_biases,
                                   lens.controller_activations)
    fused = tl.elementwise("add", tl.elementwise("mul", enc_top, ctl_top, tape),
                           ctl_first, tape)
    out = tl.activation(lens.fusion_activation,
                        tl.linear(lens.fusion_weight, lens.fusion_bias, fused, tape), tape)
    return tl.maxpool_time(out, tape)[0]


def encode(E, lens: LensParameters, tape: Tape | None = None) -> Tensor:
    if lens.kind == "meanpool":
        return encode_meanpool(E)
    if lens.kind == "simple":
        return encode_simple(E, lens, tape)
    return encode_gatedconv(E, lens, tape)


def batch_encode(corpus: EmbeddingCorpus, lens: LensParameters,
                 threads: int = 1) -> tuple[np.ndarray, list[int]]:
    """Encode every record; row order equals record order.

    A failure on any record propagates as EncodeError naming its id.
    """
    if corpus.dim != lens.input_dim:
        raise DimensionError(
            f"corpus K={corpus.dim} does not match lens input dim {lens.input_dim}")
    out = np.empty((len(corpus), lens.output_dim), dtype=np.float32)

    def fill(block):
        for i in block:
            rec = corpus.records[i]
            try:
                out[i] = encode(rec.matrix, lens).data
            except Exception as exc:
                raise EncodeError(f"record {rec.id}: {exc}") from exc

    if threads <= 1 or len(corpus) < 2:
        fill(range(len(corpus)))
    else:
        blocks = np.array_split(np.arange(len(corpus)), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for fut in [pool.submit(fill, b) for b in blocks]:
                fut.result()
    return out, corpus.ids()


# ---------------------------------------------------------------------------
# CLLP lens checkpoints
# ---------------------------------------------------------------------------

def _write_tensors(f, tensors: list[Tensor]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for t in tensors:
        f.write(struct.pack("<B", t.data.ndim))
        for d in t.data.shape:
            f.write(struct.pack("<I", d))
    for t in tensors:
        f.write(t.data.astype("<f4", copy=False).tobytes())


def _read_tensors(f) -> list[Tensor]:
    count, = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
    shapes = []
    for n in range(count):
        ndim, = struct.unpack("<B", _read_exact(f, 1, f"tensor {n} rank"))
        dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, f"tensor {n} shape"))
        shapes.append(dims)
    tensors = []
    for n, dims in enumerate(shapes):
        size = math.prod(dims)  # python ints: no overflow on hostile dims
        raw = _read_exact(f, 4 * size, f"tensor {n} payload")
        tensors.append(Tensor(np.frombuffer(raw, dtype="<f4").reshape(dims)))
    return tensors


def save_lens(lens: LensParameters, path) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CLLP_MAGIC)
        f.write(struct.pack("<IB", CLLP_VERSION, _KIND_TAGS[lens.kind]))
        f.write(struct.pack("<II", lens.output_dim, lens.input_dim))
        if lens.kind == "meanpool":
            return
        if lens.kind == "simple":
            f.write(struct.pack("<B", _ACT_TAGS[lens.activation]))
            _write_tensors(f, [lens.weight, lens.bias])
            return
        f.write(struct.pack("<III", lens.depth, lens.width, lens.channels))
        for acts in (lens.encoder_activations, lens.controller_activations):
            f.write(struct.pack("<B", len(acts)))
            f.write(bytes(_ACT_TAGS[a] for a in acts))
        f.write(struct.pack("<B", _ACT_TAGS[lens.fusion_activation]))
        _write_tensors(f, lens.parameters())


def load_lens(path) -> LensParameters:
    path = Path(path)
    tag_to_act = {v: k for k, v in _ACT_TAGS.items()}
    f = _Cursor(path.read_bytes())
    magic = f.take(4, "magic") if len(f.data) >= 4 else f.data
    if magic != CLLP_MAGIC:
        raise BadMagicError(f"{path.name}: expected CLLP magic, got {magic!r}")
    version, kind_tag = struct.unpack("<IB", _read_exact(f, 5, "header"))
    if version != CLLP_VERSION:
        raise VersionMismatchError(f"{path.name}: version {version}")
    out_dim, in_dim = struct.unpack("<II", _read_exact(f, 8, "dims"))
    if kind_tag == 0:
        return MeanPoolLens(out_dim)
    if kind_tag == 1:
        act_tag, = struct.unpack("<B", _read_exact(f, 1, "activation"))
        weight, bias = _read_tensors(f)
        return SimpleLens(weight, bias, tag_to_act[act_tag])
    if kind_tag != 2:
        raise CorpusFormatError(f"{path.name}: unknown lens kind tag {kind_tag}")
    depth, _width, _channels = struct.unpack("<III", _read_exact(f, 12, "gatedconv dims"))
    stacks = []
    for _ in range(2):
        n, = struct.unpack("<B", _read_exact(f, 1, "activation count"))
        tags = _read_exact(f, n, "activation tags")
        stacks.append([tag_to_act[t] for t in tags])
    fusion_tag, = struct.unpack("<B", _read_exact(f, 1, "fusion activation"))
    tensors = _read_tensors(f)
    if len(tensors) != 4 * (depth + 1) + 2:
        raise CorpusFormatError(f"{path.name}: unexpected tensor count {len(tensors)}")
    per_stack = 2 * (depth + 1)
    enc = tensors[:per_stack]
    ctl = tensors[per_stack:2 * per_stack]
    return GatedConvLens(
        encoder_weights=enc[0::2], encoder_biases=enc[1::2],
        controller_weights=ctl[0::2], controller_biases=ctl[1::2],
        fusion_weight=tensors[-2], fusion_bias=tensors[-1],
        encoder_activations=stacks[0], controller_activations=stacks[1],
        fusion_activation=tag_to_act[fusion_tag])
