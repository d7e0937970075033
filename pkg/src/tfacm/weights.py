"""Parameter manifest, deterministic initialisation and the weight container.

Container layout (all integers little-endian)::

    b"TFACM001"                 8-byte magic
    uint32 header_len           byte length of the UTF-8 manifest
    manifest                    one line per tensor: name<TAB>d0,d1,...<TAB>offset
    payload                     float32 LE, row-major, tensors in manifest order

``offset`` is the byte offset of the tensor inside the payload.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig, resolve_config
from .tensor import DTYPE

MAGIC = b"TFACM001"
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
PRELU_INIT = 0.25


class WeightFormatError(ValueError):
    pass


class BadMagicError(WeightFormatError):
    pass


class ShapeMismatchError(WeightFormatError):
    pass


class TruncatedPayloadError(WeightFormatError):
    pass


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    fan_in: int = 1
    init: str = "uniform"  # uniform | ones | zeros | prelu | lstm_bias

    @property
    def size(self):
        return int(np.prod(self.shape))


def _lstm(prefix, n_in, hidden):
    return [
        ParamSpec(f"{prefix}.w_ih", (4 * hidden, n_in), n_in),
        ParamSpec(f"{prefix}.w_hh", (4 * hidden, hidden), hidden),
        ParamSpec(f"{prefix}.bias", (4 * hidden,), hidden, "lstm_bias"),
    ]


def _norm(prefix, shape):
    return [ParamSpec(f"{prefix}.gamma", shape, init="ones"),
            ParamSpec(f"{prefix}.beta", shape, init="zeros")]


def parameter_specs(cfg):
    """Ordered list of every tensor in the model. Order fixes the RNG stream ordinals."""
    s = cfg.sep
    n, h, e, f = s.channels, s.hidden, s.attn_channels, cfg.n_freqs
    specs = [
        ParamSpec("encoder.conv.weight", (n, 2, 3, 3), 2 * 9),
        ParamSpec("encoder.conv.bias", (n,), 2 * 9),
        *_norm("encoder.norm", (n,)),
    ]
    for i in range(s.blocks):
        p = f"blocks.{i}"
        specs += _norm(f"{p}.flocal.norm", (n,))
        specs += _lstm(f"{p}.flocal.lstm", s.f_width * n, h)
        fan = h * -(-s.f_width // s.f_stride)
        specs += [ParamSpec(f"{p}.flocal.deconv.weight", (h, n, s.f_width), fan),
                  ParamSpec(f"{p}.flocal.deconv.bias", (n,), fan)]
        specs += _norm(f"{p}.tlocal.norm", (n,))
        specs += _lstm(f"{p}.tlocal.lstm", n, h)
        fan = s.t_width * h
        specs += [ParamSpec(f"{p}.tlocal.deconv.weight", (s.t_width * h, n, s.t_width), fan),
                  ParamSpec(f"{p}.tlocal.deconv.bias", (n,), fan)]
        for proj in ("q", "k", "v"):
            q = f"{p}.car.{proj}"
            specs += [ParamSpec(f"{q}.conv.weight", (e, n, 3, 3), n * 9),
                      ParamSpec(f"{q}.conv.bias", (e,), n * 9),
                      ParamSpec(f"{q}.prelu", (e,), init="prelu"),
                      *_norm(f"{q}.norm", (e, f))]
        specs += [ParamSpec(f"{p}.car.proj.weight", (n, e), e),
                  ParamSpec(f"{p}.car.proj.bias", (n,), e),
                  ParamSpec(f"{p}.car.proj.prelu", (n,), init="prelu"),
                  *_norm(f"{p}.car.proj.norm", (n, f))]
        g = f"{p}.car.gate"
        for path in ("lin", "gate"):
            specs += [ParamSpec(f"{g}.dw_{path}.weight", (n, 3, 3), 9),
                      ParamSpec(f"{g}.dw_{path}.bias", (n,), 9),
                      ParamSpec(f"{g}.pw_{path}.weight", (n, n), n),
                      ParamSpec(f"{g}.pw_{path}.bias", (n,), n)]
        specs += [ParamSpec(f"{g}.pw_out.weight", (n, n), n),
                  ParamSpec(f"{g}.pw_out.bias", (n,), n)]
    if s.blocks > 1:
        specs += _lstm("cm.lstm_h", h, h)
        specs += _lstm("cm.lstm_c", h, h)
    c2 = 2 * s.n_speakers
    specs += [ParamSpec("decoder.deconv.weight", (n, c2, 3, 3), n * 9),
              ParamSpec("decoder.deconv.bias", (c2,), n * 9)]
    return specs


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def splitmix64_uniform(seed, ordinal, count):
    """``count`` doubles in [0, 1) from the SplitMix64 stream keyed by ``(seed, ordinal)``."""
    with np.errstate(over="ignore"):
        key = _mix64(np.array([ordinal + 1], dtype=np.uint64))
        state = np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) ^ key
        state = _mix64(state)
        steps = np.arange(1, count + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
        z = _mix64(state + steps)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _initial_tensor(spec, seed, ordinal):
    if spec.init == "ones":
        return np.ones(spec.shape, dtype=DTYPE)
    if spec.init == "zeros":
        return np.zeros(spec.shape, dtype=DTYPE)
    if spec.init == "prelu":
        return np.full(spec.shape, PRELU_INIT, dtype=DTYPE)
    bound = np.sqrt(1.0 / spec.fan_in)
    u = splitmix64_uniform(seed, ordinal, spec.size)
    out = (bound * (2.0 * u - 1.0)).astype(DTYPE).reshape(spec.shape)
    if spec.init == "lstm_bias":
        hidden = spec.shape[0] // 4
        out[hidden:2 * hidden] = 1.0
    return out


@dataclass
class Model:
    """Resolved configuration plus named float32 parameter arrays."""

    cfg: ModelConfig
    weights: dict

    @property
    def n_params(self):
        return sum(int(w.size) for w in self.weights.values())


def init_weights(cfg, seed=0):
    """Uniform(+-sqrt(1/fan_in)) init from per-tensor SplitMix64 streams.

    Norm gains start at 1, norm shifts at 0, PReLU slopes at 0.25 and LSTM
    forget-gate biases at +1.
    """
    cfg = resolve_config(cfg)
    weights = {spec.name: _initial_tensor(spec, int(seed), ordinal)
               for ordinal, spec in enumerate(parameter_specs(cfg))}
    return Model(cfg, weights)


def dumps(model):
    specs = parameter_specs(model.cfg)
    lines, offset = [], 0
    for spec in specs:
        lines.append(f"{spec.name}\t{','.join(map(str, spec.shape))}\t{offset}\n")
        offset += spec.size * 4
    header = "".join(lines).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(model.weights[spec.name], dtype="<f4").tobytes() for spec in specs
    )
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def save(model, path):
    Path(path).write_bytes(dumps(model))


def _parse_manifest(data):
    if data[:8] != MAGIC:
        raise BadMagicError(f"bad magic {data[:8]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise TruncatedPayloadError("file ends inside the header length field")
    (header_len,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + header_len:
        raise TruncatedPayloadError("file ends inside the manifest")
    entries = []
    expected_offset = 0
    for line in data[12:12 + header_len].decode("utf-8").splitlines():
        try:
            name, shape_s, off_s = line.split("\t")
            shape = tuple(int(d) for d in shape_s.split(","))
            offset = int(off_s)
        except ValueError:
            raise WeightFormatError(f"malformed manifest line {line!r}") from None
        if offset != expected_offset:
            raise WeightFormatError(f"{name}: offset {offset} breaks ascending contiguous layout")
        expected_offset += int(np.prod(shape)) * 4
        entries.append((name, shape, offset))
    return entries, data[12 + header_len:], expected_offset


def loads(data, cfg):
    """Parse container bytes and validate every tensor against ``cfg``."""
    cfg = resolve_config(cfg)
    entries, payload, total = _parse_manifest(data)
    if len(payload) < total:
        raise TruncatedPayloadError(f"payload holds {len(payload)} bytes, manifest needs {total}")
    if len(payload) > total:
        raise WeightFormatError(f"{len(payload) - total} trailing bytes after payload")
    specs = {s.name: s for s in parameter_specs(cfg)}
    found = {}
    for name, shape, offset in entries:
        if name not in specs:
            raise ShapeMismatchError(f"unexpected tensor {name!r} for this configuration")
        if shape != specs[name].shape:
            raise ShapeMismatchError(f"tensor {name!r} has shape {shape}, config expects {specs[name].shape}")
        n = int(np.prod(shape))
        found[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).astype(DTYPE).reshape(shape)
    missing = [n for n in specs if n not in found]
    if missing:
        raise ShapeMismatchError(f"missing tensors: {', '.join(missing[:5])}")
    return Model(cfg, {name: found[name] for name in specs})


def load(path, cfg):
    return loads(Path(path).read_bytes(), cfg)


def count_params(cfg):
    return sum(spec.size for spec in parameter_specs(resolve_config(cfg)))
