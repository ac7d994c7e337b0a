"""Conditional U-Net noise predictor and PatchGAN-style discriminator.

Parameters live in flat, insertion-ordered ``dict[str, Tensor]`` tables
("ModelParams"). Forward functions are pure: they take the table, the inputs
and the config, and build the graph through :mod:`reladiff.tensor`.
Both networks work on 2D or 3D inputs; ``spatial_dims`` selects which.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, FormatError, ShapeError, UnsupportedVersionError
from .volume import atomic_write_bytes

NORM_EPS = 1e-5


@dataclass
class GeneratorConfig:
    in_channels: int = 3
    base_width: int = 16
    depth: int = 3
    num_tracers: int = 3
    embed_dim: int = 32
    use_bottleneck_attention: bool = False
    spatial_dims: int = 2

    def validate(self):
        if self.in_channels < 1:
            raise ConfigError("in_channels", f"must be >= 1, got {self.in_channels}")
        if self.depth < 1:
            raise ConfigError("depth", f"must be >= 1, got {self.depth}")
        if self.base_width < 1 or (self.base_width > 8 and self.base_width % 8):
            raise ConfigError("base_width", f"must be <= 8 or a multiple of 8, got {self.base_width}")
        if self.num_tracers < 1:
            raise ConfigError("num_tracers", f"must be >= 1, got {self.num_tracers}")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigError("embed_dim", f"must be an even number >= 2, got {self.embed_dim}")
        if self.spatial_dims not in (2, 3):
            raise ConfigError("spatial_dims", f"must be 2 or 3, got {self.spatial_dims}")
        return self

    def widths(self) -> list[int]:
        """Channel count after each downsampling block."""
        return [self.base_width * 2**i for i in range(self.depth)]


@dataclass
class DiscriminatorConfig:
    in_channels: int = 1
    widths: tuple = (16, 32, 1)
    leaky_slope: float = 0.2
    norm_kind: str = "batch"
    spatial_dims: int = 2
    kernel: int = 4

    def validate(self):
        if len(self.widths) != 3:
            raise ConfigError("widths", f"need exactly 3 stages, got {len(self.widths)}")
        if self.widths[-1] != 1:
            raise ConfigError("widths", f"final stage must emit 1 channel, got {self.widths[-1]}")
        if min(self.widths) < 1:
            raise ConfigError("widths", f"channel counts must be positive, got {self.widths}")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope", f"must be in [0, 1), got {self.leaky_slope}")
        if self.norm_kind not in ("batch", "instance"):
            raise ConfigError("norm_kind", f"must be 'batch' or 'instance', got {self.norm_kind!r}")
        if self.spatial_dims not in (2, 3):
            raise ConfigError("spatial_dims", f"must be 2 or 3, got {self.spatial_dims}")
        return self


@dataclass
class ConditionInfo:
    """Timestep (1-based) and tracer label; scalars or one entry per batch element."""

    t: object
    c: object

    def arrays(self, n: int, num_tracers: int, max_t: int | None = None):
        t = np.broadcast_to(np.asarray(self.t), (n,)).astype(np.int64)
        c = np.broadcast_to(np.asarray(self.c), (n,)).astype(np.int64)
        if t.min() < 1 or (max_t is not None and t.max() > max_t):
            raise ContractError(f"timestep {self.t!r} out of range")
        if c.min() < 0 or c.max() >= num_tracers:
            raise ContractError(f"tracer label {self.c!r} outside [0, {num_tracers})")
        return t, c


# ---------------------------------------------------------------------------
# initialisation


class _Builder:
    def __init__(self, seed: int, nd: int):
        self.rng = np.random.default_rng(seed)
        self.nd = nd
        self.params: dict[str, T.Tensor] = {}

    def add(self, name, arr):
        self.params[name] = T.Tensor.parameter(np.asarray(arr, dtype=np.float32))

    def conv(self, name, cout, cin, k, zero=False):
        fan_in = cin * k**self.nd
        bound = 1.0 / math.sqrt(fan_in)
        shape = (cout, cin) + (k,) * self.nd
        w = np.zeros(shape) if zero else self.rng.uniform(-bound, bound, shape)
        self.add(f"{name}.w", w)
        self.add(f"{name}.b", np.zeros(cout))

    def linear(self, name, cout, cin, bias=True):
        bound = 1.0 / math.sqrt(cin)
        self.add(f"{name}.w", self.rng.uniform(-bound, bound, (cin, cout)))
        if bias:
            self.add(f"{name}.b", np.zeros(cout))

    def norm(self, name, ch):
        self.add(f"{name}.g", np.ones(ch))
        self.add(f"{name}.b", np.zeros(ch))


def _resblock_params(b: _Builder, name, ch, embed_dim):
    for i in (1, 2):
        b.conv(f"{name}.conv{i}", ch, ch, 3)
        b.norm(f"{name}.gn{i}", ch)
        b.linear(f"{name}.emb{i}", ch, embed_dim)


def _skip_width(cfg: GeneratorConfig, level: int) -> int:
    return cfg.base_width if level == 0 else cfg.widths()[level - 1]


def build_generator(cfg: GeneratorConfig, seed: int, zero_final: bool = True) -> dict:
    """Parameter table for the conditional U-Net, initialised from ``seed``.

    Convolutions and linear maps use U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases
    start at zero. The output convolution starts at zero unless
    ``zero_final`` is False.
    """
    cfg.validate()
    b = _Builder(seed, cfg.spatial_dims)
    e = cfg.embed_dim
    b.add("emb.tracer", b.rng.standard_normal((cfg.num_tracers, e)))
    b.linear("emb.fc", e, e)
    b.conv("stem", cfg.base_width, cfg.in_channels, 3)
    widths = cfg.widths()
    prev = cfg.base_width
    for i, w in enumerate(widths):
        b.conv(f"down{i}.conv", w, prev, 3)
        for j in range(2):
            _resblock_params(b, f"down{i}.res{j}", w, e)
        prev = w
    if cfg.use_bottleneck_attention:
        b.norm("mid.attn.gn", prev)
        for p in ("q", "k", "v", "o"):
            b.linear(f"mid.attn.{p}", prev, prev, bias=False)
        b.linear("mid.attn.ctx", prev, e, bias=False)
    for i in reversed(range(cfg.depth)):
        s = _skip_width(cfg, i)
        b.conv(f"up{i}.conv", s, prev, 3)
        b.conv(f"up{i}.merge", s, 2 * s, 3)
        for j in range(2):
            _resblock_params(b, f"up{i}.res{j}", s, e)
        prev = s
    b.norm("out.gn", prev)
    b.conv("out.conv", 1, prev, 3, zero=zero_final)
    return b.params


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> dict:
    cfg.validate()
    b = _Builder(seed, cfg.spatial_dims)
    prev = cfg.in_channels
    for i, w in enumerate(cfg.widths):
        b.conv(f"stage{i}.conv", w, prev, cfg.kernel)
        if i < len(cfg.widths) - 1:
            b.norm(f"stage{i}.norm", w)
        prev = w
    return b.params


def param_count(params: dict) -> int:
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------------------
# layers


def _chan(v: T.Tensor, nd: int) -> T.Tensor:
    """[C] -> [1, C, 1, ...] for broadcasting over a feature map."""
    return T.reshape(v, (1, v.shape[0]) + (1,) * nd)


def conv_layer(p, name, x, stride=1, padding=1):
    nd = x.ndim - 2
    return T.conv(x, p[f"{name}.w"], stride, padding) + _chan(p[f"{name}.b"], nd)


def linear(p, name, x):
    y = x @ p[f"{name}.w"]
    b = p.get(f"{name}.b")
    return y if b is None else y + b


def group_norm(x: T.Tensor, groups: int, gamma=None, beta=None) -> T.Tensor:
    n, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    h = T.reshape(x, (n, groups, -1))
    m = T.mean(h, axis=2, keepdims=True)
    d = h - m
    var = T.mean(d * d, axis=2, keepdims=True)
    h = T.reshape(d / T.sqrt(var + NORM_EPS), x.shape)
    nd = x.ndim - 2
    if gamma is not None:
        h = h * _chan(gamma, nd) + _chan(beta, nd)
    return h


def batch_norm(x: T.Tensor, gamma, beta) -> T.Tensor:
    """Normalises with the statistics of the current batch (no running averages)."""
    axes = (0,) + tuple(range(2, x.ndim))
    m = T.mean(x, axis=axes, keepdims=True)
    d = x - m
    var = T.mean(d * d, axis=axes, keepdims=True)
    nd = x.ndim - 2
    return d / T.sqrt(var + NORM_EPS) * _chan(gamma, nd) + _chan(beta, nd)


def gn_groups(ch: int) -> int:
    return min(8, ch)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """[N, dim] interleaved (sin, cos) features of the timestep; t = 0 gives 0, 1, 0, 1, ..."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    out = np.empty((t.shape[0], dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out.astype(T.default_dtype())


def embed_condition(params, info: ConditionInfo, cfg: GeneratorConfig, n: int | None = None) -> T.Tensor:
    """Shared [N, embed_dim] conditioning vector: sinusoid(t) + tracer table[c], then fc + SiLU.

    Each residual sub-block projects this to its own channel count.
    """
    if n is None:
        n = max(np.size(info.t), np.size(info.c))
    t, c = info.arrays(n, cfg.num_tracers)
    table = params["emb.tracer"]
    onehot = np.zeros((n, cfg.num_tracers), dtype=T.default_dtype())
    onehot[np.arange(n), c] = 1.0
    e = T.Tensor(sinusoidal_embedding(t, cfg.embed_dim)) + onehot @ table
    return T.silu(linear(params, "emb.fc", e))


def _inject(params, name, h, e):
    v = linear(params, name, e)
    return h + T.reshape(v, v.shape + (1,) * (h.ndim - 2))


def resblock(params, name, x, e):
    h = x
    for i in (1, 2):
        h = conv_layer(params, f"{name}.conv{i}", h)
        h = group_norm(h, gn_groups(h.shape[1]), params[f"{name}.gn{i}.g"], params[f"{name}.gn{i}.b"])
        h = T.silu(_inject(params, f"{name}.emb{i}", h, e))
    return x + h


def attention_block(params, name, h, e):
    """Self-attention over positions with the conditioning vector as one extra key/value token."""
    n, c = h.shape[:2]
    sp = h.shape[2:]
    x = group_norm(h, gn_groups(c), params[f"{name}.gn.g"], params[f"{name}.gn.b"])
    tokens = T.permute(T.reshape(x, (n, c, -1)), (0, 2, 1))
    ctx = T.reshape(e @ params[f"{name}.ctx.w"], (n, 1, c))
    keys = T.concat([tokens, ctx], axis=1)
    q = tokens @ params[f"{name}.q.w"]
    k = keys @ params[f"{name}.k.w"]
    v = keys @ params[f"{name}.v.w"]
    att = T.softmax(q @ T.swap_last(k) * (1.0 / math.sqrt(c)), axis=-1)
    out = (att @ v) @ params[f"{name}.o.w"]
    return h + T.reshape(T.permute(out, (0, 2, 1)), (n, c) + sp)


def _pad_to_multiple(x: T.Tensor, m: int):
    sp = x.shape[2:]
    target = tuple(-(-s // m) * m for s in sp)
    if target == sp:
        return x, None
    idx = (slice(None), slice(None)) + tuple(slice(0, s) for s in sp)
    return T.scatter(x, idx, x.shape[:2] + target), idx


def generator_forward(params, x_t, cond, info: ConditionInfo, cfg: GeneratorConfig,
                      use_skips: bool = True) -> T.Tensor:
    """Predict the noise in ``x_t`` [N, 1, *S] given conditions ``cond`` [N, Cc, *S].

    Inputs whose extents are not multiples of 2**depth are zero-padded at the
    high end and the prediction is cropped back. ``use_skips=False`` replaces
    the encoder-decoder skip tensors with zeros (test hook).
    """
    x_t, cond = T._t(x_t), T._t(cond)
    nd = cfg.spatial_dims
    if x_t.ndim != nd + 2 or cond.ndim != nd + 2:
        raise ShapeError(f"generator: expected rank-{nd + 2} inputs, got {x_t.shape} and {cond.shape}")
    if x_t.shape[0] != cond.shape[0] or x_t.shape[2:] != cond.shape[2:]:
        raise ShapeError(f"generator: x_t {x_t.shape} and condition {cond.shape} are not aligned")
    if x_t.shape[1] + cond.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"generator: {x_t.shape[1]} + {cond.shape[1]} input channels, config expects {cfg.in_channels}"
        )
    n = x_t.shape[0]
    e = embed_condition(params, info, cfg, n)
    h, crop = _pad_to_multiple(T.concat([x_t, cond], axis=1), 2**cfg.depth)
    h = conv_layer(params, "stem", h)
    skips = [h]
    for i in range(cfg.depth):
        h = conv_layer(params, f"down{i}.conv", h, stride=2)
        for j in range(2):
            h = resblock(params, f"down{i}.res{j}", h, e)
        skips.append(h)
    if cfg.use_bottleneck_attention:
        h = attention_block(params, "mid.attn", h, e)
    for i in reversed(range(cfg.depth)):
        h = conv_layer(params, f"up{i}.conv", T.upsample(h, 2))
        s = skips[i]
        if not use_skips:
            s = T.Tensor(np.zeros(s.shape, dtype=s.dtype))
        h = conv_layer(params, f"up{i}.merge", T.concat([h, s], axis=1))
        for j in range(2):
            h = resblock(params, f"up{i}.res{j}", h, e)
    h = group_norm(h, gn_groups(h.shape[1]), params["out.gn.g"], params["out.gn.b"])
    out = conv_layer(params, "out.conv", T.silu(h))
    if crop is not None:
        out = T.getitem(out, crop)
    return out


def discriminator_patches(params, x, cfg: DiscriminatorConfig) -> T.Tensor:
    x = T._t(x)
    if x.ndim != cfg.spatial_dims + 2 or x.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"discriminator: expected [N, {cfg.in_channels}, ...] rank {cfg.spatial_dims + 2}, got {x.shape}"
        )
    h = x
    last = len(cfg.widths) - 1
    for i in range(len(cfg.widths)):
        h = conv_layer(params, f"stage{i}.conv", h, stride=2, padding=1)
        if i < last:
            h = T.leaky_relu(h, cfg.leaky_slope)
            g, b = params[f"stage{i}.norm.g"], params[f"stage{i}.norm.b"]
            if cfg.norm_kind == "batch":
                h = batch_norm(h, g, b)
            else:
                h = group_norm(h, h.shape[1], g, b)
    return h


def discriminator_forward(params, x, cfg: DiscriminatorConfig) -> T.Tensor:
    """One realism score per batch element: the mean of the patch logit map."""
    patches = discriminator_patches(params, x, cfg)
    return T.mean(patches, axis=tuple(range(1, patches.ndim)))


def detached(params: dict) -> dict:
    """Same values, no graph membership: gradients never flow into these."""
    return {k: v.detach() for k, v in params.items()}


# ---------------------------------------------------------------------------
# tensor-table checkpoint format

CKPT_MAGIC = b"RDCK"
CKPT_VERSION = 1


def encode_tables(entries: dict, meta: dict | None = None) -> bytes:
    """magic | u32 version | u32 count | entries | u32 meta_len | JSON meta.

    Entry: u32 name_len | UTF-8 name | u8 rank | u32 extents | f32 LE data.
    """
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = arr.data if isinstance(arr, T.Tensor) else np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


def decode_tables(buf: bytes) -> tuple[dict, dict]:
    def need(pos, n, what):
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}", pos)

    need(0, 12, "header")
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", 4)
    pos = 12
    out = {}
    for _ in range(count):
        need(pos, 4, "entry name length")
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(pos, ln + 1, "entry name")
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        rank = buf[pos]
        pos += 1
        need(pos, 4 * rank, "entry extents")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        need(pos, 4 * size, f"data of {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).astype(np.float32).reshape(shape)
        pos += 4 * size
    need(pos, 4, "metadata length")
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    need(pos, mlen, "metadata")
    meta = json.loads(buf[pos:pos + mlen].decode("utf-8"))
    if pos + mlen != len(buf):
        raise FormatError("trailing bytes", pos + mlen)
    return out, meta


def save_params(path, params: dict, meta: dict | None = None):
    atomic_write_bytes(path, encode_tables(params, meta))


def load_params(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        arrays, meta = decode_tables(fh.read())
    return {k: T.Tensor.parameter(v) for k, v in arrays.items()}, meta


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
