"""Compact transformer classifier over raw I/Q records.

A convolutional patch embedder turns the 2x128 record into N0 tokens, a
learnable CLS token is prepended, and a stack of pre-norm encoder layers
(multi-head self-attention + feed-forward, residual connections) feeds a
dense head from the final CLS state. Per-layer head-summed attention
matrices are cached on every forward pass; they are the distillation
payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FormatError

CHECKPOINT_MAGIC = b"AMCK"
CHECKPOINT_VERSION = 1


@dataclass
class TransformerConfig:
    patch_kernel: tuple = (2, 32)
    patch_stride: int = 32
    embed_dim: int = 128
    layers: int = 4
    heads: int = 4
    hidden_dim: int = 512
    classes: int = 11
    input_shape: tuple = (2, 128)

    def __post_init__(self):
        self.patch_kernel = tuple(self.patch_kernel)
        self.input_shape = tuple(self.input_shape)
        n, m = self.patch_kernel
        rows, length = self.input_shape
        if n != rows:
            raise ConfigError(f"patch kernel height {n} must equal input rows {rows}")
        if (length - m) % self.patch_stride != 0:
            raise ConfigError(f"(input length {length} - kernel {m}) not divisible by stride {self.patch_stride}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")

    @property
    def patch_count(self):
        _, m = self.patch_kernel
        return (self.input_shape[1] - m) // self.patch_stride + 1

    @property
    def token_count(self):
        return self.patch_count + 1

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob):
        return cls(**json.loads(blob))


PRESETS = {
    "teacher": TransformerConfig((2, 32), 32, 128, 4, 4, 512, 11),
    "student": TransformerConfig((2, 32), 32, 96, 2, 4, 384, 11),
    "model1": TransformerConfig((2, 16), 16, 64, 2, 4, 256, 11),
    "model2": TransformerConfig((2, 32), 32, 128, 4, 4, 512, 11),
}


def count_parameters(cfg):
    """Closed-form parameter count of the architecture."""
    n, m = cfg.patch_kernel
    k, s, c, depth = cfg.embed_dim, cfg.hidden_dim, cfg.classes, cfg.layers
    n_cl = (n * m * 1 + 1) * k
    n_cls = k
    n_ln = 2 * k
    n_dl = k * c + c
    n_msa = 4 * k * k + k
    n_ffn = 2 * k * s + k + s
    return n_cl + n_cls + n_ln + n_dl + depth * (n_msa + 2 * n_ln + n_ffn)


@dataclass
class AttentionMap:
    layer: int
    matrix: np.ndarray  # (tokens, tokens) or (batch, tokens, tokens); rows sum to `heads`


def _truncated_normal(rng, shape, std=0.02, dtype=np.float32):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class TransformerModel:
    def __init__(self, cfg, seed=0, dtype=np.float32, trainable=True):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7F0D)))
        n, m = cfg.patch_kernel
        k, s, c = cfg.embed_dim, cfg.hidden_dim, cfg.classes

        def weight(*shape):
            return ad.tensor(_truncated_normal(rng, shape, dtype=dtype), requires_grad=trainable, dtype=dtype)

        def zeros(*shape):
            return ad.tensor(np.zeros(shape, dtype=dtype), requires_grad=trainable, dtype=dtype)

        def ones(*shape):
            return ad.tensor(np.ones(shape, dtype=dtype), requires_grad=trainable, dtype=dtype)

        p = {}
        p["patch.w"] = weight(n * m, k)
        p["patch.b"] = zeros(k)
        p["cls"] = zeros(k)
        for i in range(cfg.layers):
            p[f"enc{i}.ln1.g"] = ones(k)
            p[f"enc{i}.ln1.b"] = zeros(k)
            p[f"enc{i}.wq"] = weight(k, k)
            p[f"enc{i}.wk"] = weight(k, k)
            p[f"enc{i}.wv"] = weight(k, k)
            p[f"enc{i}.wo"] = weight(k, k)
            p[f"enc{i}.bo"] = zeros(k)
            p[f"enc{i}.ln2.g"] = ones(k)
            p[f"enc{i}.ln2.b"] = zeros(k)
            p[f"enc{i}.ffn.w1"] = weight(k, s)
            p[f"enc{i}.ffn.b1"] = zeros(s)
            p[f"enc{i}.ffn.w2"] = weight(s, k)
            p[f"enc{i}.ffn.b2"] = zeros(k)
        p["final_ln.g"] = ones(k)
        p["final_ln.b"] = zeros(k)
        p["head.w"] = weight(k, c)
        p["head.b"] = zeros(c)
        self.params = p

    # -- parameter plumbing

    def parameters(self):
        return self.params

    def parameter_count(self):
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False
        return self

    def checksum(self):
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    # -- forward

    def _as_input(self, x):
        if isinstance(x, ad.Tensor):
            t = x
        else:
            t = ad.tensor(np.asarray(x, dtype=self.dtype), dtype=self.dtype)
        if t.ndim == 2:
            t = ad.reshape(t, (1,) + t.shape)
        if t.shape[1:] != self.cfg.input_shape:
            raise ad.DimensionError(f"input shape {t.shape[1:]} != {self.cfg.input_shape}")
        return t

    def forward(self, x, want_maps=False):
        """Logits (B, classes); optionally also per-layer head-summed maps."""
        cfg, p = self.cfg, self.params
        x = self._as_input(x)
        B = x.shape[0]
        k, h, d = cfg.embed_dim, cfg.heads, cfg.head_dim
        T = cfg.token_count
        n0 = cfg.patch_count

        patches = ad.extract_patches(x, cfg.patch_kernel[1], cfg.patch_stride)
        flat = ad.reshape(patches, (B * n0, patches.shape[-1]))
        emb = ad.add_bias(ad.matmul(flat, p["patch.w"]), p["patch.b"])
        tokens = ad.reshape(emb, (B, n0, k))
        cls = ad.repeat_leading(ad.reshape(p["cls"], (1, k)), B)
        z = ad.concat([cls, tokens], axis=1)

        maps = []
        inv_sqrt_d = 1.0 / np.sqrt(d)
        for i in range(cfg.layers):
            u = ad.layer_norm(z, p[f"enc{i}.ln1.g"], p[f"enc{i}.ln1.b"])
            uf = ad.reshape(u, (B * T, k))

            def heads_of(w):
                proj = ad.reshape(ad.matmul(uf, w), (B, T, h, d))
                return ad.transpose(proj, (0, 2, 1, 3))

            q, key, v = heads_of(p[f"enc{i}.wq"]), heads_of(p[f"enc{i}.wk"]), heads_of(p[f"enc{i}.wv"])
            scores = ad.scale(ad.matmul(q, ad.transpose(key, (0, 1, 3, 2))), inv_sqrt_d)
            attn = ad.softmax(scores, axis=-1)          # (B, h, T, T), rows stochastic
            maps.append(ad.tsum(attn, axis=1))          # head-summed map
            ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
            merged = ad.add_bias(ad.matmul(ad.reshape(ctx, (B * T, k)), p[f"enc{i}.wo"]), p[f"enc{i}.bo"])
            z = ad.add(z, ad.reshape(merged, (B, T, k)))

            u2 = ad.layer_norm(z, p[f"enc{i}.ln2.g"], p[f"enc{i}.ln2.b"])
            hdn = ad.gelu(ad.add_bias(ad.matmul(ad.reshape(u2, (B * T, k)), p[f"enc{i}.ffn.w1"]), p[f"enc{i}.ffn.b1"]))
            ffn = ad.add_bias(ad.matmul(hdn, p[f"enc{i}.ffn.w2"]), p[f"enc{i}.ffn.b2"])
            z = ad.add(z, ad.reshape(ffn, (B, T, k)))

        zf = ad.layer_norm(z, p["final_ln.g"], p["final_ln.b"])
        cls_state = ad.reshape(ad.narrow(zf, 1, 0, 1), (B, k))
        logits = ad.add_bias(ad.matmul(cls_state, p["head.w"]), p["head.b"])
        return (logits, maps) if want_maps else logits

    def predict(self, x):
        return np.argmax(self.forward(x).data, axis=1)


def attention_maps(model, x):
    """Per-layer head-summed attention maps for a record or a batch."""
    single = np.asarray(x).ndim == 2 if not isinstance(x, ad.Tensor) else x.ndim == 2
    _, maps = model.forward(x, want_maps=True)
    out = []
    for i, m in enumerate(maps):
        mat = m.data[0] if single else m.data
        out.append(AttentionMap(layer=i, matrix=mat))
    return out


# ---------------------------------------------------------------------------
# checkpoint IO
#
# Layout (little-endian): magic "AMCK" | version u32 | config JSON
# (u32 length + UTF-8) | tensor count u32 | per tensor: name (u16 length +
# UTF-8), rank u8, dims u32 each, float32 payload.


def save_checkpoint(model, path):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        blob = model.cfg.to_json().encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            t = model.params[name]
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", t.ndim))
            for dim in t.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _need(buf, offset, count, what):
    if offset + count > len(buf):
        raise FormatError(f"truncated checkpoint while reading {what}", offset=offset)
    return buf[offset: offset + count], offset + count


def load_checkpoint(path, trainable=False):
    with open(path, "rb") as f:
        buf = f.read()
    chunk, off = _need(buf, 0, 4, "magic")
    if chunk != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {chunk!r}", offset=0)
    chunk, off = _need(buf, off, 4, "version")
    if struct.unpack("<I", chunk)[0] != CHECKPOINT_VERSION:
        raise FormatError("unsupported checkpoint version", offset=4)
    chunk, off = _need(buf, off, 4, "config length")
    (cfg_len,) = struct.unpack("<I", chunk)
    chunk, off = _need(buf, off, cfg_len, "config blob")
    try:
        cfg = TransformerConfig.from_json(chunk.decode("utf-8"))
    except (json.JSONDecodeError, TypeError, ConfigError) as e:
        raise FormatError(f"bad config blob: {e}", offset=off - cfg_len) from e
    chunk, off = _need(buf, off, 4, "tensor count")
    (count,) = struct.unpack("<I", chunk)

    model = TransformerModel(cfg, trainable=trainable)
    if count != len(model.params):
        raise FormatError(f"checkpoint has {count} tensors, architecture wants {len(model.params)}", offset=off - 4)
    for _ in range(count):
        chunk, off = _need(buf, off, 2, "tensor name length")
        (name_len,) = struct.unpack("<H", chunk)
        chunk, off = _need(buf, off, name_len, "tensor name")
        name = chunk.decode("utf-8")
        chunk, off = _need(buf, off, 1, "tensor rank")
        rank = chunk[0]
        dims = []
        for _ in range(rank):
            chunk, off = _need(buf, off, 4, "tensor dim")
            dims.append(struct.unpack("<I", chunk)[0])
        if name not in model.params:
            raise FormatError(f"unknown tensor {name!r}", offset=off)
        want = model.params[name].shape
        if tuple(dims) != want:
            raise FormatError(f"tensor {name!r} has dims {tuple(dims)}, architecture wants {want}", offset=off)
        n_bytes = int(np.prod(dims)) * 4 if dims else 4
        chunk, off = _need(buf, off, n_bytes, f"tensor {name!r} payload")
        model.params[name].data = np.frombuffer(chunk, dtype="<f4").reshape(dims).copy()
    if off != len(buf):
        raise FormatError("trailing bytes after final tensor", offset=off)
    return model
