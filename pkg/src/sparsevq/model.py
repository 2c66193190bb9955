"""The forecaster: patch embedding, attention-only blocks, quantizer slot.

Channels are processed independently through shared weights: an input
batch [B, L, M] is folded to [B*M, L] series, patched into tokens,
embedded, and run through pre-norm attention blocks. The feed-forward
sub-layer of every block is optional and off by default; when enabled it
adds exactly its two linear maps (no extra normalization), so the
with/without parameter difference equals the closed-form feed-forward
count.

The quantizer slot sits either before the encoder (on raw patch vectors,
codebook dimension = patch length) or between encoder and decoder (on
model-width tokens). The decoder is a further stack of self-attention
blocks over the same tokens; a flatten-linear head maps each channel's
token stack to its horizon.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import revin as revin_mod
from . import svq as svq_mod
from . import tensor as T
from .data import WindowDataset
from .errors import ConfigurationError, DataLoadError, ShapeMismatchError

PLACEMENTS = ("none", "pre_encoder", "post_encoder")


@dataclass
class ModelConfig:
    input_length: int = 512
    horizon: int = 96
    n_channels: int = 1
    patch_length: int = 16
    patch_stride: int = 8
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 1
    d_ff: Optional[int] = None            # defaults to 2 * d_model
    use_ffn_encoder: bool = False
    use_ffn_decoder: bool = False
    use_revin: bool = True
    revin_affine: bool = True
    vq_placement: str = "post_encoder"
    vq_variant: svq_mod.QuantizerVariant = field(
        default_factory=svq_mod.QuantizerVariant)
    codebook_size: int = 750
    dropout: float = 0.0
    seed: int = 0

    @property
    def resolved_d_ff(self) -> int:
        return self.d_ff if self.d_ff is not None else 2 * self.d_model

    @property
    def n_patches(self) -> int:
        return (self.input_length - self.patch_length) // self.patch_stride + 1

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must divide by n_heads "
                f"({self.n_heads})")
        if self.patch_length > self.input_length:
            raise ConfigurationError(
                f"patch length {self.patch_length} exceeds input length "
                f"{self.input_length}")
        if self.n_patches < 1:
            raise ConfigurationError("configuration yields zero patches")
        if self.vq_placement not in PLACEMENTS:
            raise ConfigurationError(
                f"vq_placement must be one of {PLACEMENTS}, "
                f"got {self.vq_placement!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if min(self.input_length, self.horizon, self.n_channels,
               self.patch_length, self.patch_stride, self.d_model,
               self.n_heads, self.codebook_size) < 1:
            raise ConfigurationError("all size fields must be >= 1")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ConfigurationError("layer counts must be >= 0")
        self.vq_variant.validate()

    def twin(self, use_ffn: bool) -> "ModelConfig":
        """The same architecture with both feed-forward toggles set."""
        return dataclasses.replace(self, use_ffn_encoder=use_ffn,
                                   use_ffn_decoder=use_ffn)


def config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    variant = d.get("vq_variant")
    if isinstance(variant, dict):
        sparse = variant.get("sparse_cfg")
        if isinstance(sparse, dict):
            sparse = svq_mod.SparseRegressionConfig(**sparse)
        d["vq_variant"] = svq_mod.QuantizerVariant(
            tag=variant.get("tag", "svq"), stages=variant.get("stages"),
            sparse_cfg=sparse)
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown model config fields: {sorted(unknown)}")
    return ModelConfig(**d)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(
        canonical_json(config_to_dict(cfg)).encode()).hexdigest()[:12]


def patchify(x, patch_length: int, stride: int) -> T.Tensor:
    """Tokenize a series into overlapping patches.

    Accepts a 1-D [L] vector (or any [..., L] tensor) and returns
    [..., n_patches, patch_length]; the trailing remainder shorter than
    a patch is dropped.
    """
    xt = x if isinstance(x, T.Tensor) else T.Tensor(x)
    L = xt.data.shape[-1]
    if patch_length > L:
        raise ConfigurationError(
            f"patch length {patch_length} exceeds series length {L}")
    if patch_length < 1 or stride < 1:
        raise ConfigurationError("patch length and stride must be >= 1")
    return T.patchify(xt, patch_length, stride)


class AttentionBlock:
    """Pre-norm multi-head self-attention with a residual connection,
    plus an optional feed-forward residual (two linears with GELU,
    deliberately without its own normalization)."""

    def __init__(self, prefix: str, d_model: int, n_heads: int, d_ff: int,
                 use_ffn: bool, rng: np.random.Generator):
        self.prefix = prefix
        self.d_model = d_model
        self.n_heads = n_heads
        self.use_ffn = use_ffn
        std = 1.0 / math.sqrt(d_model)
        self.ln_gain = T.ones(d_model, requires_grad=True)
        self.ln_bias = T.zeros(d_model, requires_grad=True)
        self.w = {}
        for name in ("wq", "wk", "wv", "wo"):
            self.w[name] = T.randn((d_model, d_model), rng, std,
                                   requires_grad=True)
        for name in ("bq", "bk", "bv", "bo"):
            self.w[name] = T.zeros(d_model, requires_grad=True)
        if use_ffn:
            self.w["ffn_w1"] = T.randn((d_model, d_ff), rng, std,
                                       requires_grad=True)
            self.w["ffn_b1"] = T.zeros(d_ff, requires_grad=True)
            self.w["ffn_w2"] = T.randn((d_ff, d_model), rng,
                                       1.0 / math.sqrt(d_ff),
                                       requires_grad=True)
            self.w["ffn_b2"] = T.zeros(d_model, requires_grad=True)

    def parameters(self) -> dict:
        out = {f"{self.prefix}.ln.gain": self.ln_gain,
               f"{self.prefix}.ln.bias": self.ln_bias}
        for name, t in self.w.items():
            out[f"{self.prefix}.{name}"] = t
        return out

    def forward(self, x: T.Tensor, store_attn=None,
                dropout: float = 0.0, rng=None) -> T.Tensor:
        bm, n_p, d = x.data.shape
        heads, hd = self.n_heads, d // self.n_heads
        h = T.layernorm(x, self.ln_gain, self.ln_bias)

        def project(wname, bname):
            p = T.add(T.matmul(h, self.w[wname]), self.w[bname])
            return T.swapaxes(T.reshape(p, (bm, n_p, heads, hd)), 1, 2)

        q = project("wq", "bq")
        k = project("wk", "bk")
        v = project("wv", "bv")
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)),
                         1.0 / math.sqrt(hd))
        att = T.softmax(scores, axis=-1)
        if store_attn is not None:
            store_attn.append(att.data.copy())
        ctx = T.reshape(T.swapaxes(T.matmul(att, v), 1, 2), (bm, n_p, d))
        out = T.add(T.matmul(ctx, self.w["wo"]), self.w["bo"])
        out = _maybe_dropout(out, dropout, rng)
        x = T.add(x, out)
        if self.use_ffn:
            f = T.gelu(T.add(T.matmul(x, self.w["ffn_w1"]), self.w["ffn_b1"]))
            f = _maybe_dropout(f, dropout, rng)
            f = T.add(T.matmul(f, self.w["ffn_w2"]), self.w["ffn_b2"])
            x = T.add(x, f)
        return x


def _maybe_dropout(x: T.Tensor, rate: float, rng) -> T.Tensor:
    if rate <= 0.0 or rng is None:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return T.mul(x, T.Tensor(mask))


class Forecaster:
    """End-to-end model for [B, L, M] -> [B, T, M] forecasting."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        self.embed_w = T.randn((c.patch_length, c.d_model), rng,
                               1.0 / math.sqrt(c.patch_length),
                               requires_grad=True)
        self.embed_b = T.zeros(c.d_model, requires_grad=True)
        self.pos = T.randn((c.n_patches, c.d_model), rng, 0.02,
                           requires_grad=True)
        self.encoder = [AttentionBlock(f"enc{i}", c.d_model, c.n_heads,
                                       c.resolved_d_ff, c.use_ffn_encoder, rng)
                        for i in range(c.encoder_layers)]
        self.decoder = [AttentionBlock(f"dec{i}", c.d_model, c.n_heads,
                                       c.resolved_d_ff, c.use_ffn_decoder, rng)
                        for i in range(c.decoder_layers)]
        flat = c.n_patches * c.d_model
        self.head_w = T.randn((flat, c.horizon), rng, 1.0 / math.sqrt(flat),
                              requires_grad=True)
        self.head_b = T.zeros(c.horizon, requires_grad=True)
        self.revin = (revin_mod.RevinState(c.n_channels,
                                           learnable_affine=c.revin_affine)
                      if c.use_revin else None)
        if c.vq_placement == "none":
            self.quantizer = None
        else:
            dim = c.patch_length if c.vq_placement == "pre_encoder" else c.d_model
            self.quantizer = svq_mod.Quantizer(c.vq_variant, dim,
                                               c.codebook_size,
                                               seed=c.seed + 1)

    # -- parameter registry --------------------------------------------

    def parameters(self) -> dict:
        out = {"embed.weight": self.embed_w, "embed.bias": self.embed_b,
               "pos.table": self.pos,
               "head.weight": self.head_w, "head.bias": self.head_b}
        for blk in self.encoder + self.decoder:
            out.update(blk.parameters())
        if self.revin is not None:
            out.update(self.revin.parameters())
        if self.quantizer is not None:
            out.update(self.quantizer.parameters())
        return out

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def state_arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_arrays(self, state: dict) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            raise DataLoadError(
                f"state mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}")
        for k, v in state.items():
            if params[k].data.shape != v.shape:
                raise DataLoadError(
                    f"tensor {k} has shape {v.shape}, expected "
                    f"{params[k].data.shape}")
            params[k].data[:] = v

    # -- forward --------------------------------------------------------

    def forward(self, x: T.Tensor, store_attn=None, dropout_rng=None,
                quant_capture: Optional[dict] = None,
                quant_frozen: Optional[svq_mod.FrozenQuantize] = None):
        """Forecast a batch; returns (prediction, commitment loss or None)."""
        c = self.config
        if x.data.ndim != 3 or x.data.shape[1] != c.input_length \
                or x.data.shape[2] != c.n_channels:
            raise ShapeMismatchError(
                f"expected [batch, {c.input_length}, {c.n_channels}], "
                f"got {x.shape}")
        batch = x.data.shape[0]
        drop = c.dropout if dropout_rng is not None else 0.0

        if self.revin is not None:
            x = revin_mod.normalize(x, self.revin)
        folded = T.reshape(T.swapaxes(x, 1, 2),
                           (batch * c.n_channels, c.input_length))
        patches = T.patchify(folded, c.patch_length, c.patch_stride)
        commit = None

        if c.vq_placement == "pre_encoder":
            flat = T.reshape(patches, (-1, c.patch_length))
            res = self.quantizer.quantize_with(flat, frozen=quant_frozen,
                                               capture=quant_capture)
            commit = res.commitment_loss
            patches = T.reshape(res.quantized,
                                (batch * c.n_channels, c.n_patches,
                                 c.patch_length))

        tok = T.add(T.matmul(patches, self.embed_w), self.embed_b)
        tok = T.add(tok, self.pos)
        for blk in self.encoder:
            tok = blk.forward(tok, store_attn, drop, dropout_rng)

        if c.vq_placement == "post_encoder":
            flat = T.reshape(tok, (-1, c.d_model))
            res = self.quantizer.quantize_with(flat, frozen=quant_frozen,
                                               capture=quant_capture)
            commit = res.commitment_loss
            tok = T.reshape(res.quantized,
                            (batch * c.n_channels, c.n_patches, c.d_model))

        for blk in self.decoder:
            tok = blk.forward(tok, store_attn, drop, dropout_rng)

        flat = T.reshape(tok, (batch * c.n_channels,
                               c.n_patches * c.d_model))
        out = T.add(T.matmul(flat, self.head_w), self.head_b)
        pred = T.swapaxes(T.reshape(out, (batch, c.n_channels, c.horizon)),
                          1, 2)
        if self.revin is not None:
            pred = revin_mod.denormalize(pred, self.revin)
        return pred, commit

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward on plain arrays, no gradient tape."""
        pred, _ = self.forward(T.Tensor(x))
        return pred.data

    # -- token access for analysis --------------------------------------

    def token_embeddings(self, x: np.ndarray, which: str = "pre_quant") -> np.ndarray:
        """Token vectors at the quantizer slot, [n_tokens, D].

        ``pre_quant`` is the slot input (encoder output, or raw patch
        vectors under pre-encoder placement); ``post_quant`` is the
        quantized output and requires a quantizer.
        """
        if which not in ("pre_quant", "post_quant"):
            raise ConfigurationError(f"unknown embedding kind {which!r}")
        if which == "post_quant" and self.quantizer is None:
            raise ConfigurationError(
                "no quantizer in this model (vq_placement=none)")
        c = self.config
        xt = T.Tensor(np.asarray(x, dtype=np.float64))
        if self.revin is not None:
            xt = revin_mod.normalize(xt, self.revin)
        batch = xt.data.shape[0]
        folded = T.reshape(T.swapaxes(xt, 1, 2),
                           (batch * c.n_channels, c.input_length))
        patches = T.patchify(folded, c.patch_length, c.patch_stride)
        if c.vq_placement == "pre_encoder":
            flat = T.reshape(patches, (-1, c.patch_length))
            if which == "pre_quant":
                return flat.data.copy()
            return self.quantizer.quantize_with(flat).quantized.data.copy()
        tok = T.add(T.add(T.matmul(patches, self.embed_w), self.embed_b),
                    self.pos)
        for blk in self.encoder:
            tok = blk.forward(tok)
        flat = T.reshape(tok, (-1, c.d_model))
        if which == "pre_quant":
            return flat.data.copy()
        return self.quantizer.quantize_with(flat).quantized.data.copy()


# ---------------------------------------------------------------------------
# parameter audit
# ---------------------------------------------------------------------------

def count_parameters(model: Forecaster) -> dict:
    """Exact integer parameter counts by component.

    The ``ffn`` field is the closed form
    sum over enabled blocks of (d*d_ff + d_ff + d_ff*d + d); toggling the
    feed-forward sub-layers changes this field and nothing else.
    """
    c = model.config
    d, dff = c.d_model, c.resolved_d_ff
    embed = c.patch_length * d + d
    positional = c.n_patches * d
    per_block_attn = 4 * (d * d + d) + 2 * d
    attention = (c.encoder_layers + c.decoder_layers) * per_block_attn
    per_block_ffn = d * dff + dff + dff * d + d
    ffn = (c.encoder_layers * per_block_ffn if c.use_ffn_encoder else 0) \
        + (c.decoder_layers * per_block_ffn if c.use_ffn_decoder else 0)
    head = c.n_patches * d * c.horizon + c.horizon
    if model.quantizer is None:
        quantizer = 0
    else:
        quantizer = sum(cb.C * cb.D for cb in model.quantizer.codebooks)
    revin = 2 * c.n_channels if (c.use_revin and c.revin_affine) else 0
    total = embed + positional + attention + ffn + head + quantizer + revin
    counts = {"embed": embed, "positional": positional,
              "attention": attention, "ffn": ffn, "head": head,
              "quantizer": quantizer, "revin": revin, "total": total}
    actual = sum(t.data.size for t in model.parameters().values())
    assert actual == total, f"audit drift: registry {actual} vs formula {total}"
    return counts


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

def export_embeddings(model: Forecaster, dataset: WindowDataset, which: str,
                      out_path, codebook_path=None,
                      max_windows: Optional[int] = None) -> int:
    """Write token vectors (one CSV row each) for external plotting.

    Returns the number of rows written. When a quantizer is present its
    codewords go to ``codebook_path`` (stage codebooks stacked).
    """
    n = dataset.n_windows if max_windows is None \
        else min(max_windows, dataset.n_windows)
    rows_written = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for start in range(0, n, 32):
            batch = dataset.inputs[start:min(start + 32, n)]
            vecs = model.token_embeddings(batch, which)
            for row in vecs:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
                rows_written += 1
    if codebook_path is not None:
        if model.quantizer is None:
            raise ConfigurationError(
                "no quantizer in this model (vq_placement=none)")
        stacked = np.vstack([cb.Z.data for cb in model.quantizer.codebooks])
        with open(codebook_path, "w", encoding="utf-8") as fh:
            for row in stacked:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    return rows_written


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"SVQM"
_VERSION = 1


def save_checkpoint(model: Forecaster, path) -> None:
    """Versioned binary: magic SVQM, canonical-JSON config block, then
    named float64 tensors, little-endian throughout."""
    blob = canonical_json(config_to_dict(model.config)).encode("utf-8")
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            raw = name.encode("utf-8")
            arr = params[name].data
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Forecaster:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataLoadError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise DataLoadError(f"{path}: unsupported version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        cfg = config_from_dict(json.loads(fh.read(blob_len).decode("utf-8")))
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<I", fh.read(4))[0]
                          for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            state[name] = np.frombuffer(fh.read(8 * count),
                                        dtype="<f8").reshape(shape).copy()
    model = Forecaster(cfg)
    model.load_state_arrays(state)
    return model
