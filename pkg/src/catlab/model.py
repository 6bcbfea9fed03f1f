"""Encoder-decoder transformer in NumPy with exact manual backpropagation.

Post-norm blocks, fixed sinusoidal positions, ReLU feed-forward, and one
embedding matrix shared three ways (encoder input, decoder input, output
projection). Parameters are a flat dict of named arrays; gradients mirror it
key for key. Shapes: (B, T, D) activations, (B, h, T, d) attention heads.

Optional bottleneck adapters (one after every sublayer) and low-rank deltas
on attention query/value projections extend the same forward/backward when
enabled in the config.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from catlab.subword import BOS, EOS, PAD

NEG_INF = -1e9
LN_EPS = 1e-5


@dataclass(frozen=True)
class AdapterConfig:
    """Bottleneck adapter inserted after every sublayer's residual+norm."""

    bottleneck_dim: int

    def __post_init__(self):
        if self.bottleneck_dim < 1:
            raise ValueError("bottleneck_dim must be >= 1")


@dataclass(frozen=True)
class LoraConfig:
    """Low-rank additive deltas on attention query/value projections."""

    rank: int
    alpha: float | None = None  # None -> alpha == rank (scaling 1)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")

    @property
    def scaling(self) -> float:
        return (self.alpha if self.alpha is not None else self.rank) / self.rank


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int
    dec_layers: int
    d_model: int
    d_ffn: int
    n_heads: int
    vocab_size: int
    max_len: int = 128
    head_dim: int = 0  # 0 -> d_model // n_heads
    dropout: float = 0.0
    label_smoothing: float = 0.1
    share_embeddings: bool = True
    seed: int = 0
    adapter: AdapterConfig | None = None
    lora: LoraConfig | None = None

    def __post_init__(self):
        if self.head_dim == 0:
            object.__setattr__(self, "head_dim", self.d_model // self.n_heads)
        if self.n_heads * self.head_dim != self.d_model:
            raise ValueError("n_heads * head_dim must equal d_model")
        if not self.share_embeddings:
            raise ValueError("only shared embeddings are supported")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.adapter is not None and self.adapter.bottleneck_dim >= self.d_model:
            raise ValueError("adapter bottleneck_dim must be < d_model")
        if self.lora is not None and self.lora.rank >= self.d_model:
            raise ValueError("lora rank must be < d_model")

    @classmethod
    def paper_base(cls, vocab_size: int = 48000, **kw) -> "ModelConfig":
        """Reference preset: 6+6 layers, d=512, ffn 2048, 8 heads of dim 64."""
        kw.setdefault("dropout", 0.1)
        return cls(enc_layers=6, dec_layers=6, d_model=512, d_ffn=2048,
                   n_heads=8, vocab_size=vocab_size, **kw)

    @classmethod
    def toy(cls, vocab_size: int = 512, **kw) -> "ModelConfig":
        """Desk-scale preset: 2+2 layers, d=64, ffn 256, 4 heads."""
        return cls(enc_layers=2, dec_layers=2, d_model=64, d_ffn=256,
                   n_heads=4, vocab_size=vocab_size, **kw)


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    if d.get("adapter"):
        d["adapter"] = AdapterConfig(**d["adapter"])
    if d.get("lora"):
        d["lora"] = LoraConfig(**d["lora"])
    return ModelConfig(**d)


def _attn_names(prefix: str, config: ModelConfig) -> list[tuple[str, tuple]]:
    d = config.d_model
    names = [(f"{prefix}.{w}", (d, d)) for w in ("wq", "wk", "wv", "wo")]
    if config.lora is not None:
        r = config.lora.rank
        for t in ("lora_q", "lora_v"):
            names.append((f"{prefix}.{t}.a", (d, r)))
            names.append((f"{prefix}.{t}.b", (r, d)))
    return names


def _block_names(prefix: str, config: ModelConfig, sublayers: list[str]) -> list:
    d, f = config.d_model, config.d_ffn
    names = []
    ln = 0
    for sub in sublayers:
        if sub == "ffn":
            names += [(f"{prefix}.ffn.w1", (d, f)), (f"{prefix}.ffn.b1", (f,)),
                      (f"{prefix}.ffn.w2", (f, d)), (f"{prefix}.ffn.b2", (d,))]
        else:
            names += _attn_names(f"{prefix}.{sub}", config)
        ln += 1
        names += [(f"{prefix}.ln{ln}.scale", (d,)), (f"{prefix}.ln{ln}.offset", (d,))]
        if config.adapter is not None:
            b = config.adapter.bottleneck_dim
            names += [(f"{prefix}.adapter{ln}.down_w", (d, b)),
                      (f"{prefix}.adapter{ln}.down_b", (b,)),
                      (f"{prefix}.adapter{ln}.up_w", (b, d)),
                      (f"{prefix}.adapter{ln}.up_b", (d,))]
    return names


def param_shapes(config: ModelConfig) -> dict:
    """Canonical parameter layout; iteration order is the storage order."""
    shapes = {"embedding": (config.vocab_size, config.d_model)}
    for i in range(config.enc_layers):
        for name, shape in _block_names(f"enc.{i}", config, ["attn", "ffn"]):
            shapes[name] = shape
    for i in range(config.dec_layers):
        names = _block_names(f"dec.{i}", config, ["self_attn", "cross_attn", "ffn"])
        for name, shape in names:
            shapes[name] = shape
    return shapes


def count_params(config: ModelConfig) -> int:
    """Closed-form total parameter count; equals summed tensor sizes."""
    d, f, v = config.d_model, config.d_ffn, config.vocab_size
    per_attn = 4 * d * d
    per_ffn = d * f + f + f * d + d
    per_ln = 2 * d
    enc_layer = per_attn + per_ffn + 2 * per_ln
    dec_layer = 2 * per_attn + per_ffn + 3 * per_ln
    total = v * d + config.enc_layers * enc_layer + config.dec_layers * dec_layer
    if config.adapter is not None:
        b = config.adapter.bottleneck_dim
        n_sites = 2 * config.enc_layers + 3 * config.dec_layers
        total += n_sites * (d * b + b + b * d + d)
    if config.lora is not None:
        r = config.lora.rank
        n_blocks = config.enc_layers + 2 * config.dec_layers
        total += n_blocks * 2 * (d * r + r * d)
    return total


def init_params(config: ModelConfig, dtype=np.float32) -> dict:
    """Seeded fan-based uniform init; layer-norm scale 1, offset 0, biases 0.

    Adapter up-projections and LoRA B factors start at zero so the augmented
    model initially matches the base model.
    """
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("scale",):
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf in ("offset", "b1", "b2", "down_b", "up_b") or name.endswith(
            ("up_w", "lora_q.b", "lora_v.b")
        ):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name == "embedding":
            # Small fan-based scale: the matrix doubles as the output
            # projection, and initial logits must stay near-uniform.
            limit = 0.2 / math.sqrt(config.d_model)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[-1]))
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


@dataclass
class Batch:
    """Padded id arrays; tgt_in is tgt_out shifted right with BOS."""

    src: np.ndarray      # (B, S) int
    tgt_in: np.ndarray   # (B, T) int
    tgt_out: np.ndarray  # (B, T) int

    @property
    def n_examples(self) -> int:
        return self.src.shape[0]

    @property
    def n_loss_tokens(self) -> int:
        return int((self.tgt_out != PAD).sum())


def make_batch(src_seqs: list, tgt_seqs: list) -> Batch:
    """Pad variable-length id sequences into one batch."""
    if len(src_seqs) != len(tgt_seqs) or not src_seqs:
        raise ValueError("need equal, non-zero numbers of source/target sequences")
    b = len(src_seqs)
    s_max = max(len(s) for s in src_seqs)
    t_max = max(len(t) for t in tgt_seqs)
    src = np.full((b, s_max), PAD, dtype=np.int32)
    tgt_in = np.full((b, t_max), PAD, dtype=np.int32)
    tgt_out = np.full((b, t_max), PAD, dtype=np.int32)
    for i, (s, t) in enumerate(zip(src_seqs, tgt_seqs)):
        src[i, : len(s)] = s
        tgt_in[i, 0] = BOS
        tgt_in[i, 1 : len(t)] = t[:-1]
        tgt_out[i, : len(t)] = t
    return Batch(src=src, tgt_in=tgt_in, tgt_out=tgt_out)


# ---------------------------------------------------------------- primitives


def _dropout_mask(rng, shape, p: float, dtype):
    if rng is None or p <= 0.0:
        return None
    return (rng.random(shape) >= p).astype(dtype) / (1.0 - p)


def _apply_mask(x, mask):
    return x if mask is None else x * mask


def _ln_fwd(x, scale, offset):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * scale + offset, (xhat, inv, scale)


def _ln_bwd(dy, cache):
    xhat, inv, scale = cache
    ghat = dy * scale
    m1 = ghat.mean(axis=-1, keepdims=True)
    m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
    dx = (ghat - m1 - xhat * m2) * inv
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _mm(x, w):
    """(..., D) @ (D, F) as a single flat gemm; much faster than broadcasting
    matmul over the leading batch dimensions."""
    lead = x.shape[:-1]
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(*lead, w.shape[-1])


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _proj_fwd(params, prefix, target, x, config):
    """x @ W for q/k/v/o, with the optional low-rank delta on q and v."""
    w = params[f"{prefix}.w{target}"]
    y = _mm(x, w)
    u = None
    if config.lora is not None and target in ("q", "v"):
        a = params[f"{prefix}.lora_{target}.a"]
        b = params[f"{prefix}.lora_{target}.b"]
        u = _mm(x, a)
        y = y + _mm(u, b) * config.lora.scaling
    return y, u


def _proj_bwd(grads, params, prefix, target, x, u, dy, config):
    w = params[f"{prefix}.w{target}"]
    xf = x.reshape(-1, x.shape[-1])
    dyf = dy.reshape(-1, dy.shape[-1])
    grads[f"{prefix}.w{target}"] += xf.T @ dyf
    dx = _mm(dy, w.T)
    if config.lora is not None and target in ("q", "v"):
        s = config.lora.scaling
        a = params[f"{prefix}.lora_{target}.a"]
        b = params[f"{prefix}.lora_{target}.b"]
        uf = u.reshape(-1, u.shape[-1])
        grads[f"{prefix}.lora_{target}.b"] += (uf.T @ dyf) * s
        du = _mm(dy, b.T) * s
        duf = du.reshape(-1, du.shape[-1])
        grads[f"{prefix}.lora_{target}.a"] += xf.T @ duf
        dx = dx + _mm(du, a.T)
    return dx


def _attn_fwd(params, prefix, x_q, x_kv, add_mask, config):
    h = config.n_heads
    q, uq = _proj_fwd(params, prefix, "q", x_q, config)
    k, _ = _proj_fwd(params, prefix, "k", x_kv, config)
    v, uv = _proj_fwd(params, prefix, "v", x_kv, config)
    qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    scale = 1.0 / math.sqrt(config.head_dim)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if add_mask is not None:
        scores = scores + add_mask
    probs = _softmax(scores)
    ctx = _merge_heads(probs @ vh)
    out, uo = _proj_fwd(params, prefix, "o", ctx, config)
    return out, (x_q, x_kv, uq, uv, qh, kh, vh, probs, ctx, scale)


def _attn_bwd(grads, params, prefix, dy, cache, config):
    x_q, x_kv, uq, uv, qh, kh, vh, probs, ctx, scale = cache
    h = config.n_heads
    dctx = _proj_bwd(grads, params, prefix, "o", ctx, None, dy, config)
    dctx_h = _split_heads(dctx, h)
    dprobs = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = probs.transpose(0, 1, 3, 2) @ dctx_h
    rowdot = (dprobs * probs).sum(axis=-1, keepdims=True)
    dscores = (dprobs - rowdot) * probs
    dqh = (dscores @ kh) * scale
    dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
    dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
    dx_q = _proj_bwd(grads, params, prefix, "q", x_q, uq, dq, config)
    dx_kv = _proj_bwd(grads, params, prefix, "k", x_kv, None, dk, config)
    dx_kv = dx_kv + _proj_bwd(grads, params, prefix, "v", x_kv, uv, dv, config)
    return dx_q, dx_kv


def _ffn_fwd(params, prefix, x):
    z = _mm(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"]
    a = np.maximum(z, 0.0)
    y = _mm(a, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]
    return y, (x, z, a)


def _ffn_bwd(grads, params, prefix, dy, cache):
    x, z, a = cache
    dyf = dy.reshape(-1, dy.shape[-1])
    af = a.reshape(-1, a.shape[-1])
    grads[f"{prefix}.w2"] += af.T @ dyf
    grads[f"{prefix}.b2"] += dyf.sum(axis=0)
    da = _mm(dy, params[f"{prefix}.w2"].T)
    dz = da * (z > 0)
    dzf = dz.reshape(-1, dz.shape[-1])
    xf = x.reshape(-1, x.shape[-1])
    grads[f"{prefix}.w1"] += xf.T @ dzf
    grads[f"{prefix}.b1"] += dzf.sum(axis=0)
    return _mm(dz, params[f"{prefix}.w1"].T)


def _adapter_fwd(params, prefix, x):
    z = _mm(x, params[f"{prefix}.down_w"]) + params[f"{prefix}.down_b"]
    a = np.maximum(z, 0.0)
    return x + _mm(a, params[f"{prefix}.up_w"]) + params[f"{prefix}.up_b"], (x, z, a)


def _adapter_bwd(grads, params, prefix, dy, cache):
    x, z, a = cache
    dyf = dy.reshape(-1, dy.shape[-1])
    af = a.reshape(-1, a.shape[-1])
    grads[f"{prefix}.up_w"] += af.T @ dyf
    grads[f"{prefix}.up_b"] += dyf.sum(axis=0)
    da = _mm(dy, params[f"{prefix}.up_w"].T)
    dz = da * (z > 0)
    dzf = dz.reshape(-1, dz.shape[-1])
    xf = x.reshape(-1, x.shape[-1])
    grads[f"{prefix}.down_w"] += xf.T @ dzf
    grads[f"{prefix}.down_b"] += dzf.sum(axis=0)
    return dy + _mm(dz, params[f"{prefix}.down_w"].T)


def _sublayer_out(params, config, prefix, ln_idx, x, sub_out, drop_mask):
    """Post-norm residual: LN(x + dropout(sub_out)), then optional adapter."""
    pre = x + _apply_mask(sub_out, drop_mask)
    y, ln_cache = _ln_fwd(
        pre, params[f"{prefix}.ln{ln_idx}.scale"], params[f"{prefix}.ln{ln_idx}.offset"]
    )
    ad_cache = None
    if config.adapter is not None:
        y, ad_cache = _adapter_fwd(params, f"{prefix}.adapter{ln_idx}", y)
    return y, (ln_cache, ad_cache, drop_mask)


def _sublayer_bwd(grads, params, config, prefix, ln_idx, dy, cache):
    """Returns (d_pre_residual,) to be split by the caller."""
    ln_cache, ad_cache, drop_mask = cache
    if ad_cache is not None:
        dy = _adapter_bwd(grads, params, f"{prefix}.adapter{ln_idx}", dy, ad_cache)
    dpre, dscale, doffset = _ln_bwd(dy, ln_cache)
    grads[f"{prefix}.ln{ln_idx}.scale"] += dscale
    grads[f"{prefix}.ln{ln_idx}.offset"] += doffset
    dsub = _apply_mask(dpre, drop_mask)
    return dpre, dsub


# ---------------------------------------------------------------- full model


def _validate_batch(batch: Batch, config: ModelConfig) -> None:
    for name, arr in (("src", batch.src), ("tgt_in", batch.tgt_in),
                      ("tgt_out", batch.tgt_out)):
        if arr.min() < 0 or arr.max() >= config.vocab_size:
            raise ValueError(f"{name} token id out of range [0, {config.vocab_size})")
        if arr.shape[1] > config.max_len:
            raise ValueError(f"{name} length {arr.shape[1]} exceeds max_len")


def _masks(batch: Batch, dtype):
    src_pad = batch.src == PAD
    enc_mask = np.where(src_pad[:, None, None, :], NEG_INF, 0.0).astype(dtype)
    t = batch.tgt_in.shape[1]
    causal = np.triu(np.full((t, t), NEG_INF, dtype=dtype), k=1)[None, None]
    return enc_mask, causal


def _forward_core(params, batch, config, train, rng):
    _validate_batch(batch, config)
    emb = params["embedding"]
    dtype = emb.dtype
    d = config.d_model
    scale = math.sqrt(d)
    pe = positional_encoding(config.max_len, d).astype(dtype)
    enc_mask, causal = _masks(batch, dtype)
    p = config.dropout if train else 0.0

    cache = {"enc": [], "dec": []}
    x = emb[batch.src] * scale + pe[: batch.src.shape[1]]
    cache["enc_in_mask"] = _dropout_mask(rng, x.shape, p, dtype)
    x = _apply_mask(x, cache["enc_in_mask"])
    for i in range(config.enc_layers):
        pfx = f"enc.{i}"
        a, attn_cache = _attn_fwd(params, f"{pfx}.attn", x, x, enc_mask, config)
        m1 = _dropout_mask(rng, a.shape, p, dtype)
        x1, sub1 = _sublayer_out(params, config, pfx, 1, x, a, m1)
        f, ffn_cache = _ffn_fwd(params, f"{pfx}.ffn", x1)
        m2 = _dropout_mask(rng, f.shape, p, dtype)
        x2, sub2 = _sublayer_out(params, config, pfx, 2, x1, f, m2)
        cache["enc"].append((attn_cache, sub1, ffn_cache, sub2))
        x = x2
    memory = x

    y = emb[batch.tgt_in] * scale + pe[: batch.tgt_in.shape[1]]
    cache["dec_in_mask"] = _dropout_mask(rng, y.shape, p, dtype)
    y = _apply_mask(y, cache["dec_in_mask"])
    for i in range(config.dec_layers):
        pfx = f"dec.{i}"
        a, self_cache = _attn_fwd(params, f"{pfx}.self_attn", y, y, causal, config)
        m1 = _dropout_mask(rng, a.shape, p, dtype)
        y1, sub1 = _sublayer_out(params, config, pfx, 1, y, a, m1)
        c, cross_cache = _attn_fwd(
            params, f"{pfx}.cross_attn", y1, memory, enc_mask, config
        )
        m2 = _dropout_mask(rng, c.shape, p, dtype)
        y2, sub2 = _sublayer_out(params, config, pfx, 2, y1, c, m2)
        f, ffn_cache = _ffn_fwd(params, f"{pfx}.ffn", y2)
        m3 = _dropout_mask(rng, f.shape, p, dtype)
        y3, sub3 = _sublayer_out(params, config, pfx, 3, y2, f, m3)
        cache["dec"].append((self_cache, sub1, cross_cache, sub2, ffn_cache, sub3))
        y = y3

    logits = _mm(y, emb.T)
    cache["dec_out"] = y
    cache["memory"] = memory
    cache["enc_mask_scale"] = scale
    return logits, cache


def _loss_from_logits(logits, batch, config):
    loss_mask = (batch.tgt_out != PAD)
    n_tok = int(loss_mask.sum())
    if n_tok == 0:
        raise ValueError("no loss tokens: batch targets are all padding")
    z = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    b_idx, t_idx = np.nonzero(loss_mask)
    nll = -logp[b_idx, t_idx, batch.tgt_out[b_idx, t_idx]]
    eps = config.label_smoothing
    if eps > 0.0:
        smooth = -logp[b_idx, t_idx].mean(axis=-1)
        per_tok = (1.0 - eps) * nll + eps * smooth
    else:
        per_tok = nll
    return float(per_tok.sum() / n_tok), logp, loss_mask, n_tok


def forward(params, batch, config, mode="eval", dropout_seed=0):
    """Run the model; returns (logits, loss). Eval mode disables dropout."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(dropout_seed) if mode == "train" else None
    logits, _ = _forward_core(params, batch, config, mode == "train", rng)
    loss, _, _, _ = _loss_from_logits(logits, batch, config)
    return logits, loss


def loss_and_grads(params, batch, config, mode="train", dropout_seed=0,
                   loss_scale=1.0):
    """One fused forward+backward pass; returns (loss, grads).

    loss_scale multiplies the loss (and hence every gradient) uniformly.
    """
    rng = np.random.default_rng(dropout_seed) if mode == "train" else None
    logits, cache = _forward_core(params, batch, config, mode == "train", rng)
    loss, logp, loss_mask, n_tok = _loss_from_logits(logits, batch, config)
    loss *= loss_scale

    emb = params["embedding"]
    dtype = emb.dtype
    eps = config.label_smoothing
    v = config.vocab_size
    probs = np.exp(logp)
    dlogits = probs.copy()
    if eps > 0.0:
        dlogits -= eps / v
    b_idx, t_idx = np.nonzero(loss_mask)
    dlogits[b_idx, t_idx, batch.tgt_out[b_idx, t_idx]] -= 1.0 - eps
    dlogits *= (loss_mask[:, :, None] * (loss_scale / n_tok)).astype(dtype)

    grads = {k: np.zeros_like(p) for k, p in params.items()}
    dec_out = cache["dec_out"]
    dl_flat = dlogits.reshape(-1, v)
    grads["embedding"] += dl_flat.T @ dec_out.reshape(-1, dec_out.shape[-1])
    dy = _mm(dlogits, emb)

    dmem = np.zeros_like(cache["memory"])
    for i in reversed(range(config.dec_layers)):
        pfx = f"dec.{i}"
        self_cache, sub1, cross_cache, sub2, ffn_cache, sub3 = cache["dec"][i]
        dy2, df = _sublayer_bwd(grads, params, config, pfx, 3, dy, sub3)
        dy2 = dy2 + _ffn_bwd(grads, params, f"{pfx}.ffn", df, ffn_cache)
        dy1, dc = _sublayer_bwd(grads, params, config, pfx, 2, dy2, sub2)
        dq, dkv = _attn_bwd(grads, params, f"{pfx}.cross_attn", dc, cross_cache, config)
        dy1 = dy1 + dq
        dmem += dkv
        dy0, da = _sublayer_bwd(grads, params, config, pfx, 1, dy1, sub1)
        dq, dkv = _attn_bwd(grads, params, f"{pfx}.self_attn", da, self_cache, config)
        dy = dy0 + dq + dkv

    dy = _apply_mask(dy, cache["dec_in_mask"])
    scale = cache["enc_mask_scale"]
    np.add.at(grads["embedding"], batch.tgt_in.reshape(-1),
              (dy * scale).reshape(-1, dy.shape[-1]))

    dx = dmem
    for i in reversed(range(config.enc_layers)):
        pfx = f"enc.{i}"
        attn_cache, sub1, ffn_cache, sub2 = cache["enc"][i]
        dx1, df = _sublayer_bwd(grads, params, config, pfx, 2, dx, sub2)
        dx1 = dx1 + _ffn_bwd(grads, params, f"{pfx}.ffn", df, ffn_cache)
        dx0, da = _sublayer_bwd(grads, params, config, pfx, 1, dx1, sub1)
        dq, dkv = _attn_bwd(grads, params, f"{pfx}.attn", da, attn_cache, config)
        dx = dx0 + dq + dkv

    dx = _apply_mask(dx, cache["enc_in_mask"])
    np.add.at(grads["embedding"], batch.src.reshape(-1),
              (dx * scale).reshape(-1, dx.shape[-1]))
    return loss, grads


def backward(params, batch, config, mode="train", dropout_seed=0):
    """Exact gradients of the loss for every parameter tensor."""
    _, grads = loss_and_grads(params, batch, config, mode=mode,
                              dropout_seed=dropout_seed)
    return grads


# ------------------------------------------------------------------- decode


def encode_source(params, config, src: np.ndarray):
    """Eval-mode encoder pass; returns (memory, cross-attention add-mask)."""
    dummy = Batch(src=src, tgt_in=np.full((src.shape[0], 1), BOS, np.int32),
                  tgt_out=np.full((src.shape[0], 1), EOS, np.int32))
    _validate_batch(dummy, config)
    emb = params["embedding"]
    dtype = emb.dtype
    scale = math.sqrt(config.d_model)
    pe = positional_encoding(config.max_len, config.d_model).astype(dtype)
    enc_mask, _ = _masks(dummy, dtype)
    x = emb[src] * scale + pe[: src.shape[1]]
    for i in range(config.enc_layers):
        pfx = f"enc.{i}"
        a, _ = _attn_fwd(params, f"{pfx}.attn", x, x, enc_mask, config)
        x1, _ = _sublayer_out(params, config, pfx, 1, x, a, None)
        f, _ = _ffn_fwd(params, f"{pfx}.ffn", x1)
        x, _ = _sublayer_out(params, config, pfx, 2, x1, f, None)
    return x, enc_mask


def decoder_logits(params, config, memory, enc_mask, tgt_in: np.ndarray):
    """Eval-mode decoder pass over a full prefix; returns (B, T, V) logits."""
    emb = params["embedding"]
    dtype = emb.dtype
    scale = math.sqrt(config.d_model)
    pe = positional_encoding(config.max_len, config.d_model).astype(dtype)
    t = tgt_in.shape[1]
    causal = np.triu(np.full((t, t), NEG_INF, dtype=dtype), k=1)[None, None]
    y = emb[tgt_in] * scale + pe[:t]
    for i in range(config.dec_layers):
        pfx = f"dec.{i}"
        a, _ = _attn_fwd(params, f"{pfx}.self_attn", y, y, causal, config)
        y1, _ = _sublayer_out(params, config, pfx, 1, y, a, None)
        c, _ = _attn_fwd(params, f"{pfx}.cross_attn", y1, memory, enc_mask, config)
        y2, _ = _sublayer_out(params, config, pfx, 2, y1, c, None)
        f, _ = _ffn_fwd(params, f"{pfx}.ffn", y2)
        y, _ = _sublayer_out(params, config, pfx, 3, y2, f, None)
    return _mm(y, emb.T)


# ------------------------------------------------------- adapters and LoRA


def attach_adapters(params: dict, config: ModelConfig,
                    adapter: AdapterConfig, seed: int = 0):
    """Add zero-initialized adapters; returns (new_params, new_config)."""
    if config.adapter is not None:
        raise ValueError("model already has adapters")
    new_config = dataclasses.replace(config, adapter=adapter)
    return _attach(params, new_config, seed), new_config


def attach_lora(params: dict, config: ModelConfig,
                lora: LoraConfig, seed: int = 0):
    """Add low-rank deltas (B factors zero); returns (new_params, new_config)."""
    if config.lora is not None:
        raise ValueError("model already has low-rank deltas")
    new_config = dataclasses.replace(config, lora=lora)
    return _attach(params, new_config, seed), new_config


def _attach(params: dict, new_config: ModelConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    dtype = params["embedding"].dtype
    new_params = dict(params)
    for name, shape in param_shapes(new_config).items():
        if name in new_params:
            continue
        if name.endswith(("up_w", "lora_q.b", "lora_v.b")) or name.endswith(
            ("down_b", "up_b")
        ):
            new_params[name] = np.zeros(shape, dtype=dtype)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[-1]))
            new_params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return new_params


def merge_lora(params: dict, config: ModelConfig):
    """Fold low-rank deltas into the base projections; returns (params, config)."""
    if config.lora is None:
        raise ValueError("model has no low-rank deltas")
    s = config.lora.scaling
    merged = {}
    for name, p in params.items():
        if ".lora_" in name:
            continue
        merged[name] = p.copy()
    for name in params:
        if name.endswith(".lora_q.a"):
            prefix = name[: -len(".lora_q.a")]
            for t in ("q", "v"):
                a = params[f"{prefix}.lora_{t}.a"]
                b = params[f"{prefix}.lora_{t}.b"]
                merged[f"{prefix}.w{t}"] = merged[f"{prefix}.w{t}"] + (a @ b) * s
    return merged, dataclasses.replace(config, lora=None)
