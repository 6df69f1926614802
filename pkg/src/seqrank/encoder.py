"""Token feature encoding, the two-layer single-head causal transformer
(reference layered path and fused single-pass path), and max pooling.

The fused path walks the sequence in query tiles, materializing Q/K/V only
tile-by-tile with an online softmax, and applies layer-norm + feed-forward
to each output tile in the same sweep. It matches the reference path to
float32 roundoff and can run entirely out of a pre-allocated arena.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import SURFACE_OTHER, ValidationError, l2_normalize_rows, unit_embeddings
from .nnsearch import AssembledSequence

LN_EPS = 1e-5
_NEG32 = np.float32(-1e30)
_NEG64 = np.float64(-1e300)


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the sequence encoder. The model width is twice the content
    embedding width because every token row is the token embedding
    concatenated with the candidate embedding."""

    embed_dim: int = 32
    seq_len: int = 192
    ffn_dim: int = 32
    num_layers: int = 2
    action_rows: int = 16
    surface_rows: int = 256

    @property
    def d_model(self) -> int:
        return 2 * self.embed_dim

    def validate(self) -> None:
        if min(self.embed_dim, self.seq_len, self.ffn_dim, self.num_layers) < 1:
            raise ValidationError("encoder dimensions must be positive")


@dataclass
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    ln1_scale: np.ndarray
    ln1_shift: np.ndarray
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray


_LAYER_TENSOR_NAMES = (
    "wq", "wk", "wv", "wo", "w1", "w2",
    "ln1_scale", "ln1_shift", "ln2_scale", "ln2_shift",
)


@dataclass
class EncoderParams:
    config: EncoderConfig
    action_table: np.ndarray  # (action_rows, d)
    surface_table: np.ndarray  # (surface_rows, d)
    position_table: np.ndarray  # (seq_len, d)
    layers: list[LayerParams] = field(default_factory=list)
    out_linear: np.ndarray = None  # (d, d), applied before max pooling

    @classmethod
    def init(
        cls, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32
    ) -> "EncoderParams":
        cfg.validate()
        d, f = cfg.d_model, cfg.ffn_dim
        w_scale = 1.0 / np.sqrt(d)

        def w(*shape, scale=w_scale):
            return rng.normal(0.0, scale, shape).astype(dtype)

        layers = [
            LayerParams(
                wq=w(d, d),
                wk=w(d, d),
                wv=w(d, d),
                wo=w(d, d),
                w1=w(d, f),
                w2=w(f, d, scale=1.0 / np.sqrt(f)),
                ln1_scale=np.ones(d, dtype),
                ln1_shift=np.zeros(d, dtype),
                ln2_scale=np.ones(d, dtype),
                ln2_shift=np.zeros(d, dtype),
            )
            for _ in range(cfg.num_layers)
        ]
        return cls(
            config=cfg,
            action_table=w(cfg.action_rows, d, scale=0.1),
            surface_table=w(cfg.surface_rows, d, scale=0.1),
            position_table=w(cfg.seq_len, d, scale=0.1),
            layers=layers,
            out_linear=w(d, d),
        )

    def named_tensors(self) -> dict[str, np.ndarray]:
        tensors = {
            "encoder.action_table": self.action_table,
            "encoder.surface_table": self.surface_table,
            "encoder.position_table": self.position_table,
            "encoder.out_linear": self.out_linear,
        }
        for i, layer in enumerate(self.layers):
            for name in _LAYER_TENSOR_NAMES:
                tensors[f"encoder.layer{i}.{name}"] = getattr(layer, name)
        return tensors

    @classmethod
    def from_tensors(cls, cfg: EncoderConfig, tensors: dict[str, np.ndarray]) -> "EncoderParams":
        layers = [
            LayerParams(**{
                name: tensors[f"encoder.layer{i}.{name}"] for name in _LAYER_TENSOR_NAMES
            })
            for i in range(cfg.num_layers)
        ]
        return cls(
            config=cfg,
            action_table=tensors["encoder.action_table"],
            surface_table=tensors["encoder.surface_table"],
            position_table=tensors["encoder.position_table"],
            layers=layers,
            out_linear=tensors["encoder.out_linear"],
        )


@dataclass
class EncodedSequence:
    """Per-token feature rows (seq_len, d_model); masked rows are zero."""

    features: np.ndarray
    mask: np.ndarray


def encode(
    seq: AssembledSequence, candidate: np.ndarray, params: EncoderParams
) -> EncodedSequence:
    """Encode one assembled sequence against its candidate.

    Each valid row is concat(unit token embedding, unit candidate embedding)
    plus the summed action-bit rows (multi-hot), the surface row, and the
    position row. Unknown surfaces fold into the "other" row.
    """
    f, mask = encode_batch([seq], np.asarray(candidate)[None, :], params)
    return EncodedSequence(f[0], mask[0])


def encode_batch(
    seqs: list[AssembledSequence], candidates: np.ndarray, params: EncoderParams
) -> tuple[np.ndarray, np.ndarray]:
    cfg = params.config
    length = cfg.seq_len
    dtype = params.action_table.dtype
    batch = len(seqs)
    if any(len(s) != length for s in seqs):
        raise ValidationError("assembled length must match the positional table")

    emb = np.stack([s.block.embeddings for s in seqs])  # (B, L, E) int8
    unit = unit_embeddings(emb.reshape(batch * length, -1)).reshape(batch, length, -1)
    unit_c = l2_normalize_rows(np.asarray(candidates, np.float32))

    actions = np.stack([s.block.actions for s in seqs]).astype(np.int64)
    bits = (actions[..., None] >> np.arange(cfg.action_rows)) & 1
    surfaces = np.stack([s.block.surfaces for s in seqs]).astype(np.intp)
    surfaces[surfaces > SURFACE_OTHER] = SURFACE_OTHER
    mask = np.stack([s.mask for s in seqs])

    features = np.zeros((batch, length, cfg.d_model), dtype)
    features[:, :, : cfg.embed_dim] = unit
    features[:, :, cfg.embed_dim :] = unit_c[:, None, :]
    features += bits.astype(dtype) @ params.action_table
    features += params.surface_table[surfaces]
    features += params.position_table[None, :, :]
    features *= mask[:, :, None].astype(dtype)
    return features, mask


# ---------------------------------------------------------------------------
# Reference transformer
# ---------------------------------------------------------------------------


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return xc / np.sqrt(var + np.asarray(LN_EPS, x.dtype)) * scale + shift


def masked_softmax(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Row softmax over permitted positions; rows with none allowed are zero."""
    neg = np.array(-np.inf, logits.dtype)
    masked = np.where(allowed, logits, neg)
    rowmax = masked.max(-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, logits.dtype.type(0))
    weights = np.exp(masked - rowmax)
    denom = weights.sum(-1, keepdims=True)
    return weights / np.where(denom == 0, logits.dtype.type(1), denom)


def _allowed_matrix(length: int, mask: np.ndarray, extra_mask: np.ndarray | None) -> np.ndarray:
    allowed = np.tril(np.ones((length, length), bool)) & mask[None, :]
    if extra_mask is not None:
        allowed = allowed & extra_mask
    return allowed


def forward_reference(
    encoded: EncodedSequence,
    params: EncoderParams,
    extra_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Layered pre-norm transformer forward for one sequence.

    Attention logits use a combined causal + key-validity (+ optional custom)
    mask; a row with no permitted keys gets a zero attention output and the
    residual passes through.
    """
    x = np.array(encoded.features)
    length, d = x.shape
    scale = np.asarray(1.0 / np.sqrt(d), x.dtype)
    allowed = _allowed_matrix(length, encoded.mask, extra_mask)

    for layer in params.layers:
        a_in = layer_norm(x, layer.ln1_scale, layer.ln1_shift)
        q = a_in @ layer.wq
        k = a_in @ layer.wk
        v = a_in @ layer.wv
        probs = masked_softmax((q @ k.T) * scale, allowed)
        x = x + (probs @ v) @ layer.wo
        f_in = layer_norm(x, layer.ln2_scale, layer.ln2_shift)
        x = x + np.maximum(f_in @ layer.w1, 0) @ layer.w2
    return x


def forward_reference_batch(
    features: np.ndarray,
    mask: np.ndarray,
    params: EncoderParams,
    extra_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Item-by-item reference forward over a batch."""
    out = np.empty_like(features)
    for i in range(len(features)):
        extra = None
        if extra_mask is not None:
            extra = extra_mask if extra_mask.ndim == 2 else extra_mask[i]
        out[i] = forward_reference(EncodedSequence(features[i], mask[i]), params, extra)
    return out


def pool(u: np.ndarray, mask: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Linear projection then elementwise max over valid positions.

    Returns zeros when every position is masked (no sequence signal).
    """
    if not mask.any():
        return np.zeros(u.shape[-1], u.dtype)
    y = u[mask] @ params.out_linear
    return y.max(0)


# ---------------------------------------------------------------------------
# Fused single-pass transformer
# ---------------------------------------------------------------------------


def _take(arena, shape, dtype):
    if arena is None:
        return np.empty(shape, dtype)
    return arena.take(shape, dtype)


_TRIU_CACHE: dict[int, np.ndarray] = {}


def _strict_upper(size: int) -> np.ndarray:
    cached = _TRIU_CACHE.get(size)
    if cached is None:
        cached = np.triu(np.ones((size, size), bool), 1)
        _TRIU_CACHE[size] = cached
    return cached


def _ln_into(x, scale, shift, out, mu, var, sq) -> None:
    """Layer norm written into `out` using preallocated stat buffers.

    Performs the same operations in the same order as :func:`layer_norm`.
    """
    np.mean(x, -1, keepdims=True, out=mu)
    np.subtract(x, mu, out=out)
    np.multiply(out, out, out=sq)
    np.mean(sq, -1, keepdims=True, out=var)
    np.add(var, x.dtype.type(LN_EPS), out=var)
    np.sqrt(var, out=var)
    np.divide(out, var, out=out)
    np.multiply(out, scale, out=out)
    np.add(out, shift, out=out)


def forward_fused(
    features: np.ndarray,
    mask: np.ndarray,
    params: EncoderParams,
    extra_mask: np.ndarray | None = None,
    arena=None,
    tile: int = 64,
) -> np.ndarray:
    """Single-pass fused forward over a batch (B, L, d).

    Per layer: a tiled layer-norm sweep fills the attention input, then one
    sweep over query tiles. Q/K/V exist only as (B, tile, d) buffers computed
    on the fly; key tiles strictly in the causal future are skipped; the
    online-softmax accumulator is projected, layer-normed, and pushed through
    the feed-forward per tile before the sweep moves on. All workspace comes
    from `arena` when given, so steady-state calls allocate nothing; the
    returned array then aliases arena memory and is only valid until reset.
    """
    if features.ndim != 3:
        raise ValidationError("expected a (batch, length, d_model) feature tensor")
    batch, length, d = features.shape
    dtype = features.dtype
    neg = _NEG32 if dtype == np.float32 else _NEG64
    fdim = params.config.ffn_dim
    tile = max(1, min(tile, length))
    scale = dtype.type(1.0 / np.sqrt(d))

    x = _take(arena, (batch, length, d), dtype)
    np.copyto(x, features)
    a_in = _take(arena, (batch, length, d), dtype)

    q_buf = _take(arena, (batch, tile, d), dtype)
    k_buf = _take(arena, (batch, tile, d), dtype)
    v_buf = _take(arena, (batch, tile, d), dtype)
    s_buf = _take(arena, (batch, tile, tile), dtype)
    acc = _take(arena, (batch, tile, d), dtype)
    pv = _take(arena, (batch, tile, d), dtype)
    sq = _take(arena, (batch, tile, d), dtype)
    m_run = _take(arena, (batch, tile), dtype)
    m_new = _take(arena, (batch, tile), dtype)
    alpha = _take(arena, (batch, tile), dtype)
    l_run = _take(arena, (batch, tile), dtype)
    l_tmp = _take(arena, (batch, tile), dtype)
    mu = _take(arena, (batch, tile, 1), dtype)
    var = _take(arena, (batch, tile, 1), dtype)
    h_buf = _take(arena, (batch, tile, fdim), dtype)
    ffn_out = _take(arena, (batch, tile, d), dtype)

    invalid = _take(arena, (batch, length), bool)
    np.logical_not(mask, out=invalid)
    row_any = _take(arena, (batch, length), dtype)

    bad = None
    if extra_mask is not None:
        if extra_mask.ndim == 2:
            extra_mask = np.broadcast_to(extra_mask, (batch, length, length))
        bad = _take(arena, (batch, length, length), bool)
        np.logical_not(extra_mask, out=bad)
        np.logical_or(bad, _strict_upper(length), out=bad)
        np.logical_or(bad, invalid[:, None, :], out=bad)
        any_ok = _take(arena, (batch, length), bool)
        np.all(bad, -1, out=any_ok)
        np.logical_not(any_ok, out=any_ok)
        row_any[...] = any_ok
    else:
        # has-any-allowed-key(t) = OR of key validity over positions <= t
        row_any[...] = mask
        np.maximum.accumulate(row_any, axis=1, out=row_any)

    n_tiles = (length + tile - 1) // tile

    for layer in params.layers:
        for ti in range(n_tiles):
            ts, te = ti * tile, min((ti + 1) * tile, length)
            t = te - ts
            _ln_into(
                x[:, ts:te], layer.ln1_scale, layer.ln1_shift,
                a_in[:, ts:te], mu[:, :t], var[:, :t], sq[:, :t],
            )

        for qi in range(n_tiles):
            qs, qe = qi * tile, min((qi + 1) * tile, length)
            tq = qe - qs
            q = q_buf[:, :tq]
            np.matmul(a_in[:, qs:qe], layer.wq, out=q)

            macc = m_run[:, :tq]
            lacc = l_run[:, :tq]
            att = acc[:, :tq]
            macc.fill(neg)
            lacc.fill(0)
            att.fill(0)

            for kj in range(qi + 1):
                ks, ke = kj * tile, min((kj + 1) * tile, length)
                tk = ke - ks
                k = k_buf[:, :tk]
                v = v_buf[:, :tk]
                np.matmul(a_in[:, ks:ke], layer.wk, out=k)
                np.matmul(a_in[:, ks:ke], layer.wv, out=v)

                s = s_buf[:, :tq, :tk]
                np.matmul(q, k.transpose(0, 2, 1), out=s)
                np.multiply(s, scale, out=s)
                if bad is not None:
                    np.copyto(s, neg, where=bad[:, qs:qe, ks:ke])
                else:
                    np.copyto(s, neg, where=invalid[:, None, ks:ke])
                    if kj == qi:
                        np.copyto(s, neg, where=_strict_upper(tile)[:tq, :tk])

                mn = m_new[:, :tq]
                np.max(s, axis=-1, out=mn)
                np.maximum(mn, macc, out=mn)
                al = alpha[:, :tq]
                np.subtract(macc, mn, out=al)
                np.exp(al, out=al)
                np.copyto(macc, mn)

                np.subtract(s, mn[:, :, None], out=s)
                np.exp(s, out=s)

                np.multiply(lacc, al, out=lacc)
                lt = l_tmp[:, :tq]
                np.sum(s, axis=-1, out=lt)
                np.add(lacc, lt, out=lacc)

                np.multiply(att, al[:, :, None], out=att)
                np.matmul(s, v, out=pv[:, :tq])
                np.add(att, pv[:, :tq], out=att)

            np.maximum(lacc, dtype.type(1e-30), out=lacc)
            np.divide(att, lacc[:, :, None], out=att)
            np.multiply(att, row_any[:, qs:qe, None], out=att)

            # attention output projection + residual, then fused LN2 + FFN
            np.matmul(att, layer.wo, out=pv[:, :tq])
            np.add(x[:, qs:qe], pv[:, :tq], out=x[:, qs:qe])

            _ln_into(
                x[:, qs:qe], layer.ln2_scale, layer.ln2_shift,
                sq[:, :tq], mu[:, :tq], var[:, :tq], pv[:, :tq],
            )
            np.matmul(sq[:, :tq], layer.w1, out=h_buf[:, :tq])
            np.maximum(h_buf[:, :tq], dtype.type(0), out=h_buf[:, :tq])
            np.matmul(h_buf[:, :tq], layer.w2, out=ffn_out[:, :tq])
            np.add(x[:, qs:qe], ffn_out[:, :tq], out=x[:, qs:qe])

    return x
