"""Toy-scale end-to-end training of the ranking model with hand-written
reverse-mode gradients, SGD/Adam, a finite-difference gradient checker, and
the NAL ablation runner."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint
from .core import UserSequences, ValidationError, l2_normalize_rows
from .dataset import NUM_HEADS, TrainingExample, context_features
from .encoder import EncoderConfig, EncoderParams, encode_batch
from .losses import (
    HeadConfig,
    NALConfig,
    NALSample,
    nal_term,
    select_samples,
    total_loss,
    weighted_ce,
    weighted_ce_grad,
)
from .nnsearch import AssembledSequence, NNConfig, assemble

LN_EPS = 1e-5


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    nn: NNConfig = NNConfig()
    ctx_dim: int = 8
    hidden_dim: int = 64
    heads: HeadConfig = HeadConfig()

    def validate(self) -> None:
        self.encoder.validate()
        self.nn.validate()
        self.heads.validate()
        if self.encoder.seq_len != self.nn.seq_len:
            raise ValidationError("encoder seq_len must equal the assembly length")
        if min(self.ctx_dim, self.hidden_dim) < 1:
            raise ValidationError("model dimensions must be positive")

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Shrunken shape for gradient checking (d_model 8, length 8)."""
        return cls(
            encoder=EncoderConfig(
                embed_dim=4, seq_len=8, ffn_dim=4, num_layers=2,
                action_rows=8, surface_rows=8,
            ),
            nn=NNConfig(recent=2, k_lifelong=2, k_realtime=2, k_impression=2),
            ctx_dim=2,
            hidden_dim=8,
        )


@dataclass
class HeadParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class RankingModel:
    config: ModelConfig
    encoder: EncoderParams
    head: HeadParams
    nal_proj: np.ndarray  # (d_model, embed_dim)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "RankingModel":
        cfg.validate()
        rng = np.random.default_rng([seed, 0])
        enc = EncoderParams.init(cfg.encoder, rng, dtype)
        d = cfg.encoder.d_model
        in_dim = d + cfg.encoder.embed_dim + cfg.ctx_dim
        head = HeadParams(
            w1=rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, cfg.hidden_dim)).astype(dtype),
            b1=np.zeros(cfg.hidden_dim, dtype),
            w2=rng.normal(0, 1 / np.sqrt(cfg.hidden_dim), (cfg.hidden_dim, NUM_HEADS)).astype(dtype),
            b2=np.zeros(NUM_HEADS, dtype),
        )
        nal_proj = rng.normal(0, 1 / np.sqrt(d), (d, cfg.encoder.embed_dim)).astype(dtype)
        return cls(cfg, enc, head, nal_proj)

    @property
    def dtype(self):
        return self.nal_proj.dtype

    def named_tensors(self) -> dict[str, np.ndarray]:
        tensors = self.encoder.named_tensors()
        tensors.update(
            {
                "head.w1": self.head.w1,
                "head.b1": self.head.b1,
                "head.w2": self.head.w2,
                "head.b2": self.head.b2,
                "nal.proj": self.nal_proj,
            }
        )
        return tensors

    def astype(self, dtype) -> "RankingModel":
        tensors = {k: v.astype(dtype) for k, v in self.named_tensors().items()}
        return RankingModel(
            self.config,
            EncoderParams.from_tensors(self.config.encoder, tensors),
            HeadParams(tensors["head.w1"], tensors["head.b1"],
                       tensors["head.w2"], tensors["head.b2"]),
            tensors["nal.proj"],
        )

    def save(self, path) -> None:
        tensors = dict(self.named_tensors())
        cfg, nn = self.config, self.config.nn
        tensors["meta.config"] = np.array(
            [
                cfg.encoder.embed_dim, cfg.encoder.seq_len, cfg.encoder.ffn_dim,
                cfg.encoder.num_layers, cfg.encoder.action_rows, cfg.encoder.surface_rows,
                cfg.ctx_dim, cfg.hidden_dim,
                nn.recent, nn.k_lifelong, nn.k_realtime, nn.k_impression,
            ],
            np.float32,
        )
        checkpoint.save_tensors(path, tensors)

    @classmethod
    def load(cls, path) -> "RankingModel":
        tensors = checkpoint.load_tensors(path)
        meta = tensors.pop("meta.config").astype(int)
        cfg = ModelConfig(
            encoder=EncoderConfig(*meta[:6]),
            nn=NNConfig(*meta[8:12]),
            ctx_dim=int(meta[6]),
            hidden_dim=int(meta[7]),
        )
        return cls(
            cfg,
            EncoderParams.from_tensors(cfg.encoder, tensors),
            HeadParams(tensors["head.w1"], tensors["head.b1"],
                       tensors["head.w2"], tensors["head.b2"]),
            tensors["nal.proj"],
        )


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


@dataclass
class TrainBatch:
    assembled: list[AssembledSequence]
    candidates: np.ndarray  # (B, E) float32
    labels: np.ndarray  # (B, H) uint8
    contexts: np.ndarray  # (B, ctx_dim) float32
    users: list[UserSequences]


_BLANK_CACHE: dict[tuple, AssembledSequence] = {}


def blank_assembled(nn_cfg: NNConfig, embed_dim: int) -> AssembledSequence:
    """Fully masked sequence used for cold starts and no-sequence baselines."""
    key = (nn_cfg, embed_dim)
    if key not in _BLANK_CACHE:
        _BLANK_CACHE[key] = assemble(
            UserSequences(), np.zeros(embed_dim, np.float32), nn_cfg
        )
    return _BLANK_CACHE[key]


def build_batch(
    examples: list[TrainingExample],
    store: dict[int, UserSequences],
    cfg: ModelConfig,
    blank_sequences: bool = False,
) -> TrainBatch:
    """Materialize model inputs for a list of examples.

    Pre-computed NN features are consumed when present; otherwise the
    assembly runs on the fly. `blank_sequences` swaps in fully masked
    sequences for the no-sequence baseline.
    """
    assembled = []
    users = []
    for ex in examples:
        user = store.get(ex.user_id, UserSequences())
        users.append(user)
        if blank_sequences:
            assembled.append(blank_assembled(cfg.nn, cfg.encoder.embed_dim))
        elif ex.nn_features is not None:
            assembled.append(ex.nn_features)
        else:
            assembled.append(assemble(user, ex.candidate, cfg.nn))
    return TrainBatch(
        assembled=assembled,
        candidates=np.stack([ex.candidate for ex in examples]).astype(np.float32),
        labels=np.stack([ex.labels for ex in examples]),
        contexts=np.stack(
            [context_features(ex.user_id, cfg.ctx_dim) for ex in examples]
        ),
        users=users,
    )


# ---------------------------------------------------------------------------
# Forward pass with caches
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _ln_fwd(x, scale, shift):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(LN_EPS, x.dtype))
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv)


def _ln_bwd(dy, scale, cache):
    xhat, inv = cache
    dscale = (dy * xhat).sum((0, 1))
    dshift = dy.sum((0, 1))
    dxh = dy * scale
    dx = inv * (
        dxh
        - dxh.mean(-1, keepdims=True)
        - xhat * (dxh * xhat).mean(-1, keepdims=True)
    )
    return dx, dscale, dshift


def _transformer_fwd(x0: np.ndarray, allowed: np.ndarray, params: EncoderParams):
    """Batched pre-norm transformer matching the reference path, returning
    per-layer caches for the backward pass."""
    dtype = x0.dtype
    scale = dtype.type(1.0 / np.sqrt(x0.shape[-1]))
    x = x0
    caches = []
    for layer in params.layers:
        a_in, ln1 = _ln_fwd(x, layer.ln1_scale, layer.ln1_shift)
        q = a_in @ layer.wq
        k = a_in @ layer.wk
        v = a_in @ layer.wv
        logits = (q @ k.transpose(0, 2, 1)) * scale
        masked = np.where(allowed, logits, np.array(-np.inf, dtype))
        rowmax = masked.max(-1, keepdims=True)
        rowmax = np.where(np.isfinite(rowmax), rowmax, dtype.type(0))
        w = np.exp(masked - rowmax)
        denom = w.sum(-1, keepdims=True)
        probs = w / np.where(denom == 0, dtype.type(1), denom)
        ctx = probs @ v
        x_mid = x + ctx @ layer.wo
        f_in, ln2 = _ln_fwd(x_mid, layer.ln2_scale, layer.ln2_shift)
        pre = f_in @ layer.w1
        h = np.maximum(pre, 0)
        x_out = x_mid + h @ layer.w2
        caches.append(
            dict(x=x, a_in=a_in, ln1=ln1, q=q, k=k, v=v, probs=probs, ctx=ctx,
                 x_mid=x_mid, f_in=f_in, ln2=ln2, pre=pre, h=h)
        )
        x = x_out
    return x, caches


def _flat_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum of per-position outer products over batch and sequence axes."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _transformer_bwd(du, caches, params: EncoderParams, grads, scale):
    dx = du
    for i in reversed(range(len(params.layers))):
        layer = params.layers[i]
        c = caches[i]
        pfx = f"encoder.layer{i}."

        # feed-forward + its layer norm
        grads[pfx + "w2"] += _flat_outer(c["h"], dx)
        dh = dx @ layer.w2.T
        dpre = dh * (c["pre"] > 0)
        grads[pfx + "w1"] += _flat_outer(c["f_in"], dpre)
        df_in = dpre @ layer.w1.T
        dln2, dg2, db2 = _ln_bwd(df_in, layer.ln2_scale, c["ln2"])
        grads[pfx + "ln2_scale"] += dg2
        grads[pfx + "ln2_shift"] += db2
        dx_mid = dx + dln2

        # attention
        grads[pfx + "wo"] += _flat_outer(c["ctx"], dx_mid)
        dctx = dx_mid @ layer.wo.T
        dprobs = dctx @ c["v"].transpose(0, 2, 1)
        dv = c["probs"].transpose(0, 2, 1) @ dctx
        inner = (dprobs * c["probs"]).sum(-1, keepdims=True)
        ds = c["probs"] * (dprobs - inner) * scale
        dq = ds @ c["k"]
        dk = ds.transpose(0, 2, 1) @ c["q"]
        grads[pfx + "wq"] += _flat_outer(c["a_in"], dq)
        grads[pfx + "wk"] += _flat_outer(c["a_in"], dk)
        grads[pfx + "wv"] += _flat_outer(c["a_in"], dv)
        da_in = dq @ layer.wq.T + dk @ layer.wk.T + dv @ layer.wv.T
        dln1, dg1, db1 = _ln_bwd(da_in, layer.ln1_scale, c["ln1"])
        grads[pfx + "ln1_scale"] += dg1
        grads[pfx + "ln1_shift"] += db1
        dx = dx_mid + dln1
    return dx


@dataclass
class ForwardState:
    probs: np.ndarray  # (B, H)
    u: np.ndarray  # (B, L, d)
    mask: np.ndarray
    cache: dict | None


def model_forward(model: RankingModel, batch: TrainBatch, want_cache: bool = True) -> ForwardState:
    cfg = model.config
    dtype = model.dtype
    features, mask = encode_batch(batch.assembled, batch.candidates, model.encoder)
    length = cfg.encoder.seq_len
    allowed = np.tril(np.ones((length, length), bool))[None] & mask[:, None, :]

    u, tf_caches = _transformer_fwd(features, allowed, model.encoder)

    y = u @ model.encoder.out_linear
    ym = np.where(mask[:, :, None], y, np.array(-np.inf, dtype))
    arg = ym.argmax(1)
    pooled = np.take_along_axis(ym, arg[:, None, :], 1)[:, 0, :]
    empty = ~mask.any(1)
    pooled[empty] = 0

    unit_c = l2_normalize_rows(batch.candidates).astype(dtype)
    z = np.concatenate([pooled, unit_c, batch.contexts.astype(dtype)], axis=1)
    pre1 = z @ model.head.w1 + model.head.b1
    h1 = np.maximum(pre1, 0)
    logits = h1 @ model.head.w2 + model.head.b2
    probs = _sigmoid(logits)

    cache = None
    if want_cache:
        cache = dict(
            tf=tf_caches, u=u, arg=arg, empty=empty, z=z, pre1=pre1, h1=h1,
            logits=logits, features=features,
        )
    return ForwardState(probs, u, mask, cache)


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    ce: float
    nal: float
    total: float
    nal_positives: int = 0


def loss_and_grads(
    model: RankingModel,
    batch: TrainBatch,
    nal_cfg: NALConfig | None,
    samples: list[NALSample],
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Full objective and analytic gradients for every parameter tensor.

    NAL samples are selected by the caller (the training loop uses a
    batch-local seeded generator; the gradient checker freezes one set) so
    the objective is a fixed function of the parameters.
    """
    cfg = model.config
    dtype = model.dtype
    state = model_forward(model, batch, want_cache=True)
    c = state.cache
    batch_size = len(batch.assembled)

    nal_active = nal_cfg is not None and nal_cfg.weight != 0.0
    grads = {k: np.zeros_like(v) for k, v in model.named_tensors().items()}

    # multi-head CE
    ce_total = 0.0
    dlogits = np.zeros_like(c["logits"])
    for b in range(batch_size):
        ce_total += weighted_ce(state.probs[b], batch.labels[b], cfg.heads)
        dp = weighted_ce_grad(state.probs[b], batch.labels[b], cfg.heads)
        sig = state.probs[b].astype(np.float64)
        dlogits[b] = (dp * sig * (1.0 - sig) / batch_size).astype(dtype)
    ce_value = ce_total / batch_size

    # NAL on the transformer output
    nal_value = 0.0
    du_extra = np.zeros_like(c["u"])
    if nal_active and samples:
        w_each = nal_cfg.weight / len(samples)
        for s in samples:
            u_t = c["u"][s.item, s.predictor_pos]
            term, du_t, dproj = nal_term(u_t, s.target, s.negatives, model.nal_proj,
                                         nal_cfg.loss_type)
            nal_value += term
            du_extra[s.item, s.predictor_pos] += (w_each * du_t).astype(dtype)
            grads["nal.proj"] += (w_each * dproj).astype(dtype)
        nal_value /= len(samples)

    total = total_loss(ce_value, nal_value, nal_cfg) if nal_active else ce_value

    # ---- backward ----
    dh1 = dlogits @ model.head.w2.T
    grads["head.w2"] += c["h1"].T @ dlogits
    grads["head.b2"] += dlogits.sum(0)
    dpre1 = dh1 * (c["pre1"] > 0)
    grads["head.w1"] += c["z"].T @ dpre1
    grads["head.b1"] += dpre1.sum(0)
    dz = dpre1 @ model.head.w1.T

    d = cfg.encoder.d_model
    dpooled = dz[:, :d].copy()
    dpooled[c["empty"]] = 0

    dy = np.zeros_like(c["u"])
    bidx = np.arange(batch_size)[:, None]
    cols = np.arange(d)[None, :]
    dy[bidx, c["arg"], cols] = dpooled
    grads["encoder.out_linear"] += _flat_outer(c["u"], dy)
    du = dy @ model.encoder.out_linear.T
    du += du_extra

    scale = dtype.type(1.0 / np.sqrt(d))
    dfeat = _transformer_bwd(du, c["tf"], model.encoder, grads, scale)

    # encode backward: tables only (content embeddings are frozen inputs)
    enc_cfg = cfg.encoder
    actions = np.stack([s.block.actions for s in batch.assembled]).astype(np.int64)
    bits = ((actions[..., None] >> np.arange(enc_cfg.action_rows)) & 1).astype(dtype)
    surfaces = np.stack([s.block.surfaces for s in batch.assembled]).astype(np.intp)
    surfaces[surfaces > 3] = 3
    dfeat = dfeat * state.mask[:, :, None].astype(dtype)
    grads["encoder.action_table"] += _flat_outer(bits, dfeat)
    np.add.at(
        grads["encoder.surface_table"],
        surfaces.ravel(),
        dfeat.reshape(-1, d),
    )
    grads["encoder.position_table"] += dfeat.sum(0)

    breakdown = LossBreakdown(float(ce_value), float(nal_value), float(total), len(samples))
    return breakdown, grads


def batch_loss(
    model: RankingModel,
    batch: TrainBatch,
    nal_cfg: NALConfig | None,
    samples: list[NALSample] | None,
) -> float:
    """Objective value only (used by the finite-difference oracle)."""
    state = model_forward(model, batch, want_cache=False)
    batch_size = len(batch.assembled)
    ce = sum(
        weighted_ce(state.probs[b], batch.labels[b], model.config.heads)
        for b in range(batch_size)
    ) / batch_size
    if nal_cfg is None or nal_cfg.weight == 0.0 or not samples:
        return float(ce)
    nal = 0.0
    for s in samples:
        u_t = state.u[s.item, s.predictor_pos]
        nal += nal_term(u_t, s.target, s.negatives, model.nal_proj, nal_cfg.loss_type)[0]
    return total_loss(ce, nal / len(samples), nal_cfg)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 64
    steps: int = 200
    learning_rate: float = 3e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    nal: NALConfig | None = field(default_factory=NALConfig)
    blank_sequences: bool = False  # no-sequence baseline

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ValidationError("steps and batch size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.nal is not None:
            self.nal.validate()


class Optimizer:
    def __init__(self, cfg: TrainConfig, tensors: dict[str, np.ndarray]):
        self.cfg = cfg
        self.step_count = 0
        if cfg.optimizer == "adam":
            self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
            self.v = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.step_count += 1
        if cfg.optimizer == "sgd":
            for k, p in tensors.items():
                p -= cfg.learning_rate * grads[k]
            return
        b1, b2 = cfg.betas
        correction1 = 1.0 - b1**self.step_count
        correction2 = 1.0 - b2**self.step_count
        for k, p in tensors.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= cfg.learning_rate * (m / correction1) / (
                np.sqrt(v / correction2) + cfg.eps
            )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(
    examples: list[TrainingExample],
    store: dict[int, UserSequences],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    checkpoint_path=None,
) -> tuple[RankingModel, list[dict]]:
    """Run the optimization loop; deterministic for a fixed seed.

    Returns the trained model and one metrics record per step. Raises
    TrainingDiverged (with the step) if the loss stops being finite.
    """
    cfg.validate()
    model_cfg.validate()
    if not examples:
        raise ValidationError("training needs a non-empty dataset")
    model = RankingModel.init(model_cfg, cfg.seed)
    optimizer = Optimizer(cfg, model.named_tensors())
    batch_rng = np.random.default_rng([cfg.seed, 1])

    nal_active = cfg.nal is not None and cfg.nal.weight != 0.0
    metrics = []
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        idx = batch_rng.integers(0, len(examples), cfg.batch_size)
        batch = build_batch(
            [examples[i] for i in idx], store, model_cfg,
            blank_sequences=cfg.blank_sequences,
        )
        samples = None
        if nal_active:
            nal_rng = np.random.default_rng([cfg.seed, 2, step])
            samples, _ = select_samples(
                batch.assembled, batch.users, cfg.nal.negative_mode,
                cfg.nal.num_negatives, nal_rng,
            )
        breakdown, grads = loss_and_grads(
            model, batch, cfg.nal if nal_active else None, samples if nal_active else [],
        )
        if not np.isfinite(breakdown.total):
            raise TrainingDiverged(step)
        optimizer.step(model.named_tensors(), grads)
        metrics.append(
            {
                "step": step,
                "ce": breakdown.ce,
                "nal": breakdown.nal,
                "total": breakdown.total,
                "nal_positives": breakdown.nal_positives,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
        )

    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return model, metrics


def score_examples(
    model: RankingModel,
    examples: list[TrainingExample],
    store: dict[int, UserSequences],
    batch_size: int = 256,
    blank_sequences: bool = False,
) -> np.ndarray:
    """Per-head probabilities for a list of examples, in order."""
    out = np.zeros((len(examples), NUM_HEADS), np.float64)
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo : lo + batch_size]
        batch = build_batch(chunk, store, model.config, blank_sequences=blank_sequences)
        state = model_forward(model, batch, want_cache=False)
        out[lo : lo + len(chunk)] = state.probs
    return out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    per_tensor: dict[str, float]
    tolerance: float
    corrupted: str | None = None

    @property
    def max_error(self) -> float:
        return max(self.per_tensor.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _tiny_batch(cfg: ModelConfig, seed: int = 5) -> TrainBatch:
    from .dataset import SyntheticConfig, generate_synthetic

    data = generate_synthetic(
        SyntheticConfig(
            num_users=2, num_clusters=3, ll_tokens=6, rt_tokens=6, imp_tokens=6,
            chunks_per_user=1, chunk_size=1, seed=seed,
        )
    )
    store = dict(data.users)
    # shrink embeddings to the tiny model's width
    embed = cfg.encoder.embed_dim
    for user in store.values():
        for block in (user.lifelong, user.realtime, user.impression):
            block.embeddings = block.embeddings[:, :embed].copy()
    examples = [
        TrainingExample(ex.user_id, ex.chunk_id, ex.candidate[:embed].copy(), ex.labels)
        for ex in data.examples
    ]
    return build_batch(examples, store, cfg)


def grad_check(
    dtype=np.float32,
    corrupt: str | None = None,
    seed: int = 5,
) -> GradCheckReport:
    """Compare every tensor's analytic gradient with central differences.

    The finite-difference oracle always evaluates the objective in float64
    (perturbation h=1e-3 for float32 models, 1e-5 for float64) and the
    per-tensor score is max |analytic - numeric| normalized by the largest
    gradient magnitude in that tensor.
    """
    is_f32 = np.dtype(dtype) == np.float32
    h = 1e-3 if is_f32 else 1e-5
    tol = 1e-3 if is_f32 else 1e-6

    cfg = ModelConfig.tiny()
    model = RankingModel.init(cfg, seed=seed, dtype=dtype)
    batch = _tiny_batch(cfg, seed=seed)
    nal_cfg = NALConfig(weight=0.5, num_negatives=3)
    rng = np.random.default_rng([seed, 3])
    samples, _ = select_samples(
        batch.assembled, batch.users, nal_cfg.negative_mode, nal_cfg.num_negatives, rng
    )

    _, grads = loss_and_grads(model, batch, nal_cfg, samples)
    if corrupt is not None:
        g = grads[corrupt]
        g += 0.5 * max(1.0, float(np.abs(g).max()))

    oracle = model.astype(np.float64)
    tensors = oracle.named_tensors()
    report: dict[str, float] = {}
    for name, param in tensors.items():
        analytic = grads[name].astype(np.float64)
        numeric = np.zeros_like(param)
        flat_p = param.reshape(-1)
        flat_n = numeric.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = batch_loss(oracle, batch, nal_cfg, samples)
            flat_p[i] = orig - h
            down = batch_loss(oracle, batch, nal_cfg, samples)
            flat_p[i] = orig
            flat_n[i] = (up - down) / (2 * h)
        denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
        report[name] = float(np.abs(analytic - numeric).max() / denom)

    return GradCheckReport(report, tol, corrupt)


# ---------------------------------------------------------------------------
# Ablation runner
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    w_nal: float
    negative_mode: str
    loss_type: str
    hit_by_head: dict[str, float]


def run_ablation(
    examples: list[TrainingExample],
    eval_examples: list[TrainingExample],
    store: dict[int, UserSequences],
    model_cfg: ModelConfig,
    base_cfg: TrainConfig,
    weights: tuple[float, ...] = (0.0, 1e-4, 1e-3, 1e-2, 1e-1),
    modes: tuple[str, ...] = ("in_batch", "impression"),
    loss_types: tuple[str, ...] = ("sampled_softmax", "cross_entropy"),
) -> list[AblationRow]:
    """Train one model per grid cell and evaluate HIT@3 per head."""
    from .evaluation import hit_at_k, scored_items_from

    rows = []
    for loss_type in loss_types:
        for mode in modes:
            for w in weights:
                nal = NALConfig(weight=w, negative_mode=mode, loss_type=loss_type)
                cfg = replace(base_cfg, nal=nal)
                model, _ = train(examples, store, model_cfg, cfg)
                probs = score_examples(model, eval_examples, store)
                items = scored_items_from(eval_examples, probs)
                hits = {
                    head: hit_at_k(items, 3, head, model_cfg.heads)
                    for head in model_cfg.heads.names
                }
                rows.append(AblationRow(w, mode, loss_type, hits))
    return rows


def render_ablation_table(rows: list[AblationRow]) -> str:
    header = f"{'w_nal':>8}  {'negatives':>11}  {'loss':>16}  " + "  ".join(
        f"hit@3/{h:<8}" for h in rows[0].hit_by_head
    )
    lines = [header, "-" * len(header)]
    for row in rows:
        hits = "  ".join(f"{v:14.4f}" for v in row.hit_by_head.values())
        lines.append(
            f"{row.w_nal:8.4g}  {row.negative_mode:>11}  {row.loss_type:>16}  {hits}"
        )
    return "\n".join(lines)
