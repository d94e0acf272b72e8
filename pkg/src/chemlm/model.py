"""Transformer encoder, MLM head, mean pooling and fine-tuning heads."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .attention import AttentionVariant, FeatureMap, RotationSchedule, attend, pool_heads
from .errors import DimMismatch, IdOverflow, PositionOverflow, SequenceTooLongForAnalysis
from .nncore import Tensor
from .tokenizer import MAX_FRAMED_LENGTH, PAD

INIT_STD = 0.02


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 2
    hidden: int = 64
    ffn: int = 256
    variant: AttentionVariant = AttentionVariant.LINEAR_ROTARY_MODIFIED
    dropout: float = 0.1
    max_positions: int = MAX_FRAMED_LENGTH
    vocab_size: int = 0
    features: int = 32
    feature_kind: str = "relu"
    scale_scores: bool = True
    rotary_base: float = 10000.0
    ln_eps: float = 1e-5
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.variant = AttentionVariant(self.variant)
        if self.hidden % self.heads:
            raise DimMismatch(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.head_dim % 2:
            raise DimMismatch(f"head dimension {self.head_dim} must be even for rotary")
        if self.features % 2:
            raise DimMismatch("feature map size must be even")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @classmethod
    def toy(cls, **kw):
        kw = {"layers": 2, "heads": 2, "hidden": 64, "ffn": 256, **kw}
        return cls(**kw)

    @classmethod
    def xl(cls, **kw):
        kw = {"layers": 12, "heads": 12, "hidden": 768, "ffn": 3072, **kw}
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass
class EncoderState:
    config: EncoderConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        c = self.config
        self._sched = RotationSchedule(c.head_dim, c.rotary_base, c.max_positions)
        self._feature_sched = RotationSchedule(c.features, c.rotary_base, c.max_positions)

    def feature_map(self, layer: int) -> FeatureMap:
        return FeatureMap(self.buffers[f"layers.{layer}.attn.feature_map"], self.config.feature_kind)

    def parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def init_state(config: EncoderConfig) -> EncoderState:
    """Normal(0, 0.02) projections and embeddings, zero biases, unit layer-norm gains."""
    if config.vocab_size <= 0:
        raise DimMismatch("config.vocab_size must be set before initialization")
    rng = np.random.default_rng(config.seed)
    dt = np.dtype(config.dtype)
    H, F, V = config.hidden, config.ffn, config.vocab_size
    params: dict[str, Tensor] = {}

    def normal(name, *shape):
        params[name] = Tensor(rng.normal(0.0, INIT_STD, shape).astype(dt), True, name)

    def const(name, value, *shape):
        params[name] = Tensor(np.full(shape, value, dtype=dt), True, name)

    normal("tok_emb", V, H)
    if config.variant is AttentionVariant.FULL_ABSOLUTE:
        normal("pos_emb", config.max_positions, H)
    buffers = {}
    for i in range(config.layers):
        p = f"layers.{i}."
        const(p + "ln1.gain", 1.0, H)
        const(p + "ln1.bias", 0.0, H)
        for w in ("q", "k", "v", "o"):
            normal(p + f"attn.w{w}", H, H)
            const(p + f"attn.b{w}", 0.0, H)
        const(p + "ln2.gain", 1.0, H)
        const(p + "ln2.bias", 0.0, H)
        normal(p + "ffn.w1", H, F)
        const(p + "ffn.b1", 0.0, F)
        normal(p + "ffn.w2", F, H)
        const(p + "ffn.b2", 0.0, H)
        fm_seed = int(rng.integers(2**31))
        buffers[p + "attn.feature_map"] = FeatureMap.random(
            config.head_dim, config.features, fm_seed, config.feature_kind
        ).weight.astype(dt)
    const("ln_f.gain", 1.0, H)
    const("ln_f.bias", 0.0, H)
    normal("mlm.w", H, V)
    const("mlm.b", 0.0, V)
    return EncoderState(config, params, buffers)


def _check_inputs(config: EncoderConfig, ids: np.ndarray, offset: int):
    if ids.ndim != 2:
        raise DimMismatch(f"expected [rows, positions] ids, got shape {ids.shape}")
    if ids.size and (ids.max() >= config.vocab_size or ids.min() < 0):
        raise IdOverflow(f"token id {int(ids.max())} outside vocabulary of size {config.vocab_size}")
    if offset < 0 or ids.shape[1] + offset > config.max_positions:
        raise PositionOverflow(
            f"positions up to {ids.shape[1] + offset} exceed the {config.max_positions}-position limit"
        )


def encode_batch(
    state: EncoderState,
    ids,
    mask=None,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
    position_offset: int = 0,
    record_attention: bool = False,
    variant: AttentionVariant | None = None,
):
    """Final-layer hidden states ``[rows, positions, hidden]``.

    Pre-layer-norm residual blocks.  Pad positions are excluded as keys
    everywhere, so real positions do not depend on the amount of padding.
    With ``record_attention`` a list of per-layer ``[rows, heads, N, N]``
    weight arrays is returned as well.  ``variant`` overrides the
    configured attention kernel on the same weights.
    """
    c = state.config
    P = state.params
    ids = np.asarray(ids, dtype=np.int64)
    if mask is None:
        mask = (ids != PAD).astype(np.int64)
    mask = np.asarray(mask)
    _check_inputs(c, ids, position_offset)
    variant = c.variant if variant is None else AttentionVariant(variant)
    B, N = ids.shape
    nh, dh = c.heads, c.head_dim
    positions = np.arange(N) + position_offset
    dt = np.dtype(c.dtype)
    key_mask = mask.astype(dt)[:, None, :]

    h = nn.embedding(P["tok_emb"], ids)
    if variant is AttentionVariant.FULL_ABSOLUTE:
        if "pos_emb" not in P:
            raise DimMismatch("state has no absolute position table")
        h = h + nn.embedding(P["pos_emb"], positions)
    h = nn.dropout(h, c.dropout, rng, train)

    maps = []
    for i in range(c.layers):
        p = f"layers.{i}."
        a = nn.layer_norm(h, P[p + "ln1.gain"], P[p + "ln1.bias"], c.ln_eps)

        def heads(name):
            x = nn.matmul(a, P[p + f"attn.w{name}"]) + P[p + f"attn.b{name}"]
            return x.reshape(B, N, nh, dh).transpose(0, 2, 1, 3)

        res = attend(
            variant, heads("q"), heads("k"), heads("v"), key_mask,
            sched=state._sched, feature_sched=state._feature_sched,
            fmap=state.feature_map(i), positions=positions,
            scale_scores=c.scale_scores, return_weights=record_attention,
        )
        if record_attention:
            res, w = res
            maps.append(w)
        merged = res.transpose(0, 2, 1, 3).reshape(B, N, c.hidden)
        attn_out = nn.matmul(merged, P[p + "attn.wo"]) + P[p + "attn.bo"]
        h = h + nn.dropout(attn_out, c.dropout, rng, train)

        f = nn.layer_norm(h, P[p + "ln2.gain"], P[p + "ln2.bias"], c.ln_eps)
        f = nn.gelu(nn.matmul(f, P[p + "ffn.w1"]) + P[p + "ffn.b1"])
        f = nn.matmul(f, P[p + "ffn.w2"]) + P[p + "ffn.b2"]
        h = h + nn.dropout(f, c.dropout, rng, train)

    h = nn.layer_norm(h, P["ln_f.gain"], P["ln_f.bias"], c.ln_eps)
    if record_attention:
        return h, maps
    return h


def mlm_logits(hidden, state: EncoderState) -> Tensor:
    return nn.matmul(hidden, state.params["mlm.w"]) + state.params["mlm.b"]


def mlm_loss(state: EncoderState, batch, *, train: bool = False, rng=None, position_offset: int = 0) -> Tensor:
    """Masked cross-entropy of a :class:`~chemlm.dataset.MaskedBatch`."""
    hidden = encode_batch(
        state, batch.input_ids, batch.padding_mask, train=train, rng=rng, position_offset=position_offset
    )
    return nn.cross_entropy_masked(mlm_logits(hidden, state), batch.labels, batch.loss_mask)


def mean_pool(hidden, mask) -> Tensor:
    """Average over positions where ``mask`` is 1 (begin/end tokens included)."""
    hidden = nn.as_tensor(hidden)
    m = np.asarray(mask).astype(hidden.dtype)[..., None]
    return nn.sum_(hidden * m, axis=-2) / m.sum(axis=-2)


def pooled_embeddings(state: EncoderState, ids, mask=None, *, train=False, rng=None) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if mask is None:
        mask = (ids != PAD).astype(np.int64)
    return mean_pool(encode_batch(state, ids, mask, train=train, rng=rng), mask)


def embed_molecule(state: EncoderState, seq) -> np.ndarray:
    """Mean of the final hidden states of one framed :class:`TokenSequence`."""
    ids = np.asarray([seq.ids], dtype=np.int64)
    return pooled_embeddings(state, ids).data[0]


def embed_many(state: EncoderState, seqs, batch_size: int = 64) -> np.ndarray:
    from .dataset import pad_ids

    out = []
    for i in range(0, len(seqs), batch_size):
        ids, mask = pad_ids(seqs[i : i + batch_size])
        out.append(pooled_embeddings(state, ids, mask).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, state.config.hidden))


def extract_attention_map(
    state: EncoderState,
    ids,
    layer: int | None = None,
    *,
    pooling: str = "mean",
    max_len: int = 256,
    variant: AttentionVariant | None = None,
):
    """Head-averaged N x N attention weights of one sequence.

    Returns the matrix for ``layer`` or, when ``layer`` is None, a list
    with one matrix per layer.  Linear kernels are materialized
    explicitly, so this is analysis-only.
    """
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    if ids.shape[1] > max_len:
        raise SequenceTooLongForAnalysis(f"sequence length {ids.shape[1]} exceeds analysis cap {max_len}")
    _, maps = encode_batch(state, ids, record_attention=True, variant=variant)
    pooled = [pool_heads(w, pooling)[0] for w in maps]
    return pooled if layer is None else pooled[layer]


@dataclass
class FinetuneHead:
    """affine -> GELU -> dropout -> affine."""

    params: dict[str, Tensor]
    task: str = "regression"
    dropout: float = 0.1

    @property
    def in_dim(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def out_dim(self) -> int:
        return self.params["w2"].shape[1]

    def parameters(self):
        return [(f"head.{k}", v) for k, v in self.params.items()]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def init_head(in_dim: int, out_dim: int, hidden: int = 768, *, task="regression", dropout=0.1, seed=0, dtype="float32"):
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    params = {
        "w1": Tensor(rng.normal(0, INIT_STD, (in_dim, hidden)).astype(dt), True, "head.w1"),
        "b1": Tensor(np.zeros(hidden, dt), True, "head.b1"),
        "w2": Tensor(rng.normal(0, INIT_STD, (hidden, out_dim)).astype(dt), True, "head.w2"),
        "b2": Tensor(np.zeros(out_dim, dt), True, "head.b2"),
    }
    return FinetuneHead(params, task, dropout)


def finetune_forward(head: FinetuneHead, x, *, train: bool = False, rng=None) -> Tensor:
    """Raw regression values or classification logits."""
    x = nn.as_tensor(x)
    if x.shape[-1] != head.in_dim:
        raise DimMismatch(f"head expects inputs of width {head.in_dim}, got {x.shape[-1]}")
    P = head.params
    h = nn.gelu(nn.matmul(x, P["w1"]) + P["b1"])
    h = nn.dropout(h, head.dropout, rng, train)
    return nn.matmul(h, P["w2"]) + P["b2"]
