"""Conceptual integration decoder.

One step: Attention-LSTM over ``[h_lang; mean frame; word embedding]``,
additive-score temporal attention over the frames (``att_v``) and over the
concept features (``att_c``), a sigmoid gate blending the two contexts, and a
Language-LSTM whose hidden state feeds a linear vocabulary head.

All tensors carry a leading batch axis.  LSTM gates are packed ``[i, f, o, g]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .numerics import ParameterStore, Tensor

STRATEGIES = ("GATE", "ADD", "MLP", "MHA")


@dataclass
class DecoderConfig:
    vocab_size: int
    d_model: int
    d_hid: int
    d_att: int | None = None
    d_emb: int | None = None
    strategy: str = "GATE"
    gate_fc: bool = False
    mlp_hidden: int | None = None
    mha_heads: int = 4
    use_dictionary: bool = True

    def __post_init__(self):
        self.strategy = self.strategy.upper()
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.strategy!r}; expected one of {STRATEGIES}")
        self.d_att = self.d_att or self.d_hid
        self.d_emb = self.d_emb or self.d_hid
        self.mlp_hidden = self.mlp_hidden or self.d_model
        if self.strategy == "MHA" and self.d_model % self.mha_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by mha_heads={self.mha_heads}")
        if self.vocab_size < 5:
            raise ConfigError("vocabulary must hold the 4 reserved tokens plus at least one word")


@dataclass
class DecoderState:
    h_att: Tensor
    c_att: Tensor
    h_lang: Tensor
    c_lang: Tensor

    @classmethod
    def zeros(cls, batch: int, d_hid: int, dtype=np.float64) -> "DecoderState":
        z = lambda: Tensor(np.zeros((batch, d_hid), dtype=dtype))  # noqa: E731
        return cls(z(), z(), z(), z())

    def select(self, rows) -> "DecoderState":
        """Reindex the batch axis (beam bookkeeping, values only)."""
        pick = lambda t: Tensor(t.values[rows])  # noqa: E731
        return DecoderState(pick(self.h_att), pick(self.c_att), pick(self.h_lang), pick(self.c_lang))


@dataclass
class AttendedContext:
    context: Tensor  # (B, d_model)
    weights: Tensor  # (B, R), rows sum to 1


@dataclass
class StepOutput:
    logits: Tensor
    state: DecoderState
    alpha_v: Tensor
    alpha_c: Tensor | None
    gate: Tensor | None
    attended_v: Tensor
    attended_c: Tensor
    fused: Tensor

    @property
    def probs(self) -> np.ndarray:
        return nx._softmax(self.logits.values)


@dataclass
class DecoderInputs:
    """Per-sequence tensors reused at every step."""

    frames: Tensor  # (B, L, d_model)
    concepts: Tensor | None  # (B, L, d_model); None when the dictionary branch is off
    mean_frame: Tensor  # (B, d_model)
    frames_key: Tensor = field(default=None)  # (B, L, d_att) = frames @ W2 for att_v
    concepts_key: Tensor | None = None


def init_decoder(store: ParameterStore, cfg: DecoderConfig, rng: np.random.Generator, init_range: float) -> None:
    def uniform(*shape):
        return rng.uniform(-init_range, init_range, size=shape)

    dm, dh, da, de, nv = cfg.d_model, cfg.d_hid, cfg.d_att, cfg.d_emb, cfg.vocab_size
    store.add("dec.embed", uniform(nv, de))
    store.add("dec.att_lstm.W", uniform(dh + dm + de + dh, 4 * dh))
    store.add("dec.att_lstm.b", np.zeros(4 * dh))
    for which in ("att_v", "att_c") if cfg.use_dictionary else ("att_v",):
        store.add(f"dec.{which}.W1", uniform(da, 1))
        store.add(f"dec.{which}.W2", uniform(dm, da))
        store.add(f"dec.{which}.W3", uniform(dh, da))
    if cfg.strategy == "GATE":
        store.add("dec.gate.W", uniform(2 * dm + dh, dm))
        if cfg.gate_fc:
            store.add("dec.fuse_fc.W", uniform(dm, dm))
            store.add("dec.fuse_fc.b", np.zeros(dm))
    elif cfg.strategy == "MLP":
        store.add("dec.mlp.W1", uniform(2 * dm, cfg.mlp_hidden))
        store.add("dec.mlp.b1", np.zeros(cfg.mlp_hidden))
        store.add("dec.mlp.W2", uniform(cfg.mlp_hidden, dm))
        store.add("dec.mlp.b2", np.zeros(dm))
    elif cfg.strategy == "MHA":
        store.add("dec.mha.Wq", uniform(dh, dm))
        for name in ("Wk", "Wv", "Wo"):
            store.add(f"dec.mha.{name}", uniform(dm, dm))
    store.add("dec.lang_lstm.W", uniform(dh + dm + dh, 4 * dh))
    store.add("dec.lang_lstm.b", np.zeros(4 * dh))
    store.add("dec.out.W", uniform(dh, nv))
    store.add("dec.out.b", np.zeros(nv))


def mean_pool_video(frames: Tensor) -> Tensor:
    """Average over the frame axis: ``(B, L, d) -> (B, d)``."""
    return nx.mean_axis(frames, axis=frames.ndim - 2)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    d = h.shape[-1]
    if weight.shape != (x.shape[-1] + d, 4 * d):
        raise DimensionError(f"LSTM weight {weight.shape} does not fit input {x.shape[-1]} + hidden {d}")
    gates = nx.add_bias(nx.matmul(nx.concat([x, h], axis=-1), weight), bias)
    i = nx.sigmoid(nx.slice_last(gates, 0, d))
    f = nx.sigmoid(nx.slice_last(gates, d, 2 * d))
    o = nx.sigmoid(nx.slice_last(gates, 2 * d, 3 * d))
    g = nx.tanh(nx.slice_last(gates, 3 * d, 4 * d))
    c_new = nx.add(nx.hadamard(f, c), nx.hadamard(i, g))
    h_new = nx.hadamard(o, nx.tanh(c_new))
    return h_new, c_new


def attention_lstm_step(
    prev_tokens, mean_frame: Tensor, state: DecoderState, store: ParameterStore
) -> tuple[Tensor, Tensor]:
    table = store["dec.embed"]
    tokens = np.asarray(prev_tokens, dtype=np.int64).reshape(-1)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= table.shape[0]):
        raise ContractError(f"token id out of range [0, {table.shape[0]})")
    emb = nx.embedding(table, tokens)
    x = nx.concat([state.h_lang, mean_frame, emb], axis=-1)
    return lstm_cell(x, state.h_att, state.c_att, store["dec.att_lstm.W"], store["dec.att_lstm.b"])


def attention_keys(features: Tensor, store: ParameterStore, which: str) -> Tensor:
    """``features @ W2``; independent of the step, so computed once."""
    return nx.matmul(features, store[f"dec.{which}.W2"])


def attend(
    features: Tensor, h_att: Tensor, store: ParameterStore, which: str, keys: Tensor | None = None
) -> AttendedContext:
    """``alpha = softmax_i(W1 tanh(W2 f_i + W3 h))``, context ``sum_i alpha_i f_i``."""
    if which not in ("att_v", "att_c"):
        raise ConfigError(f"unknown attention branch {which!r}")
    if keys is None:
        keys = attention_keys(features, store, which)
    b, r, _ = features.shape
    query = nx.expand(nx.matmul(h_att, store[f"dec.{which}.W3"]), 1, r)
    scores = nx.matmul(nx.tanh(nx.add(keys, query)), store[f"dec.{which}.W1"])
    alpha = nx.softmax_rows(nx.reshape(scores, (b, r)))
    context = nx.reshape(nx.matmul(nx.reshape(alpha, (b, 1, r)), features), (b, features.shape[-1]))
    return AttendedContext(context, alpha)


def gate_lambda(attended_v: Tensor, attended_c: Tensor, h_att: Tensor, store: ParameterStore) -> Tensor:
    return nx.sigmoid(nx.matmul(nx.concat([attended_v, attended_c, h_att], axis=-1), store["dec.gate.W"]))


def _fc(x: Tensor, store: ParameterStore) -> Tensor:
    return nx.add_bias(nx.matmul(x, store["dec.fuse_fc.W"]), store["dec.fuse_fc.b"])


def fuse(
    attended_v: Tensor,
    attended_c: Tensor,
    gate: Tensor | None,
    strategy: str,
    store: ParameterStore | None = None,
    h_att: Tensor | None = None,
    gate_fc: bool = False,
    mha_heads: int = 4,
) -> Tensor:
    nx._same_shape("fuse", attended_v, attended_c)
    strategy = strategy.upper()
    if strategy == "GATE":
        fv, fc = (_fc(attended_v, store), _fc(attended_c, store)) if gate_fc else (attended_v, attended_c)
        complement = nx.add_scalar(nx.scale(gate, -1.0), 1.0)
        return nx.add(nx.hadamard(gate, fv), nx.hadamard(complement, fc))
    if strategy == "ADD":
        return nx.add(attended_v, attended_c)
    if strategy == "MLP":
        hidden = nx.tanh(
            nx.add_bias(nx.matmul(nx.concat([attended_v, attended_c], axis=-1), store["dec.mlp.W1"]), store["dec.mlp.b1"])
        )
        return nx.add_bias(nx.matmul(hidden, store["dec.mlp.W2"]), store["dec.mlp.b2"])
    if strategy == "MHA":
        return _fuse_mha(attended_v, attended_c, h_att, store, mha_heads)
    raise ConfigError(f"unknown fusion strategy {strategy!r}")


def _fuse_mha(attended_v: Tensor, attended_c: Tensor, h_att: Tensor, store: ParameterStore, heads: int) -> Tensor:
    b, dm = attended_v.shape
    dh = dm // heads
    pair = nx.stack([attended_v, attended_c], axis=1)  # (B, 2, dm)
    q = nx.transpose(nx.reshape(nx.matmul(h_att, store["dec.mha.Wq"]), (b, 1, heads, dh)), (0, 2, 1, 3))
    k = nx.transpose(nx.reshape(nx.matmul(pair, store["dec.mha.Wk"]), (b, 2, heads, dh)), (0, 2, 1, 3))
    v = nx.transpose(nx.reshape(nx.matmul(pair, store["dec.mha.Wv"]), (b, 2, heads, dh)), (0, 2, 1, 3))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mixed = nx.matmul(nx.softmax_rows(scores), v)  # (B, H, 1, dh)
    merged = nx.reshape(nx.transpose(mixed, (0, 2, 1, 3)), (b, dm))
    return nx.matmul(merged, store["dec.mha.Wo"])


def language_lstm_step(
    h_att: Tensor, fused: Tensor, state: DecoderState, store: ParameterStore
) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(h_lang, c_lang, logits)``; ``softmax(logits)`` is p_t."""
    x = nx.concat([h_att, fused], axis=-1)
    h, c = lstm_cell(x, state.h_lang, state.c_lang, store["dec.lang_lstm.W"], store["dec.lang_lstm.b"])
    logits = nx.add_bias(nx.matmul(h, store["dec.out.W"]), store["dec.out.b"])
    return h, c, logits


def prepare_inputs(frames: Tensor, concepts: Tensor | None, store: ParameterStore) -> DecoderInputs:
    inputs = DecoderInputs(frames, concepts, mean_pool_video(frames))
    inputs.frames_key = attention_keys(frames, store, "att_v")
    if concepts is not None:
        inputs.concepts_key = attention_keys(concepts, store, "att_c")
    return inputs


def decoder_step(
    inputs: DecoderInputs,
    prev_tokens,
    state: DecoderState,
    store: ParameterStore,
    cfg: DecoderConfig,
    gate_override: float | None = None,
    attended_v_offset: np.ndarray | None = None,
) -> StepOutput:
    """One decoding step.

    With the dictionary branch off, the concept context aliases the frame
    context (so ADD gives ``2 V'``).  ``gate_override`` pins every gate entry
    to a constant and ``attended_v_offset`` is added to the attended frame
    context before gating (both used to probe the gate's semantics).
    """
    h_att, c_att = attention_lstm_step(prev_tokens, inputs.mean_frame, state, store)
    att_v = attend(inputs.frames, h_att, store, "att_v", inputs.frames_key)
    if attended_v_offset is not None:
        att_v.context = nx.add(att_v.context, Tensor(np.asarray(attended_v_offset, dtype=att_v.context.dtype)))
    if inputs.concepts is not None:
        att_c = attend(inputs.concepts, h_att, store, "att_c", inputs.concepts_key)
        attended_c, alpha_c = att_c.context, att_c.weights
    else:
        attended_c, alpha_c = att_v.context, None
    gate = None
    if cfg.strategy == "GATE":
        if gate_override is not None:
            gate = Tensor(np.full(att_v.context.shape, float(gate_override), dtype=att_v.context.dtype))
        else:
            gate = gate_lambda(att_v.context, attended_c, h_att, store)
    fused = fuse(att_v.context, attended_c, gate, cfg.strategy, store, h_att, cfg.gate_fc, cfg.mha_heads)
    h_lang, c_lang, logits = language_lstm_step(h_att, fused, state, store)
    new_state = DecoderState(h_att, c_att, h_lang, c_lang)
    return StepOutput(logits, new_state, att_v.weights, alpha_c, gate, att_v.context, attended_c, fused)
