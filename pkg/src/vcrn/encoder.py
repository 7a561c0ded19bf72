"""Concept selection: frames attend into the dictionary through stacked
multi-head cross-attention blocks.

Layout conventions: weights are stored ``(in, out)`` and applied as
``x @ W``.  Frame features carry a leading batch axis ``(B, L, d_model)``;
the dictionary is shared across the batch ``(M, d_model)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import ParameterStore, Tensor


@dataclass
class EncoderConfig:
    d_in: int
    d_model: int
    heads: int = 4
    blocks: int = 1
    dropout_p: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.blocks < 1:
            raise ConfigError("encoder needs at least one C-MCA block")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


def init_encoder(store: ParameterStore, cfg: EncoderConfig, rng: np.random.Generator, init_range: float) -> None:
    def uniform(*shape):
        return rng.uniform(-init_range, init_range, size=shape)

    dm = cfg.d_model
    store.add("enc.input.W", uniform(cfg.d_in, dm))
    store.add("enc.input.b", np.zeros(dm))
    for i in range(cfg.blocks):
        p = f"enc.block{i}"
        for name in ("Wq", "Wk", "Wv", "Wo"):
            store.add(f"{p}.{name}", uniform(dm, dm))
        store.add(f"{p}.ln_gain", np.ones(dm))
        store.add(f"{p}.ln_bias", np.zeros(dm))


def project_inputs(x: Tensor, store: ParameterStore) -> Tensor:
    """Shared map from raw feature dim to ``d_model`` (frames and centers alike)."""
    return nx.add_bias(nx.matmul(x, store["enc.input.W"]), store["enc.input.b"])


def scaled_similarity(q: Tensor, k: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d_h))`` over the key axis."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    axes = list(range(k.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = nx.matmul(q, nx.transpose(k, axes))
    return nx.softmax_rows(nx.scale(scores, 1.0 / math.sqrt(q.shape[-1])))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., R, d_model) -> (..., H, R, d_h)
    *lead, r, dm = x.shape
    x = nx.reshape(x, (*lead, r, heads, dm // heads))
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return nx.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., H, R, d_h) -> (..., R, H * d_h)
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    x = nx.transpose(x, axes)
    *lead, r, h, dh = x.shape
    return nx.reshape(x, (*lead, r, h * dh))


def cmca_forward(
    x: Tensor,
    concepts: Tensor,
    store: ParameterStore,
    block: int,
    cfg: EncoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """One C-MCA block.

    Returns ``(C_t, S)`` with ``C_t = x + LayerNorm(concat_h(dropout(S_h V_c,h)) W_o)``
    and ``S`` the per-head similarity ``(B, H, L, M)``.
    """
    p = f"enc.block{block}"
    if x.shape[-1] != cfg.d_model or concepts.shape[-1] != cfg.d_model:
        raise DimensionError(f"C-MCA expects d_model={cfg.d_model}, got {x.shape} and {concepts.shape}")
    q = _split_heads(nx.matmul(x, store[f"{p}.Wq"]), cfg.heads)
    k = _split_heads(nx.matmul(concepts, store[f"{p}.Wk"]), cfg.heads)
    v = _split_heads(nx.matmul(concepts, store[f"{p}.Wv"]), cfg.heads)
    sim = scaled_similarity(q, k)
    heads = nx.dropout(nx.matmul(sim, v), cfg.dropout_p, train, rng)
    mixed = nx.matmul(_merge_heads(heads), store[f"{p}.Wo"])
    normed = nx.layer_norm(mixed, store[f"{p}.ln_gain"], store[f"{p}.ln_bias"], cfg.ln_eps)
    return nx.add(x, normed), sim


def vcs_encode(
    v: Tensor,
    concepts: Tensor,
    store: ParameterStore,
    cfg: EncoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Run the block stack; each block queries with the previous output.

    ``v`` and ``concepts`` are already projected to ``d_model``.  Returns the
    last block's output and every block's similarity map.
    """
    if cfg.blocks < 1:
        raise ConfigError("encoder needs at least one C-MCA block")
    out, sims = v, []
    for i in range(cfg.blocks):
        out, sim = cmca_forward(out, concepts, store, i, cfg, train, rng)
        sims.append(sim)
    return out, sims
