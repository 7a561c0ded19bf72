"""Greedy and beam-search decoding, plus per-step attention dumps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import numerics as nx
from .corpus import BOS_ID, DEFAULT_MAX_LEN, EOS_ID, PAD_ID, Vocabulary
from .decoder import DecoderInputs
from .errors import ConfigError
from .model import VCRN, Encoded
from .numerics import Tensor


class StepScorer(Protocol):
    """What a decoder must expose for search: batched next-token log-probs."""

    def initial(self): ...

    def step(self, state, prev_tokens: np.ndarray) -> tuple[np.ndarray, object]: ...

    def select(self, state, rows: np.ndarray): ...


class ModelScorer:
    """Adapts a captioner and one video to ``StepScorer``."""

    def __init__(self, model: VCRN, features):
        self.model = model
        with nx.no_grad():
            self.encoded = model.encode(features)
        self._tiled: dict[int, Encoded] = {1: self.encoded}

    def _encoded_for(self, rows: int) -> Encoded:
        if rows not in self._tiled:
            src = self.encoded.inputs

            def tile(t: Tensor | None):
                return None if t is None else Tensor(np.repeat(t.values, rows, axis=0))

            inputs = DecoderInputs(tile(src.frames), tile(src.concepts), tile(src.mean_frame),
                                   tile(src.frames_key), tile(src.concepts_key))
            self._tiled[rows] = Encoded(inputs, self.encoded.similarities)
        return self._tiled[rows]

    def initial(self):
        return self.model.initial_state(1)

    def step(self, state, prev_tokens):
        prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
        with nx.no_grad():
            out = self.model.step(self._encoded_for(len(prev_tokens)), prev_tokens, state)
        return nx.log_softmax_values(out.logits.values), out.state

    def select(self, state, rows):
        return state.select(np.asarray(rows))


def _mask(logp: np.ndarray, banned) -> np.ndarray:
    if banned:
        logp = logp.copy()
        logp[:, list(banned)] = -np.inf
    return logp


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool


def greedy_search(scorer: StepScorer, max_len: int = DEFAULT_MAX_LEN, bos_id: int = BOS_ID,
                  eos_id: int = EOS_ID, banned=(PAD_ID, BOS_ID)) -> Hypothesis:
    state = scorer.initial()
    prev = bos_id
    tokens: list[int] = []
    score = 0.0
    for _ in range(max_len):
        logp, state = scorer.step(state, np.array([prev]))
        row = _mask(logp, banned)[0]
        tok = int(np.argmax(row))  # first maximum: lowest id on ties
        score += float(row[tok])
        if tok == eos_id:
            return Hypothesis(tokens, score, True)
        tokens.append(tok)
        prev = tok
    return Hypothesis(tokens, score, False)


def beam_search_scorer(
    scorer: StepScorer,
    beam_size: int,
    max_len: int = DEFAULT_MAX_LEN,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
    banned=(PAD_ID, BOS_ID),
    length_alpha: float = 0.0,
    n_best: int = 1,
) -> list[Hypothesis]:
    """Beam search over summed log-probabilities.

    Each step keeps the ``beam_size`` best extensions of the live hypotheses
    (ties: higher step log-prob, then earlier hypothesis, then lower token
    id).  Extensions ending in eos retire to the finished pool.  Returns the
    best finished hypotheses, or the best live ones if none finished by
    ``max_len``.  ``length_alpha`` > 0 ranks the final pool by
    ``score / len**alpha`` instead of the raw sum.
    """
    if beam_size < 1:
        raise ConfigError(f"beam size must be >= 1, got {beam_size}")
    state = scorer.initial()
    live = [Hypothesis([], 0.0, False)]
    last = np.array([bos_id])
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        logp, state = scorer.step(state, last)
        logp = _mask(logp, banned)
        base = np.array([h.score for h in live])[:, None]
        total = base + logp
        rows, cols = np.nonzero(np.isfinite(total))
        if rows.size == 0:
            break
        order = np.lexsort((cols, rows, -logp[rows, cols], -total[rows, cols]))[:beam_size]
        keep_rows, keep_tokens, next_live = [], [], []
        for k in order:
            r, c = int(rows[k]), int(cols[k])
            hyp = Hypothesis(live[r].tokens + [c], float(total[r, c]), c == eos_id)
            if hyp.finished:
                hyp.tokens = hyp.tokens[:-1]
                finished.append(hyp)
            else:
                next_live.append(hyp)
                keep_rows.append(r)
                keep_tokens.append(c)
        if not next_live:
            live = []
            break
        live = next_live
        # live scores only fall from here, so a finished hypothesis at least as good ends the search
        if finished and length_alpha == 0.0 and max(h.score for h in finished) >= max(h.score for h in live):
            break
        state = scorer.select(state, np.array(keep_rows))
        last = np.array(keep_tokens)
    pool = finished if finished else live
    if length_alpha:
        key = lambda h: h.score / max(len(h.tokens) + h.finished, 1) ** length_alpha  # noqa: E731
    else:
        key = lambda h: h.score  # noqa: E731
    # stable sort keeps discovery order among equal scores
    return sorted(pool, key=key, reverse=True)[:n_best]


def greedy_decode(model: VCRN, features, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    return greedy_search(ModelScorer(model, features), max_len).tokens


def beam_search(model: VCRN, features, beam_size: int = 5, max_len: int = DEFAULT_MAX_LEN,
                length_alpha: float = 0.0) -> Hypothesis:
    return beam_search_scorer(ModelScorer(model, features), beam_size, max_len, length_alpha=length_alpha)[0]


def decode(model: VCRN, features, beam_size: int = 5, max_len: int = DEFAULT_MAX_LEN) -> Hypothesis:
    if beam_size < 1:
        raise ConfigError(f"beam size must be >= 1, got {beam_size}")
    return beam_search(model, features, beam_size, max_len)


def caption_record(video_id: str, hyp: Hypothesis, vocab: Vocabulary) -> dict:
    return {"video_id": video_id, "caption": vocab.detokenize(hyp.tokens), "score": hyp.score,
            "length": len(hyp.tokens)}


def dump_attention(model: VCRN, features, vocab: Vocabulary | None = None, max_len: int = DEFAULT_MAX_LEN,
                   top_k: int = 5) -> list[dict]:
    """Greedy-decode one video and record what each step attended to.

    Concept rankings come from the first encoder block's similarity map,
    averaged over heads and frames.
    """
    with nx.no_grad():
        encoded = model.encode(features)
        concept_ids: list[int] = []
        concept_mass: list[float] = []
        if encoded.similarities:
            mass = encoded.similarities[0].values[0].mean(axis=0).mean(axis=0)  # (M,)
            top = np.argsort(-mass, kind="stable")[:top_k]
            concept_ids = [int(i) for i in top]
            concept_mass = [float(mass[i]) for i in top]
        state = model.initial_state(1)
        prev = BOS_ID
        records = []
        for t in range(max_len):
            out = model.step(encoded, np.array([prev]), state)
            state = out.state
            logp = _mask(nx.log_softmax_values(out.logits.values), (PAD_ID, BOS_ID))[0]
            tok = int(np.argmax(logp))
            records.append({
                "step": t,
                "token": tok,
                "word": vocab.token(tok) if vocab is not None else None,
                "alpha_v": out.alpha_v.values[0].tolist(),
                "alpha_c": None if out.alpha_c is None else out.alpha_c.values[0].tolist(),
                "lambda_mean": None if out.gate is None else float(out.gate.values.mean()),
                "top_concepts": concept_ids,
                "top_concept_mass": concept_mass,
            })
            if tok == EOS_ID:
                break
            prev = tok
    return records
