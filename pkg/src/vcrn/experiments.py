"""Desk-scale experiments: component ablation, cluster-count sweep and
fixed vs jointly trained dictionary, all on planted-concept corpora."""

from __future__ import annotations

import logging
import statistics
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import SyntheticCorpus, generate_synthetic_corpus, group_captions, tokenize_caption
from .dictionary import VideoDictionary, kmeans_fit, pool_frames
from .inference import decode
from .metrics import bleu4, cider
from .model import ModelConfig
from .training import TrainConfig, TrainResult, build_vocab_from_captions, train

log = logging.getLogger(__name__)

# name -> (use_dictionary, strategy)
VARIANTS = {
    "B": (False, "ADD"),
    "B+VCS": (True, "ADD"),
    "B+VCS+CIG": (True, "GATE"),
}


@dataclass
class ExperimentSetup:
    """Corpus, model and optimizer settings shared by every run."""

    num_concepts: int = 8
    train_videos: int = 80
    test_videos: int = 60
    num_frames: int = 8
    d_a: int = 32
    d_m: int = 32
    noise_sigma: float = 1.0
    captions_per_video: int = 3
    num_centers: int = 8
    d_model: int = 32
    d_hid: int = 32
    heads: int = 4
    blocks: int = 1
    dropout_p: float = 0.1
    epochs: int = 60
    learning_rate: float = 5e-3
    batch_size: int = 16
    beam_size: int = 5
    max_len: int = 26


@dataclass
class Split:
    train: SyntheticCorpus
    test: SyntheticCorpus


def make_split(setup: ExperimentSetup, seed: int) -> Split:
    """Train and held-out corpora sharing the same planted prototypes."""
    total = setup.train_videos + setup.test_videos
    corpus = generate_synthetic_corpus(
        seed, total, setup.num_concepts, setup.num_frames, setup.d_a, setup.d_m,
        setup.noise_sigma, setup.captions_per_video,
    )
    train_ids = {v.id for v in corpus.videos[: setup.train_videos]}

    def subset(keep: bool) -> SyntheticCorpus:
        videos = [v for v in corpus.videos if (v.id in train_ids) == keep]
        ids = {v.id for v in videos}
        return SyntheticCorpus(
            videos,
            [c for c in corpus.captions if c[0] in ids],
            corpus.prototypes,
            {k: corpus.concepts[k] for k in ids},
            {k: corpus.frame_concepts[k] for k in ids},
        )

    return Split(subset(True), subset(False))


@dataclass
class RunResult:
    variant: str
    seed: int
    num_centers: int
    cider: float
    bleu4: float
    train: TrainResult = field(repr=False)


def fit_dictionary(split: Split, num_centers: int, seed: int) -> VideoDictionary:
    return kmeans_fit(pool_frames(split.train.videos), num_centers, seed=seed)


def evaluate_captions(result: TrainResult, corpus: SyntheticCorpus, beam_size: int, max_len: int):
    refs_by_video = group_captions(corpus.captions)
    hyps, refs = [], []
    for video in corpus.videos:
        hyp = decode(result.model, video.features, beam_size, max_len)
        hyps.append(result.vocab.decode(hyp.tokens))
        refs.append([tokenize_caption(r, max_len)[1:-1] for r in refs_by_video[video.id]])
    return cider(hyps, refs), bleu4(hyps, refs), hyps


def run_variant(
    setup: ExperimentSetup,
    split: Split,
    variant: str,
    seed: int,
    num_centers: int | None = None,
    dictionary: VideoDictionary | None = None,
    fixed_dictionary: bool = True,
) -> RunResult:
    use_dictionary, strategy = VARIANTS[variant]
    m = num_centers or setup.num_centers
    tc = TrainConfig(
        learning_rate=setup.learning_rate,
        batch_size=setup.batch_size,
        epochs=setup.epochs,
        seed=seed,
        fixed_dictionary=fixed_dictionary,
        max_len=setup.max_len,
        min_occurrences=0,
    )
    vocab = build_vocab_from_captions(split.train.captions, tc)
    mc = ModelConfig(
        vocab_size=len(vocab),
        d_in=setup.d_a + setup.d_m,
        num_centers=m,
        d_model=setup.d_model,
        d_hid=setup.d_hid,
        heads=setup.heads,
        blocks=setup.blocks,
        dropout_p=setup.dropout_p,
        strategy=strategy,
        use_dictionary=use_dictionary,
    )
    if use_dictionary and dictionary is None:
        dictionary = fit_dictionary(split, m, seed)
    result = train(split.train.videos, split.train.captions, mc, tc,
                   dictionary=dictionary if use_dictionary else None, vocab=vocab)
    score, b4, _ = evaluate_captions(result, split.test, setup.beam_size, setup.max_len)
    log.info("variant=%s seed=%d M=%d cider=%.4f bleu4=%.4f", variant, seed, m, score, b4)
    return RunResult(variant, seed, m, score, b4, result)


def ablation(setup: ExperimentSetup, seeds: Sequence[int], variants: Sequence[str] = tuple(VARIANTS)) -> dict:
    """Held-out CIDEr per variant and seed, plus per-variant medians."""
    scores: dict[str, list[float]] = {v: [] for v in variants}
    for seed in seeds:
        split = make_split(setup, seed)
        for variant in variants:
            scores[variant].append(run_variant(setup, split, variant, seed).cider)
    return {"scores": scores, "median": {v: statistics.median(s) for v, s in scores.items()}}


def cluster_sweep(setup: ExperimentSetup, seeds: Sequence[int], counts: Sequence[int]) -> dict:
    """Held-out CIDEr of the full model for each dictionary size."""
    scores: dict[int, list[float]] = {m: [] for m in counts}
    for seed in seeds:
        split = make_split(setup, seed)
        for m in counts:
            scores[m].append(run_variant(setup, split, "B+VCS+CIG", seed, num_centers=m).cider)
    return {"scores": scores, "median": {m: statistics.median(s) for m, s in scores.items()}}


def format_table(title: str, rows: dict, scores: dict) -> str:
    width = max(len(str(k)) for k in rows)
    lines = [title, f"{'setting':<{width}}  median   per-seed"]
    for key, med in rows.items():
        per_seed = " ".join(f"{s:7.4f}" for s in scores[key])
        lines.append(f"{str(key):<{width}}  {med:7.4f}  {per_seed}")
    return "\n".join(lines)


def with_overrides(setup: ExperimentSetup, **overrides) -> ExperimentSetup:
    return replace(setup, **{k: v for k, v in overrides.items() if v is not None})


def planted_recovery_error(dictionary: VideoDictionary, prototypes: np.ndarray) -> np.ndarray:
    """Per-coordinate error after optimally matching centers to prototypes."""
    from scipy.optimize import linear_sum_assignment

    cost = ((dictionary.centers[:, None, :] - prototypes[None, :, :]) ** 2).sum(-1)
    rows, cols = linear_sum_assignment(cost)
    return np.abs(dictionary.centers[rows] - prototypes[cols])
