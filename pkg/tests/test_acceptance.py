"""Acceptance criteria, one test each; every test records a PASS/FAIL line
that pytest prints in its terminal summary."""

import json
import math
import time

import numpy as np
import pytest

from vcrn import numerics as nx
from conftest import record_acceptance
from test_inference import BigramToy, exhaustive_best
from vcrn.corpus import generate_synthetic_corpus
from vcrn.dictionary import encode_dictionary, kmeans_fit, pool_frames
from vcrn.experiments import ExperimentSetup, ablation, cluster_sweep, format_table, planted_recovery_error
from vcrn.inference import ModelScorer, beam_search_scorer, greedy_search
from vcrn.metrics import BLEU_EPSILON, bleu4, cider
from vcrn.model import DICTIONARY_PARAM, VCRN, ModelConfig
from vcrn.training import TINY_CONFIG, TrainConfig, build_vocab_from_captions, evaluate_teacher_forced, gradcheck, make_caption_data, train


def check(number, title, passed, detail):
    record_acceptance(number, title, bool(passed), detail)
    assert passed, detail


def small_run(seed=0, fixed=True, epochs=3, log_path=None, checkpoint_path=None):
    corpus = generate_synthetic_corpus(seed, 12, 3, num_frames=5, d_a=8, d_m=8, noise_sigma=0.5)
    tc = TrainConfig(learning_rate=5e-3, batch_size=4, epochs=epochs, seed=seed, fixed_dictionary=fixed,
                     min_occurrences=0)
    vocab = build_vocab_from_captions(corpus.captions, tc)
    mc = ModelConfig(vocab_size=len(vocab), d_in=16, num_centers=4, d_model=16, d_hid=16, heads=4)
    dictionary = kmeans_fit(pool_frames(corpus.videos), 4, seed=seed)
    result = train(corpus.videos, corpus.captions, mc, tc, dictionary=dictionary, vocab=vocab,
                   log_path=log_path, checkpoint_path=checkpoint_path)
    return corpus, dictionary, result


def test_criterion_01_gradient_fidelity():
    started = time.perf_counter()
    report = gradcheck(seed=0, h=1e-5)
    elapsed = time.perf_counter() - started
    expected = VCRN(ModelConfig(**TINY_CONFIG), fixed_dictionary=False).store.names()
    covered = sorted(report.errors) == expected
    check(1, "gradient fidelity", report.worst_error < 1e-6 and covered and elapsed < 60,
          f"worst {report.worst_name} {report.worst_error:.2e} over {len(report.errors)} tensors "
          f"({report.num_scalars} scalars) in {elapsed:.1f}s")


def test_criterion_02_overfit_capacity():
    started = time.perf_counter()
    corpus = generate_synthetic_corpus(7, 50, 4, num_frames=8, d_a=32, d_m=32)
    tc = TrainConfig(learning_rate=1e-2, batch_size=10, epochs=300, seed=7, min_occurrences=0)
    vocab = build_vocab_from_captions(corpus.captions, tc)
    mc = ModelConfig(vocab_size=len(vocab), d_in=64, num_centers=4, d_model=32, d_hid=32, heads=4, dropout_p=0.0)
    dictionary = kmeans_fit(pool_frames(corpus.videos), 4, seed=7)
    result = train(corpus.videos, corpus.captions, mc, tc, dictionary=dictionary, vocab=vocab)
    loss, acc = evaluate_teacher_forced(result.model, make_caption_data(corpus.videos, corpus.captions, vocab))
    elapsed = time.perf_counter() - started
    check(2, "overfit capacity", acc >= 0.99 and loss < 0.05 and elapsed < 600,
          f"token accuracy {acc:.4f}, loss {loss:.4f} after 300 epochs in {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_03_ablation_direction():
    started = time.perf_counter()
    result = ablation(ExperimentSetup(), seeds=[0, 1, 2, 3, 4])
    med = result["median"]
    elapsed = time.perf_counter() - started
    print(format_table("held-out CIDEr by variant", med, result["scores"]))
    ok = med["B"] <= med["B+VCS"] <= med["B+VCS+CIG"] and med["B+VCS+CIG"] > med["B"] and elapsed < 3600
    check(3, "ablation direction", ok,
          f"median CIDEr B {med['B']:.3f}, B+VCS {med['B+VCS']:.3f}, B+VCS+CIG {med['B+VCS+CIG']:.3f} "
          f"({elapsed:.0f}s)")


@pytest.mark.slow
def test_criterion_04_cluster_count_sweep():
    setup = ExperimentSetup()
    k = setup.num_concepts
    counts = [1, k, 4 * k, 32 * k]
    seeds = [0, 1, 2]
    result = cluster_sweep(setup, seeds, counts)
    med, scores = result["median"], result["scores"]
    print(format_table("held-out CIDEr by dictionary size M", med, scores))
    best = max(counts, key=lambda m: med[m])
    m1_never_best = all(scores[1][i] < max(scores[m][i] for m in counts) for i in range(len(seeds)))
    check(4, "cluster-count sweep", best >= k and m1_never_best,
          "median CIDEr " + ", ".join(f"M={m} {med[m]:.3f}" for m in counts) + f"; best M={best}")


def test_criterion_05_kmeans_correctness():
    rng = np.random.default_rng(0)
    pool = rng.normal(size=(400, 6))
    monotone = all(
        all(b <= a + 1e-9 for a, b in zip(h, h[1:]))
        for h in (kmeans_fit(pool, m, seed=s).history for m in (2, 5, 9) for s in range(3))
    )
    mean_err = float(np.abs(kmeans_fit(pool, 1).centers[0] - pool.mean(axis=0)).max())
    sigma, L = 0.05, 26
    corpus = generate_synthetic_corpus(5, 30, 4, num_frames=L, d_a=16, d_m=16, noise_sigma=sigma)
    recovery = float(planted_recovery_error(kmeans_fit(pool_frames(corpus.videos), 4), corpus.prototypes).max())
    bound = 3 * sigma / math.sqrt(L)
    check(5, "k-means correctness", monotone and mean_err <= 1e-6 and recovery <= bound,
          f"objective monotone {monotone}; M=1 error {mean_err:.1e}; recovery {recovery:.4f} <= {bound:.4f}")


def test_criterion_06_decoding_equivalences():
    corpus, _, result = small_run(seed=1, epochs=5)
    videos = generate_synthetic_corpus(101, 100, 3, num_frames=5, d_a=8, d_m=8, noise_sigma=0.5).videos
    same = 0
    for video in videos:
        scorer = ModelScorer(result.model, video.features)
        g = greedy_search(scorer, 26)
        b = beam_search_scorer(scorer, 1, 26)[0]
        same += g.tokens == b.tokens
    toy = BigramToy()
    best, _ = exhaustive_best(toy, 4)
    toy_hyp = beam_search_scorer(toy, 4, max_len=5)[0].tokens
    check(6, "decoding equivalences", same == 100 and toy_hyp == best,
          f"beam=1 matches greedy on {same}/100 videos; toy beam=4 {toy_hyp} vs exhaustive {best}")


def test_criterion_07_metric_oracles():
    hand = math.exp(1 - 4 / 3) * BLEU_EPSILON**0.25
    b = bleu4([["the", "cat", "sat"]], [[["the", "cat", "sat", "down"]]])
    refs = [["a", "dog", "is", "running", "fast"], ["the", "cat", "sleeps", "on", "a", "mat"]]
    ident = bleu4(refs, [[r] for r in refs])
    log3, log15 = math.log(3), math.log(1.5)
    toy_expected = (5.0 + 10 * (log3 / math.sqrt(log3**2 + log15**2)) / 4) / 3
    toy = cider([["dog", "runs"], ["cat"], ["bird"]], [[["dog", "runs"]], [["cat", "runs"]], [["dog", "sleeps"]]])
    ok = abs(b - hand) <= 1e-9 and ident == 1.0 and abs(toy - toy_expected) <= 1e-6
    check(7, "metric oracles", ok,
          f"BLEU hand example diff {abs(b - hand):.1e}; identity BLEU {ident}; CIDEr toy diff {abs(toy - toy_expected):.1e}")


def _rollout(model, features, tokens, gate, concept_offset=None, v_offset=None):
    encoded = model.encode(features, concept_offset=concept_offset)
    state = model.initial_state(1)
    probs = []
    for t in range(len(tokens) - 1):
        out = model.step(encoded, [tokens[t]], state, gate_override=gate, attended_v_offset=v_offset)
        state = out.state
        probs.append(np.exp(nx.log_softmax_values(out.logits.values)))
    return np.concatenate(probs)


def test_criterion_08_gate_semantics():
    corpus, _, result = small_run(seed=2, epochs=2)
    model = result.model
    rng = np.random.default_rng(0)
    worst_c = worst_v = 0.0
    for video in corpus.videos[:5]:
        tokens = [1, *rng.integers(4, model.config.vocab_size, size=6), 2]
        base1 = _rollout(model, video.features, tokens, 1.0)
        base0 = _rollout(model, video.features, tokens, 0.0)
        for _ in range(3):
            c_off = rng.normal(scale=5.0, size=(1, video.num_frames, model.config.d_model))
            v_off = rng.normal(scale=5.0, size=(1, model.config.d_model))
            worst_c = max(worst_c, float(np.abs(_rollout(model, video.features, tokens, 1.0, c_off) - base1).max()))
            worst_v = max(worst_v, float(np.abs(_rollout(model, video.features, tokens, 0.0, None, v_off) - base0).max()))
    check(8, "gate semantics", worst_c <= 1e-12 and worst_v <= 1e-12,
          f"lambda=1 max |dp| under concept perturbation {worst_c:.1e}; lambda=0 under frame-context perturbation {worst_v:.1e}")


def test_criterion_09_fixed_dictionary_contract():
    _, dictionary, fixed = small_run(seed=3, fixed=True)
    before = encode_dictionary(dictionary)
    after_fixed = fixed.model.store[DICTIONARY_PARAM].values.astype("<f4").tobytes()
    unchanged = after_fixed == dictionary.centers.astype("<f4").tobytes() and encode_dictionary(dictionary) == before
    _, dictionary2, joint = small_run(seed=3, fixed=False)
    changed = int((joint.model.store[DICTIONARY_PARAM].values != dictionary2.centers).any(axis=1).sum())
    check(9, "fixed-dictionary contract", unchanged and changed >= 1 and len(joint.log) == 3,
          f"fixed run bytes identical {unchanged}; joint run moved {changed}/{dictionary2.M} centers")


def test_criterion_10_reproducibility(tmp_path):
    logs, ckpts = [], []
    for name in ("first", "second"):
        small_run(seed=4, fixed=False, log_path=tmp_path / f"{name}.log", checkpoint_path=tmp_path / f"{name}.ckpt")
        logs.append([{k: v for k, v in json.loads(line).items() if k != "wall_time_s"}
                     for line in (tmp_path / f"{name}.log").read_text().splitlines()])
        ckpts.append((tmp_path / f"{name}.ckpt").read_bytes())
    check(10, "reproducibility", logs[0] == logs[1] and ckpts[0] == ckpts[1],
          f"loss logs identical {logs[0] == logs[1]} ({len(logs[0])} epochs); checkpoints identical {ckpts[0] == ckpts[1]}")
