"""``vcrn`` command-line entry point.

Exit codes: 0 success, 2 usage, 3 missing file, 4 config, 5 dimension,
6 parse, 7 numeric (including a failed gradcheck), 8 contract, 9 training,
10 other I/O failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .config import apply_section, coerce, load_config, serialize_config
from .corpus import DEFAULT_MAX_LEN, generate_synthetic_corpus, group_captions, load_corpus, read_captions, save_corpus, tokenize_caption
from .dictionary import kmeans_fit, load_dictionary, pool_frames, save_dictionary
from .errors import ConfigError, NumericError, ParseError, VCRNError
from .experiments import ExperimentSetup, ablation, cluster_sweep, format_table
from .inference import caption_record, decode, dump_attention
from .metrics import evaluate
from .model import ModelConfig
from .training import TINY_CONFIG, TrainConfig, build_vocab_from_captions, gradcheck, load_checkpoint, train

log = logging.getLogger("vcrn")

EXIT_MISSING_FILE = 3
EXIT_IO = 10

# keys the data decides, never the config file
DERIVED_MODEL_KEYS = ("vocab_size", "d_in", "num_centers")


class Reporter:
    """Human-readable lines by default, one JSON object per line with --json."""

    def __init__(self, as_json: bool, stream=None):
        self.as_json = as_json
        self.stream = stream or sys.stdout

    def emit(self, record: dict, text: str | None = None) -> None:
        if self.as_json:
            print(json.dumps(record, sort_keys=True), file=self.stream)
        else:
            print(text if text is not None else "  ".join(f"{k}={v}" for k, v in record.items()), file=self.stream)


def _defaults(cls, skip=()) -> dict:
    return {f.name: f.default for f in fields(cls) if f.name not in skip}


def _apply_overrides(sections: dict[str, dict[str, str]], overrides: list[str]) -> None:
    for item in overrides or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        sections.setdefault(section.strip(), {})[name.strip()] = value.strip()


def read_run_config(path, overrides=()) -> tuple[dict, dict]:
    """``[model]`` and ``[train]`` sections, merged with ``--set`` overrides."""
    sections = load_config(path) if path else {}
    _apply_overrides(sections, list(overrides or ()))
    unknown = set(sections) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for key in DERIVED_MODEL_KEYS:
        if key in sections.get("model", {}):
            raise ConfigError(f"[model] {key} is derived from the data and may not be set")
    model = apply_section(_defaults(ModelConfig, DERIVED_MODEL_KEYS), sections.get("model", {}), "model")
    train_values = apply_section(_defaults(TrainConfig), sections.get("train", {}), "train")
    return model, train_values


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, out: Reporter) -> int:
    corpus = generate_synthetic_corpus(
        args.seed, args.videos, args.concepts, args.frames, args.dim_a, args.dim_m, args.noise,
        args.captions_per_video,
    )
    save_corpus(corpus.videos, corpus.captions, args.out)
    out.emit({
        "command": "gen-data", "out": str(args.out), "videos": len(corpus.videos), "captions": len(corpus.captions),
        "concepts": args.concepts, "frames": args.frames, "d_a": args.dim_a, "d_m": args.dim_m, "seed": args.seed,
    })
    return 0


def cmd_build_dict(args, out: Reporter) -> int:
    videos, _ = load_corpus(args.corpus)
    pool = pool_frames(videos)
    fitted = kmeans_fit(pool, args.m, args.max_iter, args.tol, args.seed, normalize=args.normalize)
    save_dictionary(fitted, args.out)
    out.emit({
        "command": "build-dict", "out": str(args.out), "M": fitted.M, "d": fitted.d, "pool_rows": len(pool),
        "iterations": fitted.iterations, "objective": fitted.objective, "seed": args.seed,
    })
    return 0


def cmd_train(args, out: Reporter) -> int:
    model_values, train_values = read_run_config(args.config, args.set)
    if args.seed is not None:
        train_values["seed"] = args.seed
    if args.epochs is not None:
        train_values["epochs"] = args.epochs
    tc = TrainConfig(**train_values)
    videos, captions = load_corpus(args.corpus)
    val_videos, val_captions = load_corpus(args.val_corpus) if args.val_corpus else ([], [])
    dictionary = load_dictionary(args.dict) if args.dict else None
    vocab = build_vocab_from_captions(captions, tc)
    if not videos:
        raise ConfigError(f"corpus {args.corpus} holds no videos")
    num_centers = dictionary.M if dictionary is not None else args.m
    mc = ModelConfig(vocab_size=len(vocab), d_in=videos[0].dim, num_centers=num_centers, **model_values)

    def progress(record):
        if out.as_json:
            out.emit({"command": "train", **record})
        else:
            log.info("epoch %s", record)

    result = train(videos, captions, mc, tc, dictionary=dictionary, vocab=vocab, val_videos=val_videos,
                   val_captions=val_captions, checkpoint_path=args.out, log_path=args.log, on_epoch=progress)
    out.emit({
        "command": "train", "out": str(args.out), "epochs": tc.epochs, "best_epoch": result.best_epoch,
        "best_loss": result.best_loss, "vocab_size": len(vocab), "parameters": result.model.store.num_scalars(),
    })
    return 0


def cmd_caption(args, out: Reporter) -> int:
    ckpt = load_checkpoint(args.ckpt)
    videos, _ = load_corpus(args.corpus)
    lines = []
    for video in videos:
        hyp = decode(ckpt.model, video.features, args.beam, args.max_len)
        lines.append(json.dumps(caption_record(video.id, hyp, ckpt.vocab), sort_keys=True))
    Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    out.emit({"command": "caption", "out": str(args.out), "videos": len(videos), "beam": args.beam})
    return 0


def read_hypotheses(path) -> dict[str, str]:
    """First hypothesis per video from caption JSONL or a caption TSV."""
    text = Path(path).read_text(encoding="utf-8")
    first = next((line for line in text.splitlines() if line.strip()), "")
    hyps: dict[str, str] = {}
    if first.lstrip().startswith("{"):
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                hyps.setdefault(rec["video_id"], rec["caption"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: expected a caption record") from exc
    else:
        for vid, caption in read_captions(path):
            hyps.setdefault(vid, caption)
    return hyps


def cmd_eval(args, out: Reporter) -> int:
    hyps = read_hypotheses(args.hyp)
    refs = group_captions(read_captions(args.refs))
    missing = sorted(set(hyps) - set(refs))
    if missing:
        raise ConfigError(f"{len(missing)} hypotheses have no references, e.g. {missing[0]!r}")
    ids = sorted(hyps)
    report = evaluate(
        [tokenize_caption(hyps[v], args.max_len)[1:-1] for v in ids],
        [[tokenize_caption(r, args.max_len)[1:-1] for r in refs[v]] for v in ids],
    )
    out.emit(report, f"bleu4 {report['bleu4']:.6f}\ncider {report['cider']:.6f}\n"
                     f"videos {report['num_videos']}  references {report['num_refs_total']}")
    return 0


def cmd_gradcheck(args, out: Reporter) -> int:
    values = dict(TINY_CONFIG)
    if args.config:
        values.update(apply_section(values, load_config(args.config).get("model", {}), "model"))
    report = gradcheck(ModelConfig(**values), seed=args.seed, h=args.h)
    record = {"command": "gradcheck", "worst_name": report.worst_name, "worst_error": report.worst_error,
              "parameters": len(report.errors), "scalars": report.num_scalars,
              "seconds": round(report.seconds, 2), "passed": report.passed}
    text = "\n".join(f"{name:<24} {err:.3e}" for name, err in sorted(report.errors.items()))
    text += f"\nworst {report.worst_name} {report.worst_error:.3e}  {'PASS' if report.passed else 'FAIL'}"
    out.emit(record, text)
    if not report.passed:
        raise NumericError(f"gradcheck failed: {report.worst_name} has relative error {report.worst_error:.3e}")
    return 0


def cmd_dump_attention(args, out: Reporter) -> int:
    ckpt = load_checkpoint(args.ckpt)
    videos, _ = load_corpus(args.corpus)
    match = [v for v in videos if v.id == args.video_id]
    if not match:
        raise FileNotFoundError(f"video {args.video_id!r} not found in {args.corpus}")
    records = dump_attention(ckpt.model, match[0].features, ckpt.vocab, args.max_len, args.top_k)
    lines = "".join(json.dumps({"video_id": args.video_id, **r}, sort_keys=True) + "\n" for r in records)
    if args.out:
        Path(args.out).write_text(lines, encoding="utf-8")
        out.emit({"command": "dump-attention", "out": str(args.out), "steps": len(records)})
    else:
        sys.stdout.write(lines)
    return 0


def _setup_from(args) -> ExperimentSetup:
    values = _defaults(ExperimentSetup)
    sections: dict[str, dict[str, str]] = {}
    _apply_overrides(sections, [f"setup.{item}" for item in args.set or ()])
    return ExperimentSetup(**apply_section(values, sections.get("setup", {}), "setup"))


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from exc


def cmd_ablation(args, out: Reporter) -> int:
    setup = _setup_from(args)
    result = ablation(setup, _seeds(args.seeds))
    out.emit({"command": "ablation", **result}, format_table("held-out CIDEr by variant", result["median"], result["scores"]))
    return 0


def cmd_sweep(args, out: Reporter) -> int:
    setup = _setup_from(args)
    k = setup.num_concepts
    counts = [int(coerce(c, 1)) for c in args.counts.split(",")] if args.counts else [1, k, 4 * k, 32 * k]
    result = cluster_sweep(setup, _seeds(args.seeds), counts)
    out.emit({"command": "sweep", "scores": {str(m): s for m, s in result["scores"].items()},
              "median": {str(m): s for m, s in result["median"].items()}},
             format_table("held-out CIDEr by dictionary size M", result["median"], result["scores"]))
    return 0


def cmd_show_config(args, out: Reporter) -> int:
    model, train_values = read_run_config(args.config, args.set)
    sys.stdout.write(serialize_config({"model": model, "train": train_values}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcrn", description="Dictionary-based video captioner at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--json", action="store_true", help="write reports as line-delimited JSON")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic planted-concept corpus")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--videos", type=int, default=100, help="number of videos (default: 100)")
    p.add_argument("--concepts", type=int, default=8, help="latent concepts K_lat (default: 8)")
    p.add_argument("--frames", type=int, default=DEFAULT_MAX_LEN, help="frames per video L (default: 26)")
    p.add_argument("--dim-a", type=int, default=32, help="appearance feature dim (default: 32)")
    p.add_argument("--dim-m", type=int, default=32, help="motion feature dim (default: 32)")
    p.add_argument("--noise", type=float, default=0.5, help="frame noise sigma (default: 0.5)")
    p.add_argument("--captions-per-video", type=int, default=1, help="paraphrases per video (default: 1)")
    p.add_argument("--out", type=Path, required=True, help="output corpus directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-dict", help="fit the K-means video dictionary")
    p.add_argument("--corpus", type=Path, required=True, help="corpus directory")
    p.add_argument("--m", type=int, default=1000, help="number of centers M (default: 1000)")
    p.add_argument("--seed", type=int, default=0, help="k-means++ seed (default: 0)")
    p.add_argument("--max-iter", type=int, default=100, help="Lloyd iteration cap (default: 100)")
    p.add_argument("--tol", type=float, default=1e-4, help="center-shift tolerance (default: 1e-4)")
    p.add_argument("--normalize", action="store_true", help="l2-normalize frames before clustering")
    p.add_argument("--out", type=Path, required=True, help="output dictionary file")
    p.set_defaults(func=cmd_build_dict)

    p = sub.add_parser("train", help="train a captioner")
    p.add_argument("--corpus", type=Path, required=True, help="training corpus directory")
    p.add_argument("--dict", type=Path, help="dictionary file (omit for the baseline or joint training)")
    p.add_argument("--config", type=Path, help="config file with [model] and [train] sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config entry")
    p.add_argument("--val-corpus", type=Path, help="held-out corpus for checkpoint selection")
    p.add_argument("--m", type=int, default=16, help="centers when training the dictionary from scratch (default: 16)")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")
    p.add_argument("--log", type=Path, help="per-epoch JSON-lines log")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="caption every video of a corpus")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    p.add_argument("--corpus", type=Path, required=True, help="corpus directory")
    p.add_argument("--beam", type=int, default=5, help="beam size (default: 5)")
    p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN, help="caption length cap (default: 26)")
    p.add_argument("--out", type=Path, required=True, help="output JSON-lines file")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="BLEU-4 and CIDEr of hypotheses against references")
    p.add_argument("--hyp", type=Path, required=True, help="caption JSON lines or a video_id<TAB>caption file")
    p.add_argument("--refs", type=Path, required=True, help="reference captions, video_id<TAB>caption")
    p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN, help="tokenizer truncation (default: 26)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare backprop with finite differences on a tiny model")
    p.add_argument("--config", type=Path, help="config whose [model] section overrides the tiny model")
    p.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step (default: 1e-5)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attention", help="per-step attention diagnostics for one video")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    p.add_argument("--corpus", type=Path, required=True, help="corpus directory holding the video")
    p.add_argument("--video-id", required=True, help="video to decode")
    p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN, help="caption length cap (default: 26)")
    p.add_argument("--top-k", type=int, default=5, help="concepts to report (default: 5)")
    p.add_argument("--out", type=Path, help="output file (default: stdout)")
    p.set_defaults(func=cmd_dump_attention)

    for name, func, helptext in (("ablation", cmd_ablation, "component ablation on synthetic data"),
                                 ("sweep", cmd_sweep, "dictionary-size sweep on synthetic data")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds (default: 0,1,2,3,4)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override an experiment setting")
        if name == "sweep":
            p.add_argument("--counts", help="comma-separated M values (default: 1,K,4K,32K)")
        p.set_defaults(func=func)

    p = sub.add_parser("show-config", help="print the effective run config")
    p.add_argument("--config", type=Path, help="config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config entry")
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    out = Reporter(args.json)
    try:
        return args.func(args, out)
    except VCRNError as exc:
        print(f"vcrn: {exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"vcrn: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except OSError as exc:
        print(f"vcrn: i/o error: {exc.filename or ''} {exc.strerror or exc}".rstrip(), file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
