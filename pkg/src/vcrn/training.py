"""Teacher-forced training, Adam, checkpoints and the gradient check harness."""

from __future__ import annotations

import json
import logging
import struct
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import apply_section, parse_config_text, serialize_config
from .corpus import (
    DEFAULT_MAX_LEN,
    FORMAT_VERSION,
    PAD_ID,
    Video,
    Vocabulary,
    build_vocabulary,
    check_magic_version,
    tokenize_caption,
)
from .dictionary import VideoDictionary
from .errors import ConfigError, DimensionError, TrainingError, TruncatedPayloadError
from .model import DICTIONARY_PARAM, VCRN, ModelConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"VCRNCKPT"
PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 20
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float = 5.0
    seed: int = 0
    fixed_dictionary: bool = True
    max_len: int = DEFAULT_MAX_LEN
    min_occurrences: int = 2

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two numbers in [0, 1), got {self.betas}")


# ---------------------------------------------------------------------------
# loss and optimizer


def cross_entropy_loss(probs: Sequence[np.ndarray], targets: Sequence[np.ndarray], pad_id: int = PAD_ID) -> float:
    """``-sum_t log p_t[w_t]`` over non-pad targets, averaged over sequences.

    ``probs[b]`` is a ``(T_b, V)`` array of distributions and ``targets[b]`` the
    aligned ``(T_b,)`` ids.  Probabilities are floored at 1e-12 before the log.
    """
    if len(probs) != len(targets):
        raise DimensionError(f"{len(probs)} prediction sequences vs {len(targets)} target sequences")
    if not probs:
        return 0.0
    total = 0.0
    for p, w in zip(probs, targets):
        p = np.asarray(p, dtype=np.float64)
        w = np.asarray(w, dtype=np.int64)
        keep = w != pad_id
        picked = p[np.arange(len(w))[keep], w[keep]]
        total += float(-np.log(np.maximum(picked, PROB_FLOOR)).sum())
    return total / len(probs)


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm and max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= factor
    return norm


def adam_step(store: nx.ParameterStore, state: AdamState, cfg: TrainConfig) -> float:
    """One bias-corrected Adam update after global-norm clipping.

    Returns the pre-clip gradient norm.
    """
    grads = {}
    for name, p in store.trainable():
        g = p.grad
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g.astype(np.float64, copy=True)
    norm = clip_global_norm(grads, cfg.grad_clip_norm)
    state.t += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p = store[name]
        p.values -= update.astype(p.values.dtype)
    return norm


# ---------------------------------------------------------------------------
# data


@dataclass
class CaptionData:
    """Aligned arrays for teacher forcing: one row per (video, caption) pair."""

    features: np.ndarray  # (N_videos, L, d)
    video_index: np.ndarray  # (N_pairs,)
    tokens: np.ndarray  # (N_pairs, T + 1), padded with pad id
    video_ids: list[str]

    def __len__(self) -> int:
        return len(self.video_index)


def build_vocab_from_captions(captions: Sequence[tuple[str, str]], cfg: TrainConfig) -> Vocabulary:
    return build_vocabulary((tokenize_caption(text, cfg.max_len) for _, text in captions), cfg.min_occurrences)


def make_caption_data(
    videos: Sequence[Video], captions: Sequence[tuple[str, str]], vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN
) -> CaptionData:
    if not videos:
        raise ConfigError("no videos")
    lengths = {v.features.shape for v in videos}
    if len(lengths) != 1:
        raise DimensionError(f"all videos must share (L, d) for batching, got {sorted(lengths)}")
    index = {v.id: i for i, v in enumerate(videos)}
    rows, vids = [], []
    for vid, text in captions:
        if vid not in index:
            continue
        rows.append(vocab.encode(tokenize_caption(text, max_len)))
        vids.append(index[vid])
    width = max((len(r) for r in rows), default=2)
    tokens = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        tokens[i, : len(r)] = r
    feats = np.stack([v.features for v in videos]).astype(np.float64)
    return CaptionData(feats, np.asarray(vids, dtype=np.int64), tokens, [v.id for v in videos])


def _trim(tokens: np.ndarray) -> np.ndarray:
    used = np.flatnonzero((tokens != PAD_ID).any(axis=0))
    return tokens[:, : used[-1] + 1] if used.size else tokens[:, :2]


def evaluate_teacher_forced(model: VCRN, data: CaptionData, batch_size: int = 64) -> tuple[float, float]:
    """Eval-mode (loss per sequence, token accuracy)."""
    if len(data) == 0:
        return float("nan"), float("nan")
    total = 0.0
    correct = counted = 0
    with nx.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            tokens = _trim(data.tokens[sl])
            loss, c, n = model.teacher_forced(data.features[data.video_index[sl]], tokens)
            total += float(loss.values) * len(tokens)
            correct += c
            counted += n
    return total / len(data), correct / max(counted, 1)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: VCRN
    vocab: Vocabulary
    log: list[dict]
    best_epoch: int
    best_loss: float
    train_config: TrainConfig


def train(
    train_videos: Sequence[Video],
    train_captions: Sequence[tuple[str, str]],
    model_config: ModelConfig,
    train_config: TrainConfig,
    dictionary: VideoDictionary | None = None,
    vocab: Vocabulary | None = None,
    val_videos: Sequence[Video] = (),
    val_captions: Sequence[tuple[str, str]] = (),
    checkpoint_path=None,
    log_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam on the teacher-forced cross-entropy.

    Keeps the parameters of the epoch with the lowest held-out loss (train
    loss when there is no held-out set); those are returned and written to
    ``checkpoint_path``.  Fully determined by ``train_config.seed``.
    """
    vocab = vocab or build_vocab_from_captions(train_captions, train_config)
    if model_config.vocab_size != len(vocab):
        raise ConfigError(f"model vocab_size {model_config.vocab_size} != vocabulary size {len(vocab)}")
    data = make_caption_data(train_videos, train_captions, vocab, train_config.max_len)
    if data.features.shape[-1] != model_config.d_in:
        raise DimensionError(f"features have dim {data.features.shape[-1]}, config says d_in={model_config.d_in}")
    if len(data) == 0:
        raise ConfigError("no training captions match the training videos")
    val = make_caption_data(val_videos, val_captions, vocab, train_config.max_len) if val_videos else None

    centers = None
    if model_config.use_dictionary:
        if dictionary is None:
            if train_config.fixed_dictionary:
                raise ConfigError("a fitted dictionary is required unless the dictionary is trained jointly")
        else:
            if dictionary.d != model_config.d_in or dictionary.M != model_config.num_centers:
                raise DimensionError(
                    f"dictionary is {dictionary.M}x{dictionary.d}, config expects "
                    f"{model_config.num_centers}x{model_config.d_in}"
                )
            centers = dictionary.centers

    seed = train_config.seed
    model = VCRN(model_config, centers, seed=seed, fixed_dictionary=train_config.fixed_dictionary)
    order_rng = np.random.default_rng([seed, 1])
    dropout_rng = np.random.default_rng([seed, 2])
    adam = AdamState()
    history: list[dict] = []
    best_loss, best_epoch, best_state = float("inf"), 0, model.store.state()
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, train_config.epochs + 1):
            started = time.perf_counter()
            order = order_rng.permutation(len(data))
            running = 0.0
            for start in range(0, len(order), train_config.batch_size):
                batch = order[start : start + train_config.batch_size]
                tokens = _trim(data.tokens[batch])
                model.store.zero_grad()
                loss, _, _ = model.teacher_forced(data.features[data.video_index[batch]], tokens, True, dropout_rng)
                if not np.isfinite(loss.values):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                nx.backward(loss)
                adam_step(model.store, adam, train_config)
                running += float(loss.values) * len(batch)
            record = {"epoch": epoch, "train_loss": running / len(data)}
            if val is not None:
                record["val_loss"], record["val_token_acc"] = evaluate_teacher_forced(model, val)
            else:
                record["val_loss"], record["val_token_acc"] = None, None
            record["wall_time_s"] = round(time.perf_counter() - started, 4)
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(record)
            score = record["val_loss"] if val is not None else record["train_loss"]
            if score < best_loss:
                best_loss, best_epoch, best_state = score, epoch, model.store.state()
    finally:
        if log_fh:
            log_fh.close()
    model.store.load_state(best_state)
    if checkpoint_path:
        save_checkpoint(model, vocab, checkpoint_path, seed=seed, best_loss=best_loss)
    return TrainResult(model, vocab, history, best_epoch, best_loss, train_config)


# ---------------------------------------------------------------------------
# checkpoints


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(model: VCRN, vocab: Vocabulary, seed: int = 0, best_loss: float = float("nan")) -> bytes:
    """Magic, version, param count, seed, best loss, config text, vocabulary,
    then per parameter: name, ndim, dims, float32 payload (little-endian)."""
    items = model.store.items()
    out = [CKPT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(items)), struct.pack("<Qd", seed, best_loss)]
    cfg = dict(model.config.to_dict())
    cfg["fixed_dictionary"] = model.fixed_dictionary
    out.append(_pack_str(serialize_config({"model": cfg})))
    out.append(struct.pack("<I", len(vocab)))
    out.extend(_pack_str(tok) for tok in vocab.itos)
    for name, t in items:
        out.append(_pack_str(name))
        out.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t.values, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, offset: int):
        self.buf, self.off = buf, offset

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedPayloadError(f"checkpoint truncated while reading {what}")
        chunk = self.buf[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<I", what)
        return self.take(n, what).decode("utf-8")


@dataclass
class Checkpoint:
    model: VCRN
    vocab: Vocabulary
    seed: int
    best_loss: float


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf, check_magic_version(buf, CKPT_MAGIC))
    (count,) = r.unpack("<I", "parameter count")
    seed, best_loss = r.unpack("<Qd", "header")
    sections = parse_config_text(r.string("config"))
    (nvocab,) = r.unpack("<I", "vocabulary size")
    itos = [r.string("vocabulary") for _ in range(nvocab)]
    vocab = Vocabulary(itos[4:])
    if vocab.itos != itos:
        raise TruncatedPayloadError("checkpoint vocabulary does not start with the reserved tokens")
    defaults = {f.name: f.default for f in fields(ModelConfig)}
    defaults.update(vocab_size=0, d_in=0, fixed_dictionary=True)
    values = apply_section(defaults, sections.get("model", {}), "model")
    fixed = values.pop("fixed_dictionary")
    config = ModelConfig(**values)
    state = {}
    for _ in range(count):
        name = r.string("parameter name")
        (ndim,) = r.unpack("<I", "rank")
        shape = r.unpack(f"<{ndim}I", "shape")
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(4 * n, name), dtype="<f4").reshape(shape)
    if r.off != len(buf):
        raise TruncatedPayloadError(f"{len(buf) - r.off} trailing bytes after the last parameter")
    model = VCRN(config, state.get(DICTIONARY_PARAM), fixed_dictionary=fixed)
    if set(state) != set(model.store.names()):
        raise DimensionError("checkpoint parameters do not match the model config")
    model.store.load_state(state)
    return Checkpoint(model, vocab, seed, best_loss)


def save_checkpoint(model: VCRN, vocab: Vocabulary, path, seed: int = 0, best_loss: float = float("nan")) -> None:
    Path(path).write_bytes(encode_checkpoint(model, vocab, seed, best_loss))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# gradient check


TINY_CONFIG = dict(vocab_size=11, d_in=8, num_centers=4, d_model=8, d_hid=8, heads=4, blocks=1,
                   dropout_p=0.0, strategy="GATE", init_range=0.5, dtype="float64")


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    worst_name: str
    worst_error: float
    num_scalars: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst_error < 1e-6

    def to_dict(self) -> dict:
        return asdict(self)


def gradcheck(model_config: ModelConfig | None = None, seed: int = 0, h: float = 1e-5,
              num_frames: int = 3, caption_len: int = 5) -> GradcheckReport:
    """Compare ``backward`` against central differences on one synthetic example.

    Runs with the dictionary trainable so the centers are covered too.
    """
    cfg = model_config or ModelConfig(**TINY_CONFIG)
    if cfg.dtype != "float64":
        raise ConfigError("gradcheck needs double precision")
    if cfg.dropout_p:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "dropout_p": 0.0})
    rng = np.random.default_rng([seed, 99])
    model = VCRN(cfg, seed=seed, fixed_dictionary=False)
    features = rng.normal(size=(1, num_frames, cfg.d_in))
    words = rng.integers(4, cfg.vocab_size, size=caption_len)
    tokens = np.array([[1, *words, 2]])
    started = time.perf_counter()
    model.store.zero_grad()
    nx.backward(model.loss(features, tokens))
    numeric = nx.finite_difference_grad(lambda: float(model.loss(features, tokens).values), model.store, h)
    errors = {name: nx.relative_error(t.grad, numeric[name]) for name, t in model.store.trainable()}
    worst = max(errors, key=errors.get)
    return GradcheckReport(errors, worst, errors[worst], model.store.num_scalars(), time.perf_counter() - started)
