"""Videos, captions, vocabulary, feature files and the synthetic corpus."""

from __future__ import annotations

import struct
import unicodedata
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DimensionError,
    ParseError,
    TruncatedPayloadError,
    VersionMismatchError,
)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = (PAD, BOS, EOS, UNK)

DEFAULT_MAX_LEN = 26

FEATURE_MAGIC = b"VCRNFEAT"
FORMAT_VERSION = 1


@dataclass
class Video:
    id: str
    features: np.ndarray  # (L, d_a + d_m), appearance columns first
    d_a: int
    d_m: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DimensionError(f"video {self.id!r}: features must be a non-empty L x d matrix")
        if self.features.shape[1] != self.d_a + self.d_m:
            raise DimensionError(
                f"video {self.id!r}: {self.features.shape[1]} columns but d_a + d_m = {self.d_a + self.d_m}"
            )
        if not np.isfinite(self.features).all():
            raise DimensionError(f"video {self.id!r}: non-finite feature values")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.d_a + self.d_m

    @property
    def appearance(self) -> np.ndarray:
        return self.features[:, : self.d_a]

    @property
    def motion(self) -> np.ndarray:
        return self.features[:, self.d_a :]


@dataclass
class Caption:
    video_id: str
    token_ids: list[int]

    def __post_init__(self):
        ids = self.token_ids
        if len(ids) < 2 or ids[0] != BOS_ID or ids[-1] != EOS_ID:
            raise ValueError("caption must start with bos and end with eos")
        interior = ids[1:-1]
        if BOS_ID in interior or EOS_ID in interior or PAD_ID in interior:
            raise ValueError("caption interior may not contain bos, eos or pad")


# ---------------------------------------------------------------------------
# text


def _strip_punctuation(text: str) -> str:
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def tokenize_caption(raw: str, max_len: int = DEFAULT_MAX_LEN) -> list[str]:
    """Lower-case, drop punctuation, split on whitespace, truncate, wrap in bos/eos."""
    words = _strip_punctuation(raw).lower().split()
    return [BOS, *words[:max_len], EOS]


class Vocabulary:
    """Token/id mapping; ids 0..3 are pad, bos, eos, unk."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for token in tokens:
            if token in self.stoi:
                if token in RESERVED:
                    continue
                raise ValueError(f"duplicate vocabulary token {token!r}")
            self.stoi[token] = len(self.itos)
            self.itos.append(token)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))

    def words(self) -> list[str]:
        return self.itos[len(RESERVED) :]


def build_vocabulary(captions: Iterable[Sequence[str]], min_occurrences: int = 2) -> Vocabulary:
    """Keep words seen strictly more than ``min_occurrences`` times.

    Order: descending count, then alphabetical.
    """
    counts: Counter[str] = Counter()
    for tokens in captions:
        counts.update(t for t in tokens if t not in RESERVED)
    kept = sorted((t for t, c in counts.items() if c > min_occurrences), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def encode_caption(video_id: str, raw: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> Caption:
    return Caption(video_id, vocab.encode(tokenize_caption(raw, max_len)))


# ---------------------------------------------------------------------------
# feature files


def _need(buf: bytes, offset: int, n: int, what: str) -> None:
    if offset + n > len(buf):
        raise TruncatedPayloadError(f"truncated {what}: need {n} bytes at offset {offset}, file has {len(buf)}")


def check_magic_version(buf: bytes, magic: bytes) -> int:
    _need(buf, 0, len(magic), "magic")
    if buf[: len(magic)] != magic:
        raise BadMagicError(f"bad magic {buf[:len(magic)]!r}, expected {magic!r}")
    _need(buf, len(magic), 4, "version")
    (version,) = struct.unpack_from("<I", buf, len(magic))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {FORMAT_VERSION}")
    return len(magic) + 4


def encode_features(video: Video) -> bytes:
    vid = video.id.encode("utf-8")
    header = FEATURE_MAGIC + struct.pack("<II", FORMAT_VERSION, len(vid)) + vid
    header += struct.pack("<III", video.num_frames, video.d_a, video.d_m)
    return header + np.ascontiguousarray(video.features, dtype="<f4").tobytes()


def decode_features(buf: bytes) -> Video:
    off = check_magic_version(buf, FEATURE_MAGIC)
    _need(buf, off, 4, "id length")
    (id_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    _need(buf, off, id_len, "id")
    try:
        vid = buf[off : off + id_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BadMagicError(f"video id is not UTF-8: {exc}") from exc
    off += id_len
    _need(buf, off, 12, "dimensions")
    length, d_a, d_m = struct.unpack_from("<III", buf, off)
    off += 12
    expected = length * (d_a + d_m) * 4
    if len(buf) - off != expected:
        raise TruncatedPayloadError(f"payload is {len(buf) - off} bytes, header promises {expected}")
    values = np.frombuffer(buf, dtype="<f4", count=length * (d_a + d_m), offset=off)
    return Video(vid, values.reshape(length, d_a + d_m).astype(np.float32), d_a, d_m)


def save_features(video: Video, path) -> None:
    Path(path).write_bytes(encode_features(video))


def load_features(path) -> Video:
    return decode_features(Path(path).read_bytes())


def write_captions(records: Iterable[tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for video_id, text in records:
            if "\t" in video_id or "\n" in text or "\t" in text:
                raise ValueError(f"caption record for {video_id!r} contains a tab or newline")
            fh.write(f"{video_id}\t{text}\n")


def read_captions(path) -> list[tuple[str, str]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ParseError(f"{path}:{lineno}: expected video_id<TAB>caption")
            video_id, text = line.split("\t", 1)
            records.append((video_id, text))
    return records


def save_corpus(videos: Sequence[Video], captions: Sequence[tuple[str, str]], directory) -> None:
    """``DIR/features/<id>.feat`` plus ``DIR/captions.tsv``."""
    root = Path(directory)
    (root / "features").mkdir(parents=True, exist_ok=True)
    for v in videos:
        save_features(v, root / "features" / f"{v.id}.feat")
    write_captions(captions, root / "captions.tsv")


def load_corpus(directory) -> tuple[list[Video], list[tuple[str, str]]]:
    root = Path(directory)
    feature_dir = root / "features"
    if not feature_dir.is_dir():
        raise FileNotFoundError(f"no features directory under {root}")
    videos = [load_features(p) for p in sorted(feature_dir.glob("*.feat"))]
    dims = {(v.d_a, v.d_m) for v in videos}
    if len(dims) > 1:
        raise DimensionError(f"inconsistent (d_a, d_m) across corpus: {sorted(dims)}")
    return videos, read_captions(root / "captions.tsv")


# ---------------------------------------------------------------------------
# synthetic corpus

_NOUNS = [
    "dog", "man", "woman", "cat", "car", "horse", "child", "bird", "girl", "boy", "chef", "band",
    "player", "crowd", "train", "boat", "baby", "monkey", "dancer", "team", "rabbit", "panda",
    "singer", "farmer", "robot", "plane", "turtle", "pilot", "tiger", "student", "duck", "elephant",
]
_VERBS = [
    "running", "cooking", "singing", "swimming", "dancing", "jumping", "riding", "playing",
    "talking", "eating", "driving", "walking", "flying", "climbing", "sleeping", "reading",
    "fighting", "laughing", "painting", "skating", "surfing", "drawing", "shouting", "crying",
    "sliding", "rowing", "digging", "knitting", "juggling", "sewing", "typing", "marching",
]
_ADJECTIVES = [
    "small", "young", "happy", "black", "white", "tall", "old", "red", "big", "little", "blue",
    "green", "brown", "busy", "quiet", "loud", "tiny", "fast", "slow", "angry", "calm", "shy",
    "brave", "clever", "funny", "gentle", "proud", "silly", "sleepy", "wild", "yellow", "grey",
]
# paraphrases differ only in function words and order, never in content words
_CLAUSES = (
    "a {adj} {noun} is {verb}",
    "the {adj} {noun} is {verb}",
    "the {noun} is {adj} and {verb}",
)


def _concept_word(pool: Sequence[str], k: int) -> str:
    base = pool[k % len(pool)]
    return base if k < len(pool) else f"{base}{k // len(pool)}"


def concept_words(k: int) -> dict[str, str]:
    """Content words owned by latent concept ``k``; disjoint across concepts."""
    return {
        "noun": _concept_word(_NOUNS, k),
        "verb": _concept_word(_VERBS, k),
        "adj": _concept_word(_ADJECTIVES, k),
    }


FUNCTION_WORDS = frozenset({"a", "the", "is", "and"})


@dataclass
class SyntheticCorpus:
    videos: list[Video]
    captions: list[tuple[str, str]]
    prototypes: np.ndarray  # (K_lat, d)
    concepts: dict[str, tuple[int, ...]] = field(default_factory=dict)
    frame_concepts: dict[str, np.ndarray] = field(default_factory=dict)

    def __iter__(self):
        # (videos, captions) unpacking
        return iter((self.videos, self.captions))


def _draw_prototypes(rng: np.random.Generator, k: int, d: int, scale: float) -> np.ndarray:
    min_sep = 0.5 * scale * np.sqrt(2.0 * d)
    for _ in range(1000):
        protos = rng.normal(0.0, scale, size=(k, d))
        if k == 1:
            return protos
        diff = protos[:, None, :] - protos[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        if dist[np.triu_indices(k, 1)].min() >= min_sep:
            return protos
    raise ConfigError(f"could not draw {k} separated prototypes in {d} dimensions")


def generate_synthetic_corpus(
    seed: int,
    num_videos: int,
    num_latent_concepts: int,
    num_frames: int = DEFAULT_MAX_LEN,
    d_a: int = 32,
    d_m: int = 32,
    noise_sigma: float = 0.5,
    captions_per_video: int = 1,
    two_concept_prob: float = 0.5,
    prototype_scale: float = 1.0,
    id_prefix: str = "vid",
) -> SyntheticCorpus:
    """Planted-concept corpus: frames are noisy copies of concept prototypes.

    Each video carries one or two concepts (the first ``K_lat`` videos carry
    concept ``i`` so every concept occurs).  Captions are clauses built from
    the concept's content words joined by "and", in concept-index order, with
    an independently drawn paraphrase template per clause.
    """
    k_lat = num_latent_concepts
    if d_a + d_m < 2 or d_a < 0 or d_m < 0:
        raise ConfigError(f"feature dimension d_a + d_m = {d_a + d_m} is degenerate")
    if k_lat < 1 or num_videos < k_lat:
        raise ConfigError(f"need 1 <= K_lat <= num_videos, got K_lat={k_lat}, num_videos={num_videos}")
    if num_frames < 1 or captions_per_video < 1:
        raise ConfigError("num_frames and captions_per_video must be positive")
    rng = np.random.default_rng(seed)
    d = d_a + d_m
    prototypes = _draw_prototypes(rng, k_lat, d, prototype_scale)
    width = max(4, len(str(num_videos - 1)))

    videos, captions = [], []
    concepts: dict[str, tuple[int, ...]] = {}
    frame_concepts: dict[str, np.ndarray] = {}
    for i in range(num_videos):
        vid = f"{id_prefix}{i:0{width}d}"
        first = i if i < k_lat else int(rng.integers(k_lat))
        chosen = {first}
        if k_lat > 1 and num_frames > 1 and rng.random() < two_concept_prob:
            other = int(rng.integers(k_lat - 1))
            chosen.add(other if other < first else other + 1)
        owned = tuple(sorted(chosen))
        if len(owned) == 1:
            assign = np.full(num_frames, owned[0])
        else:
            assign = np.array(owned)[rng.integers(2, size=num_frames)]
            # both concepts must be visible
            assign[rng.permutation(num_frames)[:2]] = owned
        frames = prototypes[assign] + rng.normal(0.0, noise_sigma, size=(num_frames, d))
        videos.append(Video(vid, frames.astype(np.float32), d_a, d_m))
        concepts[vid] = owned
        frame_concepts[vid] = assign
        for _ in range(captions_per_video):
            clauses = []
            for k in owned:
                template = _CLAUSES[int(rng.integers(len(_CLAUSES)))]
                clauses.append(template.format(**concept_words(k)))
            captions.append((vid, " and ".join(clauses)))
    return SyntheticCorpus(videos, captions, prototypes, concepts, frame_concepts)


def group_captions(captions: Iterable[tuple[str, str]]) -> dict[str, list[str]]:
    grouped: dict[str, list[str]] = {}
    for vid, text in captions:
        grouped.setdefault(vid, []).append(text)
    return grouped
