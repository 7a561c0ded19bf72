"""Video dictionary: K-means centers over every frame of a corpus.

The fitted centers are a standalone artifact (``save_dictionary`` /
``load_dictionary``) that any model can attend into.
"""

from __future__ import annotations

import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import FORMAT_VERSION, Video, check_magic_version
from .errors import ConfigError, DimensionError, NumericError, TruncatedPayloadError

DICT_MAGIC = b"VCRNDICT"


@dataclass
class VideoDictionary:
    centers: np.ndarray  # (M, d); values are exactly representable in float32
    seed: int = 0
    iterations: int = 0
    objective: float = float("nan")
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise DimensionError(f"dictionary centers must be M x d with M >= 1, got {self.centers.shape}")
        if not np.isfinite(self.centers).all():
            raise DimensionError("dictionary centers must be finite")

    @property
    def M(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]


def pool_frames(videos: Sequence[Video]) -> np.ndarray:
    """Row-stack every frame of every video, in corpus order."""
    if not videos:
        raise ConfigError("cannot pool an empty corpus")
    dims = {v.features.shape[1] for v in videos}
    if len(dims) != 1:
        raise ConfigError(f"videos disagree on feature dimension: {sorted(dims)}")
    return np.concatenate([v.features for v in videos], axis=0).astype(np.float64)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # exact differences; the expanded |x|^2 - 2xc + |c|^2 form loses ties
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nmd,nmd->nm", diff, diff)


def _assign(x: np.ndarray, centers: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    labels = np.empty(len(x), dtype=np.int64)
    dists = np.empty(len(x))
    for start in range(0, len(x), chunk):
        d2 = _sq_dists(x[start : start + chunk], centers)
        idx = d2.argmin(axis=1)  # first minimum: lowest index wins ties
        labels[start : start + chunk] = idx
        dists[start : start + chunk] = d2[np.arange(len(idx)), idx]
    return labels, dists


def kmeans_plus_plus(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((m, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, m):
        total = closest.sum()
        if total <= 0.0:
            # every point already coincides with a center
            idx = int(rng.integers(len(x)))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, len(x) - 1)
        centers[j] = x[idx]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans_fit(
    pool: np.ndarray,
    M: int,
    max_iter: int = 100,
    tol: float = 1e-4,
    seed: int = 0,
    init_centers: np.ndarray | None = None,
    normalize: bool = False,
) -> VideoDictionary:
    """Lloyd's algorithm with k-means++ seeding.

    Stops once the largest center shift drops below ``tol`` or the assignment
    is stable.  A cluster that loses all its points is re-seeded at the pool
    point currently farthest from its own center.  ``init_centers`` replaces
    the seeding step (used to make the result independent of row order).
    Final centers are rounded to float32 so the saved file is lossless.
    """
    x = np.asarray(pool, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"pool must be a matrix, got shape {x.shape}")
    if M < 1 or M > len(x):
        raise ConfigError(f"need 1 <= M <= pool rows ({len(x)}), got M={M}")
    if normalize:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    rng = np.random.default_rng(seed)
    if init_centers is not None:
        centers = np.array(init_centers, dtype=np.float64)
        if centers.shape != (M, x.shape[1]):
            raise DimensionError(f"init_centers shape {centers.shape}, expected {(M, x.shape[1])}")
    else:
        centers = kmeans_plus_plus(x, M, rng)

    labels, dists = _assign(x, centers)
    history = [float(dists.sum())]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=M)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for j in np.flatnonzero(~filled):
            far = int(np.argmax(dists))
            new[j] = x[far]
            labels[far] = j
            dists[far] = 0.0
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        new_labels, dists = _assign(x, centers)
        stable = np.array_equal(new_labels, labels)
        labels = new_labels
        objective = float(dists.sum())
        # Lloyd steps never raise the objective; anything beyond roundoff is a bug
        if objective > history[-1] * (1 + 1e-9) + 1e-12:
            raise NumericError(f"k-means objective rose from {history[-1]!r} to {objective!r} at iteration {iterations}")
        history.append(objective)
        if shift < tol or stable:
            break

    centers = centers.astype(np.float32).astype(np.float64)
    _, dists = _assign(x, centers)
    return VideoDictionary(centers, seed=seed, iterations=iterations, objective=float(dists.sum()), history=history)


def nearest_center(x: np.ndarray, dictionary: VideoDictionary) -> int:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dictionary.d,):
        raise DimensionError(f"query has shape {x.shape}, dictionary dim is {dictionary.d}")
    d2 = ((dictionary.centers - x) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def assign_frames(frames: np.ndarray, dictionary: VideoDictionary) -> np.ndarray:
    return _assign(np.asarray(frames, dtype=np.float64), dictionary.centers)[0]


def encode_dictionary(dictionary: VideoDictionary) -> bytes:
    header = DICT_MAGIC + struct.pack("<III", FORMAT_VERSION, dictionary.M, dictionary.d)
    header += struct.pack("<Qd", dictionary.seed, dictionary.objective)
    return header + np.ascontiguousarray(dictionary.centers, dtype="<f4").tobytes()


def decode_dictionary(buf: bytes) -> VideoDictionary:
    off = check_magic_version(buf, DICT_MAGIC)
    if len(buf) < off + 24:
        raise TruncatedPayloadError(f"dictionary header truncated at {len(buf)} bytes")
    m, d = struct.unpack_from("<II", buf, off)
    seed, objective = struct.unpack_from("<Qd", buf, off + 8)
    off += 24
    if len(buf) - off != m * d * 4:
        raise TruncatedPayloadError(f"payload is {len(buf) - off} bytes, header promises {m * d * 4}")
    centers = np.frombuffer(buf, dtype="<f4", count=m * d, offset=off).reshape(m, d)
    return VideoDictionary(centers.astype(np.float64), seed=seed, objective=objective)


def save_dictionary(dictionary: VideoDictionary, path) -> None:
    Path(path).write_bytes(encode_dictionary(dictionary))


def load_dictionary(path) -> VideoDictionary:
    return decode_dictionary(Path(path).read_bytes())
