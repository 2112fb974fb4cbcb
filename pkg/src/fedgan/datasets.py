"""Toy mixtures, IDX ingestion, subsampling and non-iid client partitions."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CountMismatchError, TruncatedPayloadError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
DEFAULT_BATCH = 64


@dataclass(frozen=True)
class MixtureSpec:
    k: int = 8
    ring_radius: float = 0.8
    sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("a mixture needs at least one mode")
        if self.ring_radius <= 0 or self.sigma < 0:
            raise ValueError("ring radius must be positive and sigma nonnegative")

    def centers(self) -> np.ndarray:
        angles = 2.0 * np.pi * np.arange(self.k) / self.k
        return self.ring_radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


@dataclass
class LabeledSet:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels must have the same length")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.points[idx], self.labels[idx])


@dataclass
class Partition:
    client_shards: list[np.ndarray]
    fractions: list[float]
    skew_alpha: float | None = None

    @property
    def n_clients(self) -> int:
        return len(self.client_shards)


@dataclass
class IdxSet:
    images: np.ndarray  # (n, rows, cols) uint8
    labels: np.ndarray  # (n,) uint8

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:])


def make_ring_mixture(spec: MixtureSpec, n: int) -> LabeledSet:
    """Draw ``n`` points from an isotropic Gaussian mixture on a ring.

    Labels cycle through the modes so counts differ by at most one.
    """
    if n < spec.k:
        raise ValueError(f"need at least k={spec.k} samples, got {n}")
    rng = np.random.default_rng(spec.seed)
    labels = np.arange(n) % spec.k
    points = spec.centers()[labels] + spec.sigma * rng.standard_normal((n, 2))
    return LabeledSet(points, labels)


def write_mixture_csv(data: LabeledSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "label"])
        for (x, y), lab in zip(data.points, data.labels):
            w.writerow([repr(float(x)), repr(float(y)), int(lab)])


def read_mixture_csv(path) -> LabeledSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    pts = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)
    return LabeledSet(pts, np.array([int(r["label"]) for r in rows], dtype=np.int64))


def subsample_training_set(d: LabeledSet, t_size: int, seed) -> LabeledSet:
    """Uniform draw of ``t_size`` rows without replacement."""
    if t_size > len(d):
        raise ValueError(f"cannot draw {t_size} samples from a set of {len(d)}")
    if t_size < 1:
        raise ValueError("training set size must be positive")
    rng = np.random.default_rng(seed)
    return d.subset(rng.choice(len(d), size=t_size, replace=False))


def _largest_remainder(total: int, shares: np.ndarray) -> np.ndarray:
    raw = shares / shares.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def partition_noniid(t: LabeledSet, n_clients: int, mode: str = "label_skew",
                     alpha: float = 0.5, seed=0) -> Partition:
    """Split ``t`` into ``n_clients`` disjoint, nonempty, exhaustive shards.

    ``fractions``: the shuffled index order is cut at ``n_clients - 1`` random
    points, so each client reserves a random fraction of the set.
    ``label_skew``: each client draws label proportions from a symmetric
    Dirichlet(alpha); every label's samples are then dealt to clients in
    proportion to those weights.
    """
    n = len(t)
    if n_clients < 1:
        raise ValueError("need at least one client")
    if n == 0:
        raise ValueError("cannot partition an empty set")
    if n_clients > n:
        raise ValueError(f"{n_clients} clients cannot each get a sample from {n}")
    rng = np.random.default_rng(seed)

    if mode == "fractions":
        order = rng.permutation(n)
        cuts = np.sort(rng.choice(np.arange(1, n), size=n_clients - 1, replace=False))
        shards = [np.sort(s) for s in np.split(order, cuts)]
        return Partition(shards, [len(s) / n for s in shards], None)

    if mode != "label_skew":
        raise ValueError(f"unknown partition mode {mode!r}")
    if alpha <= 0:
        raise ValueError("Dirichlet alpha must be positive")
    classes = np.unique(t.labels)
    props = rng.dirichlet(np.full(len(classes), alpha), size=n_clients)  # (clients, classes)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for j, c in enumerate(classes):
        idx = rng.permutation(np.flatnonzero(t.labels == c))
        weights = props[:, j]
        if weights.sum() <= 0:
            weights = np.ones(n_clients)
        counts = _largest_remainder(len(idx), weights)
        for i, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[i].append(part)
    shards = [np.concatenate(b) if b else np.empty(0, np.int64) for b in buckets]
    # Nonempty repair: move one sample from the currently largest shard.
    for i in range(n_clients):
        if len(shards[i]) == 0:
            donor = int(np.argmax([len(s) for s in shards]))
            shards[i] = shards[donor][-1:]
            shards[donor] = shards[donor][:-1]
    shards = [np.sort(s.astype(np.int64)) for s in shards]
    return Partition(shards, [len(s) / n for s in shards], alpha)


class BatchStream:
    """Endless batches drawn by reshuffled passes over a shard."""

    def __init__(self, n_rows: int, rng: np.random.Generator):
        if n_rows < 1:
            raise ValueError("cannot stream from an empty shard")
        self.n_rows = n_rows
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_indices(self, b: int) -> np.ndarray:
        out = []
        need = b
        while need > 0:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(self.n_rows)
                self._pos = 0
            take = self._order[self._pos:self._pos + need]
            self._pos += len(take)
            need -= len(take)
            out.append(take)
        return np.concatenate(out)


def next_batch(shard: np.ndarray, b: int, stream: BatchStream) -> np.ndarray:
    """Next ``b`` rows of ``shard``; wraps around shards smaller than ``b``."""
    return shard[stream.next_indices(b)]


# --- IDX -----------------------------------------------------------------

def _read_header(buf: bytes, magic: int, ndims: int, what: str):
    need = 4 * (1 + ndims)
    if len(buf) < 4:
        raise TruncatedPayloadError(f"{what} file shorter than its magic number")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise BadMagicError(f"{what} file has magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(buf) < need:
        raise TruncatedPayloadError(f"{what} header truncated")
    return struct.unpack(">" + "I" * ndims, buf[4:need]), need


def parse_idx(image_bytes: bytes, label_bytes: bytes) -> IdxSet:
    (n_img, rows, cols), off_i = _read_header(image_bytes, IDX_IMAGE_MAGIC, 3, "image")
    (n_lab,), off_l = _read_header(label_bytes, IDX_LABEL_MAGIC, 1, "label")
    if n_img != n_lab:
        raise CountMismatchError(f"{n_img} images but {n_lab} labels")
    if len(image_bytes) - off_i < n_img * rows * cols:
        raise TruncatedPayloadError(
            f"image payload has {len(image_bytes) - off_i} bytes, need {n_img * rows * cols}")
    if len(label_bytes) - off_l < n_lab:
        raise TruncatedPayloadError(f"label payload has {len(label_bytes) - off_l} bytes, need {n_lab}")
    images = np.frombuffer(image_bytes, dtype=np.uint8, count=n_img * rows * cols, offset=off_i)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=n_lab, offset=off_l)
    return IdxSet(images.reshape(n_img, rows, cols).copy(), labels.copy())


def serialize_idx(data: IdxSet) -> tuple[bytes, bytes]:
    n, rows, cols = data.images.shape
    img = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols) + data.images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", IDX_LABEL_MAGIC, len(data.labels)) + data.labels.astype(np.uint8).tobytes()
    return img, lab


def load_idx(image_path, label_path) -> IdxSet:
    return parse_idx(Path(image_path).read_bytes(), Path(label_path).read_bytes())


def pool_images(images: np.ndarray, out_side: int = 8) -> np.ndarray:
    """Average-pool square images to ``out_side`` and rescale bytes to [-1, 1].

    28 pixels over 8 cells gives uneven 3- or 4-pixel blocks.
    """
    n, rows, cols = images.shape
    r_edges = np.linspace(0, rows, out_side + 1).round().astype(int)
    c_edges = np.linspace(0, cols, out_side + 1).round().astype(int)
    x = images.astype(np.float64)
    out = np.empty((n, out_side, out_side))
    for i in range(out_side):
        for j in range(out_side):
            block = x[:, r_edges[i]:r_edges[i + 1], c_edges[j]:c_edges[j + 1]]
            out[:, i, j] = block.mean(axis=(1, 2))
    return (out.reshape(n, -1) / 127.5 - 1.0)


def idx_to_labeled_set(data: IdxSet, out_side: int = 8) -> LabeledSet:
    return LabeledSet(pool_images(data.images, out_side), data.labels.astype(np.int64))
