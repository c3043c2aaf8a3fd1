"""Datasets: IDX ingestion, synthetic generators and Dirichlet partitioning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError
from .model import ModelSpec, _softmax
from .rng import Purpose, substream, SERVER

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049

MAX_REDRAWS = 100


@dataclass
class ClientDataset:
    client_id: int
    X: np.ndarray
    y: np.ndarray
    weight: float = 0.0
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class PartitionSpec:
    N: int
    beta: float
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")


def assign_weights(clients: Sequence[ClientDataset]) -> list[float]:
    """Set ``p_i = |D_i| / |D|`` on every client and return the weights."""
    total = sum(len(c) for c in clients)
    if total == 0:
        raise ValueError("cannot weight clients that hold no data")
    for c in clients:
        c.weight = float(Fraction(len(c), total))
    return [c.weight for c in clients]


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_header(buf: bytes, magic: int, ndims: int, what: str):
    need = 4 + 4 * ndims
    if len(buf) < 4:
        raise FormatError(f"{what}: file too short for magic number", len(buf))
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise FormatError(f"{what}: bad magic number {got}, expected {magic}", 0)
    if len(buf) < need:
        raise FormatError(f"{what}: truncated header", len(buf))
    dims = struct.unpack_from(">" + "I" * ndims, buf, 4)
    return dims, need


def parse_idx_images(buf: bytes) -> np.ndarray:
    (n, rows, cols), off = _parse_header(buf, IMAGES_MAGIC, 3, "images")
    size = n * rows * cols
    if len(buf) - off < size:
        raise FormatError(f"images: truncated pixel data, need {size} bytes", len(buf))
    pixels = np.frombuffer(buf, dtype=np.uint8, count=size, offset=off)
    return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0


def parse_idx_labels(buf: bytes) -> np.ndarray:
    (n,), off = _parse_header(buf, LABELS_MAGIC, 1, "labels")
    if len(buf) - off < n:
        raise FormatError(f"labels: truncated label data, need {n} bytes", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).astype(np.int64)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Load an IDX image/label pair as ``(X, y)`` with pixels scaled to [0, 1].

    Gzipped files (``.gz`` suffix) are decompressed transparently.
    """
    X = parse_idx_images(_read_bytes(images_path))
    y = parse_idx_labels(_read_bytes(labels_path))
    if len(X) != len(y):
        # offset of the item count in the label header
        raise FormatError(f"{len(X)} images but {len(y)} labels", 4)
    return X, y


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

def _dirichlet(rng: np.random.Generator, beta: float, n: int) -> np.ndarray:
    g = rng.gamma(beta, 1.0, size=n)
    s = g.sum()
    if s <= 0:
        # every draw underflowed; put the whole class on one client
        g = np.zeros(n)
        g[rng.integers(n)] = 1.0
        s = 1.0
    return g / s


def _split_class(idx: np.ndarray, props: np.ndarray) -> list[np.ndarray]:
    cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
    return np.split(idx, cuts)


def dirichlet_partition(labels, spec: PartitionSpec) -> list[np.ndarray]:
    """Split example indices across ``spec.N`` clients with Dir(beta) label skew.

    Each class's indices are shuffled and cut according to proportions drawn
    from Dirichlet(beta, ..., beta). If a client ends up empty, class
    proportions are re-drawn one class at a time (up to 100 draws); any client
    still empty afterwards receives one example from the largest client.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    N = spec.N
    if N > len(labels):
        raise ValueError(f"cannot split {len(labels)} examples across {N} clients")
    if N == 1:
        return [np.arange(len(labels))]
    rng = substream(spec.seed, SERVER, 0, Purpose.PARTITION)
    classes = np.unique(labels)
    by_class = []
    for k in classes:
        idx = np.flatnonzero(labels == k)
        by_class.append(rng.permutation(idx))
    shards = [_split_class(idx, _dirichlet(rng, spec.beta, N)) for idx in by_class]

    def sizes():
        return np.array([sum(len(s[i]) for s in shards) for i in range(N)])

    for attempt in range(MAX_REDRAWS):
        if sizes().min() > 0:
            break
        c = attempt % len(classes)
        shards[c] = _split_class(by_class[c], _dirichlet(rng, spec.beta, N))

    parts = [np.sort(np.concatenate([s[i] for s in shards])) for i in range(N)]
    for i in range(N):
        if len(parts[i]) == 0:
            donor = int(np.argmax([len(p) for p in parts]))
            parts[i] = parts[donor][-1:]
            parts[donor] = parts[donor][:-1]
    return parts


def class_histograms(labels, parts: Sequence[np.ndarray], classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    K = classes if classes is not None else int(labels.max()) + 1
    return np.array([np.bincount(labels[p], minlength=K) for p in parts])


def skew_statistic(labels, parts: Sequence[np.ndarray]) -> float:
    """Mean over classes of the largest share of that class held by one client."""
    H = class_histograms(labels, parts).astype(float)
    totals = H.sum(axis=0)
    present = totals > 0
    return float(np.mean(H[:, present].max(axis=0) / totals[present]))


def make_clients(X, y, parts: Sequence[np.ndarray]) -> list[ClientDataset]:
    clients = [ClientDataset(i, X[p], y[p], indices=np.asarray(p)) for i, p in enumerate(parts)]
    assign_weights(clients)
    return clients


def holdout_split(clients: Sequence[ClientDataset], fraction: float, seed: int):
    """Split every client into (train, eval) shards; weights follow train sizes."""
    train, evals = [], []
    for c in clients:
        rng = substream(seed, c.client_id, 0, Purpose.HOLDOUT)
        perm = rng.permutation(len(c))
        n_eval = int(round(fraction * len(c)))
        if len(c) > 1:
            n_eval = min(max(n_eval, 1 if fraction > 0 else 0), len(c) - 1)
        else:
            n_eval = 0
        e, t = perm[:n_eval], perm[n_eval:]
        train.append(ClientDataset(c.client_id, c.X[t], c.y[t], indices=c.indices[t] if len(c.indices) else t))
        evals.append(ClientDataset(c.client_id, c.X[e], c.y[e], indices=c.indices[e] if len(c.indices) else e))
    assign_weights(train)
    for tr, ev in zip(train, evals):
        ev.weight = tr.weight
    return train, evals


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _sample_labels(rng, X, W, b):
    P = _softmax(X @ W.T + b)
    u = rng.random(len(X))[:, None]
    return np.minimum((u > np.cumsum(P, axis=1)).sum(axis=1), P.shape[1] - 1)


def synthetic_classification(n: int, dim: int, classes: int, seed: int,
                             scale: float = 4.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One pooled dataset drawn from a single random logistic ground truth.

    Features are uniform on [0, 1]. Returns ``(X, y, truth)`` where ``truth``
    is the flat ground-truth parameter vector in model layout.
    """
    rng = substream(seed, SERVER, 0, Purpose.DATA)
    W = rng.standard_normal((classes, dim)) * scale
    b = -W @ np.full(dim, 0.5)
    X = rng.random((n, dim))
    return X, _sample_labels(rng, X, W, b), np.concatenate([W.ravel(), b])


def synthetic_convex(N: int, per_client: int, dim: int, heterogeneity: float, seed: int,
                     classes: int = 2, scale: float = 2.0):
    """Clients whose labels follow client-specific logistic ground truths.

    Client ``i`` uses ``W_i = W_0 + heterogeneity * E_i`` with ``E_i`` standard
    normal, so ``heterogeneity=0`` is the IID limit. Returns ``(clients,
    truths)`` with ``truths[i]`` the flat ground-truth vector of client ``i``.
    """
    if N < 1 or per_client < 1 or dim < 1:
        raise ValueError("N, per_client and dim must be positive")
    root = substream(seed, SERVER, 0, Purpose.DATA)
    W0 = root.standard_normal((classes, dim)) * scale
    clients, truths = [], []
    for i in range(N):
        rng = substream(seed, i, 0, Purpose.DATA)
        Wi = W0 + heterogeneity * scale * rng.standard_normal((classes, dim))
        bi = -Wi @ np.full(dim, 0.5)
        X = rng.random((per_client, dim))
        y = _sample_labels(rng, X, Wi, bi)
        clients.append(ClientDataset(i, X, y, indices=np.arange(i * per_client, (i + 1) * per_client)))
        truths.append(np.concatenate([Wi.ravel(), bi]))
    assign_weights(clients)
    return clients, truths


def heterogeneity_gap(spec: ModelSpec, clients: Sequence[ClientDataset]) -> dict:
    """Fit global and per-client optima; return F*, each F_i*, and Gamma."""
    from .model import fit_optimum

    X = np.concatenate([c.X for c in clients])
    y = np.concatenate([c.y for c in clients])
    # sample-weighted pooling equals sum_i p_i F_i when p_i = |D_i|/|D|
    w_star, f_star = fit_optimum(spec, X, y)
    local = [fit_optimum(spec, c.X, c.y, w0=w_star)[1] for c in clients]
    weights = [c.weight for c in clients]
    gamma = f_star - float(np.dot(weights, local))
    return {"w_star": w_star, "F_star": f_star, "F_i_star": local, "Gamma": gamma}
