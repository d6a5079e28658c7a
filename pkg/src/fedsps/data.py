"""Datasets, LIBSVM text ingestion, synthetic generators and client partitioning."""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from fedsps import rng as rngmod
from fedsps.errors import InsufficientData, ParseError, PartitionInfeasible

# Below this feature dimension the problems work on a dense copy.
DENSE_MAX_DIM = 1024


@dataclass(eq=False)
class Dataset:
    """``features`` is an (m, d) CSR matrix; ``labels`` are class ids in [0, K).

    ``label_values`` keeps the original label of each class id (sorted), and
    ``targets`` carries real-valued regression responses when present.
    """

    features: sp.csr_matrix
    labels: np.ndarray
    n_features: int
    n_classes: int
    label_values: tuple = ()
    targets: np.ndarray | None = None
    _dense: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.features = sp.csr_matrix(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        m = self.features.shape[0]
        if m < 1:
            raise ValueError("dataset needs at least one sample")
        if self.labels.shape != (m,):
            raise ValueError(f"expected {m} labels, got shape {self.labels.shape}")
        if self.features.shape[1] != self.n_features:
            raise ValueError("feature matrix width does not match n_features")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels outside [0, n_classes)")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape != (m,):
                raise ValueError("targets must have one entry per sample")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def dense(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self.features.toarray()
        return self._dense

    def matrix(self):
        """Dense array when the dimension allows it, CSR otherwise."""
        return self.dense() if self.n_features < DENSE_MAX_DIM else self.features

    def same_as(self, other: Dataset) -> bool:
        a, b = self.features, other.features
        return (
            self.n_features == other.n_features
            and self.n_classes == other.n_classes
            and tuple(self.label_values) == tuple(other.label_values)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(a.indptr, b.indptr)
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.data, b.data)
        )


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    indices: np.ndarray
    rng_seed: int

    @property
    def size(self) -> int:
        return len(self.indices)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


def parse_libsvm(source) -> Dataset:
    """Parse LIBSVM/svmlight text: ``label idx:val idx:val ...``.

    ``source`` is a string, a path-like object or a text stream. Indices are
    1-based and strictly increasing within a line. Class ids follow the sorted
    order of the distinct original labels.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    elif isinstance(source, os.PathLike):
        with open(source, encoding="utf-8") as fh:
            return parse_libsvm(fh)

    raw_labels = []
    indptr = [0]
    indices = []
    values = []
    max_index = 0
    for lineno, line in enumerate(source, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise ParseError(f"bad label {tokens[0]!r}", lineno) from None
        if not math.isfinite(label):
            raise ParseError(f"non-finite label {tokens[0]!r}", lineno)
        prev = 0
        for tok in tokens[1:]:
            idx_text, sep, val_text = tok.partition(":")
            if not sep:
                raise ParseError(f"expected index:value, got {tok!r}", lineno)
            try:
                idx = int(idx_text)
                val = float(val_text)
            except ValueError:
                raise ParseError(f"malformed token {tok!r}", lineno) from None
            if idx < 1:
                raise ParseError(f"index {idx} is not 1-based", lineno)
            if idx <= prev:
                raise ParseError(f"index {idx} does not increase (previous {prev})", lineno)
            if not math.isfinite(val):
                raise ParseError(f"non-finite value in {tok!r}", lineno)
            prev = idx
            indices.append(idx - 1)
            values.append(val)
        max_index = max(max_index, prev)
        raw_labels.append(label)
        indptr.append(len(indices))

    if not raw_labels:
        raise ParseError("no samples in input")
    classes = sorted(set(raw_labels))
    lookup = {v: k for k, v in enumerate(classes)}
    d = max(max_index, 1)
    features = sp.csr_matrix(
        (np.asarray(values, dtype=np.float64), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
        shape=(len(raw_labels), d),
    )
    return Dataset(
        features=features,
        labels=np.array([lookup[v] for v in raw_labels]),
        n_features=d,
        n_classes=len(classes),
        label_values=tuple(classes),
    )


def load_libsvm(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_libsvm(fh)


def _format_number(v: float) -> str:
    if float(v).is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def format_libsvm(dataset: Dataset) -> str:
    """Inverse of :func:`parse_libsvm` (exact for every stored entry)."""
    X = dataset.features
    out = []
    for i in range(dataset.n_samples):
        lo, hi = X.indptr[i], X.indptr[i + 1]
        label = dataset.label_values[dataset.labels[i]] if dataset.label_values else dataset.labels[i]
        parts = [_format_number(label)]
        parts += [f"{j + 1}:{float(v)!r}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi])]
        out.append(" ".join(parts))
    return "\n".join(out) + "\n"


def _shards(index_lists, master_seed):
    return [
        ClientShard(i, np.asarray(idx, dtype=np.int64), rngmod.derive_seed(master_seed, rngmod.CLIENT, i))
        for i, idx in enumerate(index_lists)
    ]


def partition_iid(dataset: Dataset, n: int, seed: int) -> list[ClientShard]:
    """Shuffle, then split into ``n`` shards whose sizes differ by at most one."""
    m = dataset.n_samples
    if n < 1:
        raise ValueError("need at least one client")
    if n > m:
        raise InsufficientData(f"{n} clients but only {m} samples")
    perm = rngmod.stream(seed, rngmod.PARTITION).permutation(m)
    return _shards([np.sort(part) for part in np.array_split(perm, n)], seed)


def partition_noniid_two_class(dataset: Dataset, n: int, seed: int) -> list[ClientShard]:
    """Give every client samples from exactly two classes, all shards equal in size.

    Slot ``j`` (of ``2n``) belongs to class ``j mod K``; client ``i`` receives
    slots ``2i`` and ``2i+1``, i.e. classes ``(2i mod K, (2i+1) mod K)``. Each
    class is shuffled and cut into equal pieces, one per slot; samples left
    over after balancing are dropped from the end of each class.
    """
    K = dataset.n_classes
    if n < 1:
        raise ValueError("need at least one client")
    if K < 2:
        raise PartitionInfeasible(f"two-class split needs at least 2 classes, dataset has {K}")
    slot_class = np.arange(2 * n) % K
    slots_per_class = np.bincount(slot_class, minlength=K)
    counts = np.bincount(dataset.labels, minlength=K)
    used = slots_per_class > 0
    per_slot = int((counts[used] // slots_per_class[used]).min())
    if per_slot < 1:
        short = [int(k) for k in np.flatnonzero(used & (counts < slots_per_class))]
        raise PartitionInfeasible(
            f"{n} clients need {2 * n} class slots; classes {short} have counts "
            f"{[int(counts[k]) for k in short]} for {[int(slots_per_class[k]) for k in short]} slots"
        )

    gen = rngmod.stream(seed, rngmod.PARTITION)
    pieces = {}
    for k in range(K):
        members = np.flatnonzero(dataset.labels == k)
        members = members[gen.permutation(len(members))]
        s = slots_per_class[k]
        if s:
            pieces[k] = list(members[: s * per_slot].reshape(s, per_slot))
    index_lists = []
    for i in range(n):
        a, b = slot_class[2 * i], slot_class[2 * i + 1]
        index_lists.append(np.sort(np.concatenate([pieces[a].pop(0), pieces[b].pop(0)])))
    return _shards(index_lists, seed)


def shards_from_index_lists(index_lists, seed: int) -> list[ClientShard]:
    return _shards(index_lists, seed)


def synth_regression(
    m: int,
    d: int,
    n_clients: int,
    noise: float = 0.0,
    heterogeneity: float = 0.0,
    seed: int = 0,
    scale: float = 1.0,
    design: str = "gaussian",
    signal: float = 1.0,
    curvature_spread: float = 1.0,
) -> tuple[Dataset, list[ClientShard]]:
    """Least-squares data split contiguously over ``n_clients``.

    Rows are Gaussian with expected squared norm ``scale``, or with
    ``design="orthogonal"`` (needs ``m <= d``) mutually orthogonal with squared
    norm exactly ``scale``, which makes every nonzero curvature equal. Client ``i``
    responds to ``x_true + heterogeneity * u_i`` (``u_i`` a random unit
    vector, ``x_true`` standard normal times ``signal``) plus Gaussian noise
    of standard deviation ``noise``. ``curvature_spread > 1`` rescales client
    ``i``'s squared row norms by ``spread ** (i / (n - 1) - 1/2)``, so client
    curvatures are log-uniform over a range of that ratio. With
    ``noise = heterogeneity = 0`` and ``d > m`` the instance interpolates.
    """
    if m < 1 or d < 1:
        raise ValueError("m and d must be >= 1")
    if n_clients > m:
        raise InsufficientData(f"{n_clients} clients but only {m} samples")
    gen = rngmod.stream(seed, rngmod.SYNTH)
    if design == "gaussian":
        A = gen.standard_normal((m, d)) * math.sqrt(scale / d)
    elif design == "orthogonal":
        if m > d:
            raise ValueError("orthogonal design needs m <= d")
        q, _ = np.linalg.qr(gen.standard_normal((d, m)))
        A = q.T * math.sqrt(scale)
    else:
        raise ValueError(f"unknown design {design!r}")
    x_true = signal * gen.standard_normal(d)
    parts = np.array_split(np.arange(m), n_clients)
    if curvature_spread < 1.0:
        raise ValueError("curvature_spread must be >= 1")
    if curvature_spread > 1.0 and n_clients > 1:
        for i, idx in enumerate(parts):
            A[idx] *= math.sqrt(curvature_spread ** (i / (n_clients - 1) - 0.5))
    b = np.empty(m)
    for idx in parts:
        u = gen.standard_normal(d)
        u /= np.linalg.norm(u)
        b[idx] = A[idx] @ (x_true + heterogeneity * u)
    b += noise * gen.standard_normal(m)
    ds = Dataset(
        features=sp.csr_matrix(A),
        labels=np.zeros(m, dtype=np.int64),
        n_features=d,
        n_classes=1,
        label_values=(0.0,),
        targets=b,
    )
    return ds, _shards(parts, seed)


def synth_classification(
    m: int, d: int, n_classes: int = 2, seed: int = 0, separation: float = 1.0, density: float = 1.0
) -> Dataset:
    """Gaussian class blobs; ``density < 1`` zeroes features at random (sparse rows)."""
    gen = rngmod.stream(seed, rngmod.SYNTH)
    centers = gen.standard_normal((n_classes, d)) * separation / math.sqrt(d)
    labels = np.arange(m) % n_classes
    gen.shuffle(labels)
    X = centers[labels] + gen.standard_normal((m, d)) / math.sqrt(d)
    if density < 1.0:
        X *= gen.random((m, d)) < density
    values = tuple(float(k) for k in range(n_classes)) if n_classes > 2 else (-1.0, 1.0)
    return Dataset(
        features=sp.csr_matrix(X),
        labels=labels,
        n_features=d,
        n_classes=n_classes,
        label_values=values,
    )


def synth_binary_libsvm(m: int = 8124, d: int = 112, seed: int = 0, active: int = 22) -> Dataset:
    """Sparse one-hot style binary data shaped like the LIBSVM ``mushrooms`` set.

    Each row switches on ``active`` of ``d`` binary features; the label is a
    noisy linear threshold of the active features.
    """
    gen = rngmod.stream(seed, rngmod.SYNTH)
    w = gen.standard_normal(d)
    rows = np.sort(np.stack([gen.choice(d, size=active, replace=False) for _ in range(m)]), axis=1)
    score = w[rows].sum(axis=1) + 0.5 * gen.standard_normal(m)
    labels = (score > np.median(score)).astype(np.int64)
    X = sp.csr_matrix(
        (np.ones(m * active), rows.ravel(), np.arange(0, m * active + 1, active)), shape=(m, d)
    )
    return Dataset(features=X, labels=labels, n_features=d, n_classes=2, label_values=(-1.0, 1.0))
