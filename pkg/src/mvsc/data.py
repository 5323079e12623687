"""Multi-view datasets, rescaling, synthetic blobs and pairwise constraints.

File formats
------------
View matrix:  first line ``n D``, then ``n`` lines of ``D`` whitespace-separated
              reals printed with ``repr`` so they round-trip exactly.
Labels:       one integer per line.
Constraints:  one ``i k c`` line per unordered pair, ``c`` in {-1, 1}.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AlignmentError, BudgetError, ParseError, ValidationError


@dataclass
class MultiViewDataset:
    views: list
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.views = [np.asarray(x, dtype=np.float64) for x in self.views]
        if not self.views:
            raise AlignmentError("a dataset needs at least one view")
        rows = {x.shape[0] for x in self.views}
        if any(x.ndim != 2 for x in self.views):
            raise AlignmentError("every view must be a 2-D matrix")
        if len(rows) != 1:
            raise AlignmentError(f"views disagree on sample count: {[x.shape[0] for x in self.views]}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise AlignmentError(f"{self.labels.shape[0]} labels for {self.n} samples")
            if self.labels.size and self.labels.min() < 0:
                raise ValidationError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> list[int]:
        return [x.shape[1] for x in self.views]


# ---------------------------------------------------------------- view files


def format_matrix(x) -> str:
    x = np.asarray(x, dtype=np.float64)
    lines = [f"{x.shape[0]} {x.shape[1]}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in x)
    return "\n".join(lines) + "\n"


def save_view(x, path):
    Path(path).write_text(format_matrix(x))


def load_view(path) -> np.ndarray:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc}", path) from exc
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file, expected header 'n D'", path, 1)
    header = lines[0].split()
    try:
        n, d = (int(tok) for tok in header)
    except ValueError:
        raise ParseError(f"bad header {lines[0]!r}, expected 'n D'", path, 1) from None
    if n < 0 or d < 0:
        raise ParseError("negative dimension in header", path, 1)
    body = lines[1:]
    # tolerate trailing blank lines only
    while body and not body[-1].strip():
        body.pop()
    if len(body) != n:
        raise ParseError(f"header declares {n} rows but file has {len(body)}", path, len(lines))
    out = np.empty((n, d), dtype=np.float64)
    for r, line in enumerate(body):
        toks = line.split()
        if len(toks) != d:
            raise ParseError(f"expected {d} values, found {len(toks)}", path, r + 2)
        try:
            out[r] = [float(t) for t in toks]
        except ValueError as exc:
            raise ParseError(str(exc), path, r + 2) from None
    return out


def save_labels(labels, path):
    labels = np.asarray(labels, dtype=np.int64)
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def load_labels(path) -> np.ndarray:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise ParseError(f"expected an integer label, got {line!r}", path, lineno) from None
    return np.asarray(out, dtype=np.int64)


def load_views(paths, labels_path=None) -> MultiViewDataset:
    views = [load_view(p) for p in paths]
    counts = [x.shape[0] for x in views]
    if len(set(counts)) > 1:
        raise AlignmentError(f"view files have different row counts: {counts}")
    labels = load_labels(labels_path) if labels_path is not None else None
    return MultiViewDataset(views, labels)


def save_views(dataset: MultiViewDataset, directory, prefix="view") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for v, x in enumerate(dataset.views):
        p = directory / f"{prefix}_{v}.txt"
        save_view(x, p)
        paths.append(p)
    return paths


# ------------------------------------------------------------- preprocessing


def rescale_view(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    if lo == -1.0 and hi == 1.0:
        # already in range; the map is the identity, skip the rounding it would add
        return x.copy()
    out = 2.0 * (x - lo) / (hi - lo) - 1.0
    # pin the extremes exactly; the affine map can land 1 ulp off
    out[x == lo] = -1.0
    out[x == hi] = 1.0
    return out


def rescale(dataset: MultiViewDataset) -> MultiViewDataset:
    """Map each view's global min/max onto [-1, 1]. Constant views become zeros."""
    return MultiViewDataset([rescale_view(x) for x in dataset.views], dataset.labels)


def make_blobs(n, n_views, k, dims=None, separation=1.0, noise=1.5, seed=0) -> MultiViewDataset:
    """Gaussian blobs sharing one cluster membership across all views.

    Each view gets its own random cluster means (standard normal scaled by
    ``separation``) and isotropic noise with standard deviation ``noise``.
    """
    if not n >= k >= 1:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    if dims is None:
        dims = [20 + 10 * v for v in range(n_views)]
    dims = list(dims)
    if len(dims) != n_views:
        raise ValueError(f"{len(dims)} dims given for {n_views} views")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k)
    views = []
    for d in dims:
        means = separation * rng.standard_normal((k, d))
        views.append(means[labels] + noise * rng.standard_normal((n, d)))
    return MultiViewDataset(views, labels)


# --------------------------------------------------------------- constraints


@dataclass
class ConstraintSet:
    """Sparse symmetric must-link (+1) / cannot-link (-1) pairs.

    Each unordered pair is stored once; it stands for both
    entries ``C[i, k]`` and ``C[k, i]``.
    """

    i: np.ndarray
    k: np.ndarray
    c: np.ndarray
    n: int
    beta: float | None = None

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64).reshape(-1)
        self.k = np.asarray(self.k, dtype=np.int64).reshape(-1)
        self.c = np.asarray(self.c, dtype=np.int64).reshape(-1)
        self.n = int(self.n)
        if self.beta is None:
            self.beta = len(self) / self.n if self.n else 0.0
        self.validate()

    def __len__(self) -> int:
        return int(self.i.size)

    def validate(self):
        if not (self.i.size == self.k.size == self.c.size):
            raise ValidationError("ragged constraint arrays")
        if len(self) == 0:
            return
        if np.any((self.c != 1) & (self.c != -1)):
            raise ValidationError("constraint values must be -1 or +1")
        if np.any(self.i == self.k):
            raise ValidationError("a sample cannot be constrained with itself")
        lo = np.minimum(self.i, self.k)
        hi = np.maximum(self.i, self.k)
        if lo.min() < 0 or hi.max() >= self.n:
            raise ValidationError(f"constraint index out of range for n={self.n}")
        keys = lo * self.n + hi
        if np.unique(keys).size != keys.size:
            raise ValidationError("duplicate unordered pair")

    @classmethod
    def empty(cls, n) -> "ConstraintSet":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), n, 0.0)

    @property
    def pairs(self) -> list[tuple[int, int, int]]:
        return [(int(a), int(b), int(c)) for a, b, c in zip(self.i, self.k, self.c)]

    def subset(self, idx) -> "ConstraintSet":
        return ConstraintSet(self.i[idx], self.k[idx], self.c[idx], self.n, self.beta)

    def to_dense(self) -> np.ndarray:
        """Full symmetric n x n matrix with zero diagonal."""
        mat = np.zeros((self.n, self.n), dtype=np.int64)
        mat[self.i, self.k] = self.c
        mat[self.k, self.i] = self.c
        return mat

    def __eq__(self, other):
        if not isinstance(other, ConstraintSet):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.i, other.i)
            and np.array_equal(self.k, other.k)
            and np.array_equal(self.c, other.c)
        )


def pair_budget(beta, n) -> int:
    """round(beta * n), halves rounded up."""
    return int(math.floor(beta * n + 0.5))


def _unrank_pairs(ranks, n):
    """Map ranks in [0, n(n-1)/2) to (i, k), i < k, in row-major upper-triangle order."""
    ranks = np.asarray(ranks, dtype=np.int64)
    # row i starts at offset i*(2n-i-1)/2
    i = np.floor((2 * n - 1 - np.sqrt((2.0 * n - 1) ** 2 - 8.0 * ranks)) / 2).astype(np.int64)
    start = i * (2 * n - i - 1) // 2
    # correct float rounding at row boundaries
    over = start > ranks
    i[over] -= 1
    nxt = (i + 1) * (2 * n - i - 2) // 2
    under = ranks >= nxt
    i[under] += 1
    start = i * (2 * n - i - 1) // 2
    k = ranks - start + i + 1
    return i, k


def generate_constraints(labels, beta, seed=0) -> ConstraintSet:
    """Sample round(beta*n) distinct unordered pairs; +1 iff labels agree."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if beta < 0:
        raise ValueError("beta must be non-negative")
    m = pair_budget(beta, n)
    total = n * (n - 1) // 2
    if m > total:
        raise BudgetError(f"beta*n = {m} pairs exceeds the {total} distinct pairs available")
    if m == 0:
        return ConstraintSet(np.zeros(0), np.zeros(0), np.zeros(0), n, beta)
    rng = np.random.default_rng(seed)
    ranks = rng.choice(total, size=m, replace=False)
    i, k = _unrank_pairs(ranks, n)
    c = np.where(labels[i] == labels[k], 1, -1)
    return ConstraintSet(i, k, c, n, beta)


def save_constraints(cs: ConstraintSet, path):
    Path(path).write_text("".join(f"{a} {b} {c}\n" for a, b, c in cs.pairs))


def load_constraints(path, n=None) -> ConstraintSet:
    """Read ``i k c`` lines. ``n`` defaults to the largest index + 1."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        toks = line.split()
        if not toks:
            continue
        if len(toks) != 3:
            raise ParseError(f"expected 'i k c', got {line!r}", path, lineno)
        try:
            a, b, c = (int(t) for t in toks)
        except ValueError:
            raise ParseError(f"non-integer field in {line!r}", path, lineno) from None
        if c not in (-1, 1):
            raise ValidationError(f"{path}:{lineno}: constraint value {c} not in {{-1, 1}}")
        if a == b:
            raise ValidationError(f"{path}:{lineno}: self-constraint on sample {a}")
        rows.append((a, b, c))
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    if n is None:
        n = int(arr[:, :2].max()) + 1 if len(arr) else 0
    return ConstraintSet(arr[:, 0], arr[:, 1], arr[:, 2], n)
