"""Residual-quantisation tokenizer (RQ-KMeans) and semantic-ID quality metrics."""

from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .catalog import ItemCatalog, matrix_from_bytes, matrix_to_bytes

CODEBOOK_MAGIC = b"RQKM"

SemanticId = tuple[int, ...]


@dataclass(frozen=True)
class Codebook:
    centroids: tuple[np.ndarray, ...]  # depth matrices of shape (width, dim)

    def __post_init__(self):
        if not self.centroids:
            raise ValueError("codebook needs at least one level")
        shape = self.centroids[0].shape
        for c in self.centroids:
            if c.shape != shape:
                raise ValueError("all levels must share (width, dim)")
            if not np.all(np.isfinite(c)):
                raise ValueError("non-finite centroid")
            c.setflags(write=False)

    @property
    def depth(self) -> int:
        return len(self.centroids)

    @property
    def width(self) -> int:
        return self.centroids[0].shape[0]

    @property
    def dim(self) -> int:
        return self.centroids[0].shape[1]

    def reconstruct(self, codes: Sequence[int]) -> np.ndarray:
        return sum(self.centroids[lvl][c] for lvl, c in enumerate(codes))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # exact (x - c)^2 sums; the expanded form introduces spurious near-ties
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _nearest(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    out = np.empty(len(x), dtype=np.int64)
    step = max(1, 2_000_000 // max(1, c.size))
    for lo in range(0, len(x), step):
        out[lo:lo + step] = np.argmin(_sq_dists(x[lo:lo + step], c), axis=1)
    return out


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each step keeps the best of a few D^2-sampled candidates."""
    n = len(x)
    trials = 2 + int(math.log(k)) if k > 1 else 1
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, size=trials, p=d2 / total) if total > 0 else rng.integers(n, size=trials)
        cand = np.minimum(d2[:, None], _sq_dists(x, x[idx]))
        best = int(np.argmin(cand.sum(0)))
        centers[j] = x[idx[best]]
        d2 = cand[:, best]
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int, tol: float) -> tuple[np.ndarray, np.ndarray]:
    k = len(centers)
    labels = _nearest(x, centers)
    for _ in range(max_iter):
        new = centers.copy()
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if len(empty):
            err = ((x - new[labels]) ** 2).sum(1)
            order = np.argsort(-err, kind="stable")
            for j, idx in zip(empty, order):
                new[j] = x[idx]
        shift = float(np.sqrt(((new - centers) ** 2).sum(1)).max())
        centers = new
        labels = _nearest(x, centers)
        if shift <= tol:
            break
    return centers, labels


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 25,
           tol: float = 1e-6, n_init: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's k-means; empty clusters take the point farthest from its centroid.

    Runs ``n_init`` seeded restarts and keeps the lowest-inertia one. Returns
    ``(centroids, labels)``; ``labels`` is the nearest-centroid assignment
    under the returned centroids.
    """
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    best, best_inertia = None, np.inf
    for _ in range(n_init):
        centers, labels = _lloyd(x, _kmeanspp_init(x, k, rng), max_iter, tol)
        inertia = float(((x - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best, best_inertia = (centers, labels), inertia
    return best


def train_codebook(embeddings: np.ndarray, depth: int, width: int, seed: int = 0,
                   max_iter: int = 25, tol: float = 1e-6, n_init: int = 3) -> Codebook:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("embeddings must be a non-empty 2-D matrix")
    if width < 1:
        raise ValueError("width must be >= 1")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    levels = []
    for _ in range(depth):
        centers, labels = kmeans(residual, width, rng, max_iter=max_iter, tol=tol, n_init=n_init)
        levels.append(centers)
        residual = residual - centers[labels]
    return Codebook(tuple(levels))


def assign_sid(codebook: Codebook, embedding: np.ndarray) -> SemanticId:
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape != (codebook.dim,):
        raise ValueError(f"embedding dim {e.shape} does not match codebook dim {codebook.dim}")
    return tuple(int(c) for c in assign_sids(codebook, e[None, :])[0])


def assign_sids(codebook: Codebook, embeddings: np.ndarray) -> np.ndarray:
    """Vectorised greedy assignment; returns an (n, depth) int array."""
    residual = np.asarray(embeddings, dtype=np.float64).copy()
    if residual.ndim != 2 or residual.shape[1] != codebook.dim:
        raise ValueError("embedding dimension does not match codebook")
    codes = np.empty((len(residual), codebook.depth), dtype=np.int64)
    for lvl, cents in enumerate(codebook.centroids):
        codes[:, lvl] = _nearest(residual, cents)
        residual = residual - cents[codes[:, lvl]]
    return codes


def reconstruction_errors(codebook: Codebook, embeddings: np.ndarray) -> np.ndarray:
    """Squared residual norm per item after each level: shape (n, depth + 1)."""
    residual = np.asarray(embeddings, dtype=np.float64).copy()
    codes = assign_sids(codebook, residual)
    errs = [(residual ** 2).sum(1)]
    for lvl, cents in enumerate(codebook.centroids):
        residual = residual - cents[codes[:, lvl]]
        errs.append((residual ** 2).sum(1))
    return np.stack(errs, axis=1)


# -- metrics -----------------------------------------------------------------

def nearest_rank(values: Sequence[float], q: float) -> float:
    """Nearest-rank quantile on the ascending sort (q in (0, 1])."""
    if not len(values):
        raise ValueError("no values")
    s = sorted(values)
    rank = max(1, math.ceil(q * len(s) - 1e-12))
    return s[min(rank, len(s)) - 1]


@dataclass
class SidReport:
    coverage: dict[int, float]            # prefix length -> fraction of V**L' occupied
    purity: dict[int, float]              # category level (1..3) -> mean dominance
    collision: dict[str, float]           # "p90"/"p99"/"p999" -> items per full SID
    load_balance: dict[str, float]        # "p25"/"p75"/"p90" -> count / (N / V)
    load_balance_level: int = 1
    n_items: int = 0
    n_unique_sids: int = 0

    def to_json(self) -> dict:
        return {
            "coverage": {str(k): v for k, v in self.coverage.items()},
            "purity": {str(k): v for k, v in self.purity.items()},
            "collision": self.collision,
            "load_balance": self.load_balance,
            "load_balance_level": self.load_balance_level,
            "n_items": self.n_items,
            "n_unique_sids": self.n_unique_sids,
        }


def sid_metrics(assignments: Mapping[int, SemanticId], catalog: ItemCatalog, width: int,
                load_balance_level: int = 1) -> SidReport:
    if not assignments:
        raise ValueError("empty assignments")
    missing = [it.item_id for it in catalog.items if it.item_id not in assignments]
    if missing:
        raise ValueError(f"assignments missing {len(missing)} catalog items, e.g. {missing[:3]}")
    sids = {iid: tuple(int(c) for c in s) for iid, s in assignments.items()}
    depth = len(next(iter(sids.values())))
    coverage = {}
    for lp in range(1, depth + 1):
        prefixes = {s[:lp] for s in sids.values()}
        coverage[lp] = len(prefixes) / float(width) ** lp

    groups: dict[SemanticId, list[int]] = {}
    for iid, s in sids.items():
        groups.setdefault(s, []).append(iid)
    purity = {}
    for level in range(3):
        dom = []
        for members in groups.values():
            counts = Counter(catalog[i].category_path[level] for i in members)
            dom.append(max(counts.values()) / len(members))
        purity[level + 1] = float(np.mean(dom))

    sizes = [len(m) for m in groups.values()]
    collision = {
        "p90": nearest_rank(sizes, 0.90),
        "p99": nearest_rank(sizes, 0.99),
        "p999": nearest_rank(sizes, 0.999),
    }
    if not 1 <= load_balance_level <= depth:
        raise ValueError("load_balance_level out of range")
    code_counts = Counter(s[load_balance_level - 1] for s in sids.values())
    n = len(sids)
    ratios = [code_counts.get(c, 0) / (n / width) for c in range(width)]
    load = {
        "p25": nearest_rank(ratios, 0.25),
        "p75": nearest_rank(ratios, 0.75),
        "p90": nearest_rank(ratios, 0.90),
    }
    return SidReport(coverage, purity, collision, load, load_balance_level, n, len(groups))


# -- persistence -------------------------------------------------------------

def codebook_to_bytes(cb: Codebook) -> bytes:
    out = [CODEBOOK_MAGIC, struct.pack("<III", cb.depth, cb.width, cb.dim)]
    out.extend(matrix_to_bytes(c) for c in cb.centroids)
    return b"".join(out)


def codebook_from_bytes(buf: bytes) -> Codebook:
    if buf[:4] != CODEBOOK_MAGIC:
        raise ValueError("bad codebook magic")
    depth, width, dim = struct.unpack_from("<III", buf, 4)
    offset = 16
    levels = []
    for _ in range(depth):
        mat, offset = matrix_from_bytes(buf, offset)
        if mat.shape != (width, dim):
            raise ValueError("codebook level shape mismatch")
        levels.append(mat.astype(np.float64))
    return Codebook(tuple(levels))


def write_codebook(path: str | Path, cb: Codebook) -> None:
    Path(path).write_bytes(codebook_to_bytes(cb))


def read_codebook(path: str | Path) -> Codebook:
    return codebook_from_bytes(Path(path).read_bytes())


def write_assignments(path: str | Path, assignments: Mapping[int, SemanticId]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for iid in sorted(assignments):
            fh.write(json.dumps({"item_id": int(iid), "codes": [int(c) for c in assignments[iid]]}) + "\n")


def read_assignments(path: str | Path) -> dict[int, SemanticId]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[int(rec["item_id"])] = tuple(int(c) for c in rec["codes"])
    return out
