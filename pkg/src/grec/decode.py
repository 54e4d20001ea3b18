"""Trie-constrained beam search and beam sampling over semantic IDs."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .backbone import Batch, EncoderState, PolicyModel

SemanticId = tuple[int, ...]


class SidTrie:
    """Prefix index over a pool of full-depth SIDs."""

    def __init__(self, pool: Iterable[Sequence[int]]):
        sids = sorted({tuple(int(c) for c in s) for s in pool})
        if not sids:
            raise ValueError("empty pool")
        depth = len(sids[0])
        if depth == 0 or any(len(s) != depth for s in sids):
            raise ValueError("all SIDs in a pool must share one non-zero depth")
        self.depth = depth
        self._members = frozenset(sids)
        children: dict[SemanticId, set[int]] = {}
        for s in sids:
            for t in range(depth):
                children.setdefault(s[:t], set()).add(s[t])
        self._next = {p: np.array(sorted(c), dtype=np.int64) for p, c in children.items()}
        self._empty = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._members)

    def __contains__(self, sid) -> bool:
        return tuple(int(c) for c in sid) in self._members

    def membership(self, sid) -> bool:
        return sid in self

    @property
    def sids(self) -> list[SemanticId]:
        return sorted(self._members)

    def allowed_next(self, prefix: Sequence[int]) -> frozenset[int]:
        return frozenset(int(c) for c in self.allowed_array(prefix))

    def allowed_array(self, prefix: Sequence[int]) -> np.ndarray:
        return self._next.get(tuple(int(c) for c in prefix), self._empty)


def build_trie(pool: Iterable[Sequence[int]]) -> SidTrie:
    return SidTrie(pool)


class BeamMode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    BEAM_SAMPLE = "beam_sample"


@dataclass
class BeamConfig:
    beam_width: int = 32
    mode: BeamMode = BeamMode.DETERMINISTIC
    top_k: int = 50
    nucleus_p: float = 1.0
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.mode = BeamMode(self.mode)
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ValueError("nucleus_p must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    def metadata(self) -> dict:
        return {
            "beam_width": self.beam_width, "mode": self.mode.value, "top_k": self.top_k,
            "nucleus_p": self.nucleus_p, "temperature": self.temperature, "seed": self.seed,
            "sampling": "without replacement within a step",
            "filter_order": "legal mask, top_k, nucleus, temperature",
        }


@dataclass
class BeamResult:
    sids: list[SemanticId]
    scores: list[float]                  # cumulative model log-probability
    step_logprobs: list[np.ndarray]      # per-code model log-probabilities, shape (L,)
    pool_exhausted: bool = False

    @property
    def ranked(self) -> list[tuple[SemanticId, float]]:
        return list(zip(self.sids, self.scores))

    def __len__(self) -> int:
        return len(self.sids)


def masked_distribution(logprobs: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Model distribution restricted to ``allowed`` and renormalised."""
    z = logprobs[allowed].astype(np.float64)
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def filter_probs(p: np.ndarray, top_k: int, nucleus_p: float) -> np.ndarray:
    """Top-k then nucleus on an already-normalised vector; zeroes the rest and renormalises."""
    order = np.argsort(-p, kind="stable")
    keep = np.zeros(len(p), dtype=bool)
    keep[order[:top_k]] = True
    q = np.where(keep, p, 0.0)
    q = q / q.sum()
    if nucleus_p < 1.0:
        sq = q[order]
        cum = np.cumsum(sq)
        n = int(np.searchsorted(cum, nucleus_p - 1e-12, side="left")) + 1
        nuc = np.zeros(len(p), dtype=bool)
        nuc[order[:n]] = True
        q = np.where(nuc & keep, q, 0.0)
        q = q / q.sum()
    return q


def _gumbel_topk(logw: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """n draws without replacement, proportional to exp(logw)."""
    g = rng.gumbel(size=len(logw))
    keys = np.where(np.isfinite(logw), logw + g, -np.inf)
    return np.argsort(-keys, kind="stable")[:n]


@dataclass
class _Beam:
    codes: SemanticId
    score: float
    steps: list = field(default_factory=list)
    logw: float = 0.0


def _sub_state(state: EncoderState, rows: torch.Tensor) -> EncoderState:
    return EncoderState(state.memory.index_select(0, rows), state.mask.index_select(0, rows))


@torch.no_grad()
def beam_search_batch(model: PolicyModel, batch: Batch, tries: SidTrie | Sequence[SidTrie],
                      config: BeamConfig, rng: np.random.Generator | None = None) -> list[BeamResult]:
    """Constrained decoding for every request in ``batch``; one trie per request (or a shared one)."""
    n = len(batch)
    if isinstance(tries, SidTrie):
        tries = [tries] * n
    if len(tries) != n:
        raise ValueError("need one trie per request")
    L = model.config.sid_depth
    for tr in tries:
        if tr.depth != L:
            raise ValueError(f"trie depth {tr.depth} != model sid_depth {L}")
    sample = config.mode is BeamMode.BEAM_SAMPLE
    if sample and rng is None:
        rng = np.random.default_rng(config.seed)
    was_training = model.training
    model.eval()
    prompt = model.prompt(batch)
    state = model.encode(batch, prompt)
    beams: list[list[_Beam]] = [[_Beam((), 0.0)] for _ in range(n)]
    for t in range(L):
        owners = [i for i in range(n) for _ in beams[i]]
        if not owners:
            break
        rows = torch.tensor(owners, dtype=torch.long)
        codes = torch.tensor([list(b.codes) for i in range(n) for b in beams[i]], dtype=torch.long).reshape(len(owners), t)
        lp = model.next_logprobs(_sub_state(state, rows), prompt.prefix.index_select(0, rows), codes)
        lp = lp.double().numpy()
        r = 0
        for i in range(n):
            cand_beam, cand_code, cand_score, cand_logw = [], [], [], []
            for j, beam in enumerate(beams[i]):
                row = lp[r]
                r += 1
                allowed = tries[i].allowed_array(beam.codes)
                if len(allowed) == 0:
                    continue
                if sample:
                    p = filter_probs(masked_distribution(row, allowed), config.top_k, config.nucleus_p)
                    ok = p > 0
                    allowed, p = allowed[ok], p[ok]
                    cand_logw.append(beam.logw + np.log(p))
                cand_beam.append(np.full(len(allowed), j))
                cand_code.append(allowed)
                cand_score.append(beam.score + row[allowed])
            if not cand_beam:
                beams[i] = []
                continue
            cb = np.concatenate(cand_beam)
            cc = np.concatenate(cand_code)
            cs = np.concatenate(cand_score)
            k = min(config.beam_width, len(cb))
            if sample:
                lw = np.concatenate(cand_logw)
                pick = _gumbel_topk(lw / config.temperature, k, rng)
            else:
                prev = np.array([beams[i][j].codes for j in cb], dtype=np.int64).reshape(len(cb), t)
                # primary: score desc; ties: lexicographic on the extended SID
                keys = [cc] + [prev[:, c] for c in range(t - 1, -1, -1)] + [-cs]
                pick = np.lexsort(keys)[:k]
            new = []
            for c in pick:
                parent = beams[i][int(cb[c])]
                new.append(_Beam(parent.codes + (int(cc[c]),), float(cs[c]),
                                 parent.steps + [float(cs[c] - parent.score)],
                                 float(lw[c]) if sample else 0.0))
            beams[i] = new
    results = []
    for i in range(n):
        done = sorted((b for b in beams[i] if len(b.codes) == L), key=lambda b: (-b.score, b.codes))
        results.append(BeamResult([b.codes for b in done], [b.score for b in done],
                                  [np.array(b.steps) for b in done], pool_exhausted=not done))
    model.train(was_training)
    return results


def constrained_beam_search(model: PolicyModel, request: Batch, trie: SidTrie, config: BeamConfig,
                            rng: np.random.Generator | None = None) -> BeamResult:
    if len(request) != 1:
        raise ValueError("constrained_beam_search takes a single request; use beam_search_batch")
    return beam_search_batch(model, request, trie, config, rng)[0]


def decode_in_chunks(model: PolicyModel, batch: Batch, tries: Sequence[SidTrie], config: BeamConfig,
                     chunk: int = 64, rng: np.random.Generator | None = None) -> list[BeamResult]:
    if config.mode is BeamMode.BEAM_SAMPLE and rng is None:
        rng = np.random.default_rng(config.seed)
    out = []
    for lo in range(0, len(batch), chunk):
        idx = list(range(lo, min(lo + chunk, len(batch))))
        out.extend(beam_search_batch(model, batch.index(idx), [tries[i] for i in idx], config, rng))
    return out
