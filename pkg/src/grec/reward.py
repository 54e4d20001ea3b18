"""Reward service: format, Q2I relevance, surrogate ranking and group diversity."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .align import Adapter, side_features
from .catalog import ACTIONS, Action, InteractionEvent, ItemCatalog, UserProfile
from .decode import SidTrie
from .instruction import ReasoningInstruction, ScenarioInstruction, text_encode

COMPONENTS = ("format", "relative", "ranking", "diversity")
TEXT_DIM = 32
ACTION_VALUE = {Action.CLICK: 1.0, Action.CART: 2.0, Action.PURCHASE: 4.0}


@dataclass
class RewardConfig:
    w_format: float = 0.2
    w_relative: float = 0.3
    w_ranking: float = 0.4
    w_diversity: float = 0.1
    diversity_level: int = 1

    def __post_init__(self):
        w = self.weights
        if any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise ValueError("reward weights must be non-negative with at least one > 0")
        if self.diversity_level not in (1, 2, 3):
            raise ValueError("diversity_level must be 1, 2 or 3")

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.w_format, self.w_relative, self.w_ranking, self.w_diversity)

    @classmethod
    def from_weights(cls, weights: Sequence[float], diversity_level: int = 1) -> "RewardConfig":
        return cls(*[float(x) for x in weights], diversity_level=diversity_level)


# -- surrogate ranker -----------------------------------------------------------

class SurrogateRanker:
    """Pointwise logistic scorer.

    Features: profile, item embedding, scenario one-hot, profile x item and scenario x item
    products, cosine of the item to the user's recent-history centroid, the item's
    log-popularity in the training logs, cosine of the item to the trigger item and the
    text-hash similarity between the search query and the item's category text.
    """

    def __init__(self, profile_dim: int, item_dim: int, n_scenarios: int, item_prior: np.ndarray | None = None):
        self.profile_dim = profile_dim
        self.item_dim = item_dim
        self.n_scenarios = n_scenarios
        self.item_prior = None if item_prior is None else np.asarray(item_prior, dtype=np.float64)
        self.weight = np.zeros(self.n_features)
        self.bias = 0.0

    @property
    def n_features(self) -> int:
        p, d, s = self.profile_dim, self.item_dim, self.n_scenarios
        return p + d + s + p * d + s * d + 4

    def features(self, profiles: np.ndarray, items: np.ndarray, scenarios, context: np.ndarray | None = None,
                 prior: np.ndarray | None = None, trigger: np.ndarray | None = None,
                 query_sim: np.ndarray | None = None) -> np.ndarray:
        items = np.atleast_2d(items)
        n = len(items)
        profiles = np.broadcast_to(np.atleast_2d(profiles), (n, self.profile_dim))
        onehot = np.broadcast_to(np.eye(self.n_scenarios)[np.asarray(scenarios, dtype=np.int64).reshape(-1)],
                                 (n, self.n_scenarios))
        sim = _row_cosine(context, items)
        trig = _row_cosine(trigger, items)
        prior = np.zeros(n) if prior is None else np.broadcast_to(np.asarray(prior, dtype=np.float64), (n,))
        qsim = np.zeros(n) if query_sim is None else np.broadcast_to(np.asarray(query_sim, dtype=np.float64), (n,))
        return np.concatenate([
            profiles, items, onehot,
            (profiles[:, :, None] * items[:, None, :]).reshape(n, -1),
            (onehot[:, :, None] * items[:, None, :]).reshape(n, -1),
            sim[:, None], prior[:, None], trig[:, None], qsim[:, None],
        ], axis=1)

    def score(self, profiles, items, scenarios, context=None, prior=None, trigger=None,
              query_sim=None) -> np.ndarray:
        z = self.features(profiles, items, scenarios, context, prior, trigger, query_sim) @ self.weight + self.bias
        return 1.0 / (1.0 + np.exp(-np.clip(z, -50, 50)))

    def fit(self, x: np.ndarray, y: np.ndarray, sample_weight: np.ndarray | None = None,
            l2: float = 1e-3, max_iter: int = 200) -> "SurrogateRanker":
        xt = torch.as_tensor(x, dtype=torch.float64)
        yt = torch.as_tensor(y, dtype=torch.float64)
        sw = torch.ones_like(yt) if sample_weight is None else torch.as_tensor(sample_weight, dtype=torch.float64)
        sw = sw / sw.mean()
        w = torch.zeros(xt.shape[1], dtype=torch.float64, requires_grad=True)
        b = torch.zeros((), dtype=torch.float64, requires_grad=True)
        opt = torch.optim.LBFGS([w, b], max_iter=max_iter, line_search_fn="strong_wolfe")

        def closure():
            opt.zero_grad()
            z = xt @ w + b
            loss = (sw * torch.nn.functional.binary_cross_entropy_with_logits(z, yt, reduction="none")).mean()
            loss = loss + l2 * (w ** 2).sum()
            loss.backward()
            return loss

        opt.step(closure)
        self.weight = w.detach().numpy().copy()
        self.bias = float(b.detach())
        if not np.all(np.isfinite(self.weight)):
            raise FloatingPointError("ranker fit diverged")
        return self

    def to_json(self) -> dict:
        return {"profile_dim": self.profile_dim, "item_dim": self.item_dim, "n_scenarios": self.n_scenarios,
                "weight": self.weight.tolist(), "bias": self.bias,
                "item_prior": None if self.item_prior is None else self.item_prior.tolist()}

    @classmethod
    def from_json(cls, d: Mapping) -> "SurrogateRanker":
        r = cls(d["profile_dim"], d["item_dim"], d["n_scenarios"], d.get("item_prior"))
        r.weight = np.asarray(d["weight"], dtype=np.float64)
        r.bias = float(d["bias"])
        return r


def _row_cosine(ref: np.ndarray | None, items: np.ndarray) -> np.ndarray:
    n = len(items)
    if ref is None:
        return np.zeros(n)
    ref = np.broadcast_to(np.atleast_2d(ref), items.shape)
    norm = np.linalg.norm(ref, axis=1) * np.linalg.norm(items, axis=1)
    return np.where(norm > 0, (ref * items).sum(1) / np.where(norm > 0, norm, 1.0), 0.0)


def query_similarity(query: str | None, item_text: np.ndarray) -> np.ndarray:
    """Cosine between hashed query features and hashed item text (rows unit or zero)."""
    if not query:
        return np.zeros(len(item_text))
    q = text_encode(query, item_text.shape[1])
    return item_text @ q


def history_context(embeddings: np.ndarray, items: Sequence[int]) -> np.ndarray:
    items = [int(i) for i in items if i >= 0]
    if not items:
        return np.zeros(embeddings.shape[1])
    return embeddings[items].mean(0)


def train_ranker(catalog: ItemCatalog, users: Sequence[UserProfile], events: Sequence[InteractionEvent],
                 n_negatives: int = 4, seed: int = 0, l2: float = 1e-3, context_len: int = 10) -> SurrogateRanker:
    """Logged interactions are positives weighted by action value; negatives come from the same pool."""
    rng = np.random.default_rng(seed)
    profiles = {u.user_id: u.profile_vector for u in users}
    pools = {sc.name: catalog.pool(sc.name) for sc in catalog.scenarios}
    counts = np.bincount([e.item_id for e in events], minlength=len(catalog)).astype(np.float64)
    prior = np.log1p(counts)
    emb = catalog.embeddings
    text = np.stack([text_encode(it.text, TEXT_DIM) for it in catalog.items])
    recent: dict[int, list[int]] = {}
    rows_p, rows_i, rows_s, rows_c, rows_t, rows_q, ys, ws = [], [], [], [], [], [], [], []
    for e in sorted(events, key=lambda e: (e.timestamp, e.user_id)):
        s = catalog.scenario_index(e.scenario_id)
        hist = recent.setdefault(e.user_id, [])
        ctx = history_context(emb, hist[-context_len:])
        cands = [(e.item_id, 1.0, ACTION_VALUE[e.action])]
        cands += [(int(neg), 0.0, 1.0) for neg in rng.choice(pools[e.scenario_id], size=n_negatives)]
        trig = emb[e.trigger_item_id] if e.trigger_item_id is not None else np.zeros(emb.shape[1])
        q = text_encode(e.query_text, TEXT_DIM) if e.query_text else np.zeros(TEXT_DIM)
        for item, y, w in cands:
            rows_p.append(profiles[e.user_id]); rows_i.append(item); rows_s.append(s); rows_c.append(ctx)
            rows_t.append(trig); rows_q.append(float(text[item] @ q))
            ys.append(y); ws.append(w)
        hist.append(e.item_id)
    ranker = SurrogateRanker(len(rows_p[0]), emb.shape[1], len(catalog.scenarios), prior)
    items = np.array(rows_i)
    x = ranker.features(np.stack(rows_p), emb[items], np.array(rows_s), np.stack(rows_c), prior[items],
                        np.stack(rows_t), np.array(rows_q))
    return ranker.fit(x, np.array(ys), np.array(ws), l2=l2)


# -- reward service -------------------------------------------------------------

@dataclass
class GroupScore:
    totals: np.ndarray                       # (G,)
    components: dict[str, np.ndarray]        # name -> (G,)

    def rows(self) -> list[dict]:
        return [{k: float(self.components[k][i]) for k in COMPONENTS} for i in range(len(self.totals))]


@dataclass
class Request:
    """Who is asking and under which instruction; the reward-side view of a sample."""

    user_id: int
    scenario: int
    trigger: int = -1
    query_text: str | None = None
    recent_items: tuple[int, ...] = ()


class RewardService:
    """Frozen scorer: adapter snapshot for relevance, surrogate ranker for business value."""

    def __init__(self, catalog: ItemCatalog, users: Sequence[UserProfile], item_codes: np.ndarray,
                 adapter: Adapter, ranker: SurrogateRanker, config: RewardConfig | None = None,
                 tries: Mapping[str, SidTrie] | None = None):
        self.catalog = catalog
        self.config = config or RewardConfig()
        self.ranker = ranker
        self.profiles = {u.user_id: np.asarray(u.profile_vector, dtype=np.float64) for u in users}
        self.item_codes = np.asarray(item_codes)
        self.sid_items: dict[tuple[int, ...], list[int]] = {}
        for i, c in enumerate(self.item_codes):
            self.sid_items.setdefault(tuple(int(x) for x in c), []).append(i)
        self.adapter = copy.deepcopy(adapter).eval()
        for p in self.adapter.parameters():
            p.requires_grad_(False)
        from .decode import build_trie

        self.tries = dict(tries) if tries else {
            sc.name: build_trie([tuple(self.item_codes[i]) for i in catalog.pool(sc.name)])
            for sc in catalog.scenarios
        }
        with torch.no_grad():
            items = torch.arange(len(catalog))
            side = torch.as_tensor(np.tile(side_features(Action.CLICK, 0), (len(catalog), 1)),
                                   dtype=self.adapter.item_text.dtype)
            self.item_align = self.adapter.target(items, side).double().numpy()
        self.item_cats = catalog.categories
        self.item_text = np.stack([text_encode(it.text, TEXT_DIM) for it in catalog.items])

    def _query(self, req: Request) -> np.ndarray:
        feats = np.zeros(self.adapter.instr_dim)
        if req.query_text:
            from .instruction import text_encode

            feats = text_encode(req.query_text, self.adapter.instr_dim)
        dt = self.adapter.item_text.dtype
        with torch.no_grad():
            q = self.adapter.query(torch.tensor([req.scenario]), torch.tensor([req.trigger]),
                                   torch.as_tensor(feats[None, :], dtype=dt),
                                   torch.tensor([req.query_text is None]))
        return q[0].double().numpy()

    def _item_scores(self, req: Request, q: np.ndarray, items: list[int]) -> tuple[float, float]:
        if not items:
            return 0.0, 0.0
        cos = self.item_align[items] @ q / (np.linalg.norm(self.item_align[items], axis=1) * np.linalg.norm(q))
        rel = float(np.mean(np.maximum(0.0, cos)))
        emb = self.catalog.embeddings
        prior = None if self.ranker.item_prior is None else self.ranker.item_prior[items]
        trig = emb[req.trigger] if req.trigger >= 0 else None
        qsim = query_similarity(req.query_text, self.item_text[items])
        rank = self.ranker.score(self.profiles[req.user_id], emb[items], np.full(len(items), req.scenario),
                                 history_context(emb, req.recent_items), prior, trig, qsim)
        return rel, float(np.mean(rank))

    def _category(self, sid: tuple[int, ...]):
        items = self.sid_items.get(sid)
        if not items:
            return ("unresolved",) + sid
        return int(self.item_cats[items[0], self.config.diversity_level - 1])

    def score_group(self, req: Request, group: Sequence[Sequence[int]]) -> GroupScore:
        if not group:
            raise ValueError("empty group")
        if req.user_id not in self.profiles:
            raise KeyError(f"unknown user {req.user_id}")
        sids = [tuple(int(c) for c in s) for s in group]
        trie = self.tries[self.catalog.scenarios[req.scenario].name]
        q = self._query(req)
        fmt = np.array([1.0 if s in trie else 0.0 for s in sids])
        rel = np.zeros(len(sids))
        rank = np.zeros(len(sids))
        cache = {}
        for i, s in enumerate(sids):
            if s not in cache:
                cache[s] = self._item_scores(req, q, self.sid_items.get(s, []))
            rel[i], rank[i] = cache[s]
        div = np.full(len(sids), len({self._category(s) for s in sids}) / len(sids))
        comps = {"format": fmt, "relative": rel, "ranking": rank, "diversity": div}
        return GroupScore(self._combine(comps), comps)

    def _combine(self, comps: Mapping[str, np.ndarray]) -> np.ndarray:
        return sum(w * comps[k] for w, k in zip(self.config.weights, COMPONENTS))

    def target_reward(self, req: Request, target_item: int, group_diversity: float) -> float:
        """Reward of the logged item under the same pipeline; diversity is the group's value."""
        if not 0 <= target_item < len(self.item_codes):
            raise KeyError(f"unresolvable target item {target_item}")
        if req.user_id not in self.profiles:
            raise KeyError(f"unknown user {req.user_id}")
        sid = tuple(int(c) for c in self.item_codes[target_item])
        trie = self.tries[self.catalog.scenarios[req.scenario].name]
        rel, rank = self._item_scores(req, self._query(req), self.sid_items[sid])
        comps = {"format": np.array([1.0 if sid in trie else 0.0]), "relative": np.array([rel]),
                 "ranking": np.array([rank]), "diversity": np.array([group_diversity])}
        return float(self._combine(comps)[0])


def score_group(service: RewardService, user_id: int, I_s: ScenarioInstruction, I_r: ReasoningInstruction,
                group: Sequence[Sequence[int]]) -> GroupScore:
    return service.score_group(_request(service, user_id, I_s, I_r), group)


def target_reward(service: RewardService, user_id: int, I_s: ScenarioInstruction, I_r: ReasoningInstruction,
                  target_item: int, group_diversity: float = 1.0) -> float:
    return service.target_reward(_request(service, user_id, I_s, I_r), target_item, group_diversity)


def _request(service: RewardService, user_id, I_s, I_r) -> Request:
    return Request(user_id, service.catalog.scenario_index(I_s.scenario_id),
                   I_s.trigger_item if I_s.has_trigger else -1,
                   None if I_r.is_default else (I_r.text or ""))


# -- traces -------------------------------------------------------------------------

def trace_records(sample_id: int, score: GroupScore) -> list[dict]:
    return [{"sample_id": int(sample_id), "group_index": i, "components": row, "total": float(score.totals[i])}
            for i, row in enumerate(score.rows())]


def write_reward_trace(path: str | Path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_reward_trace(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
