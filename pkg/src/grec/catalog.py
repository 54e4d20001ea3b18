"""Synthetic e-commerce world: items, users, scenarios and interaction logs.

The generator is intentionally simple but structured so that every signal the
downstream model is supposed to exploit actually exists in the data:

* item embeddings are cluster-Gaussian around a 3-level category tree,
* each scenario draws its top-level categories from an affinity row,
* users carry a low-rank taste vector that drives sub-category choice and is
  partially visible through ``profile_vector``,
* trigger-bearing scenarios run in sessions whose targets follow the session
  trigger's leaf category,
* search events carry a query made of the target's category labels.
"""

from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
MATRIX_MAGIC = b"GREC"

CATE1_WORDS = (
    "electronics", "apparel", "cycling", "grocery", "beauty",
    "books", "toys", "furniture", "sports", "garden",
    "pets", "baby", "auto", "music", "office", "jewelry",
)


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class Action(str, enum.Enum):
    CLICK = "click"
    CART = "cart"
    PURCHASE = "purchase"


ACTIONS = (Action.CLICK, Action.CART, Action.PURCHASE)


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    trigger_bearing: bool
    has_query: bool


# order mirrors the training-signal table: homepage first so a one-scenario world is triggerless
_SCENARIO_KINDS = (
    ScenarioSpec("homepage", False, False),
    ScenarioSpec("search", False, True),
    ScenarioSpec("channel_feeds", True, False),
    ScenarioSpec("related", True, False),
)


def default_scenarios(n: int) -> tuple[ScenarioSpec, ...]:
    out = []
    for i in range(n):
        kind = _SCENARIO_KINDS[i % len(_SCENARIO_KINDS)]
        suffix = "" if i < len(_SCENARIO_KINDS) else f"_{i // len(_SCENARIO_KINDS) + 1}"
        out.append(ScenarioSpec(kind.name + suffix, kind.trigger_bearing, kind.has_query))
    return tuple(out)


@dataclass
class SyntheticWorldConfig:
    n_items: int = 1000
    n_users: int = 300
    n_scenarios: int = 4
    branching: tuple[int, int, int] = (10, 5, 4)
    dim: int = 32
    # rows: scenarios, columns: top-level categories; None -> banded default
    affinity: list[list[float]] | None = None
    action_probs: tuple[float, float, float] = (0.85, 0.10, 0.05)
    # traffic share per scenario; None -> uniform
    scenario_traffic: list[float] | None = None
    seed: int = 0
    n_days: int = 10
    events_per_user: int = 40
    short_history_len: int = 10
    session_mean_len: float = 2.5
    center_scale: float = 1.0
    cate2_scale: float = 0.35
    cate3_scale: float = 0.18
    item_noise: float = 0.06
    taste_dim: int = 5
    taste_sharpness: float = 3.0
    # >0 personalises the top-level category draw (breaks the exact affinity marginal)
    personal_cate1: float = 0.0
    trigger_follow: float = 0.8
    query_cate3_prob: float = 0.5
    profile_noise: float = 0.3

    def validate(self) -> None:
        for name in ("n_items", "n_users", "n_scenarios", "dim", "n_days",
                     "events_per_user", "short_history_len", "taste_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if len(self.branching) != 3 or any(b < 1 for b in self.branching):
            raise ConfigError("branching", "need three factors >= 1")
        _check_distribution("action_probs", [list(self.action_probs)], 3)
        if self.affinity is not None:
            if len(self.affinity) != self.n_scenarios:
                raise ConfigError("affinity", "need one row per scenario")
            _check_distribution("affinity", self.affinity, self.branching[0])
        if self.scenario_traffic is not None:
            if len(self.scenario_traffic) != self.n_scenarios:
                raise ConfigError("scenario_traffic", "need one entry per scenario")
            _check_distribution("scenario_traffic", [self.scenario_traffic], self.n_scenarios)
        for name in ("trigger_follow", "query_cate3_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(name, "must lie in [0, 1]")
        if self.session_mean_len < 1.0:
            raise ConfigError("session_mean_len", "must be >= 1")
        for name in ("center_scale", "cate2_scale", "cate3_scale", "item_noise",
                     "taste_sharpness", "profile_noise", "personal_cate1"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")

    @property
    def scenarios(self) -> tuple[ScenarioSpec, ...]:
        return default_scenarios(self.n_scenarios)

    def affinity_matrix(self) -> np.ndarray:
        if self.affinity is not None:
            return np.asarray(self.affinity, dtype=np.float64)
        c1 = self.branching[0]
        band = np.array([0.4, 0.3, 0.2, 0.1])[: c1]
        band = band / band.sum()
        aff = np.zeros((self.n_scenarios, c1))
        for s in range(self.n_scenarios):
            for j, w in enumerate(band):
                aff[s, (3 * s + j) % c1] += w
        return aff

    def traffic(self) -> np.ndarray:
        if self.scenario_traffic is None:
            return np.full(self.n_scenarios, 1.0 / self.n_scenarios)
        return np.asarray(self.scenario_traffic, dtype=np.float64)


def _check_distribution(name: str, rows: Sequence[Sequence[float]], width: int) -> None:
    for row in rows:
        if len(row) != width:
            raise ConfigError(name, f"row length {len(row)} != {width}")
        arr = np.asarray(row, dtype=np.float64)
        if np.any(arr < 0) or np.any(arr > 1):
            raise ConfigError(name, "probabilities must lie in [0, 1]")
        if abs(arr.sum() - 1.0) > 1e-9:
            raise ConfigError(name, f"row sums to {arr.sum()!r}, expected 1")


@dataclass(frozen=True)
class Item:
    item_id: int
    category_path: tuple[str, str, str]
    embedding: np.ndarray = field(repr=False, compare=False)
    pool_tags: frozenset[str] = frozenset()

    @property
    def text(self) -> str:
        return " ".join(self.category_path)


@dataclass(frozen=True)
class InteractionEvent:
    user_id: int
    item_id: int
    scenario_id: str
    action: Action
    timestamp: int
    query_text: str | None = None
    trigger_item_id: int | None = None

    @property
    def day(self) -> int:
        return self.timestamp // SECONDS_PER_DAY

    def to_json(self) -> dict:
        d = asdict(self)
        d["action"] = self.action.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "InteractionEvent":
        return cls(
            user_id=int(d["user_id"]),
            item_id=int(d["item_id"]),
            scenario_id=str(d["scenario_id"]),
            action=Action(d["action"]),
            timestamp=int(d["timestamp"]),
            query_text=d.get("query_text"),
            trigger_item_id=None if d.get("trigger_item_id") is None else int(d["trigger_item_id"]),
        )


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    profile_vector: np.ndarray = field(repr=False, compare=False)
    long_history: tuple[InteractionEvent, ...] = ()
    short_history: tuple[InteractionEvent, ...] = ()


class ItemCatalog:
    """Immutable item table with category and pool lookups."""

    def __init__(self, items: Sequence[Item], scenarios: Sequence[ScenarioSpec],
                 cate_labels: Sequence[Sequence[str]]):
        self.items = tuple(items)
        self.scenarios = tuple(scenarios)
        self.cate_labels = tuple(tuple(level) for level in cate_labels)
        self.embeddings = np.stack([it.embedding for it in self.items]) if self.items else np.zeros((0, 0))
        self.embeddings.setflags(write=False)
        index = [{lab: i for i, lab in enumerate(level)} for level in self.cate_labels]
        self.categories = np.array(
            [[index[lvl][it.category_path[lvl]] for lvl in range(3)] for it in self.items],
            dtype=np.int64,
        ).reshape(len(self.items), 3)
        self.categories.setflags(write=False)
        self._by_id = {it.item_id: i for i, it in enumerate(self.items)}
        if any(it.item_id != i for i, it in enumerate(self.items)):
            raise ValueError("item ids must be 0..n-1 in order")

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, item_id: int) -> bool:
        return item_id in self._by_id

    def __getitem__(self, item_id: int) -> Item:
        return self.items[self._by_id[item_id]]

    def scenario(self, name: str) -> ScenarioSpec:
        for sc in self.scenarios:
            if sc.name == name:
                return sc
        raise KeyError(f"unknown scenario {name!r}")

    def scenario_index(self, name: str) -> int:
        for i, sc in enumerate(self.scenarios):
            if sc.name == name:
                return i
        raise KeyError(f"unknown scenario {name!r}")

    def pool(self, scenario: str) -> np.ndarray:
        return np.array([it.item_id for it in self.items if scenario in it.pool_tags], dtype=np.int64)

    def leaf_items(self) -> dict[tuple[int, int, int], list[int]]:
        leaves: dict[tuple[int, int, int], list[int]] = {}
        for i, row in enumerate(self.categories):
            leaves.setdefault(tuple(int(x) for x in row), []).append(i)
        return leaves


@dataclass
class World:
    config: SyntheticWorldConfig
    catalog: ItemCatalog
    users: list[UserProfile]
    events: list[InteractionEvent]

    @property
    def scenarios(self) -> tuple[ScenarioSpec, ...]:
        return self.catalog.scenarios


def _category_labels(branching: Sequence[int]) -> tuple[list[str], list[str], list[str]]:
    c1, c2, c3 = branching
    words = [CATE1_WORDS[i] if i < len(CATE1_WORDS) else f"{CATE1_WORDS[i % len(CATE1_WORDS)]}{i}"
             for i in range(c1)]
    lab2 = [f"{words[a]}.{b}" for a in range(c1) for b in range(c2)]
    lab3 = [f"{words[a]}.{b}.{c}" for a in range(c1) for b in range(c2) for c in range(c3)]
    return words, lab2, lab3


def _build_catalog(cfg: SyntheticWorldConfig, rng: np.random.Generator,
                   aff: np.ndarray) -> ItemCatalog:
    c1, c2, c3 = cfg.branching
    d = cfg.dim
    centers1 = rng.normal(size=(c1, d)) * cfg.center_scale
    centers2 = centers1[:, None, :] + rng.normal(size=(c1, c2, d)) * cfg.cate2_scale
    centers3 = centers2[:, :, None, :] + rng.normal(size=(c1, c2, c3, d)) * cfg.cate3_scale
    n_leaves = c1 * c2 * c3
    # balanced leaf assignment, shuffled so leaf sizes differ by at most one
    leaf_of = np.arange(cfg.n_items) % n_leaves
    rng.shuffle(leaf_of)
    words, lab2, lab3 = _category_labels(cfg.branching)
    scenarios = cfg.scenarios
    items = []
    for i in range(cfg.n_items):
        leaf = int(leaf_of[i])
        a, rem = divmod(leaf, c2 * c3)
        b, c = divmod(rem, c3)
        vec = centers3[a, b, c] + rng.normal(size=d) * cfg.item_noise
        vec = vec / np.linalg.norm(vec)
        tags = frozenset(sc.name for s, sc in enumerate(scenarios) if aff[s, a] > 0)
        items.append(Item(i, (words[a], lab2[a * c2 + b], lab3[(a * c2 + b) * c3 + c]), vec, tags))
    return ItemCatalog(items, scenarios, (words, lab2, lab3))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


class _Sampler:
    """Per-world sampling helpers shared across users."""

    def __init__(self, cfg: SyntheticWorldConfig, catalog: ItemCatalog, aff: np.ndarray,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.aff = aff
        c1, c2, c3 = cfg.branching
        k = cfg.taste_dim
        self.w1 = rng.normal(size=(c1, k)) / np.sqrt(k)
        self.w2 = rng.normal(size=(c1, c2, k)) / np.sqrt(k)
        self.w3 = rng.normal(size=(c1, c2, c3, k)) / np.sqrt(k)
        # leaf keys in catalog.categories are global label indices; convert to local (a, b, c)
        self.categories = catalog.categories
        self.leaves = {(a, b - a * c2, c - b * c3): m for (a, b, c), m in catalog.leaf_items().items()}
        # global popularity inside a leaf: fixed Zipf-like weights
        self.item_pop = rng.gamma(1.0, 1.0, size=len(catalog)) + 0.05
        self.present2 = {}
        self.present3 = {}
        for (a, b, c) in self.leaves:
            self.present2.setdefault(a, set()).add(b)
            self.present3.setdefault((a, b), set()).add(c)

    def cate1_dist(self, s: int, taste: np.ndarray) -> np.ndarray:
        p = self.aff[s].copy()
        if self.cfg.personal_cate1 > 0:
            p = p * np.exp(self.cfg.personal_cate1 * (self.w1 @ taste))
            p = p / p.sum()
        return p

    def draw_item(self, rng: np.random.Generator, s: int, taste: np.ndarray) -> int:
        sharp = self.cfg.taste_sharpness
        p1 = self.cate1_dist(s, taste)
        while True:
            a = int(rng.choice(len(p1), p=p1))
            if a in self.present2:
                break
        cand2 = sorted(self.present2[a])
        b = cand2[int(rng.choice(len(cand2), p=_softmax(sharp * (self.w2[a, cand2] @ taste))))]
        cand3 = sorted(self.present3[(a, b)])
        c = cand3[int(rng.choice(len(cand3), p=_softmax(sharp * (self.w3[a, b, cand3] @ taste))))]
        return self.draw_from_leaf(rng, (a, b, c))

    def leaf_of(self, item: int) -> tuple[int, int, int]:
        a, b, c = (int(x) for x in self.categories[item])
        c2, c3 = self.cfg.branching[1], self.cfg.branching[2]
        return a, b - a * c2, c - b * c3

    def draw_from_leaf(self, rng: np.random.Generator, leaf: tuple[int, int, int],
                       exclude: int | None = None) -> int:
        members = [m for m in self.leaves[leaf] if m != exclude] or self.leaves[leaf]
        w = self.item_pop[members]
        return int(members[int(rng.choice(len(members), p=w / w.sum()))])


def generate_world(config: SyntheticWorldConfig) -> tuple[ItemCatalog, list[UserProfile], list[InteractionEvent]]:
    config.validate()
    world = build_world(config)
    return world.catalog, world.users, world.events


def build_world(config: SyntheticWorldConfig) -> World:
    """Like :func:`generate_world` but keeps the config alongside the outputs."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    aff = config.affinity_matrix()
    catalog = _build_catalog(config, rng, aff)
    sampler = _Sampler(config, catalog, aff, rng)
    scenarios = config.scenarios
    traffic = config.traffic()
    probs = np.asarray(config.action_probs)
    users: list[UserProfile] = []
    events: list[InteractionEvent] = []
    for uid in range(config.n_users):
        taste = rng.normal(size=config.taste_dim)
        demo = np.array([rng.uniform(), rng.choice([-1.0, 1.0]), rng.uniform()])
        profile = np.concatenate([demo, taste + rng.normal(size=config.taste_dim) * config.profile_noise])
        user_events = _user_events(config, rng, sampler, uid, taste, scenarios, traffic, probs, catalog)
        n_short = min(config.short_history_len, len(user_events))
        split = len(user_events) - n_short
        users.append(UserProfile(uid, profile, tuple(user_events[:split]), tuple(user_events[split:])))
        events.extend(user_events)
    events.sort(key=lambda e: (e.timestamp, e.user_id))
    return World(config, catalog, users, events)


def _user_events(cfg, rng, sampler: _Sampler, uid, taste, scenarios, traffic, probs, catalog):
    out = []
    budget = cfg.events_per_user
    while budget > 0:
        s = int(rng.choice(len(scenarios), p=traffic))
        sc = scenarios[s]
        n = min(budget, int(rng.geometric(1.0 / cfg.session_mean_len)))
        budget -= n
        day = int(rng.integers(cfg.n_days))
        t = day * SECONDS_PER_DAY + int(rng.integers(0, SECONDS_PER_DAY - 3600))
        trigger = sampler.draw_item(rng, s, taste) if sc.trigger_bearing else None
        for _ in range(n):
            if trigger is not None and rng.uniform() < cfg.trigger_follow:
                leaf = sampler.leaf_of(trigger)
                item = sampler.draw_from_leaf(rng, leaf, exclude=trigger)
            else:
                item = sampler.draw_item(rng, s, taste)
            query = None
            if sc.has_query:
                path = catalog.items[item].category_path
                query = f"{path[0]} {path[1]}"
                if rng.uniform() < cfg.query_cate3_prob:
                    query += f" {path[2]}"
            action = ACTIONS[int(rng.choice(3, p=probs))]
            out.append([t, item, sc.name, action, query, trigger])
            t += int(rng.integers(30, 300))
    out.sort(key=lambda r: r[0])
    # strictly increasing timestamps per user; bump collisions forward
    for i in range(1, len(out)):
        if out[i][0] <= out[i - 1][0]:
            out[i][0] = out[i - 1][0] + 1
    return [InteractionEvent(uid, item, scen, action, t, query, trig)
            for t, item, scen, action, query, trig in out]


@dataclass
class SplitResult:
    train: list[InteractionEvent]
    eval: list[InteractionEvent]
    warning: str | None = None

    def __iter__(self):
        yield self.train
        yield self.eval


def split_train_eval(events: Sequence[InteractionEvent], eval_day: int) -> SplitResult:
    if not events:
        raise ValueError("events must be non-empty")
    train = [e for e in events if e.day < eval_day]
    ev = [e for e in events if e.day == eval_day]
    warning = None
    if not ev:
        warning = f"empty eval set: no events on day {eval_day}"
        logger.warning(warning)
    return SplitResult(train, ev, warning)


# -- persistence -------------------------------------------------------------

def write_events(path: str | Path, events: Iterable[InteractionEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(e.to_json(), sort_keys=False) + "\n")


def read_events(path: str | Path) -> list[InteractionEvent]:
    with open(path, encoding="utf-8") as fh:
        return [InteractionEvent.from_json(json.loads(line)) for line in fh if line.strip()]


def matrix_to_bytes(mat: np.ndarray) -> bytes:
    mat = np.asarray(mat)
    if mat.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    rows, cols = mat.shape
    return MATRIX_MAGIC + struct.pack("<III", rows, cols, 0) + mat.astype("<f4").tobytes(order="C")


def matrix_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 4] != MATRIX_MAGIC:
        raise ValueError("bad matrix magic")
    rows, cols, _ = struct.unpack_from("<III", buf, offset + 4)
    start = offset + 16
    end = start + rows * cols * 4
    if len(buf) < end:
        raise ValueError("truncated matrix payload")
    mat = np.frombuffer(buf[start:end], dtype="<f4").reshape(rows, cols).astype(np.float32)
    return mat, end


def write_matrix(path: str | Path, mat: np.ndarray) -> None:
    Path(path).write_bytes(matrix_to_bytes(mat))


def read_matrix(path: str | Path) -> np.ndarray:
    mat, _ = matrix_from_bytes(Path(path).read_bytes())
    return mat


def catalog_to_json(catalog: ItemCatalog) -> list[dict]:
    return [
        {"item_id": it.item_id, "category_path": list(it.category_path), "pool_tags": sorted(it.pool_tags)}
        for it in catalog.items
    ]


def catalog_from_parts(records: list[dict], embeddings: np.ndarray,
                       scenarios: Sequence[ScenarioSpec],
                       branching: Sequence[int]) -> ItemCatalog:
    emb = np.asarray(embeddings, dtype=np.float64)
    # float32 storage loses the last bits of the norm; renormalise on load
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    items = [Item(int(r["item_id"]), tuple(r["category_path"]), emb[i], frozenset(r["pool_tags"]))
             for i, r in enumerate(records)]
    return ItemCatalog(items, scenarios, _category_labels(branching))
