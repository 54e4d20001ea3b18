"""Turns world events into collated model batches (training, evaluation and synthetic RL prompts)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .backbone import Batch, ModelConfig
from .catalog import ACTIONS, Action, InteractionEvent, ItemCatalog, UserProfile, World
from .instruction import text_encode

CONVERSIONS = (Action.CART, Action.PURCHASE)


def item_text_features(catalog: ItemCatalog, dim: int) -> np.ndarray:
    return np.stack([text_encode(it.text, dim) for it in catalog.items])


def codes_matrix(assignments: Mapping[int, Sequence[int]], n_items: int) -> np.ndarray:
    missing = [i for i in range(n_items) if i not in assignments]
    if missing:
        raise KeyError(f"no SID for items {missing[:5]}")
    return np.array([list(assignments[i]) for i in range(n_items)], dtype=np.int64)


@dataclass
class TrainingSample:
    """One request: encoder context, instruction fields and (optionally) the logged target."""

    user_id: int
    timestamp: int
    scenario: int
    trigger: int                      # -1 = no trigger
    query_text: str | None
    profile: np.ndarray
    short_items: np.ndarray
    short_actions: np.ndarray
    long_items: np.ndarray
    long_actions: np.ndarray
    long_ages: np.ndarray
    target_item: int = -1
    target_codes: tuple[int, ...] | None = None
    action: Action = Action.CLICK
    reference_item: int = -1          # latest real interaction, used as a reward reference
    positives: frozenset[int] = field(default_factory=frozenset)


def _pad(values, width, fill):
    out = np.full(width, fill, dtype=np.int64)
    values = list(values)[-width:] if width else []
    # right-aligned so the newest entry sits last
    if values:
        out[width - len(values):] = values
    return out


def _user_index(events: Sequence[InteractionEvent]) -> dict[int, list[InteractionEvent]]:
    by_user: dict[int, list[InteractionEvent]] = {}
    for e in events:
        by_user.setdefault(e.user_id, []).append(e)
    for evs in by_user.values():
        evs.sort(key=lambda e: e.timestamp)
    return by_user


def _context(prior: Sequence[InteractionEvent], now: int, cfg: ModelConfig):
    short = prior[-cfg.short_len:] if cfg.short_len else []
    older = prior[: len(prior) - len(short)][-cfg.long_window:]
    a_idx = {a: i for i, a in enumerate(ACTIONS)}
    s_items = _pad([e.item_id for e in short], cfg.short_len, -1)
    s_act = _pad([a_idx[e.action] for e in short], cfg.short_len, 0)
    # long candidates left-aligned oldest -> newest, padded at the end
    m = cfg.long_window
    l_items = np.full(m, -1, dtype=np.int64)
    l_act = np.zeros(m, dtype=np.int64)
    l_age = np.zeros(m, dtype=np.int64)
    for j, e in enumerate(older):
        l_items[j] = e.item_id
        l_act[j] = a_idx[e.action]
        l_age[j] = now - e.timestamp
    return s_items, s_act, l_items, l_act, l_age


def build_samples(catalog: ItemCatalog, users: Sequence[UserProfile], history: Sequence[InteractionEvent],
                  targets: Sequence[InteractionEvent], item_codes: np.ndarray, cfg: ModelConfig,
                  with_positives: bool = False) -> list[TrainingSample]:
    """One sample per target event; context = the user's events strictly before it."""
    profiles = {u.user_id: u.profile_vector for u in users}
    by_user = _user_index(history)
    times = {uid: np.array([e.timestamp for e in evs]) for uid, evs in by_user.items()}
    conv_by_day: dict[tuple[int, int], list[InteractionEvent]] = {}
    if with_positives:
        for e in targets:
            if e.action in CONVERSIONS:
                conv_by_day.setdefault((e.user_id, e.day), []).append(e)
    out = []
    for e in targets:
        if e.user_id not in profiles:
            raise KeyError(f"unknown user {e.user_id}")
        evs = by_user.get(e.user_id, [])
        cut = int(np.searchsorted(times[e.user_id], e.timestamp, side="left")) if evs else 0
        prior = evs[:cut]
        s_items, s_act, l_items, l_act, l_age = _context(prior, e.timestamp, cfg)
        positives = frozenset()
        if with_positives:
            positives = frozenset(p.item_id for p in conv_by_day.get((e.user_id, e.day), [])
                                  if p.timestamp >= e.timestamp)
        out.append(TrainingSample(
            user_id=e.user_id, timestamp=e.timestamp, scenario=catalog.scenario_index(e.scenario_id),
            trigger=-1 if e.trigger_item_id is None else int(e.trigger_item_id),
            query_text=e.query_text, profile=np.asarray(profiles[e.user_id], dtype=np.float64),
            short_items=s_items, short_actions=s_act, long_items=l_items, long_actions=l_act,
            long_ages=l_age, target_item=e.item_id,
            target_codes=tuple(int(c) for c in item_codes[e.item_id]), action=e.action,
            reference_item=prior[-1].item_id if prior else -1, positives=positives,
        ))
    return out


def synthetic_samples(world: World, history: Sequence[InteractionEvent], cfg: ModelConfig, n: int,
                      at_time: int, rng: np.random.Generator) -> list[TrainingSample]:
    """Prompts with no logged target: a user's state at ``at_time`` under a sampled instruction."""
    catalog = world.catalog
    by_user = _user_index([e for e in history if e.timestamp < at_time])
    uids = sorted(uid for uid, evs in by_user.items() if evs)
    if not uids:
        raise ValueError("no user history to build synthetic samples from")
    traffic = world.config.traffic()
    profiles = {u.user_id: u.profile_vector for u in world.users}
    out = []
    for _ in range(n):
        uid = uids[int(rng.integers(len(uids)))]
        prior = by_user[uid]
        s = int(rng.choice(len(catalog.scenarios), p=traffic))
        sc = catalog.scenarios[s]
        anchor = prior[int(rng.integers(max(0, len(prior) - cfg.short_len), len(prior)))].item_id
        trigger = anchor if sc.trigger_bearing else -1
        query = None
        if sc.has_query:
            path = catalog[anchor].category_path
            query = f"{path[0]} {path[1]}"
        s_items, s_act, l_items, l_act, l_age = _context(prior, at_time, cfg)
        out.append(TrainingSample(
            user_id=uid, timestamp=at_time, scenario=s, trigger=trigger, query_text=query,
            profile=np.asarray(profiles[uid], dtype=np.float64), short_items=s_items,
            short_actions=s_act, long_items=l_items, long_actions=l_act, long_ages=l_age,
            reference_item=prior[-1].item_id,
        ))
    return out


def collate(samples: Sequence[TrainingSample], cfg: ModelConfig, dtype=None) -> Batch:
    if not samples:
        raise ValueError("no samples to collate")
    dtype = dtype or torch.get_default_dtype()
    L = cfg.sid_depth
    for s in samples:
        if s.target_codes is not None:
            if len(s.target_codes) != L or not all(0 <= c < cfg.sid_vocab for c in s.target_codes):
                raise ValueError(f"target codes {s.target_codes} out of range for depth {L}, vocab {cfg.sid_vocab}")
        if len(s.short_items) != cfg.short_len or len(s.long_items) != cfg.long_window:
            raise ValueError("history arrays do not match the model config")
        if len(s.profile) != cfg.profile_dim:
            raise ValueError("profile vector does not match profile_dim")
    has_target = all(s.target_codes is not None for s in samples)
    a_idx = {a: i for i, a in enumerate(ACTIONS)}
    feats = np.stack([text_encode(s.query_text, cfg.instr_dim) if s.query_text else np.zeros(cfg.instr_dim)
                      for s in samples])
    return Batch(
        profile=torch.tensor(np.stack([s.profile for s in samples]), dtype=dtype),
        short_items=torch.tensor(np.stack([s.short_items for s in samples])),
        short_actions=torch.tensor(np.stack([s.short_actions for s in samples])),
        long_items=torch.tensor(np.stack([s.long_items for s in samples])),
        long_actions=torch.tensor(np.stack([s.long_actions for s in samples])),
        long_ages=torch.tensor(np.stack([s.long_ages for s in samples]), dtype=dtype),
        scenario=torch.tensor([s.scenario for s in samples]),
        trigger=torch.tensor([s.trigger for s in samples]),
        ir_features=torch.tensor(feats, dtype=dtype),
        ir_default=torch.tensor([s.query_text is None for s in samples]),
        target=torch.tensor([list(s.target_codes) for s in samples]) if has_target else None,
        target_item=torch.tensor([s.target_item for s in samples]),
        action=torch.tensor([a_idx[s.action] for s in samples]),
    )


def mask_trigger(batch: Batch) -> Batch:
    return batch.replace(trigger=torch.full_like(batch.trigger, -1))
