"""Scenario / reasoning instructions, decoder prompt assembly and the instruction store."""

from __future__ import annotations

import enum
import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .catalog import InteractionEvent, ItemCatalog, UserProfile


class _Default:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "DEFAULT"

    def __reduce__(self):
        return (_Default, ())


DEFAULT = _Default()
"""Sentinel trigger meaning "no trigger item" (the learnable default embedding)."""


@dataclass(frozen=True)
class ScenarioInstruction:
    scenario_id: str
    trigger_item: int | _Default = DEFAULT

    @property
    def has_trigger(self) -> bool:
        return self.trigger_item is not DEFAULT

    def masked(self) -> "ScenarioInstruction":
        return ScenarioInstruction(self.scenario_id, DEFAULT)


def scenario_instruction(scenario, trigger_item_id: int | None) -> ScenarioInstruction:
    """Build I_s, enforcing that triggerless scenarios always carry DEFAULT."""
    if not scenario.trigger_bearing:
        return ScenarioInstruction(scenario.name, DEFAULT)
    return ScenarioInstruction(scenario.name, DEFAULT if trigger_item_id is None else int(trigger_item_id))


class ReasoningSource(str, enum.Enum):
    QUERY = "query"
    DEFAULT = "default"


@dataclass(frozen=True)
class ReasoningInstruction:
    source: ReasoningSource
    text: str | None = None

    @classmethod
    def from_query(cls, text: str) -> "ReasoningInstruction":
        return cls(ReasoningSource.QUERY, text)

    @classmethod
    def default(cls) -> "ReasoningInstruction":
        return cls(ReasoningSource.DEFAULT, None)

    @property
    def is_default(self) -> bool:
        return self.source is ReasoningSource.DEFAULT

    def features(self, dim: int) -> np.ndarray:
        """Hashed text features; zeros for the default source (the model owns that vector)."""
        if self.is_default:
            return np.zeros(dim)
        return text_encode(self.text or "", dim)


class IntegrationStrategy(str, enum.Enum):
    NO_INSTRUCTION = "no_instruction"
    REPLACE_BOS = "replace_bos"
    ADD_TO_BOS = "add_to_bos"
    INSERT_LEFT = "insert_left_of_bos"
    INSERT_RIGHT = "insert_right_of_bos"


class InstructionTokenMode(str, enum.Enum):
    SCENARIO_ONLY = "scenario_only"
    TRIGGER_ONLY = "trigger_only"
    CONCATENATED = "concatenated"
    FUSED = "fused"


def instruction_token_count(mode: InstructionTokenMode) -> int:
    return 2 if mode is InstructionTokenMode.CONCATENATED else 1


def prompt_length(mode: InstructionTokenMode, strategy: IntegrationStrategy) -> int:
    n = instruction_token_count(mode)
    if strategy is IntegrationStrategy.NO_INSTRUCTION:
        return 1
    if strategy in (IntegrationStrategy.REPLACE_BOS, IntegrationStrategy.ADD_TO_BOS):
        return n
    return n + 1


# -- text features -----------------------------------------------------------

_TOKEN_RE = re.compile(r"[^\s,;:!?]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _hash_token(tok: str) -> int:
    return int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "little")


def text_encode(text: str, dim: int = 32) -> np.ndarray:
    """Signed feature hashing of the token bag, unit-normalised (zeros for no tokens)."""
    vec = np.zeros(dim)
    for tok in tokenize(text):
        h = _hash_token(tok)
        vec[h % dim] += 1.0 if (h >> 32) & 1 else -1.0
    norm = np.linalg.norm(vec)
    # a bag whose signed buckets cancel exactly is treated like the empty text
    return vec / norm if norm > 0 else vec


# -- instruction text synthesis -----------------------------------------------

GENERIC_INSTRUCTION = "recommend popular everyday items for a general shopper"


def _daypart(t: int) -> str:
    hour = (int(t) % 86400) // 3600
    if hour < 6:
        return "late-night"
    if hour < 12:
        return "morning"
    if hour < 18:
        return "afternoon"
    return "evening"


def _profile_bucket(profile: UserProfile | None) -> str | None:
    if profile is None:
        return None
    v = np.asarray(profile.profile_vector, dtype=np.float64)
    if v.size < 3 or not np.any(v):
        return None
    age = "young" if v[0] < 0.5 else "mature"
    spend = "budget" if v[2] < 0.5 else "premium"
    return f"{age} {spend}"


def synthesize_instruction_text(profile: UserProfile | None, context: tuple[int, str] | None,
                                recent_events: Sequence[InteractionEvent],
                                catalog: ItemCatalog | None = None) -> str:
    """Template stand-in for the near-line reasoning pipeline."""
    bucket = _profile_bucket(profile)
    dominant = None
    if recent_events and catalog is not None:
        counts = Counter(catalog[e.item_id].category_path[0] for e in recent_events if e.item_id in catalog)
        if counts:
            top = max(counts.values())
            dominant = min(c for c, n in counts.items() if n == top)
    if bucket is None and dominant is None:
        return GENERIC_INSTRUCTION
    parts = [f"{bucket} shopper" if bucket else "shopper"]
    if context is not None:
        when, where = context
        parts.append(f"in {where} during the {_daypart(when)}")
    if dominant:
        parts.append(f"is looking for {dominant}")
    else:
        parts.append("may like popular items")
    return " ".join(parts)


# -- prompt assembly ---------------------------------------------------------

class PromptEmbedder(Protocol):
    d_hidden: int
    instr_dim: int
    fuse_proj: torch.nn.Module | None

    def bos_token(self, batch: int) -> torch.Tensor: ...
    def scenario_index(self, name: str) -> int: ...
    def scenario_tokens(self, scenario: torch.Tensor) -> torch.Tensor: ...
    def trigger_tokens(self, trigger: torch.Tensor) -> torch.Tensor: ...
    def reasoning_tokens(self, features: torch.Tensor, is_default: torch.Tensor) -> torch.Tensor: ...


@dataclass
class PromptTokens:
    prefix: torch.Tensor                  # (B, P, d) decoder-side prefix
    reasoning: torch.Tensor | None        # (B, d) reasoning slot fed to the encoder, None = unused

    @property
    def length(self) -> int:
        return self.prefix.shape[1]


class MissingProjectionError(RuntimeError):
    pass


def assemble_prefix(bos: torch.Tensor, scen: torch.Tensor, trig: torch.Tensor,
                    fuse_proj: torch.nn.Module | None, mode: InstructionTokenMode,
                    strategy: IntegrationStrategy) -> torch.Tensor:
    """Tensor-level prompt assembly; every input is (B, d)."""
    if strategy is IntegrationStrategy.NO_INSTRUCTION:
        return bos[:, None, :]
    if mode is InstructionTokenMode.SCENARIO_ONLY:
        instr = [scen]
    elif mode is InstructionTokenMode.TRIGGER_ONLY:
        instr = [trig]
    elif mode is InstructionTokenMode.CONCATENATED:
        instr = [scen, trig]
    else:
        if fuse_proj is None:
            raise MissingProjectionError("fused instruction mode needs a trained projection")
        instr = [fuse_proj(torch.cat([scen, trig], dim=-1))]
    if strategy is IntegrationStrategy.REPLACE_BOS:
        toks = instr
    elif strategy is IntegrationStrategy.ADD_TO_BOS:
        toks = [bos + instr[0]] + instr[1:]
    elif strategy is IntegrationStrategy.INSERT_LEFT:
        toks = instr + [bos]
    else:
        toks = [bos] + instr
    return torch.stack(toks, dim=1)


def instruction_tensors(embedder: PromptEmbedder, I_s: Sequence[ScenarioInstruction],
                        I_r: Sequence[ReasoningInstruction]):
    scen = torch.tensor([embedder.scenario_index(x.scenario_id) for x in I_s], dtype=torch.long)
    trig = torch.tensor([x.trigger_item if x.has_trigger else -1 for x in I_s], dtype=torch.long)
    feats = torch.tensor(np.stack([r.features(embedder.instr_dim) for r in I_r]),
                         dtype=torch.get_default_dtype())
    is_def = torch.tensor([r.is_default for r in I_r], dtype=torch.bool)
    return scen, trig, feats, is_def


def build_prompt(embedder: PromptEmbedder,
                 I_s: ScenarioInstruction | Sequence[ScenarioInstruction],
                 I_r: ReasoningInstruction | Sequence[ReasoningInstruction],
                 mode: InstructionTokenMode, strategy: IntegrationStrategy) -> PromptTokens:
    if isinstance(I_s, ScenarioInstruction):
        I_s = [I_s]
    if isinstance(I_r, ReasoningInstruction):
        I_r = [I_r]
    if len(I_s) != len(I_r):
        raise ValueError("I_s and I_r batch sizes differ")
    scen, trig, feats, is_def = instruction_tensors(embedder, I_s, I_r)
    return build_prompt_tensors(embedder, scen, trig, feats, is_def, mode, strategy)


def build_prompt_tensors(embedder: PromptEmbedder, scen: torch.Tensor, trig: torch.Tensor,
                         feats: torch.Tensor, is_def: torch.Tensor, mode: InstructionTokenMode,
                         strategy: IntegrationStrategy) -> PromptTokens:
    b = scen.shape[0]
    bos = embedder.bos_token(b)
    if strategy is IntegrationStrategy.NO_INSTRUCTION:
        return PromptTokens(bos[:, None, :], None)
    prefix = assemble_prefix(bos, embedder.scenario_tokens(scen), embedder.trigger_tokens(trig),
                             embedder.fuse_proj, mode, strategy)
    return PromptTokens(prefix, embedder.reasoning_tokens(feats, is_def))


# -- near-line store ---------------------------------------------------------

class ClockRegressionError(ValueError):
    pass


@dataclass
class StoredInstruction:
    text: str
    embedding: np.ndarray = field(repr=False)
    updated_at: int


class InstructionStore:
    """Keyed instruction store with time-window write coalescing.

    The first event for a user, or the first event after the window has elapsed
    since the last write, regenerates and writes; events inside the window are
    buffered and folded into the next regeneration.
    """

    def __init__(self, regenerate: Callable[[int, Sequence[InteractionEvent]], str],
                 window_seconds: int = 300, dim: int = 32):
        self.regenerate = regenerate
        self.window = window_seconds
        self.dim = dim
        self.entries: dict[int, StoredInstruction] = {}
        self.buffers: dict[int, list[InteractionEvent]] = {}
        self.writes = 0
        self._last_seen: dict[int, int] = {}

    def get(self, user_id: int) -> StoredInstruction | None:
        return self.entries.get(user_id)

    def update(self, user_id: int, event: InteractionEvent, now: int) -> bool:
        """Returns True when this call wrote a fresh instruction."""
        last = self._last_seen.get(user_id)
        if last is not None and now < last:
            raise ClockRegressionError(f"user {user_id}: now={now} < last={last}")
        self._last_seen[user_id] = now
        self.buffers.setdefault(user_id, []).append(event)
        entry = self.entries.get(user_id)
        if entry is not None and now - entry.updated_at < self.window:
            return False
        return self._write(user_id, now)

    def flush(self, now: int) -> int:
        """Write every buffered user whose window has elapsed; returns write count."""
        n = 0
        for uid, buf in list(self.buffers.items()):
            entry = self.entries.get(uid)
            if buf and (entry is None or now - entry.updated_at >= self.window):
                n += self._write(uid, now)
        return n

    def _write(self, user_id: int, now: int) -> bool:
        events = self.buffers.pop(user_id, [])
        text = self.regenerate(user_id, events)
        self.entries[user_id] = StoredInstruction(text, text_encode(text, self.dim), now)
        self.writes += 1
        return True

    def snapshot_records(self) -> list[dict]:
        return [
            {"user_id": uid, "text": e.text, "embedding_ref": f"embeddings.bin#{row}", "updated_at": e.updated_at}
            for row, (uid, e) in enumerate(sorted(self.entries.items()))
        ]

    def write_snapshot(self, directory: str | Path) -> None:
        from .catalog import write_matrix

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "instructions.jsonl", "w", encoding="utf-8") as fh:
            for rec in self.snapshot_records():
                fh.write(json.dumps(rec) + "\n")
        mat = np.stack([e.embedding for _, e in sorted(self.entries.items())]) if self.entries \
            else np.zeros((0, self.dim))
        write_matrix(directory / "embeddings.bin", mat)


def store_update(store: InstructionStore, user_id: int, event: InteractionEvent,
                 now: int) -> InstructionStore:
    store.update(user_id, event, now)
    return store
