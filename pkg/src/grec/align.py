"""Adapter projections, Q2I alignment loss and instruction-guided history retrieval."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .catalog import Action, ACTIONS, InteractionEvent
from .instruction import ReasoningInstruction, ScenarioInstruction, text_encode

VAR_EPS = 1e-8
RECENCY_EDGES = (3600, 86400, 7 * 86400)   # <1h, <1d, <7d, older
N_SIDE = len(ACTIONS) + len(RECENCY_EDGES) + 1


def side_features(action: Action | str, age_seconds: int) -> np.ndarray:
    u = np.zeros(N_SIDE)
    u[ACTIONS.index(Action(action))] = 1.0
    bucket = int(np.searchsorted(RECENCY_EDGES, max(0, age_seconds), side="right"))
    u[len(ACTIONS) + bucket] = 1.0
    return u


class ResidualMLP(nn.Module):
    """One-hidden-layer projection with a linear skip path."""

    def __init__(self, d_in: int, d_out: int, d_hidden: int):
        super().__init__()
        self.skip = nn.Linear(d_in, d_out, bias=False)
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x):
        return self.skip(x) + self.fc2(F.gelu(self.fc1(x)))

    @torch.no_grad()
    def identity_init(self) -> None:
        self.skip.weight.copy_(torch.eye(*self.skip.weight.shape))
        self.fc2.weight.zero_()
        self.fc2.bias.zero_()


class Adapter(nn.Module):
    """Holds the scenario/item/side tables, the trainable text branch and both projections."""

    def __init__(self, n_scenarios: int, n_items: int, item_text_features: np.ndarray,
                 d_embed: int = 64, d_side: int = 16, d_align: int = 64, d_proj_hidden: int = 128):
        super().__init__()
        instr_dim = item_text_features.shape[1]
        self.instr_dim = instr_dim
        self.d_embed = d_embed
        self.scn_table = nn.Embedding(n_scenarios, d_embed)
        self.item_table = nn.Embedding(n_items, d_embed)
        self.z_default = nn.Parameter(torch.zeros(d_embed))
        self.side = nn.Linear(N_SIDE, d_side)
        self.g_train = nn.Linear(instr_dim, instr_dim)
        self.default_reasoning = nn.Parameter(torch.zeros(instr_dim))
        self.psi_q = ResidualMLP(2 * d_embed + instr_dim, d_align, d_proj_hidden)
        self.psi_i = ResidualMLP(d_embed + d_side + instr_dim, d_align, d_proj_hidden)
        self.register_buffer("item_text", torch.as_tensor(item_text_features, dtype=torch.get_default_dtype()))
        for emb in (self.scn_table, self.item_table):
            nn.init.normal_(emb.weight, std=0.3)
        with torch.no_grad():
            self.g_train.weight.copy_(torch.eye(instr_dim))
            self.g_train.bias.zero_()

    # -- pieces of the query/item embeddings ---------------------------------
    def trigger_embedding(self, trigger: torch.Tensor) -> torch.Tensor:
        has = trigger >= 0
        emb = self.item_table(trigger.clamp(min=0))
        return torch.where(has[:, None], emb, self.z_default.expand_as(emb))

    def phi_scn(self, scenario: torch.Tensor, trigger: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.scn_table(scenario), self.trigger_embedding(trigger)], dim=-1)

    def reasoning_embedding(self, features: torch.Tensor, is_default: torch.Tensor) -> torch.Tensor:
        enc = self.g_train(features)
        return torch.where(is_default[:, None], self.default_reasoning.expand_as(enc), enc)

    def query(self, scenario, trigger, features, is_default, normalize: bool = True) -> torch.Tensor:
        e_q = torch.cat([self.phi_scn(scenario, trigger), self.reasoning_embedding(features, is_default)], dim=-1)
        q = self.psi_q(e_q)
        return F.normalize(q, dim=-1) if normalize else q

    def target(self, items: torch.Tensor, side: torch.Tensor, normalize: bool = True) -> torch.Tensor:
        e_t = torch.cat([self.item_table(items), self.side(side), self.g_train(self.item_text[items])], dim=-1)
        t = self.psi_i(e_t)
        return F.normalize(t, dim=-1) if normalize else t

    def history(self, items: torch.Tensor, side: torch.Tensor, normalize: bool = True) -> torch.Tensor:
        # long-history branch: frozen text encoder and no gradient into any table
        with torch.no_grad():
            e_h = torch.cat([self.item_table(items), self.side(side), self.item_text[items]], dim=-1)
            h = self.psi_i(e_h)
            return F.normalize(h, dim=-1) if normalize else h


# -- object-level API --------------------------------------------------------

def _scenario_index(names: Sequence[str], name: str) -> int:
    try:
        return list(names).index(name)
    except ValueError:
        raise KeyError(f"unknown scenario {name!r}") from None


def embed_query(I_s: ScenarioInstruction, I_r: ReasoningInstruction, params: Adapter,
                scenario_names: Sequence[str]) -> torch.Tensor:
    s = torch.tensor([_scenario_index(scenario_names, I_s.scenario_id)])
    z = torch.tensor([I_s.trigger_item if I_s.has_trigger else -1])
    feats = torch.tensor(I_r.features(params.instr_dim)[None, :], dtype=torch.get_default_dtype())
    is_def = torch.tensor([I_r.is_default])
    return params.query(s, z, feats, is_def)[0]


def _event_side(event: InteractionEvent, now: int | None) -> torch.Tensor:
    age = 0 if now is None else now - event.timestamp
    return torch.tensor(side_features(event.action, age)[None, :], dtype=torch.get_default_dtype())


def embed_history_item(event: InteractionEvent, params: Adapter, now: int | None = None) -> torch.Tensor:
    if not 0 <= event.item_id < params.item_table.num_embeddings:
        raise KeyError(f"unresolvable item {event.item_id}")
    return params.history(torch.tensor([event.item_id]), _event_side(event, now))[0]


def embed_target(event: InteractionEvent, params: Adapter, now: int | None = None) -> torch.Tensor:
    if not 0 <= event.item_id < params.item_table.num_embeddings:
        raise KeyError(f"unresolvable item {event.item_id}")
    return params.target(torch.tensor([event.item_id]), _event_side(event, now))[0]


# -- Q2I loss ----------------------------------------------------------------

@dataclass
class AlignedBatch:
    Q: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64)
        if self.Q.shape != self.T.shape or self.Q.ndim != 2:
            raise ValueError("Q and T must be matching (B, D) matrices")
        if self.Q.shape[0] < 2:
            raise ValueError("batch size must be >= 2 (variance undefined)")
        for name, m in (("Q", self.Q), ("T", self.T)):
            norms = np.linalg.norm(m, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError(f"rows of {name} must be unit-norm")


def _batch_var(m):
    # mean over dimensions of the population variance across the batch
    return ((m - m.mean(0)) ** 2).mean()


def q2i_loss(batch: AlignedBatch, lambda_r: float, lambda_d: float,
             eps: float = VAR_EPS) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Loss value and exact gradients with respect to (Q, T)."""
    Q, T = batch.Q, batch.T
    B, D = Q.shape
    align = -(Q * T).sum() / B
    vq, vt = _batch_var(Q), _batch_var(T)
    prod = vq * vt + eps
    reg = -np.log(prod)
    G = Q @ Q.T
    M = G - np.diag(np.diag(G))
    decor = (M ** 2).sum() / (B * B - B)
    loss = align + lambda_r * reg + lambda_d * decor

    dvq = 2.0 * (Q - Q.mean(0)) / (B * D)
    dvt = 2.0 * (T - T.mean(0)) / (B * D)
    dQ = -T / B - lambda_r * (vt / prod) * dvq + lambda_d * 4.0 * (M @ Q) / (B * B - B)
    dT = -Q / B - lambda_r * (vq / prod) * dvt
    return float(loss), (dQ, dT)


def q2i_terms(Q: torch.Tensor, T: torch.Tensor, lambda_r: float, lambda_d: float,
              eps: float = VAR_EPS) -> dict[str, torch.Tensor]:
    """Differentiable torch form used inside training; same formula as :func:`q2i_loss`."""
    B = Q.shape[0]
    if B < 2:
        raise ValueError("batch size must be >= 2 (variance undefined)")
    align = -(Q * T).sum() / B
    vq = ((Q - Q.mean(0)) ** 2).mean()
    vt = ((T - T.mean(0)) ** 2).mean()
    reg = -torch.log(vq * vt + eps)
    G = Q @ Q.T
    off = G - torch.diag(torch.diagonal(G))
    decor = (off ** 2).sum() / (B * B - B)
    total = align + lambda_r * reg + lambda_d * decor
    return {"align": align, "reg": reg, "decor": decor, "total": total}


# -- IGR ---------------------------------------------------------------------

def igr_retrieve(q: np.ndarray, history: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest q.h scores, descending, earlier index wins ties."""
    if k < 1:
        raise ValueError("k must be >= 1")
    history = np.asarray(history)
    if history.size == 0:
        return []
    scores = history @ np.asarray(q)
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:k]]


def igr_select_batch(q: torch.Tensor, h: torch.Tensor, valid: torch.Tensor, k: int) -> torch.Tensor:
    """Batched IGR: q (B, D), h (B, M, D), valid (B, M) -> (B, k) indices, -1 where absent.

    Invalid slots score -inf; among equal scores the earlier slot is kept first.
    """
    scores = torch.einsum("bd,bmd->bm", q, h).masked_fill(~valid, float("-inf"))
    m = scores.shape[1]
    k_eff = min(k, m)
    # stable descending sort
    order = torch.sort(scores, dim=1, descending=True, stable=True).indices[:, :k_eff]
    picked_valid = torch.gather(valid, 1, order)
    order = order.masked_fill(~picked_valid, -1)
    if k_eff < k:
        order = torch.cat([order, order.new_full((order.shape[0], k - k_eff), -1)], dim=1)
    return order
