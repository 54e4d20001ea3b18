"""Group policy optimisation: SA-GCPO with GRPO and sequence-ratio (GSPO-style) baselines."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import Batch, NumericalError, PolicyModel, make_optimizer, OptimConfig, sequence_logprobs
from .dataset import TrainingSample, collate
from .decode import BeamConfig, BeamMode, SidTrie, beam_search_batch
from .reward import Request, RewardService, trace_records

logger = logging.getLogger(__name__)

EPS_STD = 1e-6


class Algorithm(str, enum.Enum):
    SA_GCPO = "sa-gcpo"
    GRPO = "grpo"
    GSPO = "gspo"


@dataclass
class SAGCPOConfig:
    algorithm: Algorithm = Algorithm.SA_GCPO
    tau_pos: float = 1.0
    tau_neg: float = 0.95
    clip_eps: float = 0.2          # GRPO token clip
    gspo_clip_eps: float = 0.2     # sequence-ratio clip
    G: int = 8
    synthetic_data_ratio: float = 0.0
    epochs: int = 3
    iters_per_epoch: int = 10
    groups_per_iter: int = 32
    minibatches: int = 2
    lr: float = 3e-5
    seed: int = 0
    top_k: int = 50
    nucleus_p: float = 1.0
    temperature: float = 1.0
    synthetic_threshold: str = "reference"   # "reference" | "none"
    grad_clip: float | None = 1.0

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        if self.tau_pos <= 0 or self.tau_neg <= 0:
            raise ValueError("tau_pos and tau_neg must be > 0")
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if not 0.0 <= self.synthetic_data_ratio <= 1.0:
            raise ValueError("synthetic_data_ratio must lie in [0, 1]")
        if self.synthetic_threshold not in ("reference", "none"):
            raise ValueError("synthetic_threshold must be 'reference' or 'none'")
        if self.minibatches < 1 or self.groups_per_iter < 1:
            raise ValueError("minibatches and groups_per_iter must be >= 1")

    def beam(self, seed: int) -> BeamConfig:
        return BeamConfig(beam_width=self.G, mode=BeamMode.BEAM_SAMPLE, top_k=self.top_k,
                          nucleus_p=self.nucleus_p, temperature=self.temperature, seed=seed)

    def to_json(self) -> dict:
        d = asdict(self)
        d["algorithm"] = self.algorithm.value
        return d


# -- scalar gate maths --------------------------------------------------------------

def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def soft_gate(r: float, tau: float) -> float:
    """f(r) = sigmoid(tau (r - 1)) * 4 / tau."""
    return _sigmoid(tau * (r - 1.0)) * 4.0 / tau


def gate_weight(r: float, tau: float) -> float:
    """df/dr = 4 p (1 - p) with p = sigmoid(tau (r - 1)); equals 1 at r = 1."""
    p = _sigmoid(tau * (r - 1.0))
    return 4.0 * p * (1.0 - p)


def threshold_advantage(adv: float, reward: float, target_reward: float | None) -> float:
    if target_reward is not None and adv > 0 and reward < target_reward:
        return 0.0
    return adv


def gate_and_threshold(r: float, adv: float, reward: float, target_reward: float | None,
                       tau_pos: float = 1.0, tau_neg: float = 0.95) -> float:
    if not r > 0:
        raise ValueError("importance ratio must be > 0")
    gamma = threshold_advantage(adv, reward, target_reward)
    tau = tau_pos if gamma > 0 else tau_neg
    return soft_gate(r, tau) * gamma


def compute_advantages(rewards: Sequence[float], eps_std: float = EPS_STD) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) < 2:
        raise ValueError("need at least 2 rewards")
    std = r.std()
    if std < eps_std:
        return np.zeros_like(r)
    return (r - r.mean()) / std


# -- tensor objectives -----------------------------------------------------------------

def sa_gcpo_token_terms(ratio: torch.Tensor, adv: torch.Tensor, reward: torch.Tensor,
                        target_reward: torch.Tensor, tau_pos: float, tau_neg: float) -> torch.Tensor:
    """ratio (N, L); adv/reward/target_reward (N,) with NaN target = no threshold."""
    has_t = ~torch.isnan(target_reward)
    zero = (adv > 0) & has_t & (reward < torch.nan_to_num(target_reward))
    gamma = torch.where(zero, torch.zeros_like(adv), adv)[:, None]
    tau = torch.where(gamma > 0, torch.full_like(gamma, tau_pos), torch.full_like(gamma, tau_neg))
    return torch.sigmoid(tau * (ratio - 1.0)) * (4.0 / tau) * gamma


def grpo_token_terms(ratio: torch.Tensor, adv: torch.Tensor, eps: float) -> torch.Tensor:
    a = adv[:, None]
    return torch.minimum(ratio * a, ratio.clamp(1 - eps, 1 + eps) * a)


def gspo_sequence_terms(log_ratio: torch.Tensor, adv: torch.Tensor, eps: float) -> torch.Tensor:
    s = torch.exp(log_ratio.mean(dim=1))
    return torch.minimum(s * adv, s.clamp(1 - eps, 1 + eps) * adv)


def group_objective(algorithm: Algorithm, new_lp: torch.Tensor, old_lp: torch.Tensor, adv: torch.Tensor,
                    reward: torch.Tensor, target_reward: torch.Tensor, group_id: torch.Tensor,
                    cfg: SAGCPOConfig) -> torch.Tensor:
    """Mean over groups of the group-average sequence objective."""
    log_ratio = new_lp - old_lp
    algorithm = Algorithm(algorithm)
    if algorithm is Algorithm.SA_GCPO:
        per_seq = sa_gcpo_token_terms(torch.exp(log_ratio), adv, reward, target_reward,
                                      cfg.tau_pos, cfg.tau_neg).mean(1)
    elif algorithm is Algorithm.GRPO:
        per_seq = grpo_token_terms(torch.exp(log_ratio), adv, cfg.clip_eps).mean(1)
    else:
        per_seq = gspo_sequence_terms(log_ratio, adv, cfg.gspo_clip_eps)
    groups, inv, counts = torch.unique(group_id, return_inverse=True, return_counts=True)
    per_group = torch.zeros(len(groups), dtype=per_seq.dtype).index_add(0, inv, per_seq) / counts
    return per_group.mean()


# -- rollouts ---------------------------------------------------------------------------

@dataclass
class RolloutGroup:
    sample_id: int
    sequences: np.ndarray                 # (G, L)
    old_logprobs: np.ndarray              # (G, L)
    rewards: np.ndarray | None = None
    target_reward: float | None = None
    advantages: np.ndarray | None = None
    synthetic: bool = False
    short: bool = False                   # pool ran out before G sequences

    @property
    def size(self) -> int:
        return len(self.sequences)


def rollout_batch(model: PolicyModel, batch: Batch, tries: Sequence[SidTrie], G: int, cfg: SAGCPOConfig,
                  rng: np.random.Generator, sample_ids: Sequence[int] | None = None) -> list[RolloutGroup]:
    beam = cfg.beam(seed=0)
    results = beam_search_batch(model, batch, list(tries), beam, rng)
    ids = list(range(len(batch))) if sample_ids is None else list(sample_ids)
    out = []
    for sid, res in zip(ids, results):
        if len(res) < 2:
            logger.debug("skipping sample %s: %d sequences", sid, len(res))
            continue
        out.append(RolloutGroup(sid, np.array(res.sids, dtype=np.int64), np.stack(res.step_logprobs),
                                short=len(res) < G))
    return out


def rollout(model: PolicyModel, sample: Batch, trie: SidTrie, G: int, cfg: SAGCPOConfig | None = None,
            seed: int = 0) -> RolloutGroup | None:
    cfg = cfg or SAGCPOConfig(G=G)
    groups = rollout_batch(model, sample, [trie], G, cfg, np.random.default_rng(seed))
    return groups[0] if groups else None


def score_rollouts(groups: Sequence[RolloutGroup], samples: Sequence[TrainingSample], service: RewardService,
                   synthetic_threshold: str = "reference", trace: list | None = None) -> None:
    """Fills rewards, R*_g and advantages in place."""
    for g in groups:
        s = samples[g.sample_id]
        req = request_for(s)
        sc = service.score_group(req, [tuple(x) for x in g.sequences])
        g.rewards = sc.totals
        g.advantages = compute_advantages(sc.totals)
        div = float(sc.components["diversity"][0])
        if s.target_codes is not None and s.target_item >= 0:
            g.target_reward = service.target_reward(req, s.target_item, div)
            g.synthetic = False
        else:
            g.synthetic = True
            ref_ok = synthetic_threshold == "reference" and s.reference_item >= 0
            g.target_reward = service.target_reward(req, s.reference_item, div) if ref_ok else None
        if trace is not None:
            trace.extend(trace_records(g.sample_id, sc))


def request_for(s: TrainingSample) -> Request:
    return Request(s.user_id, s.scenario, s.trigger, s.query_text,
                   tuple(int(i) for i in s.short_items if i >= 0))


def _flatten(groups: Sequence[RolloutGroup]):
    rows, seqs, old, adv, rew, tgt, gid = [], [], [], [], [], [], []
    for k, g in enumerate(groups):
        for i in range(g.size):
            rows.append(g.sample_id)
            seqs.append(g.sequences[i])
            old.append(g.old_logprobs[i])
            adv.append(g.advantages[i])
            rew.append(g.rewards[i])
            tgt.append(np.nan if g.target_reward is None else g.target_reward)
            gid.append(k)
    return rows, np.array(seqs), np.array(old), np.array(adv), np.array(rew), np.array(tgt), np.array(gid)


def policy_update(model: PolicyModel, optimizer: torch.optim.Optimizer, batch: Batch,
                  groups: Sequence[RolloutGroup], cfg: SAGCPOConfig, algorithm: Algorithm | None = None,
                  rng: np.random.Generator | None = None) -> list[float]:
    """One pass over the groups in ``cfg.minibatches`` minibatches; returns objective per minibatch.

    ``batch`` holds the prompts, indexed by ``RolloutGroup.sample_id``.
    """
    algorithm = Algorithm(algorithm or cfg.algorithm)
    order = np.arange(len(groups)) if rng is None else rng.permutation(len(groups))
    trace = []
    dt = model.adapter.item_text.dtype
    for chunk in np.array_split(order, min(cfg.minibatches, max(1, len(groups)))):
        if len(chunk) == 0:
            continue
        mb = [groups[i] for i in chunk]
        rows, seqs, old, adv, rew, tgt, gid = _flatten(mb)
        prompts = batch.index(rows)
        new_lp = sequence_logprobs(model, prompts, torch.as_tensor(seqs))
        obj = group_objective(algorithm, new_lp, torch.as_tensor(old, dtype=new_lp.dtype),
                              torch.as_tensor(adv, dtype=dt), torch.as_tensor(rew, dtype=dt),
                              torch.as_tensor(tgt, dtype=dt), torch.as_tensor(gid), cfg)
        if not torch.isfinite(obj):
            bad = [g.sample_id for g in mb]
            raise NumericalError(f"non-finite objective in minibatch with sample ids {bad[:10]}")
        optimizer.zero_grad(set_to_none=True)
        (-obj).backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        trace.append(obj.item())
    return trace


def _step(algorithm: Algorithm, model, optimizer, batch, groups, cfg) -> list[float]:
    return policy_update(model, optimizer, batch, groups, cfg, algorithm)


def sa_gcpo_step(model, optimizer, batch, groups, cfg) -> list[float]:
    return _step(Algorithm.SA_GCPO, model, optimizer, batch, groups, cfg)


def grpo_step(model, optimizer, batch, groups, cfg) -> list[float]:
    return _step(Algorithm.GRPO, model, optimizer, batch, groups, cfg)


def gspo_step(model, optimizer, batch, groups, cfg) -> list[float]:
    return _step(Algorithm.GSPO, model, optimizer, batch, groups, cfg)


# -- post-training loop ---------------------------------------------------------------

@dataclass
class PosttrainResult:
    model: PolicyModel
    epochs: list[dict]
    objective: list[float]
    real_consumed: list[int]
    synthetic_consumed: list[int]
    reward_trace: list[dict] = field(default_factory=list)
    diverged: bool = False


def mix_counts(n: int, rho: float) -> tuple[int, int]:
    """(real, synthetic) prompts per iteration for ratio rho."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("synthetic ratio must lie in [0, 1]")
    n_syn = int(round(rho * n))
    return n - n_syn, n_syn


def posttrain(model: PolicyModel, real: Sequence[TrainingSample], synthetic: Sequence[TrainingSample] | None,
              cfg: SAGCPOConfig, service: RewardService, tries_for: Callable[[TrainingSample], SidTrie],
              evaluate: Callable[[PolicyModel], dict] | None = None, keep_trace: bool = False) -> PosttrainResult:
    """Alternate rollout -> score -> update; evaluates after each epoch."""
    n_real, n_syn = mix_counts(cfg.groups_per_iter, cfg.synthetic_data_ratio)
    if n_real and not real:
        raise ValueError("real samples required for synthetic_data_ratio < 1")
    if n_syn and not synthetic:
        raise ValueError("synthetic samples required for synthetic_data_ratio > 0")
    torch.manual_seed(cfg.seed)
    real_rng = np.random.default_rng([cfg.seed, 1])
    syn_rng = np.random.default_rng([cfg.seed, 2])
    roll_rng = np.random.default_rng([cfg.seed, 3])
    upd_rng = np.random.default_rng([cfg.seed, 4])
    optimizer = make_optimizer(model, OptimConfig(lr=cfg.lr))
    epochs, objective, real_used, syn_used, trace = [], [], [], [], []
    if evaluate is not None:
        epochs.append({"epoch": 0, **evaluate(model)})
    diverged = False
    for epoch in range(1, cfg.epochs + 1):
        for _ in range(cfg.iters_per_epoch):
            picked: list[TrainingSample] = []
            if n_real:
                idx = real_rng.choice(len(real), size=n_real, replace=len(real) < n_real)
                real_used.extend(int(i) for i in idx)
                picked.extend(real[int(i)] for i in idx)
            if n_syn:
                idx = syn_rng.choice(len(synthetic), size=n_syn, replace=len(synthetic) < n_syn)
                syn_used.extend(int(i) for i in idx)
                picked.extend(synthetic[int(i)] for i in idx)
            if not all(torch.isfinite(p).all() for p in model.parameters()):
                diverged = True
                logger.warning("posttrain diverged at epoch %d: non-finite parameters", epoch)
                break
            batch = collate(picked, model.config)
            groups = rollout_batch(model, batch, [tries_for(s) for s in picked], cfg.G, cfg, roll_rng)
            score_rollouts(groups, picked, service, cfg.synthetic_threshold, trace if keep_trace else None)
            try:
                objective.extend(policy_update(model, optimizer, batch, groups, cfg, rng=upd_rng))
            except NumericalError:
                diverged = True
                logger.warning("posttrain diverged at epoch %d", epoch)
                break
        if diverged:
            break
        if evaluate is not None:
            epochs.append({"epoch": epoch, **evaluate(model)})
            logger.info("posttrain epoch %d %s", epoch, epochs[-1])
    model.eval()
    return PosttrainResult(model, epochs, objective, real_used, syn_used, trace, diverged)


def run_manifest(cfg: SAGCPOConfig, result: PosttrainResult, checkpoint_refs: Sequence[str] = ()) -> dict:
    return {"config": cfg.to_json(), "seeds": [cfg.seed], "checkpoint_refs": list(checkpoint_refs),
            "per_epoch_metrics": result.epochs, "diverged": result.diverged}


def write_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
