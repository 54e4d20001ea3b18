"""Instruction-conditioned encoder-decoder over semantic-ID tokens.

Gradients come from torch autograd; the finite-difference tests in the suite are
the contract that the whole forward pass is differentiated exactly.
"""

from __future__ import annotations

import copy
import enum
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .align import Adapter, q2i_terms
from .catalog import ACTIONS, Action
from .instruction import (
    InstructionTokenMode,
    IntegrationStrategy,
    PromptTokens,
    build_prompt_tensors,
)

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"GRCK"
CKPT_VERSION = 1

DEFAULT_NTP_WEIGHTS = {Action.PURCHASE: 4.0, Action.CART: 2.0, Action.CLICK: 1.0}

# encoder segment ids
SEG_PROFILE, SEG_SHORT, SEG_LONG, SEG_REASON = range(4)


class NumericalError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_hidden: int = 64
    d_ffn: int = 128
    n_heads: int = 4
    sid_depth: int = 3
    sid_vocab: int = 256
    short_len: int = 10
    igr_k: int = 8
    long_window: int = 50
    profile_dim: int = 8
    instr_dim: int = 32
    d_side: int = 16
    d_align: int = 64
    strategy: IntegrationStrategy = IntegrationStrategy.INSERT_RIGHT
    mode: InstructionTokenMode = InstructionTokenMode.FUSED
    use_igr: bool = True

    def __post_init__(self):
        self.strategy = IntegrationStrategy(self.strategy)
        self.mode = InstructionTokenMode(self.mode)
        if self.d_hidden % self.n_heads:
            raise ValueError("d_hidden must be divisible by n_heads")
        for name in ("n_enc_layers", "n_dec_layers", "d_hidden", "d_ffn", "sid_depth", "sid_vocab",
                     "short_len", "igr_k", "long_window", "profile_dim", "instr_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def max_history_len(self) -> int:
        return self.short_len + self.igr_k

    @property
    def bos_id(self) -> int:
        return self.sid_vocab

    @property
    def eos_id(self) -> int:
        return self.sid_vocab + 1

    @property
    def pad_id(self) -> int:
        return self.sid_vocab + 2

    def to_json(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- batches -----------------------------------------------------------------

@dataclass
class Batch:
    """Collated model input. History item ids are -1 where padded."""

    profile: torch.Tensor          # (B, P)
    short_items: torch.Tensor      # (B, S)
    short_actions: torch.Tensor    # (B, S)
    long_items: torch.Tensor       # (B, M) candidates for IGR
    long_actions: torch.Tensor     # (B, M)
    long_ages: torch.Tensor        # (B, M) seconds before the request
    scenario: torch.Tensor         # (B,)
    trigger: torch.Tensor          # (B,) -1 = default
    ir_features: torch.Tensor      # (B, instr_dim)
    ir_default: torch.Tensor       # (B,) bool
    target: torch.Tensor | None = None   # (B, L) codes
    target_item: torch.Tensor | None = None  # (B,)
    action: torch.Tensor | None = None   # (B,) index into ACTIONS

    def __len__(self) -> int:
        return self.profile.shape[0]

    def index(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = None if v is None else v[idx]
        return Batch(**kw)

    def repeat_interleave(self, n: int) -> "Batch":
        return self.index(torch.arange(len(self)).repeat_interleave(n))

    def replace(self, **kw) -> "Batch":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return Batch(**d)

    def to(self, dtype) -> "Batch":
        return self.replace(profile=self.profile.to(dtype), long_ages=self.long_ages.to(dtype),
                            ir_features=self.ir_features.to(dtype))

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        kw = {}
        for f in fields(Batch):
            vals = [getattr(b, f.name) for b in batches]
            kw[f.name] = None if any(v is None for v in vals) else torch.cat(vals)
        return Batch(**kw)


# -- layers ------------------------------------------------------------------

class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.h = n_heads
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(d, 2 * d)
        self.o = nn.Linear(d, d)

    def forward(self, x, mem, mask):
        # mask: bool broadcastable to (B, h, Tq, Tk), True = attend
        b, tq, d = x.shape
        tk = mem.shape[1]
        q = self.q(x).view(b, tq, self.h, d // self.h).transpose(1, 2)
        k, v = self.kv(mem).view(b, tk, 2, self.h, d // self.h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.h)
        scores = scores.masked_fill(~mask, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, tq, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ffn: int):
        super().__init__()
        self.fc1 = nn.Linear(d, d_ffn)
        self.fc2 = nn.Linear(d_ffn, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d, n_heads, d_ffn):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.att = MultiHeadAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.ff = FeedForward(d, d_ffn)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.att(h, h, mask)
        return x + self.ff(self.ln2(x))


class DecoderLayer(nn.Module):
    def __init__(self, d, n_heads, d_ffn):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_att = MultiHeadAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.cross_att = MultiHeadAttention(d, n_heads)
        self.ln3 = nn.LayerNorm(d)
        self.ff = FeedForward(d, d_ffn)

    def forward(self, x, mem, self_mask, mem_mask):
        h = self.ln1(x)
        x = x + self.self_att(h, h, self_mask)
        x = x + self.cross_att(self.ln2(x), mem, mem_mask)
        return x + self.ff(self.ln3(x))


# -- model -------------------------------------------------------------------

@dataclass
class EncoderState:
    memory: torch.Tensor   # (B, T, d)
    mask: torch.Tensor     # (B, T) True = valid


class PolicyModel(nn.Module):
    """Encoder-decoder policy pi_theta with instruction prompt and shared adapter tables."""

    def __init__(self, config: ModelConfig, n_scenarios: int, scenario_names: Sequence[str],
                 item_codes: np.ndarray, item_text_features: np.ndarray):
        super().__init__()
        self.config = config
        cfg = config
        d = cfg.d_hidden
        self.d_hidden = d
        self.instr_dim = cfg.instr_dim
        self.scenario_names = tuple(scenario_names)
        if len(self.scenario_names) != n_scenarios:
            raise ValueError("scenario_names length mismatch")
        codes = np.asarray(item_codes)
        if codes.ndim != 2 or codes.shape[1] != cfg.sid_depth:
            raise ValueError("item_codes must be (n_items, sid_depth)")
        if codes.min() < 0 or codes.max() >= cfg.sid_vocab:
            raise ValueError("item codes out of range")
        if item_text_features.shape[1] != cfg.instr_dim:
            raise ValueError("item text features must have instr_dim columns")
        self.register_buffer("item_codes", torch.as_tensor(codes, dtype=torch.long))
        self.adapter = Adapter(n_scenarios, len(codes), item_text_features, d_embed=d,
                               d_side=cfg.d_side, d_align=cfg.d_align)
        vocab = cfg.sid_vocab + 3
        self.code_emb = nn.ModuleList([nn.Embedding(vocab, d) for _ in range(cfg.sid_depth)])
        self.action_emb = nn.Embedding(len(ACTIONS), d)
        self.segment_emb = nn.Embedding(4, d)
        self.profile_proj = nn.Linear(cfg.profile_dim, d)
        self.reasoning_proj = nn.Linear(cfg.instr_dim, d)
        self.enc_pos = nn.Embedding(2 + cfg.max_history_len, d)
        self.dec_pos = nn.Embedding(3 + cfg.sid_depth, d)
        self.encoder = nn.ModuleList([EncoderLayer(d, cfg.n_heads, cfg.d_ffn) for _ in range(cfg.n_enc_layers)])
        self.decoder = nn.ModuleList([DecoderLayer(d, cfg.n_heads, cfg.d_ffn) for _ in range(cfg.n_dec_layers)])
        self.enc_ln = nn.LayerNorm(d)
        self.dec_ln = nn.LayerNorm(d)
        self.heads = nn.ModuleList([nn.Linear(d, cfg.sid_vocab) for _ in range(cfg.sid_depth)])
        self.fuse_proj = nn.Linear(2 * d, d) if cfg.mode is InstructionTokenMode.FUSED else None
        self._init_weights()

    def _init_weights(self):
        for name, p in self.named_parameters():
            if name.startswith("adapter."):
                continue
            if p.dim() >= 2:
                nn.init.normal_(p, std=0.02 if "emb" in name or "pos" in name else 1.0 / math.sqrt(p.shape[1]))
            elif name.endswith("bias"):
                nn.init.zeros_(p)

    # -- prompt embedder protocol ------------------------------------------
    def bos_token(self, batch: int) -> torch.Tensor:
        return self.code_emb[0].weight[self.config.bos_id].expand(batch, -1)

    def scenario_index(self, name: str) -> int:
        try:
            return self.scenario_names.index(name)
        except ValueError:
            raise KeyError(f"unknown scenario {name!r}") from None

    def scenario_tokens(self, scenario: torch.Tensor) -> torch.Tensor:
        return self.adapter.scn_table(scenario)

    def item_tokens(self, items: torch.Tensor) -> torch.Tensor:
        codes = self.item_codes[items.clamp(min=0)]
        return sum(self.code_emb[lvl](codes[..., lvl]) for lvl in range(self.config.sid_depth))

    def trigger_tokens(self, trigger: torch.Tensor) -> torch.Tensor:
        tok = self.item_tokens(trigger)
        return torch.where((trigger >= 0)[:, None], tok, self.adapter.z_default.expand_as(tok))

    def reasoning_tokens(self, features: torch.Tensor, is_default: torch.Tensor) -> torch.Tensor:
        return self.reasoning_proj(self.adapter.reasoning_embedding(features, is_default))

    # -- encoder -----------------------------------------------------------
    def prompt(self, batch: Batch) -> PromptTokens:
        return build_prompt_tensors(self, batch.scenario, batch.trigger, batch.ir_features,
                                    batch.ir_default, self.config.mode, self.config.strategy)

    def instruction_active(self) -> bool:
        return self.config.strategy is not IntegrationStrategy.NO_INSTRUCTION

    def select_long_history(self, batch: Batch) -> torch.Tensor:
        """IGR over the long-history candidates; recency fallback when IGR is off."""
        from .align import N_SIDE, RECENCY_EDGES

        k = self.config.igr_k
        valid = batch.long_items >= 0
        if self.config.use_igr and self.instruction_active():
            with torch.no_grad():
                q = self.adapter.query(batch.scenario, batch.trigger, batch.ir_features, batch.ir_default)
                b, m = batch.long_items.shape
                side = torch.zeros(b, m, N_SIDE, dtype=q.dtype)
                side.scatter_(2, batch.long_actions.clamp(min=0)[..., None], 1.0)
                edges = torch.tensor(RECENCY_EDGES, dtype=batch.long_ages.dtype)
                bucket = torch.bucketize(batch.long_ages, edges, right=True)
                side.scatter_(2, (len(ACTIONS) + bucket)[..., None], 1.0)
                h = self.adapter.history(batch.long_items.clamp(min=0).reshape(-1), side.reshape(b * m, -1))
                h = h.view(b, m, -1)
                from .align import igr_select_batch

                order = igr_select_batch(q, h, valid, k)
        else:
            # most recent valid candidates (candidates are stored oldest -> newest)
            m = batch.long_items.shape[1]
            pos = torch.arange(m).expand_as(batch.long_items)
            key = torch.where(valid, pos, torch.full_like(pos, -1))
            order = torch.sort(key, dim=1, descending=True, stable=True).indices[:, :k]
            order = order.masked_fill(torch.gather(valid, 1, order) == 0, -1)
            if order.shape[1] < k:
                order = torch.cat([order, order.new_full((order.shape[0], k - order.shape[1]), -1)], 1)
        return order

    def encode(self, batch: Batch, prompt: PromptTokens | None = None) -> EncoderState:
        b = len(batch)
        d = self.d_hidden
        order = self.select_long_history(batch)
        safe = order.clamp(min=0)
        long_items = torch.where(order >= 0, torch.gather(batch.long_items, 1, safe), torch.full_like(order, -1))
        long_actions = torch.gather(batch.long_actions, 1, safe)

        toks = [self.profile_proj(batch.profile)[:, None, :] + self.segment_emb.weight[SEG_PROFILE]]
        masks = [torch.ones(b, 1, dtype=torch.bool)]
        if prompt is not None and prompt.reasoning is not None:
            toks.append((prompt.reasoning + self.segment_emb.weight[SEG_REASON])[:, None, :])
            masks.append(torch.ones(b, 1, dtype=torch.bool))
        for items, actions, seg in ((batch.short_items, batch.short_actions, SEG_SHORT),
                                    (long_items, long_actions, SEG_LONG)):
            t = self.item_tokens(items) + self.action_emb(actions.clamp(min=0)) + self.segment_emb.weight[seg]
            toks.append(t)
            masks.append(items >= 0)
        x = torch.cat(toks, dim=1)
        mask = torch.cat(masks, dim=1)
        x = x + self.enc_pos.weight[: x.shape[1]]
        att_mask = mask[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, att_mask)
        return EncoderState(self.enc_ln(x), mask)

    # -- decoder -----------------------------------------------------------
    def decode_hidden(self, state: EncoderState, prefix: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
        """Hidden states at every decoder position; codes (N, t) are teacher-forced."""
        n, p, _ = prefix.shape
        toks = [prefix]
        for lvl in range(codes.shape[1]):
            toks.append(self.code_emb[lvl](codes[:, lvl])[:, None, :])
        x = torch.cat(toks, dim=1)
        x = x + self.dec_pos.weight[: x.shape[1]]
        t = x.shape[1]
        causal = torch.ones(t, t, dtype=torch.bool).tril()[None, None]
        mem_mask = state.mask[:, None, None, :]
        for layer in self.decoder:
            x = layer(x, state.memory, causal, mem_mask)
        return self.dec_ln(x)

    def logits(self, batch: Batch, target: torch.Tensor | None = None) -> torch.Tensor:
        """(B, L, V) logits with the target teacher-forced."""
        target = batch.target if target is None else target
        if target is None:
            raise ValueError("logits() needs target codes")
        prompt = self.prompt(batch)
        state = self.encode(batch, prompt)
        L = self.config.sid_depth
        h = self.decode_hidden(state, prompt.prefix, target[:, : L - 1])
        p = prompt.length
        return torch.stack([self.heads[lvl](h[:, p - 1 + lvl]) for lvl in range(L)], dim=1)

    def next_logprobs(self, state: EncoderState, prefix: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
        """Log-probabilities over level ``codes.shape[1]`` given the partial SID."""
        h = self.decode_hidden(state, prefix, codes)
        lvl = codes.shape[1]
        return torch.log_softmax(self.heads[lvl](h[:, -1]), dim=-1)


def forward_logprobs(model: PolicyModel, batch: Batch, target: torch.Tensor | None = None) -> torch.Tensor:
    """(B, L, V) per-step log-softmax for the teacher-forced target."""
    return torch.log_softmax(model.logits(batch, target), dim=-1)


def sequence_logprobs(model: PolicyModel, batch: Batch, target: torch.Tensor) -> torch.Tensor:
    """(B, L) log-probability of each target code."""
    lp = forward_logprobs(model, batch, target)
    return lp.gather(2, target[..., None]).squeeze(-1)


def _weights_tensor(weights: Mapping[Action | str, float]) -> torch.Tensor:
    w = []
    for a in ACTIONS:
        if a in weights:
            w.append(float(weights[a]))
        elif a.value in weights:
            w.append(float(weights[a.value]))
        else:
            raise KeyError(f"missing NTP weight for action {a.value!r}")
    return torch.tensor(w)


def ntp_loss(logprobs: torch.Tensor, target, action, weights: Mapping[Action | str, float]) -> torch.Tensor:
    """Weighted next-token loss.

    Single sample: ``logprobs`` (L, V), ``target`` (L,), ``action`` an Action.
    Batched: (B, L, V), (B, L), (B,) action indices; returns the batch mean.
    """
    w = _weights_tensor(weights).to(logprobs.dtype)
    target = torch.as_tensor(target, dtype=torch.long)
    if logprobs.dim() == 2:
        a = Action(action)
        nll = -logprobs.gather(1, target[:, None]).squeeze(1).mean()
        return w[ACTIONS.index(a)] * nll
    action = torch.as_tensor(action, dtype=torch.long)
    nll = -logprobs.gather(2, target[..., None]).squeeze(-1).mean(1)
    return (w[action] * nll).mean()


# -- pretraining -------------------------------------------------------------

@dataclass
class OptimConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    steps: int = 1000
    batch_size: int = 128
    seed: int = 0
    grad_clip: float | None = 1.0
    log_every: int = 50


def make_optimizer(model: nn.Module, cfg: OptimConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)


def joint_loss(model: PolicyModel, batch: Batch, lam: float, lambda_r: float, lambda_d: float,
               weights: Mapping[Action | str, float] = DEFAULT_NTP_WEIGHTS,
               with_q2i: bool = True) -> tuple[torch.Tensor, dict[str, float]]:
    from .align import side_features

    lp = forward_logprobs(model, batch)
    ntp = ntp_loss(lp, batch.target, batch.action, weights)
    stats = {"ntp": ntp.item()}
    total = ntp
    if with_q2i:
        q = model.adapter.query(batch.scenario, batch.trigger, batch.ir_features, batch.ir_default)
        side = torch.as_tensor(np.stack([side_features(ACTIONS[int(a)], 0) for a in batch.action]),
                               dtype=q.dtype)
        t = model.adapter.target(batch.target_item, side)
        terms = q2i_terms(q, t, lambda_r, lambda_d)
        total = total + lam * terms["total"]
        stats.update({f"q2i_{k}": v.item() for k, v in terms.items()})
    stats["loss"] = total.item()
    return total, stats


def pretrain(model: PolicyModel, dataset: Batch, lam: float = 0.1, lambda_r: float = 0.01,
             lambda_d: float = 0.1, optim: OptimConfig | None = None,
             weights: Mapping[Action | str, float] = DEFAULT_NTP_WEIGHTS,
             with_q2i: bool = True) -> tuple[PolicyModel, list[dict]]:
    """Joint NTP + lam * Q2I training. Deterministic for a fixed seed."""
    optim = optim or OptimConfig()
    torch.manual_seed(optim.seed)
    gen = np.random.default_rng(optim.seed)
    opt = make_optimizer(model, optim)
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    bs = min(optim.batch_size, n)
    trace = []
    perm = gen.permutation(n)
    cursor = 0
    model.train()
    for step in range(optim.steps):
        if cursor + bs > n:
            perm = gen.permutation(n)
            cursor = 0
        idx = perm[cursor:cursor + bs]
        cursor += bs
        batch = dataset.index(idx)
        # Q2I needs B >= 2
        loss, stats = joint_loss(model, batch, lam, lambda_r, lambda_d, weights, with_q2i and len(idx) >= 2)
        if not math.isfinite(stats["loss"]):
            raise NumericalError(f"non-finite loss at step {step}: {stats}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if optim.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), optim.grad_clip)
        opt.step()
        stats["step"] = step
        trace.append(stats)
        if optim.log_every and step % optim.log_every == 0:
            logger.info("pretrain step %d loss %.4f ntp %.4f", step, stats["loss"], stats["ntp"])
    model.eval()
    return model, trace


# -- checkpoints -------------------------------------------------------------

def tensors_to_bytes(named: Mapping[str, torch.Tensor], metadata: Mapping[str, Any]) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(named)))
    for name in sorted(named):
        t = named[name].detach().cpu()
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.to(torch.float32).numpy().astype("<f4").tobytes(order="C"))
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def tensors_from_bytes(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:4] != CKPT_MAGIC:
        raise ValueError("bad checkpoint magic")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data[off:off + 4 * size], dtype="<f4").reshape(dims).copy()
        off += 4 * size
        out[name] = arr
    (mlen,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + mlen].decode("utf-8"))
    return out, meta


def checkpoint_bytes(model: PolicyModel, metadata: Mapping[str, Any] | None = None) -> bytes:
    meta = dict(metadata or {})
    meta.setdefault("config", model.config.to_json())
    meta.setdefault("scenarios", list(model.scenario_names))
    meta.setdefault("q2i_gradient_route", "shared scenario table; adapter tables")
    return tensors_to_bytes(model.state_dict(), meta)


def save_checkpoint(path: str | Path, model: PolicyModel, metadata: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, metadata))


def load_checkpoint(path_or_bytes, item_text_features: np.ndarray | None = None) -> tuple[PolicyModel, dict]:
    data = Path(path_or_bytes).read_bytes() if not isinstance(path_or_bytes, (bytes, bytearray)) else path_or_bytes
    tensors, meta = tensors_from_bytes(bytes(data))
    cfg = ModelConfig.from_json(meta["config"])
    codes = tensors["item_codes"].astype(np.int64)
    text = tensors["adapter.item_text"] if item_text_features is None else item_text_features
    model = PolicyModel(cfg, len(meta["scenarios"]), meta["scenarios"], codes, np.asarray(text, dtype=np.float64))
    state = model.state_dict()
    loaded = {}
    for name, ref in state.items():
        if name not in tensors:
            raise ValueError(f"checkpoint missing tensor {name}")
        loaded[name] = torch.as_tensor(tensors[name]).to(ref.dtype).reshape(ref.shape)
    model.load_state_dict(loaded)
    model.eval()
    return model, meta


def clone_model(model: PolicyModel) -> PolicyModel:
    return copy.deepcopy(model)
