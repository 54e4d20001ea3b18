"""Offline metrics and reproducible ablation recipes."""

from __future__ import annotations

import copy
import csv
import enum
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .backbone import Batch, ModelConfig, OptimConfig, PolicyModel, pretrain
from .catalog import SyntheticWorldConfig, World, build_world, split_train_eval
from .dataset import (TrainingSample, build_samples, codes_matrix, collate, item_text_features,
                      mask_trigger, synthetic_samples)
from .decode import BeamConfig, SidTrie, build_trie, decode_in_chunks
from .instruction import InstructionTokenMode, IntegrationStrategy
from .reward import RewardConfig, RewardService, train_ranker
from .rl import Algorithm, SAGCPOConfig, posttrain
from .sid import assign_sids, train_codebook

logger = logging.getLogger(__name__)

SemanticId = tuple[int, ...]
CSV_COLUMNS = ("recipe", "grid_point", "seed", "hr1", "hr10", "recall10", "recall30")


# -- metrics ------------------------------------------------------------------------

def _dedup(generated: Iterable[Sequence[int]]) -> list[SemanticId]:
    seen, out = set(), []
    for g in generated:
        t = tuple(int(c) for c in g)
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


def hit_rate_at_k(generated: Sequence[Sequence[int]], truth: Sequence[int], K: int) -> int:
    """1 iff the truth SID is among the first K distinct generated SIDs."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return int(tuple(int(c) for c in truth) in _dedup(generated)[:K])


def recall_at_k(generated: Sequence[Sequence[int]], positives: Iterable[int], K: int,
                sid_map: Mapping[int, Sequence[int]]) -> float:
    """Fraction of positive items whose SID appears in the first K distinct generated SIDs."""
    if K < 1:
        raise ValueError("K must be >= 1")
    positives = list(positives)
    if not positives:
        raise ValueError("positive set is empty")
    top = set(_dedup(generated)[:K])
    return sum(tuple(int(c) for c in sid_map[p]) in top for p in positives) / len(positives)


@dataclass
class EvalSample:
    sample: TrainingSample
    truth: SemanticId
    positives: frozenset[int]


def aggregate_metrics(generated: Sequence[Sequence[Sequence[int]]], samples: Sequence[TrainingSample],
                      sid_map: Mapping[int, Sequence[int]]) -> dict[str, float]:
    hr1 = [hit_rate_at_k(g, s.target_codes, 1) for g, s in zip(generated, samples)]
    hr10 = [hit_rate_at_k(g, s.target_codes, 10) for g, s in zip(generated, samples)]
    with_pos = [(g, s) for g, s in zip(generated, samples) if s.positives]
    r10 = [recall_at_k(g, s.positives, 10, sid_map) for g, s in with_pos]
    r30 = [recall_at_k(g, s.positives, 30, sid_map) for g, s in with_pos]
    nan = float("nan")
    return {"hr1": float(np.mean(hr1)) if hr1 else nan, "hr10": float(np.mean(hr10)) if hr10 else nan,
            "recall10": float(np.mean(r10)) if r10 else nan, "recall30": float(np.mean(r30)) if r30 else nan,
            "n": len(samples), "n_recall": len(with_pos)}


# -- experiment harness -----------------------------------------------------------------

@dataclass
class ExperimentConfig:
    world: SyntheticWorldConfig = field(default_factory=SyntheticWorldConfig)
    sid_depth: int = 3
    sid_width: int = 256
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: OptimConfig = field(default_factory=lambda: OptimConfig(steps=300, log_every=0))
    lam: float = 0.1
    lambda_r: float = 0.01
    lambda_d: float = 0.1
    eval_day: int | None = None        # default: last day
    n_eval: int | None = 400           # None = every eval-day event
    beam_width: int = 32
    reward: RewardConfig = field(default_factory=RewardConfig)
    rl: SAGCPOConfig = field(default_factory=SAGCPOConfig)
    n_synthetic: int = 1000
    rl_eval: int = 300
    rl_real_days: int = 3              # real RL prompts come from the last few training days


@dataclass
class Prepared:
    config: ExperimentConfig
    world: World
    codes: np.ndarray
    train: list[TrainingSample]
    eval: list[TrainingSample]
    train_batch: Batch
    eval_batch: Batch
    tries: dict[str, SidTrie]

    @property
    def scenario_names(self) -> list[str]:
        return [s.name for s in self.world.catalog.scenarios]

    def trie_for(self, sample: TrainingSample) -> SidTrie:
        return self.tries[self.scenario_names[sample.scenario]]

    def sid_map(self) -> dict[int, SemanticId]:
        return {i: tuple(int(c) for c in row) for i, row in enumerate(self.codes)}


def prepare(cfg: ExperimentConfig, world: World | None = None, codes: np.ndarray | None = None) -> Prepared:
    world = world or build_world(cfg.world)
    if codes is None:
        cb = train_codebook(world.catalog.embeddings, cfg.sid_depth, cfg.sid_width, seed=cfg.world.seed)
        codes = assign_sids(cb, world.catalog.embeddings)
    model_cfg = replace(cfg.model, sid_depth=codes.shape[1], sid_vocab=cfg.sid_width,
                        profile_dim=len(world.users[0].profile_vector))
    cfg = replace(cfg, model=model_cfg)
    eval_day = world.config.n_days - 1 if cfg.eval_day is None else cfg.eval_day
    split = split_train_eval(world.events, eval_day)
    train = build_samples(world.catalog, world.users, world.events, split.train, codes, model_cfg)
    ev = build_samples(world.catalog, world.users, world.events, split.eval, codes, model_cfg, with_positives=True)
    if cfg.n_eval is not None and len(ev) > cfg.n_eval:
        pick = np.sort(np.random.default_rng(cfg.world.seed + 7).choice(len(ev), cfg.n_eval, replace=False))
        ev = [ev[i] for i in pick]
    tries = {sc.name: build_trie([tuple(codes[i]) for i in world.catalog.pool(sc.name)])
             for sc in world.catalog.scenarios}
    return Prepared(cfg, world, codes, train, ev, collate(train, model_cfg) if train else None,
                    collate(ev, model_cfg) if ev else None, tries)


def new_model(prep: Prepared, model_cfg: ModelConfig | None = None, seed: int = 0) -> PolicyModel:
    cfg = model_cfg or prep.config.model
    torch.manual_seed(seed)
    return PolicyModel(cfg, len(prep.scenario_names), prep.scenario_names, prep.codes,
                       item_text_features(prep.world.catalog, cfg.instr_dim))


def train_model(prep: Prepared, seed: int = 0, model_cfg: ModelConfig | None = None,
                subset: Sequence[int] | None = None, lam: float | None = None) -> PolicyModel:
    c = prep.config
    model = new_model(prep, model_cfg, seed)
    if model_cfg is not None and model_cfg != c.model:
        ds = collate(prep.train if subset is None else [prep.train[i] for i in subset], model_cfg)
    else:
        ds = prep.train_batch if subset is None else prep.train_batch.index(list(subset))
    model, _ = pretrain(model, ds, c.lam if lam is None else lam, c.lambda_r, c.lambda_d,
                        replace(c.pretrain, seed=seed))
    return model


def evaluate_model(model: PolicyModel, prep: Prepared, samples: Sequence[int] | None = None,
                   masked: bool = False, beam_width: int | None = None) -> dict[str, float]:
    idx = list(range(len(prep.eval))) if samples is None else list(samples)
    if not idx:
        return {"hr1": float("nan"), "hr10": float("nan"), "recall10": float("nan"),
                "recall30": float("nan"), "n": 0, "n_recall": 0}
    subset = [prep.eval[i] for i in idx]
    batch = collate(subset, model.config)
    if masked:
        batch = mask_trigger(batch)
    tries = [prep.trie_for(s) for s in subset]
    res = decode_in_chunks(model, batch, tries, BeamConfig(beam_width=beam_width or prep.config.beam_width))
    return aggregate_metrics([r.sids for r in res], subset, prep.sid_map())


# -- reward / RL helpers ----------------------------------------------------------------

def reward_service(prep: Prepared, model: PolicyModel, ranker=None) -> RewardService:
    world = prep.world
    eval_day = prep.config.eval_day if prep.config.eval_day is not None else world.config.n_days - 1
    train_events = [e for e in world.events if e.day < eval_day]
    ranker = ranker or train_ranker(world.catalog, world.users, train_events, seed=prep.config.world.seed)
    return RewardService(world.catalog, world.users, prep.codes, model.adapter, ranker, prep.config.reward,
                         prep.tries)


def rl_pools(prep: Prepared, seed: int = 0) -> tuple[list[TrainingSample], list[TrainingSample]]:
    c = prep.config
    eval_day = c.eval_day if c.eval_day is not None else prep.world.config.n_days - 1
    first = eval_day - c.rl_real_days
    real = [s for s in prep.train if s.timestamp // 86400 >= first]
    history = [e for e in prep.world.events if e.day < eval_day]
    syn = synthetic_samples(prep.world, history, c.model, c.n_synthetic, eval_day * 86400,
                            np.random.default_rng([seed, 99]))
    return real, syn


def rl_eval_fn(prep: Prepared) -> Callable[[PolicyModel], dict]:
    n = min(prep.config.rl_eval, len(prep.eval))
    idx = list(range(n))

    def fn(model):
        m = evaluate_model(model, prep, idx)
        return {"hr1": m["hr1"], "hr10": m["hr10"]}

    return fn


def run_posttrain(prep: Prepared, base: PolicyModel, rl_cfg: SAGCPOConfig, service: RewardService,
                  pools=None, keep_trace: bool = False):
    real, syn = pools or rl_pools(prep, rl_cfg.seed)
    model = copy.deepcopy(base)
    return posttrain(model, real, syn, rl_cfg, service, prep.trie_for, rl_eval_fn(prep), keep_trace)


# -- recipes ----------------------------------------------------------------------------

class Recipe(str, enum.Enum):
    INTEGRATION_GRID = "IntegrationGrid"
    COMPONENT_GRID = "ComponentGrid"
    IGR_ABLATION = "IgrAblation"
    UNIFIED_VS_INDEPENDENT = "UnifiedVsIndependent"
    TRIGGER_MASKING = "TriggerMasking"
    TEMP_GRID = "TempGrid"
    SYNTHETIC_RATIO_CURVE = "SyntheticRatioCurve"


DEFAULT_GRIDS: dict[Recipe, list[str]] = {
    Recipe.INTEGRATION_GRID: [s.value for s in IntegrationStrategy],
    Recipe.COMPONENT_GRID: [m.value for m in InstructionTokenMode],
    Recipe.IGR_ABLATION: ["igr", "recency"],
    Recipe.UNIFIED_VS_INDEPENDENT: ["unified", "independent"],
    Recipe.TRIGGER_MASKING: ["correct", "masked"],
    Recipe.TEMP_GRID: ["1.0/0.95", "1.0/1.05", "1.05/1.0"],
    Recipe.SYNTHETIC_RATIO_CURVE: [f"{a}@{r}" for a in ("sa-gcpo", "gspo", "grpo") for r in ("0", "0.33", "0.66", "1")],
}


class MissingCheckpointError(KeyError):
    pass


@dataclass
class ResultTable:
    recipe: str
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, grid_point: str, seed: int, metrics: Mapping[str, float], **extra) -> None:
        row = {"recipe": self.recipe, "grid_point": grid_point, "seed": seed}
        row.update({k: float(metrics[k]) for k in ("hr1", "hr10", "recall10", "recall30")})
        row.update(extra)
        self.rows.append(row)

    def grid_points(self) -> list[str]:
        return list(dict.fromkeys(r["grid_point"] for r in self.rows))

    def values(self, grid_point: str, metric: str = "hr10") -> np.ndarray:
        return np.array([r[metric] for r in self.rows if r["grid_point"] == grid_point])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(CSV_COLUMNS), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in CSV_COLUMNS})
        return buf.getvalue()

    def render(self) -> str:
        head = f"{'grid_point':<28}{'seeds':>6}" + "".join(f"{m:>11}" for m in CSV_COLUMNS[3:])
        lines = [f"recipe: {self.recipe}", head, "-" * len(head)]
        for gp in self.grid_points():
            rows = [r for r in self.rows if r["grid_point"] == gp]
            cells = "".join(f"{np.nanmean([r[m] for r in rows]):>11.4f}" for m in CSV_COLUMNS[3:])
            lines.append(f"{gp:<28}{len(rows):>6}{cells}")
        for k, v in self.metadata.items():
            lines.append(f"# {k}: {v}")
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        csv_path = d / f"{self.recipe}.csv"
        txt_path = d / f"{self.recipe}.txt"
        csv_path.write_text(self.to_csv())
        txt_path.write_text(self.render())
        return csv_path, txt_path


def read_results_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        for k in CSV_COLUMNS[3:]:
            r[k] = float(r[k])
    return rows


CheckpointSource = Callable[[str, int], PolicyModel | None]


def _get_model(gp: str, seed: int, checkpoints: CheckpointSource | None, train: Callable[[], PolicyModel]):
    m = checkpoints(gp, seed) if checkpoints is not None else None
    if m is not None:
        return m
    if train is None:
        raise MissingCheckpointError(f"no checkpoint for grid point {gp!r} (seed {seed})")
    return train()


def _scenario_samples(prep: Prepared, scenario: str, pool: Sequence[TrainingSample]) -> list[int]:
    s = prep.scenario_names.index(scenario)
    return [i for i, x in enumerate(pool) if x.scenario == s]


def run_recipe(recipe: Recipe | str, prep: Prepared, seeds: Sequence[int] = (0,),
               grid: Sequence[str] | None = None, checkpoints: CheckpointSource | None = None,
               allow_training: bool = True, scenarios: Sequence[str] | None = None) -> ResultTable:
    """Runs one ablation protocol. ``checkpoints(grid_point, seed)`` may supply pretrained models;
    with ``allow_training=False`` a missing one is an error naming the grid point."""
    recipe = Recipe(recipe)
    grid = list(grid) if grid is not None else DEFAULT_GRIDS[recipe]
    if not grid:
        raise ValueError("recipe grid is empty")
    table = ResultTable(recipe.value, metadata={"recall_matching": "by SID", "decode": "deterministic beam"})
    base_cfg = prep.config.model

    def trainer(cfg=None, subset=None, seed=0):
        if not allow_training:
            return None
        return lambda: train_model(prep, seed, cfg, subset)

    if recipe in (Recipe.INTEGRATION_GRID, Recipe.COMPONENT_GRID, Recipe.IGR_ABLATION):
        for gp in grid:
            if recipe is Recipe.INTEGRATION_GRID:
                mcfg = replace(base_cfg, strategy=IntegrationStrategy(gp))
            elif recipe is Recipe.COMPONENT_GRID:
                mcfg = replace(base_cfg, mode=InstructionTokenMode(gp))
            else:
                if gp not in ("igr", "recency"):
                    raise ValueError(f"unknown IGR grid point {gp!r}")
                mcfg = replace(base_cfg, use_igr=gp == "igr")
            for seed in seeds:
                model = _get_model(gp, seed, checkpoints, trainer(mcfg, None, seed))
                table.add(gp, seed, evaluate_model(model, prep))
    elif recipe is Recipe.TRIGGER_MASKING:
        names = scenarios or [s.name for s in prep.world.catalog.scenarios if s.trigger_bearing]
        idx = [i for n in names for i in _scenario_samples(prep, n, prep.eval)]
        table.metadata["scenarios"] = ",".join(names)
        for seed in seeds:
            model = _get_model("correct", seed, checkpoints, trainer(None, None, seed))
            for gp in grid:
                if gp not in ("correct", "masked"):
                    raise ValueError(f"unknown masking grid point {gp!r}")
                table.add(gp, seed, evaluate_model(model, prep, idx, masked=gp == "masked"))
    elif recipe is Recipe.UNIFIED_VS_INDEPENDENT:
        names = scenarios or prep.scenario_names
        for seed in seeds:
            unified = None
            for name in names:
                ev_idx = _scenario_samples(prep, name, prep.eval)
                for gp in grid:
                    if gp == "unified":
                        unified = unified or _get_model("unified", seed, checkpoints, trainer(None, None, seed))
                        model = unified
                    elif gp == "independent":
                        tr_idx = _scenario_samples(prep, name, prep.train)
                        model = _get_model(f"independent/{name}", seed, checkpoints,
                                           trainer(None, tr_idx, seed))
                    else:
                        raise ValueError(f"unknown grid point {gp!r}")
                    table.add(f"{gp}/{name}", seed, evaluate_model(model, prep, ev_idx))
    else:
        for seed in seeds:
            base = _get_model("pretrained", seed, checkpoints, trainer(None, None, seed))
            service = reward_service(prep, base)
            pools = rl_pools(prep, seed)
            for gp in grid:
                if recipe is Recipe.TEMP_GRID:
                    tp, tn = (float(x) for x in gp.split("/"))
                    rl_cfg = replace(prep.config.rl, algorithm=Algorithm.SA_GCPO, tau_pos=tp, tau_neg=tn, seed=seed)
                else:
                    algo, rho = gp.split("@")
                    rl_cfg = replace(prep.config.rl, algorithm=Algorithm(algo), synthetic_data_ratio=float(rho),
                                     seed=seed)
                res = run_posttrain(prep, base, rl_cfg, service, pools)
                final = evaluate_model(res.model, prep)
                hr_trace = [e["hr10"] for e in res.epochs]
                table.add(gp, seed, final, diverged=res.diverged, hr10_trace=hr_trace)
    return table
