"""Command-line pipeline: synth-data -> build-sid -> pretrain -> posttrain -> decode / eval."""

from __future__ import annotations

import argparse
import contextlib
import copy
import dataclasses
import enum
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
import yaml

from . import backbone, catalog, sid
from .backbone import ModelConfig, NumericalError, OptimConfig
from .catalog import ConfigError, SyntheticWorldConfig
from .reward import RewardConfig, SurrogateRanker
from .rl import Algorithm, SAGCPOConfig

logger = logging.getLogger("grec")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERICAL = 0, 2, 3, 4
ENV_PREFIX = "GREC_"


class DependencyError(RuntimeError):
    """A required upstream artifact is missing; ``producer`` names the command that makes it."""

    def __init__(self, what: str, producer: str):
        super().__init__(f"missing {what}; run `grec {producer}` first")
        self.producer = producer


class StaleArtifactError(RuntimeError):
    pass


class ArtifactLockedError(RuntimeError):
    pass


# -- configuration -------------------------------------------------------------------

@dataclass
class SidSection:
    depth: int = 3
    width: int = 256
    seed: int = 0
    max_iter: int = 25
    n_init: int = 3


@dataclass
class AlignSection:
    lam: float = 0.1
    lambda_r: float = 0.01
    lambda_d: float = 0.1


@dataclass
class EvalSection:
    seeds: list[int] = field(default_factory=lambda: [0])
    n_eval: int | None = 400
    beam_width: int = 32
    rl_eval: int = 300
    n_synthetic: int = 1000
    rl_real_days: int = 3


SECTIONS: dict[str, type] = {
    "world": SyntheticWorldConfig,
    "sid": SidSection,
    "model": ModelConfig,
    "align": AlignSection,
    "pretrain": OptimConfig,
    "reward": RewardConfig,
    "rl": SAGCPOConfig,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    world: SyntheticWorldConfig = field(default_factory=SyntheticWorldConfig)
    sid: SidSection = field(default_factory=SidSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    align: AlignSection = field(default_factory=AlignSection)
    pretrain: OptimConfig = field(default_factory=OptimConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    rl: SAGCPOConfig = field(default_factory=SAGCPOConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    artifact_dir: str = "artifacts"
    seed: int = 0

    def to_json(self) -> dict:
        out: dict[str, Any] = {"artifact_dir": self.artifact_dir, "seed": self.seed}
        for name in SECTIONS:
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return out

    def experiment(self):
        from .eval import ExperimentConfig

        return ExperimentConfig(
            world=self.world, sid_depth=self.sid.depth, sid_width=self.sid.width, model=self.model,
            pretrain=self.pretrain, lam=self.align.lam, lambda_r=self.align.lambda_r,
            lambda_d=self.align.lambda_d, n_eval=self.eval.n_eval, beam_width=self.eval.beam_width,
            reward=self.reward, rl=self.rl, n_synthetic=self.eval.n_synthetic, rl_eval=self.eval.rl_eval,
            rl_real_days=self.eval.rl_real_days,
        )


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if hasattr(x, "value") and isinstance(x.value, str):
        return x.value
    return x


def _build_section(name: str, cls: type, values: Mapping[str, Any]):
    known = {f.name: f for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    defaults = cls()
    kwargs = {}
    try:
        for key, val in values.items():
            if isinstance(val, list) and key in ("branching", "action_probs", "betas"):
                val = tuple(val)
            current = getattr(defaults, key)
            if isinstance(current, enum.Enum):
                val = type(current)(val)
            kwargs[key] = val
        obj = cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from None
    if isinstance(obj, SyntheticWorldConfig):
        try:
            obj.validate()
        except ConfigError as exc:
            raise ConfigError(f"world.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    return obj


def apply_env_overrides(raw: dict, env: Mapping[str, str]) -> dict:
    """GREC_<SECTION>_<FIELD>=value; values are parsed as YAML scalars."""
    raw = copy.deepcopy(raw)
    for key, val in sorted(env.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        if rest in ("artifact_dir", "seed"):
            raw[rest] = yaml.safe_load(val)
            continue
        section = next((s for s in SECTIONS if rest.startswith(s + "_")), None)
        if section is None:
            raise ConfigError(key, "unknown section in environment override")
        name = rest[len(section) + 1:]
        # env names are case-folded; map back onto the declared field name
        name = next((f.name for f in fields(SECTIONS[section]) if f.name.lower() == name), name)
        raw.setdefault(section, {})
        raw[section][name] = yaml.safe_load(val)
    return raw


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None,
                overrides: Mapping[str, Any] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        text = _config_text(path)
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"unparseable: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be a mapping")
    raw = apply_env_overrides(raw, os.environ if env is None else env)
    for k, v in (overrides or {}).items():
        raw[k] = v
    for key in raw:
        if key not in SECTIONS and key not in ("artifact_dir", "seed"):
            raise ConfigError(key, "unknown section")
    kwargs = {name: _build_section(name, cls, raw.get(name) or {}) for name, cls in SECTIONS.items()}
    cfg = RunConfig(**kwargs, artifact_dir=str(raw.get("artifact_dir", "artifacts")), seed=int(raw.get("seed", 0)))
    if cfg.sid.depth != cfg.model.sid_depth or cfg.sid.width != cfg.model.sid_vocab:
        cfg.model = replace(cfg.model, sid_depth=cfg.sid.depth, sid_vocab=cfg.sid.width)
    profile_dim = 3 + cfg.world.taste_dim
    if cfg.model.profile_dim != profile_dim:
        cfg.model = replace(cfg.model, profile_dim=profile_dim)
    return cfg


def _config_text(path: str | Path) -> str:
    p = Path(path)
    if p.exists():
        return p.read_text()
    if "/" not in str(path) and not str(path).endswith(".yaml"):
        try:
            return resources.files("grec").joinpath("configs", f"{path}.yaml").read_text()
        except FileNotFoundError:
            pass
    raise ConfigError("config", f"config file {path} not found")


# -- artifacts -----------------------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Layout:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.world = self.root / "world"
        self.sid = self.root / "sid"
        self.checkpoints = self.root / "checkpoints"
        self.eval = self.root / "eval"

    @property
    def events(self) -> Path:
        return self.world / "events.jsonl"

    @property
    def catalog(self) -> Path:
        return self.world / "catalog.json"

    @property
    def embeddings(self) -> Path:
        return self.world / "embeddings.bin"

    @property
    def profiles(self) -> Path:
        return self.world / "profiles.bin"

    @property
    def world_meta(self) -> Path:
        return self.world / "world.json"

    @property
    def codebook(self) -> Path:
        return self.sid / "codebook.bin"

    @property
    def assignments(self) -> Path:
        return self.sid / "assignments.jsonl"

    @property
    def pretrained(self) -> Path:
        return self.checkpoints / "pretrained.grck"

    def posttrained(self, algorithm: str) -> Path:
        return self.checkpoints / f"posttrained-{algorithm}.grck"

    def world_files(self) -> list[Path]:
        return [self.events, self.catalog, self.embeddings, self.profiles, self.world_meta]

    def sid_files(self) -> list[Path]:
        return [self.codebook, self.assignments]


@contextlib.contextmanager
def dir_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ArtifactLockedError(f"{directory} is locked by another writer (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(directory: Path, name: str, command: str, cfg: RunConfig, inputs: list[Path],
                   outputs: list[Path], extra: Mapping[str, Any] | None = None) -> Path:
    root = Path(cfg.artifact_dir)
    manifest = {
        "command": command,
        "inputs": {str(p.relative_to(root)): sha256_file(p) for p in inputs},
        "outputs": {str(p.relative_to(root)): sha256_file(p) for p in outputs},
        "config": cfg.to_json(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if extra:
        manifest.update(extra)
    path = directory / f"{name}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(directory: Path, name: str) -> dict:
    path = directory / f"{name}.manifest.json"
    if not path.exists():
        raise StaleArtifactError(f"manifest {path} missing")
    return json.loads(path.read_text())


def require(paths: list[Path], producer: str) -> None:
    for p in paths:
        if not p.exists():
            raise DependencyError(str(p), producer)


def check_fresh(root: Path, manifest: Mapping, producer: str) -> None:
    """Inputs recorded in ``manifest`` must still hash to the recorded values."""
    for rel, digest in manifest.get("inputs", {}).items():
        p = root / rel
        if not p.exists():
            raise DependencyError(str(p), producer)
        if sha256_file(p) != digest:
            raise StaleArtifactError(f"{p} changed since it was consumed by `{manifest['command']}`; "
                                     f"rerun `grec {manifest['command']}`")


def world_hash(layout: Layout) -> str:
    h = hashlib.sha256()
    for p in layout.world_files():
        h.update(sha256_file(p).encode())
    return h.hexdigest()


# -- loading helpers -----------------------------------------------------------------

def load_world(layout: Layout, cfg: RunConfig) -> catalog.World:
    require(layout.world_files(), "synth-data")
    meta = json.loads(layout.world_meta.read_text())
    wcfg = _build_section("world", SyntheticWorldConfig, meta["config"])
    records = json.loads(layout.catalog.read_text())
    emb = catalog.read_matrix(layout.embeddings)
    cat = catalog.catalog_from_parts(records, emb, wcfg.scenarios, wcfg.branching)
    events = catalog.read_events(layout.events)
    profiles = catalog.read_matrix(layout.profiles).astype(np.float64)
    by_user: dict[int, list] = {}
    for e in events:
        by_user.setdefault(e.user_id, []).append(e)
    users = []
    for uid in range(len(profiles)):
        evs = sorted(by_user.get(uid, []), key=lambda e: e.timestamp)
        n_short = min(wcfg.short_history_len, len(evs))
        users.append(catalog.UserProfile(uid, profiles[uid], tuple(evs[: len(evs) - n_short]),
                                         tuple(evs[len(evs) - n_short:])))
    return catalog.World(wcfg, cat, users, events)


def load_codes(layout: Layout, n_items: int) -> np.ndarray:
    require(layout.sid_files(), "build-sid")
    check_fresh(layout.root, read_manifest(layout.sid, "sid"), "synth-data")
    from .dataset import codes_matrix

    return codes_matrix(sid.read_assignments(layout.assignments), n_items)


def load_model(path: Path, producer: str, layout: Layout):
    require([path], producer)
    model, meta = backbone.load_checkpoint(path)
    expected = meta.get("world_hash")
    if expected and expected != world_hash(layout):
        raise StaleArtifactError(f"{path} was trained on a different world; rerun `grec {producer}`")
    return model, meta


def _prepared(cfg: RunConfig, layout: Layout):
    from .eval import prepare

    world = load_world(layout, cfg)
    codes = load_codes(layout, len(world.catalog))
    return prepare(cfg.experiment(), world, codes)


# -- commands --------------------------------------------------------------------------

def cmd_synth_data(cfg: RunConfig) -> dict:
    layout = Layout(cfg.artifact_dir)
    world = catalog.build_world(cfg.world)
    with dir_lock(layout.world):
        catalog.write_events(layout.events, world.events)
        layout.catalog.write_text(json.dumps(catalog.catalog_to_json(world.catalog), sort_keys=True) + "\n")
        catalog.write_matrix(layout.embeddings, world.catalog.embeddings)
        catalog.write_matrix(layout.profiles, np.stack([u.profile_vector for u in world.users]))
        meta = {"config": _plain(dataclasses.asdict(cfg.world)),
                "scenarios": [dataclasses.asdict(s) for s in world.scenarios]}
        layout.world_meta.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        write_manifest(layout.world, "world", "synth-data", cfg, [], layout.world_files())
    summary = {"items": len(world.catalog), "users": len(world.users), "events": len(world.events)}
    logger.info("synth-data: %s", summary)
    return summary


def cmd_build_sid(cfg: RunConfig) -> dict:
    layout = Layout(cfg.artifact_dir)
    world = load_world(layout, cfg)
    emb = world.catalog.embeddings
    cb = sid.train_codebook(emb, cfg.sid.depth, cfg.sid.width, seed=cfg.sid.seed, max_iter=cfg.sid.max_iter,
                            n_init=cfg.sid.n_init)
    # assign with the exact centroids that are stored on disk
    cb = sid.codebook_from_bytes(sid.codebook_to_bytes(cb))
    codes = sid.assign_sids(cb, emb)
    assignments = {i: tuple(int(c) for c in row) for i, row in enumerate(codes)}
    report = sid.sid_metrics(assignments, world.catalog, cfg.sid.width)
    with dir_lock(layout.sid):
        sid.write_codebook(layout.codebook, cb)
        sid.write_assignments(layout.assignments, assignments)
        (layout.sid / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
        write_manifest(layout.sid, "sid", "build-sid", cfg, layout.world_files(),
                       layout.sid_files() + [layout.sid / "report.json"])
    logger.info("build-sid: %d unique SIDs over %d items", report.n_unique_sids, report.n_items)
    return report.to_json()


def cmd_pretrain(cfg: RunConfig) -> dict:
    from .eval import new_model

    layout = Layout(cfg.artifact_dir)
    prep = _prepared(cfg, layout)
    model = new_model(prep, seed=cfg.seed)
    model, trace = backbone.pretrain(model, prep.train_batch, cfg.align.lam, cfg.align.lambda_r,
                                     cfg.align.lambda_d, replace(cfg.pretrain, seed=cfg.seed))
    with dir_lock(layout.checkpoints):
        backbone.save_checkpoint(layout.pretrained, model, {
            "step": len(trace), "seed": cfg.seed, "world_hash": world_hash(layout), "stage": "pretrain"})
        trace_path = layout.checkpoints / "pretrain_trace.jsonl"
        with open(trace_path, "w") as fh:
            for row in trace:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        write_manifest(layout.checkpoints, "pretrained", "pretrain", cfg,
                       layout.world_files() + layout.sid_files(), [layout.pretrained, trace_path])
    return {"steps": len(trace), "final_loss": trace[-1]["loss"], "final_ntp": trace[-1]["ntp"]}


def cmd_posttrain(cfg: RunConfig, algorithm: str) -> dict:
    from .eval import reward_service, rl_eval_fn, rl_pools
    from .reward import write_reward_trace
    from .rl import posttrain, run_manifest

    layout = Layout(cfg.artifact_dir)
    check_fresh(layout.root, read_manifest(layout.checkpoints, "pretrained") if layout.pretrained.exists()
                else {}, "pretrain")
    model, meta = load_model(layout.pretrained, "pretrain", layout)
    prep = _prepared(cfg, layout)
    rl_cfg = replace(cfg.rl, algorithm=Algorithm(algorithm), seed=cfg.seed)
    service = reward_service(prep, model)
    real, syn = rl_pools(prep, cfg.seed)
    res = posttrain(model, real, syn, rl_cfg, service, prep.trie_for, rl_eval_fn(prep), keep_trace=True)
    if res.diverged:
        raise NumericalError(f"post-training with {algorithm} produced a non-finite objective")
    out = layout.posttrained(rl_cfg.algorithm.value)
    with dir_lock(layout.checkpoints):
        backbone.save_checkpoint(out, res.model, {
            "seed": cfg.seed, "world_hash": world_hash(layout), "stage": "posttrain",
            "algorithm": rl_cfg.algorithm.value, "parent": meta.get("stage")})
        ranker_path = layout.checkpoints / f"ranker-{rl_cfg.algorithm.value}.json"
        ranker_path.write_text(json.dumps(service.ranker.to_json(), sort_keys=True) + "\n")
        trace_path = layout.checkpoints / f"reward_trace-{rl_cfg.algorithm.value}.jsonl"
        write_reward_trace(trace_path, res.reward_trace)
        manifest = run_manifest(rl_cfg, res, [str(layout.pretrained.relative_to(layout.root)),
                                              str(out.relative_to(layout.root))])
        write_manifest(layout.checkpoints, f"posttrained-{rl_cfg.algorithm.value}", "posttrain", cfg,
                       layout.world_files() + layout.sid_files() + [layout.pretrained],
                       [out, trace_path, ranker_path], {"rl_run": manifest})
    return {"algorithm": rl_cfg.algorithm.value, "epochs": res.epochs}


def cmd_decode(cfg: RunConfig, user_id: int, scenario: str, k: int, trigger: int | None = None,
               query: str | None = None, checkpoint: str | None = None) -> list[dict]:
    from .dataset import build_samples, collate
    from .decode import BeamConfig, beam_search_batch, build_trie

    layout = Layout(cfg.artifact_dir)
    path = Path(checkpoint) if checkpoint else layout.pretrained
    model, _ = load_model(path, "pretrain", layout)
    world = load_world(layout, cfg)
    codes = load_codes(layout, len(world.catalog))
    if user_id not in {u.user_id for u in world.users}:
        raise ConfigError("user_id", f"unknown user {user_id}")
    try:
        sc = world.catalog.scenario(scenario)
    except KeyError:
        raise ConfigError("scenario", f"unknown scenario {scenario!r}") from None
    if trigger is not None and trigger not in world.catalog:
        raise ConfigError("trigger", f"unknown item {trigger}")
    now = max(e.timestamp for e in world.events) + 1
    request = catalog.InteractionEvent(user_id, 0, sc.name, catalog.Action.CLICK, now,
                                       query if sc.has_query else None,
                                       trigger if sc.trigger_bearing else None)
    sample = build_samples(world.catalog, world.users, world.events, [request], codes, model.config)[0]
    sample = replace(sample, target_codes=None, target_item=-1)
    trie = build_trie([tuple(int(c) for c in codes[i]) for i in world.catalog.pool(sc.name)])
    res = beam_search_batch(model, collate([sample], model.config), trie,
                            BeamConfig(beam_width=max(k, cfg.eval.beam_width)))[0]
    sid_items: dict[tuple, list[int]] = {}
    for i in world.catalog.pool(sc.name):
        sid_items.setdefault(tuple(int(c) for c in codes[i]), []).append(int(i))
    return [{"rank": r + 1, "codes": list(s), "logprob": float(lp), "item_ids": sid_items.get(s, [])}
            for r, (s, lp) in enumerate(res.ranked[:k])]


def _checkpoint_source(layout: Layout, recipe: str, cfg: RunConfig):
    base_points = {"correct", "unified", "pretrained"}

    def source(grid_point: str, seed: int):
        p = layout.checkpoints / "recipes" / recipe / f"{grid_point.replace('/', '__')}__s{seed}.grck"
        if p.exists():
            return load_model(p, "eval --train", layout)[0]
        if grid_point in base_points and seed == cfg.seed and layout.pretrained.exists():
            return load_model(layout.pretrained, "pretrain", layout)[0]
        return None

    return source


def cmd_eval(cfg: RunConfig, recipe: str | None = None, train: bool = False) -> list[Path]:
    from .eval import ResultTable, evaluate_model, run_recipe

    layout = Layout(cfg.artifact_dir)
    prep = _prepared(cfg, layout)
    written = []
    if recipe is None:
        ckpts = sorted(layout.checkpoints.glob("*.grck"))
        if not ckpts:
            raise DependencyError("checkpoints", "pretrain")
        table = ResultTable("Checkpoints", metadata={"recall_matching": "by SID", "decode": "deterministic beam"})
        hashes = set()
        for p in ckpts:
            model, meta = load_model(p, "pretrain", layout)
            hashes.add(meta.get("world_hash"))
            table.add(p.stem, int(meta.get("seed", cfg.seed)), evaluate_model(model, prep))
        if len(hashes) > 1:
            raise StaleArtifactError("checkpoints were trained on different worlds")
        tables = [table]
    else:
        source = _checkpoint_source(layout, recipe, cfg)
        tables = [run_recipe(recipe, prep, seeds=cfg.eval.seeds, checkpoints=source, allow_training=train)]
    with dir_lock(layout.eval):
        for t in tables:
            csv_path, txt_path = t.write(layout.eval)
            written += [csv_path, txt_path]
            print(t.render(), end="")
        write_manifest(layout.eval, tables[0].recipe, "eval", cfg,
                       layout.world_files() + layout.sid_files() + sorted(layout.checkpoints.glob("*.grck")),
                       written)
    return written


# -- entry point -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grec", description="Instruction-conditioned generative recommendation pipeline")
    p.add_argument("--config", "-c", default=None, help="YAML config file, or a bundled name (smoke, default)")
    p.add_argument("--artifact-dir", default=None, help="override artifact_dir")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", help="generate the synthetic world")
    sub.add_parser("build-sid", help="train the RQ codebook and assign semantic IDs")
    sub.add_parser("pretrain", help="joint NTP + Q2I training")
    pt = sub.add_parser("posttrain", help="RL post-training from the pretrained checkpoint")
    pt.add_argument("--algorithm", choices=[a.value for a in Algorithm], default=Algorithm.SA_GCPO.value)
    dec = sub.add_parser("decode", help="constrained beam search for one request")
    dec.add_argument("--user", type=int, required=True)
    dec.add_argument("--scenario", required=True)
    dec.add_argument("-k", type=int, default=10)
    dec.add_argument("--trigger", type=int, default=None)
    dec.add_argument("--query", default=None)
    dec.add_argument("--checkpoint", default=None)
    ev = sub.add_parser("eval", help="evaluate checkpoints or run an ablation recipe")
    ev.add_argument("--recipe", default=None)
    ev.add_argument("--train", action="store_true", help="train grid points that have no checkpoint")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        if args.artifact_dir is not None:
            overrides["artifact_dir"] = args.artifact_dir
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides=overrides)
        torch.manual_seed(cfg.seed)
        if args.command == "synth-data":
            out = cmd_synth_data(cfg)
        elif args.command == "build-sid":
            out = cmd_build_sid(cfg)
        elif args.command == "pretrain":
            out = cmd_pretrain(cfg)
        elif args.command == "posttrain":
            out = cmd_posttrain(cfg, args.algorithm)
        elif args.command == "decode":
            for row in cmd_decode(cfg, args.user, args.scenario, args.k, args.trigger, args.query, args.checkpoint):
                print(json.dumps(row))
            return EXIT_OK
        else:
            if args.recipe is not None:
                from .eval import Recipe

                try:
                    Recipe(args.recipe)
                except ValueError:
                    raise ConfigError("recipe", f"unknown recipe {args.recipe!r}") from None
            cmd_eval(cfg, args.recipe, args.train)
            return EXIT_OK
        print(json.dumps(out, sort_keys=True, default=str))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, StaleArtifactError) as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except ArtifactLockedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except KeyError as exc:
        from .eval import MissingCheckpointError

        if isinstance(exc, MissingCheckpointError):
            print(f"dependency error: {exc.args[0]}; rerun with `grec eval --train`", file=sys.stderr)
            return EXIT_DEPENDENCY
        raise


if __name__ == "__main__":
    sys.exit(main())
