"""Experiment recipes on the synthetic grounding task.

A seed fixes everything: data streams, evaluation set and every initializer
are derived from ``RngState(seed).child(tag)``.  Trained parameters live in a
:class:`CheckpointStore` (``<root>/seed<N>/<model>.npz``) so the sweeps and
ablations can share one training run per model.

Models built by :func:`train_model`:

========================  ================================================
``dense``                 projector + head, all tokens, no sampler
``token_level.s1``        dense + VTS after stage 1
``token_level.s12``       ... after stages 1 and 2
``token_level``           ... after stages 1, 2 and 3
``frame_level``           stages 1-3 with frame-level selection
``random``                ``token_level.s12`` + stage 3 with random dropping
``dense_nopos``           ``dense`` trained without token positions
``token_level_nopos``     stages 1-3 on top of ``dense_nopos``, no positions
========================  ================================================

Result rows are ``experiment,config,seed,metric,value`` with ``config`` a
``key=value;key=value`` string; ``aggregate.csv`` holds the per-config mean and
sample standard deviation over seeds.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import yaml

from . import metrics
from . import synthground as sg
from . import training as tr
from . import vts
from .errors import UsageError, ValidationError
from .numerics import RngState

log = logging.getLogger(__name__)

EXPERIMENTS = ("density_sweep", "stage_ablation", "sampler_ablation", "pe_ablation", "train", "eval", "gradcheck")
MODELS = ("dense", "token_level.s1", "token_level.s12", "token_level", "frame_level", "random",
          "dense_nopos", "token_level_nopos")
STAGE_SUBSETS = ("none", "1", "1+2", "1+3", "2+3", "1+2+3")
ABLATION_SAMPLERS = ("token_level", "frame_level", "uniform", "random")
SWEEP_METRICS = ("r1_03", "r1_05", "r1_07", "miou", "token_efficiency")
EVAL_METRICS = ("r1_03", "r1_05", "r1_07", "miou", "map", "hit1")
ROW_COLUMNS = ("experiment", "config", "seed", "metric", "value")
AGGREGATE_COLUMNS = ("experiment", "config", "metric", "n", "mean", "sd")

_STAGE_NAMES = {"1": "stage1_vts_warmup", "2": "stage2_joint_adapter", "3": "stage3_grounding_ft"}


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class ExperimentConfig:
    """Everything an experiment needs; loadable from YAML with flag overrides."""

    experiment: str = "train"
    task: sg.SynthTask = field(default_factory=sg.SynthTask)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    rho: float = 0.5
    rho_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    samplers: tuple[str, ...] = ABLATION_SAMPLERS
    stage_subsets: tuple[str, ...] = STAGE_SUBSETS
    models: tuple[str, ...] = ("dense", "token_level")
    # sampler and VTS settings; tau_prime ~ 4 / N_v keeps weight gradients O(1/N)
    d_r: int = 16
    tau: float = 1.0
    tau_g: float = 1.0
    tau_prime: float = 0.03
    saliency_weight: float = 0.5
    adapter_rank: int = 4
    # optimization budget; every epoch draws fresh samples
    samples_per_epoch: int = 512
    batch_size: int = 32
    pretrain_epochs: int = 60
    pretrain_lr: float = 0.2
    stage1_epochs: int = 20
    stage1_lr: float = 0.1
    stage2_epochs: int = 20
    stage2_lr: float = 0.05
    stage3_epochs: int = 20
    stage3_lr: float = 0.02
    # stage-2 diversity: per-sample signal, noise and interval-length ranges
    stage2_alpha: tuple[float, float] = (0.6, 1.4)
    stage2_sigma: tuple[float, float] = (0.3, 0.7)
    stage2_len: tuple[int, int] = (2, 10)
    eval_size: int = 512
    chance_draws: int = 20
    hit_level: int = metrics.HIT_LEVEL
    results_dir: str = "results"
    checkpoint_dir: str = "checkpoints"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValidationError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if not self.seeds:
            raise ValidationError("need at least one seed")
        for r in (self.rho, *self.rho_grid):
            if not 0 < r <= 1:
                raise ValidationError(f"rho values must lie in (0, 1], got {r}")
        if not self.rho_grid:
            raise ValidationError("empty rho grid")
        for s in self.samplers:
            if s not in ABLATION_SAMPLERS:
                raise ValidationError(f"unknown sampler {s!r}; expected one of {ABLATION_SAMPLERS}")
        for s in self.stage_subsets:
            if s not in STAGE_SUBSETS:
                raise ValidationError(f"unknown stage subset {s!r}; expected one of {STAGE_SUBSETS}")
        for m in self.models:
            if m not in MODELS:
                raise ValidationError(f"unknown model {m!r}; expected one of {MODELS}")
        positive = ("samples_per_epoch", "batch_size", "eval_size", "chance_draws", "adapter_rank",
                    "tau", "tau_g", "tau_prime")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("pretrain_epochs", "stage1_epochs", "stage2_epochs", "stage3_epochs",
                     "pretrain_lr", "stage1_lr", "stage2_lr", "stage3_lr", "saliency_weight"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not 1 <= self.d_r <= self.task.model_dim:
            raise ValidationError(f"d_r must lie in [1, {self.task.model_dim}]")
        lo, hi = self.stage2_len
        if not 1 <= lo <= hi <= self.task.frame_count:
            raise ValidationError(f"stage2_len {self.stage2_len} outside [1, {self.task.frame_count}]")

    # -- (de)serialization

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, sg.SynthTask):
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        if not isinstance(d, Mapping):
            raise ValidationError("config must be a mapping")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValidationError(f"unknown config keys {unknown}")
        kw = {}
        for k, v in d.items():
            if k == "task":
                if not isinstance(v, Mapping):
                    raise ValidationError("task must be a mapping")
                task_names = {f.name for f in dataclasses.fields(sg.SynthTask)}
                bad = sorted(set(v) - task_names)
                if bad:
                    raise ValidationError(f"unknown task keys {bad}")
                v = sg.SynthTask.from_dict(v)
            elif isinstance(v, list):
                v = tuple(v)
            kw[k] = v
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def with_overrides(self, overrides: Iterable[str]) -> "ExperimentConfig":
        """Apply ``key=value`` strings (YAML-parsed values, ``task.x`` for task fields)."""
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise UsageError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            value = yaml.safe_load(raw)
            if key.startswith("task."):
                d["task"][key[5:]] = value
            else:
                d[key] = value
        return ExperimentConfig.from_dict(d)

    # -- derived objects

    def vts_config(self) -> vts.VtsConfig:
        return vts.VtsConfig(d_model=self.task.model_dim, d_r=self.d_r, rho=self.rho, tau=self.tau,
                             tau_g=self.tau_g, tau_prime=self.tau_prime)

    def pipeline(self, **kw) -> tr.PipelineConfig:
        base = tr.PipelineConfig(rho=self.rho, saliency_weight=self.saliency_weight, vts=self.vts_config())
        return base.with_(**kw)

    def plan(self, stage: str, sampler: str | None = None) -> tr.StagePlan:
        prefix = {"pretrain_dense": "pretrain", "stage1_vts_warmup": "stage1",
                  "stage2_joint_adapter": "stage2", "stage3_grounding_ft": "stage3"}[stage]
        return dataclasses.replace(tr.DEFAULT_PLANS[stage], epochs=getattr(self, prefix + "_epochs"),
                                   learning_rate=getattr(self, prefix + "_lr"),
                                   batch_size=self.batch_size, sampler=sampler)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: not valid YAML: {exc}") from None
    return ExperimentConfig.from_dict(data or {})


# ---------------------------------------------------------------- checkpoints

class MissingCheckpointError(UsageError):
    pass


class CheckpointStore:
    """Flat ``.npz`` archives keyed by seed and model name."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, seed: int, name: str) -> Path:
        return self.root / f"seed{seed}" / f"{name}.npz"

    def has(self, seed: int, name: str) -> bool:
        return self.path(seed, name).is_file()

    def save(self, seed: int, name: str, params: Mapping[str, np.ndarray]) -> Path:
        path = self.path(seed, name)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, **{k: np.asarray(v, dtype=np.float64) for k, v in sorted(params.items())})
        tmp.replace(path)
        return path

    def load(self, seed: int, name: str) -> dict[str, np.ndarray]:
        path = self.path(seed, name)
        if not path.is_file():
            raise MissingCheckpointError(f"missing checkpoint {path}; run `vtslab train` for model {name!r} first")
        with np.load(path, allow_pickle=False) as data:
            return {k: data[k].copy() for k in data.files}


# ---------------------------------------------------------------- training recipes

def eval_set(cfg: ExperimentConfig, seed: int) -> sg.SynthDataset:
    return sg.generate_batch(cfg.task, cfg.eval_size, RngState(seed).child("eval"))


def _stream(cfg: ExperimentConfig, seed: int, tag: str, diverse: bool = False) -> sg.SynthStream:
    stream_seed = RngState(seed).child("stream/" + tag).seed
    if diverse:
        return sg.SynthStream(cfg.task, cfg.samples_per_epoch, stream_seed,
                              cfg.stage2_alpha, cfg.stage2_sigma, cfg.stage2_len)
    return sg.SynthStream(cfg.task, cfg.samples_per_epoch, stream_seed)


def pretrain(cfg: ExperimentConfig, seed: int, use_positions: bool = True) -> dict:
    root = RngState(seed)
    params = sg.init_head(cfg.task, root.child("init/head"))
    return tr.pretrain_dense(params, _stream(cfg, seed, "pretrain"), cfg.plan("pretrain_dense"),
                             root.child("train/pretrain"), cfg.pipeline(use_positions=use_positions))


def attach_vts(cfg: ExperimentConfig, seed: int, params: Mapping) -> dict:
    """Add freshly initialized VTS parameters (the same draw for every recipe of a seed)."""
    out = dict(params)
    out.update({"vts." + k: v for k, v in vts.init_params(cfg.vts_config(), RngState(seed).child("init/vts")).items()})
    return out


def run_stage_id(cfg: ExperimentConfig, seed: int, stage: str, params: Mapping, sampler: str = "token_level",
                 use_positions: bool = True) -> dict:
    """One of stages ``"1"``, ``"2"``, ``"3"``; data and noise depend only on (seed, stage)."""
    root = RngState(seed)
    params = dict(params)
    if stage in ("2", "3") and not any(k.startswith("adapter.") for k in params):
        params = tr.low_rank_adapter_update(params, cfg.adapter_rank, root.child("init/adapter"))
    name = _STAGE_NAMES[stage]
    stream = _stream(cfg, seed, "stage" + stage, diverse=stage == "2")
    return tr.run_stage(cfg.plan(name, sampler), params, stream, root.child("train/stage" + stage),
                        cfg.pipeline(sampler=sampler, use_positions=use_positions))


def train_model(cfg: ExperimentConfig, seed: int, name: str, store: CheckpointStore) -> dict:
    """Return checkpoint ``name`` for ``seed``, training it (and its prerequisites) if absent."""
    if name not in MODELS:
        raise UsageError(f"unknown model {name!r}")
    if store.has(seed, name):
        return store.load(seed, name)
    log.info("training %s (seed %d)", name, seed)
    if name == "dense":
        params = pretrain(cfg, seed)
    elif name == "dense_nopos":
        params = pretrain(cfg, seed, use_positions=False)
    elif name == "token_level.s1":
        params = run_stage_id(cfg, seed, "1", attach_vts(cfg, seed, train_model(cfg, seed, "dense", store)))
    elif name == "token_level.s12":
        params = run_stage_id(cfg, seed, "2", train_model(cfg, seed, "token_level.s1", store))
    elif name == "token_level":
        params = run_stage_id(cfg, seed, "3", train_model(cfg, seed, "token_level.s12", store))
    elif name == "random":
        params = run_stage_id(cfg, seed, "3", train_model(cfg, seed, "token_level.s12", store), sampler="random")
    else:
        sampler = "frame_level" if name == "frame_level" else "token_level"
        use_positions = name != "token_level_nopos"
        params = attach_vts(cfg, seed, train_model(cfg, seed, "dense" if use_positions else "dense_nopos", store))
        for stage in "123":
            params = run_stage_id(cfg, seed, stage, params, sampler, use_positions)
    store.save(seed, name, params)
    return params


def train_stage_subset(cfg: ExperimentConfig, seed: int, subset: str, store: CheckpointStore,
                       memo: dict | None = None) -> dict:
    """Dense checkpoint + fresh VTS, then the listed stages in order.

    Prefixes that coincide with stored ``token_level`` checkpoints are loaded
    rather than retrained; they are bitwise identical by construction.
    """
    memo = {} if memo is None else memo
    stages = () if subset == "none" else tuple(subset.split("+"))
    stored = {("1",): "token_level.s1", ("1", "2"): "token_level.s12", ("1", "2", "3"): "token_level"}
    for cut in range(len(stages), -1, -1):
        prefix = stages[:cut]
        if prefix in memo:
            params = memo[prefix]
            break
        if prefix in stored and store.has(seed, stored[prefix]):
            params = store.load(seed, stored[prefix])
            break
        if not prefix:
            params = attach_vts(cfg, seed, store.load(seed, "dense"))
            break
    memo[prefix] = params
    for i in range(cut, len(stages)):
        params = run_stage_id(cfg, seed, stages[i], params)
        memo[stages[:i + 1]] = params
    return params


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class ResultRow:
    experiment: str
    config: str
    seed: int
    metric: str
    value: float

    def __post_init__(self):
        if self.metric not in metrics.METRIC_NAMES:
            raise ValidationError(f"metric {self.metric!r} not in {metrics.METRIC_NAMES}")


def config_key(**kw) -> str:
    return ";".join(f"{k}={v}" for k, v in kw.items())


def score(params, data: sg.SynthDataset, pcfg: tr.PipelineConfig, cfg: ExperimentConfig, seed: int) -> dict:
    # random selection at eval time draws from a fixed per-seed stream
    return tr.evaluate(params, data, pcfg, RngState(seed).child("eval/sampler"), cfg.hit_level)


def chance_miou(data: sg.SynthDataset, draws: int, rng: RngState) -> float:
    """mIoU of intervals whose endpoints are two uniform draws over the video, averaged over ``draws``."""
    gts = [metrics.Interval(*g) for g in data.intervals]
    values = []
    for _ in range(draws):
        ends = np.sort(rng.uniform((len(data), 2), 0.0, data.task.duration), axis=1)
        values.append(metrics.mean_iou([metrics.Interval(*e) for e in ends], gts))
    return float(np.mean(values))


def run_density_sweep(cfg: ExperimentConfig, store: CheckpointStore) -> list[ResultRow]:
    """Token-level model at each rho vs the dense model on budget-matched uniform frames."""
    rows = []
    for seed in cfg.seeds:
        models = {"token_level": store.load(seed, "token_level"), "uniform": store.load(seed, "dense")}
        data = eval_set(cfg, seed)
        for rho in cfg.rho_grid:
            density = cfg.task.fps * rho
            for model, params in models.items():
                s = score(params, data, cfg.pipeline(sampler=model, rho=rho), cfg, seed)
                s["token_efficiency"] = metrics.token_efficiency(s["r1_07"], density)
                key = config_key(model=model, rho=rho, density=density)
                rows += [ResultRow("density_sweep", key, seed, m, s[m]) for m in SWEEP_METRICS]
    return rows


def _sampler_model(kind: str) -> tuple[str, str]:
    """Checkpoint and eval-time sampler for each ablation row."""
    return {"token_level": ("token_level", "token_level"), "frame_level": ("frame_level", "frame_level"),
            "uniform": ("dense", "uniform"), "random": ("random", "random")}[kind]


def run_sampler_ablation(cfg: ExperimentConfig, store: CheckpointStore) -> list[ResultRow]:
    rows = []
    for seed in cfg.seeds:
        data = eval_set(cfg, seed)
        for kind in cfg.samplers:
            name, sampler = _sampler_model(kind)
            s = score(store.load(seed, name), data, cfg.pipeline(sampler=sampler), cfg, seed)
            rows += [ResultRow("sampler_ablation", config_key(sampler=kind, rho=cfg.rho), seed, m, s[m])
                     for m in EVAL_METRICS]
    return rows


def run_pe_ablation(cfg: ExperimentConfig, store: CheckpointStore) -> list[ResultRow]:
    """Token-level pipeline with and without positions, plus the random-interval chance level."""
    rows = []
    for seed in cfg.seeds:
        data = eval_set(cfg, seed)
        for positions, name in ((True, "token_level"), (False, "token_level_nopos")):
            s = score(store.load(seed, name), data, cfg.pipeline(use_positions=positions), cfg, seed)
            key = config_key(positions="on" if positions else "off", rho=cfg.rho)
            rows += [ResultRow("pe_ablation", key, seed, m, s[m]) for m in EVAL_METRICS]
        chance = chance_miou(data, cfg.chance_draws, RngState(seed).child("chance"))
        rows.append(ResultRow("pe_ablation", config_key(positions="chance", rho=cfg.rho), seed, "miou", chance))
    return rows


def run_stage_ablation(cfg: ExperimentConfig, store: CheckpointStore) -> list[ResultRow]:
    """Stage subsets from the shared dense checkpoint, plus the dense model itself as reference."""
    rows = []
    for seed in cfg.seeds:
        data = eval_set(cfg, seed)
        s = score(store.load(seed, "dense"), data, cfg.pipeline(sampler="dense", rho=1.0), cfg, seed)
        rows += [ResultRow("stage_ablation", config_key(stages="dense", rho=1.0), seed, m, s[m]) for m in EVAL_METRICS]
        memo: dict = {}
        for subset in cfg.stage_subsets:
            params = train_stage_subset(cfg, seed, subset, store, memo)
            s = score(params, data, cfg.pipeline(), cfg, seed)
            rows += [ResultRow("stage_ablation", config_key(stages=subset, rho=cfg.rho), seed, m, s[m])
                     for m in EVAL_METRICS]
    return rows


def run_eval(cfg: ExperimentConfig, store: CheckpointStore) -> list[ResultRow]:
    """Every stored model of ``cfg.models`` at the training budget."""
    rows = []
    for seed in cfg.seeds:
        data = eval_set(cfg, seed)
        for name in cfg.models:
            if name.startswith("dense"):
                pcfg = cfg.pipeline(sampler="dense", rho=1.0, use_positions=name == "dense")
            else:
                sampler = {"frame_level": "frame_level", "random": "random"}.get(name, "token_level")
                pcfg = cfg.pipeline(sampler=sampler, use_positions=name != "token_level_nopos")
            s = score(store.load(seed, name), data, pcfg, cfg, seed)
            rows += [ResultRow("eval", config_key(model=name, rho=pcfg.rho), seed, m, s[m]) for m in EVAL_METRICS]
    return rows


def required_models(experiment: str, cfg: ExperimentConfig) -> tuple[str, ...]:
    """Checkpoints an experiment reads."""
    if experiment == "density_sweep":
        return ("dense", "token_level")
    if experiment == "sampler_ablation":
        return tuple(dict.fromkeys(_sampler_model(k)[0] for k in cfg.samplers))
    if experiment == "pe_ablation":
        return ("token_level", "token_level_nopos")
    if experiment == "stage_ablation":
        return ("dense",)
    if experiment == "eval":
        return cfg.models
    return ()


RUNNERS = {"density_sweep": run_density_sweep, "sampler_ablation": run_sampler_ablation,
           "pe_ablation": run_pe_ablation, "stage_ablation": run_stage_ablation, "eval": run_eval}


def check_checkpoints(experiment: str, cfg: ExperimentConfig, store: CheckpointStore) -> None:
    for seed in cfg.seeds:
        for name in required_models(experiment, cfg):
            if not store.has(seed, name):
                raise MissingCheckpointError(
                    f"missing checkpoint {store.path(seed, name)}; run `vtslab train` for model {name!r} first")


# ---------------------------------------------------------------- tables

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def rows_to_csv(rows: Iterable[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROW_COLUMNS)
    for r in rows:
        writer.writerow([r.experiment, r.config, r.seed, r.metric, _fmt(r.value)])
    return buf.getvalue()


def aggregate(rows: Iterable[ResultRow]) -> list[tuple]:
    """``(experiment, config, metric, n, mean, sd)`` in first-seen order; sd is the sample sd (0 for n=1)."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r.experiment, r.config, r.metric), []).append(float(r.value))
    out = []
    for (exp, key, metric), values in groups.items():
        sd = statistics.stdev(values) if len(values) > 1 else 0.0
        out.append((exp, key, metric, len(values), statistics.fmean(values), sd))
    return out


def aggregate_to_csv(rows: Iterable[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(AGGREGATE_COLUMNS)
    for exp, key, metric, n, mean, sd in aggregate(rows):
        writer.writerow([exp, key, metric, n, _fmt(mean), _fmt(sd)])
    return buf.getvalue()


def mean_of(rows: Iterable[ResultRow], metric: str = "miou", **match) -> float:
    """Mean ``metric`` over rows whose config contains every ``key=value`` in ``match``."""
    want = {f"{k}={v}" for k, v in match.items()}
    values = [r.value for r in rows if r.metric == metric and want <= set(r.config.split(";"))]
    if not values:
        raise UsageError(f"no rows for {metric} with {match}")
    return float(np.mean(values))


def write_results(rows: list[ResultRow], cfg: ExperimentConfig, out_dir) -> Path:
    """``rows.csv``, ``aggregate.csv`` and ``config.snapshot`` (YAML) under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "rows.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    (out_dir / "aggregate.csv").write_text(aggregate_to_csv(rows), encoding="utf-8")
    (out_dir / "config.snapshot").write_text(cfg.to_yaml(), encoding="utf-8")
    return out_dir


def summary_json(rows: list[ResultRow]) -> str:
    return json.dumps([dict(zip(AGGREGATE_COLUMNS, a)) for a in aggregate(rows)], indent=2)
