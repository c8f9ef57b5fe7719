"""Samplers, the end-to-end toy pipeline and the staged optimization schedule."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import metrics
from . import numerics as nx
from . import synthground as sg
from . import vts
from .errors import InvalidArgumentError, TrainingDiverged, UsageError
from .numerics import Node, RngState
from .vts import SampledTokens, TokenBatch, VtsConfig

log = logging.getLogger(__name__)

SAMPLER_KINDS = ("token_level", "frame_level", "uniform", "random", "dense")
GROUPS = ("vts", "projector", "head_base", "head_adapter")
STAGE_IDS = ("pretrain_dense", "stage1_vts_warmup", "stage2_joint_adapter", "stage3_grounding_ft")
LOG_COLUMNS = ("stage", "epoch", "split", "loss", "mIoU", "r1_03", "r1_05", "r1_07")


# ---------------------------------------------------------------- samplers

def vts_view(params: Mapping) -> dict:
    """Strip the ``vts.`` prefix for the functions in :mod:`vtslab.vts`."""
    return {k[4:]: v for k, v in params.items() if k.startswith("vts.")}


def _uniform_weights(tokens: TokenBatch, idx: np.ndarray, vts_params) -> SampledTokens:
    k = idx.shape[-1]
    emb = tokens.embeddings
    if vts_params:
        emb = vts.mlp(emb, vts_params)
    emb = nx.gather(nx.scale(emb, 1.0 / k), idx[..., None], axis=-2)
    weights = nx.const(np.full(idx.shape, 1.0 / k))
    return SampledTokens(emb, weights, idx, tokens.positions[idx], tokens.frame_count, tokens.patches_per_frame)


def uniform_frames(frame_count: int, rho: float) -> np.ndarray:
    """``ceil(rho T)`` evenly spaced frame indices ``floor(i T / n)``; stride ``1/rho`` when it divides ``T``."""
    n = vts.select_k(frame_count, rho)
    return (np.arange(n) * frame_count) // n


def _frames_to_tokens(frames: np.ndarray, patches: int) -> np.ndarray:
    return (frames[..., :, None] * patches + np.arange(patches)).reshape(frames.shape[:-1] + (-1,))


def _expand_frames(x, patches: int):
    """Repeat each frame entry ``patches`` times along the last axis."""
    x = nx.as_node(x)
    rep = nx.mul(nx.reshape(x, x.shape + (1,)), np.ones(patches))
    return nx.reshape(rep, x.shape[:-1] + (x.shape[-1] * patches,))


def frame_level_forward(tokens: TokenBatch, query, params, cfg: VtsConfig, rng, tau_g=None):
    """Average-pool tokens per frame, score frames, keep the top ``ceil(rho T)`` frames whole."""
    T, P = tokens.frame_count, tokens.patches_per_frame
    emb = tokens.embeddings
    batch = emb.shape[:-2]
    frames = nx.mean(nx.reshape(emb, batch + (T, P, emb.shape[-1])), axis=-2)
    logits = vts.relevance_logits(frames, query, params)
    w_f = nx.softmax(logits, cfg.tau)
    k_f = vts.select_k(T, cfg.rho)
    trace = vts.gumbel_topk(nx.log_softmax(logits, cfg.tau), k_f, cfg.tau_g if tau_g is None else tau_g,
                            rng, cfg.mode, scores_w=w_f)
    mask = trace.ste_z if cfg.straight_through else trace.soft_z
    hard = np.repeat(trace.hard_z, P, axis=-1)
    sampled = vts.weighted_selection(tokens, _expand_frames(w_f, P), _expand_frames(mask, P), hard, params, cfg.tau_prime)
    return sampled, trace


def apply_sampler(kind: str, tokens: TokenBatch, query, vts_params, rho: float, rng: RngState | None,
                  cfg: VtsConfig | None = None, tau_g=None) -> SampledTokens:
    """Budget-matched token selection.

    ``token_level`` and ``frame_level`` run the learned sampler.  ``uniform``,
    ``random`` and ``dense`` give every kept token weight ``1/K``; their features
    pass through the sampler MLP when ``vts_params`` is given and are left
    untouched otherwise (the dense model).
    """
    if kind not in SAMPLER_KINDS:
        raise UsageError(f"unknown sampler kind {kind!r}; expected one of {SAMPLER_KINDS}")
    batch = tokens.embeddings.shape[:-2]
    n, T, P = tokens.n_tokens, tokens.frame_count, tokens.patches_per_frame
    if kind in ("token_level", "frame_level"):
        if not vts_params:
            raise UsageError(f"{kind} sampling needs VTS parameters")
        cfg = dataclasses.replace(cfg or VtsConfig(d_model=tokens.embeddings.shape[-1]), rho=rho)
        fwd = vts.vts_forward if kind == "token_level" else frame_level_forward
        return fwd(tokens, query, vts_params, cfg, rng, tau_g=tau_g)[0]
    if kind == "dense":
        idx = np.broadcast_to(np.arange(n), batch + (n,))
    elif kind == "uniform":
        idx = np.broadcast_to(_frames_to_tokens(uniform_frames(T, rho), P), batch + (vts.select_k(T, rho) * P,))
    else:
        if rng is None:
            raise UsageError("random sampling needs an RngState")
        k = vts.select_k(n, rho)
        rows = [np.sort(rng.permutation(n)[:k]) for _ in range(int(np.prod(batch, dtype=int)))]
        idx = np.stack(rows).reshape(batch + (k,)) if rows else np.zeros(batch + (k,), dtype=int)
    return _uniform_weights(tokens, np.ascontiguousarray(idx), vts_params)


# ---------------------------------------------------------------- adapter

def low_rank_adapter_update(params: dict, rank: int, rng: RngState, init_scale: float = 0.01) -> dict:
    """Attach low-rank deltas ``A @ B`` to the head's attention and readout matrices.

    ``A`` starts small-random and ``B`` at zero, so the head output is unchanged
    until ``B`` moves.  The readout matrix has only three columns, so its
    adapter rank is ``min(rank, 3)``.
    """
    attn = params["head.attn"]
    readout = params["head.readout.weight"]
    if not 1 <= rank <= min(attn.shape):
        raise InvalidArgumentError(f"adapter rank must lie in [1, {min(attn.shape)}], got {rank}")
    r_out = min(rank, min(readout.shape))
    out = dict(params)
    out["adapter.attn.a"] = init_scale * rng.normal((attn.shape[0], rank))
    out["adapter.attn.b"] = np.zeros((rank, attn.shape[1]))
    out["adapter.readout.a"] = init_scale * rng.normal((readout.shape[0], r_out))
    out["adapter.readout.b"] = np.zeros((r_out, readout.shape[1]))
    return out


# ---------------------------------------------------------------- pipeline

@dataclass(frozen=True)
class PipelineConfig:
    sampler: str = "token_level"
    rho: float = 0.5
    use_positions: bool = True
    saliency_weight: float = 0.5
    vts: VtsConfig = field(default_factory=VtsConfig)

    def with_(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


def forward(params: Mapping, data: sg.SynthDataset, pcfg: PipelineConfig, rng: RngState | None,
            mode: str = "eval", tau_g=None):
    """Projector -> sampler -> head -> loss on a batch; returns ``(HeadOutput, loss)``."""
    task = data.task
    tokens = sg.project_tokens(data.features, params, task)
    vparams = vts_view(params)
    cfg = dataclasses.replace(pcfg.vts, mode=mode)
    # the dense model bypasses the sampler entirely, MLP included
    vparams = None if pcfg.sampler == "dense" else (vparams or None)
    sampled = apply_sampler(pcfg.sampler, tokens, data.queries, vparams, pcfg.rho, rng, cfg, tau_g=tau_g)
    out = sg.head_forward(sampled, data.queries, params, pcfg.use_positions, task.duration)
    loss = sg.grounding_loss(out.start, out.end, data.intervals, out.saliency_logits, data.saliency,
                             task.duration, pcfg.saliency_weight)
    return out, loss


def group_keys(params: Mapping, groups: Iterable[str]) -> list[str]:
    keys = []
    for g in groups:
        if g not in GROUPS:
            raise UsageError(f"unknown parameter group {g!r}")
        if g == "vts":
            keys += [k for k in params if k.startswith("vts.")]
        elif g == "projector":
            keys += [k for k in sg.PROJECTOR_KEYS if k in params]
        elif g == "head_base":
            keys += [k for k in sg.HEAD_BASE_KEYS if k in params]
        else:
            keys += [k for k in sg.ADAPTER_KEYS if k in params]
    return sorted(set(keys))


@dataclass(frozen=True)
class StagePlan:
    stage: str
    trainable: tuple[str, ...]
    epochs: int
    learning_rate: float
    batch_size: int = 32
    momentum: float = 0.9
    sampler: str | None = None  # overrides the pipeline sampler for this stage

    def __post_init__(self):
        if self.stage not in STAGE_IDS:
            raise UsageError(f"unknown stage {self.stage!r}")
        required = {
            "stage1_vts_warmup": {"vts"},
            "stage2_joint_adapter": {"vts", "projector", "head_adapter"},
            "stage3_grounding_ft": {"vts", "projector", "head_adapter"},
        }.get(self.stage)
        if required is not None and set(self.trainable) != required:
            raise UsageError(f"{self.stage} must train exactly {sorted(required)}, got {sorted(self.trainable)}")
        if self.stage == "pretrain_dense" and "vts" in self.trainable:
            raise UsageError("pretrain_dense bypasses VTS")


DEFAULT_PLANS = {
    "pretrain_dense": StagePlan("pretrain_dense", ("projector", "head_base"), 60, 0.2),
    "stage1_vts_warmup": StagePlan("stage1_vts_warmup", ("vts",), 20, 0.1),
    "stage2_joint_adapter": StagePlan("stage2_joint_adapter", ("vts", "projector", "head_adapter"), 20, 0.05),
    "stage3_grounding_ft": StagePlan("stage3_grounding_ft", ("vts", "projector", "head_adapter"), 20, 0.02),
}


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def add(self, stage, epoch, split, loss, scores=None):
        scores = scores or {}
        self.rows.append({
            "stage": stage, "epoch": epoch, "split": split, "loss": loss,
            "mIoU": scores.get("miou", ""), "r1_03": scores.get("r1_03", ""),
            "r1_05": scores.get("r1_05", ""), "r1_07": scores.get("r1_07", ""),
        })

    def append_csv(self, path) -> None:
        """Append rows, writing the header only when the file is new."""
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            if new:
                writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_stage(plan: StagePlan, params: Mapping[str, np.ndarray], data: sg.SynthDataset, rng: RngState,
              pcfg: PipelineConfig, val: sg.SynthDataset | None = None, train_log: TrainingLog | None = None,
              grad_clip: float | None = 5.0) -> dict[str, np.ndarray]:
    """Momentum SGD on the grounding loss; only ``plan.trainable`` groups move.

    ``data`` is a fixed dataset or a :class:`SynthStream` drawing fresh samples
    each epoch.  Parameters outside the trainable set are passed through as the
    very same arrays, so they are bitwise unchanged.
    """
    if len(data) == 0:
        raise UsageError("empty training data")
    stream = data
    if plan.stage in ("stage2_joint_adapter", "stage3_grounding_ft") and not any(k.startswith("adapter.") for k in params):
        raise UsageError(f"{plan.stage} needs an attached adapter")
    if plan.sampler is not None:
        pcfg = pcfg.with_(sampler=plan.sampler)
    if plan.stage == "pretrain_dense":
        pcfg = pcfg.with_(sampler="dense", rho=1.0)
    keys = group_keys(params, plan.trainable)
    params = dict(params)
    velocity = {k: np.zeros_like(params[k]) for k in keys}
    n = len(data)
    steps_per_epoch = -(-n // plan.batch_size)
    total_steps = max(plan.epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(plan.epochs):
        if isinstance(stream, sg.SynthStream):
            data = stream.epoch(epoch)
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            batch = data.subset(np.sort(order[b * plan.batch_size:(b + 1) * plan.batch_size]))
            nodes = {k: (nx.param(v) if k in velocity else v) for k, v in params.items()}
            tau_g = pcfg.vts.tau_g_at(step / total_steps)
            _, loss = forward(nodes, batch, pcfg, rng, mode="train", tau_g=tau_g)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"{plan.stage}: non-finite loss at epoch {epoch}, batch {b}")
            nx.backward(loss)
            grads = {k: (nodes[k].grad if nodes[k].grad is not None else np.zeros_like(params[k])) for k in keys}
            if grad_clip is not None:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if not np.isfinite(norm):
                    raise TrainingDiverged(f"{plan.stage}: non-finite gradient at epoch {epoch}, batch {b}")
                if norm > grad_clip:
                    grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
            for k in keys:
                velocity[k] = plan.momentum * velocity[k] + grads[k]
                params[k] = params[k] - plan.learning_rate * velocity[k]
            losses.append(float(loss.value))
            step += 1
        if train_log is not None:
            train_log.add(plan.stage, epoch, "train", float(np.mean(losses)))
            if val is not None:
                scores = evaluate(params, val, pcfg)
                train_log.add(plan.stage, epoch, "val", scores["loss"], scores)
    return params


def pretrain_dense(params, data, plan: StagePlan, rng, pcfg, val=None, train_log=None):
    if plan.stage != "pretrain_dense":
        raise UsageError(f"pretrain_dense got a {plan.stage} plan")
    return run_stage(plan, params, data, rng, pcfg, val, train_log)


def predict(params: Mapping, data: sg.SynthDataset, pcfg: PipelineConfig, rng: RngState | None = None,
            batch_size: int = 128):
    """Eval-mode predictions: ``(intervals (n, 2), saliency_logits (n, T), mean loss)``."""
    rng = rng or RngState(0)
    preds, sal, losses = [], [], []
    for b in range(0, len(data), batch_size):
        batch = data.subset(slice(b, b + batch_size))
        out, loss = forward(params, batch, pcfg, rng, mode="eval")
        preds.append(np.stack([out.start.value, out.end.value], axis=-1))
        sal.append(out.saliency_logits.value)
        losses.append(float(loss.value) * len(batch))
    # c - h can round to a hair below zero
    intervals = np.clip(np.concatenate(preds), 0.0, data.task.duration)
    return intervals, np.concatenate(sal), sum(losses) / len(data)


def evaluate(params: Mapping, data: sg.SynthDataset, pcfg: PipelineConfig, rng: RngState | None = None,
             hit_level: int = metrics.HIT_LEVEL) -> dict[str, float]:
    preds, sal, loss = predict(params, data, pcfg, rng)
    gts = [metrics.Interval(*g) for g in data.intervals]
    pis = [metrics.Interval(*p) for p in preds]
    out = {"loss": loss, "miou": metrics.mean_iou(pis, gts)}
    for t, name in ((0.3, "r1_03"), (0.5, "r1_05"), (0.7, "r1_07")):
        out[name] = metrics.recall_at_1(pis, gts, t)
    out["map"] = 100.0 * metrics.mean_average_precision(
        [(s, lv >= hit_level) for s, lv in zip(sal, data.saliency)])
    out["hit1"] = metrics.hit_at_1([(s, lv) for s, lv in zip(sal, data.saliency)], hit_level)
    return out
