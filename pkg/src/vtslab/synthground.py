"""Synthetic grounding task and the pooled-readout head that stands in for the LLM.

Each sample is a video of ``T`` frames x ``P`` patches.  A random unit query
direction ``u`` is drawn per sample; tokens inside the planted interval carry
``alpha * L u`` (``L`` a fixed orthonormal lift into encoder space) plus
isotropic noise, everything else is pure noise.  Query rows are ``u`` plus
noise.  Time is only recoverable from token positions.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import DimensionError, InvalidArgumentError, ValidationError
from .numerics import Node, RngState
from .vts import SampledTokens, TokenBatch


@dataclass(frozen=True)
class SynthTask:
    frame_count: int = 32
    patches_per_frame: int = 4
    encoder_dim: int = 48
    model_dim: int = 32
    query_tokens: int = 8
    min_len: int = 3
    max_len: int = 8
    # fixes the planted interval (start, end) in frames when set
    interval: tuple[int, int] | None = None
    signal_strength: float = 1.0
    noise_scale: float = 0.5
    fps: float = 2.0
    lift_seed: int = 20240611

    def __post_init__(self):
        if self.interval is not None:
            s, e = self.interval
            if not 0 <= s < e <= self.frame_count:
                raise ValidationError(f"interval {self.interval} outside [0, {self.frame_count}]")
        if not 1 <= self.min_len <= self.max_len <= self.frame_count:
            raise ValidationError(f"bad interval length bounds [{self.min_len}, {self.max_len}]")
        if self.signal_strength < 0 or not self.noise_scale > 0:
            raise ValidationError("need signal_strength >= 0 and noise_scale > 0")
        if self.encoder_dim < self.model_dim:
            raise ValidationError("encoder_dim must be >= model_dim for the query lift")
        if not self.fps > 0:
            raise ValidationError("fps must be positive")

    @property
    def n_tokens(self) -> int:
        return self.frame_count * self.patches_per_frame

    @property
    def duration(self) -> float:
        return self.frame_count / self.fps

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["interval"] is not None:
            d["interval"] = list(d["interval"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthTask":
        d = dict(d)
        if d.get("interval") is not None:
            d["interval"] = tuple(d["interval"])
        return cls(**d)


@dataclass
class SynthDataset:
    """Stacked samples: ``features (n, T*P, D_v)``, ``queries (n, N_t, D)``,
    ``intervals (n, 2)`` in seconds and per-frame ``saliency (n, T)``."""

    task: SynthTask
    features: np.ndarray
    queries: np.ndarray
    intervals: np.ndarray
    saliency: np.ndarray

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx) -> "SynthDataset":
        return SynthDataset(self.task, self.features[idx], self.queries[idx], self.intervals[idx], self.saliency[idx])

    def sample(self, i: int) -> "SynthDataset":
        return self.subset(slice(i, i + 1))


@lru_cache(maxsize=16)
def query_lift(encoder_dim: int, model_dim: int, seed: int) -> np.ndarray:
    """Fixed ``(D, D_v)`` map with orthonormal rows taking query space into encoder space."""
    g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, encoder_dim, model_dim])))
    q, _ = np.linalg.qr(g.standard_normal((encoder_dim, model_dim)))
    lift = np.ascontiguousarray(q.T)
    lift.setflags(write=False)
    return lift


def saliency_profile(start: int, end: int, frame_count: int) -> np.ndarray:
    """Integer levels 0..4: 4 on the central frame(s), 1 at the interval edges, 0 outside."""
    levels = np.zeros(frame_count, dtype=np.int64)
    length = end - start
    centers = np.arange(start, end) + 0.5
    offset = np.abs(centers - (start + end) / 2.0)
    inner = 0.5 if length % 2 == 0 else 0.0
    span = (length - 1) / 2.0 - inner
    if span <= 0:
        levels[start:end] = 4
        return levels
    d = (offset - inner) / span
    levels[start:end] = 4 - np.rint(3.0 * d).astype(np.int64)
    return levels


def generate_batch(task: SynthTask, n: int, rng: RngState, alpha=None, sigma=None, len_range=None) -> SynthDataset:
    """Draw ``n`` samples; ``alpha``/``sigma``/``len_range`` may override per-sample values
    (arrays of length ``n`` or scalars) to build the diverse pre-training mix."""
    T, P, Dv, D, Nt = task.frame_count, task.patches_per_frame, task.encoder_dim, task.model_dim, task.query_tokens
    alpha = np.broadcast_to(np.asarray(task.signal_strength if alpha is None else alpha, dtype=float), (n,))
    sigma = np.broadcast_to(np.asarray(task.noise_scale if sigma is None else sigma, dtype=float), (n,))
    lo, hi = (task.min_len, task.max_len) if len_range is None else len_range

    if task.interval is not None:
        starts = np.full(n, task.interval[0])
        ends = np.full(n, task.interval[1])
    else:
        lengths = rng.integers(lo, hi + 1, shape=n)
        starts = np.floor(rng.uniform(n) * (T - lengths + 1)).astype(np.int64)
        ends = starts + lengths

    u = rng.normal((n, D))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u_enc = u @ query_lift(Dv, D, task.lift_seed)
    queries = u[:, None, :] + sigma[:, None, None] * rng.normal((n, Nt, D))

    frame = np.arange(T * P) // P
    inside = (frame[None, :] >= starts[:, None]) & (frame[None, :] < ends[:, None])
    features = sigma[:, None, None] * rng.normal((n, T * P, Dv))
    features += inside[:, :, None] * (alpha[:, None, None] * u_enc[:, None, :])

    saliency = np.zeros((n, T), dtype=np.int64)
    for i, (s, e) in enumerate(zip(starts, ends)):
        saliency[i] = saliency_profile(s, e, T)
    intervals = np.stack([starts, ends], axis=1) / task.fps
    return SynthDataset(task, features, queries, intervals, saliency)


def generate(task: SynthTask, rng: RngState) -> SynthDataset:
    """A single sample (batch of one)."""
    return generate_batch(task, 1, rng)


@dataclass(frozen=True)
class SynthStream:
    """Fresh samples every epoch: ``epoch(i)`` draws ``n`` samples from ``rng.child(i)``.

    ``alpha_range``, ``sigma_range`` and ``len_range`` randomize the signal
    strength, noise scale and interval length per sample when set.
    """

    task: SynthTask
    n: int
    seed: int
    alpha_range: tuple[float, float] | None = None
    sigma_range: tuple[float, float] | None = None
    len_range: tuple[int, int] | None = None

    def __len__(self):
        return self.n

    def epoch(self, i: int) -> SynthDataset:
        rng = RngState(self.seed).child(i)
        alpha = sigma = None
        if self.alpha_range is not None:
            alpha = rng.uniform(self.n, *self.alpha_range)
        if self.sigma_range is not None:
            sigma = rng.uniform(self.n, *self.sigma_range)
        return generate_batch(self.task, self.n, rng, alpha, sigma, self.len_range)


# ---------------------------------------------------------------- dump / load

def dump_dataset(ds: SynthDataset, path) -> None:
    """One ``.npz`` archive: ``header`` holds the task as JSON bytes, then
    ``NNNNNN/<field>`` arrays per sample."""
    header = json.dumps({"format": "vtslab-synth/1", "n": len(ds), "task": ds.task.to_dict()}, sort_keys=True)
    arrays = {"header": np.frombuffer(header.encode("utf-8"), dtype=np.uint8)}
    for i in range(len(ds)):
        arrays[f"{i:06d}/features"] = ds.features[i]
        arrays[f"{i:06d}/query"] = ds.queries[i]
        arrays[f"{i:06d}/interval"] = ds.intervals[i]
        arrays[f"{i:06d}/saliency"] = ds.saliency[i]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path) -> SynthDataset:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        if "header" not in data.files:
            raise ValidationError(f"{path}: missing header")
        header = json.loads(data["header"].tobytes().decode("utf-8"))
        task = SynthTask.from_dict(header["task"])
        n = header["n"]
        fields = {name: [data[f"{i:06d}/{name}"] for i in range(n)] for name in ("features", "query", "interval", "saliency")}
    if n == 0:
        T, P = task.frame_count, task.patches_per_frame
        return SynthDataset(task, np.zeros((0, T * P, task.encoder_dim)), np.zeros((0, task.query_tokens, task.model_dim)),
                            np.zeros((0, 2)), np.zeros((0, T), dtype=np.int64))
    return SynthDataset(task, np.stack(fields["features"]), np.stack(fields["query"]),
                        np.stack(fields["interval"]), np.stack(fields["saliency"]))


# ---------------------------------------------------------------- head

HEAD_BASE_KEYS = ("head.attn", "head.readout.weight", "head.readout.bias")
PROJECTOR_KEYS = ("proj.weight", "proj.bias")
ADAPTER_KEYS = ("adapter.attn.a", "adapter.attn.b", "adapter.readout.a", "adapter.readout.b")
SALIENCY_GAIN = 16.0
ATTENTION_GAIN = 5.0


def readout_in_dim(model_dim: int) -> int:
    """Pooled features plus the weighted position mean and second moment."""
    return model_dim + 2


def init_head(task: SynthTask, rng: RngState) -> dict[str, np.ndarray]:
    D = task.model_dim
    return {
        "proj.weight": nx.glorot(rng, task.encoder_dim, D),
        "proj.bias": np.zeros(D),
        # identity start: relevance begins as a plain dot product with the query
        "head.attn": np.eye(D),
        "head.readout.weight": 0.1 * nx.glorot(rng, readout_in_dim(D), 3),
        "head.readout.bias": np.zeros(3),
    }


def project(features, params) -> Node:
    features = nx.as_node(features)
    w = nx.as_node(params["proj.weight"])
    if features.shape[-1] != w.shape[0]:
        raise DimensionError(f"features of width {features.shape[-1]} vs projector input {w.shape[0]}")
    return nx.add(nx.matmul(features, w), params["proj.bias"])


def project_tokens(features, params, task: SynthTask) -> TokenBatch:
    return TokenBatch(project(features, params), task.frame_count, task.patches_per_frame)


def _effective(params, name):
    base = nx.as_node(params[f"head.{name}" if name == "attn" else f"head.{name}.weight"])
    a_key = f"adapter.{name}.a"
    if a_key not in params:
        return base
    return nx.add(base, nx.matmul(params[a_key], params[f"adapter.{name}.b"]))


@dataclass
class HeadOutput:
    start: Node  # (B,) seconds
    end: Node
    saliency_logits: Node  # (B, T)
    attention: Node  # (B, K)


def head_forward(sampled: SampledTokens, query, params, use_positions: bool = True, duration: float = 1.0) -> HeadOutput:
    """Query-attentive pooling over the sampled tokens followed by an affine readout.

    Each token's content is read back as ``u_i = v_i / w_hat_i`` (the sampler MLP
    output; ``K v_i`` under uniform weights), so the weights act only as an
    attention prior: ``a_i ~ w_hat_i * exp(s_i)`` with ``s_i = u_i A qbar``.  It yields the pooled feature ``phi`` and the
    weighted mean ``m1`` and second moment ``m2`` of the normalized frame
    positions ``x = (t + 0.5) / T`` (zeros when positions are off).  The readout
    ``z = [phi, m1, m2] W + b`` corrects a moment-matched interval::

        var  = m2 - m1^2 + 1 / (12 T^2)
        c    = sigmoid(logit(m1') + z0),        m1' = eps + (1 - 2 eps) m1, eps = 1 / (4T)
        h    = min(sqrt(3 var) * exp(z1), c, 1 - c)
        (start, end) = duration * (c - h, c + h)

    so ``0 <= start <= end <= duration``.  For attention spread evenly over
    ``L`` whole frames ``sqrt(3 var) = L / (2T)``, the exact half-width.  Frame
    saliency logits are ``-g (T (x_t - m1))^2 / 16`` with bounded gain
    ``g = SALIENCY_GAIN * sigmoid(z2)`` at each frame's
    normalized index ``x_t``, a parabola peaked at the attention centroid.
    """
    emb = nx.as_node(sampled.embeddings)
    if sampled.k < 1:
        raise InvalidArgumentError("no sampled tokens")
    query = nx.as_node(query)
    batch = emb.shape[:-2]
    K, D = emb.shape[-2], emb.shape[-1]
    T = sampled.frame_count

    keys = nx.div(emb, nx.reshape(sampled.weights, batch + (K, 1)))
    qbar = nx.mean_pool_rows(query)
    qa = nx.matmul(nx.reshape(qbar, batch + (1, D)), _effective(params, "attn"))
    s = nx.reshape(nx.matmul(keys, nx.reshape(qa, batch + (D, 1))), batch + (K,))
    # cosine attention with a fixed gain: the head cannot sharpen without limit
    key_norm = nx.exp(nx.scale(nx.log(nx.add(nx.sum_(nx.mul(keys, keys), axis=-1), 1e-12)), 0.5))
    q_norm = nx.exp(nx.scale(nx.log(nx.add(nx.sum_(nx.mul(qa, qa), axis=-1), 1e-12)), 0.5))  # (B, 1)
    s = nx.scale(nx.div(s, nx.mul(key_norm, q_norm)), ATTENTION_GAIN)
    e = nx.mul(sampled.weights, nx.exp(nx.sub(s, s.value.max(axis=-1, keepdims=True))))
    attn = nx.div(e, nx.sum_(e, axis=-1, keepdims=True))

    pooled = nx.sum_(nx.mul(nx.reshape(attn, batch + (K, 1)), keys), axis=-2)  # (B, D)
    if use_positions:
        x = (sampled.positions[..., 0] + 0.5) / T
        frame_x = (np.arange(T) + 0.5) / T
    else:
        x = np.zeros(sampled.indices.shape)
        frame_x = np.zeros(T)
    m1 = nx.sum_(nx.mul(attn, x), axis=-1, keepdims=True)  # (B, 1)
    m2 = nx.sum_(nx.mul(attn, x * x), axis=-1, keepdims=True)
    phi = nx.concat([pooled, m1, m2], axis=-1)

    z = nx.add(nx.matmul(nx.reshape(phi, batch + (1, D + 2)), _effective(params, "readout")), params["head.readout.bias"])
    z = nx.reshape(z, batch + (3,))
    z0, z1, z2 = (nx.gather(z, np.full(batch + (1,), j), axis=-1) for j in range(3))

    var = nx.add(nx.sub(m2, nx.mul(m1, m1)), 1.0 / (12.0 * T * T))
    eps = 0.25 / T
    m1s = nx.add(nx.scale(m1, 1.0 - 2.0 * eps), eps)
    c = nx.sigmoid(nx.add(nx.sub(nx.log(m1s), nx.log(nx.sub(1.0, m1s))), z0))
    spread = nx.exp(nx.add(nx.scale(nx.log(nx.scale(var, 3.0)), 0.5), z1))
    half = nx.minimum(spread, nx.minimum(c, nx.sub(1.0, c)))
    start = nx.reshape(nx.scale(nx.sub(c, half), duration), batch)
    end = nx.reshape(nx.scale(nx.add(c, half), duration), batch)

    dist = nx.sub(frame_x, m1)  # (B, T)
    sal = nx.scale(nx.mul(nx.sigmoid(z2), nx.mul(dist, dist)), -SALIENCY_GAIN * (T * T) / 16.0)
    return HeadOutput(start, end, sal, attn)


def grounding_loss(start, end, gt_intervals, saliency_logits, gt_saliency, duration: float, saliency_weight: float = 0.5) -> Node:
    """Batch mean of ``(|ds| + |de|) / (2 duration) + lambda * CE(saliency)``.

    The saliency term is the cross-entropy between the normalized ground-truth
    level profile over frames and the softmax of the predicted frame logits;
    its minimum is the entropy of the target (zero for a one-hot target).
    """
    gt = np.asarray(gt_intervals, dtype=np.float64)
    bound = nx.add(nx.absolute(nx.sub(start, gt[..., 0])), nx.absolute(nx.sub(end, gt[..., 1])))
    bound = nx.scale(bound, 1.0 / (2.0 * duration))
    total = bound
    if saliency_weight:
        y = np.asarray(gt_saliency, dtype=np.float64)
        mass = y.sum(axis=-1, keepdims=True)
        target = np.where(mass > 0, y / np.where(mass > 0, mass, 1.0), 1.0 / y.shape[-1])
        ce = nx.scale(nx.sum_(nx.mul(target, nx.log_softmax(saliency_logits)), axis=-1), -1.0)
        total = nx.add(bound, nx.scale(ce, saliency_weight))
    return nx.mean(total, axis=0) if total.value.ndim else total
