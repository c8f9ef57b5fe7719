"""Query-guided visual token sampling.

Pipeline for one forward pass::

    w      = softmax((V W_v) . (mean(Q) W_q) / tau)
    z      = softmax((log w + g) / tau_g)           g ~ Gumbel(0, 1) in train mode
    z_hard = top-k indicator of (log w + g),        k = ceil(rho * N_v)
    z_ste  = z_hard + (z - stopgrad(z))
    w_hat  = exp(w / tau') * z_ste / sum_j exp(w_j / tau') * z_ste_j
    v_out  = w_hat * MLP(v)                         rows kept for the top-k only

All arrays may carry a leading batch axis: embeddings ``(B, N, D)``, queries
``(B, N_t, D)``.  The selected count is the same for every batch element.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import (
    DimensionError,
    EmptyInputError,
    InvalidArgumentError,
    InvalidHyperparameterError,
    InvariantViolation,
    UsageError,
)
from .numerics import Node, RngState

PARAM_KEYS = ("w_v", "w_q", "mlp.0.weight", "mlp.0.bias", "mlp.1.weight", "mlp.1.bias")


@dataclass(frozen=True)
class VtsConfig:
    d_model: int = 32
    d_r: int = 16
    rho: float = 0.5
    tau: float = 1.0
    tau_g: float = 1.0
    tau_prime: float = 1.0
    mode: str = "train"
    # False replaces z_ste by the soft relaxation in the forward pass as well
    straight_through: bool = True
    # optional linear decay of tau_g over training: (start, end)
    tau_g_schedule: tuple[float, float] | None = None

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise InvalidHyperparameterError(f"rho must lie in (0, 1], got {self.rho}")
        for name in ("tau", "tau_g", "tau_prime"):
            if not getattr(self, name) > 0:
                raise InvalidHyperparameterError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 1 <= self.d_r <= self.d_model:
            raise InvalidHyperparameterError(f"d_r must lie in [1, d_model], got {self.d_r}")
        if self.mode not in ("train", "eval"):
            raise InvalidHyperparameterError(f"mode must be 'train' or 'eval', got {self.mode!r}")

    def tau_g_at(self, progress: float) -> float:
        if self.tau_g_schedule is None:
            return self.tau_g
        start, end = self.tau_g_schedule
        return start + (end - start) * min(max(progress, 0.0), 1.0)


@dataclass
class TokenBatch:
    """Projected visual tokens ``(..., T*P, D)`` laid out frame-major."""

    embeddings: Node
    frame_count: int
    patches_per_frame: int

    def __post_init__(self):
        self.embeddings = nx.as_node(self.embeddings)
        n = self.embeddings.shape[-2]
        if n != self.frame_count * self.patches_per_frame:
            raise DimensionError(
                f"{n} tokens do not match {self.frame_count} frames x {self.patches_per_frame} patches"
            )

    @property
    def n_tokens(self) -> int:
        return self.frame_count * self.patches_per_frame

    @property
    def positions(self) -> np.ndarray:
        """``(N, 2)`` integer (frame, patch) pairs in lexicographic order."""
        t, p = np.divmod(np.arange(self.n_tokens), self.patches_per_frame)
        return np.stack([t, p], axis=1)


@dataclass
class SelectionTrace:
    scores_w: Node
    log_w: Node
    soft_z: Node
    hard_z: np.ndarray
    ste_z: Node
    gumbel_noise: np.ndarray


@dataclass
class SampledTokens:
    embeddings: Node  # (..., K, D)
    weights: Node  # (..., K)
    indices: np.ndarray  # (..., K) ascending original indices
    positions: np.ndarray  # (..., K, 2)
    frame_count: int
    patches_per_frame: int
    full_weights: Node | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.indices.shape[-1]


def select_k(n_v: int, rho: float) -> int:
    if not 0 < rho <= 1:
        raise InvalidHyperparameterError(f"rho must lie in (0, 1], got {rho}")
    if n_v < 1:
        raise EmptyInputError("no tokens to select from")
    # guard against 0.5 * 10 landing a hair above 5 in binary
    k = math.ceil(round(rho * n_v, 9))
    return min(max(k, 1), n_v)


def init_params(cfg: VtsConfig, rng: RngState) -> dict[str, np.ndarray]:
    d, r = cfg.d_model, cfg.d_r
    return {
        "w_v": nx.glorot(rng, d, r),
        "w_q": nx.glorot(rng, d, r),
        "mlp.0.weight": nx.glorot(rng, d, 2 * d),
        "mlp.0.bias": np.zeros(2 * d),
        "mlp.1.weight": nx.glorot(rng, 2 * d, d),
        "mlp.1.bias": np.zeros(d),
    }


def save_params(params: Mapping[str, np.ndarray], path) -> None:
    """Write a flat ``.npz`` archive; array headers carry dtype and shape."""
    arrays = {k: np.asarray(_value(params[k]), dtype=np.float64) for k in PARAM_KEYS}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        missing = [k for k in PARAM_KEYS if k not in data.files]
        if missing:
            raise InvalidArgumentError(f"{path}: missing keys {missing}")
        return {k: data[k].copy() for k in PARAM_KEYS}


def _value(x):
    return x.value if isinstance(x, Node) else x


def mlp(v, params) -> Node:
    h = nx.gelu(nx.add(nx.matmul(v, params["mlp.0.weight"]), params["mlp.0.bias"]))
    return nx.add(nx.matmul(h, params["mlp.1.weight"]), params["mlp.1.bias"])


def relevance_logits(embeddings, query, params) -> Node:
    """Unscaled token-query dot products ``(..., N)`` in the relevance subspace."""
    embeddings, query = nx.as_node(embeddings), nx.as_node(query)
    if query.value.ndim < 2 or query.shape[-2] == 0:
        raise EmptyInputError("query must contain at least one token")
    if embeddings.shape[-2] == 0:
        raise EmptyInputError("no visual tokens")
    if embeddings.shape[-1] != query.shape[-1]:
        raise DimensionError(f"token width {embeddings.shape[-1]} != query width {query.shape[-1]}")
    v_proj = nx.matmul(embeddings, params["w_v"])  # (..., N, R)
    q_proj = nx.matmul(nx.reshape(nx.mean_pool_rows(query), query.shape[:-2] + (1, query.shape[-1])), params["w_q"])
    scores = nx.matmul(v_proj, nx.reshape(q_proj, q_proj.shape[:-2] + (q_proj.shape[-1], 1)))
    return nx.reshape(scores, scores.shape[:-1])


def score_tokens(tokens: TokenBatch, query, params, cfg: VtsConfig) -> Node:
    return nx.softmax(relevance_logits(tokens.embeddings, query, params), cfg.tau)


def topk_mask(values: np.ndarray, k: int) -> np.ndarray:
    """Indicator of the k largest entries along the last axis; ties go to lower indices."""
    n = values.shape[-1]
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"k must lie in [1, {n}], got {k}")
    order = np.argsort(-values, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(values.shape)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def gumbel_topk(
    log_w,
    k: int,
    tau_g: float,
    rng: RngState | None,
    mode: str,
    noise: np.ndarray | None = None,
    scores_w: Node | None = None,
) -> SelectionTrace:
    """Relaxed and hard top-k masks from log-relevances.

    ``log_w`` should come from ``log_softmax`` of the scaled scores rather than
    ``log(w)`` so sharp distributions do not underflow.  ``noise`` overrides
    the sampled Gumbel vector (used by permutation tests).
    """
    log_w = nx.as_node(log_w)
    n = log_w.shape[-1]
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"k must lie in [1, {n}], got {k}")
    if noise is None:
        if mode == "train":
            if rng is None:
                raise UsageError("train mode needs an RngState for Gumbel noise")
            noise = rng.gumbel(log_w.shape)
        else:
            noise = np.zeros(log_w.shape)
    noise = np.asarray(noise, dtype=np.float64)
    perturbed = nx.add(log_w, noise)
    soft = nx.softmax(perturbed, tau_g)
    hard = topk_mask(perturbed.value, k)
    # hard + (soft - soft) keeps the forward value bitwise equal to hard
    ste = nx.add(hard, nx.sub(soft, nx.stopgrad(soft)))
    if scores_w is None:
        scores_w = nx.exp(log_w)
    return SelectionTrace(scores_w, log_w, soft, hard, ste, noise)


def renormalize_and_weight(tokens: TokenBatch, w, trace: SelectionTrace, params, cfg: VtsConfig,
                           mask: Node | None = None) -> SampledTokens:
    """Renormalized weights over the selected set and the weighted MLP outputs.

    ``mask`` replaces ``trace.ste_z`` (soft mode passes ``trace.soft_z``; the
    hard-substitution check passes the constant hard mask).
    """
    w = nx.as_node(w)
    if mask is None:
        mask = trace.soft_z if not cfg.straight_through else trace.ste_z
    if w.shape != trace.hard_z.shape:
        raise DimensionError(f"weights {w.shape} do not match trace {trace.hard_z.shape}")
    return weighted_selection(tokens, w, mask, trace.hard_z, params, cfg.tau_prime)


def weighted_selection(tokens: TokenBatch, w, mask, hard: np.ndarray, params, tau_prime: float) -> SampledTokens:
    """``w_hat = exp(w / tau') * mask / sum(...)`` then ``w_hat * MLP(v)`` gathered at ``hard``."""
    num = nx.mul(nx.exp(nx.scale(w, 1.0 / tau_prime)), mask)
    den = nx.sum_(num, axis=-1, keepdims=True)
    if np.any(den.value <= 0):
        raise InvariantViolation("renormalization denominator is zero")
    w_hat = nx.div(num, den)
    features = nx.mul(nx.reshape(w_hat, w_hat.shape + (1,)), mlp(tokens.embeddings, params))
    return _gather_selected(tokens, features, w_hat, hard)


def _gather_selected(tokens: TokenBatch, features: Node, w_hat: Node, hard: np.ndarray) -> SampledTokens:
    k = int(hard.reshape(-1, hard.shape[-1])[0].sum())
    # stable argsort of the negated mask lists selected indices in ascending order
    idx = np.sort(np.argsort(-hard, axis=-1, kind="stable")[..., :k], axis=-1)
    emb = nx.gather(features, idx[..., None], axis=-2)
    weights = nx.gather(w_hat, idx, axis=-1)
    positions = tokens.positions[idx]
    return SampledTokens(emb, weights, idx, positions, tokens.frame_count, tokens.patches_per_frame, w_hat)


def vts_forward(tokens: TokenBatch, query, params, cfg: VtsConfig, rng: RngState | None = None,
                noise: np.ndarray | None = None, tau_g: float | None = None):
    """Score, select and weight tokens; returns ``(SampledTokens, SelectionTrace)``."""
    logits = relevance_logits(tokens.embeddings, query, params)
    w = nx.softmax(logits, cfg.tau)
    log_w = nx.log_softmax(logits, cfg.tau)
    k = select_k(tokens.n_tokens, cfg.rho)
    trace = gumbel_topk(log_w, k, cfg.tau_g if tau_g is None else tau_g, rng, cfg.mode, noise=noise, scores_w=w)
    return renormalize_and_weight(tokens, w, trace, params, cfg), trace


def vts_backward(sampled: SampledTokens, grad_embeddings, grad_weights=None, leaves: Mapping[str, Node] | None = None):
    """Push upstream gradients at the sampled tokens back through the VTS graph.

    Gradients accumulate on the leaf nodes used in the forward pass; when
    ``leaves`` is given, their gradients are returned by name.
    """
    emb, wts = sampled.embeddings, sampled.weights
    if not isinstance(emb, Node) or not emb.requires_grad:
        raise UsageError("no forward trace to differentiate: sampled tokens were not built from trainable nodes")
    outputs, grads = [emb], [np.asarray(grad_embeddings, dtype=np.float64)]
    if grad_weights is not None:
        outputs.append(wts)
        grads.append(np.asarray(grad_weights, dtype=np.float64))
    nx.backward(outputs, grads)
    if leaves is None:
        return None
    return {name: (node.grad if node.grad is not None else np.zeros_like(node.value)) for name, node in leaves.items()}
