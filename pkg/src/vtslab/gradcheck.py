"""Finite-difference audit of every differentiable piece of the pipeline.

Each check builds a scalar from fresh random inputs, backpropagates once and
compares against central differences with :func:`numerics.rel_error`.  The
VTS chain runs in soft mode without Gumbel noise, so the loss is smooth in
every parameter as long as the hard top-k set does not flip; instances whose
k-th and (k+1)-th scores sit closer than :data:`SELECTION_MARGIN` are redrawn.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import numerics as nx
from . import synthground as sg
from . import training as tr
from . import vts
from .errors import OracleFailureError
from .numerics import RngState

TOLERANCE = 1e-4
FD_STEP = 1e-6
SELECTION_MARGIN = 1e-3
# small enough for exhaustive differences, N_v = 16 <= 32
GRAD_TASK = sg.SynthTask(frame_count=8, patches_per_frame=2, encoder_dim=6, model_dim=4, query_tokens=3,
                         min_len=1, max_len=4)


@dataclass(frozen=True)
class ComponentResult:
    component: str
    max_rel_error: float
    instances: int
    tolerance: float = TOLERANCE

    @property
    def ok(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return f"{self.component:<24} max_rel_err={self.max_rel_error:.3e} instances={self.instances} {status}"


def compare(f: Callable[[Mapping[str, nx.Node]], nx.Node], inputs: Mapping[str, np.ndarray],
            h: float = FD_STEP) -> float:
    """Max relative error between backprop and central differences over all ``inputs``."""
    nodes = {k: nx.param(v) for k, v in inputs.items()}
    nx.backward(f(nodes))
    worst = 0.0
    for name, value in inputs.items():
        def scalar(x, name=name):
            probe = {k: (x if k == name else v) for k, v in inputs.items()}
            return float(f(probe).value)
        analytic = nodes[name].grad if nodes[name].grad is not None else np.zeros_like(value)
        worst = max(worst, nx.rel_error(analytic, nx.fd_gradient(scalar, value, h)))
    return worst


def _weighted_sum(out: nx.Node, weights: np.ndarray) -> nx.Node:
    return nx.sum_(nx.mul(out, weights))


def _op_cases(rng: RngState) -> dict[str, tuple[Callable, dict]]:
    """Scalar test functions, one per primitive; inputs keep clear of kinks and poles."""
    a, b = rng.normal((3, 4)), rng.normal((3, 4))
    pos = rng.uniform((3, 4), 0.5, 2.0)
    c = rng.normal((4, 2))
    w34, w32 = rng.normal((3, 4)), rng.normal((3, 2))
    # |a - b| bounded away from zero keeps minimum and absolute differentiable
    apart = a + np.sign(a - b + 1e-12) * 0.5
    far = np.where(np.abs(a) < 0.3, a + np.sign(a + 1e-12) * 0.3, a)
    idx = np.array([[2], [0], [1]])
    return {
        "add": (lambda p: _weighted_sum(nx.add(p["x"], p["y"]), w34), {"x": a, "y": b}),
        "sub": (lambda p: _weighted_sum(nx.sub(p["x"], p["y"]), w34), {"x": a, "y": b}),
        "mul": (lambda p: _weighted_sum(nx.mul(p["x"], p["y"]), w34), {"x": a, "y": b}),
        "div": (lambda p: _weighted_sum(nx.div(p["x"], p["y"]), w34), {"x": a, "y": pos}),
        "scale": (lambda p: _weighted_sum(nx.scale(p["x"], -1.7), w34), {"x": a}),
        "exp": (lambda p: _weighted_sum(nx.exp(p["x"]), w34), {"x": a}),
        "log": (lambda p: _weighted_sum(nx.log(p["x"]), w34), {"x": pos}),
        "sigmoid": (lambda p: _weighted_sum(nx.sigmoid(p["x"]), w34), {"x": 3 * a}),
        "gelu": (lambda p: _weighted_sum(nx.gelu(p["x"]), w34), {"x": 2 * a}),
        "absolute": (lambda p: _weighted_sum(nx.absolute(p["x"]), w34), {"x": far}),
        "minimum": (lambda p: _weighted_sum(nx.minimum(p["x"], p["y"]), w34), {"x": apart, "y": b}),
        "sum": (lambda p: _weighted_sum(nx.sum_(p["x"], axis=1, keepdims=True), w34[:, :1]), {"x": a}),
        "mean": (lambda p: _weighted_sum(nx.mean(p["x"], axis=0), w34[0]), {"x": a}),
        "mean_pool_rows": (lambda p: _weighted_sum(nx.mean_pool_rows(p["x"]), w34[0]), {"x": a}),
        "reshape": (lambda p: _weighted_sum(nx.reshape(p["x"], (4, 3)), w34.reshape(4, 3)), {"x": a}),
        "concat": (lambda p: _weighted_sum(nx.concat([p["x"], p["y"]], axis=0), np.vstack([w34, -w34])),
                   {"x": a, "y": b}),
        "gather": (lambda p: _weighted_sum(nx.gather(p["x"], idx, axis=-1), w32[:, :1]), {"x": a}),
        "matmul": (lambda p: _weighted_sum(nx.matmul(p["x"], p["y"]), w32), {"x": a, "y": c}),
        "softmax": (lambda p: _weighted_sum(nx.softmax(p["x"], 0.7), w34), {"x": a}),
        "log_softmax": (lambda p: _weighted_sum(nx.log_softmax(p["x"], 1.3), w34), {"x": a}),
    }


def check_ops(seed: int = 0, instances: int = 3) -> list[ComponentResult]:
    worst: dict[str, float] = {}
    root = RngState(seed).child("ops")
    for i in range(instances):
        for name, (f, inputs) in _op_cases(root.child(i)).items():
            worst[name] = max(worst.get(name, 0.0), compare(f, inputs))
    return [ComponentResult("numerics." + k, v, instances) for k, v in worst.items()]


def soft_pipeline(task: sg.SynthTask = GRAD_TASK, rho: float = 0.5) -> tr.PipelineConfig:
    cfg = vts.VtsConfig(d_model=task.model_dim, d_r=2, rho=rho, tau=0.8, tau_g=0.9, tau_prime=0.7,
                        straight_through=False)
    return tr.PipelineConfig(sampler="token_level", rho=rho, vts=cfg)


def _selection_margin(params, data, pcfg) -> float:
    tokens = sg.project_tokens(data.features, params, data.task)
    logits = vts.relevance_logits(tokens.embeddings, data.queries, tr.vts_view(params)).value
    k = vts.select_k(tokens.n_tokens, pcfg.rho)
    s = np.sort(logits, axis=-1)[..., ::-1]
    return float(np.min(s[..., k - 1] - s[..., k])) if k < s.shape[-1] else np.inf


def random_instance(rng: RngState, task: sg.SynthTask = GRAD_TASK, adapter: bool = True):
    """Fresh parameters and a two-sample batch whose top-k set has a safe margin."""
    pcfg = soft_pipeline(task)
    for attempt in range(100):
        r = rng.child(attempt)
        params = sg.init_head(task, r.child("head"))
        # perturb the identity start so every head entry is exercised
        params["head.attn"] = params["head.attn"] + 0.3 * r.child("attn").normal(params["head.attn"].shape)
        params["head.readout.weight"] = r.child("readout").normal(params["head.readout.weight"].shape)
        params["head.readout.bias"] = 0.3 * r.child("bias").normal(3)
        params.update({"vts." + k: v for k, v in vts.init_params(pcfg.vts, r.child("vts")).items()})
        if adapter:
            params = tr.low_rank_adapter_update(params, 2, r.child("adapter"), init_scale=0.3)
            for k in ("adapter.attn.b", "adapter.readout.b"):
                params[k] = 0.3 * r.child(k).normal(params[k].shape)
        data = sg.generate_batch(task, 2, r.child("data"))
        if _selection_margin(params, data, pcfg) > SELECTION_MARGIN:
            return params, data, pcfg
    raise OracleFailureError("could not draw an instance with a clear top-k margin")


def check_group(component: str, prefixes: tuple[str, ...], seed: int, instances: int) -> ComponentResult:
    worst = 0.0
    root = RngState(seed).child(component)
    for i in range(instances):
        params, data, pcfg = random_instance(root.child(i))
        trainable = {k: v for k, v in params.items() if k.startswith(prefixes)}
        fixed = {k: v for k, v in params.items() if k not in trainable}

        def loss(p, fixed=fixed, data=data, pcfg=pcfg):
            return tr.forward({**fixed, **p}, data, pcfg, None, mode="eval")[1]

        worst = max(worst, compare(loss, trainable))
    return ComponentResult(component, worst, instances)


COMPONENTS = {
    "vts_chain": ("vts.",),
    "projector": ("proj.",),
    "head": ("head.",),
    "adapter": ("adapter.",),
}


def run_gradcheck(seed: int = 0, instances: int = 20, op_instances: int = 3) -> list[ComponentResult]:
    """Per-component worst relative error: every primitive, then the pipeline groups."""
    results = check_ops(seed, op_instances)
    for name, prefixes in COMPONENTS.items():
        results.append(check_group(name, prefixes, seed, instances))
    return results


def format_report(results: list[ComponentResult]) -> str:
    lines = [r.line() for r in results]
    failed = [r.component for r in results if not r.ok]
    lines.append("gradcheck: all components within tolerance" if not failed
                 else "gradcheck: FAILED " + ", ".join(failed))
    return "\n".join(lines) + "\n"

