"""Independent gradient oracles for the straight-through estimator."""
import numpy as np

from vtslab import numerics as nx
from vtslab import vts
from vtslab.vts import TokenBatch


def leaves_for(params, tokens, query):
    leaves = {k: nx.param(v) for k, v in params.items()}
    leaves["V"] = nx.param(np.asarray(tokens.embeddings.value))
    leaves["Q"] = nx.param(np.asarray(query))
    return leaves


def _trace(cfg, leaves, tokens, noise):
    tb = TokenBatch(leaves["V"], tokens.frame_count, tokens.patches_per_frame)
    logits = vts.relevance_logits(tb.embeddings, leaves["Q"], leaves)
    w = nx.softmax(logits, cfg.tau)
    trace = vts.gumbel_topk(nx.log_softmax(logits, cfg.tau), vts.select_k(tb.n_tokens, cfg.rho), cfg.tau_g,
                            None, cfg.mode, noise=noise, scores_w=w)
    return tb, w, trace


def ste_forward(cfg, params, tokens, query, noise, mask_kind="ste"):
    """Forward with the STE mask (``"ste"``) or the hard mask as a constant (``"hard"``)."""
    leaves = leaves_for(params, tokens, query)
    tb, w, trace = _trace(cfg, leaves, tokens, noise)
    mask = trace.ste_z if mask_kind == "ste" else nx.const(trace.hard_z)
    return vts.renormalize_and_weight(tb, w, trace, leaves, cfg, mask=mask), leaves


def ste_gradients(cfg, params, tokens, query, noise, upstream):
    sampled, leaves = ste_forward(cfg, params, tokens, query, noise)
    return vts.vts_backward(sampled, upstream, leaves=leaves)


def soft_path_gradients(cfg, params, tokens, query, noise, upstream):
    """Gradient the STE promises, built without ``stopgrad``.

    Pass one treats the mask as a free leaf held at ``hard_z`` and collects
    the direct-path gradients plus ``dL/dmask``; pass two pushes ``dL/dmask``
    through ``soft_z`` on a fresh graph.  Their sum is the soft-path gradient.
    """
    leaves = leaves_for(params, tokens, query)
    tb, w, trace = _trace(cfg, leaves, tokens, noise)
    mask = nx.param(trace.hard_z)
    sampled = vts.renormalize_and_weight(tb, w, trace, leaves, cfg, mask=mask)
    nx.backward(sampled.embeddings, upstream)
    fresh = leaves_for(params, tokens, query)
    _, _, trace2 = _trace(cfg, fresh, tokens, noise)
    nx.backward(trace2.soft_z, mask.grad)
    zero = np.zeros_like
    return {k: (leaves[k].grad if leaves[k].grad is not None else zero(leaves[k].value))
            + (fresh[k].grad if fresh[k].grad is not None else zero(fresh[k].value)) for k in leaves}
