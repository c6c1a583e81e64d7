"""Backdoor-adjusted class prediction.

Instead of reading the class off the observational fusion output, the
classifier is evaluated once per spurious dictionary entry and the per-
context softmax outputs are averaged under a uniform prior over entries:

    probs = (1/M) sum_m Softmax(F(z_c, p_s_m))

This stratifies the prediction over the confounder's dictionary and blocks
the backdoor path through the spurious factor. The conditional
(unadjusted) path is the distance-softmax over the causal library, used
verbatim by the adjustment-ablated variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ContractViolation
from .model import FusionNet
from .prototypes import CausalLibrary, SpuriousLibrary, causal_class_probs

_MODES = ("arithmetic", "geometric")


@dataclass
class InterventionOutput:
    """Adjusted probabilities plus the per-context softmax table.

    probs: (C,) for a single code, (N, C) for a batch.
    per_context: (M, C) or (N, M, C) with rows summing to 1.
    """

    probs: np.ndarray
    per_context: np.ndarray


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def intervene(z_c: np.ndarray, spurious: SpuriousLibrary, fusion: FusionNet,
              mode: str = "arithmetic", weights: np.ndarray | None = None) -> InterventionOutput:
    """Marginalize the fusion classifier over the spurious dictionary.

    `weights` optionally replaces the uniform prior (must sum to 1). The
    default arithmetic mode averages softmax rows, so `probs` is exactly
    the (weighted) mean of `per_context`; the geometric mode instead
    averages logits before one softmax (a diagnostics hook — its output is
    not the row mean).
    """
    if mode not in _MODES:
        raise ContractViolation(f"unknown intervention mode {mode!r}")
    m = spurious.m
    if m < 1:
        raise ContractViolation("spurious library is empty")
    z = np.asarray(z_c, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    n = z.shape[0]
    if weights is None:
        w = np.full(m, 1.0 / m)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (m,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ContractViolation("weights must be a length-M distribution")

    protos = spurious.prototypes.data
    # evaluate all (sample, context) pairs in one fused batch
    zc_rep = np.repeat(z, m, axis=0)
    ps_tile = np.tile(protos, (n, 1))
    logits = fusion.fuse_logits(zc_rep, ps_tile).reshape(n, m, -1)
    per_context = _softmax_rows(logits)
    if mode == "arithmetic":
        probs = np.einsum("nmc,m->nc", per_context, w)
    else:
        probs = _softmax_rows(np.einsum("nmc,m->nc", logits, w))
    if single:
        return InterventionOutput(probs[0], per_context[0])
    return InterventionOutput(probs, per_context)


def intervene_log_probs_var(z_c: Var, spurious: SpuriousLibrary, fusion: FusionNet,
                            freeze_contexts: bool = False,
                            context_idx: np.ndarray | None = None) -> Var:
    """Differentiable log of the arithmetic-mode adjusted probabilities.

    Computed as logsumexp over per-context log-softmax rows minus log M,
    which keeps the training loss stable however small single-context
    probabilities get. `freeze_contexts` detaches the dictionary (the
    config hook that stops classifier gradients reaching the spurious
    prototypes); `context_idx` restricts the marginalization to a subset
    of entries (training-time subsampling).
    """
    n, d = z_c.data.shape
    protos = spurious.prototypes
    if context_idx is not None:
        protos = ad.take_rows(protos, np.asarray(context_idx, dtype=np.intp))
    if freeze_contexts:
        protos = ad.stop_grad(protos)
    m = protos.data.shape[0]
    if m < 1:
        raise ContractViolation("spurious library is empty")
    zc_rep = ad.take_rows(z_c, np.repeat(np.arange(n), m))
    ps_tile = ad.take_rows(protos, np.tile(np.arange(m), n))
    logits = fusion.forward_var(zc_rep, ps_tile)
    log_pc = ad.log_softmax(logits, axis=1)  # (n*m, C)
    c = log_pc.data.shape[1]
    stacked = ad.reshape(log_pc, (n, m, c))
    return ad.sub(ad.logsumexp(stacked, axis=1), Var(float(np.log(m))))


def conditional_predict(z_c: np.ndarray, lib: CausalLibrary,
                        squared: bool = False) -> np.ndarray:
    """Unadjusted prediction straight from the causal library (the inference
    path of the adjustment-ablated variant)."""
    return causal_class_probs(z_c, lib, squared=squared)
