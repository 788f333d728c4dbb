"""Loss terms of both training stages.

Each term returns ``(value, gradient(s))``. The ``*_objective`` helpers run a
model forward, combine the terms and backpropagate into the model's params.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .features import ConfigError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self}")


@dataclass
class LossBreakdown:
    vani_s: float = 0.0
    vani_t: float = 0.0
    cross_s: float = 0.0
    cross_t: float = 0.0
    orth: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return {"vani_s": self.vani_s, "vani_t": self.vani_t, "cross_s": self.cross_s,
                "cross_t": self.cross_t, "orth": self.orth, "total": self.total}


def loss_vanilla(logit, y):
    """BCE of sigmoid(logit) against y; returns (loss, dloss/dlogit)."""
    return nx.bce_with_logits(logit, y)


def loss_cross(logit_cross, y):
    # same BCE; the cross-ness is which tower produced the logits
    return nx.bce_with_logits(logit_cross, y)


def orth_term(W, z, norm="batch"):
    """||W^T W z - z||^2 summed over the rows of z.

    Returns (value, dW, dz). With ``norm="batch"`` the sum is divided by the
    number of rows.
    """
    M = W.T @ W - np.eye(W.shape[0])
    R = z @ M  # rows of (W^T W - I) z; M is symmetric
    scale = 1.0 / z.shape[0] if norm == "batch" else 1.0
    value = scale * nx.frob_sq(R)
    dz = 2.0 * scale * (R @ M)
    G = 2.0 * scale * (z.T @ R)
    dW = W @ (G + G.T)
    return value, dW, dz


def loss_orth(W_s, W_t, z_s, z_t, norm="batch"):
    """Orthogonality penalty on both translators; returns (value, grads dict)."""
    vs, dWs, dzs = orth_term(W_s, z_s, norm)
    vt, dWt, dzt = orth_term(W_t, z_t, norm)
    return vs + vt, {"W_s": dWs, "W_t": dWt, "z_s": dzs, "z_t": dzt}


def loss_translation_total(parts: dict, weights: LossWeights) -> LossBreakdown:
    b = LossBreakdown(parts["vani_s"], parts["vani_t"], parts["cross_s"], parts["cross_t"],
                      parts["orth"])
    b.total = (b.vani_s + b.vani_t) + weights.alpha * (b.cross_s + b.cross_t) + weights.beta * b.orth
    return b


def loss_augmentation(logit_aug, y, W_t, z_t, weights: LossWeights, norm="batch"):
    """BCE on augmented logits plus beta times the target translator's orth term.

    Returns (value, grads) with grads for logit_aug, W_t and z_t.
    """
    bce, dlogit = nx.bce_with_logits(logit_aug, y)
    grads = {"logit_aug": dlogit, "W_t": None, "z_t": None}
    value = bce
    if weights.beta > 0:
        orth, dW, dz = orth_term(W_t, z_t, norm)
        value += weights.beta * orth
        grads["W_t"] = weights.beta * dW
        grads["z_t"] = weights.beta * dz
    return value, grads


def translation_objective(model, batch_s, batch_t, weights: LossWeights,
                          norm="batch") -> LossBreakdown:
    """Forward + backward of the stage-one objective; grads accumulate in model params."""
    out = model.forward(batch_s, batch_t)
    vs, d_vs = loss_vanilla(out.logit_s, batch_s.labels)
    vt, d_vt = loss_vanilla(out.logit_t, batch_t.labels)
    cs, d_cs = loss_cross(out.logit_s_cross, batch_s.labels)
    ct, d_ct = loss_cross(out.logit_t_cross, batch_t.labels)
    W_s, W_t = model.W_tran["source"], model.W_tran["target"]
    orth, og = loss_orth(W_s.value, W_t.value, out.z_s, out.z_t, norm)
    breakdown = loss_translation_total(
        {"vani_s": vs, "vani_t": vt, "cross_s": cs, "cross_t": ct, "orth": orth}, weights)
    a, b = weights.alpha, weights.beta
    grads = {"logit_s": d_vs, "logit_t": d_vt,
             "logit_s_cross": a * d_cs if a > 0 else None,
             "logit_t_cross": a * d_ct if a > 0 else None,
             "z_s": b * og["z_s"] if b > 0 else None,
             "z_t": b * og["z_t"] if b > 0 else None}
    model.backward(out, grads)
    if b > 0:
        W_s.grad += b * og["W_s"]
        W_t.grad += b * og["W_t"]
    return breakdown


def augmentation_objective(model, batch, weights: LossWeights, norm="batch") -> float:
    out = model.forward(batch)
    W = model.W_tran[model.domain]
    value, g = loss_augmentation(out.logit_aug, batch.labels, W.value, out.z_t, weights, norm)
    model.backward(out, g)
    if g["W_t"] is not None:
        W.grad += g["W_t"]
    return value


def vanilla_objective(model, batches: dict) -> dict:
    """Sum of per-domain BCE for the baselines; ``batches`` maps domain -> batch."""
    losses = {}
    for dom, batch in batches.items():
        logit, cache = model.forward(batch, dom)
        losses[dom], dlogit = loss_vanilla(logit, batch.labels)
        model.backward(dlogit, cache, dom)
    return losses
