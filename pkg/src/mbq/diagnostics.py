"""Gradient alignment, activation mismatch, score similarity and subspace checks.

All functions leave the model untouched (theta, BN affine and statistics).
CSV helpers write a header row followed by one row per record.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import FULL_PRECISION, MultiBitModel, child_forward
from .scoring import ScoreMatrix, spearman


def angle_degrees(g1, g2) -> Optional[float]:
    """Angle between two flattened vectors; ``None`` if either is zero."""
    a = np.asarray(g1, dtype=np.float64).reshape(-1)
    b = np.asarray(g2, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    cos = float(np.dot(a, b) / (na * nb))
    return math.degrees(math.acos(max(-1.0, min(1.0, cos))))


@dataclass
class AlignmentReport:
    b1: int
    b2: int
    overall: Optional[float]
    per_layer: dict = field(default_factory=dict)  # param name -> angle or None

    def rows(self, step=None) -> list:
        tag = {} if step is None else {"step": step}
        out = [{**tag, "layer": "all", "angle_deg": self.overall}]
        out += [{**tag, "layer": k, "angle_deg": v} for k, v in self.per_layer.items()]
        return out


def angles_from_grads(grads1: dict, grads2: dict, b1: int, b2: int, per_layer: bool = True) -> AlignmentReport:
    names = sorted(set(grads1) & set(grads2))
    flat1 = np.concatenate([np.ravel(grads1[n]) for n in names]) if names else np.zeros(0)
    flat2 = np.concatenate([np.ravel(grads2[n]) for n in names]) if names else np.zeros(0)
    layers = {n: angle_degrees(grads1[n], grads2[n]) for n in names} if per_layer else {}
    return AlignmentReport(b1, b2, angle_degrees(flat1, flat2), layers)


def theta_gradients(model: MultiBitModel, x, y, b: int) -> dict:
    """d(cross-entropy)/d(theta) for the ``b``-bit child, batch-statistics BN,
    without touching running statistics or stored gradients."""
    saved = {n: t.grad for n, t in model.theta.items()}
    bn_saved = [(t, t.grad) for t in model.bn_parameters(model.ranges.switchable)]
    try:
        for t in model.theta.values():
            t.grad = None
        loss = ag.softmax_cross_entropy(child_forward(model, b, x, training=True, update_stats=False), y)
        grads = ag.backward(loss)
        return {n: grads.get(t, np.zeros_like(t.data)).copy() for n, t in model.theta.items()}
    finally:
        for n, t in model.theta.items():
            t.grad = saved[n]
        for t, g in bn_saved:
            t.grad = g


def gradient_angle(model: MultiBitModel, batch, b1: int, b2: int, per_layer: bool = True) -> AlignmentReport:
    """Angle between the theta-gradients of two children on the same batch."""
    for b in (b1, b2):
        if b not in model.ranges.trained:
            raise ValueError(f"bit-width {b} not in trained range {list(model.ranges.trained)}")
    x, y = batch
    g1 = theta_gradients(model, x, y, b1)
    g2 = g1 if b1 == b2 else theta_gradients(model, x, y, b2)
    return angles_from_grads(g1, g2, b1, b2, per_layer)


def pre_bn_activations(model: MultiBitModel, x, b: int, apply_bias_correction: bool, quantizer=None) -> dict:
    acts: dict = {}

    def observe(site, h):
        acts[site] = h.copy()

    with ag.no_grad():
        child_forward(
            model, b, x, apply_bias_correction=apply_bias_correction,
            training=False, observer=observe, quantizer=quantizer,
        )
    return acts


def activation_mae(
    model: MultiBitModel,
    batch,
    b: int,
    site: Optional[str] = None,
    apply_bias_correction: Optional[bool] = None,
    quantizer=None,
) -> float:
    """Mean |pre-BN activation(b) - pre-BN activation(full precision)|.

    Both children run in inference mode with the model's fixed activation
    bit-width.  ``site=None`` averages the per-site MAEs over all BN sites.
    """
    model.check_bit(b)
    x = batch[0] if isinstance(batch, tuple) else batch
    sites = model.bn_sites()
    if site is not None and site not in sites:
        raise ValueError(f"unknown BN site {site!r}; available: {sites}")
    if apply_bias_correction is None:
        apply_bias_correction = model.bias_correction
    ref = pre_bn_activations(model, x, FULL_PRECISION, False)
    got = pre_bn_activations(model, x, b, apply_bias_correction, quantizer)
    chosen = [site] if site is not None else sites
    return float(np.mean([np.mean(np.abs(got[s].astype(np.float64) - ref[s])) for s in chosen]))


def score_similarity_matrix(scores: ScoreMatrix) -> np.ndarray:
    """Pairwise Spearman over bits; rows of constant score vectors are NaN."""
    bits = scores.bits
    if len(bits) < 2:
        raise ValueError("need at least two bits")
    k = len(bits)
    out = np.full((k, k), np.nan)
    constant = [np.ptp(scores.scores[b]) == 0 for b in bits]
    for i in range(k):
        if constant[i]:
            continue
        out[i, i] = 1.0
        for j in range(i + 1, k):
            if constant[j]:
                continue
            out[i, j] = out[j, i] = spearman(scores.scores[bits[i]], scores.scores[bits[j]])
    return out


def rank_drift(snapshots) -> np.ndarray:
    """Spearman of every score snapshot against the last one."""
    snapshots = [np.asarray(s) for s in snapshots]
    if len(snapshots) < 2:
        raise ValueError("need at least two snapshots")
    last = snapshots[-1]
    return np.array([spearman(s, last) for s in snapshots])


class LinearClassifier:
    """Single linear layer ``logits = x @ W.T + c`` trained with cross-entropy."""

    def __init__(self, d: int, k: int, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        with ag.precision(dtype):
            self.weight = Tensor(rng.standard_normal((k, d)) * 0.1, requires_grad=True)
            self.bias = Tensor(np.zeros(k), requires_grad=True)
        self.dtype = dtype

    def weight_gradient(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        with ag.precision(self.dtype):
            self.weight.grad = self.bias.grad = None
            logits = ag.bias_add(ag.linear(Tensor(x), self.weight), self.bias)
            grads = ag.backward(ag.softmax_cross_entropy(logits, y))
            g = grads[self.weight].copy()
            self.weight.grad = self.bias.grad = None
        return g


def subspace_residual(linear_model: LinearClassifier, batch) -> float:
    """Relative norm of the weight-gradient component outside span(batch inputs).

    Each gradient row is projected onto an orthonormal basis of the rows of
    the batch matrix; the result is ``||G - G Q Q^T|| / ||G||``.
    """
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    if not np.any(x):
        raise ValueError("subspace_residual: batch inputs are all zero")
    g = linear_model.weight_gradient(x, np.asarray(y)).astype(np.float64)
    q, r = np.linalg.qr(x.T)  # columns of q span the batch inputs
    keep = np.abs(np.diag(r)) > 1e-12 * np.abs(r).max()
    q = q[:, keep]
    resid = g - (g @ q) @ q.T
    gn = np.linalg.norm(g)
    return 0.0 if gn == 0 else float(np.linalg.norm(resid) / gn)


def write_csv(path, rows, fieldnames=None) -> None:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})
