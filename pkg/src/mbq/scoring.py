"""Per-bit sample importance scores and rank statistics."""

from __future__ import annotations

import copy
import enum
import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from . import autograd as ag
from .data import Dataset
from .model import MultiBitModel, child_forward
from .training import AGGREGATE_BIT, Scheme, TrainConfig, train_batchwise, train_bitwise

DYNAMICS = "bitwise_dynamics"
DEFAULT_DECAY = 0.9


class Method(str, enum.Enum):
    RANDOM = "random"
    ENTROPY = "entropy"
    EL2N = "el2n"
    FORGETTING = "forgetting"
    MODERATE = "moderate"


@dataclass
class ScoreMatrix:
    bits: list
    scores: dict  # bit -> float64 array [N]
    meta: dict = field(default_factory=dict)
    history: Optional[dict] = None  # bit -> per-epoch contributions [E, N]

    def __post_init__(self):
        self.bits = [int(b) for b in self.bits]
        lengths = {len(self.scores[b]) for b in self.bits}
        if len(lengths) != 1:
            raise ValueError(f"score arrays have differing lengths {sorted(lengths)}")
        for b in self.bits:
            self.scores[b] = np.asarray(self.scores[b], dtype=np.float64)
            if not np.all(np.isfinite(self.scores[b])):
                raise ValueError(f"non-finite scores for bit {b}")

    @property
    def n(self) -> int:
        return len(self.scores[self.bits[0]])

    def save(self, path) -> None:
        """JSON header line, then one little-endian float32 array per bit.

        Per-epoch history (if any) follows, bit-major, as [epochs, N] arrays.
        """
        header = dict(self.meta)
        header.update(bits=self.bits, N=self.n)
        header["history_epochs"] = 0 if self.history is None else int(self.history[self.bits[0]].shape[0])
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for b in self.bits:
                f.write(self.scores[b].astype("<f4").tobytes())
            if self.history is not None:
                for b in self.bits:
                    f.write(np.asarray(self.history[b], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ScoreMatrix":
        with open(path, "rb") as f:
            header = json.loads(f.readline())
            payload = f.read()
        bits, n, he = header.pop("bits"), header.pop("N"), header.pop("history_epochs")
        arr = np.frombuffer(payload, dtype="<f4")
        expected = len(bits) * n * (1 + he)
        if arr.size != expected:
            raise ValueError(f"{path}: expected {expected} values, found {arr.size}")
        scores = {b: arr[i * n : (i + 1) * n].astype(np.float64) for i, b in enumerate(bits)}
        history = None
        if he:
            base = len(bits) * n
            history = {
                b: arr[base + i * he * n : base + (i + 1) * he * n].reshape(he, n).astype(np.float64)
                for i, b in enumerate(bits)
            }
        return cls(bits, scores, header, history)


def spearman(a, b) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("spearman needs two 1-D arrays of equal length >= 2")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if den == 0:
        raise ValueError("spearman undefined for a constant array")
    return float(np.clip(np.dot(ra, rb) / den, -1.0, 1.0))


class ProbeRecorder:
    """Collects per-sample error vectors per (bit, epoch)."""

    def __init__(self, n: int, num_classes: int, epochs: int, keep_vectors: bool = False):
        self.n = n
        self.k = num_classes
        self.epochs = epochs
        self.keep_vectors = keep_vectors
        self.contrib: dict = {}
        self.vectors: dict = {}
        self.count = 0

    def __call__(self, epoch: int, bit: int, indices, errors) -> None:
        if bit not in self.contrib:
            self.contrib[bit] = np.zeros((self.epochs, self.n))
            if self.keep_vectors:
                self.vectors[bit] = np.zeros((self.epochs, self.n, self.k), dtype=np.float32)
        self.contrib[bit][epoch - 1, indices] = np.sum(np.square(errors), axis=1)
        if self.keep_vectors:
            self.vectors[bit][epoch - 1, indices] = errors
        self.count += len(indices)


def dynamics_score(contrib: np.ndarray, window: int, decay: float = DEFAULT_DECAY) -> np.ndarray:
    """Decay-weighted absolute change of per-epoch contributions.

    ``contrib`` is [E, N].  Epoch ``e`` in the last ``window`` epochs weighs
    ``decay**(E - e)``.
    """
    contrib = np.asarray(contrib, dtype=np.float64)
    e_total = contrib.shape[0]
    if e_total < 2:
        raise ValueError("need at least two epochs of contributions")
    if not 1 <= window < e_total:
        raise ValueError(f"window must be in [1, {e_total - 1}], got {window}")
    score = np.zeros(contrib.shape[1])
    for e in range(e_total - window + 1, e_total + 1):  # 1-based epoch
        score += decay ** (e_total - e) * np.abs(contrib[e - 1] - contrib[e - 2])
    return score


def _run_extraction(model, data, cfg, epochs, scheme, keep_vectors):
    rec = ProbeRecorder(len(data), data.num_classes, epochs, keep_vectors)
    run_cfg = replace(cfg, epochs=epochs)
    if Scheme(scheme) is Scheme.BIT_WISE:
        train_bitwise(model, data, run_cfg, probe=rec)
    else:
        train_batchwise(model, data, run_cfg, probe=rec)
    return rec


def _per_bit(model: MultiBitModel, rec: ProbeRecorder, table: dict) -> tuple:
    """Expand an aggregated (batch-wise) record onto every trained bit."""
    bits = list(model.ranges.trained)
    if AGGREGATE_BIT in table:
        return bits, {b: table[AGGREGATE_BIT] for b in bits}
    return bits, {b: table[b] for b in bits}


def score_bitwise_dynamics(
    model: MultiBitModel,
    data: Dataset,
    cfg: TrainConfig,
    epochs: int = 10,
    window: int = 5,
    scheme: Scheme = Scheme.BIT_WISE,
    decay: float = DEFAULT_DECAY,
) -> ScoreMatrix:
    """Train ``model`` for ``epochs`` under ``scheme`` and score every sample.

    The contribution of sample i at epoch e is ``||softmax - onehot||^2``
    from its training forward; the score is :func:`dynamics_score` over the
    last ``window`` epochs.  Under the batch-wise scheme the probe only sees
    the cross-bit mean error, so every bit receives the same score.
    """
    if epochs < 2:
        raise ValueError("dynamics scoring needs at least two epochs")
    if not 1 <= window < epochs:
        raise ValueError(f"window must be in [1, {epochs - 1}]")
    rec = _run_extraction(model, data, cfg, epochs, scheme, keep_vectors=False)
    bits, contrib = _per_bit(model, rec, rec.contrib)
    scores = {b: dynamics_score(contrib[b], window, decay) for b in bits}
    meta = {
        "method": DYNAMICS,
        "scheme": Scheme(scheme).value,
        "epochs": epochs,
        "window": window,
        "decay": decay,
        "seed": cfg.seed,
    }
    return ScoreMatrix(bits, scores, meta, history={b: contrib[b].copy() for b in bits})


def score_baseline(
    method: Method,
    model: MultiBitModel,
    data: Dataset,
    cfg: TrainConfig,
    epochs: int = 20,
    scheme: Scheme = Scheme.BIT_WISE,
) -> ScoreMatrix:
    """Random / Entropy / EL2N / Forgetting / Moderate scores.

    Training-dynamics methods are evaluated per bit under the bit-wise
    scheme; under the batch-wise scheme the cross-bit mean prediction is
    used and the scores are replicated across bits.
    """
    method = Method(method)
    bits = list(model.ranges.trained)
    n = len(data)
    meta = {"method": method.value, "scheme": Scheme(scheme).value, "epochs": epochs, "window": 0, "seed": cfg.seed}
    if method is Method.RANDOM:
        scores = {b: np.random.default_rng([cfg.seed, b]).random(n) for b in bits}
        return ScoreMatrix(bits, scores, meta)
    if method is Method.FORGETTING and epochs < 2:
        raise ValueError("forgetting scores need at least two epochs")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    rec = _run_extraction(model, data, cfg, epochs, scheme, keep_vectors=True)
    bits, vectors = _per_bit(model, rec, rec.vectors)
    onehot = np.eye(data.num_classes)[data.labels]
    scores = {}
    for b in bits:
        probs = np.clip(vectors[b] + onehot[None], 0.0, 1.0)  # [E, N, K]
        if method is Method.ENTROPY:
            scores[b] = entropy_score(probs)
        elif method is Method.EL2N:
            scores[b] = el2n_score(vectors[b])
        elif method is Method.FORGETTING:
            scores[b] = forgetting_score(np.argmax(probs, axis=2) == data.labels[None])
        else:
            fb = b if Scheme(scheme) is Scheme.BIT_WISE else max(bits)
            scores[b] = moderate_score(penultimate_features(model, data, fb), data.labels)
    return ScoreMatrix(bits, scores, meta)


def entropy_score(probs: np.ndarray) -> np.ndarray:
    """Mean over epochs of the predictive entropy; ``probs`` is [E, N, K]."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=2)
    return h.mean(axis=0)


def el2n_score(errors: np.ndarray) -> np.ndarray:
    """Mean over epochs of ``||softmax - onehot||_2``; ``errors`` is [E, N, K]."""
    return np.linalg.norm(np.asarray(errors, dtype=np.float64), axis=2).mean(axis=0)


def forgetting_score(correct: np.ndarray) -> np.ndarray:
    """Count correct -> incorrect transitions; never-learned samples get E."""
    correct = np.asarray(correct, dtype=bool)
    epochs = correct.shape[0]
    events = np.sum(correct[:-1] & ~correct[1:], axis=0).astype(np.float64)
    events[~correct.any(axis=0)] = epochs
    return events


def moderate_score(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Higher for samples whose distance to their class mean is near the median."""
    features = np.asarray(features, dtype=np.float64)
    dist = np.zeros(len(labels))
    for c in np.unique(labels):
        sel = labels == c
        centre = features[sel].mean(axis=0)
        dist[sel] = np.linalg.norm(features[sel] - centre, axis=1)
    gap = np.abs(dist - np.median(dist))
    return gap.max() - gap


def penultimate_features(model: MultiBitModel, data: Dataset, b: int, batch_size: int = 500) -> np.ndarray:
    out = []
    with ag.no_grad():
        for i in range(0, len(data), batch_size):
            cap: dict = {}
            child_forward(model, b, data.images[i : i + batch_size], training=False, capture_features=cap)
            out.append(cap["features"].astype(np.float64))
    return np.concatenate(out)


def clone_model(model: MultiBitModel) -> MultiBitModel:
    """Deep copy, so score extraction can run on a throw-away model."""
    return copy.deepcopy(model)
