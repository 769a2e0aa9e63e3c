"""Score-to-probability shaping and per-bit, per-epoch coreset sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .scoring import ScoreMatrix

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.5
DEFAULT_FLOOR = 1e-3


def normalize_scores(s, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Min-max normalise to [0, 1], then raise every entry to at least ``floor``.

    Constant input has no ordering; every entry becomes 1.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.size < 2:
        raise ValueError("normalize_scores needs at least two scores")
    lo, hi = s.min(), s.max()
    if hi == lo:
        log.warning("constant scores; falling back to uniform sampling weights")
        return np.ones_like(s)
    return np.maximum((s - lo) / (hi - lo), floor)


def sampling_probabilities(s_norm, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """``p_i = s_i**(1/t) / sum_j s_j**(1/t)``, evaluated in the log domain."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s = np.asarray(s_norm, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logits = np.log(s) / temperature
    top = logits.max()
    if not np.isfinite(top):
        raise ValueError("all normalised scores are zero")
    w = np.exp(logits - top)
    return w / w.sum()


def sample_coreset(p, size: int, seed) -> np.ndarray:
    """Weighted sampling without replacement by exponential race.

    Each index draws ``key_i = -ln(u_i) / p_i``; the ``size`` smallest keys
    win.  Returned indices are sorted.
    """
    p = np.asarray(p, dtype=np.float64)
    nonzero = int(np.count_nonzero(p > 0))
    if size > nonzero:
        raise ValueError(f"cannot draw {size} distinct indices from {nonzero} with nonzero mass")
    if size == p.size:
        return np.arange(p.size)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random(p.size)
    with np.errstate(divide="ignore"):
        keys = -np.log1p(-u) / p  # 1-u in (0, 1]; avoids log(0)
    chosen = np.argpartition(keys, size - 1)[:size] if size else np.empty(0, np.int64)
    return np.sort(chosen)


def coreset_size(n: int, pruning_rate: float) -> int:
    return int(np.floor((1.0 - pruning_rate) * n + 0.5))


@dataclass
class CoresetPlan:
    bits: list
    pruning_rate: float
    temperature: float
    floor: float
    seed: int
    n: int
    epochs: int
    sets: dict = field(default_factory=dict)  # bit -> list of index arrays, one per epoch
    survivors: Optional[np.ndarray] = None
    config_hash: str = ""

    def indices(self, bit: int, epoch: int) -> np.ndarray:
        """Index set for ``bit`` at 1-based ``epoch`` (cycled past the plan length)."""
        per_epoch = self.sets[bit]
        return per_epoch[(epoch - 1) % len(per_epoch)]

    def to_json(self) -> str:
        doc = {
            "bits": list(self.bits),
            "pruning_rate": self.pruning_rate,
            "temperature": self.temperature,
            "floor": self.floor,
            "seed": self.seed,
            "n": self.n,
            "epochs": self.epochs,
            "config_hash": self.config_hash,
            "survivors": None if self.survivors is None else self.survivors.tolist(),
            "sets": {str(b): [s.tolist() for s in self.sets[b]] for b in self.bits},
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CoresetPlan":
        doc = json.loads(text)
        bits = [int(b) for b in doc["bits"]]
        return cls(
            bits=bits,
            pruning_rate=doc["pruning_rate"],
            temperature=doc["temperature"],
            floor=doc["floor"],
            seed=doc["seed"],
            n=doc["n"],
            epochs=doc["epochs"],
            sets={b: [np.asarray(s, dtype=np.int64) for s in doc["sets"][str(b)]] for b in bits},
            survivors=None if doc["survivors"] is None else np.asarray(doc["survivors"], np.int64),
            config_hash=doc.get("config_hash", ""),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def load(cls, path) -> "CoresetPlan":
        with open(path) as f:
            return cls.from_json(f.read())


def build_plan(
    scores: ScoreMatrix,
    pruning_rate: float,
    temperature: float = DEFAULT_TEMPERATURE,
    epochs: int = 1,
    seed: int = 0,
    floor: float = DEFAULT_FLOOR,
    survivors=None,
    config_hash: str = "",
) -> CoresetPlan:
    """Fix one probability vector per bit and draw a fresh set every epoch.

    With ``survivors`` (from :func:`storage_filter`) sampling and
    normalisation are restricted to those indices and the set size is taken
    relative to their count.
    """
    if not 0 <= pruning_rate < 1:
        raise ValueError(f"pruning rate must be in [0, 1), got {pruning_rate}")
    n = scores.n
    pool = np.arange(n) if survivors is None else np.sort(np.asarray(survivors, np.int64))
    size = coreset_size(pool.size, pruning_rate)
    sets = {}
    for b in scores.bits:
        p = sampling_probabilities(normalize_scores(scores.scores[b][pool], floor), temperature)
        per_epoch = []
        for epoch in range(1, epochs + 1):
            rng = np.random.default_rng([int(seed), int(b), epoch])
            per_epoch.append(pool[sample_coreset(p, size, rng)])
        sets[b] = per_epoch
    return CoresetPlan(
        bits=list(scores.bits),
        pruning_rate=pruning_rate,
        temperature=temperature,
        floor=floor,
        seed=seed,
        n=n,
        epochs=epochs,
        sets=sets,
        survivors=None if survivors is None else pool,
        config_hash=config_hash,
    )


def storage_filter(scores: ScoreMatrix, keep_fraction: float) -> np.ndarray:
    """Drop samples that stay unimportant for every bit-width.

    The per-sample aggregate is the variability (standard deviation over the
    recorded epochs) of the cross-bit sum of per-epoch contributions when the
    score matrix carries that history, otherwise the cross-bit score sum.
    The top ``keep_fraction`` of samples survive (sorted indices).
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n = scores.n
    if keep_fraction == 1:
        return np.arange(n)
    if scores.history is not None:
        summed = np.sum([scores.history[b] for b in scores.bits], axis=0)  # [epochs, N]
        aggregate = summed.std(axis=0)
    else:
        aggregate = np.sum([scores.scores[b] for b in scores.bits], axis=0)
    keep = int(np.floor(keep_fraction * n + 0.5))
    order = np.argsort(-aggregate, kind="stable")
    return np.sort(order[:keep])
