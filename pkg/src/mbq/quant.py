"""Weight/activation quantizers and the moment-matching weight correction."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Scheme(str, enum.Enum):
    DOREFA = "dorefa"
    STATSQ = "statsq"


@dataclass(frozen=True)
class QuantSpec:
    weight_bits: int = 32
    scheme: Scheme = Scheme.DOREFA
    activation_bits: int = 4
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 1 <= self.weight_bits <= 32:
            raise ValueError(f"weight_bits must be in [1, 32], got {self.weight_bits}")
        if not 1 <= self.activation_bits <= 32:
            raise ValueError(f"activation_bits must be in [1, 32], got {self.activation_bits}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def full_precision(self) -> bool:
        return self.weight_bits == 32


@dataclass
class QuantizedWeights:
    q: Tensor  # dequantized values
    bins: np.ndarray  # integer bins in [0, 2**bits - 1]
    scale: np.ndarray
    bits: int
    degenerate: bool = False  # an epsilon guard was taken


def _check_bits(b: int) -> int:
    if not 1 <= int(b) <= 31:
        raise ValueError(f"bit-width must be in [1, 31] for quantization, got {b}")
    return int(b)


def dorefa_quantize(w, b: int, epsilon: float = 1e-8) -> QuantizedWeights:
    """DoReFa weight quantizer with a straight-through rounding step.

    ``s = E|W|``, the tanh-normalised weights are mapped to [0, 1], rounded
    onto ``2**b - 1`` levels and mapped back to ``s * [-1, 1]``.
    """
    b = _check_bits(b)
    w = ag.as_tensor(w)
    levels = float(2**b - 1)
    s = ag.mean(ag.abs_(w))
    t = ag.tanh(w)
    tmax = ag.max_(ag.abs_(t))
    degenerate = bool(tmax.data < epsilon)
    tmax = ag.clip(tmax, epsilon, np.inf)
    normed = t / (2.0 * tmax) + 0.5
    bins = ag.ste_round(normed * levels)
    q = s * (bins * (2.0 / levels) - 1.0)
    return QuantizedWeights(
        q=q,
        bins=bins.data.astype(np.int64),
        scale=np.asarray(s.data),
        bits=b,
        degenerate=degenerate or bool(s.data == 0),
    )


def _statsq_axes(ndim: int) -> tuple:
    if ndim == 2:
        return (1,)
    if ndim == 3:
        return (0, 2)
    if ndim == 4:
        return (1, 2, 3)
    raise ValueError(f"statsq: unsupported weight rank {ndim}")


def statsq_quantize(w, b: int, axes=None, epsilon: float = 1e-8) -> QuantizedWeights:
    """StatsQ: uniform quantizer scaled by twice the group mean of |W|.

    ``axes`` are the dimensions averaged to form each scale; by default the
    column dimension for 2-D weights and the first and last dimensions for
    3-D weights (4-D conv kernels use one scale per output channel).
    """
    b = _check_bits(b)
    w = ag.as_tensor(w)
    axes = _statsq_axes(w.ndim) if axes is None else tuple(axes)
    levels = float(2**b - 1)
    s = 2.0 * ag.mean(ag.abs_(w), axis=axes, keepdims=True)
    degenerate = bool(np.any(s.data < epsilon))
    s = ag.clip(s, epsilon, np.inf)
    clipped = ag.clip(w / s, -1.0, 1.0)
    cmax = ag.max_(ag.abs_(clipped))
    degenerate = degenerate or bool(cmax.data < epsilon)
    cmax = ag.clip(cmax, epsilon, np.inf)
    normed = clipped / (2.0 * cmax) + 0.5
    bins = ag.ste_round(normed * levels)
    q = s * (bins * (2.0 / levels) - 1.0)
    return QuantizedWeights(
        q=q,
        bins=bins.data.astype(np.int64),
        scale=np.asarray(s.data),
        bits=b,
        degenerate=degenerate,
    )


def quantize_weights(w, spec: QuantSpec) -> QuantizedWeights:
    if spec.scheme is Scheme.STATSQ:
        return statsq_quantize(w, spec.weight_bits, epsilon=spec.epsilon)
    return dorefa_quantize(w, spec.weight_bits, spec.epsilon)


def dorefa_quantize_activation(x, bits: int) -> Tensor:
    """Clip to [0, 1] and round onto ``2**bits - 1`` uniform levels.

    ``bits == 32`` is a bypass.
    """
    x = ag.as_tensor(x)
    if bits == 32:
        return x
    levels = float(2 ** _check_bits(bits) - 1)
    return ag.ste_round(ag.clip(x, 0.0, 1.0) * levels) * (1.0 / levels)


def bias_correct(w_q, w, epsilon: float = 1e-8, per_channel: bool = False, return_info: bool = False):
    """Match the quantized weights' moments to the full-precision ones.

    Computes ``sqrt(V[w] / V[w_q]) * (w_q + (E[w] - E[w_q]))`` with
    population moments, per tensor or (``per_channel``) per output channel.
    When ``V[w_q] < epsilon`` only the mean shift is applied.
    """
    w_q, w = ag.as_tensor(w_q), ag.as_tensor(w)
    if w_q.shape != w.shape:
        raise ag.ShapeError("bias_correct", f"shapes differ: {w_q.shape} vs {w.shape}")
    if w.size < 2:
        raise ValueError("bias_correct needs at least two elements")
    axes = tuple(range(1, w.ndim)) if per_channel and w.ndim > 1 else None
    shift = ag.mean(w, axis=axes, keepdims=True) - ag.mean(w_q, axis=axes, keepdims=True)
    shifted = w_q + shift
    var_q = ag.variance(w_q, axis=axes, keepdims=True)
    fallback = bool(np.any(var_q.data < epsilon))
    if fallback:
        out = shifted
    else:
        out = ag.sqrt(ag.variance(w, axis=axes, keepdims=True) / var_q) * shifted
    if return_info:
        return out, {"fallback": fallback}
    return out


def variance_ratio(w_q, w) -> float:
    """V[w_q] / V[w] with population moments."""
    wq = np.asarray(ag.as_tensor(w_q).data, dtype=np.float64)
    wf = np.asarray(ag.as_tensor(w).data, dtype=np.float64)
    vw = wf.var()
    if vw == 0:
        raise ValueError("variance_ratio: full-precision weights have zero variance")
    return float(wq.var() / vw)
