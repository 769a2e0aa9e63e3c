"""Multi-bit network: one shared weight store, quantized child views per bit."""

from __future__ import annotations

import enum
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .quant import QuantSpec, bias_correct, dorefa_quantize_activation, quantize_weights

FULL_PRECISION = 32


class BNPolicy(str, enum.Enum):
    SHARED_ALL = "shared_all"
    PER_BIT = "per_bit"
    HYBRID_ONE_BIT_SEPARATE = "hybrid_one_bit_separate"


@dataclass(frozen=True)
class BitRanges:
    trained: tuple
    switchable: tuple

    def __post_init__(self):
        trained = tuple(sorted(set(int(b) for b in self.trained)))
        switchable = tuple(sorted(set(int(b) for b in self.switchable) | set(trained)))
        for b in switchable:
            if not 1 <= b <= 32:
                raise ValueError(f"bit-width {b} outside [1, 32]")
        if not set(trained) <= set(switchable):
            raise ValueError("trained range must be a subset of the switchable range")
        object.__setattr__(self, "trained", trained)
        object.__setattr__(self, "switchable", switchable)


@dataclass(frozen=True)
class Arch:
    """Supported network shapes.

    ``kind="mlp"``: up to three hidden linear-BN-ReLU layers (``widths``).
    ``kind="cnn"``: conv3x3-BN-ReLU blocks (``widths`` channels, ``strides``),
    global average pooling and a linear classifier.
    """

    kind: str
    in_shape: tuple
    num_classes: int
    widths: tuple
    strides: tuple = ()
    keep_first_last_fp: bool = True

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(v) for v in self.in_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "strides", tuple(int(v) for v in self.strides))
        if self.kind == "mlp":
            if len(self.in_shape) != 1 or not 1 <= len(self.widths) <= 3:
                raise ValueError("mlp needs a flat input and 1..3 hidden widths")
        elif self.kind == "cnn":
            if len(self.in_shape) != 3:
                raise ValueError("cnn needs a (C, H, W) input shape")
            if not self.widths:
                raise ValueError("cnn needs at least one conv block")
            if not self.strides:
                object.__setattr__(self, "strides", (1,) * len(self.widths))
            if len(self.strides) != len(self.widths) or any(s not in (1, 2) for s in self.strides):
                raise ValueError("cnn strides must be 1 or 2, one per block")
        else:
            raise ValueError(f"unsupported architecture {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")


@dataclass
class BNBank:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    # per-bit statistics written by BN adaptation; preferred at inference
    bit_stats: dict = field(default_factory=dict)

    def stats_for(self, b: int) -> tuple:
        if b in self.bit_stats:
            return self.bit_stats[b]
        return self.running_mean, self.running_var


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # "conv" or "linear"
    stride: int
    quantized: bool
    bn_site: Optional[str]


class MultiBitModel:
    def __init__(
        self,
        arch: Arch,
        ranges: BitRanges,
        policy: BNPolicy,
        quant: QuantSpec,
        bias_correction: bool = True,
        per_channel_correction: bool = False,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        self.arch = arch
        self.ranges = ranges
        self.policy = BNPolicy(policy)
        self.quant = quant
        self.bias_correction = bias_correction
        self.per_channel_correction = per_channel_correction
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.theta: dict = {}
        self.bn_banks: dict = {}
        self.layers: list = []

    # -- bank resolution -----------------------------------------------
    def bank_key(self, b: int) -> str:
        if self.policy is BNPolicy.SHARED_ALL:
            return "shared"
        if self.policy is BNPolicy.PER_BIT:
            return f"b{b}"
        return "b1" if b == 1 else "shared"

    def bank_keys(self) -> list:
        return sorted({self.bank_key(b) for b in self.ranges.switchable})

    def bn_sites(self) -> list:
        return [layer.bn_site for layer in self.layers if layer.bn_site]

    def bank(self, site: str, b: int) -> BNBank:
        return self.bn_banks[(site, self.bank_key(b))]

    def check_bit(self, b: int) -> int:
        if b not in self.ranges.switchable:
            raise ValueError(f"bit-width {b} not in switchable range {list(self.ranges.switchable)}")
        return b

    def bn_parameters(self, bits) -> list:
        keys = {self.bank_key(b) for b in bits}
        out = []
        for (site, key), bank in self.bn_banks.items():
            if key in keys:
                out += [bank.gamma, bank.beta]
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.theta):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.theta[name].data).tobytes())
        return h.hexdigest()

    def state_checksum(self) -> str:
        """Hash of theta and every BN bank (affine and statistics)."""
        h = hashlib.sha256(self.checksum().encode())
        for name, arr in _bank_arrays(self):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_model(
    arch: Arch,
    ranges: BitRanges,
    policy: BNPolicy = BNPolicy.HYBRID_ONE_BIT_SEPARATE,
    quant: Optional[QuantSpec] = None,
    seed: int = 0,
    **kwargs,
) -> MultiBitModel:
    """Initialise theta (He-uniform over fan-in) and the BN banks."""
    quant = quant or QuantSpec()
    model = MultiBitModel(arch, ranges, policy, quant, **kwargs)
    rng = np.random.default_rng(seed)
    fp_ends = arch.keep_first_last_fp
    if arch.kind == "mlp":
        fan = arch.in_shape[0]
        widths = arch.widths
        for i, width in enumerate(widths):
            name = f"fc{i}"
            model.theta[f"{name}.weight"] = _he_uniform(rng, (width, fan), fan, name)
            model.layers.append(Layer(name, "linear", 1, not (fp_ends and i == 0), f"bn{i}"))
            fan = width
    else:
        fan = arch.in_shape[0]
        for i, (width, stride) in enumerate(zip(arch.widths, arch.strides)):
            name = f"conv{i}"
            model.theta[f"{name}.weight"] = _he_uniform(rng, (width, fan, 3, 3), fan * 9, name)
            model.layers.append(Layer(name, "conv", stride, not (fp_ends and i == 0), f"bn{i}"))
            fan = width
    model.theta["head.weight"] = _he_uniform(rng, (arch.num_classes, fan), fan, "head")
    model.theta["head.bias"] = Tensor(np.zeros(arch.num_classes), requires_grad=True, name="head.bias")
    model.layers.append(Layer("head", "linear", 1, not fp_ends, None))

    for layer in model.layers:
        if layer.bn_site is None:
            continue
        width = model.theta[f"{layer.name}.weight"].shape[0]
        for key in model.bank_keys():
            model.bn_banks[(layer.bn_site, key)] = BNBank(
                gamma=Tensor(np.ones(width), requires_grad=True, name=f"{layer.bn_site}/{key}/gamma"),
                beta=Tensor(np.zeros(width), requires_grad=True, name=f"{layer.bn_site}/{key}/beta"),
                running_mean=np.zeros(width, dtype=np.float32),
                running_var=np.ones(width, dtype=np.float32),
                momentum=model.bn_momentum,
                eps=model.bn_eps,
            )
    return model


def _he_uniform(rng, shape, fan_in, name) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=f"{name}.weight")


def child_weight(
    model: MultiBitModel,
    layer: Layer,
    b: int,
    apply_bias_correction: bool,
    quantizer: Optional[Callable] = None,
) -> Tensor:
    """The weight tensor the ``b``-bit child actually uses for ``layer``."""
    w = model.theta[f"{layer.name}.weight"]
    if b == FULL_PRECISION or not layer.quantized:
        return w
    if quantizer is not None:
        wq = quantizer(w, b)
    else:
        wq = quantize_weights(w, replace(model.quant, weight_bits=b)).q
    if apply_bias_correction:
        wq = bias_correct(wq, w, model.quant.epsilon, per_channel=model.per_channel_correction)
    return wq


def child_forward(
    model: MultiBitModel,
    b: int,
    x,
    apply_bias_correction: Optional[bool] = None,
    training: bool = False,
    update_stats: bool = True,
    observer: Optional[Callable[[str, np.ndarray], None]] = None,
    quantizer: Optional[Callable] = None,
    capture_features: Optional[dict] = None,
) -> Tensor:
    """Logits of the ``b``-bit child.

    ``training`` normalises with batch statistics and, if ``update_stats``,
    folds them into the resolved bank with its momentum.  ``observer`` is
    called with ``(site, pre_bn_activations)`` at every BN site.
    ``quantizer`` replaces the weight quantizer (``(w, b) -> Tensor``).
    """
    model.check_bit(b)
    if apply_bias_correction is None:
        apply_bias_correction = model.bias_correction
    h = ag.as_tensor(x)
    act_bits = model.quant.activation_bits
    for i, layer in enumerate(model.layers):
        w = child_weight(model, layer, b, apply_bias_correction, quantizer)
        if layer.kind == "conv":
            h = ag.conv2d(h, w, stride=layer.stride, padding=1)
        else:
            if h.ndim == 4:
                h = ag.global_avg_pool(h)
            if capture_features is not None and layer.bn_site is None:
                capture_features["features"] = h.data
            h = ag.linear(h, w)
        if layer.bn_site is None:
            h = ag.bias_add(h, model.theta[f"{layer.name}.bias"])
            continue
        if observer is not None:
            observer(layer.bn_site, h.data)
        bank = model.bank(layer.bn_site, b)
        mean, var = bank.stats_for(b)
        h, bm, bv = ag.batch_norm(h, bank.gamma, bank.beta, mean, var, bank.eps, training)
        if training and update_stats:
            m = bank.momentum
            bank.running_mean = ((1 - m) * bank.running_mean + m * bm).astype(np.float32)
            bank.running_var = ((1 - m) * bank.running_var + m * bv).astype(np.float32)
        h = ag.relu(h)
        h = dorefa_quantize_activation(h, act_bits)
    return h


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

MAGIC = b"MBQN"
FORMAT_VERSION = 1
BN_PREFIX = "bn/"


def _bank_arrays(model: MultiBitModel):
    for (site, key) in sorted(model.bn_banks):
        bank = model.bn_banks[(site, key)]
        base = f"{BN_PREFIX}{site}/{key}/"
        yield base + "gamma", bank.gamma.data
        yield base + "beta", bank.beta.data
        yield base + "running_mean", bank.running_mean
        yield base + "running_var", bank.running_var
        for b in sorted(bank.bit_stats):
            m, v = bank.bit_stats[b]
            yield base + f"adapted/{b}/mean", m
            yield base + f"adapted/{b}/var", v


def _write_str(buf, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_str(buf) -> str:
    (n,) = struct.unpack("<I", _read(buf, 4))
    return _read(buf, n).decode("utf-8")


def _read(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise ValueError(f"checkpoint truncated at byte {buf.tell()}")
    return raw


def _write_u32s(buf, values):
    values = list(values)
    buf.write(struct.pack("<I", len(values)))
    buf.write(struct.pack(f"<{len(values)}I", *values))


def _read_u32s(buf) -> tuple:
    (n,) = struct.unpack("<I", _read(buf, 4))
    return struct.unpack(f"<{n}I", _read(buf, 4 * n))


def model_config(model: MultiBitModel) -> dict:
    return {
        "arch": {**asdict(model.arch)},
        "quant": {
            "scheme": model.quant.scheme.value,
            "activation_bits": model.quant.activation_bits,
            "epsilon": model.quant.epsilon,
        },
        "bias_correction": model.bias_correction,
        "per_channel_correction": model.per_channel_correction,
        "bn_momentum": model.bn_momentum,
        "bn_eps": model.bn_eps,
    }


def save_checkpoint(model: MultiBitModel, path, meta: Optional[dict] = None) -> None:
    """Little-endian binary: magic, version, arch JSON, ranges, policy, meta, tensors."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _write_str(buf, json.dumps(model_config(model), sort_keys=True))
    _write_u32s(buf, model.ranges.trained)
    _write_u32s(buf, model.ranges.switchable)
    _write_str(buf, model.policy.value)
    _write_str(buf, json.dumps(meta or {}, sort_keys=True))
    tensors = [(f"theta/{n}", model.theta[n].data) for n in sorted(model.theta)]
    tensors += list(_bank_arrays(model))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f4")
        _write_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple:
    """Returns ``(model, meta)``."""
    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    if buf.read(4) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = json.loads(_read_str(buf))
    trained = _read_u32s(buf)
    switchable = _read_u32s(buf)
    policy = BNPolicy(_read_str(buf))
    meta = json.loads(_read_str(buf))
    arch = Arch(**cfg["arch"])
    model = build_model(
        arch,
        BitRanges(trained, switchable),
        policy,
        QuantSpec(**cfg["quant"]),
        bias_correction=cfg["bias_correction"],
        per_channel_correction=cfg["per_channel_correction"],
        bn_momentum=cfg["bn_momentum"],
        bn_eps=cfg["bn_eps"],
    )
    (count,) = struct.unpack("<I", _read(buf, 4))
    for _ in range(count):
        name = _read_str(buf)
        (ndim,) = struct.unpack("<I", _read(buf, 4))
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(_read(buf, 4 * n), dtype="<f4").reshape(shape)
        _assign(model, name, arr)
    return model, meta


def _assign(model: MultiBitModel, name: str, arr: np.ndarray) -> None:
    if name.startswith("theta/"):
        key = name[len("theta/"):]
        model.theta[key].data = arr.astype(np.float32).copy()
        return
    if not name.startswith(BN_PREFIX):
        raise ValueError(f"unknown checkpoint tensor {name!r}")
    parts = name[len(BN_PREFIX):].split("/")
    bank = model.bn_banks[(parts[0], parts[1])]
    field_ = parts[2]
    if field_ in ("gamma", "beta"):
        getattr(bank, field_).data = arr.astype(np.float32).copy()
    elif field_ in ("running_mean", "running_var"):
        setattr(bank, field_, arr.astype(np.float32))
    elif field_ == "adapted":
        b = int(parts[3])
        m, v = bank.bit_stats.get(b, (None, None))
        if parts[4] == "mean":
            m = arr.astype(np.float32)
        else:
            v = arr.astype(np.float32)
        bank.bit_stats[b] = (m, v)
    else:
        raise ValueError(f"unknown BN field in {name!r}")
