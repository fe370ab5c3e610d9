"""Tensor layer ops, parameter storage, AdamW, LR schedule, clipping, checkpoints.

Tensors are ``torch.Tensor`` objects and reverse-mode gradients come from
torch autograd; every layer used by the model is written out here as an
explicit function of named weights so the parameter set stays a flat
name -> tensor mapping.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import torch

LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- layers


def _check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """Affine map along the last axis; ``W`` is ``(in, out)``."""
    if W.dim() != 2 or x.shape[-1] != W.shape[0] or (b is not None and b.shape != W.shape[1:]):
        b_shape = None if b is None else tuple(b.shape)
        raise ValueError(
            f"linear shape mismatch: x {tuple(x.shape)}, W {tuple(W.shape)}, b {b_shape}"
        )
    y = x @ W
    return y if b is None else y + b


def conv1d_patches(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor, stride: int = 6) -> torch.Tensor:
    """Non-overlapping 1D convolution (kernel size == stride) over ``(..., T, C_in)``.

    ``W`` has shape ``(kernel, C_in, C_out)``; output is ``(..., T // stride, C_out)``.
    """
    kernel, c_in, c_out = W.shape
    if kernel != stride:
        raise ValueError(f"kernel size {kernel} must equal stride {stride}")
    T = x.shape[-2]
    if T % stride:
        raise ValueError(f"sequence length {T} is not divisible by stride {stride}")
    if x.shape[-1] != c_in:
        raise ValueError(f"conv1d channel mismatch: x {tuple(x.shape)}, W {tuple(W.shape)}")
    windows = x.reshape(*x.shape[:-2], T // stride, stride * c_in)
    return windows @ W.reshape(stride * c_in, c_out) + b


def glu(x: torch.Tensor) -> torch.Tensor:
    """First half of the last axis gated by sigmoid of the second half."""
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"glu needs an even last dimension, got {d}")
    value, gate = x[..., : d // 2], x[..., d // 2:]
    return value * torch.sigmoid(gate)


def layer_norm(x: torch.Tensor, gain: torch.Tensor | None = None, bias: torch.Tensor | None = None,
               eps: float = LN_EPS) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    y = centered / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    return z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True))


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-row ``-log softmax(logits)[target]`` (no reduction)."""
    n_classes = logits.shape[-1]
    target = torch.as_tensor(target, dtype=torch.long)
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
        raise IndexError(f"target index out of range for {n_classes} classes")
    return -log_softmax(logits).gather(-1, target.unsqueeze(-1)).squeeze(-1)


def binary_cross_entropy_with_logits(logit: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise BCE on logits, ``max(x, 0) - x*y + log(1 + exp(-|x|))``."""
    target = torch.as_tensor(target, dtype=logit.dtype)
    return torch.clamp(logit, min=0) - logit * target + torch.log1p(torch.exp(-logit.abs()))


def dropout(x: torch.Tensor, p: float, training: bool, generator: torch.Generator | None) -> torch.Tensor:
    if not training or p <= 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def multi_head_attention(
    q_src: torch.Tensor,
    kv_src: torch.Tensor,
    p: Mapping[str, torch.Tensor],
    heads: int,
    key_mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention with per-head projections.

    ``q_src`` is ``(..., Lq, d)``, ``kv_src`` is ``(..., Lkv, d)``.  ``p`` holds
    ``Wq bq Wk bk Wv bv Wo bo``.  ``key_mask`` (``(..., Lkv)``, True = attend)
    hides padded keys.  Self-attention is the ``q_src is kv_src`` case.
    """
    d = q_src.shape[-1]
    if d % heads:
        raise ValueError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads
    lq, lkv = q_src.shape[-2], kv_src.shape[-2]
    batch = q_src.shape[:-2]

    def split(t, n):
        return t.reshape(*batch, n, heads, dh).transpose(-3, -2)

    q = split(linear(q_src, p["Wq"], p["bq"]), lq)
    k = split(linear(kv_src, p["Wk"], p["bk"]), lkv)
    v = split(linear(kv_src, p["Wv"], p["bv"]), lkv)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[..., None, None, :], float("-inf"))
    weights = softmax(scores)
    out = (weights @ v).transpose(-3, -2).reshape(*batch, lq, d)
    out = linear(out, p["Wo"], p["bo"])
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Ordered name -> leaf tensor mapping with gradient accumulators."""

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self._params: OrderedDict[str, torch.Tensor] = OrderedDict()

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = torch.as_tensor(np.asarray(value), dtype=self.dtype).clone().requires_grad_(True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        """Parameters under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self._params.items() if k.startswith(prefix + ".")}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad(self, name: str) -> torch.Tensor:
        t = self._params[name]
        return t.grad if t.grad is not None else torch.zeros_like(t)

    def set(self, name: str, value) -> None:
        with torch.no_grad():
            self._params[name].copy_(torch.as_tensor(np.asarray(value), dtype=self.dtype))

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self._params.items()}

    def load_numpy(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise CheckpointError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in arrays.items():
            if tuple(v.shape) != tuple(self._params[k].shape):
                raise CheckpointError(f"shape mismatch for {k}: {v.shape} vs {tuple(self._params[k].shape)}")
            self.set(k, v)

    def n_values(self) -> int:
        return sum(t.numel() for t in self._params.values())


def backward(loss: torch.Tensor, params: ParamStore | None = None) -> None:
    """Accumulate d(loss)/d(param) into every reachable parameter's ``.grad``."""
    if loss.numel() != 1 or loss.dim() != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    _check_finite(loss.detach(), "loss")
    loss.backward()
    if params is not None:
        for name, t in params.items():
            if t.grad is not None and not torch.isfinite(t.grad).all():
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")


# ---------------------------------------------------------------- optimization


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **kwargs) -> OptimizerState:
        state = cls(**kwargs)
        for name, t in params.items():
            state.exp_avg[name] = torch.zeros_like(t, requires_grad=False)
            state.exp_avg_sq[name] = torch.zeros_like(t, requires_grad=False)
        return state


@torch.no_grad()
def adamw_step(params: ParamStore, state: OptimizerState, lr: float,
               no_decay: frozenset[str] = frozenset()) -> None:
    """Bias-corrected Adam update with decoupled weight decay."""
    for name, t in params.items():
        g = t.grad
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteError(f"NaN/Inf gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad if t.grad is not None else torch.zeros_like(t)
        if state.weight_decay and name not in no_decay:
            t.mul_(1.0 - lr * state.weight_decay)
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        t.addcdiv_(m, denom, value=-lr / bc1)


@dataclass
class LRSchedule:
    warmup_steps: int
    total_steps: int
    lr_min: float = 1e-5
    lr_max: float = 1e-4

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


def lr_at_step(schedule: LRSchedule, step: int) -> float:
    """Linear warm-up to ``lr_max`` then cosine decay down to ``lr_min``."""
    if step < schedule.warmup_steps:
        return schedule.lr_max * step / schedule.warmup_steps
    if step >= schedule.total_steps:
        return schedule.lr_min
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.lr_min + (schedule.lr_max - schedule.lr_min) * (1 + math.cos(math.pi * progress)) / 2


@torch.no_grad()
def global_grad_norm(params: ParamStore) -> float:
    total = 0.0
    for _, t in params.items():
        if t.grad is not None:
            total += float((t.grad.double() ** 2).sum())
    return math.sqrt(total)


@torch.no_grad()
def clip_grad_norm(params: ParamStore, max_norm: float = 2.0) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.  Returns the scale."""
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for _, t in params.items():
        if t.grad is not None:
            t.grad.mul_(scale)
    return scale


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   magic     8 bytes  b"BACHICK\x00"
#   version   u32      CHECKPOINT_VERSION
#   hdr_len   u64      length of the JSON header in bytes
#   header    UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "dtype", "shape",
#                                                     "offset", "nbytes"}, ...]}
#   payload   concatenated raw tensor buffers, offsets relative to payload start
#   crc32     u32      zlib.crc32 over header + payload

CHECKPOINT_MAGIC = b"BACHICK\x00"
CHECKPOINT_VERSION = 1
_DTYPES = {"f4": "<f4", "f8": "<f8", "u1": "<u1", "i8": "<i8"}


def _dtype_code(a: np.ndarray) -> str:
    for code, spec in _DTYPES.items():
        if a.dtype == np.dtype(spec):
            return code
    raise CheckpointError(f"unsupported dtype {a.dtype}")


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        code = _dtype_code(arr)
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    crc = zlib.crc32(header + payload)
    blob = (CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header))
            + header + payload + struct.pack("<I", crc))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    head = len(CHECKPOINT_MAGIC) + 12
    if len(blob) < head + 4 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hdr_len = struct.unpack("<IQ", blob[8:head])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if head + hdr_len + 4 > len(blob):
        raise CheckpointError(f"{path} is truncated")
    (crc,) = struct.unpack("<I", blob[-4:])
    body = blob[head:-4]
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path} failed its checksum")
    try:
        header = json.loads(body[:hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from None
    payload = body[hdr_len:]
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"tensor {e['name']} is truncated")
        tensors[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return tensors, header["meta"]
