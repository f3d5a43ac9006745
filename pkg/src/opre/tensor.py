"""Layers, parameter storage, gradients and a finite-difference checker.

Reverse-mode differentiation is delegated to torch autograd; everything else
(layer definitions, parameter versioning, checkpoint format, gradient
verification) lives here so the rest of the package only sees plain
functions of ``(inputs, params)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np
import torch

DEFAULT_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


# -- layers --------------------------------------------------------------------


def conv1d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Valid cross-correlation over the second-to-last axis.

    x: [..., L, Cin], kernel: [W, Cin, Cout], bias: [Cout] -> [..., L-W+1, Cout]
    """
    width, cin, _ = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d expects {cin} input channels, got {x.shape[-1]}")
    if width > x.shape[-2]:
        raise ShapeError(f"kernel width {width} exceeds sequence length {x.shape[-2]}")
    windows = x.unfold(-2, width, 1)  # [..., L', Cin, W]
    return torch.einsum("...lcw,wco->...lo", windows, kernel) + bias


def dense(x: torch.Tensor, weights: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense expects width {weights.shape[0]}, got {x.shape[-1]}")
    return x @ weights + bias


def lstm_step(
    x: torch.Tensor,
    state: tuple[torch.Tensor, torch.Tensor],
    w_x: torch.Tensor,
    w_h: torch.Tensor,
    bias: torch.Tensor,
) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
    """One LSTM cell update; ``state`` is (cell, output). Gate order i, f, g, o."""
    cell, hidden = state
    gates = x @ w_x + hidden @ w_h + bias
    i, f, g, o = gates.chunk(4, dim=-1)
    cell = torch.sigmoid(f) * cell + torch.sigmoid(i) * torch.tanh(g)
    hidden = torch.sigmoid(o) * torch.tanh(cell)
    return hidden, (cell, hidden)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(logits, dim=-1)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling along the last axis; one uniform draw per row."""
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite values encountered")


# -- parameters ----------------------------------------------------------------


@dataclass(frozen=True)
class ParameterSnapshot:
    """Published, read-only view of a ParameterStore at one version."""

    version: int
    tensors: Mapping[str, torch.Tensor]

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def keys(self):
        return self.tensors.keys()


class ParameterStore:
    """Ordered, named parameter tensors with a monotonically increasing version."""

    def __init__(self, tensors: Mapping[str, torch.Tensor] | None = None, version: int = 0):
        self._tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.version = version
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value: torch.Tensor) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        self._tensors[name] = value.detach().clone().requires_grad_(True)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def keys(self):
        return self._tensors.keys()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._tensors.items()}

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self._tensors.values())).dtype

    def assign(self, name: str, value: torch.Tensor) -> None:
        """In-place overwrite; shape must match."""
        old = self._tensors[name]
        if tuple(value.shape) != tuple(old.shape):
            raise ShapeError(f"{name}: shape {tuple(value.shape)} != {tuple(old.shape)}")
        with torch.no_grad():
            old.copy_(value)

    def snapshot(self) -> ParameterSnapshot:
        frozen = OrderedDict((k, v.detach().clone()) for k, v in self._tensors.items())
        return ParameterSnapshot(self.version, MappingProxyType(frozen))

    def to(self, dtype: torch.dtype) -> "ParameterStore":
        return ParameterStore({k: v.detach().to(dtype) for k, v in self._tensors.items()}, self.version)

    def clone(self) -> "ParameterStore":
        return ParameterStore(self._tensors, self.version)

    def num_elements(self) -> int:
        return sum(v.numel() for v in self._tensors.values())


def uniform_fan_in(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape).astype(np.float32))


# -- gradients -----------------------------------------------------------------


class UsageError(RuntimeError):
    pass


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """d loss / d param for every named parameter; unused parameters get zeros."""
    if loss.dim() != 0:
        raise UsageError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params.keys())
    leaves = [params[n] for n in names]
    detached = [n for n, p in zip(names, leaves) if not p.requires_grad]
    if detached:
        raise UsageError(f"parameters do not require grad: {detached[:3]}")
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, leaves)}
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    return {
        n: (torch.zeros_like(p) if g is None else g.detach())
        for n, p, g in zip(names, leaves, grads)
    }


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked_elements: dict[str, int] = field(default_factory=dict)
    kinks: dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    def worst(self) -> tuple[str, float]:
        return max(self.max_rel_error.items(), key=lambda kv: kv[1])


def grad_check(
    forward_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_elements: int = 10_000,
    floor: float = 1e-6,
    seed: int = 0,
    kink_guard: bool = True,
) -> GradCheckReport:
    """Compare ``backward`` against central finite differences at float64.

    Relative error per element is |a - n| / max(|a|, |n|, floor). Parameters
    are cast to float64 copies; ``forward_fn`` must be deterministic.

    With ``kink_guard``, an element failing the central check is counted in
    ``report.kinks`` instead of the error maximum when the analytic value
    matches one of the two one-sided difference quotients, i.e. the +-h
    interval straddles a ReLU/clip breakpoint and autograd returned the
    derivative of the side the point lies on.
    """
    rng = np.random.default_rng(seed)
    work = OrderedDict((k, v.detach().to(CHECK_DTYPE).clone().requires_grad_(True)) for k, v in params.items())
    analytic = backward(forward_fn(work), work)
    report = GradCheckReport(tolerance=tolerance)
    total = sum(v.numel() for v in work.values())
    for name, tensor in work.items():
        n = tensor.numel()
        if total > max_elements:
            k = max(1, int(round(n * max_elements / total)))
            idx = rng.choice(n, size=min(n, k), replace=False)
        else:
            idx = np.arange(n)
        flat = tensor.detach().view(-1)
        worst = 0.0
        kinks = 0
        rel_err = lambda a, n: abs(a - n) / max(abs(a), abs(n), floor)
        for i in idx.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = forward_fn(work).item()
                flat[i] = orig - h
                down = forward_fn(work).item()
                flat[i] = orig
            a = analytic[name].reshape(-1)[i].item()
            rel = rel_err(a, (up - down) / (2 * h))
            if rel > tolerance and kink_guard:
                with torch.no_grad():
                    mid = forward_fn(work).item()
                one_sided = min(rel_err(a, (up - mid) / h), rel_err(a, (mid - down) / h))
                if one_sided <= tolerance:
                    kinks += 1
                    continue
            worst = max(worst, rel)
        report.max_rel_error[name] = worst
        report.checked_elements[name] = len(idx)
        report.kinks[name] = kinks
    return report


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"OPRECKPT"
CHECKPOINT_VERSION = 1


def architecture_hash(shapes: Mapping[str, tuple[int, ...]], extra: Mapping | None = None) -> str:
    blob = json.dumps({"shapes": {k: list(v) for k, v in shapes.items()}, "extra": extra or {}}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    store: ParameterStore,
    arch_hash: str,
    metadata: Mapping | None = None,
    extra_arrays: Mapping[str, np.ndarray] | None = None,
) -> None:
    """Header + ordered named arrays as little-endian float32.

    ``extra_arrays`` (optimizer moments, for instance) follow the parameters
    and are listed separately in the header.
    """
    arrays = [(k, v.detach().cpu().numpy()) for k, v in store.items()]
    extras = list((extra_arrays or {}).items())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture_hash": arch_hash,
        "version": store.version,
        "params": [[k, list(a.shape)] for k, a in arrays],
        "extras": [[k, list(np.shape(a))] for k, a in extras],
        "metadata": dict(metadata or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for _, a in arrays + extras:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    fmt, n = struct.unpack("<II", data[8:16])
    if fmt != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {fmt}")
    header = json.loads(data[16 : 16 + n])
    offset = 16 + n

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        return a.astype(np.float32)

    store = ParameterStore(version=header["version"])
    for name, shape in header["params"]:
        store.add(name, torch.from_numpy(take(shape)))
    extras = {name: take(shape) for name, shape in header["extras"]}
    return store, header, extras
