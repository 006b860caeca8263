"""Numeric layer: tensor primitives with reverse-mode gradients, Adam, checkpoints, gradient checks.

Tensors and the autodiff graph come from torch; this module pins down the
primitive set the models use, validates shapes, and owns the optimizer and
the checkpoint format so both are reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

Tensor = torch.Tensor


class ShapeError(ValueError):
    pass


def _fail(op: str, *tensors: Tensor) -> None:
    shapes = ", ".join(str(tuple(t.shape)) for t in tensors)
    raise ShapeError(f"{op}: incompatible shapes {shapes}")


def configure(seed: int | None = None, dtype: torch.dtype = torch.float64, threads: int = 1) -> None:
    """Single-threaded deterministic execution at the requested precision."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    torch.set_default_dtype(dtype)
    if seed is not None:
        torch.manual_seed(seed)


def tensor(data, requires_grad: bool = False, dtype: torch.dtype | None = None) -> Tensor:
    return torch.tensor(np.asarray(data), dtype=dtype or torch.get_default_dtype(),
                        requires_grad=requires_grad)


# -- primitives ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        _fail("matmul", a, b)
    return a @ b


def _same_or_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _fail(op, a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_or_broadcast("add", a, b)
    return a + b


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_or_broadcast("multiply", a, b)
    return a * b


def concat(tensors: Sequence[Tensor], dim: int = -1) -> Tensor:
    ref = tensors[0]
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(
            t.shape[d] != ref.shape[d] for d in range(ref.dim()) if d != dim % ref.dim()
        ):
            _fail("concat", *tensors)
    return torch.cat(list(tensors), dim=dim)


def slice_(x: Tensor, start: int, stop: int, dim: int = -1) -> Tensor:
    if not 0 <= start <= stop <= x.shape[dim]:
        raise ShapeError(f"slice: range [{start}, {stop}) out of bounds for shape {tuple(x.shape)} dim {dim}")
    return x.narrow(dim, start, stop - start)


def embedding_lookup(table: Tensor, ids: Tensor) -> Tensor:
    if table.dim() != 2:
        _fail("embedding_lookup", table, ids)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids outside [0, {table.shape[0]})")
    return table[ids]


def logsumexp(x: Tensor, dim: int = -1) -> Tensor:
    return torch.logsumexp(x, dim=dim)


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    return x - torch.logsumexp(x, dim=dim, keepdim=True)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.exp(log_softmax(x, dim))


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        _fail("layer_norm", x, gain, bias)
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def dropout(x: Tensor, mask: Tensor | None, p: float) -> Tensor:
    """Inverted dropout with a caller-supplied keep mask (1 = keep)."""
    if mask is None or p == 0.0:
        return x
    if mask.shape != x.shape:
        _fail("dropout", x, mask)
    return x * mask / (1.0 - p)


def mean(x: Tensor, dim: int | None = None) -> Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def sum_(x: Tensor, dim: int | None = None) -> Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


def mse(a: Tensor, b: Tensor) -> Tensor:
    _same_or_broadcast("mse", a, b)
    return ((a - b) ** 2).mean()


# -- gradients -------------------------------------------------------------

def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[Tensor] | None:
    """Populate ``.grad`` on every leaf; return the grads of ``params`` if given."""
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    loss.backward()
    if params is None:
        return None
    return [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]


def numeric_gradient(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central differences of scalar ``fn()`` with respect to ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-5) -> float:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximised."""
    a, n = analytic.detach(), numeric.detach()
    denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
    return float(((a - n).abs() / denom).max()) if a.numel() else 0.0


def gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences over all ``inputs``."""
    for x in inputs:
        x.grad = None
    out = fn()
    analytic = torch.autograd.grad(out, list(inputs), allow_unused=True)
    worst = 0.0
    for x, g in zip(inputs, analytic):
        g = torch.zeros_like(x) if g is None else g
        worst = max(worst, max_relative_error(g, numeric_gradient(fn, x, h)))
    return worst


# -- optimizer -------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer with bias correction.

    ``p <- p - lr * mhat / (sqrt(vhat) + eps)`` with
    ``mhat = m / (1 - b1^t)`` and ``vhat = v / (1 - b2^t)``.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = [p for p in params]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[Tensor | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError(f"optimizer_step: {len(grads)} grads for {len(self.params)} params")
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(self.params, grads)]
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                _fail("optimizer_step", p, g)
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > self.clip_norm:
                grads = [g * (self.clip_norm / total) for g in grads]
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        with torch.no_grad():
            for p, g, m, v in zip(self.params, grads, self.m, self.v):
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                p.sub_(self.lr * (m / bc1) / (torch.sqrt(v / bc2) + self.eps))


# -- checkpoints -----------------------------------------------------------
# Layout: MAGIC | u32 version | u64 header length | JSON header | raw little-endian tensors.

MAGIC = b"PNLCKPT\x00"
CHECKPOINT_VERSION = 1
_DTYPES = {"f64": (torch.float64, "<f8"), "f32": (torch.float32, "<f4"), "i64": (torch.int64, "<i8")}
_DTYPE_NAME = {v[0]: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor], meta: Mapping | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPE_NAME:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name!r}")
        code = _DTYPE_NAME[t.dtype]
        raw = t.numpy().astype(_DTYPES[code][1], copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    body = start + hlen
    out = {}
    for e in header["tensors"]:
        torch_dtype, np_dtype = _DTYPES[e["dtype"]]
        lo = body + e["offset"]
        arr = np.frombuffer(data[lo:lo + e["nbytes"]], dtype=np_dtype).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
    return out, header["meta"]
