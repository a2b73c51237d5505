"""Gradient engine plumbing shared by the agent, the probe and the VAE.

Reverse-mode differentiation and the layer library come from torch; this
module pins everything to float64, adds seeded construction, flat parameter
views, a finite-difference oracle, a clipped Adam step and a deterministic
checkpoint format.
"""
from __future__ import annotations

import contextlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
_MAGIC = b"LSCKPT1\n"


class NonFiniteValue(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


def configure_threads() -> int:
    """Cap intra-op threads with ``LEVELSMITH_THREADS`` (default 1)."""
    n = max(1, int(os.environ.get("LEVELSMITH_THREADS", "1")))
    torch.set_num_threads(n)
    return n


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a private torch RNG state (global state restored)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) % (2**63))
        yield


def build(factory, seed: int) -> nn.Module:
    with seeded(seed):
        module = factory()
    return module.to(DTYPE)


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


# -- flat parameter views ---------------------------------------------------

def param_slices(module: nn.Module) -> dict[str, slice]:
    out, offset = {}, 0
    for name, p in module.named_parameters():
        out[name] = slice(offset, offset + p.numel())
        offset += p.numel()
    return out


def flat_params(module: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()]).numpy().copy()


def set_flat_params(module: nn.Module, vec) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    n = sum(p.numel() for p in module.parameters())
    if vec.shape != (n,):
        raise ShapeMismatch(f"expected flat vector of {n}, got {vec.shape}")
    with torch.no_grad():
        offset = 0
        for p in module.parameters():
            p.copy_(torch.from_numpy(vec[offset : offset + p.numel()]).reshape(p.shape))
            offset += p.numel()


def flat_grads(module: nn.Module) -> np.ndarray:
    return torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in module.parameters()
    ]).numpy().copy()


def param_digest(module: nn.Module) -> str:
    import hashlib

    return hashlib.sha256(flat_params(module).tobytes()).hexdigest()


# -- differentiation --------------------------------------------------------

def forward_backward(loss_fn, params):
    """Evaluate scalar ``loss_fn()`` and return ``(loss, grads)`` for ``params``."""
    params = list(params)
    loss = loss_fn()
    if loss.dim() != 0:
        raise ShapeMismatch(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise NonFiniteValue(f"loss is {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    return loss.detach(), grads


def finite_difference_grad(loss_fn, module: nn.Module, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. the module's flat parameters."""
    flats = [p.data.view(-1) for p in module.parameters()]
    offsets = np.cumsum([0] + [f.numel() for f in flats])
    idx = range(int(offsets[-1])) if indices is None else indices
    out = np.zeros(len(idx))
    with torch.no_grad():
        for k, i in enumerate(idx):
            which = int(np.searchsorted(offsets, i, side="right")) - 1
            flat, j = flats[which], int(i - offsets[which])
            orig = float(flat[j])
            try:
                for sign in (1.0, -1.0):
                    flat[j] = orig + sign * h
                    out[k] += sign * float(loss_fn())
            finally:
                flat[j] = orig
            out[k] /= 2 * h
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def gradient_check(loss_fn, module: nn.Module, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    Central differences at h=1e-5 cannot resolve gradients much below 1e-8
    (roundoff is about eps * |loss| / h), so magnitudes under ``floor`` are
    compared on an absolute scale.
    """
    _, grads = forward_backward(loss_fn, module.parameters())
    analytic = torch.cat([g.reshape(-1) for g in grads]).numpy()
    numeric = finite_difference_grad(loss_fn, module, h)
    return relative_error(analytic, numeric, floor)


# -- optimisation -----------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    eps: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def clip_by_global_norm(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if not math.isfinite(total):
        raise NonFiniteValue("gradient norm is not finite")
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads, total


@torch.no_grad()
def adam_step(params, grads, state: AdamState, max_grad_norm=None):
    """Clip by global norm, then one bias-corrected Adam update in place."""
    params = list(params)
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {tuple(p.shape)} vs grad {tuple(g.shape)}")
    grads, _ = clip_by_global_norm(grads, max_grad_norm)
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.betas
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / c1)
        if not torch.isfinite(p).all():
            raise NonFiniteValue("parameter became non-finite")
    return params


class Adam:
    """Optimizer bound to a module's parameters."""

    def __init__(self, params, lr=1e-4, eps=1e-5, max_grad_norm=None):
        self.params = list(params)
        self.state = AdamState(lr=lr, eps=eps)
        self.max_grad_norm = max_grad_norm

    def step_with(self, grads):
        adam_step(self.params, grads, self.state, self.max_grad_norm)

    def minimize(self, loss_fn):
        loss, grads = forward_backward(loss_fn, self.params)
        self.step_with(grads)
        return float(loss)


# -- checkpoints ------------------------------------------------------------

def save_arrays(arrays: dict[str, np.ndarray], path, meta: dict | None = None) -> Path:
    """Write named arrays as a JSON header line plus raw little-endian bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs = [], []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        blobs.append(arr.astype(dt, copy=False).tobytes())
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(len(header).to_bytes(8, "little"))
    buf.write(header)
    for b in blobs:
        buf.write(b)
    path.write_bytes(buf.getvalue())
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a levelsmith checkpoint")
    pos = len(_MAGIC)
    n = int.from_bytes(data[pos : pos + 8], "little")
    pos += 8
    header = json.loads(data[pos : pos + n])
    pos += n
    out = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        out[e["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(e["shape"]).copy()
        pos += count * dt.itemsize
    return out, header["meta"]


def save_module(module: nn.Module, path, meta: dict | None = None) -> Path:
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    return save_arrays(arrays, path, meta)


def load_module(module: nn.Module, path) -> dict:
    arrays, meta = load_arrays(path)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    module.load_state_dict(state)
    return meta
