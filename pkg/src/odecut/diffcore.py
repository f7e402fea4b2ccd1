"""Differentiable substrate: parameter trees, a functional Adam, finite-difference
gradient checking and the small layer helpers the networks share.

Tensors and the reverse-mode tape are torch's; this module adds the pieces the
rest of the package relies on with stricter contracts than torch offers
(stable parameter paths, path-carrying errors, an independent FD oracle).
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, path: str):
        super().__init__(f"non-finite gradient at {path!r}")
        self.path = path


ParamTree = Dict[str, torch.Tensor]


def param_tree(module: nn.Module, prefix: str = "", buffers: bool = False) -> ParamTree:
    """Named parameters (optionally buffers) in registration order."""
    tree = OrderedDict()
    for name, p in module.named_parameters():
        tree[prefix + name] = p
    if buffers:
        for name, b in module.named_buffers():
            tree[prefix + name] = b
    return tree


def count_params(tree) -> int:
    """Total element count of every trainable entry in a ParamTree or module."""
    if isinstance(tree, nn.Module):
        tree = param_tree(tree)
    return sum(int(t.numel()) for t in tree.values() if getattr(t, "requires_grad", True))


def tree_digest(tree: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for path, t in tree.items():
        h.update(path.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-7) -> torch.Tensor:
    # vector_norm has a zero subgradient at the origin, unlike sqrt(sum(x^2))
    return x / torch.linalg.vector_norm(x, dim=dim, keepdim=True).clamp_min(eps)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Normal(0, std) convolution/linear weights, zero biases, unit norm gains."""
    first = next(module.parameters(), None)
    if first is not None and first.is_meta:
        # shape-only modules (parameter counting); meta init is pure overhead
        return
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d)) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def norm_layer(kind: str, channels: int, affine: bool = False) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=affine)
    if kind == "batch":
        return nn.BatchNorm2d(channels, affine=affine)
    raise ValueError(f"unknown norm kind {kind!r}")


def check_channels(op: str, x: torch.Tensor, expected: int) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{op}: expected NCHW input, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ShapeError(f"{op}: expected {expected} input channels, got {x.shape[1]}")


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=OrderedDict)
    v: Dict[str, torch.Tensor] = field(default_factory=OrderedDict)


def adam_step(
    params: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grads: Optional[Mapping[str, torch.Tensor]] = None,
) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    ``grads`` defaults to each parameter's ``.grad``; a parameter without a
    gradient is treated as having a zero gradient.  All gradients are checked
    before anything is modified, so a failed step leaves params and state
    untouched.
    """
    resolved = OrderedDict()
    for path, p in params.items():
        g = grads[path] if grads is not None else p.grad
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)} at {path!r}")
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradientError(path)
        resolved[path] = g.detach()

    step = state.step + 1
    bc1 = 1 - beta1 ** step
    bc2 = 1 - beta2 ** step
    with torch.no_grad():
        for path, p in params.items():
            g = resolved[path]
            m = state.m.get(path)
            v = state.v.get(path)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            state.m[path] = m
            state.v[path] = v
            p -= lr * (m / bc1) / (torch.sqrt(v / bc2) + eps)
    state.step = step
    return state


class Adam:
    """Thin stateful wrapper pairing a ParamTree with its AdamState."""

    def __init__(self, params: Mapping[str, torch.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = OrderedDict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.betas[0], self.betas[1], self.eps)

    def state_tree(self, prefix: str) -> "OrderedDict[str, torch.Tensor]":
        out = OrderedDict()
        out[prefix + "step"] = torch.tensor([self.state.step], dtype=torch.int64)
        for path in self.params:
            if path in self.state.m:
                out[f"{prefix}m/{path}"] = self.state.m[path]
                out[f"{prefix}v/{path}"] = self.state.v[path]
        return out

    def load_state_tree(self, tree: Mapping[str, torch.Tensor], prefix: str) -> None:
        self.state = AdamState(step=int(tree[prefix + "step"][0]))
        for path in self.params:
            key = f"{prefix}m/{path}"
            if key in tree:
                self.state.m[path] = tree[key].clone()
                self.state.v[path] = tree[f"{prefix}v/{path}"].clone()


# --------------------------------------------------------------------------
# Finite-difference oracle


def finite_difference_grad(
    fn: Callable[[], torch.Tensor], tensor: torch.Tensor, eps: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor``.

    ``tensor`` is perturbed in place and restored.  Only flat ``indices`` are
    probed when given; the rest of the returned array is NaN.
    """
    flat = tensor.data.view(-1)
    out = np.full(flat.numel(), np.nan)
    idx = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in idx:
            orig = float(flat[i])
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            out[i] = (up - down) / (2 * eps)
    return out.reshape(tuple(tensor.shape))


def gradcheck(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative mismatch between reverse-mode and central-difference
    gradients of scalar ``fn()`` over ``tensors``.

    The error for each tensor is ``max|g_tape - g_fd| / max(max|g_fd|, max|g_tape|)``
    over probed entries; when ``max_entries`` is set, that many entries per
    tensor are probed at random.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    if loss.numel() != 1:
        raise ShapeError("gradcheck: fn must return a scalar")
    grads = torch.autograd.grad(loss, list(tensors), allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(tensors, grads):
        n = t.numel()
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        fd = finite_difference_grad(fn, t, eps, idx).reshape(-1)[idx]
        tape = np.zeros(n) if g is None else g.detach().reshape(-1).cpu().numpy()
        tape = tape[idx]
        scale = max(float(np.max(np.abs(fd))), float(np.max(np.abs(tape))), 1e-10)
        worst = max(worst, float(np.max(np.abs(tape - fd))) / scale)
    return worst
