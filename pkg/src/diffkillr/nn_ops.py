"""Differentiable counterparts of the numpy warp routines, shared by both networks."""

from __future__ import annotations

import contextlib
import random

import numpy as np
import torch
import torch.nn.functional as F


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


@contextlib.contextmanager
def deterministic():
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def patches_to_tensor(arrays) -> torch.Tensor:
    """Stack ``(H, W, C)`` arrays into a float32 ``(B, C, H, W)`` tensor."""
    arr = np.stack([np.asarray(a, np.float32) for a in arrays])
    if arr.ndim == 3:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def field_to_tensor(displacements) -> torch.Tensor:
    """``(H, W, 2)`` displacement arrays to a ``(B, 2, H, W)`` tensor."""
    arr = np.stack([np.asarray(d, np.float64) for d in displacements])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_fields(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().double().numpy().transpose(0, 2, 3, 1)


def _grid(disp: torch.Tensor) -> torch.Tensor:
    b, _, h, w = disp.shape
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=disp.dtype), torch.arange(w, dtype=disp.dtype), indexing="ij"
    )
    x = xs + disp[:, 0]
    y = ys + disp[:, 1]
    # align_corners=True maps -1/+1 onto the centres of the edge pixels.
    return torch.stack([2.0 * x / max(w - 1, 1) - 1.0, 2.0 * y / max(h - 1, 1) - 1.0], dim=-1)


def warp(image: torch.Tensor, disp: torch.Tensor, padding: str = "border", mode: str = "bilinear") -> torch.Tensor:
    """Pull-back warp: ``out(p) = image(p + disp(p))``; matches ``diffeo_gen.warp_array``."""
    pad = "border" if padding == "border" else "zeros"
    return F.grid_sample(image, _grid(disp).to(image.dtype), mode=mode, padding_mode=pad, align_corners=True)


def compose(outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    """``outer(p) + inner(p + outer(p))``."""
    return outer + warp(inner, outer, padding="border")


def integrate_velocity(velocity: torch.Tensor, steps: int = 7) -> torch.Tensor:
    """Scaling and squaring: ``exp(v)`` as a displacement field."""
    disp = velocity / (2 ** steps)
    for _ in range(steps):
        disp = compose(disp, disp)
    return disp


def smoothness(disp: torch.Tensor, kind: str = "diffusion") -> torch.Tensor:
    """Regularizer on a ``(B, 2, H, W)`` displacement field.

    ``diffusion`` is the mean squared forward difference.  ``elastic`` keeps
    only the symmetric part of the gradient, so (infinitesimal) rotations
    cost nothing and a rotated cell is not explained by shear instead.
    """
    if kind == "diffusion":
        dx = disp[..., :, 1:] - disp[..., :, :-1]
        dy = disp[..., 1:, :] - disp[..., :-1, :]
        return (dx ** 2).mean() + (dy ** 2).mean()
    if kind != "elastic":
        raise ValueError(f"unknown regularizer {kind!r}")
    ux, uy = disp[:, 0], disp[:, 1]
    uxx = ux[..., :-1, 1:] - ux[..., :-1, :-1]
    uxy = ux[..., 1:, :-1] - ux[..., :-1, :-1]
    uyx = uy[..., :-1, 1:] - uy[..., :-1, :-1]
    uyy = uy[..., 1:, :-1] - uy[..., :-1, :-1]
    return (uxx ** 2 + uyy ** 2 + 0.5 * (uxy + uyx) ** 2).mean()
