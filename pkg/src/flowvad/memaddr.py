"""Memory bank with softmax-cosine addressing and the addressing-entropy penalty.

A bank is an ``N x C`` matrix of learnable slots.  A query ``q`` of width ``C``
is replaced by a convex combination of the slots::

    w_k = softmax_k(cos(q, m_k)),   q' = sum_k w_k m_k

Feature maps are addressed independently at every spatial position.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import InputError, ShapeError


def cosine_similarity(query: torch.Tensor, slots: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of ``(..., C)`` queries against ``(N, C)`` slots.

    A pair involving a zero-norm vector has similarity 0; norms below the
    smallest normal float count as zero.
    """
    tiny = torch.finfo(query.dtype).tiny
    qn = query.norm(dim=-1, keepdim=True)
    sn = slots.norm(dim=-1, keepdim=True)
    q_unit = torch.where(qn > tiny, query / qn.clamp_min(tiny), torch.zeros_like(query))
    s_unit = torch.where(sn > tiny, slots / sn.clamp_min(tiny), torch.zeros_like(slots))
    return q_unit @ s_unit.transpose(0, 1)


def hard_shrink(weights: torch.Tensor, threshold: float, eps: float = 1e-12) -> torch.Tensor:
    """Zero out weights below ``threshold`` and renormalize along the last axis."""
    shifted = weights - threshold
    kept = torch.relu(shifted) * weights / (shifted.abs() + eps)
    return kept / kept.sum(dim=-1, keepdim=True).clamp_min(eps)


def address(
    query: torch.Tensor,
    slots: torch.Tensor,
    temperature: float = 1.0,
    shrink_threshold: float | None = None,
    check: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Address a bank with one or more queries.

    Args:
        query: ``(..., C)`` query vectors.
        slots: ``(N, C)`` slot matrix.
        temperature: softmax temperature.
        shrink_threshold: optional hard-shrinkage threshold applied after softmax.

    Returns:
        ``(retrieved, weights)`` with shapes ``(..., C)`` and ``(..., N)``.
    """
    if query.shape[-1] != slots.shape[-1]:
        raise ShapeError(f"query width {query.shape[-1]} != slot width {slots.shape[-1]}")
    if check and not torch.isfinite(query).all():
        raise InputError("query contains non-finite values")
    weights = torch.softmax(cosine_similarity(query, slots) / temperature, dim=-1)
    if shrink_threshold:
        weights = hard_shrink(weights, shrink_threshold)
    return weights @ slots, weights


def address_map(
    features: torch.Tensor,
    slots: torch.Tensor,
    temperature: float = 1.0,
    shrink_threshold: float | None = None,
    check: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Address every spatial position of a ``(C, H, W)`` or ``(B, C, H, W)`` map.

    Returns the retrieved map (same shape as ``features``) and a weight map of
    shape ``(N, H, W)`` / ``(B, N, H, W)``.
    """
    if features.dim() not in (3, 4):
        raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(features.shape)}")
    channel_axis = features.dim() - 3
    if features.shape[channel_axis] != slots.shape[1]:
        raise ShapeError(
            f"feature channels {features.shape[channel_axis]} != slot width {slots.shape[1]}"
        )
    queries = features.movedim(channel_axis, -1)
    out, weights = address(queries, slots, temperature, shrink_threshold, check)
    return out.movedim(-1, channel_axis), weights.movedim(-1, channel_axis)


def _entropy_terms(w: torch.Tensor, axis: int) -> torch.Tensor:
    # 0 * log 0 := 0
    safe = torch.where(w > 0, w, torch.ones_like(w))
    return -(w * safe.log()).sum(dim=axis)


def entropy_loss(weight_maps, spatial_reduction: str = "mean") -> torch.Tensor:
    """Addressing entropy summed over memory modules.

    Each element of ``weight_maps`` holds one module's weights with the slot
    axis at position 1 (``(B, N, ...)``) or, for a bare vector, position 0
    (``(N,)``).  Within a module the per-position entropies are averaged
    (``spatial_reduction="mean"``) or summed (``"sum"``) over batch and space.
    """
    if isinstance(weight_maps, torch.Tensor):
        weight_maps = [weight_maps]
    if spatial_reduction not in ("mean", "sum"):
        raise ValueError(f"unknown spatial_reduction {spatial_reduction!r}")
    total = None
    for w in weight_maps:
        if (w < 0).any():
            raise InputError("addressing weights must be non-negative")
        axis = 0 if w.dim() == 1 else 1
        h = _entropy_terms(w, axis)
        h = h.mean() if spatial_reduction == "mean" else h.sum()
        total = h if total is None else total + h
    if total is None:
        return torch.zeros(())
    return total


class MemoryBank(nn.Module):
    """Learnable ``N x C`` slot matrix addressed per spatial location."""

    def __init__(
        self,
        num_slots: int,
        width: int,
        temperature: float = 1.0,
        shrink_threshold: float | None = None,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if num_slots < 1 or width < 1:
            raise ShapeError(f"invalid bank shape ({num_slots}, {width})")
        bound = 1.0 / math.sqrt(width)
        init = torch.rand(num_slots, width, generator=generator) * 2 * bound - bound
        self.slots = nn.Parameter(init)
        self.temperature = temperature
        self.shrink_threshold = shrink_threshold

    @property
    def num_slots(self) -> int:
        return self.slots.shape[0]

    @property
    def width(self) -> int:
        return self.slots.shape[1]

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return address_map(
            features, self.slots, self.temperature, self.shrink_threshold, check=False
        )

    def extra_repr(self) -> str:
        return f"num_slots={self.num_slots}, width={self.width}"
