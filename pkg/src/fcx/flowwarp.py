"""Backward bilinear temporal warping and the value + warp output composition."""

from __future__ import annotations

import torch


def temporal_warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` at (row - flow_y, col - flow_x) with bilinear weights.

    x: (B, C, H, W). flow: (B, 2, H, W), shared by every channel, or
    (B, 2C, H, W) with channel c warped by ``flow[:, 2c:2c+2]``. Channel 0 of
    each pair is the column (x) displacement in cells, channel 1 the row (y)
    displacement. Columns wrap periodically; rows clamp to the edge.
    """
    B, C, H, W = x.shape
    if flow.shape[0] != B or flow.shape[-2:] != (H, W) or flow.shape[1] not in (2, 2 * C):
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match input {tuple(x.shape)}")
    if flow.shape[1] == 2:
        fx, fy = flow[:, 0:1], flow[:, 1:2]
    else:
        fx, fy = flow[:, 0::2], flow[:, 1::2]
    rows = torch.arange(H, dtype=x.dtype, device=x.device).view(1, 1, H, 1)
    cols = torch.arange(W, dtype=x.dtype, device=x.device).view(1, 1, 1, W)
    sy = rows - fy
    sx = cols - fx
    y0f = torch.floor(sy)
    x0f = torch.floor(sx)
    wy = (sy - y0f).expand(B, C, H, W)
    wx = (sx - x0f).expand(B, C, H, W)
    y0 = y0f.long()
    x0 = x0f.long()
    y1 = (y0 + 1).clamp(0, H - 1)
    y0 = y0.clamp(0, H - 1)
    x1 = torch.remainder(x0 + 1, W)
    x0 = torch.remainder(x0, W)

    flat = x.reshape(B, C, H * W)

    def pick(yi, xi):
        idx = (yi * W + xi).expand(B, C, H, W).reshape(B, C, H * W)
        return torch.gather(flat, 2, idx).view(B, C, H, W)

    top = pick(y0, x0) * (1 - wx) + pick(y0, x1) * wx
    bottom = pick(y1, x0) * (1 - wx) + pick(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def compose_prediction(value: torch.Tensor, x: torch.Tensor, flow: torch.Tensor | None) -> torch.Tensor:
    """``value + temporal_warp(x, flow)``; without a flow head, just ``value``."""
    if flow is None:
        return value
    if value.shape != x.shape:
        raise ValueError(f"value {tuple(value.shape)} and input {tuple(x.shape)} differ in shape")
    return value + temporal_warp(x, flow)
