"""AFNO spectral vision transformer with value and flow decoder heads.

Token mixing is an adaptive Fourier neural operator: a real 2-D FFT over the
token grid, a two-layer block-diagonal complex MLP shared by every retained
mode, soft-shrinkage, and the inverse FFT. Residual wiring is selectable
between pre-norm, plain post-norm and deep-norm (post-norm with the residual
scaled by alpha and branch weights scaled by beta at init).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ModelParams
from .flowwarp import compose_prediction

NORM_MODES = ("pre", "post_plain", "post_deepnorm")
FLOW_MODES = ("shared2", "per_channel", "off")


@dataclass
class ArchConfig:
    grid: tuple[int, int] = (32, 64)
    channels: int = 4
    patch: int = 4
    embed_dim: int = 64
    depth: int = 8
    norm_mode: str = "post_deepnorm"
    num_blocks: int = 4  # block-diagonal factor of the spectral MLP
    sparsity: float = 0.01  # soft-shrink threshold
    kept_modes: float = 1.0  # fraction of frequency modes retained
    mlp_ratio: int = 4
    flow_mode: str = "shared2"

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)

    def validate(self) -> None:
        H, W = self.grid
        if H % self.patch or W % self.patch:
            raise ValueError(f"patch {self.patch} does not divide grid {self.grid}")
        if self.embed_dim % self.num_blocks:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_blocks {self.num_blocks}")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if self.flow_mode not in FLOW_MODES:
            raise ValueError(f"flow_mode must be one of {FLOW_MODES}, got {self.flow_mode!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0.0 < self.kept_modes <= 1.0:
            raise ValueError("kept_modes must lie in (0, 1]")

    @property
    def flow_channels(self) -> int:
        return {"shared2": 2, "per_channel": 2 * self.channels, "off": 0}[self.flow_mode]

    def to_json(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def deepnorm_constants(depth: int) -> tuple[float, float]:
    """Residual scale alpha = (2N)^(1/4) and init gain beta = (8N)^(-1/4)."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    return (2 * depth) ** 0.25, (8 * depth) ** -0.25


class SpectralFilter(nn.Module):
    def __init__(self, dim: int, num_blocks: int, sparsity: float, kept_modes: float):
        super().__init__()
        self.num_blocks = num_blocks
        self.block_size = dim // num_blocks
        self.sparsity = sparsity
        self.kept_modes = kept_modes
        bs = self.block_size
        # leading axis holds (real, imag)
        self.w1 = nn.Parameter(torch.empty(2, num_blocks, bs, bs))
        self.b1 = nn.Parameter(torch.zeros(2, num_blocks, bs))
        self.w2 = nn.Parameter(torch.empty(2, num_blocks, bs, bs))
        self.b2 = nn.Parameter(torch.zeros(2, num_blocks, bs))
        std = (2.0 * bs) ** -0.5
        nn.init.normal_(self.w1, std=std)
        nn.init.normal_(self.w2, std=std)

    def mix(self, z: torch.Tensor) -> torch.Tensor:
        """Block-diagonal complex MLP applied independently at every mode."""
        shape = z.shape
        z = z.reshape(*shape[:-1], self.num_blocks, self.block_size)
        zr, zi = z.real, z.imag

        def cmul(ar, ai, w):
            return (torch.einsum("...bi,bio->...bo", ar, w[0]) - torch.einsum("...bi,bio->...bo", ai, w[1]),
                    torch.einsum("...bi,bio->...bo", ai, w[0]) + torch.einsum("...bi,bio->...bo", ar, w[1]))

        hr, hi = cmul(zr, zi, self.w1)
        hr = F.gelu(hr + self.b1[0])
        hi = F.gelu(hi + self.b1[1])
        orr, oi = cmul(hr, hi, self.w2)
        orr = F.softshrink(orr + self.b2[0], self.sparsity) if self.sparsity else orr + self.b2[0]
        oi = F.softshrink(oi + self.b2[1], self.sparsity) if self.sparsity else oi + self.b2[1]
        return torch.complex(orr, oi).reshape(shape)

    def mode_mask(self, h: int, wf: int, device) -> torch.Tensor | None:
        if self.kept_modes >= 1.0:
            return None
        ky = torch.fft.fftfreq(h, device=device).abs() * h
        kx = torch.arange(wf, device=device)
        kmax_y = self.kept_modes * (h // 2)
        kmax_x = self.kept_modes * (wf - 1)
        return ((ky[:, None] <= kmax_y) & (kx[None, :] <= kmax_x)).to(torch.float32)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, h, w, D)
        h, w = x.shape[1:3]
        z = torch.fft.rfft2(x, dim=(1, 2), norm="ortho")
        z = self.mix(z)
        mask = self.mode_mask(h, z.shape[2], x.device)
        if mask is not None:
            z = z * mask[None, :, :, None]
        return torch.fft.irfft2(z, s=(h, w), dim=(1, 2), norm="ortho")


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)
        for fc in (self.fc1, self.fc2):
            nn.init.xavier_normal_(fc.weight)
            nn.init.zeros_(fc.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class AFNOBlock(nn.Module):
    def __init__(self, cfg: ArchConfig, alpha: float = 1.0):
        super().__init__()
        self.norm_mode = cfg.norm_mode
        self.alpha = alpha
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.filter = SpectralFilter(cfg.embed_dim, cfg.num_blocks, cfg.sparsity, cfg.kept_modes)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = Mlp(cfg.embed_dim, cfg.mlp_ratio)

    def forward(self, x):
        if self.norm_mode == "pre":
            x = x + self.filter(self.norm1(x))
            return x + self.mlp(self.norm2(x))
        a = self.alpha
        x = self.norm1(a * x + self.filter(x))
        return self.norm2(a * x + self.mlp(x))


def unpatch(t: torch.Tensor, p: int, channels: int) -> torch.Tensor:
    """(B, h, w, p*p*ch) tokens -> (B, ch, h*p, w*p) pixels."""
    B, h, w, _ = t.shape
    t = t.reshape(B, h, w, p, p, channels).permute(0, 5, 1, 3, 2, 4)
    return t.reshape(B, channels, h * p, w * p)


class AFNONet(nn.Module):
    def __init__(self, cfg: ArchConfig, seed: int | None = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        if cfg.norm_mode == "post_deepnorm":
            self.alpha, self.beta = deepnorm_constants(cfg.depth)
        else:
            self.alpha, self.beta = 1.0, 1.0
        H, W = cfg.grid
        p, D = cfg.patch, cfg.embed_dim
        gen_state = torch.random.get_rng_state()
        if seed is not None:
            torch.manual_seed(seed)
        try:
            self.patch_embed = nn.Conv2d(cfg.channels, D, kernel_size=p, stride=p)
            self.pos_embed = nn.Parameter(torch.zeros(1, H // p, W // p, D))
            self.blocks = nn.ModuleList(AFNOBlock(cfg, self.alpha) for _ in range(cfg.depth))
            self.final_norm = nn.LayerNorm(D) if cfg.norm_mode == "pre" else None
            self.value_head = nn.Linear(D, p * p * cfg.channels)
            nn.init.xavier_normal_(self.value_head.weight)
            nn.init.zeros_(self.value_head.bias)
            self.flow_head = None
            if cfg.flow_channels:
                self.flow_head = nn.Linear(D, p * p * cfg.flow_channels)
                nn.init.zeros_(self.flow_head.weight)
                nn.init.zeros_(self.flow_head.bias)
        finally:
            if seed is not None:
                torch.random.set_rng_state(gen_state)
        if cfg.norm_mode == "post_deepnorm":
            init_deepnorm(self)

    # -- trunk ------------------------------------------------------------
    def embed(self, x: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch
        H, W = x.shape[-2:]
        if H % p or W % p:
            raise ValueError(f"input grid {H}x{W} not divisible by patch {p}")
        t = self.patch_embed(x).permute(0, 2, 3, 1)  # (B, h, w, D)
        pos = self.pos_embed
        if pos.shape[1:3] != t.shape[1:3]:
            pos = F.interpolate(pos.permute(0, 3, 1, 2), size=t.shape[1:3], mode="bilinear",
                                align_corners=False).permute(0, 2, 3, 1)
        return t + pos

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        t = self.embed(x)
        for blk in self.blocks:
            t = blk(t)
        if self.final_norm is not None:
            t = self.final_norm(t)
        return t

    def forward(self, x: torch.Tensor):
        """Returns (value (B,C,H,W), flow (B,2,H,W) / (B,2C,H,W) or None)."""
        if x.shape[1] != self.cfg.channels:
            raise ValueError(f"expected {self.cfg.channels} channels, got {x.shape[1]}")
        t = self.trunk(x)
        p = self.cfg.patch
        value = unpatch(self.value_head(t), p, self.cfg.channels)
        flow = None
        if self.flow_head is not None:
            flow = unpatch(self.flow_head(t), p, self.cfg.flow_channels)
        return value, flow

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """One forecast step: value + warp(input, flow)."""
        value, flow = self(x)
        return compose_prediction(value, x, flow)

    # -- parameter interchange --------------------------------------------
    def to_params(self, extra: dict | None = None) -> ModelParams:
        tensors = {k: v.detach().cpu().numpy().astype(np.float32)
                   for k, v in self.state_dict().items()}
        return ModelParams(arch=self.cfg.to_json(), tensors=tensors, extra=dict(extra or {}))

    @classmethod
    def from_params(cls, params: ModelParams) -> "AFNONet":
        model = cls(ArchConfig.from_json(params.arch), seed=None)
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.tensors.items()})
        return model


def init_deepnorm(model: AFNONet) -> AFNONet:
    """Scale residual-branch weights by beta and set residual scale alpha.

    Applied on top of the base initialization: spectral MLP weights, token
    MLP weights and the value head projection. LayerNorm gains stay 1; the
    flow head stays exactly zero.
    """
    cfg = model.cfg
    if cfg.norm_mode != "post_deepnorm":
        raise ValueError("deep-norm initialization requires norm_mode='post_deepnorm'")
    alpha, beta = deepnorm_constants(cfg.depth)
    model.alpha, model.beta = alpha, beta
    with torch.no_grad():
        for blk in model.blocks:
            blk.alpha = alpha
            blk.filter.w1.mul_(beta)
            blk.filter.w2.mul_(beta)
            blk.mlp.fc1.weight.mul_(beta)
            blk.mlp.fc2.weight.mul_(beta)
        model.value_head.weight.mul_(beta)
    return model


def build_model(cfg: ArchConfig, seed: int = 0) -> AFNONet:
    return AFNONet(cfg, seed=seed)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def trunk_sensitivity(model: AFNONet, x: torch.Tensor, eps: float = 1e-3, seed: int = 0) -> float:
    """||trunk(x + d) - trunk(x)|| / ||embed(x + d) - embed(x)|| for a random d."""
    g = torch.Generator().manual_seed(seed)
    d = torch.randn(x.shape, generator=g, dtype=x.dtype) * eps
    with torch.no_grad():
        t0, t1 = model.embed(x), model.embed(x + d)
        out0, out1 = t0, t1
        for blk in model.blocks:
            out0, out1 = blk(out0), blk(out1)
    return float((out1 - out0).norm() / (t1 - t0).norm())

