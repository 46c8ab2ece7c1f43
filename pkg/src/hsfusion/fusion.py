"""Fusion stage: tap features from frozen CGFEs, FRB refinement, thermal mask, region weighting."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cgfe import CgfeModel, epoch_order, image_tensor
from .config import RunConfig
from .datamodel import FMB_PALETTE, ImagePair, LabelPalette, SegMap, argmax_decode
from .errors import ConfigError, ContractError, SizeError
from .metrics import ssim_tensor
from .netblocks import RESNET_TAPS, build_frb

# BT.601 full-range (JPEG) colour transform, offsets applied to the chroma planes.
_YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168735892, -0.331264108, 0.5],
    [0.5, -0.418687589, -0.081312411],
])
_YCC_INV = np.linalg.inv(_YCC)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    ycc = rgb @ _YCC.T
    ycc[..., 1:] += 0.5
    return ycc


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    ycc = np.array(ycc, dtype=np.float64, copy=True)
    ycc[..., 1:] -= 0.5
    return ycc @ _YCC_INV.T


def luminance(rgb):
    """Y plane of (..., 3) arrays or (B, 3, H, W) tensors."""
    w = _YCC[0]
    if torch.is_tensor(rgb):
        return (rgb * torch.tensor(w, dtype=rgb.dtype).view(1, 3, 1, 1)).sum(1, keepdim=True)
    return rgb @ w


@dataclass
class ThermalMask:
    """0 on thermal-class pixels, 255 elsewhere."""

    m: np.ndarray

    def __post_init__(self):
        vals = np.unique(self.m)
        if not np.isin(vals, (0, 255)).all():
            raise ContractError(f"mask values must be 0 or 255, got {vals[:5]}")

    @property
    def thermal(self) -> np.ndarray:
        return self.m == 0


class FusionModel(nn.Module):
    """FRB and 3x3 luminance projection per modality, plus the two region weights."""

    def __init__(self, tap_channels: int, reduction: int = 64, omega0: float = 0.5, gamma0: float = 0.5):
        super().__init__()
        self.tap_channels, self.reduction = tap_channels, reduction
        self.frb_ir = build_frb(tap_channels, reduction)
        self.frb_vi = build_frb(tap_channels, reduction)
        width = self.frb_ir.width
        self.proj_ir = nn.Conv2d(width, 1, 3, padding=1)
        self.proj_vi = nn.Conv2d(width, 1, 3, padding=1)
        self.omega = nn.Parameter(torch.tensor(float(omega0)))
        self.gamma = nn.Parameter(torch.tensor(float(gamma0)))

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "FusionModel":
        tap_ch = 2 * (2 * cfg.base_ch) + 2 * (4 * cfg.base_ch) + cfg.base_ch
        return cls(tap_ch, cfg.frb_reduction, cfg.omega0, cfg.gamma0)

    @property
    def arch(self) -> dict:
        return dict(tap_channels=self.tap_channels, reduction=self.reduction)


def collect_features(taps, target) -> torch.Tensor:
    """Bilinearly resize the five taps to ``target`` (H, W) and concatenate channels."""
    if len(taps) != len(RESNET_TAPS):
        raise ContractError(f"expected {len(RESNET_TAPS)} taps, got {len(taps)}")
    h, w = target
    parts = []
    for t in taps:
        v = t.value if hasattr(t, "value") else t
        if tuple(v.shape[-2:]) != (h, w):
            v = F.interpolate(v, size=(h, w), mode="bilinear", align_corners=False)
        parts.append(v)
    return torch.cat(parts, dim=1)


def refine(fm: FusionModel, f_rec: torch.Tensor, modality: str) -> torch.Tensor:
    if modality == "ir":
        return fm.proj_ir(fm.frb_ir(f_rec))
    if modality == "vis":
        return fm.proj_vi(fm.frb_vi(f_rec))
    raise ConfigError(f"unknown modality {modality!r}")


def isdm_mask(seg_ir: SegMap, palette: LabelPalette = FMB_PALETTE) -> ThermalMask:
    labels = argmax_decode(seg_ir)
    thermal = np.isin(labels, sorted(palette.thermal_ids))
    return ThermalMask(np.where(thermal, 0, 255).astype(np.uint8))


def thermal_region(g_out: torch.Tensor, palette: LabelPalette) -> torch.Tensor:
    """Boolean (B, 1, H, W) thermal region from G's raw class output."""
    labels = torch.argmax(g_out, dim=1, keepdim=True)
    ids = torch.tensor(sorted(palette.thermal_ids), dtype=labels.dtype)
    return torch.isin(labels, ids)


def _as_thermal(mask, like: torch.Tensor) -> torch.Tensor:
    if isinstance(mask, ThermalMask):
        mask = mask.thermal
    elif isinstance(mask, np.ndarray) and mask.dtype != bool:
        mask = mask == 0
    mask = torch.as_tensor(mask)
    if mask.dtype != torch.bool:
        mask = mask == 0
    while mask.ndim < like.ndim:
        mask = mask.unsqueeze(0)
    return mask


def adaptive_fuse(f_ir, f_vi, mask, omega, gamma):
    """Region-weighted blend.

    Thermal pixels (mask 0): sigmoid(omega) * f_ir + (1 - sigmoid(omega)) * f_vi.
    Other pixels (mask 255): (1 - sigmoid(gamma)) * f_ir + sigmoid(gamma) * f_vi.
    ``mask`` may be a ThermalMask, a {0, 255} array or a boolean thermal map.
    """
    f_ir, f_vi = torch.as_tensor(f_ir), torch.as_tensor(f_vi)
    if f_ir.shape != f_vi.shape:
        raise SizeError(f"feature shapes differ: {tuple(f_ir.shape)} vs {tuple(f_vi.shape)}")
    thermal = _as_thermal(mask, f_ir)
    if thermal.shape[-2:] != f_ir.shape[-2:]:
        raise SizeError(f"mask {tuple(thermal.shape)} vs features {tuple(f_ir.shape)}")
    s_w = torch.sigmoid(torch.as_tensor(omega, dtype=f_ir.dtype))
    s_g = torch.sigmoid(torch.as_tensor(gamma, dtype=f_ir.dtype))
    hot = s_w * f_ir + (1 - s_w) * f_vi
    cold = (1 - s_g) * f_ir + s_g * f_vi
    return torch.where(thermal, hot, cold)


@dataclass
class GeoLossRecord:
    ssim_term: object
    mse_vis_term: object
    mse_ir_term: object
    total: object
    mu: float
    rho: float
    eta: float

    def item(self) -> "GeoLossRecord":
        f = lambda v: float(v.item()) if torch.is_tensor(v) else float(v)  # noqa: E731
        return GeoLossRecord(f(self.ssim_term), f(self.mse_vis_term), f(self.mse_ir_term),
                             f(self.total), self.mu, self.rho, self.eta)

    def check(self, rtol: float = 1e-5) -> None:
        r = self.item()
        expect = r.mu * r.ssim_term + r.rho * r.mse_vis_term + r.eta * r.mse_ir_term
        if abs(r.total - expect) > rtol * max(1.0, abs(expect)):
            raise AssertionError(f"L_geo total {r.total} != composed {expect}")

    def as_dict(self) -> dict:
        return asdict(self.item())


def loss_geo(fused, vis_y, ir, mu: float = 100.0, rho: float = 50.0, eta: float = 40.0) -> GeoLossRecord:
    """mu * (1 - SSIM(I_f, Y_vis)) + rho * MSE(I_f, Y_vis) + eta * MSE(I_f, I_ir); tensors (B, 1, H, W)."""
    if not (fused.shape == vis_y.shape == ir.shape):
        raise SizeError("fused, visible luminance and infrared shapes differ")
    ssim_term = 1 - ssim_tensor(fused, vis_y)
    mse_vis = ((fused - vis_y) ** 2).mean()
    mse_ir = ((fused - ir) ** 2).mean()
    total = mu * ssim_term + rho * mse_vis + eta * mse_ir
    return GeoLossRecord(ssim_term, mse_vis, mse_ir, total, mu, rho, eta)


# -- forward path ----------------------------------------------------------------------

@torch.no_grad()
def backbone(cgfe: CgfeModel, img_signed: torch.Tensor):
    """Frozen CGFE pass: raw class output of G and the five taps of F."""
    seg = cgfe.G(img_signed)
    _, taps = cgfe.F.forward_taps(seg)
    return seg, taps


def fused_luminance(fm: FusionModel, cgfe_ir: CgfeModel, cgfe_vi: CgfeModel,
                    ir_signed: torch.Tensor, vis_signed: torch.Tensor):
    """Return (I_f, thermal region, F_ref_ir, F_ref_vi) for a batch."""
    if cgfe_ir is None or cgfe_vi is None:
        raise ConfigError("fusion needs both CGFE backbones")
    size = tuple(ir_signed.shape[-2:])
    seg_ir, taps_ir = backbone(cgfe_ir, ir_signed)
    _, taps_vi = backbone(cgfe_vi, vis_signed)
    thermal = thermal_region(seg_ir, cgfe_ir.palette)
    f_ir = refine(fm, collect_features(taps_ir, size), "ir")
    f_vi = refine(fm, collect_features(taps_vi, size), "vis")
    fused = adaptive_fuse(f_ir, f_vi, thermal, fm.omega, fm.gamma)
    return fused, thermal, f_ir, f_vi


def _sources(ir_signed, vis_signed):
    return (ir_signed + 1) / 2, luminance((vis_signed + 1) / 2)


def fusion_step(fm, cgfe_ir, cgfe_vi, ir_signed, vis_signed, opt, cfg: RunConfig) -> GeoLossRecord:
    fused, _, _, _ = fused_luminance(fm, cgfe_ir, cgfe_vi, ir_signed, vis_signed)
    ir01, vis_y = _sources(ir_signed, vis_signed)
    rec = loss_geo(fused, vis_y, ir01, cfg.mu, cfg.rho, cfg.eta)
    opt.zero_grad(set_to_none=True)
    rec.total.backward()
    opt.step()
    rec.check()
    return rec.item()


def make_optimizer(fm: FusionModel, cfg: RunConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(fm.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                            weight_decay=cfg.weight_decay)


def freeze(*models: nn.Module) -> None:
    for m in models:
        for p in m.parameters():
            p.requires_grad_(False)


def train_step_fusion(fm: FusionModel, cgfe_ir: CgfeModel, cgfe_vi: CgfeModel,
                      batch: Sequence[ImagePair], opt, cfg: RunConfig) -> GeoLossRecord:
    """One update of the FRBs, projections, omega and gamma; the CGFEs stay fixed."""
    if cgfe_ir is None or cgfe_vi is None:
        raise ConfigError("fusion training needs both CGFE checkpoints")
    freeze(cgfe_ir, cgfe_vi)
    return fusion_step(fm, cgfe_ir, cgfe_vi, image_tensor(batch, "ir"), image_tensor(batch, "vis"),
                       opt, cfg)


def train_fusion(fm: FusionModel, cgfe_ir: CgfeModel, cgfe_vi: CgfeModel, pairs: Sequence[ImagePair],
                 cfg: RunConfig, opt, epochs: int, start_epoch: int = 0, on_epoch=None) -> list:
    freeze(cgfe_ir, cgfe_vi)
    irs, viss = image_tensor(pairs, "ir"), image_tensor(pairs, "vis")
    history = []
    for epoch in range(start_epoch, epochs):
        order = epoch_order(cfg.seed, epoch, len(pairs))
        recs = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            recs.append(fusion_step(fm, cgfe_ir, cgfe_vi, irs[idx], viss[idx], opt, cfg))
        row = {"epoch": epoch}
        for k in ("ssim_term", "mse_vis_term", "mse_ir_term", "total"):
            row[k] = float(np.mean([getattr(r, k) for r in recs]))
        row["sigma_omega"] = float(torch.sigmoid(fm.omega.detach()))
        row["sigma_gamma"] = float(torch.sigmoid(fm.gamma.detach()))
        history.append(row)
        if on_epoch is not None:
            on_epoch(epoch, row)
    return history


@torch.no_grad()
def fuse_pair(fm: FusionModel, cgfe_ir: CgfeModel, cgfe_vi: CgfeModel, pair: ImagePair,
              return_mask: bool = False):
    """Fuse one pair into an HxWx3 RGB image in [0, 1] (visible chroma, fused luma)."""
    ir = image_tensor([pair], "ir")
    vis = image_tensor([pair], "vis")
    fused, thermal, _, _ = fused_luminance(fm, cgfe_ir, cgfe_vi, ir, vis)
    y = fused[0, 0].clamp(0, 1).numpy().astype(np.float64)
    ycc = rgb_to_ycbcr(pair.vis.astype(np.float64))
    ycc[..., 0] = y
    rgb = np.clip(ycbcr_to_rgb(ycc), 0.0, 1.0)
    if return_mask:
        mask = ThermalMask(np.where(thermal[0, 0].numpy(), 0, 255).astype(np.uint8))
        return rgb, mask
    return rgb
