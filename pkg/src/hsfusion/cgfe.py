"""Semantic reinforce stage: one CycleGAN feature extractor per modality.

G maps an image to n class channels, F maps class channels back to the image,
D_x judges images pixel by pixel and D_y judges class maps patch by patch. The
generator objective is ``l_cg + lambda * l_sere + l_str``; discriminators use the
least-squares GAN objective.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .datamodel import FMB_PALETTE, ImagePair, LabelPalette, SegMap, to_signed
from .errors import ConfigError, SizeError
from .metrics import ssim_tensor
from .netblocks import TapOutput, build_nlayer_D, build_pixel_D, build_resnet_F, build_unet_G

MODALITIES = ("ir", "vis")
PROB_EPS = 1e-6
SOBEL_EPS = 1e-12


def image_channels(modality: str) -> int:
    if modality not in MODALITIES:
        raise ConfigError(f"modality must be one of {MODALITIES}, got {modality!r}")
    return 1 if modality == "ir" else 3


class CgfeModel(nn.Module):
    def __init__(self, modality: str, palette: LabelPalette = FMB_PALETTE, base_ch: int = 64,
                 unet_depth: int = 7, n_blocks: int = 7, d_layers: int = 3):
        super().__init__()
        img_ch = image_channels(modality)
        n = palette.n
        self.modality, self.palette = modality, palette
        self.arch = dict(base_ch=base_ch, unet_depth=unet_depth, n_blocks=n_blocks, d_layers=d_layers)
        self.G = build_unet_G(img_ch, n, unet_depth, base_ch)
        self.F = build_resnet_F(n, img_ch, n_blocks, base_ch)
        self.Dx = build_pixel_D(img_ch, base_ch)
        self.Dy = build_nlayer_D(n, d_layers, base_ch)

    @classmethod
    def from_config(cls, cfg: RunConfig, modality: str, palette: LabelPalette = FMB_PALETTE) -> "CgfeModel":
        return cls(modality, palette, cfg.base_ch, cfg.unet_depth, cfg.n_blocks, cfg.d_layers)

    @property
    def img_ch(self) -> int:
        return image_channels(self.modality)

    def generators(self):
        return list(self.G.parameters()) + list(self.F.parameters())


# -- tensor plumbing ------------------------------------------------------------

def image_tensor(pairs: Sequence[ImagePair], modality: str) -> torch.Tensor:
    """Stack the modality's images as a signed (B, C, H, W) float32 tensor."""
    key = "ir" if image_channels(modality) == 1 else "vis"
    arr = np.stack([getattr(p, key) for p in pairs]).transpose(0, 3, 1, 2)
    return to_signed(torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)))


def label_tensor(pairs: Sequence[ImagePair]) -> torch.Tensor:
    missing = [p.id for p in pairs if p.label is None]
    if missing:
        raise ConfigError(f"semantic reinforce stage needs labels; missing for {missing[:3]}")
    return torch.from_numpy(np.stack([p.label for p in pairs]).astype(np.int64))


def onehot_signed(label: torch.Tensor, n: int) -> torch.Tensor:
    """(B, H, W) labels -> (B, n, H, W) one-hot in {-1, 1}."""
    return F.one_hot(label, n).permute(0, 3, 1, 2).to(torch.float32) * 2 - 1


def seg_probs(g_out: torch.Tensor) -> torch.Tensor:
    """Map G's [-1, 1] output to [0, 1] and normalise over the class axis."""
    s = (g_out + 1) / 2 + PROB_EPS
    return s / s.sum(dim=1, keepdim=True)


def _to_hwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(1, 2, 0)


def _from_hwc(a) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(a, dtype=np.float32).transpose(2, 0, 1)))[None]


# -- inference --------------------------------------------------------------------

@torch.no_grad()
def segment(m: CgfeModel, img) -> SegMap:
    """Segment one signed HxWxC image. Scores are G's output mapped to [0, 1]."""
    x = _from_hwc(img) if not torch.is_tensor(img) else img
    g = m.G(x)
    return SegMap(scores=_to_hwc((g[0] + 1) / 2), normalized=False)


@torch.no_grad()
def reconstruct(m: CgfeModel, seg: SegMap):
    """Run F on a SegMap; returns the signed HxWxC image and the five HxWxc taps."""
    if seg.n != m.palette.n:
        raise SizeError(f"SegMap has {seg.n} channels, model expects {m.palette.n}")
    x = _from_hwc(seg.scores) * 2 - 1
    out, taps = m.F.forward_taps(x)
    return _to_hwc(out[0]), [TapOutput(t.name, _to_hwc(t.value[0])) for t in taps]


# -- losses -------------------------------------------------------------------------

def _lsgan(pred: torch.Tensor, target: float) -> torch.Tensor:
    return ((pred - target) ** 2).mean()


def cg_terms(m: CgfeModel, img, seg, rec, label_signed=None, cycle_weight: float = 10.0,
             reverse_cycle: bool = False) -> dict:
    """CycleGAN generator terms from precomputed ``seg = G(img)`` and ``rec = F(seg)``."""
    adv_g = _lsgan(m.Dy(seg), 1.0)
    adv_f = _lsgan(m.Dx(rec), 1.0)
    cycle = cycle_weight * (rec - img).abs().mean()
    total = adv_g + adv_f + cycle
    terms = dict(adv_g=adv_g, adv_f=adv_f, cycle=cycle)
    if reverse_cycle:
        if label_signed is None:
            raise ConfigError("reverse cycle needs the one-hot label map")
        back = m.G(m.F(label_signed))
        terms["cycle_rev"] = cycle_weight * (back - label_signed).abs().mean()
        total = total + terms["cycle_rev"]
    terms["total"] = total
    return terms


def loss_cg(m: CgfeModel, img: torch.Tensor, label_signed: torch.Tensor | None = None,
            cycle_weight: float = 10.0, reverse_cycle: bool = False) -> dict:
    seg = m.G(img)
    rec = m.F(seg)
    return cg_terms(m, img, seg, rec, label_signed, cycle_weight, reverse_cycle)


def loss_sere(probs, label, thresh: float = 0.7, min_divisor: int = 16) -> torch.Tensor:
    """Online hard example mining cross-entropy.

    Keeps every pixel whose correct-class probability is below ``thresh``; if that
    leaves fewer than ``numel // min_divisor`` pixels, keeps that many largest losses.
    ``probs`` is (B, n, H, W) or a SegMap; ``label`` matches its spatial shape.
    """
    if isinstance(probs, SegMap):
        probs = torch.from_numpy(np.ascontiguousarray(probs.probs().transpose(2, 0, 1)))[None]
    label = torch.as_tensor(label)
    if label.ndim == 2:
        label = label[None]
    p_true = probs.gather(1, label[:, None].long()).flatten()
    loss = -torch.log(p_true.clamp_min(1e-12))
    n_min = max(1, p_true.numel() // min_divisor)
    hard = loss[p_true < thresh]
    if hard.numel() < n_min:
        hard = torch.topk(loss, n_min, sorted=False).values
    return hard.mean()


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel(x: torch.Tensor) -> torch.Tensor:
    """Per-channel 3x3 Sobel gradient magnitude with replicated borders."""
    c = x.shape[1]
    kx = _SOBEL_X.to(x.dtype).expand(c, 1, 3, 3)
    ky = _SOBEL_X.t().to(x.dtype).expand(c, 1, 3, 3)
    xp = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(xp, kx, groups=c)
    gy = F.conv2d(xp, ky, groups=c)
    return torch.sqrt(gx * gx + gy * gy + SOBEL_EPS)


def loss_str(img_hat: torch.Tensor, img: torch.Tensor) -> dict:
    """(1 - SSIM) + L1 between Sobel magnitudes, both measured in [0, 1] units."""
    a, b = (img_hat + 1) / 2, (img + 1) / 2
    ssim_term = 1 - ssim_tensor(a, b)
    sobel_term = (sobel(a) - sobel(b)).abs().mean()
    return dict(ssim=ssim_term, sobel=sobel_term, total=ssim_term + sobel_term)


def d_losses(m: CgfeModel, img, label_signed, seg, rec):
    loss_dy = 0.5 * (_lsgan(m.Dy(label_signed), 1.0) + _lsgan(m.Dy(seg.detach()), 0.0))
    loss_dx = 0.5 * (_lsgan(m.Dx(img), 1.0) + _lsgan(m.Dx(rec.detach()), 0.0))
    return loss_dx, loss_dy


def loss_D(m: CgfeModel, img: torch.Tensor, label_signed: torch.Tensor):
    """Least-squares losses ``(loss_Dx, loss_Dy)``: real -> 1, generated -> 0."""
    with torch.no_grad():
        seg = m.G(img)
        rec = m.F(seg)
    return d_losses(m, img, label_signed, seg, rec)


# -- training -------------------------------------------------------------------------

@dataclass
class SrLossRecord:
    adv_g: float
    adv_f: float
    cycle: float
    l_cg: float
    l_sere: float
    ssim: float
    sobel: float
    l_str: float
    total: float
    lam: float
    loss_dx: float = float("nan")
    loss_dy: float = float("nan")

    def check(self, rtol: float = 1e-5) -> None:
        expect = self.l_cg + self.lam * self.l_sere + self.l_str
        if abs(self.total - expect) > rtol * max(1.0, abs(expect)):
            raise AssertionError(f"L_sr total {self.total} != composed {expect}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class CgfeOptimizers:
    G: torch.optim.Optimizer
    F: torch.optim.Optimizer
    Dx: torch.optim.Optimizer
    Dy: torch.optim.Optimizer

    def all(self) -> dict:
        return {"G": self.G, "F": self.F, "Dx": self.Dx, "Dy": self.Dy}


def make_optimizers(m: CgfeModel, cfg: RunConfig) -> CgfeOptimizers:
    def adam(net):
        return torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                                weight_decay=cfg.weight_decay)

    return CgfeOptimizers(G=adam(m.G), F=adam(m.F), Dx=adam(m.Dx), Dy=adam(m.Dy))


def _requires_grad(nets, flag: bool) -> None:
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


def sr_step(m: CgfeModel, img: torch.Tensor, label: torch.Tensor, opts: CgfeOptimizers,
            cfg: RunConfig) -> SrLossRecord:
    """One generator update on L_sr followed by one discriminator update."""
    label_signed = onehot_signed(label, m.palette.n)

    _requires_grad((m.Dx, m.Dy), False)
    seg = m.G(img)
    rec = m.F(seg)
    cg = cg_terms(m, img, seg, rec, label_signed, cfg.cycle_weight, cfg.reverse_cycle)
    sere = loss_sere(seg_probs(seg), label, cfg.ohem_thresh, cfg.ohem_min_divisor)
    st = loss_str(rec, img)
    total = cg["total"] + cfg.lambda_sere * sere + st["total"]
    opts.G.zero_grad(set_to_none=True)
    opts.F.zero_grad(set_to_none=True)
    total.backward()
    opts.G.step()
    opts.F.step()

    _requires_grad((m.Dx, m.Dy), True)
    loss_dx, loss_dy = d_losses(m, img, label_signed, seg, rec)
    opts.Dx.zero_grad(set_to_none=True)
    opts.Dy.zero_grad(set_to_none=True)
    (loss_dx + loss_dy).backward()
    opts.Dx.step()
    opts.Dy.step()

    rec_ = SrLossRecord(
        adv_g=cg["adv_g"].item(), adv_f=cg["adv_f"].item(), cycle=cg["cycle"].item(),
        l_cg=cg["total"].item(), l_sere=sere.item(), ssim=st["ssim"].item(),
        sobel=st["sobel"].item(), l_str=st["total"].item(), total=total.item(),
        lam=cfg.lambda_sere, loss_dx=loss_dx.item(), loss_dy=loss_dy.item(),
    )
    rec_.check()
    return rec_


def train_step_cgfe(m: CgfeModel, batch: Sequence[ImagePair], opts: CgfeOptimizers,
                    cfg: RunConfig) -> SrLossRecord:
    return sr_step(m, image_tensor(batch, m.modality), label_tensor(batch), opts, cfg)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Sample order for one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def _apply_lr(opts, cfg: RunConfig, epoch: int, total_epochs: int) -> None:
    if not cfg.lr_linear_decay:
        return
    half = total_epochs // 2
    scale = 1.0 if epoch < half else 1.0 - (epoch - half) / max(1, total_epochs - half)
    for opt in opts:
        for group in opt.param_groups:
            group["lr"] = cfg.lr * scale


def augment(x: torch.Tensor, y: torch.Tensor | None, cfg: RunConfig, seed: int, epoch: int, idx):
    """Seeded horizontal flips; identity unless ``cfg.hflip``."""
    if not cfg.hflip:
        return x, y
    flips = np.random.default_rng([seed, epoch, 1]).random(len(idx)) < 0.5
    mask = torch.from_numpy(flips)
    x = torch.where(mask[:, None, None, None], x.flip(-1), x)
    if y is not None:
        y = torch.where(mask[:, None, None], y.flip(-1), y)
    return x, y


def train_cgfe(m: CgfeModel, pairs: Sequence[ImagePair], cfg: RunConfig, opts: CgfeOptimizers,
               epochs: int, start_epoch: int = 0, on_epoch=None) -> list:
    """Train for epochs ``start_epoch .. epochs - 1``; returns per-epoch mean records."""
    images = image_tensor(pairs, m.modality)
    labels = label_tensor(pairs)
    history = []
    for epoch in range(start_epoch, epochs):
        _apply_lr(opts.all().values(), cfg, epoch, epochs)
        order = epoch_order(cfg.seed, epoch, len(pairs))
        recs = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x, y = augment(images[idx], labels[idx], cfg, cfg.seed, epoch, idx)
            recs.append(sr_step(m, x, y, opts, cfg))
        mean = {k: float(np.mean([getattr(r, k) for r in recs])) for k in recs[0].as_dict()}
        row = {"epoch": epoch, **mean}
        history.append(row)
        if on_epoch is not None:
            on_epoch(epoch, row)
    return history


# -- evaluation helpers --------------------------------------------------------------

@torch.no_grad()
def predict_labels(m: CgfeModel, pairs: Sequence[ImagePair], batch: int = 4) -> np.ndarray:
    images = image_tensor(pairs, m.modality)
    out = []
    for i in range(0, len(images), batch):
        # argmax of the normalised scores equals argmax of G's raw output
        out.append(torch.argmax(m.G(images[i:i + batch]), dim=1))
    return torch.cat(out).numpy()


@torch.no_grad()
def cycle_l1(m: CgfeModel, pairs: Sequence[ImagePair], batch: int = 4) -> float:
    """Mean |F(G(x)) - x| in [0, 1] intensity units."""
    images = image_tensor(pairs, m.modality)
    total, count = 0.0, 0
    for i in range(0, len(images), batch):
        x = images[i:i + batch]
        rec = m.F(m.G(x))
        total += float(((rec - x).abs() / 2).sum())
        count += x.numel()
    return total / count


def param_digest(m: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(m.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
