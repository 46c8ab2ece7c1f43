"""Network builders: U-net and ResNet generators, pixel and patch discriminators, FRB.

Every network is an ``nn.Module`` that also knows its own shape trace, so sizes
can be validated before any convolution runs. Tensors are (B, C, H, W).
"""

from __future__ import annotations

from collections import namedtuple

import torch
import torch.nn as nn
from torch.func import functional_call

from .errors import ConfigError, SizeError

TapOutput = namedtuple("TapOutput", ["name", "value"])

RESNET_TAPS = ("tap1", "tap2", "tap3", "tap4", "tap5")


def init_weights(net: nn.Module, gain: float = 0.02) -> nn.Module:
    """Normal(0, 0.02) conv weights and zero biases, the usual GAN initialisation."""
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return net


def _norm(ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch, affine=False, track_running_stats=False)


class Graph(nn.Module):
    """Base for the builders below: a shape trace plus optional named taps."""

    taps: tuple = ()

    def trace(self, h: int, w: int) -> dict:
        raise NotImplementedError

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise SizeError(f"expected (B, {self.in_ch}, H, W) input, got {tuple(x.shape)}")
        self.trace(x.shape[-2], x.shape[-1])

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward_taps(self, x):
        return self(x), []


# -- U-net segmentation generator --------------------------------------------

class _UnetLevel(nn.Module):
    """One encoder/decoder level wrapping the levels beneath it (pix2pix layout)."""

    def __init__(self, outer: int, inner: int, in_ch: int | None = None, out_ch: int | None = None,
                 sub: nn.Module | None = None, outermost=False, innermost=False):
        super().__init__()
        self.outermost = outermost
        in_ch = outer if in_ch is None else in_ch
        out_ch = outer if out_ch is None else out_ch
        down = nn.Conv2d(in_ch, inner, 4, stride=2, padding=1)
        if outermost and sub is None:
            up = nn.ConvTranspose2d(inner, out_ch, 4, stride=2, padding=1)
            layers = [down, nn.ReLU(), up, nn.Tanh()]
        elif outermost:
            up = nn.ConvTranspose2d(inner * 2, out_ch, 4, stride=2, padding=1)
            layers = [down, sub, nn.ReLU(), up, nn.Tanh()]
        elif innermost:
            up = nn.ConvTranspose2d(inner, out_ch, 4, stride=2, padding=1)
            layers = [nn.LeakyReLU(0.2), down, nn.ReLU(), up, _norm(out_ch)]
        else:
            up = nn.ConvTranspose2d(inner * 2, out_ch, 4, stride=2, padding=1)
            layers = [nn.LeakyReLU(0.2), down, _norm(inner), sub,
                      nn.ReLU(), up, _norm(out_ch)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        y = self.model(x)
        return y if self.outermost else torch.cat([x, y], 1)


class UnetGenerator(Graph):
    def __init__(self, in_ch: int, out_ch: int, depth: int = 7, base_ch: int = 64):
        super().__init__()
        if depth < 1:
            raise ConfigError("U-net depth must be >= 1")
        self.in_ch, self.out_ch, self.depth, self.base_ch = in_ch, out_ch, depth, base_ch
        # encoder widths: base, 2base, 4base, 8base, 8base, ... (capped at 8 * base)
        widths = [min(base_ch * 2 ** i, base_ch * 8) for i in range(depth)]
        block = None
        if depth > 1:
            block = _UnetLevel(widths[-2], widths[-1], innermost=True)
            for i in range(depth - 2, 0, -1):
                block = _UnetLevel(widths[i - 1], widths[i], sub=block)
        self.model = _UnetLevel(out_ch, widths[0], in_ch=in_ch, out_ch=out_ch,
                                sub=block, outermost=True)
        self.widths = widths

    def trace(self, h, w):
        stride = 2 ** self.depth
        if h % stride or w % stride:
            raise SizeError(f"input {h}x{w} not divisible by 2^{self.depth} = {stride}")
        out = {}
        for i, c in enumerate(self.widths):
            out[f"down{i + 1}"] = (c, h >> (i + 1), w >> (i + 1))
        out["bottleneck"] = out[f"down{self.depth}"]
        out["output"] = (self.out_ch, h, w)
        return out

    def forward(self, x):
        self.check_input(x)
        return self.model(x)


def build_unet_G(in_ch: int, out_ch: int, depth: int = 7, base_ch: int = 64) -> UnetGenerator:
    return init_weights(UnetGenerator(in_ch, out_ch, depth, base_ch))


# -- ResNet reconstruction generator ------------------------------------------

class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.branch = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(ch),
        )

    def forward(self, x):
        return x + self.branch(x)


class ResnetGenerator(Graph):
    """Stem, two stride-2 downs, residual stack, two stride-2 ups, tanh projection.

    Taps are the outputs of the two downs, the residual stack and the two ups.
    """

    taps = RESNET_TAPS

    def __init__(self, in_ch: int, out_ch: int, n_blocks: int = 7, base_ch: int = 64):
        super().__init__()
        self.in_ch, self.out_ch, self.n_blocks, self.base_ch = in_ch, out_ch, n_blocks, base_ch
        b = base_ch
        self.stem = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(in_ch, b, 7), _norm(b), nn.ReLU(True))
        self.down1 = nn.Sequential(nn.Conv2d(b, 2 * b, 3, stride=2, padding=1), _norm(2 * b), nn.ReLU(True))
        self.down2 = nn.Sequential(nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1), _norm(4 * b), nn.ReLU(True))
        self.blocks = nn.Sequential(*[ResBlock(4 * b) for _ in range(n_blocks)])
        self.up1 = nn.Sequential(nn.ConvTranspose2d(4 * b, 2 * b, 3, stride=2, padding=1, output_padding=1),
                                 _norm(2 * b), nn.ReLU(True))
        self.up2 = nn.Sequential(nn.ConvTranspose2d(2 * b, b, 3, stride=2, padding=1, output_padding=1),
                                 _norm(b), nn.ReLU(True))
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(b, out_ch, 7), nn.Tanh())

    def trace(self, h, w):
        if h % 4 or w % 4:
            raise SizeError(f"input {h}x{w} not divisible by 4")
        if min(h, w) < 4:
            raise SizeError("input too small for the reflection padding")
        b = self.base_ch
        return {
            "tap1": (2 * b, h // 2, w // 2),
            "tap2": (4 * b, h // 4, w // 4),
            "tap3": (4 * b, h // 4, w // 4),
            "tap4": (2 * b, h // 2, w // 2),
            "tap5": (b, h, w),
            "output": (self.out_ch, h, w),
        }

    def tap_channels(self) -> int:
        b = self.base_ch
        return 2 * (2 * b) + 2 * (4 * b) + b

    def forward_taps(self, x):
        self.check_input(x)
        t1 = self.down1(self.stem(x))
        t2 = self.down2(t1)
        t3 = self.blocks(t2)
        t4 = self.up1(t3)
        t5 = self.up2(t4)
        out = self.head(t5)
        return out, [TapOutput(n, v) for n, v in zip(RESNET_TAPS, (t1, t2, t3, t4, t5))]

    def forward(self, x):
        return self.forward_taps(x)[0]

    def zero_residual_branches(self) -> None:
        """Zero the last conv of every residual branch, making the stack an identity."""
        with torch.no_grad():
            for blk in self.blocks:
                conv = blk.branch[5]
                conv.weight.zero_()
                conv.bias.zero_()


def build_resnet_F(in_ch: int, out_ch: int, n_blocks: int = 7, base_ch: int = 64) -> ResnetGenerator:
    return init_weights(ResnetGenerator(in_ch, out_ch, n_blocks, base_ch))


# -- discriminators -------------------------------------------------------------

class PixelDiscriminator(Graph):
    """1x1 convolutions only: a per-pixel realness score with no down-sampling."""

    def __init__(self, in_ch: int, base_ch: int = 64):
        super().__init__()
        self.in_ch, self.base_ch = in_ch, base_ch
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, base_ch, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(base_ch, 2 * base_ch, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(2 * base_ch, 1, 1),
        )

    def trace(self, h, w):
        return {"output": (1, h, w)}

    def forward(self, x):
        self.check_input(x)
        return self.net(x)


def build_pixel_D(in_ch: int, base_ch: int = 64) -> PixelDiscriminator:
    return init_weights(PixelDiscriminator(in_ch, base_ch))


def _conv4(size: int, stride: int) -> int:
    return (size + 2 - 4) // stride + 1


class NLayerDiscriminator(Graph):
    """PatchGAN: 4x4 kernels, ``n_layers`` stride-2 stages then two stride-1 stages."""

    def __init__(self, in_ch: int, n_layers: int = 3, base_ch: int = 64):
        super().__init__()
        if n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        self.in_ch, self.n_layers, self.base_ch = in_ch, n_layers, base_ch
        layers = [nn.Conv2d(in_ch, base_ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        ch = base_ch
        for i in range(1, n_layers):
            nxt = min(base_ch * 2 ** i, base_ch * 8)
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1), _norm(nxt), nn.LeakyReLU(0.2, True)]
            ch = nxt
        nxt = min(base_ch * 2 ** n_layers, base_ch * 8)
        layers += [nn.Conv2d(ch, nxt, 4, stride=1, padding=1), _norm(nxt), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(nxt, 1, 4, stride=1, padding=1)]
        self.net = nn.Sequential(*layers)

    def trace(self, h, w):
        out = {}
        for i in range(self.n_layers):
            h, w = _conv4(h, 2), _conv4(w, 2)
            out[f"stage{i + 1}"] = (h, w)
        h, w = _conv4(h, 1), _conv4(w, 1)
        # instance norm needs more than one spatial element
        if h * w < 2:
            raise SizeError("input too small for the patch discriminator's receptive field")
        h, w = _conv4(h, 1), _conv4(w, 1)
        if h < 1 or w < 1:
            raise SizeError("input too small for the patch discriminator's receptive field")
        out["output"] = (1, h, w)
        return out

    def forward(self, x):
        self.check_input(x)
        return self.net(x)


def build_nlayer_D(in_ch: int, n_layers: int = 3, base_ch: int = 64) -> NLayerDiscriminator:
    return init_weights(NLayerDiscriminator(in_ch, n_layers, base_ch))


# -- feature refinement -----------------------------------------------------------

class FRB(Graph):
    """Channel reduction by ``reduction`` followed by one residual block at that width."""

    def __init__(self, in_ch: int, reduction: int = 64):
        super().__init__()
        if reduction < 1 or in_ch % reduction:
            raise ConfigError(f"FRB input width {in_ch} not divisible by {reduction}")
        self.in_ch, self.reduction = in_ch, reduction
        self.width = in_ch // reduction
        self.reduce = nn.Sequential(nn.Conv2d(in_ch, self.width, 1), nn.LeakyReLU(0.2, True))
        self.branch = nn.Sequential(
            nn.Conv2d(self.width, self.width, 3, padding=1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(self.width, self.width, 3, padding=1),
        )

    def trace(self, h, w):
        return {"reduced": (self.width, h, w), "output": (self.width, h, w)}

    def forward(self, x):
        self.check_input(x)
        y = self.reduce(x)
        return y + self.branch(y)


def build_frb(in_ch: int, reduction: int = 64) -> FRB:
    return FRB(in_ch, reduction)


# -- functional entry point -----------------------------------------------------

class _WithTaps(nn.Module):
    def __init__(self, graph: Graph):
        super().__init__()
        self.g = graph

    def forward(self, x):
        return self.g.forward_taps(x)


def forward(graph: Graph, x: torch.Tensor, params: dict | None = None, want_taps: bool = False):
    """Run ``graph`` on ``x``, optionally with an explicit parameter dict.

    ``params`` maps ``graph.named_parameters()`` names to tensors; missing names
    fall back to the graph's own parameters. Returns ``(output, taps)`` where
    ``taps`` is a list of ``TapOutput`` and empty unless ``want_taps``.
    """
    if params is None:
        out, taps = graph.forward_taps(x)
    else:
        out, taps = functional_call(_WithTaps(graph), {f"g.{k}": v for k, v in params.items()},
                                    (x,), strict=False)
    return out, (list(taps) if want_taps else [])
