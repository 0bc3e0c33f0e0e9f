"""Global/local encoders, the two NS stages and the decoder.

The backbone is a plain four-stage conv stack standing in for a pretrained
ResNet-style encoder: stage 2 (stride 4) feeds the low-level branch and
stage 4 (stride 8) feeds a multi-branch dilated reduction head. Anchor and
window frames go through the same weights.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..nn import Conv2d, Linear, Module
from ..ns_block import NsWeights, ns_forward
from ..tensor import ShapeError, Tensor
from .config import PipelineConfig

act = T.silu


class Backbone(Module):
    def __init__(self, rng, widths):
        w0, w1, w2, w3 = widths
        self.stage1 = Conv2d(rng, 3, w0, 3, stride=2)
        self.stage2 = Conv2d(rng, w0, w1, 3, stride=2)
        self.stage3 = Conv2d(rng, w1, w2, 3, stride=2)
        self.stage4 = Conv2d(rng, w2, w3, 3)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x = act(self.stage1(x))
        low = act(self.stage2(x))
        x = act(self.stage3(low))
        high = act(self.stage4(x))
        return low, high


class ReductionHead(Module):
    """Four parallel branches with growing dilation, fused back to ``cout``."""

    def __init__(self, rng, cin: int, cout: int):
        mid = max(1, cout // 4)
        self.branches = [
            Conv2d(rng, cin, mid, 1),
            Conv2d(rng, cin, mid, 3, dilation=1),
            Conv2d(rng, cin, mid, 3, dilation=2),
            Conv2d(rng, cin, mid, 3, dilation=3),
        ]
        self.fuse = Conv2d(rng, 4 * mid, cout, 3)
        self.shortcut = Conv2d(rng, cin, cout, 1)

    def __call__(self, x: Tensor) -> Tensor:
        cat = T.concat([act(b(x)) for b in self.branches], axis=-1)
        return act(self.fuse(cat) + self.shortcut(x))


class Decoder(Module):
    def __init__(self, rng, low_channels: int, high_channels: int, mid: int):
        self.fuse1 = Conv2d(rng, low_channels + high_channels, mid, 3)
        self.fuse2 = Conv2d(rng, mid, mid, 3)
        self.head = Conv2d(rng, mid, 1, 1)

    def __call__(self, low: Tensor, deep: Tensor, out_hw: tuple[int, int]) -> Tensor:
        # exactly up2x when the input size divides by 8
        up = T.resize_bilinear(deep, low.shape[1], low.shape[2])
        x = T.concat([low, up], axis=-1)
        x = act(self.fuse1(x))
        x = act(self.fuse2(x))
        logit = T.resize_bilinear(self.head(x), *out_hw)
        return T.reshape(logit, logit.shape[:3])


class PNSPlus(Module):
    def __init__(self, cfg: PipelineConfig, seed: int | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        w = cfg.encoder_widths
        self.backbone = Backbone(rng, w)
        self.high_head = ReductionHead(rng, w[3], cfg.high_channels)
        self.low_head = Linear(rng, w[1], cfg.low_channels)
        self.ns_global = NsWeights(rng, cfg.global_ns)
        self.ns_local = NsWeights(rng, cfg.local_ns)
        self.decoder = Decoder(rng, cfg.low_channels, cfg.high_channels, cfg.decoder_channels)

    def _check_frames(self, frames: Tensor) -> None:
        if frames.ndim != 4 or frames.shape[1:] != (self.cfg.height, self.cfg.width, 3):
            raise ShapeError(f"frames must be [T, {self.cfg.height}, {self.cfg.width}, 3], got {frames.shape}")

    def encode_global(self, anchor: Tensor) -> Tensor:
        """Anchor feature ``[1, H/8, W/8, C_h]``."""
        if anchor.ndim == 3:
            anchor = T.reshape(anchor, (1,) + anchor.shape)
        self._check_frames(anchor)
        _, high = self.backbone(anchor)
        return self.high_head(high)

    def encode_local(self, frames: Tensor) -> tuple[Tensor, Tensor]:
        """Low ``[Δ, H/4, W/4, C_l]`` and high ``[Δ, H/8, W/8, C_h]`` features."""
        self._check_frames(frames)
        low, high = self.backbone(frames)
        return act(self.low_head(low)), self.high_head(high)

    def global_term(self, anchor_feat: Tensor, high: Tensor) -> Tensor:
        """The anchor-query NS output, broadcast over the window: ``[Δ, h, w, C]``."""
        y = ns_forward(anchor_feat, high, high, self.cfg.global_ns, self.ns_global)
        return T.broadcast_to(y, high.shape)

    def global_st_modeling(self, anchor_feat: Tensor, high: Tensor) -> Tensor:
        return self.global_term(anchor_feat, high) + high

    def global_to_local(self, z_g: Tensor, high: Tensor) -> Tensor:
        return ns_forward(z_g, z_g, z_g, self.cfg.local_ns, self.ns_local) + z_g + high

    def temporal_features(self, anchor_feat: Tensor, high: Tensor) -> Tensor:
        """Spatio-temporal feature handed to the decoder, per strategy."""
        s = self.cfg.strategy
        g_cfg, l_cfg = self.cfg.global_ns, self.cfg.local_ns
        if s == "none":
            return high
        if s == "G->L":
            return self.global_to_local(self.global_st_modeling(anchor_feat, high), high)
        if s == "L->L":
            z = ns_forward(high, high, high, g_cfg, self.ns_global) + high
            return self.global_to_local(z, high)
        if s == "G->G":
            z = self.global_st_modeling(anchor_feat, high)
            y = ns_forward(anchor_feat, z, z, l_cfg, self.ns_local)
            return T.broadcast_to(y, z.shape) + z + high
        # L->G: local block first, anchor-query block second
        z = ns_forward(high, high, high, l_cfg, self.ns_local) + high
        y = ns_forward(anchor_feat, z, z, g_cfg, self.ns_global)
        return T.broadcast_to(y, z.shape) + z + high

    def decode(self, low: Tensor, deep: Tensor) -> Tensor:
        return self.decoder(low, deep, (self.cfg.height, self.cfg.width))

    def __call__(self, anchor: Tensor, frames: Tensor) -> Tensor:
        """Logits ``[Δ, H, W]`` for the window ``frames`` given the clip anchor."""
        a = self.encode_global(anchor)
        low, high = self.encode_local(frames)
        return self.decode(low, self.temporal_features(a, high))
