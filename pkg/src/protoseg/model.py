"""Encoder-decoder segmentation network with multi-stage feature fusion,
a 128-d projection head and a linear prototype classifier."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class NetworkOutputs:
    logits: torch.Tensor          # (B, C, H, W)
    probs: torch.Tensor           # softmax of logits
    fused_features: torch.Tensor  # (B, F, H/4, W/4) for the default depth
    projected: torch.Tensor       # (B, 128, H/4, W/4)


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    groups = math.gcd(8, out_ch)
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.GroupNorm(groups, out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.GroupNorm(groups, out_ch),
        nn.ReLU(inplace=True),
    )


class SegmentationNet(nn.Module):
    """U-Net style network.  len(widths) encoder stages; stage i runs at
    resolution H / 2**(i-1).  The middle stages are resampled to a common
    resolution, concatenated, adapted to `fused_channels` and projected to
    `proj_dim` channels with 1x1 convolutions."""

    def __init__(self, in_channels: int = 1, num_classes: int = 2,
                 widths: tuple[int, ...] = (16, 32, 64, 64, 64),
                 fused_channels: int = 256, proj_dim: int = 128):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("need at least two encoder stages")
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.proj_dim = proj_dim
        self.stride = 2 ** (len(widths) - 1)

        self.encoders = nn.ModuleList()
        prev = in_channels
        for w in widths:
            self.encoders.append(_conv_block(prev, w))
            prev = w
        self.pool = nn.MaxPool2d(2)

        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in range(len(widths) - 1, 0, -1):
            self.upsamplers.append(nn.ConvTranspose2d(widths[i], widths[i - 1], 2, stride=2))
            self.decoders.append(_conv_block(widths[i - 1] * 2, widths[i - 1]))
        self.head = nn.Conv2d(widths[0], num_classes, 1)

        # middle-stage fusion: stages 2 .. n-1 (1-based), resampled to the
        # resolution of the middle of that range
        n = len(widths)
        self.fuse_stages = tuple(range(2, n)) if n > 2 else (2,)
        self.fuse_target = self.fuse_stages[(len(self.fuse_stages) - 1) // 2]
        fuse_in = sum(widths[s - 1] for s in self.fuse_stages)
        self.fuse_adapter = nn.Conv2d(fuse_in, fused_channels, 1)
        self.projector = nn.Conv2d(fused_channels, proj_dim, 1)
        self.proto_head = nn.Linear(proj_dim, num_classes)

    @property
    def feature_stride(self) -> int:
        """Spatial downsampling factor between the input and the projected
        feature map."""
        return 2 ** (self.fuse_target - 1)

    def forward(self, x: torch.Tensor) -> NetworkOutputs:
        if x.dim() != 4:
            raise ValueError("expected input of shape (B, C, H, W)")
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"spatial size must be divisible by {self.stride}, got {h}x{w}")

        skips = []
        out = x
        for i, enc in enumerate(self.encoders):
            if i > 0:
                out = self.pool(out)
            out = enc(out)
            skips.append(out)

        dec = skips[-1]
        for up, block, skip in zip(self.upsamplers, self.decoders, reversed(skips[:-1])):
            dec = block(torch.cat([up(dec), skip], dim=1))
        logits = self.head(dec)
        probs = F.softmax(logits, dim=1)

        target_hw = skips[self.fuse_target - 1].shape[-2:]
        pieces = [
            F.interpolate(skips[s - 1], size=target_hw, mode="bilinear", align_corners=False)
            if skips[s - 1].shape[-2:] != target_hw else skips[s - 1]
            for s in self.fuse_stages
        ]
        fused = self.fuse_adapter(torch.cat(pieces, dim=1))
        projected = self.projector(fused)
        return NetworkOutputs(logits=logits, probs=probs,
                              fused_features=fused, projected=projected)

    def prototype_classifier(self, p: torch.Tensor) -> torch.Tensor:
        """Map a (D,) or (N, D) prototype vector to class probabilities."""
        logits = self.proto_head(p)
        return F.softmax(logits, dim=-1)


def ema_update_weights(student: nn.Module, teacher: nn.Module, decay: float) -> None:
    """In-place EMA of teacher parameters and buffers toward the student."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must be in [0, 1), got {decay}")
    s_params = dict(student.named_parameters())
    t_params = dict(teacher.named_parameters())
    if s_params.keys() != t_params.keys():
        raise ValueError("student and teacher parameter sets differ")
    with torch.no_grad():
        for name, tp in t_params.items():
            sp = s_params[name]
            if tp.shape != sp.shape:
                raise ValueError(f"shape mismatch on {name}")
            tp.mul_(decay).add_(sp, alpha=1.0 - decay)
        for tb, sb in zip(teacher.buffers(), student.buffers()):
            tb.copy_(sb)
