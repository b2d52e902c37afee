import logging
import math
from typing import List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from models.exceptions import PreconditionError, ShapeError
from models.schemas import FusionMode, NetConfig

logger = logging.getLogger(__name__)

PRELU_INIT = 0.25


class FeaturePyramid(NamedTuple):
    f1: torch.Tensor  # N x C x H x W
    f2: torch.Tensor  # N x C x H/2 x W/2
    f3: torch.Tensor  # N x C x H/4 x W/4
    modality: str


class AttentionPair(NamedTuple):
    cm_ir: torch.Tensor   # N x C x 1 x 1
    cm_vis: torch.Tensor
    sm_ir: torch.Tensor   # N x C x H x W
    sm_vis: torch.Tensor


class FusedSet(NamedTuple):
    m1: torch.Tensor
    m2: torch.Tensor
    m3: torch.Tensor
    m4: torch.Tensor
    m5: torch.Tensor


class NetOutput(NamedTuple):
    fused: torch.Tensor                      # N x 1 x H x W in [0, 1]
    fused_set: FusedSet
    pyramid_ir: FeaturePyramid
    pyramid_vis: FeaturePyramid
    attention: List[Optional[AttentionPair]]
    ir_inputs: List[torch.Tensor]            # infrared map each block consumed, at block resolution
    vis_inputs: List[torch.Tensor]


def conv3x3(in_channels: int, out_channels: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1)


class Stem(nn.Module):
    """Single 3x3 conv + PReLU lifting a gray image to C channels"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = conv3x3(1, channels)
        self.act = nn.PReLU(channels, init=PRELU_INIT)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(x))


class ResidualStream(nn.Module):
    """
    [3x3 conv (stride s) -> PReLU -> 3x3 conv -> PReLU] + shortcut

    The shortcut is the identity when shapes match, a strided 1x1 conv
    otherwise.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            conv3x3(in_channels, out_channels, stride),
            nn.PReLU(out_channels, init=PRELU_INIT),
            conv3x3(out_channels, out_channels),
            nn.PReLU(out_channels, init=PRELU_INIT),
        )
        if stride == 1 and in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x) + self.shortcut(x)


class DownsamplePyramid(nn.Module):
    """Three parallel residual streams with strides 1, 2 and 4"""

    def __init__(self, channels: int):
        super().__init__()
        self.streams = nn.ModuleList([ResidualStream(channels, channels, s) for s in (1, 2, 4)])

    def forward(self, f: torch.Tensor, modality: str) -> FeaturePyramid:
        if f.shape[-2] % 4 or f.shape[-1] % 4:
            raise PreconditionError(f"Pyramid input {tuple(f.shape[-2:])} must be divisible by 4")
        f1, f2, f3 = (stream(f) for stream in self.streams)
        return FeaturePyramid(f1, f2, f3, modality)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = channels // reduction
        self.squeeze = nn.Linear(channels, hidden)
        self.head_ir = nn.Linear(hidden, channels)
        self.head_vis = nn.Linear(hidden, channels)

    @staticmethod
    def descriptor(f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
        """Shared GAP descriptor of the summed branches, N x C"""
        return (f_a + f_b).mean(dim=(-2, -1))

    def forward(self, f_a: torch.Tensor, f_b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        hidden = F.relu(self.squeeze(self.descriptor(f_a, f_b)))
        cm_a = torch.sigmoid(self.head_ir(hidden))[..., None, None]
        cm_b = torch.sigmoid(self.head_vis(hidden))[..., None, None]
        return cm_a, cm_b


class SpatialAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.reduce = conv3x3(2 * channels, channels)
        self.act = nn.PReLU(channels, init=PRELU_INIT)
        self.expand = conv3x3(channels, 2 * channels)

    def forward(self, f_a: torch.Tensor, f_b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        maps = torch.sigmoid(self.expand(self.act(self.reduce(torch.cat([f_a, f_b], dim=1)))))
        sm_a, sm_b = maps.chunk(2, dim=1)
        return sm_a, sm_b


class Upsample(nn.Module):
    """Bilinear x`scale` followed by a 3x3 conv"""

    def __init__(self, channels: int, scale: int = 2):
        super().__init__()
        self.scale = scale
        self.conv = conv3x3(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=self.scale, mode="bilinear", align_corners=False))


class DualAttentionFusion(nn.Module):
    """
    One fusion block

    In attention mode the block gates each branch with its channel and
    spatial maps and adds the two (`compose`). `sum` adds the raw branches,
    `concat` runs a 3x3 conv over their concatenation. A lower-resolution
    infrared input is upsampled to the visible resolution first.
    """

    def __init__(self, channels: int, reduction: int = 4, mode: FusionMode = FusionMode.attention, upsample_ir: bool = False):
        super().__init__()
        self.mode = FusionMode(mode)
        self.upsample = Upsample(channels) if upsample_ir else None
        if self.mode == FusionMode.attention:
            self.channel = ChannelAttention(channels, reduction)
            self.spatial = SpatialAttention(channels)
        elif self.mode == FusionMode.concat:
            self.merge = conv3x3(2 * channels, channels)

    def attend(self, f_ir: torch.Tensor, f_vis: torch.Tensor) -> AttentionPair:
        cm_ir, cm_vis = self.channel(f_ir, f_vis)
        sm_ir, sm_vis = self.spatial(f_ir, f_vis)
        return AttentionPair(cm_ir, cm_vis, sm_ir, sm_vis)

    @staticmethod
    def compose(f_ir: torch.Tensor, f_vis: torch.Tensor, att: AttentionPair) -> torch.Tensor:
        return att.cm_ir * (att.sm_ir * f_ir) + att.cm_vis * (att.sm_vis * f_vis)

    def forward(
        self,
        f_ir: torch.Tensor,
        f_vis: torch.Tensor,
        attention: Optional[AttentionPair] = None,
    ) -> Tuple[torch.Tensor, Optional[AttentionPair], torch.Tensor]:
        """
        Args:
            f_ir: infrared features, at the visible resolution or half of it
            f_vis: visible features
            attention: maps to use instead of the learned ones

        Returns:
            (fused map, attention maps or None, the infrared map consumed)
        """
        if self.upsample is not None:
            f_ir = self.upsample(f_ir)
        if f_ir.shape != f_vis.shape:
            raise ShapeError(f"Fusion inputs differ: ir {tuple(f_ir.shape)} vs vis {tuple(f_vis.shape)}")

        if self.mode == FusionMode.sum:
            return f_ir + f_vis, None, f_ir
        if self.mode == FusionMode.concat:
            return self.merge(torch.cat([f_ir, f_vis], dim=1)), None, f_ir
        att = attention if attention is not None else self.attend(f_ir, f_vis)
        return self.compose(f_ir, f_vis, att), att, f_ir


class ResidualUpsample(nn.Module):
    """Bilinear upsample whose body output is added back to the upsampled input"""

    def __init__(self, channels: int, scale: int):
        super().__init__()
        self.scale = scale
        self.body = nn.Sequential(
            conv3x3(channels, channels),
            nn.PReLU(channels, init=PRELU_INIT),
            conv3x3(channels, channels),
            nn.PReLU(channels, init=PRELU_INIT),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        up = F.interpolate(x, scale_factor=self.scale, mode="bilinear", align_corners=False)
        return self.body(up) + up


class Reconstruction(nn.Module):
    def __init__(self, channels: int, blocks: int = 5):
        super().__init__()
        self.merge = ResidualStream(blocks * channels, channels)
        self.conv1 = conv3x3(channels, channels // 2)
        self.act = nn.PReLU(channels // 2, init=PRELU_INIT)
        self.conv2 = conv3x3(channels // 2, 1)

    def forward(self, maps: List[torch.Tensor]) -> torch.Tensor:
        x = self.merge(torch.cat(maps, dim=1))
        x = torch.tanh(self.conv2(self.act(self.conv1(x))))
        return (x + 1.0) / 2.0


# (infrared scale, visible scale) consumed by each fusion block
BLOCK_WIRING = ((1, 1), (2, 1), (2, 2), (3, 2), (3, 3))


class MDANet(nn.Module):
    """Multi-scale dual-attention fusion network for registered IR / visible-Y pairs"""

    def __init__(self, cfg: Optional[NetConfig] = None, seed: Optional[int] = 0):
        super().__init__()
        self.cfg = cfg or NetConfig()
        c = self.cfg.base_channels
        self.stem_ir = Stem(c)
        self.stem_vis = Stem(c)
        self.pyramid_ir = DownsamplePyramid(c)
        self.pyramid_vis = DownsamplePyramid(c)
        self.blocks = nn.ModuleList([
            DualAttentionFusion(c, self.cfg.reduction, self.cfg.fusion_mode, upsample_ir=ir_scale > vis_scale)
            for ir_scale, vis_scale in BLOCK_WIRING
        ])
        self.unify = nn.ModuleList([ResidualUpsample(c, 2), ResidualUpsample(c, 2), ResidualUpsample(c, 4)])
        self.reconstruction = Reconstruction(c, len(BLOCK_WIRING))
        if seed is not None:
            init_parameters(self, seed)

    def forward(
        self,
        ir: torch.Tensor,
        vis_y: torch.Tensor,
        attention: Optional[List[Optional[AttentionPair]]] = None,
    ) -> NetOutput:
        """
        Args:
            ir, vis_y: N x 1 x H x W in [0, 1], H and W divisible by 4
            attention: optional per-block maps overriding the learned ones

        Returns:
            NetOutput with the fused Y and every intermediate the losses need
        """
        if ir.shape != vis_y.shape or ir.dim() != 4 or ir.shape[1] != 1:
            raise ShapeError(f"Expected equal N x 1 x H x W inputs, got {tuple(ir.shape)} and {tuple(vis_y.shape)}")
        if ir.shape[-2] % 4 or ir.shape[-1] % 4:
            raise PreconditionError(f"Input {tuple(ir.shape[-2:])} must be divisible by 4; use fuse() for arbitrary sizes")

        pyr_ir = self.pyramid_ir(self.stem_ir(ir), "ir")
        pyr_vis = self.pyramid_vis(self.stem_vis(vis_y), "vis")
        fused, maps, ir_inputs, vis_inputs = [], [], [], []
        for k, (ir_scale, vis_scale) in enumerate(BLOCK_WIRING):
            f_vis = pyr_vis[vis_scale - 1]
            forced = attention[k] if attention is not None else None
            m, att, f_ir = self.blocks[k](pyr_ir[ir_scale - 1], f_vis, forced)
            fused.append(m)
            maps.append(att)
            ir_inputs.append(f_ir)
            vis_inputs.append(f_vis)

        fused_set = FusedSet(*fused)
        unified = [fused_set.m1, fused_set.m2] + [up(m) for up, m in zip(self.unify, fused[2:])]
        out = self.reconstruction(unified)
        return NetOutput(out, fused_set, pyr_ir, pyr_vis, maps, ir_inputs, vis_inputs)

    @torch.no_grad()
    def fuse(self, ir: torch.Tensor, vis_y: torch.Tensor) -> NetOutput:
        """Inference on any size: reflect-pad to a multiple of 4, run, crop back"""
        height, width = ir.shape[-2:]
        pad_h = (-height) % 4
        pad_w = (-width) % 4
        if pad_h or pad_w:
            ir = F.pad(ir, (0, pad_w, 0, pad_h), mode="reflect")
            vis_y = F.pad(vis_y, (0, pad_w, 0, pad_h), mode="reflect")
        out = self.forward(ir, vis_y)
        return out._replace(fused=out.fused[..., :height, :width])


def init_parameters(module: nn.Module, seed: int) -> None:
    """Seeded Kaiming-uniform weights, zero biases, PReLU slopes at 0.25"""
    generator = torch.Generator().manual_seed(seed)
    gain = math.sqrt(2.0 / (1.0 + PRELU_INIT ** 2))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = gain * math.sqrt(3.0 / fan_in)
                m.weight.copy_(torch.rand(m.weight.shape, generator=generator, dtype=torch.float64).mul(2 * bound).sub(bound))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.PReLU):
                m.weight.fill_(PRELU_INIT)


def build_model(cfg: NetConfig, state: Optional[dict] = None, seed: Optional[int] = 0) -> MDANet:
    model = MDANet(cfg, seed=seed)
    if state is not None:
        model.load_state_dict(state)
    logger.debug(f"Built MDANet ({sum(p.numel() for p in model.parameters())} parameters, mode={cfg.fusion_mode.value})")
    return model
