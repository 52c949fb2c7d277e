"""Encoder backbone, momentum copy, projection heads, RoI features, generator and
a minimal detection head."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import BoundingBox
from .errors import ContractError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    backbone_channels: tuple = (32, 64, 128, 256)
    blocks_per_stage: int = 1
    embed_dim: int = 256
    hidden_dim: int = 256
    roi_stage: int = 1
    roi_pool_size: int = 7
    # None -> backbone_dim * (1/4, 1/8, 1/32), i.e. (512, 256, 64) for a 2048-d backbone
    generator_widths: Optional[tuple] = None
    use_predictor: bool = True
    det_hidden_dim: int = 256

    @property
    def backbone_dim(self) -> int:
        return self.backbone_channels[-1]

    @property
    def total_stride(self) -> int:
        return 2 ** (len(self.backbone_channels) + 1)

    def stage_stride(self, stage: int) -> int:
        return 2 ** (stage + 2)

    def stage_sizes(self) -> list[int]:
        return [self.image_size // self.stage_stride(p) for p in range(len(self.backbone_channels))]

    def resolved_generator_widths(self) -> tuple:
        if self.generator_widths is not None:
            return tuple(self.generator_widths)
        d = self.backbone_dim
        return (max(8, d // 4), max(8, d // 8), max(4, d // 32))


@dataclass
class EncoderOutput:
    stage_features: list  # list of N x C_p x H_p x W_p tensors, coarse channel count increasing
    pooled: torch.Tensor  # N x backbone_dim


def _norm(channels: int) -> nn.GroupNorm:
    groups = math.gcd(8, channels)
    return nn.GroupNorm(groups, channels)


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), _norm(cout), nn.ReLU(inplace=True))


class Backbone(nn.Module):
    """Stride-2 stem followed by one stride-2 stage per entry of ``backbone_channels``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.backbone_channels
        self.stem = _conv_block(3, ch[0], 2)
        stages = []
        cin = ch[0]
        for cout in ch:
            blocks = [_conv_block(cin, cout, 2)]
            blocks += [_conv_block(cout, cout, 1) for _ in range(cfg.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        S = self.cfg.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, S, S):
            raise ContractError(f"encoder expects N x 3 x {S} x {S}, got {tuple(x.shape)}")
        h = self.stem(x)
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return EncoderOutput(feats, h.mean(dim=(2, 3)))


def encode(backbone: Backbone, pixels: torch.Tensor) -> EncoderOutput:
    return backbone(pixels)


class ProjectionHead(nn.Module):
    """Linear -> BatchNorm -> ReLU -> Linear."""

    def __init__(self, in_dim: int, hidden_dim: int = 256, out_dim: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim), nn.BatchNorm1d(hidden_dim), nn.ReLU(inplace=True), nn.Linear(hidden_dim, out_dim)
        )

    def forward(self, x):
        return self.net(x)


class Generator(nn.Module):
    """Four 4x4 transposed convolutions from the last stage back to image size."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        total = cfg.total_stride
        if total < 16 or total > 256 or total & (total - 1):
            raise ContractError(f"generator needs a power-of-two total stride in [16, 256], got {total}")
        strides = [2, 2, 2, 2]
        i = 0
        while math.prod(strides) < total:
            strides[i] = 4
            i += 1
        widths = (cfg.backbone_dim, *cfg.resolved_generator_widths(), 3)
        layers: list[nn.Module] = []
        for j, s in enumerate(strides):
            layers.append(nn.ConvTranspose2d(widths[j], widths[j + 1], 4, s, 1 if s == 2 else 0))
            if j < 3:
                layers.append(nn.ReLU(inplace=True))
        self.net = nn.Sequential(*layers)
        self.cfg = cfg

    def forward(self, features):
        if isinstance(features, EncoderOutput):
            features = features.stage_features[-1]
        expected = self.cfg.image_size // self.cfg.total_stride
        if features.dim() != 4 or features.shape[1] != self.cfg.backbone_dim or features.shape[-1] != expected:
            raise ContractError(
                f"generator expects N x {self.cfg.backbone_dim} x {expected} x {expected}, got {tuple(features.shape)}"
            )
        return self.net(features)


def generate(generator: Generator, features) -> torch.Tensor:
    return generator(features)


class DetectionHead(nn.Module):
    """Per-box objectness logit and (dx, dy, dw, dh) refinement."""

    def __init__(self, in_dim: int, hidden_dim: int = 256):
        super().__init__()
        self.fc = nn.Linear(in_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, 5)

    def forward(self, roi_feats: torch.Tensor):
        y = self.out(F.relu(self.fc(roi_feats)))
        return y[:, 0], y[:, 1:]


def zero_init_(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


# ---------------------------------------------------------------------------
# Region features
# ---------------------------------------------------------------------------


def roi_cells(box: BoundingBox, stride: float, size: tuple) -> tuple[int, int, int, int]:
    """Feature-cell range ``[c0, c1) x [r0, r1)`` for a box, by rounding to the
    nearest cell boundary; always at least one cell."""
    H, W = size
    c0 = min(max(int(math.floor(box.x_min / stride + 0.5)), 0), W - 1)
    r0 = min(max(int(math.floor(box.y_min / stride + 0.5)), 0), H - 1)
    c1 = min(max(int(math.floor(box.x_max / stride + 0.5)), c0 + 1), W)
    r1 = min(max(int(math.floor(box.y_max / stride + 0.5)), r0 + 1), H)
    return c0, r0, c1, r1


def roi_pool(
    features: torch.Tensor, boxes: Sequence[Sequence[BoundingBox]], stride: float, output_size: int
) -> torch.Tensor:
    """Pool ``features`` (N x C x H x W) over per-image boxes in pixel coordinates.

    Returns ``(sum(len(b) for b in boxes)) x C x S x S``: the feature cells covered
    by each box, average-pooled adaptively to ``S x S``.
    """
    size = tuple(features.shape[-2:])
    out = []
    for i, image_boxes in enumerate(boxes):
        for box in image_boxes:
            c0, r0, c1, r1 = roi_cells(box, stride, size)
            out.append(F.adaptive_avg_pool2d(features[i, :, r0:r1, c0:c1], output_size))
    if not out:
        return features.new_zeros((0, features.shape[1], output_size, output_size))
    return torch.stack(out)


def extract_proposal_features(
    encoder_out: EncoderOutput,
    boxes: Sequence[Sequence[BoundingBox]],
    projector: nn.Module,
    cfg: ModelConfig,
    predictor: Optional[nn.Module] = None,
) -> torch.Tensor:
    """Unit-norm proposal embeddings, one row per box (in image order)."""
    feats = encoder_out.stage_features[cfg.roi_stage]
    pooled = roi_pool(feats, boxes, cfg.stage_stride(cfg.roi_stage), cfg.roi_pool_size)
    if pooled.shape[0] == 0:
        return pooled.new_zeros((0, cfg.embed_dim))
    z = projector(pooled.flatten(1))
    if predictor is not None:
        z = predictor(z)
    return F.normalize(z, dim=1)


def detection_head_forward(encoder_out: EncoderOutput, boxes, head: DetectionHead, cfg: ModelConfig):
    feats = encoder_out.stage_features[cfg.roi_stage]
    pooled = roi_pool(feats, boxes, cfg.stage_stride(cfg.roi_stage), cfg.roi_pool_size)
    if pooled.shape[0] == 0:
        empty = pooled.new_zeros((0,))
        return empty, pooled.new_zeros((0, 4))
    return head(pooled.flatten(1))


def boxes_to_tensor(boxes: Sequence[BoundingBox], dtype=torch.float64) -> torch.Tensor:
    if not boxes:
        return torch.zeros((0, 4), dtype=dtype)
    return torch.tensor([b.as_tuple() for b in boxes], dtype=dtype)


def encode_deltas(src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    """Standard center/log-size parameterization of ``dst`` relative to ``src``."""
    sw, sh = src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]
    sx, sy = src[:, 0] + 0.5 * sw, src[:, 1] + 0.5 * sh
    dw, dh = dst[:, 2] - dst[:, 0], dst[:, 3] - dst[:, 1]
    dx, dy = dst[:, 0] + 0.5 * dw, dst[:, 1] + 0.5 * dh
    return torch.stack([(dx - sx) / sw, (dy - sy) / sh, torch.log(dw / sw), torch.log(dh / sh)], dim=1)


def decode_deltas(src: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    sw, sh = src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]
    sx, sy = src[:, 0] + 0.5 * sw, src[:, 1] + 0.5 * sh
    cx, cy = sx + deltas[:, 0] * sw, sy + deltas[:, 1] * sh
    w, h = sw * torch.exp(deltas[:, 2]), sh * torch.exp(deltas[:, 3])
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


# ---------------------------------------------------------------------------
# Full model and momentum copy
# ---------------------------------------------------------------------------


class Branch(nn.Module):
    """The parts of the network mirrored by the momentum encoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        roi_dim = cfg.backbone_channels[cfg.roi_stage] * cfg.roi_pool_size**2
        self.backbone = Backbone(cfg)
        self.projector = ProjectionHead(cfg.backbone_dim, cfg.hidden_dim, cfg.embed_dim)
        self.roi_projector = ProjectionHead(roi_dim, cfg.hidden_dim, cfg.embed_dim)


class PretrainModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.online = Branch(cfg)
        self.momentum = copy.deepcopy(self.online)
        for p in self.momentum.parameters():
            p.requires_grad_(False)
        if cfg.use_predictor:
            self.predictor = ProjectionHead(cfg.embed_dim, cfg.hidden_dim, cfg.embed_dim)
            self.roi_predictor = ProjectionHead(cfg.embed_dim, cfg.hidden_dim, cfg.embed_dim)
        else:
            self.predictor = self.roi_predictor = None
        roi_dim = cfg.backbone_channels[cfg.roi_stage] * cfg.roi_pool_size**2
        self.det_head = DetectionHead(roi_dim, cfg.det_hidden_dim)
        self.generator = Generator(cfg)

    def trainable_parameters(self):
        """Everything except the momentum branch."""
        return [p for name, p in self.named_parameters() if not name.startswith("momentum.")]

    def holistic_query(self, out: EncoderOutput) -> torch.Tensor:
        z = self.online.projector(out.pooled)
        if self.predictor is not None:
            z = self.predictor(z)
        return F.normalize(z, dim=1)

    @torch.no_grad()
    def holistic_key(self, out: EncoderOutput) -> torch.Tensor:
        return F.normalize(self.momentum.projector(out.pooled), dim=1)


@dataclass
class MomentumPair:
    online: nn.Module
    momentum: nn.Module
    m: float = 0.999


@torch.no_grad()
def ema_update(pair: MomentumPair) -> MomentumPair:
    """``theta_k <- m * theta_k + (1 - m) * theta_q`` for every parameter."""
    q_params = list(pair.online.parameters())
    k_params = list(pair.momentum.parameters())
    if len(q_params) != len(k_params):
        raise ContractError("online and momentum modules differ in parameter count")
    for pq, pk in zip(q_params, k_params):
        if pq.shape != pk.shape:
            raise ContractError(f"parameter shape mismatch {tuple(pq.shape)} vs {tuple(pk.shape)}")
        pk.mul_(pair.m).add_(pq.detach(), alpha=1.0 - pair.m)
    return pair
