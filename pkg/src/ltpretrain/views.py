"""Two-view augmentation, proposal correspondence across views, and proposal masking.

Geometry uses continuous pixel-edge coordinates: a crop ``(x0, y0, x1, y1)``
resized to ``W' x H'`` maps source ``x`` to ``(x - x0) * W' / (x1 - x0)``,
followed by ``x -> W' - x`` when flipped. This matches bilinear resizing with
``align_corners=False``.

Photometric defaults follow the MoCo v2 recipe (color jitter 0.4/0.4/0.4/0.1
with p=0.8, grayscale p=0.2, Gaussian blur p=0.5 with sigma in [0.1, 2.0]
at 224 px, horizontal flip p=0.5, crop scale [0.2, 1.0]) plus solarization
with p=0.2 at threshold 0.5. Blur sigma is scaled by ``output_size / 224``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .data import BoundingBox, ImageRecord
from .errors import EmptyProposalsError

PROPOSAL_SOURCES = ("ground-truth", "jittered-gt", "random-boxes")


@dataclass(frozen=True)
class AugmentConfig:
    output_size: int = 64
    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    solarize_prob: float = 0.2
    solarize_threshold: float = 0.5
    # geometry-only: full-image crop, no flip, no photometric change
    identity: bool = False
    photometric: bool = True
    visibility: float = 0.5
    max_proposals: int = 8
    max_attempts: int = 10
    jitter_fraction: float = 0.1
    num_random_boxes: int = 16


@dataclass(frozen=True)
class ViewTransform:
    crop: tuple  # (x0, y0, x1, y1) integer pixels in source coordinates
    flip: bool
    out_size: tuple  # (width, height)

    @property
    def scale(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.crop
        return self.out_size[0] / (x1 - x0), self.out_size[1] / (y1 - y0)

    @property
    def crop_box(self) -> BoundingBox:
        return BoundingBox(*(float(v) for v in self.crop))

    def map_box(self, box: BoundingBox) -> Optional[BoundingBox]:
        """Source box -> view box, clipped to the crop. None if it falls outside."""
        clipped = box.intersect(self.crop_box)
        if clipped is None:
            return None
        sx, sy = self.scale
        x0, y0 = self.crop[0], self.crop[1]
        W = self.out_size[0]
        a = (clipped.x_min - x0) * sx
        b = (clipped.x_max - x0) * sx
        if self.flip:
            a, b = W - b, W - a
        out = BoundingBox(a, (clipped.y_min - y0) * sy, b, (clipped.y_max - y0) * sy)
        return out.clip(*self.out_size)

    def unmap_box(self, box: BoundingBox) -> BoundingBox:
        """View box -> source coordinates (inverse of ``map_box`` on the crop)."""
        sx, sy = self.scale
        W = self.out_size[0]
        a, b = box.x_min, box.x_max
        if self.flip:
            a, b = W - b, W - a
        x0, y0 = self.crop[0], self.crop[1]
        return BoundingBox(a / sx + x0, box.y_min / sy + y0, b / sx + x0, box.y_max / sy + y0)


@dataclass(frozen=True)
class Photometric:
    brightness: Optional[float] = None
    contrast: Optional[float] = None
    saturation: Optional[float] = None
    hue: Optional[float] = None
    grayscale: bool = False
    blur_sigma: Optional[float] = None
    solarize: bool = False
    solarize_threshold: float = 0.5


@dataclass
class AugmentedView:
    """``pixels`` is a 3 x H' x W' float32 tensor."""

    pixels: torch.Tensor
    transform: ViewTransform
    photometric: Photometric


@dataclass(frozen=True)
class ProposalMatch:
    box_q: BoundingBox
    box_k: BoundingBox
    source: BoundingBox


@dataclass
class ViewPair:
    view_q: AugmentedView
    view_k: AugmentedView
    proposals: list[ProposalMatch] = field(default_factory=list)


def visible_fraction(box: BoundingBox, crop: BoundingBox) -> float:
    return box.intersection_area(crop) / box.area


def flip_box(box: BoundingBox, width: float) -> BoundingBox:
    return BoundingBox(width - box.x_max, box.y_min, width - box.x_min, box.y_max)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_transform(rng: np.random.Generator, width: int, height: int, cfg: AugmentConfig) -> ViewTransform:
    out = (cfg.output_size, cfg.output_size)
    if cfg.identity:
        return ViewTransform((0, 0, width, height), False, out)
    area = width * height
    log_ratio = (math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            x0 = int(rng.integers(0, width - w + 1))
            y0 = int(rng.integers(0, height - h + 1))
            crop = (x0, y0, x0 + w, y0 + h)
            break
    else:
        crop = (0, 0, width, height)
    return ViewTransform(crop, bool(rng.random() < cfg.flip_prob), out)


def sample_photometric(rng: np.random.Generator, cfg: AugmentConfig) -> Photometric:
    if cfg.identity or not cfg.photometric:
        return Photometric()
    kw = {}
    # draw every variate unconditionally so the stream length is fixed
    u_jitter, u_gray, u_blur, u_sol = rng.random(4)
    factors = rng.uniform(-1.0, 1.0, 4)
    sigma = rng.uniform(*cfg.blur_sigma) * cfg.output_size / 224.0
    if u_jitter < cfg.jitter_prob:
        kw["brightness"] = 1.0 + cfg.brightness * factors[0]
        kw["contrast"] = 1.0 + cfg.contrast * factors[1]
        kw["saturation"] = 1.0 + cfg.saturation * factors[2]
        kw["hue"] = cfg.hue * factors[3]
    kw["grayscale"] = bool(u_gray < cfg.grayscale_prob)
    if u_blur < cfg.blur_prob:
        kw["blur_sigma"] = float(sigma)
    kw["solarize"] = bool(u_sol < cfg.solarize_prob)
    kw["solarize_threshold"] = cfg.solarize_threshold
    return Photometric(**kw)


def proposal_candidates(image: ImageRecord, source: str, rng: np.random.Generator, cfg: AugmentConfig) -> list[BoundingBox]:
    W, H = image.width, image.height
    if source == "ground-truth":
        return [a.box for a in image.annotations]
    if source == "jittered-gt":
        out = []
        for a in image.annotations:
            b = a.box
            noise = rng.uniform(-cfg.jitter_fraction, cfg.jitter_fraction, 4) * np.array([b.width, b.height] * 2)
            x0, y0, x1, y1 = np.asarray(b.as_tuple()) + noise
            x0, x1 = max(0.0, x0), min(float(W), x1)
            y0, y1 = max(0.0, y0), min(float(H), y1)
            out.append(BoundingBox(x0, y0, x1, y1) if x0 < x1 and y0 < y1 else b)
        return out
    if source == "random-boxes":
        out = []
        for _ in range(cfg.num_random_boxes):
            w = rng.uniform(0.1, 0.5) * W
            h = rng.uniform(0.1, 0.5) * H
            x0 = rng.uniform(0, W - w)
            y0 = rng.uniform(0, H - h)
            out.append(BoundingBox(x0, y0, x0 + w, y0 + h))
        return out
    raise ValueError(f"unknown proposal source {source!r}; expected one of {PROPOSAL_SOURCES}")


def match_proposals(
    candidates: Sequence[BoundingBox], tq: ViewTransform, tk: ViewTransform, visibility: float = 0.5
) -> list[ProposalMatch]:
    """Keep candidates with at least ``visibility`` of their area inside both crops."""
    out = []
    cq, ck = tq.crop_box, tk.crop_box
    for box in candidates:
        if visible_fraction(box, cq) < visibility or visible_fraction(box, ck) < visibility:
            continue
        bq, bk = tq.map_box(box), tk.map_box(box)
        if bq is None or bk is None:
            continue
        out.append(ProposalMatch(bq, bk, box))
    return out


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """H x W x 3 array -> 3 x H x W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float32))


def render_view(source: torch.Tensor, transform: ViewTransform, photo: Photometric) -> torch.Tensor:
    x0, y0, x1, y1 = transform.crop
    W, H = transform.out_size
    img = source
    if (x0, y0, x1, y1) != (0, 0, source.shape[-1], source.shape[-2]) or (W, H) != (x1 - x0, y1 - y0):
        img = TF.resized_crop(source, y0, x0, y1 - y0, x1 - x0, [H, W], antialias=False)
    if transform.flip:
        img = TF.hflip(img)
    if photo.brightness is not None:
        img = TF.adjust_brightness(img, photo.brightness)
        img = TF.adjust_contrast(img, photo.contrast)
        img = TF.adjust_saturation(img, photo.saturation)
        img = TF.adjust_hue(img, photo.hue)
    if photo.grayscale:
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
    if photo.blur_sigma is not None:
        k = min(2 * math.ceil(3 * photo.blur_sigma) + 1, (min(H, W) // 2) * 2 - 1)
        if k >= 3:
            img = TF.gaussian_blur(img, [k, k], [photo.blur_sigma, photo.blur_sigma])
    if photo.solarize:
        img = TF.solarize(img, photo.solarize_threshold)
    return img.contiguous()


def make_view_pair(
    image: ImageRecord,
    proposal_source: str = "ground-truth",
    seed: int = 0,
    config: AugmentConfig = AugmentConfig(),
    allow_empty: bool = False,
) -> ViewPair:
    """Two independently augmented views of ``image`` with corresponding proposals.

    Each attempt samples fresh crops for both views; up to ``max_attempts`` are
    made before giving up. With ``allow_empty`` the last attempt is returned with
    no proposals instead of raising :class:`EmptyProposalsError`.
    """
    if image.pixels is None:
        raise ValueError(f"image {image.image_id} has no pixels")
    rng = np.random.default_rng(seed)
    candidates = proposal_candidates(image, proposal_source, rng, config)
    matches: list[ProposalMatch] = []
    for _ in range(config.max_attempts):
        tq = sample_transform(rng, image.width, image.height, config)
        tk = sample_transform(rng, image.width, image.height, config)
        matches = match_proposals(candidates, tq, tk, config.visibility)
        if matches:
            break
    else:
        if not allow_empty:
            raise EmptyProposalsError(f"image {image.image_id}: no proposal visible after {config.max_attempts} attempts")
    if len(matches) > config.max_proposals:
        keep = np.sort(rng.choice(len(matches), size=config.max_proposals, replace=False))
        matches = [matches[i] for i in keep]
    pq, pk = sample_photometric(rng, config), sample_photometric(rng, config)
    src = to_tensor(image.pixels)
    return ViewPair(
        AugmentedView(render_view(src, tq, pq), tq, pq),
        AugmentedView(render_view(src, tk, pk), tk, pk),
        matches,
    )


def view_seed(global_seed: int, image_id: int, epoch: int, occurrence: int = 0) -> int:
    """Worker-independent seed for one (image, epoch, repeat) triple."""
    ss = np.random.SeedSequence([global_seed, image_id, epoch, occurrence])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    proposal_index: int
    rect: tuple  # (x0, y0, x1, y1) integer pixels, x1/y1 exclusive
    mask_ratio: float = 0.25
    achieved_ratio: float = 0.0
    relaxed: bool = False

    @property
    def area(self) -> int:
        x0, y0, x1, y1 = self.rect
        return (x1 - x0) * (y1 - y0)

    def flipped(self, width: int) -> "MaskSpec":
        x0, y0, x1, y1 = self.rect
        return replace(self, rect=(width - x1, y0, width - x0, y1))


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def proposal_pixel_rect(box: BoundingBox, width: Optional[int] = None, height: Optional[int] = None) -> tuple:
    """Integer pixel rectangle covered by a floating-point box (at least 1x1)."""
    x0, y0 = _round_half_up(box.x_min), _round_half_up(box.y_min)
    x1, y1 = max(x0 + 1, _round_half_up(box.x_max)), max(y0 + 1, _round_half_up(box.y_max))
    if width is not None:
        x1 = min(x1, width)
        x0 = min(x0, x1 - 1)
    if height is not None:
        y1 = min(y1, height)
        y0 = min(y0, y1 - 1)
    return x0, y0, x1, y1


def sample_mask_spec(
    proposal: BoundingBox,
    ratio: float = 0.25,
    seed: int = 0,
    proposal_index: int = 0,
    image_size: Optional[tuple] = None,
) -> MaskSpec:
    """Random axis-aligned rectangle covering ``ratio`` of the proposal's pixel area.

    The aspect ratio is drawn from [0.5, 2]. Among integer rectangles that fit
    inside the proposal, the one whose area is nearest the target is chosen,
    ties broken by closeness to the drawn aspect. If the nearest achievable area
    is off by more than one pixel row/column the spec is flagged ``relaxed``.
    """
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio {ratio} outside [0, 1)")
    W, H = image_size if image_size is not None else (None, None)
    px0, py0, px1, py1 = proposal_pixel_rect(proposal, W, H)
    w, h = px1 - px0, py1 - py0
    if w * h < 4:
        raise ValueError(f"proposal too small to mask ({w}x{h} pixels)")
    rng = np.random.default_rng(seed)
    aspect = rng.uniform(0.5, 2.0)
    u = rng.random(2)
    if ratio == 0:
        return MaskSpec(proposal_index, (px0, py0, px0, py0), 0.0, 0.0, False)
    target = ratio * w * h
    mw, mh = np.meshgrid(np.arange(1, w + 1), np.arange(1, h + 1), indexing="ij")
    mw, mh = mw.ravel(), mh.ravel()
    ok = (mw <= 2 * mh) & (2 * mw >= mh)
    if not ok.any():
        ok = np.ones_like(ok)
    mw, mh = mw[ok], mh[ok]
    err = np.abs(mw * mh - target)
    aspect_err = np.abs(np.log(mw / mh) - math.log(aspect))
    best = np.lexsort((aspect_err, err))[0]
    bw, bh = int(mw[best]), int(mh[best])
    ox = px0 + int(u[0] * (w - bw + 1))
    oy = py0 + int(u[1] * (h - bh + 1))
    achieved = bw * bh / (w * h)
    relaxed = bool(abs(bw * bh - target) > max(bw, bh))
    return MaskSpec(proposal_index, (ox, oy, ox + bw, oy + bh), ratio, achieved, relaxed)


def apply_mask(pixels, spec: MaskSpec):
    """Copy of channel-first ``pixels`` (..., H, W) with the mask rectangle zeroed.

    Works for numpy arrays and torch tensors; autograd flows through the
    unmasked pixels.
    """
    x0, y0, x1, y1 = spec.rect
    if isinstance(pixels, torch.Tensor):
        keep = torch.ones(pixels.shape[-2:], dtype=torch.bool, device=pixels.device)
        keep[y0:y1, x0:x1] = False
        return torch.where(keep, pixels, torch.zeros((), dtype=pixels.dtype, device=pixels.device))
    out = np.array(pixels, copy=True)
    out[..., y0:y1, x0:x1] = 0
    return out


def apply_masks(batch: torch.Tensor, specs: Sequence[Optional[Sequence[MaskSpec]]]) -> torch.Tensor:
    """Mask an N x C x H x W batch; ``specs[i]`` lists the rectangles for item ``i``."""
    keep = torch.ones((batch.shape[0], 1, *batch.shape[-2:]), dtype=torch.bool, device=batch.device)
    for i, item in enumerate(specs):
        for spec in item or ():
            x0, y0, x1, y1 = spec.rect
            keep[i, :, y0:y1, x0:x1] = False
    return torch.where(keep, batch, torch.zeros((), dtype=batch.dtype, device=batch.device))
