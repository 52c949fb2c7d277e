"""Pre-training loop: per-epoch resampling, two-view forward passes, all loss
terms, SGD on the online branch, EMA of the momentum branch, queue updates,
JSON-lines metrics and exact checkpoint/resume."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import BoundingBox, DatasetManifest, compute_class_stats
from .errors import CheckpointError, ConfigurationError, NonFiniteLossError
from .losses import (
    ContrastiveConfig,
    ReconstructionConfig,
    ar_loss,
    compose,
    det_loss,
    hcl_loss,
    lcl_loss,
    sr_loss,
)
from .models import (
    ModelConfig,
    MomentumPair,
    PretrainModel,
    detection_head_forward,
    ema_update,
    extract_proposal_features,
)
from .queue import EmbeddingQueue
from .sampler import ScheduleConfig, build_epoch_schedule, build_table, uniform_table
from .views import AugmentConfig, apply_masks, make_view_pair, sample_mask_spec, view_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    # optimization
    epochs: int = 12
    base_lr: float = 0.02
    lr_decay_epochs: tuple = (8, 11)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    deterministic: bool = True
    max_steps: Optional[int] = None
    # model
    image_size: int = 64
    backbone_channels: tuple = (32, 64, 128, 256)
    blocks_per_stage: int = 1
    embed_dim: int = 256
    hidden_dim: int = 256
    roi_stage: int = 1
    roi_pool_size: int = 7
    generator_widths: Optional[tuple] = None
    use_predictor: bool = True
    ema_momentum: float = 0.999
    # negatives
    queue_size: int = 1024
    proposal_queue_size: int = 1024
    # objective terms
    temperature: float = 0.2
    alpha_c: float = 0.1
    beta_c: float = 0.05
    alpha_r: float = 0.1
    mask_ratio: float = 0.25
    mask_all_proposals: bool = False
    sr_stop_grad_clean: bool = True
    use_lcl: bool = True
    use_drc: bool = True
    use_det: bool = True
    # resampling
    rebalance: bool = True
    t_threshold: float = 0.001
    # views
    proposal_source: str = "jittered-gt"
    max_proposals: int = 8
    crop_scale_min: float = 0.2
    photometric: bool = True
    # output
    checkpoint_every_epoch: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.base_lr > 0:
            raise ConfigurationError("base_lr must be positive")
        for d in self.lr_decay_epochs:
            if not 1 <= d <= self.epochs:
                raise ConfigurationError(f"lr decay epoch {d} outside [1, {self.epochs}]")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            backbone_channels=tuple(self.backbone_channels),
            blocks_per_stage=self.blocks_per_stage,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            roi_stage=self.roi_stage,
            roi_pool_size=self.roi_pool_size,
            generator_widths=None if self.generator_widths is None else tuple(self.generator_widths),
            use_predictor=self.use_predictor,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            output_size=self.image_size,
            crop_scale=(self.crop_scale_min, 1.0),
            photometric=self.photometric,
            max_proposals=self.max_proposals,
        )

    def schedule_config(self) -> ScheduleConfig:
        return ScheduleConfig(self.t_threshold, self.epochs, self.seed)

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.temperature, self.alpha_c, self.beta_c)

    def reconstruction(self) -> ReconstructionConfig:
        return ReconstructionConfig(self.alpha_r, self.mask_ratio)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {unknown}")
        clean = {k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items()}
        return cls(**clean)


def baseline_config(**overrides) -> TrainConfig:
    """HCL only, uniform sampling, no reconstruction or detection term."""
    kw = dict(use_lcl=False, use_drc=False, use_det=False, rebalance=False)
    kw.update(overrides)
    return TrainConfig(**kw)


def load_config(path) -> TrainConfig:
    """Read a flat TOML file whose keys mirror :class:`TrainConfig` fields."""
    try:
        import tomllib
    except ImportError:  # Python < 3.11
        import tomli as tomllib

    try:
        values = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"{path}: {e}") from None
    nested = [k for k, v in values.items() if isinstance(v, dict)]
    if nested:
        raise ConfigurationError(f"{path}: config must be flat, found tables {nested}")
    return TrainConfig.from_dict(values)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step schedule: multiply by ``lr_decay_factor`` once per decay epoch already finished."""
    n = sum(1 for d in config.lr_decay_epochs if epoch > d)
    return config.base_lr * config.lr_decay_factor**n


@dataclass
class RunState:
    config: TrainConfig
    model: PretrainModel
    optimizer: torch.optim.SGD
    queue_h: EmbeddingQueue
    queue_p: EmbeddingQueue
    step: int = 0
    epoch: int = 1
    metrics: list = field(default_factory=list)


def init_state(config: TrainConfig) -> RunState:
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    model = PretrainModel(config.model_config())
    model.train()
    opt = torch.optim.SGD(
        model.trainable_parameters(), lr=config.base_lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    return RunState(
        config,
        model,
        opt,
        EmbeddingQueue(config.queue_size, config.embed_dim),
        EmbeddingQueue(config.proposal_queue_size, config.embed_dim),
    )


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_run_state(state: RunState, directory) -> Path:
    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    params = state.model.trainable_parameters()
    for i, p in enumerate(params):
        buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            tensors[f"optim.{i}.momentum_buffer"] = buf
    for prefix, q in (("queue_h", state.queue_h), ("queue_p", state.queue_p)):
        for k, v in q.state_dict().items():
            tensors[f"{prefix}.{k}"] = v
    tensors["rng.torch"] = torch.get_rng_state()
    meta = {"config": state.config.to_dict(), "epoch": state.epoch}
    return save_checkpoint(directory, tensors, step=state.step, meta=meta)


def resume(path) -> RunState:
    """Rebuild a :class:`RunState` from a checkpoint directory."""
    tensors, doc = load_checkpoint(path)
    config = TrainConfig.from_dict(doc["meta"]["config"])
    state = init_state(config)
    expected = {f"model.{k}": tuple(v.shape) for k, v in state.model.state_dict().items()}
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError("tensor missing from checkpoint", name)
        if tuple(tensors[name].shape) != shape:
            raise CheckpointError(f"shape mismatch {tuple(tensors[name].shape)} vs {shape}", name)
    state.model.load_state_dict({k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")})
    for i, p in enumerate(state.model.trainable_parameters()):
        name = f"optim.{i}.momentum_buffer"
        if name in tensors:
            if tensors[name].shape != p.shape:
                raise CheckpointError("optimizer buffer shape mismatch", name)
            state.optimizer.state[p]["momentum_buffer"] = tensors[name].clone()
    for prefix, q in (("queue_h", state.queue_h), ("queue_p", state.queue_p)):
        q.load_state_dict({k: tensors[f"{prefix}.{k}"] for k in ("buffer", "cursor", "fill")})
    torch.set_rng_state(tensors["rng.torch"])
    state.step = int(doc["step"])
    state.epoch = int(doc["meta"]["epoch"])
    return state


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def epoch_plan(config: TrainConfig, manifest: DatasetManifest, stats=None):
    """Yield ``(epoch, table, schedule)`` for every epoch; deterministic."""
    stats = stats if stats is not None else compute_class_stats(manifest)
    sched_cfg = config.schedule_config()
    for epoch in range(1, config.epochs + 1):
        if config.rebalance:
            table = build_table(stats, epoch, sched_cfg)
        else:
            table = uniform_table(manifest.num_classes, epoch, config.epochs)
        seed = int(np.random.SeedSequence([config.seed, epoch, 1]).generate_state(1)[0])
        yield epoch, table, build_epoch_schedule(manifest, table, seed)


def _box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def sample_background_boxes(
    rng: np.random.Generator, proposals, size: int, n: int, max_iou: float = 0.1, attempts: int = 8
) -> list[BoundingBox]:
    """Random boxes with IoU < ``max_iou`` against every proposal (may return fewer than n)."""
    if n == 0:
        return []
    m = n * attempts
    w = rng.uniform(0.1, 0.5, m) * size
    h = rng.uniform(0.1, 0.5, m) * size
    x0 = rng.uniform(0, 1, m) * (size - w)
    y0 = rng.uniform(0, 1, m) * (size - h)
    cand = np.stack([x0, y0, x0 + w, y0 + h], axis=1)
    props = np.asarray([b.as_tuple() for b in proposals], dtype=np.float64).reshape(-1, 4)
    ok = np.all(_box_iou_matrix(cand, props) < max_iou, axis=1) if len(props) else np.ones(m, dtype=bool)
    return [BoundingBox(*map(float, c)) for c in cand[ok][:n]]


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _finite(*values) -> bool:
    return all(math.isfinite(_scalar(v)) for v in values)


def train_step(state: RunState, batch_pairs, rng: np.random.Generator) -> dict:
    """One optimization step; returns the per-term loss values and counters."""
    cfg = state.config
    model = state.model
    mcfg = model.cfg
    xq = torch.stack([p.view_q.pixels for p in batch_pairs])
    xk = torch.stack([p.view_k.pixels for p in batch_pairs])
    boxes_q = [[m.box_q for m in p.proposals] for p in batch_pairs]
    boxes_k = [[m.box_k for m in p.proposals] for p in batch_pairs]
    n_props = sum(len(b) for b in boxes_q)
    zero = torch.zeros((), dtype=torch.float64)

    out_q = model.online.backbone(xq)
    z = model.holistic_query(out_q)
    with torch.no_grad():
        out_k = model.momentum.backbone(xk)
        z_key = model.holistic_key(out_k)
    l_hcl = hcl_loss(z, z_key, state.queue_h.snapshot(), cfg.temperature)

    l_lcl, zbb_key = zero, None
    # batch norm in the projection heads needs at least two rows
    if cfg.use_lcl and n_props >= 2:
        zbb = extract_proposal_features(out_q, boxes_q, model.online.roi_projector, mcfg, model.roi_predictor)
        with torch.no_grad():
            zbb_key = extract_proposal_features(out_k, boxes_k, model.momentum.roi_projector, mcfg)
        l_lcl = lcl_loss(zbb, zbb_key, state.queue_p.snapshot(), cfg.temperature)

    l_det, no_negatives = zero, False
    if cfg.use_det and n_props > 0:
        negs = [sample_background_boxes(rng, b, cfg.image_size, len(b)) for b in boxes_q]
        pos_logits, pos_deltas = detection_head_forward(out_q, boxes_q, model.det_head, mcfg)
        neg_logits, _ = detection_head_forward(out_q, negs, model.det_head, mcfg)
        no_negatives = neg_logits.numel() == 0
        l_det = det_loss(pos_logits, pos_deltas, neg_logits)

    l_ar, l_sr = zero, zero
    if cfg.use_drc:
        x_hat = model.generator(out_q)
        l_ar = ar_loss(xq, x_hat)
        specs = []
        for i, boxes in enumerate(boxes_q):
            chosen = range(len(boxes)) if cfg.mask_all_proposals else (
                [int(rng.integers(len(boxes)))] if boxes else []
            )
            item = []
            for j in chosen:
                try:
                    item.append(
                        sample_mask_spec(boxes[j], cfg.mask_ratio, int(rng.integers(2**63)), j, (cfg.image_size,) * 2)
                    )
                except ValueError:
                    continue  # proposal below 4 pixels
            specs.append(item)
        out_m = model.online.backbone(apply_masks(x_hat, specs))
        clean = out_q.stage_features
        if cfg.sr_stop_grad_clean:
            clean = [f.detach() for f in clean]
        l_sr = sr_loss(clean, out_m.stage_features)

    l_hlcl, l_drc, total = compose(l_hcl, l_lcl, l_ar, l_sr, l_det, cfg.contrastive(), cfg.reconstruction())
    if not _finite(total, l_hcl, l_lcl, l_ar, l_sr, l_det):
        raise NonFiniteLossError("non-finite loss")

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    ema_update(MomentumPair(model.online, model.momentum, cfg.ema_momentum))
    state.queue_h.enqueue(z_key)
    if zbb_key is not None:
        state.queue_p.enqueue(zbb_key)
    return {
        "l_hcl": _scalar(l_hcl),
        "l_lcl": _scalar(l_lcl),
        "l_hlcl": _scalar(l_hlcl),
        "l_ar": _scalar(l_ar),
        "l_sr": _scalar(l_sr),
        "l_drc": _scalar(l_drc),
        "l_det": _scalar(l_det),
        "total": _scalar(total),
        "num_proposals": n_props,
        "det_no_negatives": bool(no_negatives),
    }


def _dump_offending_batch(out_dir: Optional[Path], step: int, image_ids, record) -> Optional[Path]:
    if out_dir is None:
        return None
    path = out_dir / f"nonfinite_step{step}.json"
    path.write_text(json.dumps({"step": step, "image_ids": image_ids, "losses": record}, indent=1))
    return path


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    out_dir=None,
    state: Optional[RunState] = None,
    max_steps: Optional[int] = None,
    on_step: Optional[Callable[[RunState, dict], None]] = None,
) -> RunState:
    """Run (or continue) pre-training.

    ``max_steps`` caps the global step counter (``config.max_steps`` if None).
    With ``out_dir`` set, metrics are appended to ``metrics.jsonl`` and a
    checkpoint is written at the end of each epoch and at the end of the run.
    """
    if state is None:
        state = init_state(config)
    else:
        config = state.config
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
            torch.set_num_threads(1)
    limit = max_steps if max_steps is not None else config.max_steps
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
        log_file = open(out_dir / "metrics.jsonl", "a" if state.step > 0 else "w", encoding="utf-8")

    aug = config.augment_config()
    B = config.batch_size
    global_step = 0
    try:
        for epoch, table, schedule in epoch_plan(config, manifest):
            n_steps = len(schedule) // B
            if global_step + n_steps <= state.step:
                global_step += n_steps
                continue
            lr = lr_at_epoch(config, epoch)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            state.epoch = epoch
            for j in range(n_steps):
                if global_step < state.step:
                    global_step += 1
                    continue
                if limit is not None and state.step >= limit:
                    return state
                ids = schedule.image_ids[j * B : (j + 1) * B]
                pairs = [
                    make_view_pair(
                        manifest.get(i),
                        config.proposal_source,
                        view_seed(config.seed, i, epoch, j * B + o),
                        aug,
                        allow_empty=True,
                    )
                    for o, i in enumerate(ids)
                ]
                rng = np.random.default_rng(np.random.SeedSequence([config.seed, state.step, 2]))
                try:
                    rec = train_step(state, pairs, rng)
                except NonFiniteLossError as e:
                    path = _dump_offending_batch(out_dir, state.step, list(ids), None)
                    raise NonFiniteLossError(
                        f"non-finite loss at step {state.step} (images {list(ids)})", ids, path
                    ) from e
                record = {
                    "step": state.step,
                    "epoch": epoch,
                    "lr": lr,
                    "alpha_d": table.alpha_d,
                    **rec,
                    "queue_fill_h": state.queue_h.fill,
                    "queue_fill_p": state.queue_p.fill,
                }
                state.metrics.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if on_step is not None:
                    on_step(state, record)
                state.step += 1
                global_step += 1
            if out_dir is not None and config.checkpoint_every_epoch:
                save_run_state(state, out_dir / "checkpoint")
            logger.info("epoch %d done at step %d", epoch, state.step)
    finally:
        if log_file is not None:
            log_file.close()
        if out_dir is not None:
            save_run_state(state, out_dir / "checkpoint")
    return state
