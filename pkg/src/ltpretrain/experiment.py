"""Paired baseline-vs-full pre-training comparison on a synthetic long-tailed set.

Both arms see the same pre-training split, the same number of epochs and the
same probe budget. Only the objective terms and the sampler differ.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .data import DatasetManifest, SyntheticConfig, compute_class_stats, generate_synthetic, split_manifest
from .diagnostics import ProbeConfig, probe_eval, weight_norm_report
from .train import TrainConfig, baseline_config, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ComparisonProtocol:
    num_images: int = 2000
    num_classes: int = 20
    zipf_exponent: float = 1.2
    data_seed: int = 7
    # pre-training / probe-train / probe-test
    splits: tuple = (0.6, 0.2, 0.2)
    # group cuts scaled to a 1200-image pre-training split
    rare_max: int = 60
    common_max: int = 200
    # repeat-factor threshold scaled so that the tail classes are actually resampled
    t_threshold: float = 0.05
    epochs: int = 12
    probe_epochs: int = 300

    def probe_config(self, seed: int = 0) -> ProbeConfig:
        return ProbeConfig(epochs=self.probe_epochs, seed=seed, rare_max=self.rare_max, common_max=self.common_max)

    def arm_configs(self, seed: int) -> dict:
        return {
            "baseline": baseline_config(seed=seed, epochs=self.epochs),
            "full": TrainConfig(seed=seed, epochs=self.epochs, t_threshold=self.t_threshold),
        }


@dataclass
class ArmResult:
    arm: str
    seed: int
    group_accuracy: dict
    overall_accuracy: float
    norm_group_means: dict
    norm_gap: float
    steps: int
    seconds: float
    metrics: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("metrics")
        return d


def comparison_data(protocol: ComparisonProtocol) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    m = generate_synthetic(
        SyntheticConfig(protocol.num_images, protocol.num_classes, protocol.zipf_exponent, seed=protocol.data_seed)
    )
    pre, probe_train, probe_test = split_manifest(m, protocol.splits, seed=protocol.data_seed)
    return pre, probe_train, probe_test


def run_arm(
    arm: str,
    config: TrainConfig,
    data: tuple,
    protocol: ComparisonProtocol,
    out_dir: Optional[Path] = None,
) -> ArmResult:
    pre, probe_train, probe_test = data
    counts = compute_class_stats(pre).instance_counts
    start = time.perf_counter()
    state = train(config, pre, out_dir=out_dir)
    probe = probe_eval(state.model.online.backbone, probe_train, probe_test, protocol.probe_config(), counts)
    norms = weight_norm_report(probe.classifier_weight, counts, probe.groups)
    return ArmResult(
        arm,
        config.seed,
        probe.group_accuracy,
        probe.overall_accuracy,
        norms.group_means,
        norms.head_tail_gap(),
        state.step,
        time.perf_counter() - start,
        state.metrics,
    )


def compare(
    seeds: Sequence[int] = (0, 1, 2),
    protocol: ComparisonProtocol = ComparisonProtocol(),
    out_dir=None,
) -> list[ArmResult]:
    data = comparison_data(protocol)
    results = []
    for seed in seeds:
        for arm, cfg in protocol.arm_configs(seed).items():
            sub = Path(out_dir) / f"{arm}_seed{seed}" if out_dir is not None else None
            res = run_arm(arm, cfg, data, protocol, sub)
            logger.info("%s seed %d: %s", arm, seed, res.summary())
            results.append(res)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        doc = {"protocol": asdict(protocol), "runs": [r.summary() for r in results], "medians": medians(results)}
        (Path(out_dir) / "comparison.json").write_text(json.dumps(doc, indent=1))
    return results


def medians(results: Sequence[ArmResult]) -> dict:
    """Per-arm medians over seeds of rare accuracy, overall accuracy and norm gap."""
    out = {}
    for arm in sorted({r.arm for r in results}):
        rs = [r for r in results if r.arm == arm]
        out[arm] = {
            "rare_accuracy": statistics.median(r.group_accuracy.get("rare", float("nan")) for r in rs),
            "overall_accuracy": statistics.median(r.overall_accuracy for r in rs),
            "norm_gap": statistics.median(r.norm_gap for r in rs),
        }
    return out
