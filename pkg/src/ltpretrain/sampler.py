"""Dynamic rebalancing: blended class scores, repeat factors and epoch schedules.

Each class gets an image-level frequency ``f_im`` and an instance-level
frequency ``f_in``. They are blended by a weighted harmonic mean whose weight
``alpha_d = T / T_max`` moves from the image level (early epochs) to the
instance level (late epochs). The blended score ``f`` then gives the repeat
factor ``r = max(1, sqrt(t / f))``, and each image is repeated by the largest
factor among its classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational
from typing import Union

import numpy as np

from .data import ClassStats, DatasetManifest
from .errors import DomainError

Number = Union[float, Fraction]


@dataclass(frozen=True)
class ScheduleConfig:
    t_threshold: float = 0.001
    t_max: int = 12
    seed: int = 0

    def __post_init__(self):
        if not self.t_threshold > 0:
            raise DomainError("t_threshold must be > 0")
        if self.t_max < 1:
            raise DomainError("t_max must be >= 1")

    @property
    def exact_threshold(self) -> Fraction:
        # 0.001 -> 1/1000, not the binary expansion of the float
        return Fraction(repr(self.t_threshold)) if isinstance(self.t_threshold, float) else Fraction(self.t_threshold)


@dataclass(frozen=True)
class RepeatFactorTable:
    epoch: int
    alpha_d: float
    f_im: tuple
    f_in: tuple
    combined_score: tuple
    repeat_factor: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.repeat_factor)

    def to_csv(self) -> str:
        rows = ["class_id,f_im,f_in,f,r"]
        for c in range(self.num_classes):
            rows.append(
                f"{c},{float(self.f_im[c])!r},{float(self.f_in[c])!r},"
                f"{float(self.combined_score[c])!r},{float(self.repeat_factor[c])!r}"
            )
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class EpochSchedule:
    epoch: int
    image_ids: tuple

    def __len__(self):
        return len(self.image_ids)


def combined_score(f_im: Number, f_in: Number, alpha_d: Number) -> Number:
    """Weighted harmonic mean ``f_im*f_in / (alpha*f_im + (1-alpha)*f_in)``.

    Exact when all arguments are rationals.
    """
    if f_im < 0 or f_in < 0:
        raise DomainError("scores must be non-negative")
    if not 0 <= alpha_d <= 1:
        raise DomainError(f"alpha_d={alpha_d} outside [0, 1]")
    if f_im == 0 and f_in == 0:
        raise DomainError("both scores are zero; absent classes must be excluded")
    num = f_im * f_in
    den = alpha_d * f_im + (1 - alpha_d) * f_in
    if den == 0:
        # only reachable when one factor of the numerator is zero
        return num * 0
    return num / den


def alpha_schedule(epoch: int, t_max: int) -> float:
    """Blending weight for 1-indexed ``epoch``."""
    if t_max < 1:
        raise DomainError("t_max must be >= 1")
    if not 1 <= epoch <= t_max:
        raise DomainError(f"epoch {epoch} outside [1, {t_max}]")
    return epoch / t_max


def _sqrt_correctly_rounded(x: Fraction) -> float:
    """Nearest double to sqrt(x) for a positive rational x."""
    s = math.sqrt(float(x))
    while True:
        lo, hi = math.nextafter(s, 0.0), math.nextafter(s, math.inf)
        # midpoints between s and its neighbours, compared exactly
        if (Fraction(s) + Fraction(hi)) ** 2 / 4 < x:
            s = hi
        elif (Fraction(s) + Fraction(lo)) ** 2 / 4 > x:
            s = lo
        else:
            return s


def repeat_factor(f: Number, t: Number) -> float:
    if not f > 0:
        raise DomainError(f"repeat factor needs f > 0, got {f}")
    if not t > 0:
        raise DomainError(f"repeat factor needs t > 0, got {t}")
    if isinstance(f, Rational) and isinstance(t, Rational):
        ratio = Fraction(t) / Fraction(f)
        return 1.0 if ratio <= 1 else _sqrt_correctly_rounded(ratio)
    return max(1.0, math.sqrt(t / f))


def build_table(stats: ClassStats, epoch: int, config: ScheduleConfig) -> RepeatFactorTable:
    alpha = alpha_schedule(epoch, config.t_max)
    alpha_exact = Fraction(epoch, config.t_max)
    t = config.exact_threshold
    f_im, f_in, f, r = [], [], [], []
    for c in range(stats.num_classes):
        a, b = stats.exact_f_im(c), stats.exact_f_in(c)
        f_im.append(a)
        f_in.append(b)
        if a == 0 and b == 0:
            f.append(Fraction(0))
            r.append(1.0)
            continue
        score = combined_score(a, b, alpha_exact)
        f.append(score)
        r.append(repeat_factor(score, t) if score > 0 else 1.0)
    return RepeatFactorTable(epoch, alpha, tuple(f_im), tuple(f_in), tuple(f), np.asarray(r, dtype=np.float64))


def uniform_table(num_classes: int, epoch: int, t_max: int) -> RepeatFactorTable:
    """A table with every repeat factor 1 (no resampling)."""
    zeros = tuple(Fraction(0) for _ in range(num_classes))
    return RepeatFactorTable(epoch, alpha_schedule(epoch, t_max), zeros, zeros, zeros, np.ones(num_classes))


def image_repeat_factors(manifest: DatasetManifest, table: RepeatFactorTable) -> np.ndarray:
    """``r(I) = max_c r[c]`` over the classes present in each image; 1 for empty images."""
    out = np.ones(len(manifest), dtype=np.float64)
    for i, im in enumerate(manifest.images):
        cats = im.category_ids
        if cats:
            out[i] = max(table.repeat_factor[c] for c in cats)
    return out


def build_epoch_schedule(manifest: DatasetManifest, table: RepeatFactorTable, seed: int) -> EpochSchedule:
    """Repeat each image ``floor(r(I))`` times plus once more with probability
    ``frac(r(I))``, then shuffle. Deterministic for a fixed seed."""
    if table.num_classes != manifest.num_classes:
        raise DomainError("table and manifest disagree on the number of classes")
    rng = np.random.default_rng(seed)
    factors = image_repeat_factors(manifest, table)
    whole = np.floor(factors)
    extra = rng.random(len(factors)) < (factors - whole)
    counts = (whole + extra).astype(np.int64)
    ids = np.repeat(np.asarray(manifest.image_ids, dtype=np.int64), counts)
    ids = ids[rng.permutation(len(ids))]
    return EpochSchedule(table.epoch, tuple(int(i) for i in ids))
