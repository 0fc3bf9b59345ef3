"""Editing scores: CER / delta-CER, background MAE/MSE/SSIM, attempt rate, Elo."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import binary_erosion, convolve

from .partition import BoxSpec

log = logging.getLogger(__name__)

ATTEMPT_THRESHOLD = 10.0


class UndefinedScoreError(ValueError):
    pass


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(pred: str, tgt: str) -> float:
    """Edit distance over target length.

    An empty target counts ``len(pred)`` errors over a length of one and is
    logged, since the ratio is otherwise undefined.
    """
    if not tgt:
        log.warning("CER with empty target; scoring %d errors over length 1", len(pred))
        return float(len(pred))
    return levenshtein(pred, tgt) / len(tgt)


def delta_cer(model_cer: float, gt_render_cer: float) -> float:
    return model_cer - gt_render_cer


def box_union_mask(shape: tuple[int, int], boxes: Iterable[BoxSpec]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for b in boxes:
        mask[b.y:b.y + b.h, b.x:b.x + b.w] = True
    return mask


def _check_pair(ref: np.ndarray, edited: np.ndarray) -> None:
    if ref.shape != edited.shape:
        raise ValueError(f"image dims differ: {ref.shape} vs {edited.shape}")


def region_mae_mse(ref: np.ndarray, edited: np.ndarray, boxes: Sequence[BoxSpec]) -> tuple[float, float]:
    """MAE and MSE over pixels outside every box, all channels averaged."""
    _check_pair(ref, edited)
    bg = ~box_union_mask(ref.shape[:2], boxes)
    if not bg.any():
        raise UndefinedScoreError("boxes cover the whole image")
    diff = edited.astype(np.float64)[bg] - ref.astype(np.float64)[bg]
    return float(np.abs(diff).mean()), float((diff * diff).mean())


def crop_mae(ref: np.ndarray, edited: np.ndarray, box: BoxSpec) -> float:
    a = ref[box.y:box.y + box.h, box.x:box.x + box.w].astype(np.float64)
    b = edited[box.y:box.y + box.h, box.x:box.x + box.w].astype(np.float64)
    return float(np.abs(a - b).mean())


def attempt_rate(ref: np.ndarray, edited: np.ndarray, boxes: Sequence[BoxSpec], threshold: float = ATTEMPT_THRESHOLD) -> float:
    """Percentage of boxes whose crop MAE is strictly above ``threshold``."""
    _check_pair(ref, edited)
    if not boxes:
        return 0.0
    hits = sum(crop_mae(ref, edited, b) > threshold for b in boxes)
    return 100.0 * hits / len(boxes)


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax * ax) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_region(
    ref: np.ndarray,
    edited: np.ndarray,
    background: np.ndarray,
    size: int = 7,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 255.0,
) -> float:
    """Mean SSIM over windows lying entirely inside ``background``.

    Color images are scored per channel and averaged.
    """
    _check_pair(ref, edited)
    if background.shape != ref.shape[:2]:
        raise ValueError("background mask must match the image plane")
    half = size // 2
    valid = binary_erosion(background, structure=np.ones((size, size), bool), border_value=0)
    valid[:half] = valid[-half:] = False
    valid[:, :half] = valid[:, -half:] = False
    if not valid.any():
        raise UndefinedScoreError("no SSIM window fits inside the background")
    w = gaussian_window(size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    x = ref.astype(np.float64)
    y = edited.astype(np.float64)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    scores = []
    for ch in range(x.shape[2]):
        a, b = x[..., ch], y[..., ch]
        filt = lambda z: convolve(z, w, mode="constant")
        mu_a, mu_b = filt(a), filt(b)
        var_a = filt(a * a) - mu_a**2
        var_b = filt(b * b) - mu_b**2
        cov = filt(a * b) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
        scores.append(s[valid].mean())
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Elo
# ---------------------------------------------------------------------------


def expected_score(r_a: float, r_b: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / 400.0))


_RESULT_SCORE = {"a": 1.0, "b": 0.0, "draw": 0.5}


def elo(
    outcomes: Sequence[tuple[str, str, str]],
    k: float = 32.0,
    init: float = 1200.0,
    epochs: int = 1,
    seed: int | None = 0,
) -> dict[str, float]:
    """Sequential Elo over (player_a, player_b, result) games.

    ``result`` is ``"a"``, ``"b"`` or ``"draw"``. Game order is shuffled each
    epoch with ``random.Random(seed)``; ``seed=None`` keeps the given order.
    """
    ratings: dict[str, float] = {}
    for a, b, result in outcomes:
        if result not in _RESULT_SCORE:
            raise ValueError(f"unknown result {result!r}")
        if a == b:
            raise ValueError(f"player {a!r} cannot play itself")
        ratings.setdefault(a, float(init))
        ratings.setdefault(b, float(init))
    rng = random.Random(seed) if seed is not None else None
    games = list(outcomes)
    for _ in range(epochs):
        order = games[:]
        if rng is not None:
            rng.shuffle(order)
        for a, b, result in order:
            e_a = expected_score(ratings[a], ratings[b])
            delta = k * (_RESULT_SCORE[result] - e_a)
            ratings[a] += delta
            ratings[b] -= delta
    return ratings


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

SCORE_KEYS = ("cer", "delta_cer", "mae_b", "mse_b", "ssim_b", "attempt_rate")


@dataclass
class SampleScores:
    sample_id: str
    num_boxes: int
    cer: float
    delta_cer: float
    mae_b: float
    mse_b: float
    ssim_b: float | None
    attempt_rate: float

    def as_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "num_boxes": self.num_boxes,
            **{k: getattr(self, k) for k in SCORE_KEYS},
        }


def score_sample(
    sample_id: str,
    ref: np.ndarray,
    edited: np.ndarray,
    gt_target: np.ndarray | None,
    boxes: Sequence[BoxSpec],
    decode,
) -> SampleScores:
    """All scores for one edit. ``decode(image, box)`` is the OCR stand-in.

    CER averages over boxes; delta-CER subtracts the CER the same decoder
    gets on the ground-truth target (0 when none is given).
    """
    cers = [cer(decode(edited, b), b.tgt) for b in boxes]
    model_cer = float(np.mean(cers)) if cers else 0.0
    if gt_target is not None and boxes:
        gt_cer = float(np.mean([cer(decode(gt_target, b), b.tgt) for b in boxes]))
    else:
        gt_cer = 0.0
    mae_b, mse_b = region_mae_mse(ref, edited, boxes)
    bg = ~box_union_mask(ref.shape[:2], boxes)
    try:
        ssim_b = ssim_region(ref, edited, bg)
    except UndefinedScoreError:
        ssim_b = None
    return SampleScores(
        sample_id=sample_id,
        num_boxes=len(boxes),
        cer=model_cer,
        delta_cer=delta_cer(model_cer, gt_cer),
        mae_b=mae_b,
        mse_b=mse_b,
        ssim_b=ssim_b,
        attempt_rate=attempt_rate(ref, edited, boxes),
    )


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    samples: list[SampleScores] = field(default_factory=list)

    def aggregate(self) -> dict:
        return {k: _mean(getattr(s, k) for s in self.samples) for k in SCORE_KEYS}

    def bins(self) -> dict[int, dict]:
        out: dict[int, dict] = {}
        for n in sorted({s.num_boxes for s in self.samples}):
            group = [s for s in self.samples if s.num_boxes == n]
            row = {k: _mean(getattr(s, k) for s in group) for k in SCORE_KEYS}
            row["count"] = len(group)
            out[n] = row
        return out

    def to_dict(self) -> dict:
        ordered = sorted(self.samples, key=lambda s: s.sample_id)
        return {
            "aggregate": self.aggregate(),
            "bins": {str(n): row for n, row in self.bins().items()},
            "samples": [s.as_dict() for s in ordered],
        }
