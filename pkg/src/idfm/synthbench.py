"""Procedural paired text-editing samples and a template-matching decoder.

Images are 48x48 RGB "infographics": flat-colored regions and shapes with a
few text labels. Each label sits in a box aligned to the 4x6 glyph cell
grid; the reference shows the source string and the target shows the
replacement string in the same box, plate color and text color.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageio import encode_ppm
from .partition import BoxSpec

log = logging.getLogger(__name__)

CELL_W, CELL_H = 4, 6
GLYPH_W, GLYPH_H = 3, 5

# 3x5 bitmaps, pairwise Hamming distance >= 3 (blank included)
_FONT_ROWS = {
    "A": [".#.", "#.#", "###", "#.#", "#.#"],
    "B": [".#.", "#.#", "##.", "#.#", "##."],
    "C": [".##", "#..", "#..", "#..", ".##"],
    "D": ["##.", "#.#", "#.#", "#.#", "##."],
    "E": ["###", "...", "##.", "#..", "###"],
    "F": ["###", "#..", "##.", "#..", "#.."],
    "G": ["###", "#..", "#.#", "#.#", ".##"],
    "H": ["#.#", "#.#", "###", "#.#", "#.#"],
    "I": ["###", ".#.", ".#.", ".#.", "###"],
    "J": ["..#", "..#", "..#", "#.#", ".#."],
    "K": ["..#", "..#", "##.", "#.#", "#.#"],
    "L": ["#..", "#..", "#..", "#..", "###"],
    "M": ["###", ".##", "###", "#.#", "#.#"],
    "N": ["##.", "..#", "#.#", "#.#", "#.#"],
    "O": ["...", "#.#", "#.#", "#.#", ".#."],
    "P": ["#..", "#.#", "##.", "#..", "#.."],
}


class GenerationError(RuntimeError):
    pass


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class GlyphFont:
    alphabet: str
    bitmaps: np.ndarray  # [16, 5, 3] bool

    def bitmap(self, ch: str) -> np.ndarray:
        return self.bitmaps[self.alphabet.index(ch)]

    def min_distance(self) -> int:
        """Smallest Hamming distance among all glyphs and the blank cell."""
        flat = np.concatenate([self.bitmaps.reshape(len(self.alphabet), -1), np.zeros((1, GLYPH_W * GLYPH_H), bool)])
        d = (flat[:, None, :] != flat[None, :, :]).sum(axis=2)
        d[np.diag_indices_from(d)] = 99
        return int(d.min())


def default_font() -> GlyphFont:
    alphabet = "".join(_FONT_ROWS)
    bitmaps = np.array([[[c == "#" for c in row] for row in _FONT_ROWS[ch]] for ch in alphabet])
    return GlyphFont(alphabet, bitmaps)


@dataclass(frozen=True)
class SynthConfig:
    image_h: int = 48
    image_w: int = 48
    max_boxes: int = 4
    min_len: int = 1
    max_len: int = 6
    p_overlap: float = 0.1
    max_retries: int = 200
    min_contrast: float = 96.0

    def __post_init__(self):
        if self.image_h % CELL_H or self.image_w % CELL_W:
            raise ValueError("image dims must be multiples of the glyph cell")
        if not 1 <= self.max_boxes:
            raise ValueError("max_boxes must be >= 1")
        if not 1 <= self.min_len <= self.max_len or self.max_len * CELL_W > self.image_w:
            raise ValueError("string length bounds do not fit the image")


@dataclass
class EditSample:
    ref: np.ndarray
    target: np.ndarray
    boxes: list[BoxSpec]
    seed: int

    def instructions(self, image_name: str = "") -> dict:
        return {"image": image_name, "boxes": [b.to_dict() for b in self.boxes]}


def luminance(img: np.ndarray) -> np.ndarray:
    img = img.astype(np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def draw_text(img: np.ndarray, box: BoxSpec, text: str, plate, ink, font: GlyphFont) -> None:
    """Fill the box with ``plate`` and draw ``text`` left-aligned in ``ink``."""
    img[box.y:box.y + box.h, box.x:box.x + box.w] = plate
    for k, ch in enumerate(text):
        x0 = box.x + k * CELL_W
        bits = font.bitmap(ch)
        region = img[box.y:box.y + GLYPH_H, x0:x0 + GLYPH_W]
        region[bits] = ink


def _random_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[...] = rng.integers(0, 256, size=3)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(2, 6))):
        color = rng.integers(0, 256, size=3)
        kind = rng.integers(0, 3)
        if kind == 0:  # band
            y0 = int(rng.integers(0, h))
            img[y0:y0 + int(rng.integers(4, h // 2 + 1))] = color
        elif kind == 1:  # rectangle
            y0, x0 = int(rng.integers(0, h - 4)), int(rng.integers(0, w - 4))
            img[y0:y0 + int(rng.integers(4, 20)), x0:x0 + int(rng.integers(4, 20))] = color
        else:  # disc
            cy, cx, r = rng.integers(0, h), rng.integers(0, w), rng.integers(3, 12)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = color
    return img


def _contrasting_pair(rng: np.random.Generator, min_contrast: float):
    while True:
        plate = rng.integers(0, 256, size=3)
        ink = rng.integers(0, 256, size=3)
        if abs(luminance(plate) - luminance(ink)) >= min_contrast:
            return plate.astype(np.uint8), ink.astype(np.uint8)


def _random_string(rng: np.random.Generator, alphabet: str, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=n))


def _cells_overlap(a: BoxSpec, b: BoxSpec) -> bool:
    return a.x < b.x + b.w and b.x < a.x + a.w and a.y < b.y + b.h and b.y < a.y + a.h


def render_sample(seed: int, config: SynthConfig = SynthConfig(), font: GlyphFont | None = None) -> EditSample:
    font = font or default_font()
    rng = np.random.default_rng(seed)
    cols, rows = config.image_w // CELL_W, config.image_h // CELL_H
    n_boxes = int(rng.integers(1, config.max_boxes + 1))
    background = _random_background(rng, config.image_h, config.image_w)

    boxes: list[BoxSpec] = []
    styles = []
    for _ in range(n_boxes):
        src = _random_string(rng, font.alphabet, config.min_len, config.max_len)
        tgt = src
        while tgt == src:
            tgt = _random_string(rng, font.alphabet, config.min_len, config.max_len)
        width = max(len(src), len(tgt))
        allow_overlap = rng.uniform() < config.p_overlap
        for _attempt in range(config.max_retries):
            c = int(rng.integers(0, cols - width + 1))
            r = int(rng.integers(0, rows))
            box = BoxSpec(c * CELL_W, r * CELL_H, width * CELL_W, CELL_H, src, tgt)
            if allow_overlap or not any(_cells_overlap(box, b) for b in boxes):
                break
        else:
            raise GenerationError(f"could not place box {len(boxes) + 1} for seed {seed}")
        boxes.append(box)
        styles.append(_contrasting_pair(rng, config.min_contrast))

    ref = background.copy()
    target = background.copy()
    for box, (plate, ink) in zip(boxes, styles):
        draw_text(ref, box, box.src, plate, ink, font)
        draw_text(target, box, box.tgt, plate, ink, font)
    return EditSample(ref, target, boxes, seed)


def render_strings(image: np.ndarray, boxes: Sequence[BoxSpec], strings: Sequence[str], font: GlyphFont | None = None) -> np.ndarray:
    """Re-render ``strings`` into ``boxes`` keeping each box's plate and ink.

    Plate and ink are read back from the image (most and least common
    luminance inside the box), which is exact for clean renders.
    """
    font = font or default_font()
    out = image.copy()
    for box, s in zip(boxes, strings):
        crop = image[box.y:box.y + box.h, box.x:box.x + box.w].reshape(-1, 3)
        colors, counts = np.unique(crop, axis=0, return_counts=True)
        plate = colors[np.argmax(counts)]
        lum = luminance(colors)
        ink = colors[np.argmax(np.abs(lum - luminance(plate)))]
        draw_text(out, box, s, plate, ink, font)
    return out


# ---------------------------------------------------------------------------
# decoding (OCR stand-in)
# ---------------------------------------------------------------------------


def otsu_threshold(values: np.ndarray) -> float:
    """Threshold maximizing between-class variance over the sorted values."""
    v = np.sort(values.reshape(-1))
    n = v.size
    csum = np.cumsum(v)
    total = csum[-1]
    best, best_t = -1.0, float(v[0])
    for k in range(1, n):
        if v[k] == v[k - 1]:
            continue
        w0, w1 = k / n, (n - k) / n
        m0 = csum[k - 1] / k
        m1 = (total - csum[k - 1]) / (n - k)
        between = w0 * w1 * (m0 - m1) ** 2
        if between > best:
            best, best_t = between, 0.5 * (v[k - 1] + v[k])
    return best_t


def _check_cell_box(box: BoxSpec, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    if box.x % CELL_W or box.y % CELL_H or box.w % CELL_W or box.h % CELL_H:
        raise DecodeError(f"box {box} is not aligned to the {CELL_W}x{CELL_H} glyph grid")
    if box.x + box.w > w or box.y + box.h > h:
        raise DecodeError(f"box {box} exceeds the {w}x{h} image")


def foreground_mask(image: np.ndarray, box: BoxSpec, min_contrast: float = 40.0) -> np.ndarray:
    """Per-box binarization: pixels on the far side of the Otsu threshold
    from the plate luminance (estimated on the inter-glyph spacing)."""
    _check_cell_box(box, image)
    lum = luminance(image[box.y:box.y + box.h, box.x:box.x + box.w])
    spacing = np.zeros(lum.shape, dtype=bool)
    spacing[:, GLYPH_W::CELL_W] = True
    spacing[GLYPH_H::CELL_H, :] = True
    plate = float(np.median(lum[spacing]))
    if np.abs(lum - plate).max() < min_contrast:
        return np.zeros(lum.shape, dtype=bool)
    thr = otsu_threshold(lum)
    return lum > thr if plate <= thr else lum < thr


def decode_glyphs(image: np.ndarray, box: BoxSpec, font: GlyphFont | None = None) -> str:
    font = font or default_font()
    fg = foreground_mask(image, box)
    templates = np.concatenate([np.zeros((1, GLYPH_H, GLYPH_W), bool), font.bitmaps])
    out = []
    for row in range(0, box.h, CELL_H):
        for col in range(0, box.w, CELL_W):
            cell = fg[row:row + GLYPH_H, col:col + GLYPH_W]
            dist = (templates != cell[None]).sum(axis=(1, 2))
            best = int(np.argmin(dist))  # ties go to the blank template
            if best > 0:
                out.append(font.alphabet[best - 1])
    return "".join(out)


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class DatasetManifest:
    seed: int
    config: dict
    samples: list[dict] = field(default_factory=list)

    def split(self, name: str) -> list[dict]:
        return [s for s in self.samples if s["split"] == name]


def gen_dataset(
    out_dir: str | Path,
    n_train: int = 2000,
    n_test: int = 100,
    seed: int = 0,
    config: SynthConfig = SynthConfig(),
) -> DatasetManifest:
    """Write ``{train,test}/<id>_{ref,tgt}.ppm`` + ``<id>.json`` and ``manifest.json``.

    Each candidate sample's seed is hashed from (seed, index); the low bits
    of that hash pick its split until both quotas are filled.
    """
    out = Path(out_dir)
    for split in ("train", "test"):
        (out / split).mkdir(parents=True, exist_ok=True)
    font = default_font()
    manifest = DatasetManifest(seed=seed, config=asdict(config))
    quota = {"train": n_train, "test": n_test}
    test_frac = n_test / max(1, n_train + n_test)
    index = 0
    while quota["train"] or quota["test"]:
        s = sample_seed(seed, index)
        index += 1
        split = "test" if (s % 10_000) < test_frac * 10_000 else "train"
        if not quota[split]:
            split = "test" if split == "train" else "train"
        quota[split] -= 1
        sample = render_sample(s, config, font)
        sid = f"{len(manifest.samples):06d}"
        ref_name, tgt_name = f"{sid}_ref.ppm", f"{sid}_tgt.ppm"
        (out / split / ref_name).write_bytes(encode_ppm(sample.ref))
        (out / split / tgt_name).write_bytes(encode_ppm(sample.target))
        task = sample.instructions(ref_name)
        (out / split / f"{sid}.json").write_text(json.dumps(task, indent=1) + "\n")
        manifest.samples.append(
            {
                "id": sid,
                "split": split,
                "seed": s,
                "num_boxes": len(sample.boxes),
                "ref": f"{split}/{ref_name}",
                "target": f"{split}/{tgt_name}",
                "instructions": f"{split}/{sid}.json",
            }
        )
    (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=1) + "\n")
    log.info("wrote %d train / %d test samples to %s", n_train, n_test, out)
    return manifest


def load_manifest(data_dir: str | Path) -> DatasetManifest:
    raw = json.loads((Path(data_dir) / "manifest.json").read_text())
    return DatasetManifest(seed=raw["seed"], config=raw["config"], samples=raw["samples"])
