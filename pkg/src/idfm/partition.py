"""Index-set partition of the joint token sequence.

Sequence order is ``[global prompt | instance prompts 1..N | latent raster |
context raster]``. Latent and context patches share raster coordinates, so
instance ``n`` owns the same patch offsets in both image blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class BoxSpec:
    x: int
    y: int
    w: int
    h: int
    src: str = ""
    tgt: str = ""

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise LayoutError(f"box field {name} must be an integer, got {v!r}")
        if self.x < 0 or self.y < 0:
            raise LayoutError(f"box origin must be non-negative: ({self.x}, {self.y})")
        if self.w <= 0 or self.h <= 0:
            raise LayoutError(f"box size must be positive: {self.w}x{self.h}")

    def check_bounds(self, width: int, height: int) -> None:
        if self.x + self.w > width or self.y + self.h > height:
            raise LayoutError(
                f"box ({self.x},{self.y},{self.w},{self.h}) exceeds image {width}x{height}"
            )

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "src": self.src, "tgt": self.tgt}


def patchify_box(box: BoxSpec, patch: int, grid_h: int, grid_w: int) -> list[int]:
    """Raster indices of every patch sharing at least one pixel with ``box``."""
    box.check_bounds(grid_w * patch, grid_h * patch)
    r0, r1 = box.y // patch, (box.y + box.h - 1) // patch
    c0, c1 = box.x // patch, (box.x + box.w - 1) // patch
    return [r * grid_w + c for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]


@dataclass(frozen=True)
class PartitionLayout:
    seq_len: int
    t_g: range
    t_inst: tuple[range, ...]
    l_u: tuple[int, ...]
    c_u: tuple[int, ...]
    l_inst: tuple[tuple[int, ...], ...]
    c_inst: tuple[tuple[int, ...], ...]
    grid_h: int
    grid_w: int
    patch: int
    # patch offsets (raster index within the grid) per instance
    patch_inst: tuple[tuple[int, ...], ...] = field(default=())

    @property
    def num_instances(self) -> int:
        return len(self.t_inst)

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def text_len(self) -> int:
        return self.latent_start

    @property
    def latent_start(self) -> int:
        return self.seq_len - 2 * self.num_patches

    @property
    def context_start(self) -> int:
        return self.seq_len - self.num_patches

    def latent_range(self) -> range:
        return range(self.latent_start, self.context_start)

    def context_range(self) -> range:
        return range(self.context_start, self.seq_len)

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "patch": self.patch,
            "T_g": list(self.t_g),
            "T_inst": [list(r) for r in self.t_inst],
            "L_u": list(self.l_u),
            "L_inst": [list(s) for s in self.l_inst],
            "C_u": list(self.c_u),
            "C_inst": [list(s) for s in self.c_inst],
        }


def build_layout(
    global_len: int,
    inst_prompt_lens: Sequence[int],
    boxes: Sequence[BoxSpec],
    patch: int,
    grid_h: int,
    grid_w: int,
) -> PartitionLayout:
    if len(inst_prompt_lens) != len(boxes):
        raise LayoutError(
            f"{len(inst_prompt_lens)} instance prompts but {len(boxes)} boxes"
        )
    if global_len < 1:
        raise LayoutError("global prompt needs at least one token")
    if patch < 1 or grid_h < 1 or grid_w < 1:
        raise LayoutError("patch and grid sizes must be positive")
    if any(n < 1 for n in inst_prompt_lens):
        raise LayoutError("instance prompts need at least one token")

    t_g = range(0, global_len)
    t_inst = []
    cursor = global_len
    for n in inst_prompt_lens:
        t_inst.append(range(cursor, cursor + n))
        cursor += n
    num_patches = grid_h * grid_w
    latent_start = cursor
    context_start = cursor + num_patches
    seq_len = context_start + num_patches

    patch_sets = [tuple(patchify_box(b, patch, grid_h, grid_w)) for b in boxes]
    covered = set().union(*patch_sets) if patch_sets else set()
    free = [p for p in range(num_patches) if p not in covered]

    return PartitionLayout(
        seq_len=seq_len,
        t_g=t_g,
        t_inst=tuple(t_inst),
        l_u=tuple(latent_start + p for p in free),
        c_u=tuple(context_start + p for p in free),
        l_inst=tuple(tuple(latent_start + p for p in ps) for ps in patch_sets),
        c_inst=tuple(tuple(context_start + p for p in ps) for ps in patch_sets),
        grid_h=grid_h,
        grid_w=grid_w,
        patch=patch,
        patch_inst=tuple(patch_sets),
    )
