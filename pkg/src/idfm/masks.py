"""Disentanglement / harmonization attention masks and the layer schedule.

A mask is boolean (True = query row may attend key column). It is turned
into an additive 0/-inf bias only inside the attention softmax.

Both regimes read the per-instance condition existentially: a pair is
allowed by the instance case when *some* instance contains both ends.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .partition import PartitionLayout

DIS = "dis"
HAR = "har"
REGIMES = (DIS, HAR)

# (early, mid, late) assignments in the order of the layer-scheduling ablation
SCHEDULE_TABLE = (
    (DIS, DIS, DIS),
    (DIS, HAR, HAR),
    (DIS, DIS, HAR),
    (DIS, HAR, DIS),
    (HAR, HAR, DIS),
    (HAR, DIS, DIS),
    (HAR, DIS, HAR),
    (HAR, HAR, HAR),
)
DEFAULT_TRIPLE = (HAR, DIS, HAR)


@dataclass(frozen=True, eq=False)
class AttnMask:
    allowed: np.ndarray

    def __post_init__(self):
        a = self.allowed
        if a.dtype != bool or a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("mask must be a square boolean matrix")
        a.setflags(write=False)

    @property
    def seq_len(self) -> int:
        return self.allowed.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, AttnMask) and np.array_equal(self.allowed, other.allowed)

    __hash__ = None

    def bias(self) -> np.ndarray:
        """Additive form: 0 where allowed, -inf where blocked."""
        return np.where(self.allowed, 0.0, -np.inf)


def _membership(layout: PartitionLayout):
    n_inst = layout.num_instances
    S = layout.seq_len
    prompt_of = np.zeros((n_inst, S), dtype=bool)
    group_of = np.zeros((n_inst, S), dtype=bool)
    for n in range(n_inst):
        prompt_of[n, list(layout.t_inst[n])] = True
        group_of[n] = prompt_of[n]
        group_of[n, list(layout.l_inst[n])] = True
        group_of[n, list(layout.c_inst[n])] = True
    return prompt_of, group_of


def build_dis(layout: PartitionLayout) -> AttnMask:
    S = layout.seq_len
    prompt_of, group_of = _membership(layout)
    any_prompt = prompt_of.any(axis=0)
    background = np.zeros(S, dtype=bool)
    background[list(layout.t_g)] = True
    background[list(layout.l_u)] = True
    background[list(layout.c_u)] = True
    g = group_of.astype(np.int64)
    same_instance = (g.T @ g) > 0
    allowed = (background[:, None] & ~any_prompt[None, :]) | same_instance
    return AttnMask(allowed)


def build_har(layout: PartitionLayout) -> AttnMask:
    prompt_of, group_of = _membership(layout)
    any_prompt = prompt_of.any(axis=0)
    own_instance = (prompt_of.astype(np.int64).T @ group_of.astype(np.int64)) > 0
    allowed = (~any_prompt[:, None] & ~any_prompt[None, :]) | own_instance
    return AttnMask(allowed)


def build_mask(layout: PartitionLayout, regime: str) -> AttnMask:
    if regime == DIS:
        return build_dis(layout)
    if regime == HAR:
        return build_har(layout)
    raise ValueError(f"unknown regime {regime!r}")


def oracle_mask(layout: PartitionLayout, regime: str) -> AttnMask:
    """Pair-by-pair evaluation of the mask predicates with plain set tests.

    Deliberately independent of :func:`build_dis` / :func:`build_har`; used
    only to cross-check them.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    S = layout.seq_len
    N = layout.num_instances
    T_g = set(layout.t_g)
    T = [set(r) for r in layout.t_inst]
    L = [set(s) for s in layout.l_inst]
    C = [set(s) for s in layout.c_inst]
    L_u = set(layout.l_u)
    C_u = set(layout.c_u)
    all_T = set()
    for t in T:
        all_T |= t
    groups = [T[n] | L[n] | C[n] for n in range(N)]

    out = [[False] * S for _ in range(S)]
    for i in range(S):
        row = out[i]
        i_bg = i in T_g or i in L_u or i in C_u
        i_prompt = i in all_T
        i_groups = [n for n in range(N) if i in groups[n]]
        i_prompts = [n for n in range(N) if i in T[n]]
        for j in range(S):
            j_prompt = j in all_T
            if regime == DIS:
                case1 = i_bg and not j_prompt
                case2 = any(j in groups[n] for n in i_groups)
            else:
                case1 = not i_prompt and not j_prompt
                case2 = any(j in groups[n] for n in i_prompts)
            row[j] = case1 or case2
    return AttnMask(np.array(out, dtype=bool).reshape(S, S))


@dataclass(frozen=True)
class LayerSchedule:
    num_layers: int
    early: range
    late: range
    regimes: tuple[str, ...]

    def __post_init__(self):
        if len(self.regimes) != self.num_layers:
            raise ValueError("one regime per layer required")
        if any(r not in REGIMES for r in self.regimes):
            raise ValueError(f"unknown regime in {self.regimes}")
        if set(self.early) & set(self.late):
            raise ValueError("early and late layer ranges overlap")

    @property
    def mid(self) -> range:
        return range(self.early.stop, self.late.start)

    def regime(self, layer: int) -> str:
        return self.regimes[layer]

    def label(self) -> str:
        return "/".join(self.regimes)


def schedule(
    num_layers: int,
    early_count: int,
    late_count: int,
    override: Sequence[str] | None = None,
) -> LayerSchedule:
    """Per-layer regimes: har in early/late layers, dis in the middle.

    ``override`` is either one regime per layer, or an (early, mid, late)
    triple applied blockwise.
    """
    if num_layers < 1 or early_count < 0 or late_count < 0:
        raise ValueError("layer counts must be non-negative and num_layers positive")
    if early_count + late_count > num_layers:
        raise ValueError(
            f"early ({early_count}) + late ({late_count}) exceeds {num_layers} layers"
        )
    early = range(0, early_count)
    late = range(num_layers - late_count, num_layers)
    if override is None:
        triple = DEFAULT_TRIPLE
    elif len(override) == num_layers:
        return LayerSchedule(num_layers, early, late, tuple(override))
    elif len(override) == 3:
        triple = tuple(override)
    else:
        raise ValueError(
            f"override needs {num_layers} regimes or an (early, mid, late) triple"
        )
    regimes = []
    for layer in range(num_layers):
        if layer in early:
            regimes.append(triple[0])
        elif layer in late:
            regimes.append(triple[2])
        else:
            regimes.append(triple[1])
    return LayerSchedule(num_layers, early, late, tuple(regimes))


def parse_schedule(spec: str, num_layers: int, early_count: int, late_count: int) -> LayerSchedule:
    """Schedule from a CLI string: ``default``, ``all-dis``, ``all-har`` or a
    triple like ``har-dis-har``."""
    spec = spec.strip().lower()
    if spec == "default":
        return schedule(num_layers, early_count, late_count)
    if spec in ("all-dis", "all-har"):
        return schedule(num_layers, early_count, late_count, [spec[4:]] * num_layers)
    parts = spec.replace("/", "-").split("-")
    if len(parts) == 3:
        return schedule(num_layers, early_count, late_count, parts)
    raise ValueError(f"unrecognized schedule {spec!r}")


MASK_GRAY = 128


def mask_to_image(mask: AttnMask) -> np.ndarray:
    """One pixel per (query, key): allowed gray, blocked black."""
    return np.where(mask.allowed, np.uint8(MASK_GRAY), np.uint8(0)).astype(np.uint8)
