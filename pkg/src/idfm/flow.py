"""Rectified-flow training objective and the Euler editing sampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .masks import LayerSchedule
from .mmdit import MMDiT, PreparedTask, patchify, unpatchify

log = logging.getLogger(__name__)


def to_unit(img: np.ndarray) -> np.ndarray:
    """8-bit pixels -> floats in [-1, 1]."""
    return img.astype(np.float64) / 127.5 - 1.0


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and map back to 8-bit pixels."""
    x = np.clip(x, -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def interpolate(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    return (1.0 - t) * x0 + t * x1


@dataclass
class TrainItem:
    ref: np.ndarray  # [-1, 1] floats
    target: np.ndarray  # x_1
    task: PreparedTask
    t: float
    noise: np.ndarray  # x_0


@dataclass
class SamplerConfig:
    steps: int = 16
    schedule: LayerSchedule | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps


def make_batch(
    samples: Sequence[tuple[np.ndarray, np.ndarray, PreparedTask]],
    rng: np.random.Generator,
) -> list[TrainItem]:
    """Attach t ~ U[0, 1] and x_0 ~ N(0, I) to (ref, target, task) triples."""
    batch = []
    for ref, target, task in samples:
        t = float(rng.uniform(0.0, 1.0))
        noise = rng.standard_normal(target.shape)
        batch.append(TrainItem(ref, target, task, t, noise))
    return batch


def item_loss(model: MMDiT, item: TrainItem, sched: LayerSchedule | None = None) -> nx.Tensor:
    """Mean squared velocity error for one item, as a taped scalar."""
    x_t = interpolate(item.noise, item.target, item.t)
    target_v = patchify(item.target - item.noise, model.config.patch)
    bundle = model.make_bundle(item.task.strings)
    v = model.velocity_tokens(x_t, item.ref, bundle, item.t, item.task.layout, item.task.masks, sched)
    return nx.mean_all(nx.mul(nx.sub(v, nx.Tensor(target_v)), nx.sub(v, nx.Tensor(target_v))))


def fm_loss(batch: Sequence[TrainItem], model: MMDiT, sched: LayerSchedule | None = None) -> float:
    """Batch-mean flow-matching loss without recording a tape."""
    total = 0.0
    for item in batch:
        total += item_loss(model, item, sched).item()
    return total / len(batch)


def reference_loss(batch: Sequence[TrainItem], velocity_fn) -> float:
    """The same objective computed directly from a velocity callable.

    ``velocity_fn(x_t, item)`` returns an image-shaped velocity; kept apart
    from the taped path so the two can check each other.
    """
    vals = []
    for item in batch:
        x_t = (1.0 - item.t) * item.noise + item.t * item.target
        diff = velocity_fn(x_t, item) - (item.target - item.noise)
        vals.append(float(np.mean(diff**2)))
    return float(np.mean(vals))


def train_step(
    model: MMDiT,
    batch: Sequence[TrainItem],
    opt: nx.Adam,
    sched: LayerSchedule | None = None,
) -> float:
    """One backward pass over the batch (items taped one at a time) plus an
    Adam update. Returns the batch-mean loss."""
    model.zero_grad()
    total = 0.0
    inv = 1.0 / len(batch)
    for item in batch:
        with nx.Tape() as tape:
            loss = item_loss(model, item, sched)
            nx.backward(nx.scale(loss, inv))
        tape.clear()
        total += loss.item()
    mean = total * inv
    if not np.isfinite(mean):
        raise nx.NonFiniteError(f"non-finite loss {mean} at optimizer step {opt.state.step_count + 1}")
    for name, p in model.trainable().items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise nx.NonFiniteError(f"non-finite gradient in {name}")
    opt.step()
    return mean


class VelocityModel(Protocol):
    def velocity(self, x_t: np.ndarray, ref: np.ndarray, task: PreparedTask, t: float, sched: LayerSchedule | None = None) -> np.ndarray:
        ...


def euler_integrate(
    model: VelocityModel,
    x0: np.ndarray,
    ref: np.ndarray,
    task: PreparedTask,
    sampler: SamplerConfig,
) -> np.ndarray:
    """x <- x + v(x, k/T) / T for k = 0..T-1, starting from ``x0``."""
    x = np.array(x0, dtype=np.float64, copy=True)
    dt = sampler.dt
    for k in range(sampler.steps):
        t = k * dt
        v = model.velocity(x, ref, task, t, sampler.schedule)
        x = x + v * dt
    return x


def sample_edit(
    model: VelocityModel,
    ref: np.ndarray,
    task: PreparedTask,
    sampler: SamplerConfig,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Edit ``ref`` (floats in [-1, 1]) in one sampling run.

    Returns the raw float result and its 8-bit rendering.
    """
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(ref.shape)
    x = euler_integrate(model, x0, ref, task, sampler)
    return x, to_uint8(x)
