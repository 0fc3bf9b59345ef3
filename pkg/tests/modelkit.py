"""Small models and perturbation trials shared by the model and acceptance tests."""

import numpy as np

from idfm import numerics as nx
from idfm.masks import parse_schedule
from idfm.mmdit import MMDiT, ModelConfig, prepare_task
from idfm.partition import BoxSpec

ALPHA = "ABCDEFGHIJKLMNOP"


def tiny_config(**kw):
    base = dict(
        image_h=8, image_w=8, patch=4, d_model=8, heads=2, num_layers=2,
        early_count=1, late_count=0, time_dim=8, freq_dim=8, utility_len=2,
    )
    base.update(kw)
    return ModelConfig(**base)


def small_config(**kw):
    base = dict(
        image_h=24, image_w=24, patch=4, d_model=16, heads=2, num_layers=8,
        early_count=2, late_count=2, time_dim=16, freq_dim=16, utility_len=4,
    )
    base.update(kw)
    return ModelConfig(**base)


def random_string(rng, n):
    return "".join(ALPHA[i] for i in rng.integers(0, len(ALPHA), size=n))


def random_images(rng, config):
    shape = (config.image_h, config.image_w, config.channels)
    return rng.standard_normal(shape), rng.uniform(-1, 1, shape)


def disjoint_boxes(rng, config, n):
    """``n`` patch-aligned boxes occupying distinct patches."""
    p = config.patch
    cells = rng.permutation(config.grid_h * config.grid_w)[:n]
    boxes = []
    for c in cells:
        r, q = divmod(int(c), config.grid_w)
        boxes.append(BoxSpec(q * p, r * p, p, p, "", random_string(rng, int(rng.integers(1, 5)))))
    return boxes


def isolation_trial(model, rng, schedule_spec):
    """Perturb every token of instances other than 0 and return the max
    absolute change of the velocity on instance 0's latent patches."""
    c = model.config
    n = int(rng.integers(2, 5))
    boxes = disjoint_boxes(rng, c, n)
    x_t, ref = random_images(rng, c)
    task = prepare_task(c, boxes)
    sched = parse_schedule(schedule_spec, c.num_layers, c.early_count, c.late_count)

    strings = list(task.strings)
    x2, ref2 = x_t.copy(), ref.copy()
    p = c.patch
    for m in range(1, n):
        strings[m] = random_string(rng, len(strings[m]))
        b = boxes[m]
        # whole patches of instance m in both image blocks
        x2[b.y:b.y + p, b.x:b.x + p] = rng.standard_normal((p, p, c.channels))
        ref2[b.y:b.y + p, b.x:b.x + p] = rng.uniform(-1, 1, (p, p, c.channels))
    task2 = prepare_task(c, boxes, strings)
    t = float(rng.uniform())
    v1 = model.velocity(x_t, ref, task, t, sched)
    v2 = model.velocity(x2, ref2, task2, t, sched)
    b0 = boxes[0]
    sl = (slice(b0.y, b0.y + p), slice(b0.x, b0.x + p))
    return float(np.abs(v1[sl] - v2[sl]).max())


def norm_loss(model, x_t, ref, task, t, sched=None):
    bundle = model.make_bundle(task.strings)
    v = model.velocity_tokens(x_t, ref, bundle, t, task.layout, task.masks, sched)
    return nx.sum_squares(v)
