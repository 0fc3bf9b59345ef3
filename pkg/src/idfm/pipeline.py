"""Training, editing and evaluation on top of the model and the benchmark."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import numerics as nx
from .config import RunConfig, load_instructions
from .flow import SamplerConfig, make_batch, sample_edit, to_unit, train_step
from .imageio import read_ppm
from .masks import SCHEDULE_TABLE, LayerSchedule, parse_schedule, schedule
from .metrics import EvalReport, box_union_mask, score_sample
from .mmdit import MMDiT, ModelConfig, prepare_task
from .partition import BoxSpec
from .synthbench import decode_glyphs, default_font, load_manifest

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------


def save_model(
    path: str | Path,
    model: MMDiT,
    opt: nx.Adam | None = None,
    step: int = 0,
    run: RunConfig | None = None,
) -> None:
    meta = {
        "model": model.config.to_dict(),
        "frozen": sorted(k for k, p in model.params.items() if not p.requires_grad),
        "lora": {
            t: {"rank": ad.rank, "alpha": ad.alpha} for t, ad in model.lora.items()
        },
        "step": step,
        "run": run.to_dict() if run is not None else None,
        "adam": None,
    }
    tensors = {k: v.data for k, v in model.all_tensors().items()}
    if opt is not None:
        st = opt.state
        meta["adam"] = {
            "lr": st.lr,
            "beta1": st.beta1,
            "beta2": st.beta2,
            "epsilon": st.epsilon,
            "step_count": st.step_count,
        }
        for name in st.first_moment:
            tensors[f"adam.m.{name}"] = st.first_moment[name]
            tensors[f"adam.v.{name}"] = st.second_moment[name]
    checkpoint.save(path, meta, tensors)


@dataclass
class LoadedModel:
    model: MMDiT
    adam: nx.AdamState | None
    step: int
    run: RunConfig | None


def load_model(path: str | Path) -> LoadedModel:
    meta, tensors = checkpoint.load(path)
    config = ModelConfig.from_dict(meta["model"])
    model = MMDiT(config)
    for name, p in model.params.items():
        if name not in tensors:
            raise checkpoint.CheckpointError(f"checkpoint lacks tensor {name!r}")
        if tensors[name].shape != p.shape:
            raise checkpoint.CheckpointError(f"tensor {name!r} has dims {list(tensors[name].shape)}, expected {p.dims}")
        p.data = tensors[name].copy()
    for target, spec in meta["lora"].items():
        model.lora_attach([target], rank=spec["rank"], alpha=spec["alpha"])
        ad = model.lora[target]
        ad.A.data = tensors[f"lora.{target}.A"].copy()
        ad.B.data = tensors[f"lora.{target}.B"].copy()
    frozen = set(meta["frozen"])
    for name, p in model.params.items():
        p.requires_grad = name not in frozen
    adam = None
    if meta.get("adam") is not None:
        a = meta["adam"]
        adam = nx.AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], epsilon=a["epsilon"], step_count=a["step_count"])
        for key, arr in tensors.items():
            if key.startswith("adam.m."):
                adam.first_moment[key[7:]] = arr.copy()
            elif key.startswith("adam.v."):
                adam.second_moment[key[7:]] = arr.copy()
    run = RunConfig.from_dict(meta["run"]) if meta.get("run") else None
    return LoadedModel(model, adam, int(meta["step"]), run)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Example:
    sample_id: str
    ref_u8: np.ndarray
    target_u8: np.ndarray
    boxes: list[BoxSpec]

    @property
    def ref(self) -> np.ndarray:
        return to_unit(self.ref_u8)

    @property
    def target(self) -> np.ndarray:
        return to_unit(self.target_u8)


def load_split(data_dir: str | Path, split: str, limit: int | None = None) -> list[Example]:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    out = []
    for entry in manifest.split(split)[:limit]:
        instr = load_instructions(data_dir / entry["instructions"])
        out.append(
            Example(
                sample_id=entry["id"],
                ref_u8=read_ppm(data_dir / entry["ref"]),
                target_u8=read_ppm(data_dir / entry["target"]),
                boxes=instr.boxes,
            )
        )
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def resolve_schedule(spec: str, config: ModelConfig) -> LayerSchedule:
    return parse_schedule(spec, config.num_layers, config.early_count, config.late_count)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Batch sampling randomness is a function of (seed, step) only, which
    makes resumed runs continue identically."""
    return np.random.default_rng([seed, step])


def sample_training_batch(model: MMDiT, data: Sequence[Example], batch: int, rng: np.random.Generator):
    idx = rng.choice(len(data), size=min(batch, len(data)), replace=False)
    triples = []
    for i in idx:
        ex = data[int(i)]
        triples.append((ex.ref, ex.target, prepare_task(model.config, ex.boxes)))
    return make_batch(triples, rng)


def make_optimizer(model: MMDiT, run: RunConfig, state: nx.AdamState | None = None) -> nx.Adam:
    opt = nx.Adam(model.trainable(), lr=run.lr, betas=(run.beta1, run.beta2), eps=run.eps)
    if state is not None:
        opt.state = state
    return opt


def train(
    model: MMDiT,
    data: Sequence[Example],
    run: RunConfig,
    out_dir: str | Path,
    opt: nx.Adam | None = None,
    start_step: int = 0,
    ckpt_name: str = "model.ckpt",
) -> list[float]:
    """Train to ``run.steps`` optimizer steps, writing ``loss.csv`` (one row
    per step) and checkpoints every ``run.ckpt_every`` steps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    opt = opt or make_optimizer(model, run)
    sched = resolve_schedule(run.schedule, model.config)
    log_path = out / "loss.csv"
    rows: list[list[str]] = []
    if start_step and log_path.exists():
        with log_path.open() as fh:
            rows = [r for r in csv.reader(fh)][1:start_step + 1]
    losses = []
    t0 = time.time()
    with log_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows(rows)
        fh.flush()
        for step in range(start_step, run.steps):
            rng = step_rng(run.seed, step)
            batch = sample_training_batch(model, data, run.batch, rng)
            loss = train_step(model, batch, opt, sched)
            losses.append(loss)
            writer.writerow([step + 1, repr(loss)])
            fh.flush()
            if (step + 1) % 50 == 0:
                log.info("step %d loss %.5f (%.2fs/step)", step + 1, loss, (time.time() - t0) / (step + 1 - start_step))
            if (step + 1) % run.ckpt_every == 0 or step + 1 == run.steps:
                save_model(out / ckpt_name, model, opt, step + 1, run)
    if start_step >= run.steps:
        save_model(out / ckpt_name, model, opt, run.steps, run)
    return losses


# ---------------------------------------------------------------------------
# editing and evaluation
# ---------------------------------------------------------------------------


def edit_image(
    model: MMDiT,
    ref_u8: np.ndarray,
    boxes: Sequence[BoxSpec],
    steps: int = 16,
    sched: LayerSchedule | None = None,
    seed: int = 0,
    strings: Sequence[str] | None = None,
) -> np.ndarray:
    task = prepare_task(model.config, boxes, strings)
    _, img = sample_edit(model, to_unit(ref_u8), task, SamplerConfig(steps, sched), seed)
    return img


def eval_seed(seed: int, sample_id: str) -> int:
    return int(np.random.SeedSequence([seed, int(sample_id)]).generate_state(1)[0])


def evaluate(
    model: MMDiT,
    examples: Sequence[Example],
    steps: int = 16,
    sched: LayerSchedule | None = None,
    seed: int = 0,
    use_targets: bool = False,
) -> EvalReport:
    """Edit every example and score it. ``use_targets`` scores the
    ground-truth targets instead of model output (metric sanity check)."""
    font = default_font()
    decode = lambda img, box: decode_glyphs(img, box, font)
    report = EvalReport()
    for ex in examples:
        if use_targets:
            edited = ex.target_u8
        else:
            edited = edit_image(model, ex.ref_u8, ex.boxes, steps, sched, eval_seed(seed, ex.sample_id))
        report.samples.append(score_sample(ex.sample_id, ex.ref_u8, edited, ex.target_u8, ex.boxes, decode))
    return report


def swap_probe(
    model: MMDiT,
    ex: Example,
    steps: int = 16,
    sched: LayerSchedule | None = None,
    seed: int = 0,
) -> tuple[float, float] | None:
    """Prompt-swap probe: exchange the first two instances' target strings
    and return the mean absolute pixel change (outside, inside) those two boxes.

    The inside value shows how strongly the model reacts to its prompts at all.
    ``None`` for single-instance samples.
    """
    if len(ex.boxes) < 2:
        return None
    strings = [b.tgt for b in ex.boxes]
    swapped = list(strings)
    swapped[0], swapped[1] = swapped[1], swapped[0]
    s = eval_seed(seed, ex.sample_id)
    a = edit_image(model, ex.ref_u8, ex.boxes, steps, sched, s, strings)
    b = edit_image(model, ex.ref_u8, ex.boxes, steps, sched, s, swapped)
    inside = box_union_mask(ex.ref_u8.shape[:2], ex.boxes[:2])
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    return float(diff[~inside].mean()), float(diff[inside].mean())


def swap_leakage(
    model: MMDiT,
    ex: Example,
    steps: int = 16,
    sched: LayerSchedule | None = None,
    seed: int = 0,
) -> float | None:
    """Mean absolute pixel change outside the two swapped boxes (see ``swap_probe``)."""
    probe = swap_probe(model, ex, steps, sched, seed)
    return None if probe is None else probe[0]


def ablation_table(
    model: MMDiT,
    examples: Sequence[Example],
    steps: int = 16,
    seed: int = 0,
) -> list[dict]:
    """Evaluate all eight (early, mid, late) regime assignments."""
    c = model.config
    rows = []
    for triple in SCHEDULE_TABLE:
        sched = schedule(c.num_layers, c.early_count, c.late_count, triple)
        agg = evaluate(model, examples, steps, sched, seed).aggregate()
        rows.append({"early": triple[0], "mid": triple[1], "late": triple[2], **agg})
        log.info("ablation %s: %s", "/".join(triple), json.dumps(agg))
    return rows
