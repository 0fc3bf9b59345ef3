"""Command-line entry point: ``idfm <command> ...``.

Failures exit with status 2 and print one JSON line
``{"error": <kind>, "message": <text>}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint
from .config import ConfigError, RunConfig, load_instructions
from .encoder import VocabError
from .imageio import ImageFormatError, read_ppm, write_pgm, write_ppm
from .masks import build_dis, build_har, mask_to_image
from .metrics import elo
from .mmdit import MMDiT, prepare_task
from .partition import LayoutError
from .synthbench import SynthConfig, gen_dataset

log = logging.getLogger("idfm")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(max_boxes=args.max_boxes)
    manifest = gen_dataset(args.out, args.n_train, args.n_test, args.seed, cfg)
    hist: dict[int, int] = {}
    for s in manifest.samples:
        hist[s["num_boxes"]] = hist.get(s["num_boxes"], 0) + 1
    summary = {
        "out": str(args.out),
        "train": len(manifest.split("train")),
        "test": len(manifest.split("test")),
        "boxes_histogram": {str(k): hist[k] for k in sorted(hist)},
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .pipeline import load_model, load_split, make_optimizer, save_model, train

    run = RunConfig.load(args.config)
    if args.steps is not None:
        run = replace(run, steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_split(args.data, "train", args.limit)
    if not data:
        raise CliError("data", f"no training samples under {args.data}")
    resume = out / "model.ckpt"
    opt = None
    start = 0
    if args.lora:
        if not args.base:
            raise CliError("usage", "--lora needs --base <checkpoint>")
        if resume.exists():
            loaded = load_model(resume)
            model, start = loaded.model, loaded.step
            opt = make_optimizer(model, run, loaded.adam)
        else:
            model = load_model(args.base).model
            if model.lora:
                model.lora_merge()
            model.lora_attach(rank=run.lora.rank, alpha=run.lora.alpha, seed=run.seed,
                              train_embeddings=run.lora.train_embeddings)
    elif resume.exists():
        loaded = load_model(resume)
        model, start = loaded.model, loaded.step
        opt = make_optimizer(model, run, loaded.adam)
    else:
        model = MMDiT(run.model, seed=run.seed)
    log.info("training %d parameters (%d trainable) from step %d", model.num_parameters(),
             model.num_parameters(trainable_only=True), start)
    losses = train(model, data, run, out, opt=opt, start_step=start)
    print(json.dumps({"out": str(out), "steps": run.steps, "last_loss": losses[-1] if losses else None}))
    return 0


def _load_trained(path: str) -> MMDiT:
    from .pipeline import load_model

    return load_model(path).model


def cmd_edit(args) -> int:
    from .pipeline import edit_image, resolve_schedule

    model = _load_trained(args.ckpt)
    instr = load_instructions(args.instructions)
    image_path = args.image or (Path(args.instructions).parent / instr.image)
    ref = read_ppm(image_path)
    c = model.config
    if ref.shape != (c.image_h, c.image_w, c.channels):
        raise CliError("shape", f"image is {ref.shape}, model expects {(c.image_h, c.image_w, c.channels)}")
    sched = resolve_schedule(args.schedule, c)
    edited = edit_image(model, ref, instr.boxes, args.steps, sched, args.seed)
    write_ppm(args.out, edited)
    print(json.dumps({"out": str(args.out), "instances": len(instr.boxes), "schedule": sched.label()}))
    return 0


def cmd_eval(args) -> int:
    from .pipeline import ablation_table, evaluate, load_split, resolve_schedule

    model = _load_trained(args.ckpt) if args.ckpt else None
    examples = load_split(args.data, "test", args.limit)
    if model is None and not args.ground_truth:
        raise CliError("usage", "--ckpt is required unless --ground-truth is given")
    if args.ground_truth:
        report = evaluate(model, examples, use_targets=True)
        out = {"mode": "ground-truth", **report.to_dict()}
    else:
        sched = resolve_schedule(args.schedule, model.config)
        report = evaluate(model, examples, args.steps, sched, args.seed)
        out = {"mode": "model", "schedule": sched.label(), **report.to_dict()}
        if args.ablation:
            out["ablation"] = ablation_table(model, examples, args.steps, args.seed)
    _write_json(Path(args.report), out)
    if args.csv:
        _write_csv(Path(args.csv), out)
    print(json.dumps({"report": str(args.report), "aggregate": out["aggregate"]}, sort_keys=True))
    if args.ablation and "ablation" in out:
        print(format_ablation(out["ablation"]))
    return 0


def format_ablation(rows) -> str:
    head = f"{'L_early':8}{'L_mid':8}{'L_late':8}{'CER':>8}{'MAE_B':>9}{'AR[%]':>8}"
    lines = [head]
    for r in rows:
        lines.append(
            f"{r['early']:8}{r['mid']:8}{r['late']:8}{r['cer']:8.3f}{r['mae_b']:9.3f}{r['attempt_rate']:8.1f}"
        )
    return "\n".join(lines)


def _write_csv(path: Path, report: dict) -> None:
    buf = io.StringIO()
    rows = report["samples"]
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    path.write_text(buf.getvalue())


def cmd_dump_masks(args) -> int:
    instr = load_instructions(args.instructions)
    run = RunConfig.load(args.config)
    task = prepare_task(replace(run.model, masked=True), instr.boxes)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    dis, har = build_dis(task.layout), build_har(task.layout)
    write_pgm(f"{prefix}_dis.pgm", mask_to_image(dis))
    write_pgm(f"{prefix}_har.pgm", mask_to_image(har))
    _write_json(Path(f"{prefix}_layout.json"), task.layout.to_dict())
    print(json.dumps({"seq_len": task.layout.seq_len, "instances": task.layout.num_instances, "prefix": str(prefix)}))
    return 0


def read_judgments(path: str) -> list[tuple[str, str, str]]:
    games = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CliError("judgments", f"{path}:{lineno}: {exc.msg}") from exc
        if not isinstance(rec, dict) or set(rec) != {"a", "b", "result"}:
            raise CliError("judgments", f"{path}:{lineno}: expected keys a, b, result")
        if rec["result"] not in ("a", "b", "draw"):
            raise CliError("judgments", f"{path}:{lineno}: result must be a, b or draw")
        games.append((str(rec["a"]), str(rec["b"]), rec["result"]))
    return games


def cmd_elo(args) -> int:
    games = read_judgments(args.judgments)
    ratings = elo(games, k=args.k, init=args.init, epochs=args.epochs, seed=args.seed)
    for player, r in sorted(ratings.items(), key=lambda kv: (-kv[1], kv[0])):
        print(f"{player}\t{r:.4f}")
    return 0


def cmd_ab(args) -> int:
    from .experiments import run_ab

    run = RunConfig.load(args.config)
    if args.steps is not None:
        run = replace(run, steps=args.steps)
    if args.batch is not None:
        run = replace(run, batch=args.batch)
    res = run_ab(args.data, args.out, run, n_eval=args.limit)
    print(json.dumps(res["verdict"]))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idfm", description="instance-disentangled flow-matching editing (desk scale)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-boxes", type=int, default=4)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train (or LoRA-adapt) a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--limit", type=int, help="use only the first N training samples")
    t.add_argument("--lora", action="store_true")
    t.add_argument("--base")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("edit", help="edit one image in a single sampling run")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--image", help="defaults to the instruction file's image field")
    e.add_argument("--instructions", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--steps", type=int, default=16)
    e.add_argument("--schedule", default="default")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_edit)

    v = sub.add_parser("eval", help="score edits on the test split")
    v.add_argument("--ckpt")
    v.add_argument("--data", required=True)
    v.add_argument("--report", required=True)
    v.add_argument("--csv")
    v.add_argument("--steps", type=int, default=16)
    v.add_argument("--schedule", default="default")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--limit", type=int)
    v.add_argument("--ablation", action="store_true", help="also evaluate all 8 layer-regime assignments")
    v.add_argument("--ground-truth", action="store_true", help="score the dataset targets themselves")
    v.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-masks", help="write both attention masks as PGM plus the layout")
    d.add_argument("--instructions", required=True)
    d.add_argument("--config")
    d.add_argument("--out-prefix", required=True)
    d.set_defaults(func=cmd_dump_masks)

    r = sub.add_parser("elo", help="Elo ratings from a JSON-lines judgment log")
    r.add_argument("--judgments", required=True)
    r.add_argument("--k", type=float, default=32.0)
    r.add_argument("--init", type=float, default=1200.0)
    r.add_argument("--epochs", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_elo)

    a = sub.add_parser("ab-experiment", help="train masked and unmasked models and compare them")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--steps", type=int)
    a.add_argument("--batch", type=int)
    a.add_argument("--limit", type=int, help="evaluate on the first N test samples")
    a.set_defaults(func=cmd_ab)
    return p


_ERROR_KINDS = (
    (ConfigError, "config"),
    (checkpoint.CheckpointError, "checkpoint"),
    (ImageFormatError, "image"),
    (LayoutError, "layout"),
    (VocabError, "vocab"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
    (ValueError, "value"),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        kind, msg = exc.kind, str(exc)
    except Exception as exc:  # noqa: BLE001 - mapped to a machine-readable line
        for cls, name in _ERROR_KINDS:
            if isinstance(exc, cls):
                kind, msg = name, str(exc)
                break
        else:
            raise
    print(json.dumps({"error": kind, "message": msg}), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
