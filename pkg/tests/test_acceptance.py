"""Acceptance criteria, one test group per criterion.

A PASS/FAIL line per criterion is printed in the terminal summary. The
desk-scale A/B experiment (criterion 6) takes hours on one CPU core, so by
default its recorded report under ``tests/fixtures`` is validated; set
``IDFM_RUN_AB=1`` to retrain both models and require the fresh run to
reproduce the recorded report.
"""

import json
import os
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from idfm import checkpoint
from idfm.cli import main
from idfm.config import RunConfig
from idfm.flow import SamplerConfig, euler_integrate
from idfm.masks import DIS, HAR, SCHEDULE_TABLE, build_mask, oracle_mask
from idfm.metrics import attempt_rate, cer, elo, ssim_region
from idfm.mmdit import MMDiT, ModelConfig, prepare_task
from idfm.partition import BoxSpec
from conftest import fd_check, random_layout
from modelkit import isolation_trial, norm_loss, random_images, tiny_config
from test_numerics import PRIMITIVES, _ops

FIXTURES = Path(__file__).parent / "fixtures"
C = pytest.mark.criterion


# 1 -------------------------------------------------------------------------

@C(1, "mask-oracle equivalence over 200 random layouts in < 10 s")
def test_c1_mask_oracle():
    rng = np.random.default_rng(1)
    t0 = time.time()
    overlaps = 0
    for _ in range(200):
        lay = random_layout(rng)
        assert lay.num_instances <= 4 and lay.seq_len <= 256
        shared = [set(a) & set(b) for i, a in enumerate(lay.l_inst) for b in lay.l_inst[i + 1:]]
        overlaps += any(shared)
        for regime in (DIS, HAR):
            assert build_mask(lay, regime) == oracle_mask(lay, regime)
    elapsed = time.time() - t0
    print(f"200 layouts, {overlaps} with overlapping boxes, {elapsed:.2f}s")
    assert overlaps > 0
    assert elapsed < 10.0


# 2 -------------------------------------------------------------------------

@C(2, "N=0: IDAttn forward equals unmasked joint attention bitwise (20 draws)")
def test_c2_vanilla_degeneracy():
    cfg = ModelConfig()
    plain_cfg = ModelConfig(masked=False)
    model = MMDiT(cfg)
    for draw in range(20):
        rng = np.random.default_rng(100 + draw)
        model.randomize(200 + draw, std=0.1)
        x_t, ref = random_images(rng, cfg)
        t = float(rng.uniform())
        a = model.velocity(x_t, ref, prepare_task(cfg, []), t)
        b = model.velocity(x_t, ref, prepare_task(plain_cfg, []), t)
        assert np.array_equal(a, b)


# 3 -------------------------------------------------------------------------

@C(3, "all-dis isolation is exact over 50 trials; default schedule leaks")
def test_c3_isolation():
    cfg = ModelConfig()
    model = MMDiT(cfg)
    model.randomize(3, std=0.1)
    rng = np.random.default_rng(33)
    worst = max(isolation_trial(model, rng, "all-dis") for _ in range(50))
    assert worst == 0.0
    rng = np.random.default_rng(34)
    leaks = [isolation_trial(model, rng, "default") for _ in range(50)]
    print(f"all-dis max change {worst}; default schedule changed {sum(v > 0 for v in leaks)}/50 trials")
    assert max(leaks) > 0.0


# 4 -------------------------------------------------------------------------

@C(4, "autodiff vs central differences, rel err < 1e-6 (primitives + 2-layer d=8 model)")
@pytest.mark.parametrize("name", PRIMITIVES)
def test_c4_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()) + 1)
    fn, inputs = _ops(rng)[name]
    assert fd_check(fn, inputs, rng, points=20) < 1e-6


@C(4, "autodiff vs central differences, rel err < 1e-6 (primitives + 2-layer d=8 model)")
def test_c4_model_gradients():
    cfg = tiny_config()
    assert cfg.num_layers == 2 and cfg.d_model == 8
    model = MMDiT(cfg, seed=1)
    model.randomize(9, std=0.3)
    rng = np.random.default_rng(4)
    x_t, ref = random_images(rng, cfg)
    task = prepare_task(cfg, [BoxSpec(0, 0, 4, 4, "", "AB"), BoxSpec(4, 4, 4, 4, "", "C")])
    err = fd_check(lambda *_: norm_loss(model, x_t, ref, task, 0.42), list(model.params.values()), rng)
    print(f"end-to-end worst relative error {err:.2e}")
    assert err < 1e-6


# 5 -------------------------------------------------------------------------

class _Const:
    def __init__(self, c):
        self.c = c

    def velocity(self, x_t, ref, task, t, sched=None):
        return self.c


@C(5, "Euler on a constant field returns x0 + c to machine precision")
@pytest.mark.parametrize("steps", [1, 4, 16])
def test_c5_euler(steps):
    rng = np.random.default_rng(steps)
    x0 = rng.standard_normal((48, 48, 3))
    c = rng.uniform(-2, 2, (48, 48, 3))
    out = euler_integrate(_Const(c), x0, None, None, SamplerConfig(steps))
    bound = steps * np.finfo(float).eps * (np.abs(x0) + np.abs(c))
    assert np.all(np.abs(out - (x0 + c)) <= bound)


# 6 -------------------------------------------------------------------------

def _check_ab_report(rep):
    cfg = rep["config"]
    assert cfg["model"]["num_layers"] == 8 and cfg["steps"] == 5000
    assert rep["n_train"] == 2000 and rep["n_eval"] == 100
    a, b = rep["variants"]["idattn"], rep["variants"]["unmasked"]
    assert a["params"] == b["params"] and 400_000 <= a["params"] <= 700_000
    print(
        f"MAE_B idattn {a['aggregate']['mae_b']:.4f} vs unmasked {b['aggregate']['mae_b']:.4f}; "
        f"swap leakage idattn {a['swap_leakage']:.4f} vs unmasked {b['swap_leakage']:.4f}"
    )
    assert a["aggregate"]["mae_b"] < b["aggregate"]["mae_b"]
    assert a["swap_leakage"] < b["swap_leakage"]


@C(6, "desk-scale A/B: IDAttn has lower MAE_B and lower prompt-swap leakage")
def test_c6_ab_experiment(tmp_path):
    recorded = json.loads((FIXTURES / "ab_report.json").read_text())
    _check_ab_report(recorded)
    if os.environ.get("IDFM_RUN_AB") != "1":
        return
    from idfm.experiments import run_ab

    data = Path(os.environ.get("IDFM_AB_DATA", tmp_path / "data"))
    if not (data / "manifest.json").exists():
        assert main(["gen-data", "--out", str(data), "--seed", "0"]) == 0
    run = RunConfig.from_dict(recorded["config"])
    out = Path(os.environ.get("IDFM_AB_OUT", tmp_path / "ab"))
    fresh = run_ab(data, out, run, n_eval=recorded["n_eval"])
    _check_ab_report(fresh)
    for name in ("idattn", "unmasked"):
        assert fresh["variants"][name]["aggregate"] == recorded["variants"][name]["aggregate"]
        assert fresh["variants"][name]["swap_leakage"] == recorded["variants"][name]["swap_leakage"]


# 7 -------------------------------------------------------------------------

@C(7, "metric unit examples hold exactly")
def test_c7_metrics():
    assert cer("KITTEN", "SITTING") == 3 / 7
    assert cer("BONJOUR", "BONJOUR") == 0.0 and cer("", "ABC") == 1.0
    ref = np.full((12, 12, 3), 100, np.uint8)
    box = [BoxSpec(0, 0, 4, 6)]
    plus10, plus11 = ref.copy(), ref.copy()
    plus10[:6, :4] += 10
    plus11[:6, :4] += 11
    assert attempt_rate(ref, plus10, box) == 0.0
    assert attempt_rate(ref, plus11, box) == 100.0
    assert elo([("a", "b", "a")]) == {"a": 1216.0, "b": 1184.0}
    noisy = np.random.default_rng(0).integers(0, 256, (16, 16, 3)).astype(np.uint8)
    assert ssim_region(noisy, noisy, np.ones((16, 16), bool)) == 1.0


# 8 -------------------------------------------------------------------------

TINY_RUN = {
    "model": {"num_layers": 2, "d_model": 16, "heads": 2, "early_count": 1, "late_count": 0,
              "time_dim": 16, "freq_dim": 16, "utility_len": 4},
    "batch": 2, "steps": 2, "sampler_steps": 2, "ckpt_every": 1,
}


@pytest.fixture(scope="module")
def tiny_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc")
    (root / "run.json").write_text(json.dumps(TINY_RUN))
    assert main(["gen-data", "--out", str(root / "data"), "--n-train", "6", "--n-test", "3", "--seed", "2"]) == 0
    assert main(["train", "--config", str(root / "run.json"), "--data", str(root / "data"), "--out", str(root / "m")]) == 0
    return root


@C(8, "eval CLI produces the full 8-row schedule ablation with CER/MAE_B/AR")
def test_c8_ablation_harness(tiny_env, capsys):
    rep = tiny_env / "abl.json"
    argv = ["eval", "--ckpt", str(tiny_env / "m" / "model.ckpt"), "--data", str(tiny_env / "data"),
            "--report", str(rep), "--steps", "1", "--limit", "2", "--ablation"]
    assert main(argv) == 0
    rows = json.loads(rep.read_text())["ablation"]
    assert [(r["early"], r["mid"], r["late"]) for r in rows] == list(SCHEDULE_TABLE)
    for r in rows:
        for key in ("cer", "mae_b", "attempt_rate"):
            assert isinstance(r[key], float)
    table = capsys.readouterr().out.strip().splitlines()[-9:]
    print("\n".join(table))
    assert table[0].split() == ["L_early", "L_mid", "L_late", "CER", "MAE_B", "AR[%]"]
    assert len(table) == 9


# 9 -------------------------------------------------------------------------

@C(9, "checkpoint round trip is bitwise; seeded CLI commands repeat byte-identically")
def test_c9_checkpoint_roundtrip(tiny_env):
    raw = (tiny_env / "m" / "model.ckpt").read_bytes()
    cfg, tensors = checkpoint.decode(raw)
    assert checkpoint.encode(cfg, tensors) == raw


def _snapshot(path):
    path = Path(path)
    if path.is_file():
        return {"file": path.read_bytes()}
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@C(9, "checkpoint round trip is bitwise; seeded CLI commands repeat byte-identically")
@pytest.mark.parametrize("command", ["gen-data", "train", "edit", "eval", "dump-masks", "elo", "ab-experiment"])
def test_c9_cli_determinism(tiny_env, tmp_path, capsys, command):
    env = tiny_env
    instr = sorted((env / "data" / "test").glob("*.json"))[0]
    judg = tmp_path / "j.jsonl"
    judg.write_text("".join(json.dumps({"a": a, "b": b, "result": r}) + "\n"
                            for a, b, r in [("p", "q", "a"), ("q", "r", "draw"), ("r", "p", "b")]))

    def argv(k):
        out = tmp_path / f"out{k}"
        return {
            "gen-data": (["gen-data", "--out", out, "--n-train", 4, "--n-test", 2, "--seed", 9], out),
            "train": (["train", "--config", env / "run.json", "--data", env / "data", "--out", out], out),
            "edit": (["edit", "--ckpt", env / "m" / "model.ckpt", "--instructions", instr,
                      "--out", f"{out}.ppm", "--steps", 2, "--seed", 4], f"{out}.ppm"),
            "eval": (["eval", "--ckpt", env / "m" / "model.ckpt", "--data", env / "data",
                      "--report", f"{out}.json", "--steps", 2, "--seed", 4], f"{out}.json"),
            "dump-masks": (["dump-masks", "--instructions", instr, "--out-prefix", out / "m"], out),
            "elo": (["elo", "--judgments", judg, "--seed", 3], None),
            "ab-experiment": (["ab-experiment", "--config", env / "run.json", "--data", env / "data",
                               "--out", out, "--limit", 2], out),
        }[command]

    snaps = []
    for k in range(2):
        args, target = argv(k)
        capsys.readouterr()
        assert main([str(a) for a in args]) == 0
        stdout = capsys.readouterr().out.replace(f"out{k}", "outK")
        snaps.append((stdout, _snapshot(target) if target else {}))
    assert snaps[0] == snaps[1]
