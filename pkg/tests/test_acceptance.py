"""Acceptance criteria 1-8, one test each.

Criteria 2-5 and 8 run the focused suites in a subprocess against their
runtime budgets. Criteria 6-7 read full-scale benchmark results from
``$ONEGAN_BENCHMARK_DIR`` (default ``<repo>/benchmark_results``); a missing
or reduced-scale result fails.
"""
import json
import os
import re
import subprocess
import sys
import time
from pathlib import Path

import pytest
import torch

from onegan.benchmark import GATES, is_full_scale
from onegan.core import MixupCoeffs
from onegan.networks import OneGAN
from onegan.paths import autoencode_path

from conftest import ACCEPTANCE_LINES, rand_images, tiny_hp

REPO = Path(__file__).resolve().parents[1]
BENCH = Path(os.environ.get("ONEGAN_BENCHMARK_DIR", REPO / "benchmark_results"))


def _record(n, ok, what, detail):
    ACCEPTANCE_LINES[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {what} ({detail})"
    print(ACCEPTANCE_LINES[n])
    assert ok, ACCEPTANCE_LINES[n]


def _suite(targets, budget):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *targets],
        cwd=REPO, capture_output=True, text=True,
    )
    elapsed = time.perf_counter() - t0
    tail = [l for l in proc.stdout.splitlines() if re.search(r"\d+ (passed|failed)", l)]
    summary = tail[-1].strip("= ") if tail else proc.stdout[-300:]
    ok = proc.returncode == 0 and elapsed < budget
    return ok, f"{summary}; {elapsed:.0f}s of {budget}s budget"


def _results(tag):
    path = BENCH / tag / "results.json"
    if not path.exists():
        return None, f"no results at {path}"
    res = json.loads(path.read_text())
    if not is_full_scale(res):
        return None, f"{path} is not a full-scale run (iterations={res.get('iterations')})"
    return res, ""


def test_criterion_1_full_scale_scope_stated():
    readme = (REPO / "README.md").read_text()
    ok = "600,000 iterations" in readme and "not reproduced" in readme
    _record(1, ok, "full-scale numbers declared out of reach", "README scope section")


def test_criterion_2_invariant_suite():
    ok, detail = _suite(["tests/test_paths.py", "tests/test_blocks.py", "tests/test_networks.py"], 300)
    _record(2, ok, "compositing, mixup, normalisation, table shapes, dataflow", detail)


def test_criterion_2_background_independent_of_override():
    hp = tiny_hp()
    model = OneGAN(hp).eval()
    I = rand_images(3, hp)
    with torch.no_grad():
        # encoder codes only: the override cannot reach the mask
        a, b = (autoencode_path(I, model, MixupCoeffs.constant(3, 1.0, 0.5), class_override=k, sample=False)
                for k in (1, hp.N_C))
        assert torch.equal(a.quad.I_m, b.quad.I_m)
        assert (a.quad.I_bg - b.quad.I_bg).abs().max() <= 1e-6
        # any mix: the background is a function of (I, I_m) alone
        for k in (1, 2, hp.N_C):
            out = autoencode_path(I, model, MixupCoeffs.constant(3, 0.0, 0.5), class_override=k, sample=False)
            _, I_bg = model.G_bg(bypass=model.E_bg(I, out.quad.I_m))
            assert (I_bg - out.quad.I_bg).abs().max() <= 1e-6


def test_criterion_3_loss_oracles():
    ok, detail = _suite(["tests/test_losses.py"], 60)
    _record(3, ok, "losses vs brute-force oracles and frozen constants", detail)


def test_criterion_4_gradient_checks():
    ok, detail = _suite(["tests/test_gradients.py"], 600)
    _record(4, ok, "finite differences vs autograd, float64, rel err < 1e-3", detail)


def test_criterion_5_schedule_and_state():
    ok, detail = _suite(["tests/test_training.py"], 300)
    _record(5, ok, "phase transitions, 3+3 clones, warmup freeze, bitwise reproducibility", detail)


def test_criterion_6_synthetic_end_to_end():
    res, why = _results("default")
    if res is None:
        _record(6, False, "desk-scale synthetic benchmark gates", why)
    s = res["scores"]
    checks = {k: s.get(k) is not None and s[k] >= v for k, v in GATES.items()}
    detail = ", ".join(f"{k}={s.get(k)} (>= {GATES[k]})" for k in GATES)
    _record(6, all(checks.values()), "desk-scale synthetic benchmark gates", detail)


def test_criterion_7_ablation_directions():
    runs, missing = {}, []
    for tag in ("default", "no-mask-reg", "phase-I-only", "no-multi-phase"):
        res, why = _results(tag)
        if res is None:
            missing.append(why)
        else:
            runs[tag] = res["scores"]
    if missing:
        _record(7, False, "ablation directions", "; ".join(missing))
    d, nm, p1, nmp = (runs[t] for t in ("default", "no-mask-reg", "phase-I-only", "no-multi-phase"))
    checks = {
        "no-mask-reg iou < default": nm["iou"] < d["iou"],
        "phase-I-only cis < default": p1["cis"] is not None and d["cis"] is not None and p1["cis"] < d["cis"],
        "no-multi-phase iou < phase-I-only": nmp["iou"] < p1["iou"],
    }
    _record(7, all(checks.values()), "ablation directions", ", ".join(f"{k}: {v}" for k, v in checks.items()))


def test_criterion_8_metric_units():
    ok, detail = _suite(["tests/test_eval.py", "tests/test_properties.py"], 300)
    _record(8, ok, "DICE/IOU identity, NMI/AMI permutation invariance, one-hot C-IS", detail)
