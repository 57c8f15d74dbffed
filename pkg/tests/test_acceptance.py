"""End-to-end acceptance gates.

Each test checks one headline property at its stated tolerance and prints a
single PASS/FAIL line (run with ``pytest tests/test_acceptance.py -s`` to see
the lines as they happen; without ``-s`` pytest shows them on failure).
"""

import json
import os
import subprocess
import sys
import time

import numpy as np

from bandcert import autodiff as ad
from bandcert.certification import CertifyConfig, evaluate
from bandcert.model import (ModelConfig, ModelParams, batched_certify_forward,
                            count_flops, forward_band_unit, forward_global,
                            plan_windows)
from bandcert.oracles import (attention_equivalence,
                              check_certificate_soundness,
                              empirical_patch_attack, fd_gradient_report,
                              intersection_sweep, patch_locations,
                              random_vote_tables)
from bandcert.smoothing import BandSpec, ablate_batch


def report(num, name, ok, detail):
    line = f"ACCEPTANCE {num} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


def test_1_band_patch_geometry():
    t0 = time.perf_counter()
    cases, failures = intersection_sweep(max_width=64)
    elapsed = time.perf_counter() - t0
    expected_cases = sum(w * (w + 1) // 2 for w in range(1, 65))
    ok = (failures == [] and cases == expected_cases and elapsed < 10.0)
    report(1, "band/patch geometry", ok,
           f"{cases} (w, m, b) cases, {len(failures)} mismatches, {elapsed:.2f}s")


def test_2_certificate_soundness_and_sharpness():
    t0 = time.perf_counter()
    combos = [(8, 3, 0), (16, 4, 1), (24, 6, 2), (32, 10, 3)]
    checked = 0
    violations = 0
    for w, c, seed in combos:
        plain = random_vote_tables(200, w, c, seed=seed)
        near = random_vote_tables(50, w, c, seed=seed + 100,
                                  near_boundary_margin=2 * max(1, w // 8))
        for vs in np.concatenate([plain, near]):
            # a patch touching delta bands is equivalent, vote-wise, to a
            # width-1 patch against bands of width delta: both corrupt the
            # same cyclic arcs, so this one sweep covers every (m, b) split
            for delta in range(1, w // 2 + 1):
                res = check_certificate_soundness(vs, patch_width=1,
                                                  band_width=delta)
                checked += 1
                violations += not res["sound"]

    sharp_failures = 0
    for delta in range(1, 9):
        w = 4 * delta
        vs = np.zeros((w, 3), dtype=bool)
        vs[:2 * delta, 1] = True  # winner's margin is exactly 2*delta
        res = check_certificate_soundness(vs, patch_width=1, band_width=delta)
        if res["margin"] != 2 * delta or res["certified"] or not res["flippable"]:
            sharp_failures += 1
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and sharp_failures == 0 and elapsed < 30.0
    report(2, "certificate soundness", ok,
           f"1000 tables, {checked} (table, delta) checks, {violations} "
           f"violations, {sharp_failures} sharpness failures, {elapsed:.1f}s")


def test_3_empirical_falsification(toy_bundle):
    t0 = time.perf_counter()
    b = toy_bundle
    params32 = b.params.cast(np.float32)
    test32 = b.test_x.astype(np.float32)
    res = evaluate(test32, b.test_y, params32, b.window_plan, b.cert_cfg)
    certified_ids = [r["image_id"] for r in res.records if r["certified"]["2x2"]]
    locations = patch_locations(b.cfg.image_side, (2, 2), 16)

    flips = 0
    disagreements = 0
    for i in certified_ids:
        rep = empirical_patch_attack(test32[i], params32, b.window_plan,
                                     b.cert_cfg, patch_shape=(2, 2),
                                     locations=locations, trials=200,
                                     seed=0, image_id=i)
        flips += rep.flips
        disagreements += not rep.certified
    elapsed = time.perf_counter() - t0
    ok = (len(certified_ids) > 30 and flips == 0 and disagreements == 0
          and elapsed < 300.0)
    report(3, "empirical falsification", ok,
           f"{len(certified_ids)}/{len(res.records)} images certified at 2x2, "
           f"{len(locations)} locations x 200 trials each, {flips} flips, "
           f"{elapsed:.0f}s")


def test_4_attention_restriction_identity():
    cfg = ModelConfig(image_side=16, patch_size=4, embed_dim=32, num_layers=2,
                      num_heads=4, mlp_ratio=2.0, num_classes=3, codebook_size=16)
    rng = np.random.default_rng(0xACC)
    worst = {"float64": 0.0, "float32": 0.0}
    for trial in range(100):
        params = ModelParams.init(cfg, seed=trial)
        img = rng.random((1, 3, 16, 16))
        band = BandSpec(int(rng.integers(0, 16)), int(rng.integers(1, 9)))
        worst["float64"] = max(worst["float64"],
                               attention_equivalence(params, img, band)["logits"])
        worst["float32"] = max(worst["float32"],
                               attention_equivalence(params.cast(np.float32),
                                                     img, band)["logits"])

    plan = plan_windows(cfg, 4)
    imgs = rng.random((4, 3, 16, 16))
    exact = True
    for dtype in (np.float32, np.float64):
        params = ModelParams.init(cfg, seed=123).cast(dtype)
        table, _ = batched_certify_forward(imgs, params, plan)
        for p in range(cfg.image_side):
            abl = ablate_batch(imgs, np.full(4, p), 4)
            lone = forward_band_unit(abl.astype(dtype), params,
                                     BandSpec(p, 4)).logits.data
            exact = exact and np.array_equal(table[:, p, :], lone)

    ok = worst["float32"] < 1e-5 and worst["float64"] < 1e-10 and exact
    report(4, "attention restriction identity", ok,
           f"100 triples: f32 max |diff| {worst['float32']:.2e}, "
           f"f64 {worst['float64']:.2e}; batched forwards bit-identical: {exact}")


def test_5_gradient_correctness():
    rep = fd_gradient_report(seed=0, probes=100, h=1e-5)
    worst_name = max(rep, key=rep.get)
    ok = all(err < 1e-4 for err in rep.values())
    report(5, "gradient correctness", ok,
           f"{len(rep)} cases x 100 probes, worst {worst_name} "
           f"rel err {rep[worst_name]:.2e}")


def test_6_compute_reduction(toy_bundle):
    # analytic attention ratio against the window/image area ratio
    analytic_ok = True
    details = []
    for band in (4, 8):
        cfg = ModelConfig(image_side=32, patch_size=4, embed_dim=64,
                          num_layers=2, num_heads=4, mlp_ratio=4.0,
                          num_classes=10, codebook_size=16)
        full = count_flops(cfg, "global")
        unit = count_flops(cfg, "band_unit", band_width=band)
        ratio = unit.attention / full.attention
        tw = -(-band // cfg.patch_size) + 1
        target = (tw * cfg.patch_size / cfg.image_side) ** 2
        rel = abs(ratio - target) / target
        analytic_ok = analytic_ok and rel < 0.10
        details.append(f"b={band}: {rel:.1%} off")
        plan = plan_windows(cfg, band)
        analytic_ok = analytic_ok and plan.num_forwards <= band + cfg.patch_size

    # measured wall-clock speedup on the toy shape
    b = toy_bundle
    params = ModelParams.init(b.cfg, seed=0).cast(np.float32)
    rng = np.random.default_rng(0)
    images = rng.random((8, 3, 16, 16), dtype=np.float32)

    def run_global():
        for p in range(b.cfg.image_side):
            abl = ablate_batch(images, np.full(8, p), b.cert_cfg.band_width)
            forward_global(abl, params)

    def run_band():
        batched_certify_forward(images, params, b.window_plan)

    run_global(); run_band()
    t_global = min(_timed(run_global) for _ in range(5))
    t_band = min(_timed(run_band) for _ in range(5))
    speedup = t_global / t_band
    forwards = b.window_plan.num_forwards
    bound = b.cert_cfg.band_width + b.cfg.patch_size

    ok = analytic_ok and speedup > 2.0 and forwards <= bound
    report(6, "compute reduction", ok,
           f"attention ratio {', '.join(details)} (bound 10%); measured "
           f"speedup {speedup:.2f}x (bound 2x); forwards {forwards} <= {bound}")


def _timed(fn):
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def test_7_training_effectiveness(toy_bundle):
    b = toy_bundle
    clean = b.staged_eval.summary["clean_accuracy"]
    staged_cert = b.staged_eval.summary["certified_accuracy"]["2x2"]
    base_cert = b.baseline_eval.summary["certified_accuracy"]["2x2"]
    ok = (clean >= 0.90 and staged_cert > base_cert
          and b.train_seconds < 900.0)
    report(7, "training effectiveness", ok,
           f"staged clean {clean:.3f} (>= 0.90), certified 2x2 "
           f"{staged_cert:.3f} vs baseline {base_cert:.3f} (strictly greater), "
           f"both trained in {b.train_seconds:.0f}s")


TINY = [
    "--set", "data.image_side=8", "--set", "data.train_size=12",
    "--set", "data.test_size=4", "--set", "data.num_classes=3",
    "--set", "model.embed_dim=16", "--set", "model.num_layers=1",
    "--set", "model.num_heads=2", "--set", "model.mlp_ratio=2.0",
    "--set", "model.codebook_size=8",
    "--set", "train.band_width=2", "--set", "train.epochs_per_stage=1",
    "--set", "train.finetune_epochs=1", "--set", "train.batch_size=8",
    "--set", "certify.band_width=2",
]


def _cli(*args):
    proc = subprocess.run([sys.executable, "-m", "bandcert.cli", *args],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def test_8_determinism(tmp_path):
    runs = [tmp_path / "a", tmp_path / "b"]
    for out in runs:
        _cli("train", *TINY, "--out-dir", str(out))
    same = {}
    for name in ("model.ecvt", "codebook.eccb", "train_metrics.jsonl"):
        same[name] = (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()

    cert_runs = [tmp_path / "c1", tmp_path / "c2"]
    stdout = []
    for out in cert_runs:
        proc = _cli("certify", *TINY, "--out-dir", str(out),
                    "--checkpoint", str(runs[0] / "model.ecvt"))
        stdout.append(proc.stdout)
    for name in ("records.jsonl", "summary.json"):
        same[name] = ((cert_runs[0] / name).read_bytes()
                      == (cert_runs[1] / name).read_bytes())
    same["certify stdout"] = stdout[0] == stdout[1]

    ok = all(same.values())
    diffs = [k for k, v in same.items() if not v]
    report(8, "determinism", ok,
           "train and certify reruns byte-identical" if ok
           else f"mismatched: {', '.join(diffs)}")
