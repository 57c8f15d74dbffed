"""Certified accuracy as a function of curriculum depth.

Trains the toy model with the last k stages of the ablation curriculum for
k = 1, 2, 3 (same total epoch budget each time) and reports voted clean and
certified accuracy per run, to show how much the earlier wide-band stages
contribute at this scale.

Usage:
    python scripts/stage_ablation.py [--seed 0] [--total-epochs 48]
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from bandcert.certification import CertifyConfig, evaluate
from bandcert.data import DatasetSpec, load_dataset, stack_images
from bandcert.model import ModelConfig, plan_windows
from bandcert.training import StageConfig, build_default_plan, train_full

BAND_WIDTH = 4


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--total-epochs", type=int, default=48,
                    help="epoch budget split evenly over the kept stages")
    ap.add_argument("--finetune-epochs", type=int, default=30)
    args = ap.parse_args()

    cfg = ModelConfig(image_side=16, patch_size=4, embed_dim=32, num_layers=3,
                      num_heads=4, mlp_ratio=2.0, num_classes=3, codebook_size=32)
    spec = DatasetSpec(source="synthetic", path=None, num_classes=3, image_side=16,
                       upsample_factor=1, train_size=150, test_size=60, seed=args.seed)
    train_x, train_y = stack_images(load_dataset(spec, "train"))
    test_x, test_y = stack_images(load_dataset(spec, "test"))
    wplan = plan_windows(cfg, BAND_WIDTH)
    cert_cfg = CertifyConfig(band_width=BAND_WIDTH)

    full = build_default_plan(cfg, BAND_WIDTH, epochs_per_stage=1)
    print(f"{'stages':>6s} {'keep widths':>14s} {'clean':>7s} {'cert 2x2':>9s} {'secs':>6s}")
    for k in range(1, len(full.stages) + 1):
        kept = full.stages[-k:]
        per_stage = max(1, args.total_epochs // k)
        plan = build_default_plan(cfg, BAND_WIDTH, epochs_per_stage=per_stage,
                                  lr=1e-3, finetune_epochs=args.finetune_epochs,
                                  finetune_lr=2e-3, batch_size=16)
        plan.stages = [StageConfig(keep_width=s.keep_width,
                                   reconstruct_ratio=s.reconstruct_ratio,
                                   epochs=per_stage, lr=s.lr)
                       for s in plan.stages[-k:]]
        t0 = time.time()
        params, _, _ = train_full(cfg, plan, train_x, train_y, seed=args.seed)
        result = evaluate(test_x, test_y, params, wplan, cert_cfg)
        widths = ",".join(str(s.keep_width) for s in kept)
        print(f"{k:>6d} {widths:>14s} {result.summary['clean_accuracy']:>7.3f} "
              f"{result.summary['certified_accuracy']['2x2']:>9.3f} "
              f"{time.time() - t0:>6.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
