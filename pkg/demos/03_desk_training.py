"""A short training run on synthetic scenes, then segmentation and clustering
scores against the ground truth the generator kept aside.

This is a smoke-scale run (under a minute on a CPU), far from the
benchmark's 20,000 iterations. Colour makes the codes cluster early, while
the masks are still poor at this length. It shows the moving parts:
Phase I, discriminator cloning at the Phase II boundary, the fake and real
reconstruction paths, and the evaluation hooks.

    python3 demos/03_desk_training.py --iters 40 --out demo_out
"""
import argparse
from pathlib import Path

import torch

from onegan.benchmark import benchmark_config
from onegan.core import sample_priors
from onegan.data import BatchIterator, SyntheticSceneSpec, generate_synthetic, to_tensor
from onegan.eval import clustering_eval, segmentation_eval
from onegan.grids import decomposition_rows, image_grid, save_png
from onegan.paths import generation_path
from onegan.training import Trainer

ap = argparse.ArgumentParser()
ap.add_argument("--iters", type=int, default=40)
ap.add_argument("--out", default="demo_out")
args = ap.parse_args()

cfg = benchmark_config(seed=0, H=32, channel_scale=0.25, batch_size=8,
                       total_iters=args.iters, phase1_iters=args.iters // 2,
                       real_recon_delay=args.iters // 4, encoder_warmup_iters=2)
hp = cfg.hp
spec = SyntheticSceneSpec(n_parents=hp.N_P, colors_per_shape=hp.N_C // hp.N_P, H=hp.H)
ds = generate_synthetic(spec, 300, 0, n_backgrounds=200)
train_x, eval_x = to_tensor(ds.images[:200]), to_tensor(ds.images[200:])
batches = BatchIterator(train_x, to_tensor(ds.backgrounds), hp.batch_size, seed=0, hflip=True)

trainer = Trainer(cfg)
while trainer.iteration < hp.total_iters:
    reports = trainer.step(*next(batches))
    if trainer.iteration % 10 == 0 or trainer.iteration == hp.phase1_iters + 1:
        for r in reports:
            print(f"{trainer.iteration:4d} {r.path:11s} " +
                  " ".join(f"{k}={v:.3f}" for k, v in r.terms.items() if k in ("L_GEN", "L_AE", "L_D")))
print("discriminator sets:", list(trainer.bank.sets))

model = trainer.model.eval()
iou_r, dice_r = segmentation_eval(model, eval_x, ds.masks[200:])
clus = clustering_eval(model, eval_x, ds.phi_c[200:], k=hp.N_C)
print(f"IOU {iou_r.value:.1f}  DICE {dice_r.value:.1f}  NMI {clus['nmi'].value:.3f}  (n={iou_r.count})")

with torch.no_grad():
    q = generation_path(sample_priors(hp, torch.Generator().manual_seed(3), 8), model).quad
path = save_png(image_grid(decomposition_rows(q)), Path(args.out) / "desk_samples.png")
print(f"wrote {path}")
