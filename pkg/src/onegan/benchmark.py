"""Desk-scale synthetic benchmark: train on synthetic scenes, then score
segmentation, clustering and conditional generation on held-out scenes.

Runs are resumable: checkpoints land in ``<out>/<tag>/checkpoints`` and a
rerun continues from the latest one. The final scores go to
``<out>/<tag>/results.json``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np

from .core import HyperParams, LossWeights, RunConfig
from .data import BatchIterator, SyntheticSceneSpec, generate_synthetic, to_tensor
from .eval import (
    clustering_eval,
    config_digest,
    generation_eval,
    segmentation_eval,
    train_oracle_classifier,
)
from .training import ABLATIONS, Trainer, apply_ablation

__all__ = ["BENCHMARK_HP", "GATES", "benchmark_config", "is_full_scale", "run_benchmark", "check_gates", "main"]

logger = logging.getLogger(__name__)

BENCHMARK_HP = dict(
    N_P=3,
    N_C=12,
    H=64,
    channel_scale=0.5,
    batch_size=20,
    phase1_iters=5_000,
    total_iters=20_000,
    real_recon_delay=2_000,
    encoder_warmup_iters=500,
)
N_IMAGES = 2_000
N_EVAL = 200

# metric -> minimum; iou/dice as fractions
GATES = {"iou": 0.60, "dice": 0.70, "nmi": 0.50, "cis": 3.0}


def benchmark_config(seed: int = 0, **overrides) -> RunConfig:
    hp = HyperParams(**{**BENCHMARK_HP, **overrides})
    return RunConfig(hp=hp, weights=LossWeights(), seed=seed, hflip=True)


def is_full_scale(result: dict) -> bool:
    """True when a results file comes from the complete benchmark protocol."""
    hp = result.get("hyperparams", {})
    keys = ("N_P", "N_C", "H", "channel_scale", "batch_size", "total_iters")
    return (
        all(hp.get(k) == BENCHMARK_HP[k] for k in keys)
        and result.get("iterations") == BENCHMARK_HP["total_iters"]
        and result.get("n_images") == N_IMAGES
        and result.get("n_eval") == N_EVAL
    )


def _latest_checkpoint(ckpt_root: Path) -> Path | None:
    done = sorted(p for p in ckpt_root.glob("iter_*") if (p / "manifest.json").exists())
    return done[-1] if done else None


def check_gates(scores: dict) -> dict[str, bool]:
    return {k: scores.get(k) is not None and scores[k] >= v for k, v in GATES.items()}


def run_benchmark(
    out: str | Path,
    ablation: str = "default",
    seed: int = 0,
    n_images: int = N_IMAGES,
    n_eval: int = N_EVAL,
    checkpoint_every: int = 500,
    device: str = "cpu",
    **hp_overrides,
) -> dict:
    cfg = apply_ablation(benchmark_config(seed, **hp_overrides), ablation)
    hp = cfg.hp
    run_dir = Path(out) / ablation
    ckpt_root = run_dir / "checkpoints"
    ckpt_root.mkdir(parents=True, exist_ok=True)

    spec = SyntheticSceneSpec(n_parents=hp.N_P, colors_per_shape=hp.N_C // hp.N_P, H=hp.H)
    # one dataset for every variant of a seed; training never sees the held-out tail
    ds = generate_synthetic(spec, n_images + n_eval, np.random.default_rng(seed), n_backgrounds=n_images)
    train_x, eval_x = to_tensor(ds.images[:n_images]), to_tensor(ds.images[n_images:])
    batches = BatchIterator(train_x, to_tensor(ds.backgrounds), hp.batch_size, seed=seed, hflip=cfg.hflip)

    trainer = Trainer(cfg, device)
    latest = _latest_checkpoint(ckpt_root)
    if latest is not None:
        data_state = trainer.load(latest)
        if data_state is not None:
            batches.load_state_dict(data_state)
        logger.info("resumed %s at iteration %d", ablation, trainer.iteration)

    t0 = time.perf_counter()
    start_iter = trainer.iteration
    with open(run_dir / "metrics.log", "a") as log:
        while trainer.iteration < hp.total_iters:
            obj, bg = next(batches)
            for r in trainer.step(obj, bg):
                log.write(r.to_line() + "\n")
            if trainer.iteration % checkpoint_every == 0 or trainer.iteration == hp.total_iters:
                log.flush()
                trainer.save(ckpt_root / f"iter_{trainer.iteration:07d}", batches.state_dict())
    train_seconds = time.perf_counter() - t0

    model = trainer.model
    digest = config_digest(dataclasses.asdict(cfg))
    iou_r, dice_r = segmentation_eval(model, eval_x, ds.masks[n_images:], digest=digest)
    clus = clustering_eval(model, eval_x, ds.phi_c[n_images:], k=hp.N_C, seed=seed, digest=digest)
    oracle = train_oracle_classifier(train_x, ds.phi_c[:n_images], hp.N_C, seed=seed)
    scores = {
        "iou": iou_r.value / 100,
        "dice": dice_r.value / 100,
        "nmi": clus["nmi"].value,
        "ami": clus["ami"].value,
        "oracle_accuracy": oracle.accuracy,
        "cis": None,
        "gen_nmi": None,
    }
    if oracle.certified:
        gen = generation_eval(model, oracle, per_class=50, seed=seed, digest=digest)
        scores["cis"] = gen["cis"].value
        scores["gen_nmi"] = gen["gen_nmi"].value
    result = {
        "ablation": ablation,
        "seed": seed,
        "iterations": trainer.iteration,
        "hyperparams": dataclasses.asdict(hp),
        "weights": dataclasses.asdict(cfg.weights),
        "n_images": n_images,
        "n_eval": n_eval,
        "train_seconds_this_session": train_seconds,
        "resumed_from": start_iter,
        "config_digest": digest,
        "scores": scores,
        "gates": check_gates(scores),
    }
    (run_dir / "results.json").write_text(json.dumps(result, indent=1))
    return result


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="onegan-benchmark", description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="benchmark_results")
    ap.add_argument("--ablation", default="default", choices=ABLATIONS)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-images", type=int, default=N_IMAGES)
    ap.add_argument("--n-eval", type=int, default=N_EVAL)
    ap.add_argument("--checkpoint-every", type=int, default=500)
    ap.add_argument("--phase1-iters", type=int)
    ap.add_argument("--total-iters", type=int)
    ap.add_argument("--real-recon-delay", type=int)
    ap.add_argument("--device", default="cpu")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    overrides = {k: v for k, v in {
        "phase1_iters": args.phase1_iters,
        "total_iters": args.total_iters,
        "real_recon_delay": args.real_recon_delay,
    }.items() if v is not None}
    res = run_benchmark(args.out, args.ablation, args.seed, args.n_images, args.n_eval,
                        args.checkpoint_every, args.device, **overrides)
    print(json.dumps(res["scores"], indent=1))
    return 0 if all(res["gates"].values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
