"""Command line: ``onegan {synth,train,generate,infer,eval,bench}``.

A training run directory holds::

    config.ini       effective configuration (re-loadable with --config)
    checkpoints/     iter_<NNNNNNN>/ checkpoint directories
    samples/         decomposition grids written every ``sample_every`` steps
    metrics.log      one loss record per path and iteration
    results.jsonl    metric records appended by ``eval``
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import benchmark
from .core import ConfigError, MixupCoeffs, RunConfig, load_config, parent_of, priors_from_indices, save_config
from .data import (
    BatchIterator,
    DataError,
    SyntheticSceneSpec,
    center_crop_resize,
    generate_synthetic,
    load_split,
    synthetic_split,
    to_tensor,
    write_split,
)
from .eval import (
    METRICS,
    MetricReport,
    append_results,
    ami,
    cluster_codes,
    config_digest,
    generation_eval,
    nmi,
    segmentation_eval,
    train_oracle_classifier,
)
from .grids import decomposition_rows, image_grid, mask_to_uint8, save_png, to_uint8
from .networks import CheckpointError, OneGAN
from .paths import autoencode_path, generation_path, segment
from .training import ABLATIONS, Trainer, apply_ablation, load_model

logger = logging.getLogger("onegan")

TASKS = ("segment", "reconstruct", "remove", "translate", "cluster")


class UsageFailure(Exception):
    """Bad arguments or inputs; reported with exit status 2."""


# ------------------------------------------------------------------ helpers

def _latest_checkpoint(run_dir: Path) -> Path | None:
    done = sorted(p for p in (run_dir / "checkpoints").glob("iter_*") if (p / "manifest.json").exists())
    return done[-1] if done else None


def _load(checkpoint: str) -> tuple[OneGAN, dict]:
    path = Path(checkpoint)
    if path.is_dir() and not (path / "manifest.json").exists():
        latest = _latest_checkpoint(path)
        if latest is None:
            raise UsageFailure(f"no checkpoint found in {path}")
        path = latest
    try:
        return load_model(path)
    except (OSError, CheckpointError, KeyError) as exc:
        raise UsageFailure(f"cannot load checkpoint {path}: {exc}") from exc


def _parse_ints(text: str | None) -> list[int]:
    if not text:
        return []
    return [int(t) for t in text.split(",") if t.strip()]


def _check_child(k: int, model: OneGAN) -> None:
    if not 1 <= k <= model.hp.N_C:
        raise UsageFailure(f"child class {k} out of range [1, {model.hp.N_C}]")


def _read_inputs(inputs: list[str], H: int) -> tuple[list[Path], torch.Tensor]:
    files: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files += sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        elif p.exists():
            files.append(p)
        else:
            raise UsageFailure(f"input {p} does not exist")
    if not files:
        raise UsageFailure("no input images")
    arrs = [center_crop_resize(np.asarray(Image.open(f).convert("RGB")), H) for f in files]
    return files, to_tensor(np.stack(arrs))


def _sample_grid(model: OneGAN, n: int, seed: int) -> np.ndarray:
    """Decomposition grid: one column per sample, rows image/foreground/mask/background."""
    g = torch.Generator().manual_seed(seed)
    hp = model.hp
    phi_c = torch.randint(1, hp.N_C + 1, (n,), generator=g)
    z = torch.randn(n, hp.d_z, generator=g)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = generation_path(priors_from_indices(phi_c, parent_of(phi_c, hp), z, hp), model)
    model.train(was_training)
    return image_grid(decomposition_rows(out.quad))


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    spec = SyntheticSceneSpec(n_parents=args.parents, colors_per_shape=args.colors, H=args.H)
    ds = generate_synthetic(spec, args.count + args.n_eval, args.seed, n_backgrounds=args.count)
    root = write_split(args.out, synthetic_split(ds, n_eval=args.n_eval))
    print(f"wrote {args.count} objects, {args.count} backgrounds, {args.n_eval} eval scenes to {root}")
    return 0


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise UsageFailure(str(exc)) from exc
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.ablation:
        cfg = apply_ablation(cfg, args.ablation)
    if args.out:
        cfg = dataclasses.replace(cfg, out=args.out)
    hp = cfg.hp
    if not cfg.dataset or not Path(cfg.dataset).exists():
        raise UsageFailure(f"dataset {cfg.dataset!r} not found")
    try:
        split = load_split(cfg.dataset, H=hp.H, with_eval_truth=False)
    except DataError as exc:
        raise UsageFailure(str(exc)) from exc

    run_dir = Path(cfg.out)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "samples").mkdir(exist_ok=True)
    save_config(cfg, run_dir / "config.ini")

    # images only: labels and masks stay behind in the records
    batches = BatchIterator.from_split(split, hp.batch_size, seed=cfg.seed, hflip=cfg.hflip)
    trainer = Trainer(cfg)
    if args.resume:
        latest = _latest_checkpoint(run_dir)
        if latest is not None:
            data_state = trainer.load(latest)
            if data_state is not None:
                batches.load_state_dict(data_state)
            logger.info("resumed from %s", latest)

    stop = hp.total_iters if args.iters is None else min(hp.total_iters, trainer.iteration + args.iters)
    with open(run_dir / "metrics.log", "a") as log:
        while trainer.iteration < stop:
            obj, bg = next(batches)
            reports = trainer.step(obj, bg)
            if trainer.iteration % cfg.log_every == 0:
                for r in reports:
                    log.write(r.to_line() + "\n")
            it = trainer.iteration
            if it % cfg.sample_every == 0:
                save_png(_sample_grid(trainer.model, 8, cfg.seed), run_dir / "samples" / f"iter_{it:07d}.png")
            if it % cfg.checkpoint_every == 0 or it == hp.phase1_iters or it == stop:
                log.flush()
                trainer.save(run_dir / "checkpoints" / f"iter_{it:07d}", batches.state_dict())
    print(f"trained to iteration {trainer.iteration} (phase {trainer.state.phase}); run dir {run_dir}")
    return 0


def cmd_generate(args) -> int:
    model, _ = _load(args.checkpoint)
    hp = model.hp
    children = _parse_ints(args.child)
    if args.parent is not None:
        if not 1 <= args.parent <= hp.N_P:
            raise UsageFailure(f"parent class {args.parent} out of range [1, {hp.N_P}]")
        under = [k for k in range(1, hp.N_C + 1) if int(parent_of(torch.tensor(k), hp)) == args.parent]
        children = [k for k in children if k in under] if children else under
    if not children:
        children = list(range(1, min(hp.N_C, 16) + 1))
    for k in children:
        _check_child(k, model)

    g = torch.Generator().manual_seed(args.seed)
    shared = torch.randn(args.n, hp.d_z, generator=g)
    rows = []
    with torch.no_grad():
        for k in children:
            z = shared if args.shared_z else torch.randn(args.n, hp.d_z, generator=g)
            phi_c = torch.full((args.n,), k, dtype=torch.long)
            out = generation_path(priors_from_indices(phi_c, parent_of(phi_c, hp), z, hp), model)
            rows += decomposition_rows(out.quad) if args.decompose else [list(to_uint8(out.quad.I))]
    path = save_png(image_grid(rows), Path(args.out) / "generate.png")
    print(f"wrote {path}")
    return 0


def _mix(n: int, beta0: float, beta1: float) -> MixupCoeffs:
    return MixupCoeffs.constant(n, beta0, beta1)


def cmd_infer(args) -> int:
    if args.task != "translate" and args.target_child:
        raise UsageFailure("--target-child only applies to the translate task")
    if args.task == "translate" and not args.target_child:
        raise UsageFailure("translate needs --target-child")
    if args.task != "cluster" and args.k is not None:
        raise UsageFailure("--k only applies to the cluster task")
    model, _ = _load(args.checkpoint)
    hp = model.hp
    files, images = _read_inputs(args.inputs, hp.H)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(args.seed)
    n = len(files)

    if args.task == "segment":
        masks = segment(images, model)
        for f, m in zip(files, mask_to_uint8(masks)):
            save_png(m[..., 0], out / f"{f.stem}_mask.png")
        print(f"wrote {n} masks to {out}")
        return 0

    if args.task == "cluster":
        k = hp.N_C if args.k is None else args.k
        try:
            labels = cluster_codes(images, model, k=k, seed=args.seed)
        except ValueError as exc:
            raise UsageFailure(str(exc)) from exc
        lines = ["# path\tcluster"] + [f"{f}\t{int(c)}" for f, c in zip(files, labels)]
        (out / "clusters.tsv").write_text("\n".join(lines) + "\n")
        print(f"wrote {out / 'clusters.tsv'}")
        return 0

    with torch.no_grad():
        if args.task in ("reconstruct", "remove"):
            b0 = 1.0 if args.beta0 is None else args.beta0
            b1 = 1.0 if args.beta1 is None else args.beta1
            res = autoencode_path(images, model, _mix(n, b0, b1), sample=False)
            q = res.quad
            if args.task == "remove":
                for f, bg in zip(files, to_uint8(q.I_bg)):
                    save_png(bg, out / f"{f.stem}_background.png")
                print(f"wrote {n} backgrounds to {out}")
                return 0
            rows = [list(to_uint8(images))] + decomposition_rows(q)
            save_png(image_grid(rows), out / "reconstruct.png")
            print(f"wrote {out / 'reconstruct.png'}")
            return 0

        # translate: the lookup-table child code carries the target class
        targets = _parse_ints(args.target_child)
        for k in targets:
            _check_child(k, model)
        b0 = 0.0 if args.beta0 is None else args.beta0
        b1 = 1.0 if args.beta1 is None else args.beta1
        rows = [list(to_uint8(images))]
        for k in targets:
            res = autoencode_path(images, model, _mix(n, b0, b1), class_override=k, sample=False)
            rows.append(list(to_uint8(res.quad.I)))
        save_png(image_grid(rows), out / "translate.png")
        print(f"wrote {out / 'translate.png'}")
        return 0


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise UsageFailure(f"unknown metric(s) {', '.join(unknown)}; choose from {', '.join(METRICS)}")
    model, manifest = _load(args.checkpoint)
    if args.ablation:
        model.hp = apply_ablation(RunConfig(hp=model.hp), args.ablation).hp
    hp = model.hp
    try:
        split = load_split(args.dataset, H=hp.H)
    except DataError as exc:
        raise UsageFailure(str(exc)) from exc
    recs = split.X_eval
    if not recs:
        raise UsageFailure(f"dataset {args.dataset} has no eval records")
    images = to_tensor(np.stack([r.image for r in recs]))
    digest = config_digest(manifest["hyperparams"])
    it = manifest.get("iteration")
    reports: list[MetricReport] = []

    if "iou" in metrics or "dice" in metrics:
        masked = [i for i, r in enumerate(recs) if r.mask is not None]
        masks = np.stack([recs[i].mask for i in masked]) if masked else None
        seg = segmentation_eval(model, images[masked] if masked else images, masks, digest=digest)
        reports += [r for r in seg if r.metric in metrics]

    labelled = [i for i, r in enumerate(recs) if r.phi_c is not None]
    labels = np.array([recs[i].phi_c for i in labelled])
    if "nmi" in metrics or "ami" in metrics:
        if len(labelled) < 2:
            reports += [MetricReport(m, float("nan"), 0, digest, note="no class labels; skipped")
                        for m in ("nmi", "ami") if m in metrics]
        else:
            pred = cluster_codes(images[labelled], model, k=hp.N_C, seed=args.seed)
            for m, fn in (("nmi", nmi), ("ami", ami)):
                if m in metrics:
                    reports.append(MetricReport(m, fn(labels, pred), len(pred), digest))

    if "cis" in metrics:
        oracle = train_oracle_classifier(images[labelled], labels, hp.N_C, seed=args.seed) if len(labelled) else None
        if oracle is None or not oracle.certified:
            acc = None if oracle is None else oracle.accuracy
            reports.append(MetricReport("cis", float("nan"), 0, digest,
                                        note=f"oracle not certified (accuracy {acc})"))
        else:
            reports.append(generation_eval(model, oracle, per_class=args.per_class, seed=args.seed,
                                           digest=digest)["cis"])

    for r in reports:
        r.iteration, r.ablation = it, args.ablation or "default"
        print(f"{r.metric}\t{r.value:.4f}\t(n={r.count}){'  ' + r.note if r.note else ''}")
    append_results(args.out, reports)
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="onegan", description="Train and apply a OneGAN model.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset root")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--n-eval", type=int, default=200)
    p.add_argument("--parents", type=int, default=3)
    p.add_argument("--colors", type=int, default=4)
    p.add_argument("--H", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train (or resume) a model")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--out", help="run directory (overrides the config)")
    p.add_argument("--iters", type=int, help="stop after this many more iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="class-conditional sample grids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=8, help="samples per class")
    p.add_argument("--child", help="comma-separated 1-based child classes")
    p.add_argument("--parent", type=int, help="restrict to children of this parent")
    p.add_argument("--shared-z", action="store_true", help="every row reuses the same z per column")
    p.add_argument("--decompose", action="store_true", help="image/foreground/mask/background rows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("infer", help="segment, reconstruct, remove, translate or cluster images")
    p.add_argument("task", choices=TASKS)
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target-child", help="comma-separated child classes (translate)")
    p.add_argument("--k", type=int, help="number of clusters (cluster)")
    p.add_argument("--beta0", type=float, help="code mixing weight toward the encoder")
    p.add_argument("--beta1", type=float, help="pre-image mixing weight toward the bypass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset's eval records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metrics", default=",".join(METRICS))
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results.jsonl")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="synthetic benchmark run (see onegan.benchmark)", add_help=False)
    p.add_argument("rest", nargs=argparse.REMAINDER)
    p.set_defaults(func=lambda a: benchmark.main(a.rest))
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageFailure as exc:
        print(f"onegan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"onegan {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
