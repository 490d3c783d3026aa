"""Multi-phase training: schedule, per-path discriminator bank and the step.

Phase I trains generation only (encoders learn to invert generated images).
Phase II adds a fake-image and, later, a real-image reconstruction path per
batch, each judged by its own clone of the discriminators.
"""
from __future__ import annotations

import contextlib
import copy
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import torch
import torch.nn.functional as F
from torch import nn

from . import losses as L
from .core import HyperParams, LossWeights, RunConfig, sample_mixup, sample_priors
from .networks import OneGAN, load_checkpoint, make_discriminators, save_checkpoint
from .paths import autoencode_path, generation_path

__all__ = [
    "PATHS",
    "StateError",
    "PhaseState",
    "phase_schedule",
    "DiscriminatorBank",
    "make_optimizers",
    "training_step",
    "Trainer",
    "ABLATIONS",
    "apply_ablation",
    "load_model",
]

logger = logging.getLogger(__name__)

PATHS = ("generation", "fake_recon", "real_recon")


class StateError(RuntimeError):
    """Operation not allowed in the current training state."""


@dataclass(frozen=True)
class PhaseState:
    iteration: int
    phase: int
    fake_recon_active: bool
    real_recon_active: bool
    generators_frozen: bool

    @property
    def active_paths(self) -> tuple[str, ...]:
        paths = ["generation"]
        if self.fake_recon_active:
            paths.append("fake_recon")
        if self.real_recon_active:
            paths.append("real_recon")
        return tuple(paths)


ABLATIONS = (
    "default",
    "no-mixup",
    "full-mixup",
    "no-bypass",
    "no-mask-reg",
    "phase-I-only",
    "no-multi-phase",
    "no-real-recon",
)


def apply_ablation(cfg: RunConfig, tag: str) -> RunConfig:
    """Copy of ``cfg`` with the variant ``tag`` switched on."""
    if tag not in ABLATIONS:
        raise ValueError(f"unknown ablation {tag!r}; choose from {', '.join(ABLATIONS)}")
    hp = dataclasses.asdict(cfg.hp)
    w = dataclasses.asdict(cfg.weights)
    if tag == "no-mixup":
        # encoder codes and bypass only
        hp.update(beta0_low=1.0, beta0_high=1.0, beta1_low=1.0, beta1_high=1.0)
    elif tag == "full-mixup":
        hp.update(beta1_low=0.0, beta1_high=1.0)
    elif tag == "no-bypass":
        hp.update(use_bypass=False)
    elif tag == "no-mask-reg":
        w.update(w_mask=0.0)
    elif tag == "phase-I-only":
        hp.update(phase1_iters=hp["total_iters"])
    elif tag == "no-multi-phase":
        # every path and every network trains from the first iteration
        hp.update(phase1_iters=0, real_recon_delay=0, encoder_warmup_iters=0)
    elif tag == "no-real-recon":
        hp.update(real_recon_delay=hp["total_iters"])
    return dataclasses.replace(cfg, hp=HyperParams(**hp), weights=LossWeights(**w), ablation=tag)


def phase_schedule(iteration: int, hp: HyperParams) -> PhaseState:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration < hp.phase1_iters:
        return PhaseState(iteration, 1, False, False, False)
    since = iteration - hp.phase1_iters
    return PhaseState(
        iteration=iteration,
        phase=2,
        fake_recon_active=True,
        real_recon_active=since >= hp.real_recon_delay,
        generators_frozen=since < hp.encoder_warmup_iters,
    )


class DiscriminatorBank(nn.Module):
    """One (D_c, D_bg) pair before Phase II, one per path afterwards."""

    def __init__(self, hp: HyperParams):
        super().__init__()
        self.hp = hp
        self.sets = nn.ModuleDict({"generation": make_discriminators(hp)})

    @property
    def cloned(self) -> bool:
        return len(self.sets) > 1

    def get(self, path: str) -> nn.ModuleDict:
        if path not in PATHS:
            raise KeyError(f"unknown path {path!r}")
        return self.sets[path] if self.cloned else self.sets["generation"]

    def clone(self) -> "DiscriminatorBank":
        """Copy the generation-path discriminators for both reconstruction paths."""
        if self.cloned:
            raise StateError("discriminators were already cloned")
        for path in PATHS[1:]:
            self.sets[path] = copy.deepcopy(self.sets["generation"])
        return self

    def count(self) -> dict[str, int]:
        return {"D_c": len(self.sets), "D_bg": len(self.sets)}


def _adam(params, hp: HyperParams) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=hp.lr)


def make_optimizers(model: OneGAN, bank: DiscriminatorBank, hp: HyperParams) -> dict[str, torch.optim.Optimizer]:
    """Adam (default betas) per network group, one per discriminator instance."""
    opts: dict[str, torch.optim.Optimizer] = {
        "generators": _adam(model.generator_parameters(), hp),
        "encoders": _adam(model.encoder_parameters(), hp),
    }
    for path, ds in bank.sets.items():
        for name, d in ds.items():
            opts[f"{name}/{path}"] = _adam(d.parameters(), hp)
    return opts


def _add_clone_optimizers(opts: dict, bank: DiscriminatorBank, hp: HyperParams) -> None:
    for path in PATHS[1:]:
        for name, d in bank.sets[path].items():
            opt = _adam(d.parameters(), hp)
            # the clone continues from the original's moment estimates
            opt.load_state_dict(copy.deepcopy(opts[f"{name}/generation"].state_dict()))
            opts[f"{name}/{path}"] = opt


@contextlib.contextmanager
def _no_param_grad(module: nn.Module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def _d_step(
    D: nn.ModuleDict,
    opts: dict,
    path: str,
    real_obj: torch.Tensor,
    real_bg: torch.Tensor,
    fake_bg: torch.Tensor,
    fake_img: torch.Tensor,
    phi_c: torch.Tensor | None,
    hp: HyperParams,
    w: LossWeights,
) -> dict[str, float]:
    n_bg, n_obj = real_bg.shape[0], real_obj.shape[0]
    rf, bo, _ = D["D_bg"](torch.cat([real_bg, real_obj, fake_bg]))
    img_rf, img_cls, _ = D["D_c"](torch.cat([real_obj, fake_img]))
    terms = L.adversarial_d_loss(
        bg_rf_real=rf[:n_bg],
        bg_rf_fake=rf[n_bg + n_obj:],
        bg_bo_background=bo[:n_bg],
        bg_bo_object=bo[n_bg:n_bg + n_obj],
        img_rf_real=img_rf[:n_obj],
        img_rf_fake=img_rf[n_obj:],
        weights=w,
        kind=hp.gan_loss,
    )
    loss = terms["L_D"]
    if phi_c is not None:
        # the child-class head is cooperative and learns from labelled fakes only
        terms["L_D_cls"] = F.cross_entropy(img_cls[n_obj:], phi_c - 1)
        loss = loss + w.w_cls * terms["L_D_cls"]
    opt_c, opt_bg = opts[f"D_c/{path}"], opts[f"D_bg/{path}"]
    opt_c.zero_grad(set_to_none=True)
    opt_bg.zero_grad(set_to_none=True)
    loss.backward()
    opt_c.step()
    opt_bg.step()
    return {k: float(v.detach()) for k, v in terms.items()}


def _adversarial_terms(D: nn.ModuleDict, I_bg: torch.Tensor, I: torch.Tensor, hp: HyperParams, w: LossWeights):
    bg_rf, bg_bo, _ = D["D_bg"](I_bg)
    img_rf, img_cls, _ = D["D_c"](I)
    return L.adversarial_g_loss(bg_rf, bg_bo, img_rf, w, kind=hp.gan_loss), img_cls


def _g_step(model: OneGAN, opts: dict, loss: torch.Tensor, state: PhaseState) -> None:
    opts["generators"].zero_grad(set_to_none=True)
    opts["encoders"].zero_grad(set_to_none=True)
    loss.backward()
    opts["encoders"].step()
    if not state.generators_frozen:
        opts["generators"].step()


def _generation_pass(model, bank, opts, real_obj, real_bg, state, rng, hp, w) -> L.LossReport:
    n = real_obj.shape[0]
    priors = sample_priors(hp, rng, n).to(real_obj.device)
    gen = generation_path(priors, model)
    q = gen.quad
    D = bank.get("generation")
    d_terms = _d_step(D, opts, "generation", real_obj, real_bg, q.I_bg.detach(), q.I.detach(), priors.phi_c, hp, w)

    post = model.encode(q.I)
    B_bg = model.E_bg(q.I, q.I_m)
    with _no_param_grad(D):
        L_G, img_cls = _adversarial_terms(D, q.I_bg, q.I, hp, w)
    codes = gen.codes_used
    tgt = (lambda t: t) if hp.mse_grad_to_generator else (lambda t: t.detach())
    parts = {
        "L_E": L.classification_loss(img_cls, post.e_hat_p, post.e_hat_c, priors.phi_p, priors.phi_c),
        "L_MSE": L.distance_loss(tgt(codes.v_c), post.mu_c, tgt(codes.v_p), post.mu_p,
                                 tgt(gen.A_fg), post.B_fg, tgt(gen.A_bg), B_bg),
        "L_REG_v": L.code_regularization(codes.v_p, codes.v_c, codes.v_bg),
        "L_G": L_G,
        "L_M": L.mask_regularization(q.I_m, w.w_maskD),
    }
    tot = L.total_losses(parts, w)
    _g_step(model, opts, tot["L_GEN"], state)
    terms = {k: float(v.detach()) for k, v in parts.items()}
    terms["L_GEN"] = float(tot["L_GEN"].detach())
    terms.update(d_terms)
    return L.LossReport(path="generation", terms=terms, iteration=state.iteration)


def _recon_pass(model, bank, opts, real_obj, real_bg, state, rng, hp, w, tag: str) -> L.LossReport:
    path = "fake_recon" if tag == "fake" else "real_recon"
    n = real_obj.shape[0]
    src = None
    if tag == "fake":
        priors = sample_priors(hp, rng, n).to(real_obj.device)
        with torch.no_grad():
            src = generation_path(priors, model)
        I_in = src.quad.I
    else:
        priors = None
        I_in = real_obj
    mix = sample_mixup(hp, n, rng)
    ae = autoencode_path(I_in, model, mix, rng)
    q = ae.quad
    D = bank.get(path)
    d_terms = _d_step(D, opts, path, real_obj, real_bg, q.I_bg.detach(), q.I.detach(),
                      None if priors is None else priors.phi_c, hp, w)

    post = ae.posterior
    with _no_param_grad(D):
        L_G, img_cls = _adversarial_terms(D, q.I_bg, q.I, hp, w)
        if tag == "fake":
            L_PER = L.perceptual_loss("fake", D["D_c"].features, D["D_bg"].features,
                                      src.quad.I, q.I, src.quad.I_bg, q.I_bg)
        else:
            L_PER = L.perceptual_loss("real", D["D_c"].features, None, I_in, q.I)
    zero = q.I.new_zeros(())
    if tag == "fake":
        v_p_t = model.embed.row("V_p", priors.phi_p)
        v_c_t = model.embed.row("V_c", priors.phi_c)
        L_E = L.classification_loss(img_cls, post.e_hat_p, post.e_hat_c, priors.phi_p, priors.phi_c)
        L_MSE = L.distance_loss(src.codes_used.v_c, post.mu_c, src.codes_used.v_p, post.mu_p,
                                src.A_fg, post.B_fg, src.A_bg, post.B_bg)
        L_REC = L.reconstruction_loss("fake", src.quad.I, q.I, src.quad.I_bg, q.I_bg, src.quad.I_m, q.I_m)
    else:
        v_p_t, v_c_t = ae.v_p_lut, ae.v_c_lut
        L_E = zero  # real images carry no labels
        L_MSE = zero
        L_REC = L.reconstruction_loss("real", I_in, q.I)
    parts = {
        "L_E": L_E,
        "L_MSE": L_MSE,
        "L_REG_v": L.code_regularization(ae.v_p_lut, ae.v_c_lut, ae.codes_used.v_bg),
        "L_G": L_G,
        "L_M": L.mask_regularization(q.I_m, w.w_maskD),
        "L_VAE": L.vae_kl_loss(post, v_p_t, v_c_t),
        "L_REC": L_REC,
        "L_PER": L_PER,
    }
    tot = L.total_losses(parts, w)
    _g_step(model, opts, tot["L_AE"], state)
    terms = {k: float(v.detach()) for k, v in parts.items()}
    terms["L_GEN"] = float(tot["L_GEN"].detach())
    terms["L_AE"] = float(tot["L_AE"].detach())
    terms.update(d_terms)
    return L.LossReport(path=path, terms=terms, iteration=state.iteration)


def training_step(
    batch: tuple[torch.Tensor, torch.Tensor],
    state: PhaseState,
    model: OneGAN,
    bank: DiscriminatorBank,
    optimizers: dict[str, torch.optim.Optimizer],
    rng: torch.Generator,
    weights: LossWeights | None = None,
) -> list[L.LossReport]:
    """One iteration over every path active in ``state``.

    ``batch`` is ``(real_objects, real_backgrounds)`` scaled to [-1, 1].
    Per path the discriminators are updated first, then generators and
    encoders (generators are skipped while frozen).
    """
    real_obj, real_bg = batch
    if real_bg is None or real_bg.numel() == 0:
        raise ValueError("training needs a nonempty batch of real background images")
    if state.phase == 2 and not bank.cloned:
        raise StateError("Phase II requires cloned discriminators")
    hp = model.hp
    w = weights or LossWeights()
    model.train()
    reports = [_generation_pass(model, bank, optimizers, real_obj, real_bg, state, rng, hp, w)]
    if state.fake_recon_active:
        reports.append(_recon_pass(model, bank, optimizers, real_obj, real_bg, state, rng, hp, w, "fake"))
    if state.real_recon_active:
        reports.append(_recon_pass(model, bank, optimizers, real_obj, real_bg, state, rng, hp, w, "real"))
    return reports


class Trainer:
    """Owns the networks, optimizers, RNG and iteration counter of one run."""

    def __init__(self, cfg: RunConfig, device: str | torch.device = "cpu"):
        self.cfg = cfg
        self.hp = cfg.hp
        self.device = torch.device(device)
        torch.manual_seed(cfg.seed)
        self.model = OneGAN(self.hp).to(self.device)
        self.bank = DiscriminatorBank(self.hp).to(self.device)
        self.optimizers = make_optimizers(self.model, self.bank, self.hp)
        self.rng = torch.Generator().manual_seed(cfg.seed + 1)
        self.iteration = 0

    @property
    def state(self) -> PhaseState:
        return phase_schedule(self.iteration, self.hp)

    def clone_discriminators(self) -> None:
        self.bank.clone()
        _add_clone_optimizers(self.optimizers, self.bank, self.hp)
        logger.info("iteration %d: cloned discriminators for reconstruction paths", self.iteration)

    def step(self, real_obj: torch.Tensor, real_bg: torch.Tensor) -> list[L.LossReport]:
        state = self.state
        if state.phase == 2 and not self.bank.cloned:
            self.clone_discriminators()
        batch = (real_obj.to(self.device), real_bg.to(self.device))
        reports = training_step(batch, state, self.model, self.bank, self.optimizers, self.rng, self.cfg.weights)
        self.iteration += 1
        return reports

    def _modules(self) -> dict[str, nn.Module]:
        mods: dict[str, nn.Module] = {"model": self.model}
        for path, ds in self.bank.sets.items():
            for name, d in ds.items():
                mods[f"{name}/{path}"] = d
        return mods

    def save(self, directory: str | Path, data_state: dict | None = None) -> Path:
        meta = {
            "iteration": self.iteration,
            "phase": self.state.phase,
            "phase_state": dataclasses.asdict(self.state),
            "bank_paths": list(self.bank.sets.keys()),
            "hyperparams": dataclasses.asdict(self.hp),
        }
        extra = {
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "rng": self.rng.get_state(),
            "data": data_state,
        }
        return save_checkpoint(directory, self._modules(), meta, extra)

    def load(self, directory: str | Path) -> dict | None:
        """Restore a checkpoint; returns the saved data-iterator state."""
        manifest = json.loads((Path(directory) / "manifest.json").read_text())
        if len(manifest["bank_paths"]) > 1 and not self.bank.cloned:
            self.clone_discriminators()
        manifest, extra = load_checkpoint(directory, self._modules())
        self.iteration = int(manifest["iteration"])
        if extra is not None:
            for k, st in extra["optimizers"].items():
                self.optimizers[k].load_state_dict(st)
            self.rng.set_state(extra["rng"])
            return extra.get("data")
        return None

    def fit(self, batches: Iterator, n_iters: int, log=None) -> list[L.LossReport]:
        """Run ``n_iters`` steps drawing ``(objects, backgrounds)`` from ``batches``."""
        history = []
        for _ in range(n_iters):
            obj, bg = next(batches)
            reports = self.step(obj, bg)
            history.extend(reports)
            if log is not None:
                for r in reports:
                    log.write(r.to_line() + "\n")
        return history


def load_model(directory: str | Path) -> tuple[OneGAN, dict]:
    """Rebuild the generators and encoders stored in a checkpoint."""
    manifest = json.loads((Path(directory) / "manifest.json").read_text())
    hp = HyperParams(**manifest["hyperparams"])
    model = OneGAN(hp)
    load_checkpoint(directory, {"model": model})
    model.eval()
    return model, manifest
