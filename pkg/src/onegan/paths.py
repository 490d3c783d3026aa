"""Forward pipelines: generation, dual-mixup autoencoding and compositing."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .blocks import ShapeError
from .core import CodeBundle, EncoderPosterior, ImageQuad, MixupCoeffs, PriorBundle
from .networks import OneGAN

__all__ = [
    "PathOutput",
    "composite",
    "mixup",
    "dual_mixup",
    "reparameterize",
    "generation_path",
    "autoencode_path",
    "segment",
]


@dataclass
class PathOutput:
    quad: ImageQuad
    codes_used: CodeBundle
    A_fg: torch.Tensor
    A_bg: torch.Tensor | None = None
    priors: PriorBundle | None = None
    posterior: EncoderPosterior | None = None
    mix: MixupCoeffs | None = None
    # 1-based class indices that selected the lookup-table codes
    lut_phi_p: torch.Tensor | None = None
    lut_phi_c: torch.Tensor | None = None
    v_p_lut: torch.Tensor | None = None
    v_c_lut: torch.Tensor | None = None


def composite(I_fg: torch.Tensor, I_bg: torch.Tensor, I_m: torch.Tensor) -> torch.Tensor:
    """``I_bg * (1 - I_m) + I_fg * I_m`` with the mask broadcast over channels."""
    if I_fg.shape != I_bg.shape:
        raise ShapeError(f"composite: I_fg {tuple(I_fg.shape)} vs I_bg {tuple(I_bg.shape)}")
    if I_m.dim() != I_fg.dim() or I_m.shape[-2:] != I_fg.shape[-2:] or I_m.shape[-3] != 1:
        raise ShapeError(f"composite: mask {tuple(I_m.shape)} incompatible with {tuple(I_fg.shape)}")
    return I_bg * (1 - I_m) + I_fg * I_m


def _per_instance(beta: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    beta = torch.as_tensor(beta, dtype=like.dtype, device=like.device)
    if beta.dim() == 0:
        return beta
    return beta.view(-1, *([1] * (like.dim() - 1)))


def mixup(a: torch.Tensor, b: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """``a * (1 - beta) + b * beta`` with one beta per batch instance."""
    if a.shape != b.shape:
        raise ShapeError(f"mixup: {tuple(a.shape)} vs {tuple(b.shape)}")
    beta = _per_instance(beta, a)
    return a * (1 - beta) + b * beta


def _check_range(beta: torch.Tensor, lo: float, hi: float, name: str) -> None:
    beta = torch.as_tensor(beta)
    if beta.numel() and (beta.min() < lo or beta.max() > hi):
        raise ValueError(f"{name} must lie in [{lo}, {hi}]")


def dual_mixup(
    v_p_lut: torch.Tensor,
    v_c_lut: torch.Tensor,
    v_p_enc: torch.Tensor,
    v_c_enc: torch.Tensor,
    A_fg: torch.Tensor,
    B_fg: torch.Tensor,
    mix: MixupCoeffs,
    beta1_range: tuple[float, float] = (0.0, 1.0),
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Blend lookup-table codes with encoder codes (beta0) and the
    foreground pre-image with its bypass (beta1)."""
    _check_range(mix.beta0, 0.0, 1.0, "beta0")
    _check_range(mix.beta1, *beta1_range, "beta1")
    return (
        mixup(v_p_lut, v_p_enc, mix.beta0),
        mixup(v_c_lut, v_c_enc, mix.beta0),
        mixup(A_fg, B_fg, mix.beta1),
    )


def reparameterize(mu: torch.Tensor, logsig: torch.Tensor, rng: torch.Generator | None) -> torch.Tensor:
    if mu.shape != logsig.shape:
        raise ShapeError(f"reparameterize: {tuple(mu.shape)} vs {tuple(logsig.shape)}")
    eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(logsig) * eps


def generation_path(priors: PriorBundle, nets: OneGAN) -> PathOutput:
    """Priors → codes → background and foreground → composite.

    The same ``z`` drives both generators.
    """
    codes = nets.embed(priors.e_bg, priors.e_p, priors.e_c)
    A_bg, I_bg = nets.G_bg(codes.v_bg, priors.z)
    A_fg, I_fg, I_m = nets.G_fg(codes.v_p, codes.v_c, priors.z)
    quad = ImageQuad(I_fg=I_fg, I_bg=I_bg, I_m=I_m, I=composite(I_fg, I_bg, I_m))
    return PathOutput(quad=quad, codes_used=codes, A_fg=A_fg, A_bg=A_bg, priors=priors)


def _lut_indices(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
    return logits.argmax(dim=1) + 1


def autoencode_path(
    I: torch.Tensor,
    nets: OneGAN,
    mix: MixupCoeffs,
    rng: torch.Generator | None = None,
    class_override: int | torch.Tensor | None = None,
    sample: bool = True,
    encode_background: bool = True,
) -> PathOutput:
    """Encode ``I`` and rebuild it through both generators.

    Steps: content/style encoding and code sampling, foreground generation
    from the mixed codes, background encoding with the fresh mask, background
    rendering from the bypass, compositing. ``class_override`` (1-based
    child index, scalar or per-instance) replaces the child lookup code.
    With ``sample=False`` the posterior means are used instead of samples.
    ``encode_background=False`` stops after the foreground (segmentation).
    """
    hp = nets.hp
    post = nets.encode(I)
    if sample:
        z_hat = reparameterize(post.mu_z, post.logsig_z, rng)
        v_p_enc = reparameterize(post.mu_p, post.logsig_p, rng)
        v_c_enc = reparameterize(post.mu_c, post.logsig_c, rng)
    else:
        z_hat, v_p_enc, v_c_enc = post.mu_z, post.mu_p, post.mu_c

    phi_p = _lut_indices(post.e_hat_p)
    if class_override is None:
        phi_c = _lut_indices(post.e_hat_c)
    else:
        phi_c = torch.as_tensor(class_override, dtype=torch.long, device=I.device).expand(I.shape[0])
        if phi_c.min() < 1 or phi_c.max() > hp.N_C:
            raise ValueError(f"class_override must be in [1, {hp.N_C}]")
    v_p_lut = nets.embed.row("V_p", phi_p)
    v_c_lut = nets.embed.row("V_c", phi_c)

    beta0 = mix.beta0
    v_p_mix = mixup(v_p_lut, v_p_enc, beta0)
    A_fg = nets.G_fg.pre_image(v_p_mix, z_hat)
    mix_used = mix
    if not hp.use_bypass:
        mix_used = MixupCoeffs(beta0=mix.beta0, beta1=torch.zeros_like(mix.beta1))
    v_p_mix, v_c_mix, A_fg_mix = dual_mixup(v_p_lut, v_c_lut, v_p_enc, v_c_enc, A_fg, post.B_fg, mix_used)
    I_fg, I_m = nets.G_fg.render(A_fg_mix, v_p_mix, v_c_mix)

    A_bg = None
    v_bg = None
    if not encode_background:
        I_bg = torch.zeros_like(I_fg)
    elif hp.use_bypass:
        post.B_bg = nets.E_bg(I, I_m)
        _, I_bg = nets.G_bg(bypass=post.B_bg)
    else:
        # no-bypass ablation: background from the predicted parent's code and z
        v_bg = nets.embed.row("V_bg", phi_p)
        A_bg, I_bg = nets.G_bg(v_bg, z_hat)

    quad = ImageQuad(I_fg=I_fg, I_bg=I_bg, I_m=I_m, I=composite(I_fg, I_bg, I_m))
    return PathOutput(
        quad=quad,
        codes_used=CodeBundle(v_bg=v_bg, v_p=v_p_mix, v_c=v_c_mix),
        A_fg=A_fg,
        A_bg=A_bg,
        posterior=post,
        mix=mix_used,
        lut_phi_p=phi_p,
        lut_phi_c=phi_c,
        v_p_lut=v_p_lut,
        v_c_lut=v_c_lut,
    )


@torch.no_grad()
def segment(I: torch.Tensor, nets: OneGAN) -> torch.Tensor:
    """Foreground mask of ``I`` (the first two autoencoding steps only).

    Deterministic: posterior means, and with ``segment_pure_encoder`` the
    mixup takes encoder information only (beta0 = beta1 = 1).
    """
    n = I.shape[0]
    if nets.hp.segment_pure_encoder:
        mix = MixupCoeffs.constant(n, 1.0, 1.0, device=I.device, dtype=I.dtype)
    else:
        hp = nets.hp
        mix = MixupCoeffs.constant(
            n, (hp.beta0_low + hp.beta0_high) / 2, (hp.beta1_low + hp.beta1_high) / 2,
            device=I.device, dtype=I.dtype,
        )
    out = autoencode_path(I, nets, mix, sample=False, encode_background=False)
    return out.quad.I_m
