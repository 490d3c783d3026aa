"""Loss terms for both training phases and their weighted totals.

Reductions are means over elements and batch unless a term is defined as a
sum (code regularisation and KL sum over code dimensions, then average over
the batch).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn.functional as F

from .blocks import ShapeError
from .core import EncoderPosterior, LossWeights

__all__ = [
    "UsageError",
    "LossWeights",
    "LossReport",
    "adversarial_g_loss",
    "adversarial_d_loss",
    "classification_loss",
    "distance_loss",
    "code_regularization",
    "mask_balance",
    "mask_decisiveness",
    "mask_regularization",
    "gaussian_kl",
    "vae_kl_loss",
    "reconstruction_loss",
    "perceptual_loss",
    "total_losses",
    "GEN_MEMBERS",
    "AE_MEMBERS",
    "D_MEMBERS",
]

GEN_MEMBERS = ("L_E", "L_MSE", "L_REG_v", "L_G", "L_M")
AE_MEMBERS = ("L_VAE", "L_REC", "L_PER")
D_MEMBERS = ("L_D_bg_A", "L_D_bg_B", "L_D_c_A")


class UsageError(ValueError):
    """A loss was called in a context where it is undefined."""


def _real_term(logits: torch.Tensor, kind: str) -> torch.Tensor:
    """Loss for logits that should read 'real' (target 1)."""
    if kind == "hinge":
        return F.relu(1 - logits).mean()
    return F.softplus(-logits).mean()  # -log sigmoid(x)


def _fake_term(logits: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "hinge":
        return F.relu(1 + logits).mean()
    return F.softplus(logits).mean()  # -log(1 - sigmoid(x))


def adversarial_g_loss(
    bg_rf: torch.Tensor,
    bg_bo: torch.Tensor,
    img_rf: torch.Tensor,
    weights: LossWeights | None = None,
    kind: str = "bce",
) -> torch.Tensor:
    """Non-saturating generator loss over the three adversarial heads.

    ``bg_rf`` and ``bg_bo`` are the background discriminator's patch maps on
    generated backgrounds, ``img_rf`` the image discriminator's logit on the
    composite. Patch maps are averaged over all elements.
    """
    w = weights or LossWeights()
    if kind == "hinge":
        g = lambda x: -x.mean()  # noqa: E731
    else:
        g = lambda x: _real_term(x, "bce")  # noqa: E731
    return w.w_bg_adv * g(bg_rf) + g(bg_bo) + g(img_rf)


def _nonempty(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if t.numel() == 0:
            raise ValueError("adversarial_d_loss: empty batch")


def adversarial_d_loss(
    bg_rf_real: torch.Tensor,
    bg_rf_fake: torch.Tensor,
    bg_bo_background: torch.Tensor,
    bg_bo_object: torch.Tensor,
    img_rf_real: torch.Tensor,
    img_rf_fake: torch.Tensor,
    weights: LossWeights | None = None,
    kind: str = "bce",
) -> dict[str, torch.Tensor]:
    """Per-head discriminator losses and their weighted sum ``L_D``.

    Each head's loss is the mean of its real-side and fake-side cross
    entropies, so all-zero logits give ``ln 2`` per head.
    """
    _nonempty(bg_rf_real, bg_rf_fake, bg_bo_background, bg_bo_object, img_rf_real, img_rf_fake)
    w = weights or LossWeights()
    out = {
        "L_D_bg_A": 0.5 * (_real_term(bg_rf_real, kind) + _fake_term(bg_rf_fake, kind)),
        "L_D_bg_B": 0.5 * (_real_term(bg_bo_background, kind) + _fake_term(bg_bo_object, kind)),
        "L_D_c_A": 0.5 * (_real_term(img_rf_real, kind) + _fake_term(img_rf_fake, kind)),
    }
    out["L_D"] = w.w_bg_adv * out["L_D_bg_A"] + out["L_D_bg_B"] + out["L_D_c_A"]
    return out


def _ce(logits: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, phi.long() - 1)


def classification_loss(
    dcb_logits: torch.Tensor,
    e_hat_p: torch.Tensor,
    e_hat_c: torch.Tensor,
    phi_p: torch.Tensor | None,
    phi_c: torch.Tensor | None,
) -> torch.Tensor:
    """Cross entropy of the three class predictors against the generation priors.

    Labels are 1-based. Real images carry no labels, so ``None`` raises.
    """
    if phi_p is None or phi_c is None:
        raise UsageError("classification_loss needs generation priors; real images have no labels")
    return _ce(dcb_logits, phi_c) + _ce(e_hat_p, phi_p) + _ce(e_hat_c, phi_c)


def _mse(a: torch.Tensor, b: torch.Tensor, name: str) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"distance_loss: {name} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return F.mse_loss(a, b)


def distance_loss(
    v_c: torch.Tensor,
    mu_c: torch.Tensor,
    v_p: torch.Tensor,
    mu_p: torch.Tensor,
    A_fg: torch.Tensor | None = None,
    B_fg: torch.Tensor | None = None,
    A_bg: torch.Tensor | None = None,
    B_bg: torch.Tensor | None = None,
) -> torch.Tensor:
    """Sum of element-mean squared errors; absent pre-image pairs are skipped."""
    total = _mse(v_c, mu_c, "code c") + _mse(v_p, mu_p, "code p")
    if A_fg is not None and B_fg is not None:
        total = total + _mse(A_fg, B_fg, "foreground pre-image")
    if A_bg is not None and B_bg is not None:
        total = total + _mse(A_bg, B_bg, "background pre-image")
    return total


def code_regularization(
    v_p: torch.Tensor, v_c: torch.Tensor, v_bg: torch.Tensor | None = None
) -> torch.Tensor:
    """Squared L2 norms of the codes, summed over dims, averaged over the batch."""
    def sq(v: torch.Tensor) -> torch.Tensor:
        return v.pow(2).reshape(v.shape[0], -1).sum(dim=1) if v.dim() > 1 else v.pow(2).sum()

    total = sq(v_p) + sq(v_c)
    if v_bg is not None:
        total = total + sq(v_bg)
    return total.mean()


def _flat_mask(I_m: torch.Tensor) -> torch.Tensor:
    if I_m.dim() == 4:
        if I_m.shape[1] != 1:
            raise ShapeError(f"mask must have one channel, got {tuple(I_m.shape)}")
        I_m = I_m[:, 0]
    if I_m.dim() != 3:
        raise ShapeError(f"mask batch must be (N, H, W) or (N, 1, H, W), got {tuple(I_m.shape)}")
    if I_m.numel() and (I_m.min() < 0 or I_m.max() > 1):
        raise ValueError("mask values must lie in [0, 1]")
    return I_m.reshape(I_m.shape[0], -1)


def mask_balance(I_m: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``|mean(mask) - 1/2|``."""
    m = _flat_mask(I_m)
    return (m.mean(dim=1) - 0.5).abs().mean()


def mask_decisiveness(I_m: torch.Tensor) -> torch.Tensor:
    """On ``2 I_m - 1``: ``|mean(max(0, .)) - 1/2| + |mean(min(0, .)) + 1/2|``."""
    m = 2 * _flat_mask(I_m) - 1
    pos = m.clamp(min=0).mean(dim=1)
    neg = m.clamp(max=0).mean(dim=1)
    return ((pos - 0.5).abs() + (neg + 0.5).abs()).mean()


def mask_regularization(I_m: torch.Tensor, w_decisive: float = 0.1) -> torch.Tensor:
    return mask_balance(I_m) + w_decisive * mask_decisiveness(I_m)


def gaussian_kl(mu: torch.Tensor, logsig: torch.Tensor, target: torch.Tensor | None = None) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(target, I)), summed over dims, batch mean."""
    if mu.shape != logsig.shape:
        raise ShapeError(f"gaussian_kl: {tuple(mu.shape)} vs {tuple(logsig.shape)}")
    diff = mu if target is None else mu - target
    kl = 0.5 * (torch.exp(2 * logsig) + diff.pow(2) - 1 - 2 * logsig)
    if kl.dim() == 1:
        return kl.sum()
    return kl.sum(dim=1).mean()


def vae_kl_loss(post: EncoderPosterior, v_p: torch.Tensor, v_c: torch.Tensor) -> torch.Tensor:
    """Shape and style posteriors against their lookup codes, pose against N(0, I)."""
    return (
        gaussian_kl(post.mu_p, post.logsig_p, v_p)
        + gaussian_kl(post.mu_c, post.logsig_c, v_c)
        + gaussian_kl(post.mu_z, post.logsig_z)
    )


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"L1: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def reconstruction_loss(
    tag: str,
    I: torch.Tensor,
    I_hat: torch.Tensor,
    I_bg: torch.Tensor | None = None,
    I_bg_hat: torch.Tensor | None = None,
    I_m: torch.Tensor | None = None,
    I_m_hat: torch.Tensor | None = None,
) -> torch.Tensor:
    if tag == "real":
        return _l1(I, I_hat)
    if tag == "fake":
        if any(t is None for t in (I_bg, I_bg_hat, I_m, I_m_hat)):
            raise UsageError("fake reconstruction needs the background and mask triplet")
        return _l1(I, I_hat) + _l1(I_bg, I_bg_hat) + _l1(I_m, I_m_hat)
    raise ValueError(f"unknown reconstruction tag {tag!r}")


def _feature_sq(extract: Callable[[torch.Tensor], torch.Tensor], a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (extract(a) - extract(b)).pow(2).mean()


def perceptual_loss(
    tag: str,
    image_features: Callable[[torch.Tensor], torch.Tensor] | None,
    background_features: Callable[[torch.Tensor], torch.Tensor] | None,
    I: torch.Tensor,
    I_hat: torch.Tensor,
    I_bg: torch.Tensor | None = None,
    I_bg_hat: torch.Tensor | None = None,
) -> torch.Tensor:
    """Squared feature distance (element mean) under discriminator features."""
    if image_features is None:
        raise UsageError("perceptual_loss needs the image discriminator feature head")
    loss = _feature_sq(image_features, I, I_hat)
    if tag == "real":
        return loss
    if tag != "fake":
        raise ValueError(f"unknown perceptual tag {tag!r}")
    if background_features is None:
        raise UsageError("fake perceptual loss needs the background discriminator feature head")
    if I_bg is None or I_bg_hat is None:
        raise UsageError("fake perceptual loss needs the background pair")
    return loss + _feature_sq(background_features, I_bg, I_bg_hat)


@dataclass
class LossReport:
    """Named loss values for one path at one iteration."""

    path: str
    terms: dict[str, float] = field(default_factory=dict)
    iteration: int | None = None

    def to_line(self) -> str:
        head = [f"path={self.path}"]
        if self.iteration is not None:
            head.insert(0, f"iter={self.iteration}")
        return " ".join(head + [f"{k}={v:.6g}" for k, v in self.terms.items()])

    @classmethod
    def from_line(cls, line: str) -> "LossReport":
        pairs = dict(tok.split("=", 1) for tok in line.split())
        it = pairs.pop("iter", None)
        path = pairs.pop("path")
        return cls(path=path, terms={k: float(v) for k, v in pairs.items()},
                   iteration=None if it is None else int(it))


def _require(parts: Mapping, names: tuple[str, ...], what: str) -> None:
    missing = [n for n in names if n not in parts]
    if missing:
        raise ValueError(f"{what} is missing members: {', '.join(missing)}")


def total_losses(parts: Mapping[str, object], weights: LossWeights | None = None) -> dict[str, object]:
    """Weighted aggregates of the member terms present in ``parts``.

    ``L_GEN`` is always formed; ``L_AE`` when any autoencoding member is
    present and ``L_D`` when any discriminator member is present. A partially
    present group raises.
    """
    w = weights or LossWeights()
    _require(parts, GEN_MEMBERS, "L_GEN")
    out: dict[str, object] = {}
    out["L_GEN"] = (
        w.w_cls * parts["L_E"]
        + w.w_mse * parts["L_MSE"]
        + w.w_regv * parts["L_REG_v"]
        + w.w_adv * parts["L_G"]
        + w.w_mask * parts["L_M"]
    )
    if any(n in parts for n in AE_MEMBERS):
        _require(parts, AE_MEMBERS, "L_AE")
        out["L_AE"] = (
            out["L_GEN"]
            + w.w_vae * parts["L_VAE"]
            + w.w_rec * parts["L_REC"]
            + w.w_per * parts["L_PER"]
        )
    if any(n in parts for n in D_MEMBERS):
        _require(parts, D_MEMBERS, "L_D")
        out["L_D"] = w.w_bg_adv * parts["L_D_bg_A"] + parts["L_D_bg_B"] + parts["L_D_c_A"]
    return out
