"""Domain types, hyperparameters and prior sampling shared by the whole package.

Class indices are 1-based at the API surface (``phi_c in [1, N_C]``) and
converted to 0-based only where they index tensors.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import torch

__all__ = [
    "ConfigError",
    "HyperParams",
    "LossWeights",
    "RunConfig",
    "PriorBundle",
    "CodeBundle",
    "EncoderPosterior",
    "ImageQuad",
    "MixupCoeffs",
    "onehot",
    "parent_of",
    "sample_priors",
    "priors_from_indices",
    "sample_mixup",
    "load_config",
    "save_config",
]


class ConfigError(ValueError):
    """Invalid hyperparameters or configuration file."""


@dataclass
class HyperParams:
    N_C: int = 200
    N_P: int = 20
    d_z: int = 100
    d_c: int = 32
    d_p: int = 16
    d_bg: int = 32
    H: int = 128
    channel_scale: float = 1.0
    batch_size: int = 20
    lr: float = 2e-4
    total_iters: int = 600_000
    phase1_iters: int = 200_000
    real_recon_delay: int = 200_000
    encoder_warmup_iters: int = 5_000
    # dual mixup sampling ranges; (1, 1) disables mixing
    beta0_low: float = 0.0
    beta0_high: float = 1.0
    beta1_low: float = 0.5
    beta1_high: float = 1.0
    use_bypass: bool = True
    # segmentation inference with beta0 = beta1 = 1 (encoder information only)
    segment_pure_encoder: bool = True
    # child k belongs to a fixed parent; off = independent uniform parent
    tie_parent_to_child: bool = True
    gan_loss: str = "bce"
    mse_grad_to_generator: bool = True

    def __post_init__(self) -> None:
        self.validate()

    @property
    def W(self) -> int:
        return self.H

    @property
    def pre_side(self) -> int:
        """Spatial side of the pre-images / bypasses (16 at H=128)."""
        return self.H // 8

    def ch(self, width: int) -> int:
        """Table channel width scaled by ``channel_scale`` (at least 1)."""
        return max(1, int(round(width * self.channel_scale)))

    def validate(self) -> None:
        for name in ("N_C", "N_P", "d_z", "d_c", "d_p", "d_bg", "H", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.N_P < self.N_C:
            raise ConfigError(f"N_P ({self.N_P}) must be smaller than N_C ({self.N_C})")
        if self.H < 32 or self.H & (self.H - 1):
            raise ConfigError(f"H must be a power of two >= 32, got {self.H}")
        if self.channel_scale <= 0:
            raise ConfigError("channel_scale must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        for name in ("phase1_iters", "real_recon_delay", "encoder_warmup_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.phase1_iters > self.total_iters:
            raise ConfigError("phase1_iters must not exceed total_iters")
        if not 0.0 <= self.beta0_low <= self.beta0_high <= 1.0:
            raise ConfigError("beta0 range must satisfy 0 <= low <= high <= 1")
        if not 0.0 <= self.beta1_low <= self.beta1_high <= 1.0:
            raise ConfigError("beta1 range must satisfy 0 <= low <= high <= 1")
        if self.gan_loss not in ("bce", "hinge"):
            raise ConfigError(f"unknown gan_loss {self.gan_loss!r}")


@dataclass
class LossWeights:
    w_bg_adv: float = 10.0
    w_regv: float = 0.1
    w_mask: float = 2.0
    w_maskD: float = 0.1
    w_adv: float = 1.0
    w_cls: float = 1.0
    w_mse: float = 1.0
    w_vae: float = 1.0
    w_rec: float = 1.0
    w_per: float = 1.0

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")


@dataclass
class RunConfig:
    """Everything a training run needs besides the data itself."""

    hp: HyperParams = field(default_factory=HyperParams)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    dataset: str = ""
    out: str = "runs/default"
    checkpoint_every: int = 10_000
    sample_every: int = 5_000
    log_every: int = 1
    ablation: str = "default"
    hflip: bool = True


def _coerce(value: str, like: Any) -> Any:
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(float(value)) if "e" in value.lower() else int(value)
    if isinstance(like, float):
        return float(value)
    return value


_SECTIONS = {"hyperparams": "hp", "loss_weights": "weights"}


def load_config(path: str | Path) -> RunConfig:
    """Read an INI file with ``[hyperparams]``, ``[loss_weights]`` and ``[run]``.

    Missing keys keep their defaults; unknown keys are an error.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep N_C / N_P case
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc

    defaults = RunConfig()
    kwargs: dict[str, dict[str, Any]] = {"hp": {}, "weights": {}}
    run_kwargs: dict[str, Any] = {}
    for section in parser.sections():
        if section in _SECTIONS:
            target = kwargs[_SECTIONS[section]]
            proto = getattr(defaults, _SECTIONS[section])
        elif section == "run":
            target, proto = run_kwargs, defaults
        else:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if not hasattr(proto, key) or key in _SECTIONS.values():
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                target[key] = _coerce(raw, getattr(proto, key))
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
    try:
        return RunConfig(
            hp=HyperParams(**kwargs["hp"]),
            weights=LossWeights(**kwargs["weights"]),
            **run_kwargs,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def save_config(cfg: RunConfig, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["hyperparams"] = {k: str(v) for k, v in dataclasses.asdict(cfg.hp).items()}
    parser["loss_weights"] = {k: str(v) for k, v in dataclasses.asdict(cfg.weights).items()}
    parser["run"] = {
        f.name: str(getattr(cfg, f.name))
        for f in fields(cfg)
        if f.name not in ("hp", "weights")
    }
    with open(path, "w") as fh:
        parser.write(fh)


@dataclass
class PriorBundle:
    """Batched generation inputs. ``phi_c``/``phi_p`` are 1-based."""

    phi_c: torch.Tensor
    phi_p: torch.Tensor
    e_c: torch.Tensor
    e_p: torch.Tensor
    e_bg: torch.Tensor
    z: torch.Tensor

    def __len__(self) -> int:
        return self.z.shape[0]

    def to(self, device: torch.device | str) -> "PriorBundle":
        return PriorBundle(*(getattr(self, f.name).to(device) for f in fields(self)))


@dataclass
class CodeBundle:
    v_bg: torch.Tensor | None
    v_p: torch.Tensor
    v_c: torch.Tensor


@dataclass
class EncoderPosterior:
    e_hat_p: torch.Tensor
    e_hat_c: torch.Tensor
    mu_p: torch.Tensor
    logsig_p: torch.Tensor
    mu_c: torch.Tensor
    logsig_c: torch.Tensor
    mu_z: torch.Tensor
    logsig_z: torch.Tensor
    B_fg: torch.Tensor
    B_bg: torch.Tensor | None = None


@dataclass
class ImageQuad:
    I_fg: torch.Tensor
    I_bg: torch.Tensor
    I_m: torch.Tensor
    I: torch.Tensor


@dataclass
class MixupCoeffs:
    """Per-instance mixing weights, each of shape ``(N,)``."""

    beta0: torch.Tensor
    beta1: torch.Tensor

    @classmethod
    def constant(cls, n: int, beta0: float, beta1: float, device=None, dtype=None) -> "MixupCoeffs":
        kw = {"device": device, "dtype": dtype or torch.get_default_dtype()}
        return cls(torch.full((n,), float(beta0), **kw), torch.full((n,), float(beta1), **kw))


def onehot(index: int, size: int) -> torch.Tensor:
    """One-hot vector of length ``size`` with a 1 at 1-based ``index``."""
    if size < 1 or not 1 <= index <= size:
        raise ValueError(f"index {index} out of range [1, {size}]")
    out = torch.zeros(size)
    out[index - 1] = 1.0
    return out


def parent_of(phi_c: torch.Tensor, hp: HyperParams) -> torch.Tensor:
    """Fixed child→parent map: contiguous blocks of children share a parent."""
    return torch.div((phi_c - 1) * hp.N_P, hp.N_C, rounding_mode="floor") + 1


def priors_from_indices(
    phi_c: torch.Tensor, phi_p: torch.Tensor, z: torch.Tensor, hp: HyperParams
) -> PriorBundle:
    phi_c = torch.as_tensor(phi_c, dtype=torch.long)
    phi_p = torch.as_tensor(phi_p, dtype=torch.long)
    if phi_c.min() < 1 or phi_c.max() > hp.N_C:
        raise ValueError(f"child index out of range [1, {hp.N_C}]")
    if phi_p.min() < 1 or phi_p.max() > hp.N_P:
        raise ValueError(f"parent index out of range [1, {hp.N_P}]")
    dtype = z.dtype
    e_c = torch.nn.functional.one_hot(phi_c - 1, hp.N_C).to(dtype)
    e_p = torch.nn.functional.one_hot(phi_p - 1, hp.N_P).to(dtype)
    return PriorBundle(phi_c=phi_c, phi_p=phi_p, e_c=e_c, e_p=e_p, e_bg=e_p.clone(), z=z)


def sample_priors(
    hp: HyperParams,
    rng: torch.Generator,
    n: int = 1,
    child: int | None = None,
    parent: int | None = None,
) -> PriorBundle:
    """Draw ``n`` prior bundles: uniform classes, standard normal ``z``.

    ``child``/``parent`` pin the class indices (1-based) instead of sampling.
    """
    if child is None:
        phi_c = torch.randint(1, hp.N_C + 1, (n,), generator=rng)
    else:
        phi_c = torch.full((n,), int(child), dtype=torch.long)
    if parent is not None:
        phi_p = torch.full((n,), int(parent), dtype=torch.long)
    elif hp.tie_parent_to_child:
        phi_p = parent_of(phi_c, hp)
    else:
        phi_p = torch.randint(1, hp.N_P + 1, (n,), generator=rng)
    z = torch.randn(n, hp.d_z, generator=rng)
    return priors_from_indices(phi_c, phi_p, z, hp)


def sample_mixup(hp: HyperParams, n: int, rng: torch.Generator) -> MixupCoeffs:
    """Uniform per-instance betas on the configured ranges."""
    u0 = torch.rand(n, generator=rng)
    u1 = torch.rand(n, generator=rng)
    return MixupCoeffs(
        beta0=hp.beta0_low + (hp.beta0_high - hp.beta0_low) * u0,
        beta1=hp.beta1_low + (hp.beta1_high - hp.beta1_low) * u1,
    )
