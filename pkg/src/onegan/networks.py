"""Generators, encoders, discriminators and the lookup-table embeddings.

Layer widths are the full-size widths at ``channel_scale=1``. Spatial sizes
are expressed relative to the image side ``H``: pre-images and bypasses are
``H/8`` (16 at 128 px) and the first generator map is ``H/32``.
"""
from __future__ import annotations

import copy
import json
import logging
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import DOWNBlk, GLUNorm, LayerNorm2d, RESBlk, ShapeError, UPBlk, conv3, conv4s2
from .core import CodeBundle, EncoderPosterior, HyperParams

__all__ = [
    "Embeddings",
    "BackgroundGenerator",
    "ForegroundGenerator",
    "ContentEncoder",
    "StyleEncoder",
    "BackgroundEncoder",
    "BackgroundDiscriminator",
    "ImageDiscriminator",
    "OneGAN",
    "make_discriminators",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

logger = logging.getLogger(__name__)

# the background discriminator always sees 126 px inputs
D_BG_SIDE = 126


def _check_image(x: torch.Tensor, hp: HyperParams, channels: int, where: str) -> None:
    expected = (channels, hp.H, hp.W)
    if x.dim() != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"{where}: expected (N, {channels}, {hp.H}, {hp.W}), got {tuple(x.shape)}")


def _check_vec(v: torch.Tensor, dim: int, where: str) -> None:
    if v.dim() != 2 or v.shape[1] != dim:
        raise ShapeError(f"{where}: expected (N, {dim}), got {tuple(v.shape)}")


class Embeddings(nn.Module):
    """The three class lookup tables V_bg, V_p, V_c (bias-free linear maps)."""

    def __init__(self, hp: HyperParams):
        super().__init__()
        self.hp = hp
        self.V_bg = nn.Linear(hp.N_P, hp.d_bg, bias=False)
        self.V_p = nn.Linear(hp.N_P, hp.d_p, bias=False)
        self.V_c = nn.Linear(hp.N_C, hp.d_c, bias=False)
        for lin in (self.V_bg, self.V_p, self.V_c):
            nn.init.normal_(lin.weight, std=1.0)

    def forward(self, e_bg: torch.Tensor | None, e_p: torch.Tensor, e_c: torch.Tensor) -> CodeBundle:
        _check_vec(e_p, self.hp.N_P, "embed(e_p)")
        _check_vec(e_c, self.hp.N_C, "embed(e_c)")
        v_bg = None
        if e_bg is not None:
            _check_vec(e_bg, self.hp.N_P, "embed(e_bg)")
            v_bg = self.V_bg(e_bg)
        return CodeBundle(v_bg=v_bg, v_p=self.V_p(e_p), v_c=self.V_c(e_c))

    def row(self, table: str, index: torch.Tensor) -> torch.Tensor:
        """Code for 1-based class indices, i.e. columns of the table weight."""
        lin = getattr(self, table)
        return lin.weight.t()[index - 1]


class _PreImage(nn.Module):
    """Linear → reshape → GLUNorm → UPBlk → UPBlk, producing the pre-image."""

    def __init__(self, hp: HyperParams, d_code: int):
        super().__init__()
        self.hp = hp
        self.d_in = d_code + hp.d_z
        self.c0 = hp.ch(2048)
        self.s0 = hp.H // 32
        self.fc = nn.Linear(self.d_in, self.c0 * self.s0 * self.s0)
        self.glu = GLUNorm(hp.ch(1024))
        self.up = nn.Sequential(UPBlk(hp.ch(1024), hp.ch(512)), UPBlk(hp.ch(512), hp.ch(256)))

    def forward(self, code: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        _check_vec(z, self.hp.d_z, "pre-image(z)")
        _check_vec(code, self.d_in - self.hp.d_z, "pre-image(code)")
        h = self.fc(torch.cat([code, z], dim=1)).view(-1, self.c0, self.s0, self.s0)
        return self.up(self.glu(h))


class BackgroundGenerator(nn.Module):
    def __init__(self, hp: HyperParams):
        super().__init__()
        self.hp = hp
        self.G0 = _PreImage(hp, hp.d_bg)
        self.G1 = nn.Sequential(
            UPBlk(hp.ch(256), hp.ch(128)),
            UPBlk(hp.ch(128), hp.ch(64)),
            UPBlk(hp.ch(64), hp.ch(32)),
            conv3(hp.ch(32), 3),
            nn.Tanh(),
        )

    @property
    def pre_shape(self) -> tuple[int, int, int]:
        return (self.hp.ch(256), self.hp.pre_side, self.hp.pre_side)

    def render(self, A_bg: torch.Tensor) -> torch.Tensor:
        if A_bg.dim() != 4 or tuple(A_bg.shape[1:]) != self.pre_shape:
            raise ShapeError(f"G_bg1: expected (N, {self.pre_shape}), got {tuple(A_bg.shape)}")
        return self.G1(A_bg)

    def forward(
        self,
        v_bg: torch.Tensor | None = None,
        z: torch.Tensor | None = None,
        bypass: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor | None, torch.Tensor]:
        """Generation from ``(v_bg, z)`` or autoencoding from the bypass ``B_bg``.

        Returns ``(A_bg, I_bg)``; ``A_bg`` is ``None`` in the bypass form.
        """
        codes = v_bg is not None or z is not None
        if codes == (bypass is not None):
            raise TypeError("gen_background takes either (v_bg, z) or bypass, not both or neither")
        if bypass is not None:
            return None, self.render(bypass)
        if v_bg is None or z is None:
            raise TypeError("gen_background needs both v_bg and z")
        A_bg = self.G0(v_bg, z)
        return A_bg, self.render(A_bg)


class _FgStage1(nn.Module):
    def __init__(self, hp: HyperParams):
        super().__init__()
        self.up = nn.Sequential(
            UPBlk(hp.ch(256), hp.ch(128)),
            UPBlk(hp.ch(128), hp.ch(64)),
            UPBlk(hp.ch(64), hp.ch(64)),
        )
        self.res = RESBlk(hp.ch(64), hp.d_p, hp.ch(32))

    def forward(self, A_fg: torch.Tensor, v_p: torch.Tensor) -> torch.Tensor:
        return self.res(self.up(A_fg), v_p)


class _FgStage2(nn.Module):
    def __init__(self, hp: HyperParams):
        super().__init__()
        self.res = RESBlk(hp.ch(32), hp.d_c, hp.ch(16))
        self.to_img = conv3(hp.ch(16), 3)
        self.to_mask = conv3(hp.ch(16), 1)

    def forward(self, C0: torch.Tensor, v_c: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.res(C0, v_c)
        return torch.tanh(self.to_img(h)), torch.sigmoid(self.to_mask(h))


class ForegroundGenerator(nn.Module):
    def __init__(self, hp: HyperParams):
        super().__init__()
        self.hp = hp
        self.G0 = _PreImage(hp, hp.d_p)
        self.G1 = _FgStage1(hp)
        self.G2 = _FgStage2(hp)

    @property
    def pre_shape(self) -> tuple[int, int, int]:
        return (self.hp.ch(256), self.hp.pre_side, self.hp.pre_side)

    def pre_image(self, v_p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.G0(v_p, z)

    def render(
        self, A_fg: torch.Tensor, v_p: torch.Tensor, v_c: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if A_fg.dim() != 4 or tuple(A_fg.shape[1:]) != self.pre_shape:
            raise ShapeError(f"G_fg1: expected (N, {self.pre_shape}), got {tuple(A_fg.shape)}")
        _check_vec(v_c, self.hp.d_c, "G_fg2(v_c)")
        return self.G2(self.G1(A_fg, v_p), v_c)

    def forward(
        self, v_p: torch.Tensor, v_c: torch.Tensor, z: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns ``(A_fg, I_fg, I_m)``."""
        A_fg = self.pre_image(v_p, z)
        I_fg, I_m = self.render(A_fg, v_p, v_c)
        return A_fg, I_fg, I_m


def _encoder_stem(hp: HyperParams, in_channels: int, norm_act: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [conv4s2(in_channels, hp.ch(64))]
    if norm_act:
        layers += [LayerNorm2d(hp.ch(64)), nn.LeakyReLU(0.2)]
    layers += [DOWNBlk(hp.ch(64), hp.ch(128)), DOWNBlk(hp.ch(128), hp.ch(256))]
    return nn.Sequential(*layers)


def _bypass_head(hp: HyperParams) -> nn.Sequential:
    return nn.Sequential(
        conv3(hp.ch(256), hp.ch(512)),
        GLUNorm(hp.ch(256)),
        UPBlk(hp.ch(256), hp.ch(256), upsample=False),
    )


def _deep_trunk(hp: HyperParams, in_width: int) -> nn.Sequential:
    """DOWNBlk x2, 3x3 conv, layer norm, leaky ReLU, flatten."""
    return nn.Sequential(
        DOWNBlk(hp.ch(in_width), hp.ch(2 * in_width)),
        DOWNBlk(hp.ch(2 * in_width), hp.ch(1024)),
        conv3(hp.ch(1024), hp.ch(1024)),
        LayerNorm2d(hp.ch(1024)),
        nn.LeakyReLU(0.2),
        nn.Flatten(),
    )


def _dense(d_in: int, d_out: int = 512) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_out), nn.LayerNorm(d_out), nn.LeakyReLU(0.2))


def _flat_width(hp: HyperParams, side_div: int) -> int:
    side = hp.H // side_div
    return hp.ch(1024) * side * side


class ContentEncoder(nn.Module):
    """Shape encoder E_p: parent logits, shape/pose posteriors and B_fg."""

    def __init__(self, hp: HyperParams):
        super().__init__()
        self.hp = hp
        self.stem = _encoder_stem(hp, 3)
        self.bypass = _bypass_head(hp)
        self.trunk = _deep_trunk(hp, 256)
        flat = _flat_width(hp, 32)
        self.h_p = _dense(flat, hp.ch(512))
        self.h_z = _dense(flat, hp.ch(512))
        self.e_hat_p = nn.Linear(hp.ch(512), hp.N_P)
        self.mu_p = nn.Linear(hp.ch(512), hp.d_p)
        self.logsig_p = nn.Linear(hp.ch(512), hp.d_p)
        self.mu_z = nn.Linear(hp.ch(512), hp.d_z)
        self.logsig_z = nn.Linear(hp.ch(512), hp.d_z)

    def forward(self, I: torch.Tensor) -> dict[str, torch.Tensor]:
        _check_image(I, self.hp, 3, "E_p")
        H_p = self.stem(I)
        B_fg = self.bypass(H_p)
        h = self.trunk(H_p)
        hp_, hz = self.h_p(h), self.h_z(h)
        return {
            "e_hat_p": self.e_hat_p(hp_),
            "mu_p": self.mu_p(hp_),
            "logsig_p": self.logsig_p(hp_),
            "B_fg": B_fg,
            "mu_z": self.mu_z(hz),
            "logsig_z": self.logsig_z(hz),
        }


class StyleEncoder(nn.Module):
    """Style encoder E_c: child logits and style posterior."""

    def __init__(self, hp: HyperParams):
        super().__init__()
        self.hp = hp
        self.stem = _encoder_stem(hp, 3)
        self.trunk = _deep_trunk(hp, 256)
        self.h_c = _dense(_flat_width(hp, 32), hp.ch(512))
        self.e_hat_c = nn.Linear(hp.ch(512), hp.N_C)
        self.mu_c = nn.Linear(hp.ch(512), hp.d_c)
        self.logsig_c = nn.Linear(hp.ch(512), hp.d_c)

    def forward(self, I: torch.Tensor) -> dict[str, torch.Tensor]:
        _check_image(I, self.hp, 3, "E_c")
        h = self.h_c(self.trunk(self.stem(I)))
        return {"e_hat_c": self.e_hat_c(h), "mu_c": self.mu_c(h), "logsig_c": self.logsig_c(h)}


class BackgroundEncoder(nn.Module):
    """E_bg: image plus mask (4 channels) to the background bypass B_bg."""

    def __init__(self, hp: HyperParams):
        super().__init__()
        self.hp = hp
        self.stem = _encoder_stem(hp, 4, norm_act=False)
        self.bypass = _bypass_head(hp)

    def forward(self, I: torch.Tensor, I_m: torch.Tensor) -> torch.Tensor:
        _check_image(I, self.hp, 3, "E_bg(image)")
        _check_image(I_m, self.hp, 1, "E_bg(mask)")
        return self.bypass(self.stem(torch.cat([I, I_m], dim=1)))


class BackgroundDiscriminator(nn.Module):
    """Patch discriminator with real/fake and background/object heads."""

    def __init__(self, hp: HyperParams):
        super().__init__()
        self.hp = hp
        self.trunk = nn.Sequential(
            nn.Conv2d(3, hp.ch(64), 4, stride=2, padding=0),
            nn.LeakyReLU(0.2),
            nn.Conv2d(hp.ch(64), hp.ch(128), 4, stride=2, padding=0),
            nn.LeakyReLU(0.2),
            nn.Conv2d(hp.ch(128), hp.ch(256), 4, stride=4, padding=0),
            nn.LeakyReLU(0.2),
        )
        self.head_rf = nn.Conv2d(hp.ch(256), 1, 4, stride=1, padding=0)
        self.head_bg = nn.Conv2d(hp.ch(256), 1, 4, stride=1, padding=0)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        _check_image(x, self.hp, 3, "D_bg")
        x = F.interpolate(x, size=(D_BG_SIDE, D_BG_SIDE), mode="bilinear", align_corners=False)
        return self.trunk(x)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns ``(patch_rf, patch_bg, features)``; patches are (N, 1, 4, 4)."""
        h = self.features(x)
        return self.head_rf(h), self.head_bg(h), h


class ImageDiscriminator(nn.Module):
    """Real/fake logit, child-class logits and mid-level features."""

    def __init__(self, hp: HyperParams):
        super().__init__()
        self.hp = hp
        self.lower = nn.Sequential(
            conv4s2(3, hp.ch(64)),
            LayerNorm2d(hp.ch(64)),
            nn.LeakyReLU(0.2),
            DOWNBlk(hp.ch(64), hp.ch(128)),
            DOWNBlk(hp.ch(128), hp.ch(256)),
            DOWNBlk(hp.ch(256), hp.ch(512)),
        )
        self.upper = nn.Sequential(
            DOWNBlk(hp.ch(512), hp.ch(1024)),
            conv3(hp.ch(1024), hp.ch(1024)),
            LayerNorm2d(hp.ch(1024)),
            nn.LeakyReLU(0.2),
            nn.Flatten(),
        )
        flat = _flat_width(hp, 32)
        self.head_rf = nn.Sequential(_dense(flat, hp.ch(512)), nn.Linear(hp.ch(512), 1))
        self.head_cls = nn.Sequential(_dense(flat, hp.ch(512)), nn.Linear(hp.ch(512), hp.N_C))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        _check_image(x, self.hp, 3, "D_c")
        return self.lower(x)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns ``(rf_logit (N,), class_logits (N, N_C), features)``."""
        feats = self.features(x)
        h = self.upper(feats)
        return self.head_rf(h).squeeze(1), self.head_cls(h), feats


class OneGAN(nn.Module):
    """Embeddings, both generators and the three encoders.

    Discriminators live outside this module (see ``training.DiscriminatorBank``)
    because they are cloned per path.
    """

    GENERATOR_PARTS = ("embed", "G_bg", "G_fg")
    ENCODER_PARTS = ("E_p", "E_c", "E_bg")

    def __init__(self, hp: HyperParams):
        super().__init__()
        self.hp = hp
        self.embed = Embeddings(hp)
        self.G_bg = BackgroundGenerator(hp)
        self.G_fg = ForegroundGenerator(hp)
        self.E_p = ContentEncoder(hp)
        self.E_c = StyleEncoder(hp)
        self.E_bg = BackgroundEncoder(hp)

    def generator_parameters(self) -> Iterable[nn.Parameter]:
        for name in self.GENERATOR_PARTS:
            yield from getattr(self, name).parameters()

    def encoder_parameters(self) -> Iterable[nn.Parameter]:
        for name in self.ENCODER_PARTS:
            yield from getattr(self, name).parameters()

    def encode(self, I: torch.Tensor) -> EncoderPosterior:
        """Content and style encoders (no background bypass)."""
        p = self.E_p(I)
        c = self.E_c(I)
        return EncoderPosterior(
            e_hat_p=p["e_hat_p"], e_hat_c=c["e_hat_c"],
            mu_p=p["mu_p"], logsig_p=p["logsig_p"],
            mu_c=c["mu_c"], logsig_c=c["logsig_c"],
            mu_z=p["mu_z"], logsig_z=p["logsig_z"],
            B_fg=p["B_fg"],
        )


def make_discriminators(hp: HyperParams) -> nn.ModuleDict:
    return nn.ModuleDict({"D_c": ImageDiscriminator(hp), "D_bg": BackgroundDiscriminator(hp)})


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupt or incompatible with the hyperparameters."""


def save_checkpoint(
    directory: str | Path,
    modules: dict[str, nn.Module],
    meta: dict,
    extra: dict | None = None,
) -> Path:
    """Write one ``.npy`` blob per parameter/buffer plus ``manifest.json``.

    ``extra`` (optimizer and RNG state) is stored with ``torch.save`` in
    ``state.pt``.
    """
    directory = Path(directory)
    blobs = directory / "params"
    blobs.mkdir(parents=True, exist_ok=True)
    entries = []
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            key = f"{prefix}.{name}"
            fname = key.replace("/", "__") + ".npy"
            arr = tensor.detach().cpu().numpy()
            np.save(blobs / fname, arr, allow_pickle=False)
            entries.append({"name": key, "file": f"params/{fname}", "shape": list(arr.shape), "dtype": str(arr.dtype)})
    manifest = dict(meta)
    manifest["tensors"] = entries
    if extra is not None:
        torch.save(extra, directory / "state.pt")
        manifest["state"] = "state.pt"
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(directory / "manifest.json")
    return directory


def load_checkpoint(
    directory: str | Path, modules: dict[str, nn.Module]
) -> tuple[dict, dict | None]:
    """Load tensors into ``modules`` (validating shapes); returns ``(manifest, extra)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest in {directory}: {exc}") from exc
    by_name = {e["name"]: e for e in manifest["tensors"]}
    for prefix, module in modules.items():
        state = module.state_dict()
        new_state = {}
        for name, tensor in state.items():
            key = f"{prefix}.{name}"
            if key not in by_name:
                raise CheckpointError(f"checkpoint lacks tensor {key}")
            entry = by_name[key]
            if tuple(entry["shape"]) != tuple(tensor.shape):
                raise CheckpointError(
                    f"shape mismatch for {key}: checkpoint {tuple(entry['shape'])}, model {tuple(tensor.shape)}"
                )
            arr = np.load(directory / entry["file"], allow_pickle=False)
            new_state[name] = torch.from_numpy(arr).to(tensor.dtype)
        module.load_state_dict(new_state)
    extra = None
    if manifest.get("state"):
        extra = torch.load(directory / manifest["state"], weights_only=False)
    return manifest, extra


def clone_module(module: nn.Module) -> nn.Module:
    return copy.deepcopy(module)
