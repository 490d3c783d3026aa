import dataclasses

import pytest
import torch

from onegan.core import (
    ConfigError,
    HyperParams,
    LossWeights,
    MixupCoeffs,
    RunConfig,
    load_config,
    onehot,
    parent_of,
    priors_from_indices,
    sample_mixup,
    sample_priors,
    save_config,
)
from conftest import tiny_hp


def test_default_hyperparameters():
    hp = HyperParams()
    assert (hp.N_C, hp.N_P, hp.d_z, hp.d_c, hp.d_p, hp.d_bg) == (200, 20, 100, 32, 16, 32)
    assert (hp.H, hp.W, hp.pre_side) == (128, 128, 16)
    assert hp.batch_size == 20 and hp.lr == 2e-4
    assert (hp.total_iters, hp.phase1_iters, hp.real_recon_delay) == (600_000, 200_000, 200_000)
    assert (hp.beta0_low, hp.beta0_high, hp.beta1_low, hp.beta1_high) == (0, 1, 0.5, 1)


def test_default_loss_weights():
    w = LossWeights()
    assert (w.w_bg_adv, w.w_regv, w.w_mask, w.w_maskD) == (10, 0.1, 2, 0.1)
    assert w.w_adv == w.w_cls == w.w_mse == w.w_vae == w.w_rec == w.w_per == 1


@pytest.mark.parametrize(
    "kw",
    [
        dict(N_P=200),
        dict(H=48),
        dict(H=16),
        dict(phase1_iters=700_000),
        dict(beta1_low=0.8, beta1_high=0.5),
        dict(beta0_high=1.5),
        dict(gan_loss="wgan"),
        dict(d_z=0),
        dict(channel_scale=0),
    ],
)
def test_invalid_hyperparameters(kw):
    with pytest.raises(ConfigError):
        HyperParams(**kw)


def test_negative_weight_rejected():
    with pytest.raises(ConfigError):
        LossWeights(w_mask=-1)


def test_channel_scaling():
    hp = HyperParams(channel_scale=0.5)
    assert hp.ch(2048) == 1024 and hp.ch(16) == 8
    assert HyperParams(channel_scale=1 / 1024).ch(16) == 1


def test_config_round_trip(tmp_path):
    cfg = RunConfig(hp=tiny_hp(gan_loss="hinge"), weights=LossWeights(w_mask=0.0), seed=7, dataset="d", hflip=False)
    save_config(cfg, tmp_path / "a.ini")
    back = load_config(tmp_path / "a.ini")
    assert back == cfg
    save_config(back, tmp_path / "b.ini")
    assert (tmp_path / "a.ini").read_text() == (tmp_path / "b.ini").read_text()


def test_config_partial_keeps_defaults(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[hyperparams]\nN_C = 12\nN_P = 3\n[run]\nseed = 5\n")
    cfg = load_config(p)
    assert cfg.hp.N_C == 12 and cfg.hp.d_z == 100 and cfg.seed == 5


@pytest.mark.parametrize(
    "text",
    [
        "[hyperparams]\nN_Q = 3\n",
        "[model]\nN_C = 3\n",
        "[hyperparams]\nN_C = many\n",
        "[run]\nhflip = maybe\n",
        "not an ini file",
        "[hyperparams]\nN_P = 300\n",
    ],
)
def test_config_errors(tmp_path, text):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_onehot():
    v = onehot(3, 5)
    assert v.tolist() == [0, 0, 1, 0, 0]
    for bad in (0, 6):
        with pytest.raises(ValueError):
            onehot(bad, 5)


def test_parent_map_blocks():
    hp = HyperParams()
    phi_c = torch.arange(1, 201)
    phi_p = parent_of(phi_c, hp)
    assert phi_p.min() == 1 and phi_p.max() == 20
    assert (phi_p[:10] == 1).all() and (phi_p[-10:] == 20).all()
    assert (phi_p.diff() >= 0).all()
    assert torch.bincount(phi_p)[1:].tolist() == [10] * 20


def test_sample_priors_shapes_and_determinism(hp):
    a = sample_priors(hp, torch.Generator().manual_seed(1), n=6)
    b = sample_priors(hp, torch.Generator().manual_seed(1), n=6)
    assert len(a) == 6
    assert a.e_c.shape == (6, hp.N_C) and a.e_p.shape == (6, hp.N_P) and a.z.shape == (6, hp.d_z)
    assert torch.equal(a.z, b.z) and torch.equal(a.phi_c, b.phi_c)
    assert torch.equal(a.e_bg, a.e_p)
    assert torch.equal(a.e_c.sum(1), torch.ones(6))
    assert torch.equal(a.phi_p, parent_of(a.phi_c, hp))


def test_sample_priors_pinned_child(hp):
    p = sample_priors(hp, torch.Generator().manual_seed(0), n=3, child=3)
    assert torch.equal(p.e_c, onehot(3, hp.N_C).expand(3, -1))


def test_untied_parent_is_sampled():
    hp = tiny_hp(N_C=12, N_P=3, tie_parent_to_child=False)
    p = sample_priors(hp, torch.Generator().manual_seed(0), n=200)
    assert not torch.equal(p.phi_p, parent_of(p.phi_c, hp))


def test_priors_index_validation(hp):
    z = torch.zeros(1, hp.d_z)
    with pytest.raises(ValueError):
        priors_from_indices(torch.tensor([hp.N_C + 1]), torch.tensor([1]), z, hp)
    with pytest.raises(ValueError):
        priors_from_indices(torch.tensor([1]), torch.tensor([0]), z, hp)


def test_sample_mixup_ranges():
    hp = HyperParams()
    m = sample_mixup(hp, 10_000, torch.Generator().manual_seed(0))
    assert 0 <= m.beta0.min() and m.beta0.max() <= 1
    assert 0.5 <= m.beta1.min() and m.beta1.max() <= 1
    assert abs(m.beta1.mean().item() - 0.75) < 0.01


def test_mixup_constant():
    m = MixupCoeffs.constant(3, 0.25, 1.0)
    assert m.beta0.tolist() == [0.25] * 3 and m.beta1.tolist() == [1.0] * 3


def test_prior_bundle_to_device(hp):
    p = sample_priors(hp, torch.Generator().manual_seed(0), n=2)
    q = p.to("cpu")
    assert all(torch.equal(getattr(p, f.name), getattr(q, f.name)) for f in dataclasses.fields(p))
