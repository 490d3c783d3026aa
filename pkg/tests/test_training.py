import dataclasses

import pytest
import torch

from onegan import losses as L
from onegan import training as T
from onegan.core import HyperParams, LossWeights, RunConfig
from onegan.training import (
    ABLATIONS,
    DiscriminatorBank,
    StateError,
    Trainer,
    apply_ablation,
    load_model,
    make_optimizers,
    phase_schedule,
    training_step,
)

from conftest import rand_images, tiny_hp


def _batch(hp, seed=0):
    return rand_images(hp.batch_size, hp, seed), rand_images(hp.batch_size, hp, seed + 100)


def _params(module):
    return {k: v.detach().clone() for k, v in module.named_parameters()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# ------------------------------------------------------------- schedule

def test_schedule_defaults():
    hp = HyperParams()
    s0 = phase_schedule(0, hp)
    assert (s0.phase, s0.fake_recon_active, s0.real_recon_active) == (1, False, False)
    s1 = phase_schedule(200_000, hp)
    assert s1.phase == 2 and s1.fake_recon_active and not s1.real_recon_active and s1.generators_frozen
    s2 = phase_schedule(400_000, hp)
    assert s2.real_recon_active and not s2.generators_frozen


def test_schedule_boundaries():
    hp = tiny_hp(phase1_iters=5, real_recon_delay=3, encoder_warmup_iters=2)
    assert phase_schedule(4, hp).phase == 1
    assert phase_schedule(5, hp).phase == 2
    assert [phase_schedule(i, hp).generators_frozen for i in range(4, 9)] == [False, True, True, False, False]
    assert [phase_schedule(i, hp).real_recon_active for i in range(6, 10)] == [False, False, True, True]
    assert phase_schedule(8, hp).active_paths == T.PATHS


def test_schedule_invariants_and_monotone():
    hp = tiny_hp(phase1_iters=7, real_recon_delay=4, encoder_warmup_iters=3)
    prev = None
    for i in range(30):
        s = phase_schedule(i, hp)
        if s.phase == 1:
            assert not (s.fake_recon_active or s.real_recon_active or s.generators_frozen)
        if s.real_recon_active:
            assert s.fake_recon_active
        if prev is not None:
            assert s.phase >= prev.phase
            assert s.fake_recon_active >= prev.fake_recon_active
            assert s.real_recon_active >= prev.real_recon_active
        prev = s


def test_schedule_rejects_negative():
    with pytest.raises(ValueError):
        phase_schedule(-1, tiny_hp())


# -------------------------------------------------------- discriminators

def test_clone_bank_sizes_and_equality(hp):
    bank = DiscriminatorBank(hp)
    assert bank.count() == {"D_c": 1, "D_bg": 1}
    bank.clone()
    assert bank.count() == {"D_c": 3, "D_bg": 3}
    src = bank.sets["generation"]
    for path in ("fake_recon", "real_recon"):
        for name in ("D_c", "D_bg"):
            assert _same(_params(src[name]), _params(bank.sets[path][name]))
            assert src[name] is not bank.sets[path][name]
    with pytest.raises(StateError):
        bank.clone()


def test_clones_diverge_after_update(cfg):
    tr = Trainer(dataclasses.replace(cfg, hp=tiny_hp(phase1_iters=0, encoder_warmup_iters=0)))
    obj, bg = _batch(tr.hp)
    tr.step(obj, bg)
    gen = _params(tr.bank.sets["generation"]["D_c"])
    fake = _params(tr.bank.sets["fake_recon"]["D_c"])
    assert not _same(gen, fake)


def test_clone_optimizer_state_is_separate(cfg):
    tr = Trainer(dataclasses.replace(cfg, hp=tiny_hp(phase1_iters=1)))
    obj, bg = _batch(tr.hp)
    tr.step(obj, bg)
    tr.clone_discriminators()
    a = tr.optimizers["D_c/generation"].state
    b = tr.optimizers["D_c/fake_recon"].state
    pa = next(iter(tr.bank.sets["generation"]["D_c"].parameters()))
    pb = next(iter(tr.bank.sets["fake_recon"]["D_c"].parameters()))
    # the clone starts from a copy of the original's moments
    assert torch.equal(a[pa]["exp_avg"], b[pb]["exp_avg"])
    assert a[pa]["exp_avg"] is not b[pb]["exp_avg"]


def test_clones_only_see_their_own_path(cfg, monkeypatch):
    tr = Trainer(dataclasses.replace(cfg, hp=tiny_hp(phase1_iters=0, real_recon_delay=0)))
    tr.clone_discriminators()
    current = {"path": None}
    seen = []

    def wrap(fn, path_of):
        def inner(*args, **kw):
            current["path"] = path_of(args)
            return fn(*args, **kw)
        return inner

    monkeypatch.setattr(T, "_generation_pass", wrap(T._generation_pass, lambda a: "generation"))
    monkeypatch.setattr(T, "_recon_pass", wrap(T._recon_pass, lambda a: f"{a[-1]}_recon"))
    for path, ds in tr.bank.sets.items():
        for d in ds.values():
            d.register_forward_hook(lambda m, i, o, p=path: seen.append((p, current["path"])))
    tr.step(*_batch(tr.hp))
    assert {p for p, _ in seen} == set(T.PATHS)
    assert all(owner == caller for owner, caller in seen)


# ------------------------------------------------------------- the step

def test_phase1_step_has_single_path(cfg, monkeypatch):
    tr = Trainer(cfg)

    def boom(*a, **k):
        raise AssertionError("reconstruction loss computed in Phase I")

    monkeypatch.setattr(L, "reconstruction_loss", boom)
    monkeypatch.setattr(L, "vae_kl_loss", boom)
    reports = tr.step(*_batch(tr.hp))
    assert [r.path for r in reports] == ["generation"]
    assert not tr.bank.cloned


def test_phase2_step_emits_three_reports(cfg):
    tr = Trainer(dataclasses.replace(cfg, hp=tiny_hp(phase1_iters=0, real_recon_delay=0, encoder_warmup_iters=0)))
    reports = tr.step(*_batch(tr.hp))
    assert [r.path for r in reports] == ["generation", "fake_recon", "real_recon"]
    assert all(torch.isfinite(torch.tensor(list(r.terms.values()))).all() for r in reports)
    assert reports[2].terms["L_E"] == 0.0


def test_generators_frozen_during_warmup(cfg):
    tr = Trainer(dataclasses.replace(cfg, hp=tiny_hp(phase1_iters=0, encoder_warmup_iters=5)))
    assert tr.state.generators_frozen
    gen = {k: _params(getattr(tr.model, k)) for k in tr.model.GENERATOR_PARTS}
    enc = {k: _params(getattr(tr.model, k)) for k in tr.model.ENCODER_PARTS}
    tr.step(*_batch(tr.hp))
    assert all(_same(gen[k], _params(getattr(tr.model, k))) for k in gen)
    assert not all(_same(enc[k], _params(getattr(tr.model, k))) for k in enc)


def test_generators_update_in_phase1(cfg):
    tr = Trainer(cfg)
    before = _params(tr.model.G_fg)
    tr.step(*_batch(tr.hp))
    assert not _same(before, _params(tr.model.G_fg))


def test_missing_backgrounds_rejected(cfg):
    tr = Trainer(cfg)
    obj, _ = _batch(tr.hp)
    with pytest.raises(ValueError, match="background"):
        training_step((obj, torch.empty(0, 3, 32, 32)), tr.state, tr.model, tr.bank, tr.optimizers, tr.rng)


def test_phase2_requires_clones(cfg):
    tr = Trainer(cfg)
    st = phase_schedule(5, tr.hp)
    with pytest.raises(StateError):
        training_step(_batch(tr.hp), st, tr.model, tr.bank, tr.optimizers, tr.rng)


def test_optimizers(hp):
    from onegan.networks import OneGAN

    model, bank = OneGAN(hp), DiscriminatorBank(hp)
    opts = make_optimizers(model, bank, hp)
    assert set(opts) == {"generators", "encoders", "D_c/generation", "D_bg/generation"}
    for o in opts.values():
        for g in o.param_groups:
            assert g["lr"] == 2e-4 and g["betas"] == (0.9, 0.999)
        assert len(o.state) == 0


# ----------------------------------------------------- reproducibility

def test_two_iterations_bitwise_reproducible(cfg):
    runs = []
    for _ in range(2):
        tr = Trainer(dataclasses.replace(cfg, hp=tiny_hp(phase1_iters=1, encoder_warmup_iters=0)))
        tr.step(*_batch(tr.hp, 0))
        tr.step(*_batch(tr.hp, 1))
        runs.append({**_params(tr.model), **{f"bank.{k}": v for k, v in _params(tr.bank).items()}})
    assert _same(*runs)


def test_resume_matches_uninterrupted(cfg, tmp_path):
    c = dataclasses.replace(cfg, hp=tiny_hp(phase1_iters=1, encoder_warmup_iters=0, real_recon_delay=1))
    batches = [_batch(c.hp, i) for i in range(4)]

    full = Trainer(c)
    for b in batches[:3]:
        full.step(*b)
    expected = [r.terms for r in full.step(*batches[3])]

    part = Trainer(c)
    for b in batches[:3]:
        part.step(*b)
    part.save(tmp_path / "ck", {"cursor": 3})

    resumed = Trainer(c)
    assert resumed.load(tmp_path / "ck") == {"cursor": 3}
    assert resumed.iteration == 3 and resumed.bank.cloned
    got = [r.terms for r in resumed.step(*batches[3])]
    assert got == expected


def test_checkpoint_manifest_and_load_model(cfg, tmp_path):
    tr = Trainer(cfg)
    for i in range(2):
        tr.step(*_batch(tr.hp, i))
    tr.save(tmp_path / "ck")
    model, manifest = load_model(tmp_path / "ck")
    assert manifest["iteration"] == 2 and manifest["phase"] == 2
    assert manifest["phase_state"]["fake_recon_active"]
    assert _same(_params(model), _params(tr.model))


# ------------------------------------------------------------ ablations

def test_ablation_mappings():
    base = RunConfig(hp=HyperParams(), weights=LossWeights())
    got = {t: apply_ablation(base, t) for t in ABLATIONS}
    assert got["default"].hp == base.hp and got["default"].weights == base.weights
    assert got["no-mask-reg"].weights.w_mask == 0
    hp = got["full-mixup"].hp
    assert (hp.beta1_low, hp.beta1_high) == (0.0, 1.0)
    hp = got["no-mixup"].hp
    assert (hp.beta0_low, hp.beta0_high, hp.beta1_low, hp.beta1_high) == (1.0, 1.0, 1.0, 1.0)
    assert got["no-bypass"].hp.use_bypass is False
    assert got["phase-I-only"].hp.phase1_iters == base.hp.total_iters
    assert phase_schedule(base.hp.total_iters - 1, got["phase-I-only"].hp).phase == 1
    nm = got["no-multi-phase"].hp
    assert phase_schedule(0, nm).active_paths == T.PATHS and not phase_schedule(0, nm).generators_frozen
    assert not phase_schedule(base.hp.total_iters - 1, got["no-real-recon"].hp).real_recon_active
    assert all(got[t].ablation == t for t in ABLATIONS)
    with pytest.raises(ValueError):
        apply_ablation(base, "no-such-variant")
