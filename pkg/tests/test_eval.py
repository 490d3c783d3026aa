import json
import math

import numpy as np
import pytest
import torch

from onegan import eval as E
from onegan.eval import (
    CertificationError,
    MetricReport,
    OracleClassifier,
    ami,
    append_results,
    cluster_codes,
    conditional_is,
    dice,
    encode_codes,
    iou,
    nmi,
    segmentation_eval,
    train_oracle_classifier,
)
from onegan.core import HyperParams
from onegan.data import SyntheticSceneSpec, generate_synthetic, to_tensor
from onegan.networks import OneGAN

from conftest import rand_images


# ---------------------------------------------------------------- C-IS

def test_cis_identical_rows():
    assert conditional_is(np.full((5, 4), 0.25)) == pytest.approx(1.0, abs=1e-12)


def test_cis_one_hot_equals_class_count():
    assert conditional_is(np.eye(12)) == pytest.approx(12.0, abs=1e-12)


def test_cis_brute_force():
    rng = np.random.default_rng(0)
    p = rng.random((6, 5))
    p /= p.sum(1, keepdims=True)
    m = p.mean(0)
    kl = [sum(pi * math.log(pi / mi) for pi, mi in zip(row, m)) for row in p]
    assert conditional_is(p) == pytest.approx(math.exp(sum(kl) / len(kl)), rel=1e-12)


def test_cis_rejects_unnormalised():
    with pytest.raises(ValueError):
        conditional_is(np.full((3, 3), 0.5))
    with pytest.raises(ValueError):
        conditional_is(np.array([[1.5, -0.5]]))


# --------------------------------------------------------------- NMI / AMI

def test_nmi_examples():
    assert nmi([0, 1, 2, 2], [0, 1, 2, 2]) == pytest.approx(1.0)
    assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)
    assert nmi([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(0.0, abs=1e-12)


def test_nmi_arithmetic_normalisation():
    a, b = [0, 0, 1, 1, 2, 2], [0, 0, 1, 1, 1, 1]

    def H(x):
        _, c = np.unique(x, return_counts=True)
        p = c / c.sum()
        return -(p * np.log(p)).sum()

    joint = [f"{x}-{y}" for x, y in zip(a, b)]
    mi = H(a) + H(b) - H(joint)
    assert nmi(a, b) == pytest.approx(mi / ((H(a) + H(b)) / 2))


def test_mi_degenerate_warns():
    with pytest.warns(RuntimeWarning):
        assert nmi([1, 1, 1], [0, 1, 2]) == 0.0
    with pytest.warns(RuntimeWarning):
        assert ami([0, 1, 2], [4, 4, 4]) == 0.0


def test_mi_input_validation():
    with pytest.raises(ValueError):
        nmi([0, 1], [0, 1, 1])
    with pytest.raises(ValueError):
        ami([0], [0])


def test_nmi_ami_permutation_invariance():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.integers(0, 5, 60)
        b = rng.integers(0, 4, 60)
        perm = rng.permutation(5)
        assert nmi(perm[a], b) == pytest.approx(nmi(a, b), abs=1e-12)
        assert ami(perm[a], b) == pytest.approx(ami(a, b), abs=1e-12)
        assert nmi(b, a) == pytest.approx(nmi(a, b), abs=1e-12)


# ------------------------------------------------------------ IOU / DICE

def test_mask_examples():
    a = np.zeros((2, 2), bool)
    b = np.zeros((2, 2), bool)
    a[0, :] = True
    b[:, 0] = True
    assert iou(a, b) == pytest.approx(1 / 3)
    assert dice(a, b) == pytest.approx(1 / 2)
    assert iou(a, a) == dice(a, a) == 1.0
    assert iou(a, ~a) == dice(a, ~a) == 0.0
    empty = np.zeros((3, 3))
    assert iou(empty, empty) == dice(empty, empty) == 1.0


def test_tie_counts_as_foreground():
    half = np.full((4, 4), 0.5)
    assert E.binarize(half).all()
    assert iou(half, np.ones((4, 4))) == 1.0


def test_mask_shape_mismatch():
    with pytest.raises(ValueError):
        iou(np.ones((2, 2)), np.ones((3, 3)))


def test_dice_iou_identity():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        a, b = rng.random((8, 8)) < rng.random(), rng.random((8, 8)) < rng.random()
        j = iou(a, b)
        assert dice(a, b) == pytest.approx(2 * j / (1 + j), abs=1e-12)


# ------------------------------------------------------------ clustering

def test_cluster_blobs():
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.normal(-10, 0.1, (30, 4)), rng.normal(10, 0.1, (30, 4))])
    truth = np.repeat([0, 1], 30)
    assert nmi(truth, cluster_codes(x, k=2)) == pytest.approx(1.0)


def test_cluster_edge_cases():
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert (cluster_codes(x, k=1) == 0).all()
    with pytest.raises(ValueError):
        cluster_codes(x, k=6)
    with pytest.raises(ValueError):
        cluster_codes(x)


def test_cluster_deterministic():
    x = np.random.default_rng(4).normal(size=(40, 6))
    assert np.array_equal(cluster_codes(x, k=4, seed=1), cluster_codes(x, k=4, seed=1))


def test_feature_dim_at_defaults():
    hp = HyperParams(H=64, channel_scale=1 / 16)
    assert hp.d_p + hp.d_c == 48
    f = encode_codes(rand_images(3, hp), OneGAN(hp))
    assert f.shape == (3, 48)


def test_cluster_with_model(hp):
    model = OneGAN(hp)
    labels = cluster_codes(rand_images(6, hp), model)
    assert labels.shape == (6,) and labels.max() < hp.N_C


# ----------------------------------------------------------- segmentation

def test_segmentation_perfect_predictor(hp, monkeypatch):
    masks = np.random.default_rng(0).random((5, hp.H, hp.H)) < 0.4
    it = iter([torch.from_numpy(masks[:, None].astype(np.float32))])
    monkeypatch.setattr(E, "segment", lambda x, model: next(it))
    i, d = segmentation_eval(torch.nn.Identity(), rand_images(5, hp), masks)
    assert (i.value, d.value, i.count) == (100.0, 100.0, 5)


def test_segmentation_missing_truth(hp):
    i, d = segmentation_eval(OneGAN(hp), rand_images(2, hp), None)
    assert math.isnan(i.value) and i.note and i.count == 0


def test_segmentation_real_model_range(hp):
    masks = np.ones((3, hp.H, hp.H), bool)
    i, d = segmentation_eval(OneGAN(hp), rand_images(3, hp), masks)
    assert 0 <= i.value <= 100 and 0 <= d.value <= 100


# ----------------------------------------------------------------- oracle

@pytest.fixture(scope="module")
def small_scenes():
    ds = generate_synthetic(SyntheticSceneSpec(n_parents=2, colors_per_shape=2, H=32), 200, 0)
    return to_tensor(ds.images), ds.phi_c


def test_oracle_deterministic_and_certified(small_scenes):
    x, y = small_scenes
    a = train_oracle_classifier(x, y, 4, seed=5, epochs=4)
    b = train_oracle_classifier(x, y, 4, seed=5, epochs=4)
    assert a.accuracy == b.accuracy
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert a.certified
    a.require_certified()


def test_uncertified_oracle_refuses(hp):
    clf = OracleClassifier(hp.N_C)
    clf.accuracy = 0.5
    assert not clf.certified
    with pytest.raises(CertificationError):
        E.generation_eval(OneGAN(hp), clf, per_class=2)


@pytest.mark.filterwarnings("ignore:single-class")
def test_generation_eval_reports(hp):
    clf = OracleClassifier(hp.N_C, width=4)
    clf.accuracy = 1.0
    out = E.generation_eval(OneGAN(hp), clf, per_class=3)
    assert 1.0 <= out["cis"].value <= hp.N_C
    assert out["cis"].count == 3 * hp.N_C
    assert 0 <= out["gen_nmi"].value <= 1


# ---------------------------------------------------------------- reports

def test_results_file(tmp_path):
    reps = [MetricReport("nmi", 0.5, 10, "abc"), MetricReport("iou", 60.0, 10, "abc", iteration=3)]
    append_results(tmp_path / "r.jsonl", reps)
    append_results(tmp_path / "r.jsonl", reps[:1])
    rows = [json.loads(l) for l in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert [r["metric"] for r in rows] == ["nmi", "iou", "nmi"]
    assert rows[1]["iteration"] == 3


def test_config_digest_stable():
    assert E.config_digest({"a": 1, "b": 2}) == E.config_digest({"b": 2, "a": 1})
    assert E.config_digest({"a": 1}) != E.config_digest({"a": 2})
