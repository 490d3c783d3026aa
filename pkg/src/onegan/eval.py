"""Evaluation metrics, code clustering and the oracle classifier used for
class-conditional Inception-style scores."""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_mutual_info_score, normalized_mutual_info_score

from .core import HyperParams, parent_of, priors_from_indices
from .networks import OneGAN
from .paths import generation_path, segment

__all__ = [
    "MetricReport",
    "config_digest",
    "append_results",
    "conditional_is",
    "nmi",
    "ami",
    "binarize",
    "iou",
    "dice",
    "encode_codes",
    "cluster_codes",
    "segmentation_eval",
    "OracleClassifier",
    "train_oracle_classifier",
    "CertificationError",
    "generation_eval",
    "clustering_eval",
    "METRICS",
]

logger = logging.getLogger(__name__)

METRICS = ("iou", "dice", "nmi", "ami", "cis")


@dataclass
class MetricReport:
    metric: str
    value: float
    count: int
    config_digest: str
    iteration: int | None = None
    ablation: str | None = None
    note: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def config_digest(obj) -> str:
    """Short stable hash of a JSON-serialisable configuration."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def append_results(path: str | Path, reports: list[MetricReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


# ---------------------------------------------------------------- scores

def conditional_is(class_avg_preds, atol: float = 1e-5) -> float:
    """``exp(mean_k KL(p_k || mean_j p_j))`` over per-class averaged predictions."""
    p = np.asarray(class_avg_preds, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("class_avg_preds must be a nonempty 2-D array")
    if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, atol=atol):
        raise ValueError("each row must be a probability vector")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def _check_labels(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if len(a) != len(b):
        raise ValueError(f"label arrays differ in length: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ValueError("need at least two labels")
    return a, b


def _degenerate(a, b) -> bool:
    if len(np.unique(a)) < 2 or len(np.unique(b)) < 2:
        warnings.warn("single-class labelling; mutual information score defined as 0", RuntimeWarning)
        return True
    return False


def nmi(labels_a, labels_b) -> float:
    """Normalised mutual information, arithmetic-mean normalisation."""
    a, b = _check_labels(labels_a, labels_b)
    if _degenerate(a, b):
        return 0.0
    return float(normalized_mutual_info_score(a, b, average_method="arithmetic"))


def ami(labels_a, labels_b) -> float:
    """Adjusted mutual information (expected MI under random permutation)."""
    a, b = _check_labels(labels_a, labels_b)
    if _degenerate(a, b):
        return 0.0
    return float(adjusted_mutual_info_score(a, b, average_method="arithmetic"))


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    """Soft mask to boolean; a value exactly at the threshold counts as foreground."""
    m = np.asarray(mask.detach().cpu() if isinstance(mask, torch.Tensor) else mask)
    return m.astype(bool) if m.dtype == bool else m >= threshold


def _pair(a, b, threshold):
    a, b = binarize(a, threshold), binarize(b, threshold)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(mask_a, mask_b, threshold: float = 0.5) -> float:
    a, b = _pair(mask_a, mask_b, threshold)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def dice(mask_a, mask_b, threshold: float = 0.5) -> float:
    a, b = _pair(mask_a, mask_b, threshold)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(a, b).sum() / total)


# ------------------------------------------------------------ model-based

def _batches(images: torch.Tensor, size: int):
    for i in range(0, len(images), size):
        yield images[i:i + size]


@torch.no_grad()
def encode_codes(images: torch.Tensor, model: OneGAN, batch_size: int = 50) -> np.ndarray:
    """Concatenated posterior means ``[mu_p, mu_c]`` per image."""
    model.eval()
    feats = []
    for x in _batches(images, batch_size):
        post = model.encode(x)
        feats.append(torch.cat([post.mu_p, post.mu_c], dim=1).cpu().numpy())
    return np.concatenate(feats)


def cluster_codes(images_or_features, model: OneGAN | None = None, k: int | None = None,
                  seed: int = 0, n_init: int = 10) -> np.ndarray:
    """K-means (k-means++, ``n_init`` restarts, best inertia) on encoder codes.

    Pass images with a model, or a precomputed feature matrix with ``model=None``.
    ``k`` defaults to the model's child-class count.
    """
    if model is not None:
        feats = encode_codes(images_or_features, model)
        k = model.hp.N_C if k is None else k
    else:
        feats = np.asarray(images_or_features, dtype=np.float64)
        if k is None:
            raise ValueError("k is required when clustering raw features")
    if k < 1 or k > len(feats):
        raise ValueError(f"k={k} must be in [1, {len(feats)}]")
    if k == 1:
        return np.zeros(len(feats), dtype=int)
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed)
    return km.fit_predict(feats)


@torch.no_grad()
def segmentation_eval(model: OneGAN, images: torch.Tensor, masks, threshold: float = 0.5,
                      batch_size: int = 50, digest: str = "") -> tuple[MetricReport, MetricReport]:
    """Mean IOU and DICE (scaled to 0-100) of predicted masks vs ground truth."""
    if masks is None or len(masks) == 0:
        note = "no ground-truth masks; skipped"
        return (MetricReport("iou", float("nan"), 0, digest, note=note),
                MetricReport("dice", float("nan"), 0, digest, note=note))
    model.eval()
    masks = np.asarray(masks)
    ious, dices = [], []
    start = 0
    for x in _batches(images, batch_size):
        pred = segment(x, model)[:, 0].cpu().numpy()
        for p, t in zip(pred, masks[start:start + len(x)]):
            ious.append(iou(p, t, threshold))
            dices.append(dice(p, t, threshold))
        start += len(x)
    n = len(ious)
    return (MetricReport("iou", 100 * float(np.mean(ious)), n, digest),
            MetricReport("dice", 100 * float(np.mean(dices)), n, digest))


# -------------------------------------------------------------- oracle

class CertificationError(RuntimeError):
    pass


class OracleClassifier(nn.Module):
    """Small CNN child-class classifier on [-1, 1] images."""

    def __init__(self, n_classes: int, width: int = 32):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(4), nn.Flatten(),
        )
        self.head = nn.Linear(2 * w * 16, n_classes)
        self.n_classes = n_classes
        self.accuracy: float | None = None
        self.min_accuracy = 0.95

    def forward(self, x):
        return self.head(self.features(x))

    @torch.no_grad()
    def predict_proba(self, x: torch.Tensor, batch_size: int = 100) -> torch.Tensor:
        self.eval()
        return torch.cat([F.softmax(self(b), dim=1) for b in _batches(x, batch_size)])

    @property
    def certified(self) -> bool:
        return self.accuracy is not None and self.accuracy >= self.min_accuracy

    def require_certified(self) -> None:
        if not self.certified:
            raise CertificationError(
                f"oracle accuracy {self.accuracy} below the {self.min_accuracy} floor; "
                "scores computed with it are not certified"
            )


def train_oracle_classifier(
    images: torch.Tensor,
    labels,
    n_classes: int,
    seed: int = 0,
    epochs: int = 10,
    batch_size: int = 50,
    holdout: float = 0.2,
    min_accuracy: float = 0.95,
) -> OracleClassifier:
    """Fit on real labelled scenes only; held-out accuracy is stored on the model.

    ``labels`` are 1-based child indices.
    """
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long) - 1
    n = len(images)
    perm = torch.randperm(n, generator=g)
    n_val = max(1, int(round(holdout * n)))
    val, tr = perm[:n_val], perm[n_val:]
    clf = OracleClassifier(n_classes)
    clf.min_accuracy = min_accuracy
    opt = torch.optim.Adam(clf.parameters(), lr=1e-3)
    for _ in range(epochs):
        clf.train()
        order = tr[torch.randperm(len(tr), generator=g)]
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            loss = F.cross_entropy(clf(images[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    pred = clf.predict_proba(images[val]).argmax(1)
    clf.accuracy = float((pred == y[val]).float().mean())
    logger.info("oracle classifier held-out accuracy %.4f", clf.accuracy)
    return clf


@torch.no_grad()
def generation_eval(model: OneGAN, oracle: OracleClassifier, per_class: int = 50, seed: int = 0,
                    digest: str = "") -> dict[str, MetricReport]:
    """Class-conditional generation scores from the oracle's predictions.

    ``cis``: conditional score on per-child averaged predictions.
    ``gen_nmi``: NMI between requested child and predicted child.
    """
    oracle.require_certified()
    model.eval()
    hp: HyperParams = model.hp
    g = torch.Generator().manual_seed(seed)
    avg, requested, predicted = [], [], []
    for k in range(1, hp.N_C + 1):
        phi_c = torch.full((per_class,), k, dtype=torch.long)
        z = torch.randn(per_class, hp.d_z, generator=g)
        out = generation_path(priors_from_indices(phi_c, parent_of(phi_c, hp), z, hp), model)
        probs = oracle.predict_proba(out.quad.I)
        avg.append(probs.mean(0).double().numpy())
        requested += [k] * per_class
        predicted += (probs.argmax(1) + 1).tolist()
    avg = np.stack(avg)
    avg /= avg.sum(axis=1, keepdims=True)
    n = hp.N_C * per_class
    return {
        "cis": MetricReport("cis", conditional_is(avg), n, digest),
        "gen_nmi": MetricReport("gen_nmi", nmi(requested, predicted), n, digest),
    }


def clustering_eval(model: OneGAN, images: torch.Tensor, labels, k: int | None = None,
                    seed: int = 0, digest: str = "") -> dict[str, MetricReport]:
    pred = cluster_codes(images, model, k=k, seed=seed)
    n = len(pred)
    return {
        "nmi": MetricReport("nmi", nmi(labels, pred), n, digest),
        "ami": MetricReport("ami", ami(labels, pred), n, digest),
    }

