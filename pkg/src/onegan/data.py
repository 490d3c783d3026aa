"""Datasets: real-image ingestion, a synthetic scene generator with ground
truth, the on-disk layout and the training batch iterator.

On-disk layout under a dataset root::

    <root>/manifest.tsv
    <root>/objects/<id>.png        training object images (X_c)
    <root>/backgrounds/<id>.png    background images / patches (X_bg)
    <root>/eval/<id>.png           held-out evaluation images
    <root>/masks/<id>.png          ground-truth masks, evaluation only

``manifest.tsv`` has one record per line with tab-separated fields
``path split phi_p phi_c mask_path source``; ``split`` is one of
``object``, ``background``, ``eval``; missing values are ``-``. Lines
starting with ``#`` are comments.
"""
from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

__all__ = [
    "DataError",
    "ImageRecord",
    "DatasetSplit",
    "SyntheticSceneSpec",
    "SyntheticDataset",
    "object_support",
    "generate_synthetic",
    "ingest_real",
    "object_count",
    "center_crop_resize",
    "write_split",
    "read_manifest",
    "load_split",
    "load_images",
    "to_tensor",
    "BatchIterator",
    "MANIFEST",
]

logger = logging.getLogger(__name__)

MANIFEST = "manifest.tsv"
SPLIT_DIRS = {"object": "objects", "background": "backgrounds", "eval": "eval"}


class DataError(RuntimeError):
    pass


@dataclass
class ImageRecord:
    id: str
    split: str
    source: str
    image: np.ndarray | None = None  # uint8 (H, W, 3)
    path: str | None = None
    phi_p: int | None = None
    phi_c: int | None = None
    mask: np.ndarray | None = None  # bool (H, W); evaluation only
    mask_path: str | None = None


@dataclass
class DatasetSplit:
    X_c: list[ImageRecord]
    X_bg: list[ImageRecord]
    X_eval: list[ImageRecord] = field(default_factory=list)

    def check_disjoint(self) -> None:
        """No source image may feed both the object and background sets."""
        obj = {r.source for r in self.X_c}
        bg = {r.source for r in self.X_bg}
        both = obj & bg
        if both:
            raise DataError(f"{len(both)} source images appear in both X_c and X_bg")


# ---------------------------------------------------------------- synthetic

SHAPE_FAMILIES = ("ellipse", "triangle", "rectangle", "pentagon", "star", "cross", "diamond", "hexagon")

MAX_CHILDREN = 64


def child_colour(phi_c: int, n_children: int) -> np.ndarray:
    """Saturated RGB for a child class; hues are spread evenly so every child
    has its own colour. Backgrounds stay muted so colour separates them."""
    hue = (phi_c - 1) / n_children
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
    return np.array([r, g, b]) * 255


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Parent class fixes the shape family, child class fixes (shape, colour).

    Child ``phi_c = (phi_p - 1) * colors_per_shape + colour + 1`` so children
    of one parent are contiguous.
    """

    n_parents: int = 3
    colors_per_shape: int = 4
    H: int = 64
    fg_min: float = 0.1
    fg_max: float = 0.6

    def __post_init__(self):
        if not 1 <= self.n_parents <= len(SHAPE_FAMILIES):
            raise ValueError(f"n_parents must be in [1, {len(SHAPE_FAMILIES)}]")
        if not 1 <= self.n_children <= MAX_CHILDREN:
            raise ValueError(f"n_parents * colors_per_shape must be in [1, {MAX_CHILDREN}]")
        if not 0 < self.fg_min < self.fg_max < 1:
            raise ValueError("need 0 < fg_min < fg_max < 1")

    @property
    def n_children(self) -> int:
        return self.n_parents * self.colors_per_shape

    def parent_of(self, phi_c: int) -> int:
        return (phi_c - 1) // self.colors_per_shape + 1


@dataclass
class SyntheticDataset:
    spec: SyntheticSceneSpec
    images: np.ndarray  # uint8 (N, H, W, 3)
    masks: np.ndarray  # bool (N, H, W)
    phi_p: np.ndarray  # int (N,), 1-based
    phi_c: np.ndarray
    poses: np.ndarray  # (N, 4): cx, cy, scale, theta
    backgrounds: np.ndarray  # uint8 (M, H, W, 3)
    bg_parent: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


def _polygon(n: int, r: float = 1.0, phase: float = 0.0) -> np.ndarray:
    a = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def _star(points: int = 5, r_out: float = 1.0, r_in: float = 0.45) -> np.ndarray:
    a = -np.pi / 2 + np.pi * np.arange(2 * points) / points
    r = np.where(np.arange(2 * points) % 2 == 0, r_out, r_in)
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


_POLYGONS = {
    "triangle": _polygon(3, 1.0, -np.pi / 2),
    "rectangle": np.array([[-1.0, -0.55], [1.0, -0.55], [1.0, 0.55], [-1.0, 0.55]]),
    "pentagon": _polygon(5, 1.0, -np.pi / 2),
    "star": _star(),
    "cross": np.array(
        [[-0.3, -1], [0.3, -1], [0.3, -0.3], [1, -0.3], [1, 0.3], [0.3, 0.3],
         [0.3, 1], [-0.3, 1], [-0.3, 0.3], [-1, 0.3], [-1, -0.3], [-0.3, -0.3]]
    ),
    "diamond": np.array([[0.0, -1.0], [0.6, 0.0], [0.0, 1.0], [-0.6, 0.0]]),
    "hexagon": _polygon(6, 1.0, 0.0),
}


def _inside_polygon(u: np.ndarray, v: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule point-in-polygon, vectorised over the grid."""
    inside = np.zeros(u.shape, dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for a, b, c, d in zip(x0, y0, x1, y1):
        crosses = (b > v) != (d > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = a + (v - b) * (c - a) / (d - b)
        inside ^= crosses & (u < x_at)
    return inside


def _shape_area(family: str) -> float:
    if family == "ellipse":
        return math.pi * 0.6
    p = _POLYGONS[family]
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def object_support(spec: SyntheticSceneSpec, phi_p: int, pose: Iterable[float]) -> np.ndarray:
    """Boolean support of the parent's shape at ``pose = (cx, cy, scale, theta)``."""
    cx, cy, scale, theta = pose
    H = spec.H
    coords = (np.arange(H) + 0.5) / H * 2 - 1
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = gx - cx, gy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / scale
    v = (-s * dx + c * dy) / scale
    family = SHAPE_FAMILIES[phi_p - 1]
    if family == "ellipse":
        return u**2 + (v / 0.6) ** 2 <= 1.0
    return _inside_polygon(u, v, _POLYGONS[family])


def _background(spec: SyntheticSceneSpec, phi_p: int, rng: np.random.Generator) -> np.ndarray:
    """Muted two-tone gradient keyed to the parent plus band-limited noise."""
    H = spec.H
    hue_rng = np.random.default_rng(1000 + phi_p)  # fixed per parent
    base_a = hue_rng.uniform(60, 140, size=3)
    base_b = hue_rng.uniform(60, 140, size=3)
    angle = hue_rng.uniform(0, 2 * np.pi) + rng.normal(0, 0.3)
    coords = np.linspace(-1, 1, H)
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    t = (np.cos(angle) * gx + np.sin(angle) * gy + 1.5) / 3.0
    img = base_a[None, None] * (1 - t[..., None]) + base_b[None, None] * t[..., None]
    noise = ndimage.gaussian_filter(rng.normal(0, 1, size=(H, H, 3)), sigma=(H / 16, H / 16, 0))
    noise /= noise.std() + 1e-8
    img += 18 * noise
    return img


def _render(spec, phi_p, phi_c, pose, bg, rng) -> tuple[np.ndarray, np.ndarray]:
    mask = object_support(spec, phi_p, pose)
    colour = child_colour(phi_c, spec.n_children)
    H = spec.H
    coords = np.linspace(-1, 1, H)
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    shade = 1.0 + 0.12 * (np.cos(pose[3]) * gx + np.sin(pose[3]) * gy)
    obj = colour[None, None] * shade[..., None] + rng.normal(0, 4, size=(H, H, 3))
    img = np.where(mask[..., None], obj, bg)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def _sample_pose(spec: SyntheticSceneSpec, phi_p: int, rng: np.random.Generator) -> tuple[float, ...]:
    family = SHAPE_FAMILIES[phi_p - 1]
    area = _shape_area(family)
    lo = spec.fg_min + 0.25 * (spec.fg_max - spec.fg_min)
    hi = spec.fg_max - 0.25 * (spec.fg_max - spec.fg_min)
    frac = rng.uniform(lo, hi)
    scale = math.sqrt(4 * frac / area)
    margin = max(0.0, 1 - 0.75 * scale)
    cx, cy = rng.uniform(-margin, margin, size=2)
    theta = rng.uniform(0, 2 * np.pi)
    return (float(cx), float(cy), float(scale), float(theta))


def generate_synthetic(
    spec: SyntheticSceneSpec,
    count: int,
    rng: np.random.Generator | int,
    n_backgrounds: int | None = None,
) -> SyntheticDataset:
    """Render ``count`` object scenes and ``n_backgrounds`` (default ``count``)
    object-free backgrounds. Deterministic for a given seed."""
    rng = np.random.default_rng(rng)
    n_backgrounds = count if n_backgrounds is None else n_backgrounds
    H = spec.H
    images = np.empty((count, H, H, 3), np.uint8)
    masks = np.empty((count, H, H), bool)
    phi_c = rng.integers(1, spec.n_children + 1, size=count)
    phi_p = (phi_c - 1) // spec.colors_per_shape + 1
    poses = np.empty((count, 4))
    for i in range(count):
        bg = _background(spec, int(phi_p[i]), rng)
        for _ in range(1000):
            pose = _sample_pose(spec, int(phi_p[i]), rng)
            img, mask = _render(spec, int(phi_p[i]), int(phi_c[i]), pose, bg, rng)
            if spec.fg_min <= mask.mean() <= spec.fg_max:
                break
        else:  # pragma: no cover - poses are sampled well inside the bounds
            raise DataError("could not place an object within the foreground bounds")
        images[i], masks[i], poses[i] = img, mask, pose
    bg_parent = rng.integers(1, spec.n_parents + 1, size=n_backgrounds)
    backgrounds = np.empty((n_backgrounds, H, H, 3), np.uint8)
    for j in range(n_backgrounds):
        backgrounds[j] = np.clip(np.rint(_background(spec, int(bg_parent[j]), rng)), 0, 255).astype(np.uint8)
    return SyntheticDataset(spec, images, masks, phi_p, phi_c, poses, backgrounds, bg_parent)


def synthetic_split(ds: SyntheticDataset, n_eval: int = 0) -> DatasetSplit:
    """Wrap a synthetic dataset as records; the last ``n_eval`` scenes are held out."""
    n_train = len(ds) - n_eval
    if n_train <= 0:
        raise ValueError("n_eval must leave training images")
    X_c, X_eval = [], []
    for i in range(len(ds)):
        rec = ImageRecord(
            id=f"scene{i:06d}", split="object" if i < n_train else "eval", source=f"scene{i:06d}",
            image=ds.images[i], phi_p=int(ds.phi_p[i]), phi_c=int(ds.phi_c[i]), mask=ds.masks[i],
        )
        (X_c if i < n_train else X_eval).append(rec)
    X_bg = [
        ImageRecord(id=f"bg{j:06d}", split="background", source=f"bg{j:06d}", image=ds.backgrounds[j])
        for j in range(len(ds.backgrounds))
    ]
    return DatasetSplit(X_c=X_c, X_bg=X_bg, X_eval=X_eval)


# --------------------------------------------------------------------- real

def center_crop_resize(img: np.ndarray, H: int) -> np.ndarray:
    """Largest centred square crop, resized to ``H x H`` (bicubic)."""
    h, w = img.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = Image.fromarray(img[top:top + side, left:left + side])
    return np.asarray(crop.convert("RGB").resize((H, H), Image.BICUBIC))


def _patches_outside(img: np.ndarray, box: tuple[float, float, float, float], min_side: int) -> list[np.ndarray]:
    """Regions left/right/above/below a ``(x, y, w, h)`` box, each at least ``min_side``."""
    ih, iw = img.shape[:2]
    x, y, w, h = (int(round(v)) for v in box)
    x0, y0 = max(0, x), max(0, y)
    x1, y1 = min(iw, x + w), min(ih, y + h)
    regions = [
        img[:, :x0],  # left
        img[:, x1:],  # right
        img[:y0, :],  # above
        img[y1:, :],  # below
    ]
    return [r for r in regions if r.shape[0] >= min_side and r.shape[1] >= min_side]


def _read_boxes(bbox_annotations: str | Path | Mapping) -> dict[str, tuple[float, float, float, float]]:
    if isinstance(bbox_annotations, Mapping):
        return {str(k): tuple(v) for k, v in bbox_annotations.items()}
    boxes = {}
    for line in Path(bbox_annotations).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        boxes[parts[0]] = tuple(float(v) for v in parts[1:5])
    return boxes


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def object_count(n_sources: int, object_fraction: float = 0.8) -> int:
    """Source images assigned to ``X_c``; the rest donate background patches."""
    return int(math.floor(object_fraction * n_sources))


def ingest_real(
    dataset_dir: str | Path,
    bbox_annotations: str | Path | Mapping,
    H: int = 128,
    seed: int = 0,
    min_patch_side: int = 32,
    object_fraction: float = 0.8,
) -> DatasetSplit:
    """Split source images 80/20; the larger part becomes ``X_c`` and the
    smaller part is cut into background patches outside the bounding boxes.

    ``bbox_annotations`` maps image paths (relative to ``dataset_dir``) to
    ``(x, y, w, h)``, either as a mapping or a whitespace-separated text file.
    Boxes are used only to cut patches.
    """
    root = Path(dataset_dir)
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images under {root}")
    boxes = _read_boxes(bbox_annotations)
    order = np.random.default_rng(seed).permutation(len(files))
    n_obj = object_count(len(files), object_fraction)
    X_c, X_bg = [], []
    for rank, idx in enumerate(order):
        path = files[idx]
        rel = path.relative_to(root).as_posix()
        if rank < n_obj:
            img = np.asarray(Image.open(path).convert("RGB"))
            X_c.append(ImageRecord(id=f"obj{rank:06d}", split="object", source=rel,
                                   image=center_crop_resize(img, H)))
            continue
        if rel not in boxes:
            logger.warning("no bounding box for %s; skipped for background patches", rel)
            continue
        img = np.asarray(Image.open(path).convert("RGB"))
        for k, patch in enumerate(_patches_outside(img, boxes[rel], min_patch_side)):
            X_bg.append(ImageRecord(id=f"bg{rank:06d}_{k}", split="background", source=rel,
                                    image=center_crop_resize(patch, H)))
    if not X_bg:
        raise DataError("no background patches could be cut; X_bg is empty")
    split = DatasetSplit(X_c=X_c, X_bg=X_bg)
    split.check_disjoint()
    return split


# ------------------------------------------------------------------ on disk

def _fmt(v) -> str:
    return "-" if v is None else str(v)


def write_split(root: str | Path, split: DatasetSplit) -> Path:
    """Write PNGs and ``manifest.tsv``; ground truth goes only to eval records."""
    root = Path(root)
    for d in (*SPLIT_DIRS.values(), "masks"):
        (root / d).mkdir(parents=True, exist_ok=True)
    lines = ["# path\tsplit\tphi_p\tphi_c\tmask_path\tsource"]
    for rec in (*split.X_c, *split.X_bg, *split.X_eval):
        rel = f"{SPLIT_DIRS[rec.split]}/{rec.id}.png"
        Image.fromarray(rec.image).save(root / rel)
        mask_rel = phi_p = phi_c = None
        if rec.split == "eval":
            phi_p, phi_c = rec.phi_p, rec.phi_c
            if rec.mask is not None:
                mask_rel = f"masks/{rec.id}.png"
                Image.fromarray(rec.mask.astype(np.uint8) * 255).save(root / mask_rel)
        lines.append("\t".join([rel, rec.split, _fmt(phi_p), _fmt(phi_c), _fmt(mask_rel), rec.source]))
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return root


def read_manifest(root: str | Path) -> list[ImageRecord]:
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise DataError(f"no {MANIFEST} in {root}")
    out = []
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        rel, split, phi_p, phi_c, mask_rel, source = line.split("\t")
        if split not in SPLIT_DIRS:
            raise DataError(f"unknown split tag {split!r} in manifest")
        out.append(ImageRecord(
            id=Path(rel).stem, split=split, source=source, path=rel,
            phi_p=None if phi_p == "-" else int(phi_p),
            phi_c=None if phi_c == "-" else int(phi_c),
            mask_path=None if mask_rel == "-" else mask_rel,
        ))
    return out


def load_images(root: str | Path, records: list[ImageRecord], H: int | None = None) -> np.ndarray:
    root = Path(root)
    arrs = []
    for r in records:
        img = np.asarray(Image.open(root / r.path).convert("RGB"))
        if H is not None and img.shape[:2] != (H, H):
            img = center_crop_resize(img, H)
        arrs.append(img)
    return np.stack(arrs) if arrs else np.empty((0, H or 0, H or 0, 3), np.uint8)


def load_split(root: str | Path, H: int | None = None, with_eval_truth: bool = True) -> DatasetSplit:
    """Read a dataset root into memory."""
    root = Path(root)
    recs = read_manifest(root)
    groups: dict[str, list[ImageRecord]] = {k: [] for k in SPLIT_DIRS}
    for r in recs:
        groups[r.split].append(r)
    for split, rs in groups.items():
        if rs:
            imgs = load_images(root, rs, H)
            for r, img in zip(rs, imgs):
                r.image = img
        if split == "eval" and with_eval_truth:
            for r in rs:
                if r.mask_path:
                    m = np.asarray(Image.open(root / r.mask_path).convert("L"))
                    if H is not None and m.shape != (H, H):
                        m = np.asarray(Image.fromarray(m).resize((H, H), Image.NEAREST))
                    r.mask = m > 127
    split = DatasetSplit(X_c=groups["object"], X_bg=groups["background"], X_eval=groups["eval"])
    split.check_disjoint()
    return split


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 (N, H, W, 3) → float (N, 3, H, W) in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return t / 127.5 - 1.0


class BatchIterator:
    """Endless ``(objects, backgrounds)`` batches with per-epoch shuffling.

    Objects and backgrounds are shuffled independently. Only images reach the
    training loop; labels and masks stay in the records.
    """

    def __init__(
        self,
        objects: np.ndarray | torch.Tensor,
        backgrounds: np.ndarray | torch.Tensor,
        batch_size: int = 20,
        seed: int = 0,
        hflip: bool = False,
    ):
        self.objects = objects if isinstance(objects, torch.Tensor) else to_tensor(objects)
        self.backgrounds = backgrounds if isinstance(backgrounds, torch.Tensor) else to_tensor(backgrounds)
        if len(self.objects) == 0 or len(self.backgrounds) == 0:
            raise ValueError("BatchIterator needs nonempty object and background sets")
        if batch_size > min(len(self.objects), len(self.backgrounds)):
            raise ValueError(
                f"batch_size {batch_size} exceeds dataset size "
                f"({len(self.objects)} objects, {len(self.backgrounds)} backgrounds)"
            )
        self.batch_size = batch_size
        self.hflip = hflip
        self.rng = np.random.default_rng(seed)
        self._orders: dict[str, np.ndarray] = {}
        self._pos = {"obj": 0, "bg": 0}
        self.epoch = {"obj": 0, "bg": 0}

    @classmethod
    def from_split(cls, split: DatasetSplit, batch_size: int = 20, seed: int = 0, hflip: bool = False):
        return cls(
            np.stack([r.image for r in split.X_c]),
            np.stack([r.image for r in split.X_bg]),
            batch_size=batch_size, seed=seed, hflip=hflip,
        )

    def _take(self, key: str, data: torch.Tensor) -> torch.Tensor:
        n = len(data)
        if key not in self._orders or self._pos[key] + self.batch_size > n:
            if key in self._orders:
                self.epoch[key] += 1
            self._orders[key] = self.rng.permutation(n)
            self._pos[key] = 0
        idx = self._orders[key][self._pos[key]:self._pos[key] + self.batch_size]
        self._pos[key] += self.batch_size
        batch = data[torch.from_numpy(idx)]
        if self.hflip:
            flip = torch.from_numpy(self.rng.random(self.batch_size) < 0.5)
            batch = torch.where(flip[:, None, None, None], batch.flip(-1), batch)
        return batch

    def __iter__(self) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        return self

    def __next__(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self._take("obj", self.objects), self._take("bg", self.backgrounds)

    def state_dict(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "orders": {k: v.copy() for k, v in self._orders.items()},
            "pos": dict(self._pos),
            "epoch": dict(self.epoch),
        }

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._orders = {k: np.asarray(v) for k, v in state["orders"].items()}
        self._pos = dict(state["pos"])
        self.epoch = dict(state["epoch"])
