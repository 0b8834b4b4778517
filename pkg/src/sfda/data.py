"""Multi-domain datasets, synthetic domain shift, and weak/strong augmentation.

Images are held as float32 arrays of shape ``(N, C, H, W)`` in ``[0, 1]``.
Ground-truth labels live only on :class:`DomainDataset`; adaptation code gets an
:class:`UnlabeledView`, which has no label attribute at all.  Every image read
goes through :func:`_record_read` so a :class:`ReadAudit` can prove which
domains a piece of code touched.
"""
from __future__ import annotations

import os
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ValidationError

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

_active_audits: list["ReadAudit"] = []


class ReadAudit:
    """Counts image reads per domain while active (use as a context manager)."""

    def __init__(self):
        self.reads: Counter[str] = Counter()

    def __enter__(self):
        _active_audits.append(self)
        return self

    def __exit__(self, *exc):
        _active_audits.remove(self)
        return False


def _record_read(domain_id: str, n: int) -> None:
    for audit in _active_audits:
        audit.reads[domain_id] += n


@dataclass
class DomainDataset:
    domain_id: str
    sample_keys: list[str]
    _images: np.ndarray = field(repr=False)
    _labels: np.ndarray | None = field(default=None, repr=False)
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.sample_keys)) != len(self.sample_keys):
            raise ValidationError(f"duplicate sample keys in domain {self.domain_id!r}")
        if len(self.sample_keys) != len(self._images):
            raise ValidationError("sample_keys and images differ in length")

    def __len__(self):
        return len(self.sample_keys)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    def images(self, idx=None) -> np.ndarray:
        out = self._images if idx is None else self._images[idx]
        _record_read(self.domain_id, len(out))
        return out

    def labels(self) -> np.ndarray:
        if self._labels is None:
            raise ValidationError(f"domain {self.domain_id!r} carries no labels")
        return self._labels

    def unlabeled(self) -> "UnlabeledView":
        return UnlabeledView(self)


class UnlabeledView:
    """Label-free handle on a dataset; the only thing adaptation stages receive."""

    __slots__ = ("_ds",)

    def __init__(self, ds: DomainDataset):
        self._ds = ds

    domain_id = property(lambda self: self._ds.domain_id)
    sample_keys = property(lambda self: self._ds.sample_keys)
    num_classes = property(lambda self: self._ds.num_classes)
    class_names = property(lambda self: self._ds.class_names)

    def __len__(self):
        return len(self._ds)

    def images(self, idx=None) -> np.ndarray:
        return self._ds.images(idx)


def load_image_folder(root, domain_id: str, image_size: int | None = 32) -> DomainDataset:
    """Load ``root/domain_id/<class_name>/<image>`` into memory.

    Class indices follow sorted class-directory names; samples are ordered by
    path.  Sample keys are paths relative to ``root``.
    """
    root = Path(root)
    ddir = root / domain_id
    if not ddir.is_dir():
        raise ValidationError(f"domain directory {ddir} does not exist")
    class_names = sorted(p.name for p in ddir.iterdir() if p.is_dir())
    if not class_names:
        raise ValidationError(f"{ddir} has no class subdirectories")
    keys, images, labels = [], [], []
    for k, name in enumerate(class_names):
        files = sorted(p for p in (ddir / name).iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise ValidationError(f"class directory {ddir / name} contains no images")
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB")
                    if image_size is not None and im.size != (image_size, image_size):
                        im = im.resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                raise ValidationError(f"cannot read image {f}: {exc}") from exc
            keys.append(f.relative_to(root).as_posix())
            images.append(arr.transpose(2, 0, 1))
            labels.append(k)
    return DomainDataset(domain_id, keys, np.stack(images), np.array(labels), class_names)


def resolve_data_root(cli_value: str | None) -> Path | None:
    value = cli_value or os.environ.get("DATA_ROOT")
    return Path(value) if value else None


def export_image_folder(ds: DomainDataset, root) -> Path:
    root = Path(root)
    labels = ds.labels()
    for key, img, y in zip(ds.sample_keys, ds.images(), labels):
        path = root / ds.domain_id / ds.class_names[y] / f"{Path(key).name}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        arr = np.clip(np.rint(img.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(path)
    return root / ds.domain_id


# ---------------------------------------------------------------- synthetic

SHAPES = ("hbar", "vbar", "ring", "plus", "xcross", "square", "dots", "triangle")


@dataclass(frozen=True)
class Corruption:
    rotation: float = 0.0      # degrees
    channel_shift: float = 0.0  # strength of a fixed per-domain color transform
    noise: float = 0.0         # gaussian pixel noise sigma
    blur: float = 0.0          # gaussian blur sigma in pixels

    def scaled(self, factor: float) -> "Corruption":
        return Corruption(self.rotation * factor, self.channel_shift * factor,
                          self.noise * factor, self.blur * factor)


@dataclass(frozen=True)
class SyntheticShiftSpec:
    num_classes: int = 4
    samples_per_domain: int = 500
    corruptions: tuple[Corruption, ...] = (Corruption(),)
    domain_names: tuple[str, ...] | None = None
    image_size: int = 32
    seed: int = 0

    @property
    def num_domains(self) -> int:
        return len(self.corruptions)

    def names(self) -> list[str]:
        if self.domain_names is not None:
            return list(self.domain_names)
        return ["source"] + [f"target{i}" for i in range(1, self.num_domains)]


def default_suite_spec(seed=0, magnitude=0.9, samples_per_domain=500, num_targets=3) -> SyntheticShiftSpec:
    """Source plus up to three targets with distinct corruption families."""
    targets = [
        Corruption(rotation=25.0, channel_shift=0.6, noise=0.12),
        Corruption(channel_shift=1.0, blur=1.0, noise=0.05),
        Corruption(rotation=-20.0, noise=0.2, blur=0.6),
    ][:num_targets]
    return SyntheticShiftSpec(
        num_classes=4, samples_per_domain=samples_per_domain,
        corruptions=(Corruption(), *[c.scaled(magnitude) for c in targets]),
        domain_names=("source", "rot_color", "color_blur", "rot_noise")[:num_targets + 1],
        seed=seed)


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float, t: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    if shape == "hbar":
        return (np.abs(dy) <= t) & (np.abs(dx) <= r)
    if shape == "vbar":
        return (np.abs(dx) <= t) & (np.abs(dy) <= r)
    if shape == "ring":
        d = np.hypot(dx, dy)
        return np.abs(d - 0.75 * r) <= t
    if shape == "plus":
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if shape == "xcross":
        u, v = (dx + dy) / np.sqrt(2), (dx - dy) / np.sqrt(2)
        return ((np.abs(u) <= t) & (np.abs(v) <= r)) | ((np.abs(v) <= t) & (np.abs(u) <= r))
    if shape == "square":
        return (np.maximum(np.abs(dx), np.abs(dy)) <= 0.7 * r) & (np.maximum(np.abs(dx), np.abs(dy)) >= 0.7 * r - t)
    if shape == "dots":
        return ((np.hypot(dx - r / 2, dy) <= t + 0.5) | (np.hypot(dx + r / 2, dy) <= t + 0.5)
                | (np.hypot(dx, dy - r / 2) <= t + 0.5))
    if shape == "triangle":
        return (dy <= 0.6 * r) & (dy >= -0.6 * r) & (np.abs(dx) <= (dy + 0.6 * r) * 0.6) & \
            ~((dy <= 0.6 * r - t) & (np.abs(dx) <= (dy + 0.6 * r) * 0.6 - t))
    raise ValidationError(f"unknown shape {shape!r}")


def _base_images(rng: np.random.Generator, labels: np.ndarray, size: int) -> np.ndarray:
    out = np.empty((len(labels), 3, size, size), dtype=np.float32)
    for i, y in enumerate(labels):
        bg = rng.uniform(0.0, 0.35, size=3).astype(np.float32)
        fg = rng.uniform(0.55, 1.0, size=3).astype(np.float32)
        img = bg[:, None, None] + rng.normal(0, 0.03, size=(3, size, size)).astype(np.float32)
        cx, cy = rng.uniform(size * 0.4, size * 0.6, size=2)
        r = rng.uniform(size * 0.25, size * 0.35)
        t = rng.uniform(1.0, 2.2)
        mask = _shape_mask(SHAPES[y], size, cx, cy, r, t)
        img[:, mask] = fg[:, None] + rng.normal(0, 0.03, size=(3, int(mask.sum()))).astype(np.float32)
        out[i] = img
    return np.clip(out, 0, 1)


def _color_transform(rng: np.random.Generator, strength: float) -> tuple[np.ndarray, np.ndarray]:
    # a fixed per-domain channel mix + offset, interpolated from identity
    perm = np.eye(3)[rng.permutation(3)]
    mix = (1 - strength) * np.eye(3) + strength * perm * rng.uniform(0.5, 0.9, size=(3, 1))
    offset = strength * rng.uniform(-0.1, 0.3, size=3)
    return mix.astype(np.float32), offset.astype(np.float32)


def corrupt(images: np.ndarray, c: Corruption, rng: np.random.Generator) -> np.ndarray:
    out = images.copy()
    if c.channel_shift:
        mix, offset = _color_transform(rng, min(c.channel_shift, 1.0))
        out = np.einsum("ij,njhw->nihw", mix, out) + offset[None, :, None, None]
    if c.rotation:
        out = ndimage.rotate(out, c.rotation, axes=(2, 3), reshape=False, order=1, mode="nearest")
    if c.blur:
        out = ndimage.gaussian_filter(out, sigma=(0, 0, c.blur, c.blur))
    if c.noise:
        out = out + rng.normal(0, c.noise, size=out.shape).astype(np.float32)
    return np.clip(out, 0, 1).astype(np.float32)


def make_synthetic_suite(spec: SyntheticShiftSpec) -> list[DomainDataset]:
    """Generate one dataset per domain; domain 0 is the clean source.

    Every domain draws fresh class-conditional base images and then applies its
    own corruption, so the label of every sample is preserved by construction.
    """
    K = spec.num_classes
    if K < 2:
        raise ValidationError("synthetic suites need at least 2 classes")
    if K > len(SHAPES):
        raise ValidationError(f"at most {len(SHAPES)} synthetic classes are available")
    if spec.samples_per_domain < K:
        raise ValidationError("samples_per_domain must be at least num_classes")
    names = spec.names()
    if len(names) != spec.num_domains:
        raise ValidationError("domain_names must match the number of corruptions")
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.num_domains)
    suite = []
    for name, c, ss in zip(names, spec.corruptions, seeds):
        rng = np.random.default_rng(ss)
        labels = np.arange(spec.samples_per_domain) % K
        rng.shuffle(labels)
        images = corrupt(_base_images(rng, labels, spec.image_size), c, rng)
        keys = [f"{name}/{i:05d}" for i in range(spec.samples_per_domain)]
        suite.append(DomainDataset(name, keys, images, labels, list(SHAPES[:K])))
    return suite


def split_dataset(ds: DomainDataset, test_fraction: float, seed: int) -> tuple[DomainDataset, DomainDataset]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    parts = []
    for idx in (np.sort(order[n_test:]), np.sort(order[:n_test])):
        parts.append(replace(ds, sample_keys=[ds.sample_keys[i] for i in idx], _images=ds._images[idx],
                             _labels=None if ds._labels is None else ds._labels[idx]))
    return parts[0], parts[1]


# ------------------------------------------------------------- augmentation

def _hflip(x, rng):
    return TF.hflip(x) if rng.random() < 0.5 else x


def _crop(x, rng, pad=4):
    h, w = x.shape[-2:]
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="reflect")
    i, j = rng.integers(0, 2 * pad + 1, size=2)
    return padded[..., i:i + h, j:j + w]


def _contrast(x, rng):
    return TF.adjust_contrast(x, float(rng.uniform(0.5, 1.5)))


def _brightness(x, rng):
    return TF.adjust_brightness(x, float(rng.uniform(0.6, 1.4)))


def _posterize(x, rng):
    levels = 2 ** int(rng.integers(3, 6))
    return torch.floor(x * levels).clamp(max=levels - 1) / (levels - 1)


def _rotate(x, rng):
    return TF.rotate(x, float(rng.uniform(-15, 15)))


def _translate(x, rng):
    h, w = x.shape[-2:]
    dx, dy = (int(v) for v in rng.integers(-w // 8, w // 8 + 1, size=2))
    return TF.affine(x, angle=0.0, translate=[dx, dy], scale=1.0, shear=[0.0])


RANDAUG_POOL = {"contrast": _contrast, "brightness": _brightness, "posterize": _posterize,
                "rotate": _rotate, "translate": _translate}


def _randaug(x, rng, n_ops=2):
    names = sorted(RANDAUG_POOL)
    for k in rng.choice(len(names), size=n_ops, replace=False):
        x = RANDAUG_POOL[names[k]](x, rng)
    return x.clamp(0, 1)


def _erase(x, rng, scale=(0.02, 0.2)):
    h, w = x.shape[-2:]
    area = rng.uniform(*scale) * h * w
    eh = int(min(h, max(1, round(np.sqrt(area)))))
    ew = int(min(w, max(1, round(area / eh))))
    i, j = int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1))
    x = x.clone()
    x[..., i:i + eh, j:j + ew] = torch.as_tensor(rng.uniform(0, 1, size=(x.shape[0], 1, 1)), dtype=x.dtype)
    return x


OPS = {"hflip": _hflip, "crop": _crop, "randaug": _randaug, "erase": _erase, **RANDAUG_POOL}


@dataclass(frozen=True)
class AugmentationPair:
    weak: tuple[str, ...] = ("hflip", "crop")
    strong: tuple[str, ...] = ("hflip", "crop", "randaug", "erase")

    def __post_init__(self):
        for op in (*self.weak, *self.strong):
            if op not in OPS:
                raise ValidationError(f"unknown augmentation op {op!r}")

    @classmethod
    def identity(cls) -> "AugmentationPair":
        return cls((), ())


def apply_ops(x: torch.Tensor, ops, rng: np.random.Generator) -> torch.Tensor:
    for op in ops:
        x = OPS[op](x, rng)
    return x


def augment_pair(x, pair: AugmentationPair, rng: np.random.Generator):
    """Weak and strong views of one image (C, H, W), drawn independently from ``rng``."""
    x = torch.as_tensor(x)
    return apply_ops(x, pair.weak, rng), apply_ops(x, pair.strong, rng)


def augment_batch(images, ops, rng: np.random.Generator) -> torch.Tensor:
    images = torch.as_tensor(images)
    if not ops:
        return images.clone()
    return torch.stack([apply_ops(img, ops, rng) for img in images])
