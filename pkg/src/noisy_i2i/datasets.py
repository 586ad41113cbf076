"""Datasets: a synthetic multi-domain image set and a labeled image-folder loader.

Samples keep their clean label next to the (possibly corrupted) training
label. Training views never hand out the clean label; evaluation views do.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import InvalidInputError, InvalidSpecError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}

# evenly spread, saturated foreground hues; index = domain id
_PALETTE = np.array([
    [0.95, 0.15, 0.15],
    [0.15, 0.85, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.90],
    [0.10, 0.85, 0.90],
    [0.98, 0.55, 0.10],
    [0.55, 0.25, 0.05],
])


class CleanLabelAccessError(PermissionError):
    """Raised when a training-side view is asked for clean labels."""


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray  # H x W x C, values in [-1, 1]
    clean_label: object
    noisy_label: object
    sample_id: str


@dataclass(frozen=True)
class SyntheticShapesSpec:
    num_domains: int = 3
    samples_per_domain: int = 220
    image_size: int = 32
    position_jitter: float = 0.18  # fraction of the image side
    scale_range: tuple[float, float] = (0.22, 0.32)  # blob radius / side
    background_range: tuple[float, float] = (-0.8, 0.1)
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_domains <= len(_PALETTE):
            raise InvalidSpecError(f"num_domains must lie in [2, {len(_PALETTE)}]")
        if self.samples_per_domain < 1 or self.image_size < 8:
            raise InvalidSpecError("need samples_per_domain >= 1 and image_size >= 8")


def render_blob(image_size: int, color, cx: float, cy: float, radius: float, aspect: float,
                background: float) -> np.ndarray:
    """Soft-edged ellipse of ``color`` on a gray background, in [-1, 1]."""
    coords = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    r = np.sqrt(((xx - cx) / (radius * aspect)) ** 2 + ((yy - cy) / (radius / aspect)) ** 2)
    alpha = np.clip((1.0 - r) * image_size * radius / 1.5, 0.0, 1.0)[..., None]
    # shading across the vertical axis gives the background some structure
    bg = np.full((image_size, image_size, 3), background) + 0.15 * (yy[..., None] - 0.5)
    fg = np.asarray(color) * 2.0 - 1.0
    return np.clip(alpha * fg + (1 - alpha) * bg, -1.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticShapesSpec) -> list[LabeledSample]:
    """Each domain is one foreground hue; pose, size and background are nuisance."""
    rng = np.random.default_rng(spec.seed)
    samples = []
    for d in range(spec.num_domains):
        for i in range(spec.samples_per_domain):
            cx, cy = 0.5 + rng.uniform(-spec.position_jitter, spec.position_jitter, size=2)
            radius = rng.uniform(*spec.scale_range)
            aspect = rng.uniform(0.8, 1.25)
            bg = rng.uniform(*spec.background_range)
            img = render_blob(spec.image_size, _PALETTE[d], cx, cy, radius, aspect, bg)
            samples.append(LabeledSample(img, d, d, f"d{d}_{i:05d}"))
    return samples


def with_noisy_labels(samples: Sequence[LabeledSample], noisy) -> list[LabeledSample]:
    if len(noisy) != len(samples):
        raise InvalidInputError("one noisy label per sample is required")
    return [replace(s, noisy_label=_plain(n)) for s, n in zip(samples, noisy)]


def _plain(v):
    return np.asarray(v).tolist()


def split(samples: Sequence[LabeledSample], train_fraction: float = 0.9, seed: int = 0,
          train_size: int | None = None):
    """Stratified train/test split; train size is ``floor(train_fraction * N)``.

    Per-domain quotas are allocated by largest remainder so the total is exact.
    ``train_size`` overrides the fraction with an exact count.
    """
    if train_size is not None:
        if not 0 < train_size < len(samples):
            raise InvalidSpecError(f"train_size must lie in (0, {len(samples)})")
        train_fraction = train_size / len(samples)
    elif not 0.0 < train_fraction < 1.0:
        raise InvalidSpecError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    by_domain: dict = {}
    for i, s in enumerate(samples):
        by_domain.setdefault(_key(s.clean_label), []).append(i)
    keys = sorted(by_domain)
    exact = np.array([train_fraction * len(by_domain[k]) for k in keys])
    quota = np.floor(exact).astype(int)
    total = train_size if train_size is not None else math.floor(train_fraction * len(samples))
    short = total - quota.sum()
    # largest fractional parts first, ties to the lower domain
    for j in np.argsort(-(exact - quota), kind="stable")[:short]:
        quota[j] += 1
    train, test = [], []
    for k, q in zip(keys, quota):
        idx = np.array(by_domain[k])
        rng.shuffle(idx)
        train += idx[:q].tolist()
        test += idx[q:].tolist()
    return [samples[i] for i in sorted(train)], [samples[i] for i in sorted(test)]


def _key(label):
    return tuple(label) if isinstance(label, (list, tuple, np.ndarray)) else label


def scan_domains(root: str | Path) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise InvalidInputError(f"{root} is not a directory")
    names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not names:
        raise InvalidInputError(f"{root} contains no domain subdirectories")
    return names


def load_image_folder(root: str | Path, image_size: int = 32, channels: int = 3) -> list[LabeledSample]:
    """Load ``root/<domain>/<file>``; domain ids follow sorted directory names."""
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    mode = {1: "L", 3: "RGB"}.get(channels)
    if mode is None:
        raise InvalidSpecError("channels must be 1 or 3")
    samples, skipped = [], 0
    for label, name in enumerate(scan_domains(root)):
        loaded = 0
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as im:
                    im = im.convert(mode).resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32)
            except (OSError, UnidentifiedImageError):
                skipped += 1
                continue
            if arr.ndim == 2:
                arr = arr[..., None]
            samples.append(LabeledSample(arr / 127.5 - 1.0, label, label, f"{name}/{path.name}"))
            loaded += 1
        if loaded == 0:
            raise InvalidInputError(f"domain {name!r} has no readable images")
    if skipped:
        log.warning("skipped %d unreadable image(s) under %s", skipped, root)
    return samples


def export_image_folder(samples: Sequence[LabeledSample], root: str | Path,
                        domain_names: Sequence[str] | None = None) -> None:
    """Write samples as ``root/<domain>/<sample_id>.png`` (clean labels)."""
    from PIL import Image

    root = Path(root)
    for s in samples:
        name = domain_names[s.clean_label] if domain_names else f"domain_{s.clean_label}"
        (root / name).mkdir(parents=True, exist_ok=True)
        arr = np.round((np.asarray(s.image) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
        if arr.shape[-1] == 1:
            arr = arr[..., 0]
        Image.fromarray(arr).save(root / name / f"{Path(s.sample_id).name.split('.')[0]}.png")


def save_split_manifest(path: str | Path, train, test) -> None:
    manifest = {s.sample_id: "train" for s in train}
    manifest.update({s.sample_id: "test" for s in test})
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def augment_hflip(batch: Tensor, generator: torch.Generator | None = None, p: float = 0.5) -> Tensor:
    """Mirror each image along its width with probability ``p``."""
    if batch.shape[0] == 0:
        return batch
    flip = torch.rand(batch.shape[0], generator=generator) < p
    return torch.where(flip[:, None, None, None].to(batch.device), batch.flip(-1), batch)


class LabeledDataset:
    """Tensor view over samples.

    With ``expose_clean=False`` (training side) the clean labels cannot be
    read; batches carry only ``(image, noisy_label)``.
    """

    def __init__(self, samples: Sequence[LabeledSample], expose_clean: bool = False):
        if not samples:
            raise InvalidInputError("dataset is empty")
        self.expose_clean = expose_clean
        self.sample_ids = [s.sample_id for s in samples]
        self.images = torch.from_numpy(np.stack([np.asarray(s.image, np.float32) for s in samples])).permute(0, 3, 1, 2).contiguous()
        if self.images.min() < -1 or self.images.max() > 1:
            raise InvalidInputError("image values must lie in [-1, 1]")
        self.noisy_labels = _label_tensor([s.noisy_label for s in samples])
        self._clean = _label_tensor([s.clean_label for s in samples])

    def __len__(self):
        return self.images.shape[0]

    @property
    def clean_labels(self) -> Tensor:
        if not self.expose_clean:
            raise CleanLabelAccessError("clean labels are not available to training consumers")
        return self._clean

    def training_view(self) -> "LabeledDataset":
        view = object.__new__(LabeledDataset)
        view.__dict__.update(self.__dict__)
        view.expose_clean = False
        return view

    def batches(self, batch_size: int, order: np.ndarray | None = None, drop_last: bool = True) -> Iterator[tuple]:
        order = np.arange(len(self)) if order is None else np.asarray(order)
        stop = len(order) - (len(order) % batch_size if drop_last else 0)
        for start in range(0, stop, batch_size):
            idx = torch.from_numpy(order[start:start + batch_size])
            if self.expose_clean:
                yield self.images[idx], self.noisy_labels[idx], self._clean[idx]
            else:
                yield self.images[idx], self.noisy_labels[idx]


def _label_tensor(labels) -> Tensor:
    arr = np.asarray(labels)
    if arr.ndim == 2:
        return torch.from_numpy(arr.astype(np.float32))
    return torch.from_numpy(arr.astype(np.int64))
