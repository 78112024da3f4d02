"""Synthetic fine-grained datasets with planted discriminative patches.

Each image is a shared-family low-frequency background plus a small
class-specific striped patch at a jittered location, plus distractor
patches drawn from the same visual family with random (class-uninformative)
parameters.  Global appearance carries only a weak cue: the background is
tinted toward the label's tint color with probability ``cue_reliability``
and toward a random other class otherwise.  The planted patch rectangle is
recorded per sample as ground truth for localization oracles; it is never
an input to training.
"""

from __future__ import annotations

import colorsys
import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Box
from .imageio import load_ppm, save_ppm
from .tensorio import load_tensor


@dataclass(frozen=True)
class PatchSignature:
    """Color/texture parameters of one striped patch."""

    color: tuple[float, float, float]
    angle: float          # stripe direction, radians
    period: float         # stripe width in pixels
    contrast: float = 1.0


def default_signatures(classes: int, patch_contrast: float) -> tuple[PatchSignature, ...]:
    """Distinct per-class signatures; class pairs (2j, 2j+1) share a color
    and differ only in stripe angle, so patch evidence alone confuses them
    a little while the global tint separates them."""
    sigs = []
    n_colors = max(1, (classes + 1) // 2)
    for c in range(classes):
        hue = (c // 2) / n_colors
        color = colorsys.hsv_to_rgb(hue, 0.95, 1.0)
        angle = np.pi / 4 if c % 2 else 0.0
        angle += (c // 2) * np.pi / 16  # decorrelate angles across pairs
        sigs.append(PatchSignature(color=color, angle=float(angle), period=3.0,
                                   contrast=patch_contrast))
    return tuple(sigs)


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 8
    per_class_train: int = 40
    per_class_test: int = 20
    image_size: int = 64
    patch_size: int = 12
    jitter: float = 1.0              # 0 = fixed central placement, 1 = anywhere
    noise: float = 0.02              # per-pixel gaussian sigma
    cue_reliability: float = 0.75    # probability the tint matches the label
    tint_strength: float = 0.18
    background_amplitude: float = 0.22
    distractors: int = 3
    neutral_patch_rate: float = 0.15  # probability the class patch is replaced
    patch_contrast: float = 1.0
    seed: int = 0
    signatures: tuple[PatchSignature, ...] | None = None

    def __post_init__(self):
        if self.patch_size >= self.image_size:
            raise ValueError("patch_size must be smaller than image_size")
        if not 0.0 <= self.jitter <= 1.0:
            raise ValueError("jitter must lie in [0, 1]")
        sigs = self.signatures or default_signatures(self.classes, self.patch_contrast)
        if len(sigs) != self.classes:
            raise ValueError(f"need {self.classes} signatures, got {len(sigs)}")
        if len(set(sigs)) != len(sigs):
            raise ValueError("signatures must be pairwise distinct")
        object.__setattr__(self, "signatures", tuple(sigs))

    def tint_color(self, label: int) -> np.ndarray:
        hue = (label + 0.5) / self.classes
        return np.asarray(colorsys.hsv_to_rgb(hue, 0.6, 1.0))


@dataclass
class Sample:
    image: np.ndarray              # (3, S, S) float64 in [0, 1]
    label: int
    truth_box: Box | None = None   # planted patch rectangle; oracle metadata only


NEUTRAL_SIGNATURE = PatchSignature(color=(0.7, 0.7, 0.7), angle=np.pi / 3, period=3.0)


def render_patch(sig: PatchSignature, size: int, phase: float = 0.0) -> np.ndarray:
    """A (3, size, size) striped stamp: bright color stripes on a dark base."""
    ys, xs = np.mgrid[0:size, 0:size]
    wave = np.sin(2 * np.pi * (np.cos(sig.angle) * xs + np.sin(sig.angle) * ys) / sig.period
                  + phase)
    mask = (wave >= 0).astype(np.float64)
    color = np.asarray(sig.color).reshape(3, 1, 1)
    bright = 0.5 + 0.5 * sig.contrast
    dark = 0.5 - 0.45 * sig.contrast
    return dark + (bright - dark) * mask[None] * color


def _sample_rng(spec: SynthSpec, split: str, index: int) -> np.random.Generator:
    split_id = {"train": 0, "test": 1}[split]
    return np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(split_id, index))
    )


def _place(rng: np.random.Generator, spec: SynthSpec) -> tuple[int, int]:
    top_max = spec.image_size - spec.patch_size
    center = top_max // 2
    u, v = rng.random(2)
    top = int(round(center + spec.jitter * (u * top_max - center)))
    left = int(round(center + spec.jitter * (v * top_max - center)))
    return min(max(top, 0), top_max), min(max(left, 0), top_max)


def _render_sample(spec: SynthSpec, split: str, index: int, label: int) -> Sample:
    rng = _sample_rng(spec, split, index)
    s = spec.image_size

    # Shared-family background: a low-frequency field, equally likely for
    # every class, tinted toward a (possibly corrupted) class color.
    grid = rng.random((5, 5))
    coords = np.linspace(0, 4, s)
    i0 = np.clip(coords.astype(int), 0, 3)
    frac = coords - i0
    i1 = np.minimum(i0 + 1, 4)
    g00, g10 = grid[i0][:, i0], grid[i1][:, i0]
    g01, g11 = grid[i0][:, i1], grid[i1][:, i1]
    fy, fx = frac[:, None], frac[None, :]
    fieldmap = (g00 * (1 - fy) * (1 - fx) + g10 * fy * (1 - fx)
                + g01 * (1 - fy) * fx + g11 * fy * fx)
    image = np.repeat((0.45 + spec.background_amplitude * (fieldmap - 0.5))[None], 3, axis=0)

    tint_label = label
    if rng.random() >= spec.cue_reliability and spec.classes > 1:
        others = [c for c in range(spec.classes) if c != label]
        tint_label = int(rng.choice(others))
    tint = spec.tint_color(tint_label).reshape(3, 1, 1)
    image += spec.tint_strength * (tint - 0.5)

    # Distractors: same visual family, random class-uninformative parameters.
    p = spec.patch_size
    for _ in range(spec.distractors):
        sig = PatchSignature(
            color=colorsys.hsv_to_rgb(rng.random(), 0.95, 1.0),
            angle=float(rng.random() * np.pi),
            period=float(rng.uniform(2.5, 4.0)),
            contrast=spec.patch_contrast,
        )
        dt = int(rng.integers(0, s - p + 1))
        dl = int(rng.integers(0, s - p + 1))
        image[:, dt : dt + p, dl : dl + p] = render_patch(sig, p, phase=float(rng.random() * 6.28))

    # The class patch is drawn last so it is never occluded.
    top, left = _place(rng, spec)
    sig = spec.signatures[label]
    if rng.random() < spec.neutral_patch_rate:
        sig = NEUTRAL_SIGNATURE
    image[:, top : top + p, left : left + p] = render_patch(sig, p)

    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return Sample(image=image, label=label,
                  truth_box=Box(float(top), float(left), float(top + p), float(left + p)))


def generate(spec: SynthSpec, workers: int = 1) -> tuple[list[Sample], list[Sample]]:
    """Deterministic train/test splits; each sample is seeded independently,
    so the result is byte-identical for any worker count."""
    jobs = {"train": spec.per_class_train, "test": spec.per_class_test}
    out: dict[str, list[Sample]] = {}
    for split, per_class in jobs.items():
        labels = [c for c in range(spec.classes) for _ in range(per_class)]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                samples = list(ex.map(lambda i: _render_sample(spec, split, i, labels[i]),
                                      range(len(labels))))
        else:
            samples = [_render_sample(spec, split, i, labels[i]) for i in range(len(labels))]
        out[split] = samples
    return out["train"], out["test"]


# ----------------------------------------------------------------- folders


def save_dataset(out_dir, train: list[Sample], test: list[Sample]) -> list[Path]:
    """Write PPM images, `path,label` CSV manifests, and a truth-box CSV."""
    out_dir = Path(out_dir)
    written = []
    boxes_path = out_dir / "truth_boxes.csv"
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(boxes_path, "w", newline="") as bf:
        boxes = csv.writer(bf, lineterminator="\n")
        boxes.writerow(["path", "label", "top", "left", "bottom", "right"])
        for split, samples in (("train", train), ("test", test)):
            split_dir = out_dir / split
            split_dir.mkdir(parents=True, exist_ok=True)
            manifest = out_dir / f"{split}.csv"
            with open(manifest, "w", newline="") as mf:
                writer = csv.writer(mf, lineterminator="\n")
                writer.writerow(["path", "label"])
                for i, sample in enumerate(samples):
                    rel = f"{split}/{i:05d}.ppm"
                    save_ppm(out_dir / rel, sample.image)
                    writer.writerow([rel, sample.label])
                    written.append(out_dir / rel)
                    if sample.truth_box is not None:
                        b = sample.truth_box
                        boxes.writerow([rel, sample.label, b.top, b.left, b.bottom, b.right])
            written.append(manifest)
    written.append(boxes_path)
    return written


def load_folder(manifest_path, image_size: int) -> list[Sample]:
    """Load a `path,label` CSV manifest of P6 PPM images.

    Images are nearest-neighbor resized to ``image_size`` and scaled to
    [0, 1].  Paths are taken relative to the manifest location.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    samples = []
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is not None and header[:2] != ["path", "label"]:
            raise ValueError(f"{manifest_path}: expected 'path,label' header, got {header}")
        for row in reader:
            if not row:
                continue
            path, label = row[0], int(row[1])
            if label < 0:
                raise ValueError(f"{manifest_path}: negative label {label} for {path}")
            img = load_ppm(root / path)
            samples.append(Sample(image=_resize_nearest(img, image_size), label=label))
    return samples


def _resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[1:]
    if (h, w) == (size, size):
        return image
    ri = np.minimum((np.arange(size) * h) // size, h - 1)
    ci = np.minimum((np.arange(size) * w) // size, w - 1)
    return image[:, ri][:, :, ci]


def load_features(path):
    """Read an externally produced feature-map tensor (DFLT file)."""
    return load_tensor(path)
