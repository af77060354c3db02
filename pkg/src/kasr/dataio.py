"""Image files, paired LR/HR datasets, patch sampling and data synthesis.

Dataset layout on disk: ``<root>/HR/<stem>.png`` paired with
``<root>/LR/<stem>.png`` by filename stem, plus an optional
``manifest.json`` describing how the LR side was produced.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import image_ops
from .image_ops import DegradationSpec
from .tensor import ContractError

MANIFEST_NAME = "manifest.json"


class DatasetError(ValueError):
    """A dataset directory or image file violates the pairing contract."""


def load_png(path):
    """Read an 8-bit RGB PNG as a (1, 3, H, W) float32 array in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise DatasetError(f"{path}: expected RGB image, got mode {img.mode}")
            arr = np.asarray(img, dtype=np.uint8)
    except FileNotFoundError:
        raise DatasetError(f"{path}: no such file") from None
    except UnidentifiedImageError as exc:
        raise DatasetError(f"{path}: not a readable image ({exc})") from None
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]


def quantize_bytes(img):
    """Clamp to [0, 1] and quantize to bytes with round-half-up (0.5 -> 128)."""
    return np.floor(np.clip(np.asarray(img), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(img, path):
    """Write a (1,3,H,W) or (3,H,W) float array as 8-bit RGB PNG."""
    arr = np.asarray(img)
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DatasetError(f"save_png: expected a 3-channel image, got {arr.shape}")
    Image.fromarray(quantize_bytes(arr).transpose(1, 2, 0), mode="RGB").save(
        path, format="PNG"
    )


def extract_patches(lr, hr, patch, s, rng):
    """Uniformly random aligned crop: LR (patch x patch), HR scaled by s."""
    lr, hr = np.asarray(lr), np.asarray(hr)
    lh, lw = lr.shape[-2:]
    if lh < patch or lw < patch:
        raise ContractError(
            f"extract_patches: LR {lh}x{lw} smaller than patch {patch}"
        )
    if hr.shape[-2] != lh * s or hr.shape[-1] != lw * s:
        raise ContractError(
            f"extract_patches: HR {hr.shape[-2:]} is not LR x {s}"
        )
    y = int(rng.integers(0, lh - patch + 1))
    x = int(rng.integers(0, lw - patch + 1))
    lr_patch = lr[..., y : y + patch, x : x + patch]
    hr_patch = hr[..., s * y : s * (y + patch), s * x : s * (x + patch)]
    return np.ascontiguousarray(lr_patch), np.ascontiguousarray(hr_patch)


class PairDataset:
    """LR/HR image pairs from a directory, matched by filename stem.

    Every pair must satisfy hr dims == lr dims * scale; offenders are
    rejected at load time with an error naming the stem.
    """

    def __init__(self, root, scale, patch_size=None, seed=0):
        self.root = root
        self.scale = scale
        self.patch_size = patch_size
        self.seed = seed
        hr_dir, lr_dir = os.path.join(root, "HR"), os.path.join(root, "LR")
        if not os.path.isdir(hr_dir) or not os.path.isdir(lr_dir):
            raise DatasetError(f"{root}: expected HR/ and LR/ subdirectories")
        stems = sorted(
            os.path.splitext(f)[0] for f in os.listdir(hr_dir) if f.endswith(".png")
        )
        if not stems:
            raise DatasetError(f"{root}: no PNG files under HR/")
        self.stems = []
        self._pairs = []
        for stem in stems:
            lr_path = os.path.join(lr_dir, stem + ".png")
            if not os.path.isfile(lr_path):
                raise DatasetError(f"{root}: missing LR counterpart for {stem!r}")
            hr = load_png(os.path.join(hr_dir, stem + ".png"))[0]
            lr = load_png(lr_path)[0]
            if hr.shape[-2] != lr.shape[-2] * scale or hr.shape[-1] != lr.shape[-1] * scale:
                raise DatasetError(
                    f"{root}: pair {stem!r} violates hr = lr x {scale}: "
                    f"hr {hr.shape[-2:]}, lr {lr.shape[-2:]}"
                )
            self.stems.append(stem)
            self._pairs.append((lr, hr))
        self.degradation_spec = self._load_manifest_spec()

    def _load_manifest_spec(self):
        path = os.path.join(self.root, MANIFEST_NAME)
        if not os.path.isfile(path):
            return None
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        return DegradationSpec(
            kernel=np.asarray(manifest["kernel"], dtype=np.float64),
            scale=int(manifest["scale"]),
            noise_sigma=float(manifest["noise_sigma"]),
            rng_seed=int(manifest["seed"]),
        )

    def __len__(self):
        return len(self._pairs)

    def __getitem__(self, idx):
        return self._pairs[idx]


def _image_seed(base_seed, index):
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def _procedural_image(rng, size):
    """One HR test image: smooth gradient base, oriented sinusoidal gratings
    and hard-edged rectangles, guaranteeing low- and high-frequency content."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    theta = rng.uniform(0, 2 * np.pi)
    base = 0.35 + 0.3 * (np.cos(theta) * xx + np.sin(theta) * yy)
    img = np.stack([base + rng.uniform(-0.08, 0.08) for _ in range(3)])

    for _ in range(int(rng.integers(1, 4))):
        ang = rng.uniform(0, np.pi)
        freq = rng.uniform(3.0, size / 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy) + phase)
        amp = rng.uniform(0.08, 0.25)
        color = rng.uniform(0.4, 1.0, size=3)
        img += amp * color[:, None, None] * wave

    for _ in range(int(rng.integers(2, 6))):
        h = int(rng.integers(size // 8, size // 2))
        w = int(rng.integers(size // 8, size // 2))
        y = int(rng.integers(0, size - h + 1))
        x = int(rng.integers(0, size - w + 1))
        fill = rng.uniform(0.0, 1.0, size=3)
        alpha = rng.uniform(0.6, 1.0)
        img[:, y : y + h, x : x + w] *= 1.0 - alpha
        img[:, y : y + h, x : x + w] += alpha * fill[:, None, None]

    return np.clip(img, 0.0, 1.0)


def synth_dataset(n_images, hr_size, spec, seed, out_dir):
    """Generate a paired dataset by degrading procedural HR images.

    Per-image noise uses a seed derived from (spec.rng_seed, image index), so
    the whole set is reproducible from the manifest alone. Returns the
    manifest dict (also written to ``out_dir/manifest.json``), including the
    mean PSNR of the bicubic-upscaled LR set as a quality baseline.
    """
    if hr_size % spec.scale:
        raise ContractError(
            f"synth_dataset: hr_size {hr_size} not divisible by scale {spec.scale}"
        )
    hr_dir, lr_dir = os.path.join(out_dir, "HR"), os.path.join(out_dir, "LR")
    os.makedirs(hr_dir, exist_ok=True)
    os.makedirs(lr_dir, exist_ok=True)

    rng = np.random.default_rng(seed)
    baseline = []
    for i in range(n_images):
        hr = _procedural_image(rng, hr_size)[None]
        per_image = DegradationSpec(
            kernel=spec.kernel,
            scale=spec.scale,
            noise_sigma=spec.noise_sigma,
            rng_seed=_image_seed(spec.rng_seed, i),
        )
        lr = image_ops.degrade_classical(hr, per_image)
        stem = f"img_{i:04d}"
        save_png(hr, os.path.join(hr_dir, stem + ".png"))
        save_png(lr, os.path.join(lr_dir, stem + ".png"))
        # Baseline measured on the quantized files the consumer will see.
        hr_q = load_png(os.path.join(hr_dir, stem + ".png"))
        lr_q = load_png(os.path.join(lr_dir, stem + ".png"))
        baseline.append(image_ops.psnr(image_ops.bicubic_resize(lr_q, spec.scale), hr_q))

    manifest = {
        "scale": spec.scale,
        "kernel": spec.kernel.tolist(),
        "noise_sigma": spec.noise_sigma,
        "seed": spec.rng_seed,
        "baseline_psnr": float(np.mean(baseline)),
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
