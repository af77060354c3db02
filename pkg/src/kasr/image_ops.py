"""Non-learned image processing.

Images travel as (B, C, H, W) float arrays with values in [0, 1]. Operations
that feed the training losses (Sobel magnitude, min-max normalization) take
and return :class:`~kasr.tensor.Tensor` so gradients can flow through them;
everything used only for data synthesis or evaluation works on plain numpy
arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])

MINMAX_EPS = 1e-12


@dataclass
class DegradationSpec:
    """Classical degradation recipe: blur kernel, decimation scale, noise."""

    kernel: np.ndarray
    scale: int
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        if self.kernel.ndim != 2:
            raise ContractError(f"kernel must be 2D, got shape {self.kernel.shape}")
        if not np.all(np.isfinite(self.kernel)):
            raise ContractError("kernel entries must be finite")
        total = float(self.kernel.sum())
        if abs(total - 1.0) >= 1e-6:
            raise ContractError(f"kernel must sum to 1, got {total}")
        if self.scale not in (1, 2, 3, 4):
            raise ContractError(f"scale must be one of 1,2,3,4, got {self.scale}")
        if self.noise_sigma < 0:
            raise ContractError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def gaussian_kernel(size, sigma):
    """Normalized isotropic Gaussian blur kernel; size must be odd."""
    if size < 1 or size % 2 == 0:
        raise ContractError(f"gaussian_kernel: size must be odd and >= 1, got {size}")
    if sigma <= 0:
        raise ContractError(f"gaussian_kernel: sigma must be positive, got {sigma}")
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g1, g1)
    return kernel / kernel.sum()


def filter2d_reflect(img, kernel):
    """Per-channel sliding-window filter with reflect padding.

    ``out[y, x] = sum_{u,v} kernel[u, v] * img[y + u - ct, x + v - cl]`` with
    the kernel centered at ``(ct, cl) = ((kh-1)//2, (kw-1)//2)``.
    """
    kh, kw = kernel.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    pb, pr = kh - 1 - pt, kw - 1 - pl
    h, w = img.shape[-2:]
    padded = np.pad(
        img, [(0, 0)] * (img.ndim - 2) + [(pt, pb), (pl, pr)], mode="reflect"
    )
    out = np.zeros_like(img)
    for u in range(kh):
        for v in range(kw):
            out += kernel[u, v] * padded[..., u : u + h, v : v + w]
    return out


def degrade_classical(hr, spec):
    """Blur with the spec kernel, subsample by the scale, add noise, clamp."""
    hr = np.asarray(hr)
    b, c, h, w = hr.shape
    s = spec.scale
    if h % s or w % s:
        raise DimensionError(
            f"degrade_classical: spatial dims {h}x{w} not divisible by scale {s}",
            axis=2,
        )
    blurred = filter2d_reflect(hr, spec.kernel.astype(hr.dtype))
    lr = blurred[..., ::s, ::s]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.rng_seed)
        lr = lr + rng.normal(0.0, spec.noise_sigma, lr.shape).astype(hr.dtype)
    return np.clip(lr, 0.0, 1.0)


def sobel_map(img):
    """Differentiable Sobel gradient magnitude, sqrt(gx^2 + gy^2 + 1e-12)."""
    b, c, h, w = img.shape
    flat = T.reshape(img, (b * c, 1, h, w))
    padded = T.pad_reflect2d(flat, 1)
    kx = Tensor(SOBEL_X.reshape(1, 1, 3, 3), dtype=img.dtype)
    ky = Tensor(SOBEL_Y.reshape(1, 1, 3, 3), dtype=img.dtype)
    gx = T.conv2d(padded, kx)
    gy = T.conv2d(padded, ky)
    mag = T.sqrt(T.add(T.square(gx), T.square(gy)))
    return T.reshape(mag, (b, c, h, w))


def minmax_normalize(x):
    """Rescale each image of the batch to [0, 1] over all channels jointly.

    Degenerate images (max - min below 1e-12) map to all zeros. The gradient
    treats min and max as selections of their first extremal element.
    """
    data = x.data
    b = data.shape[0]
    out_data = np.zeros_like(data)
    stats = []  # (flat argmin, flat argmax, range) per live image
    for i in range(b):
        flat = data[i].reshape(-1)
        amin, amax = int(flat.argmin()), int(flat.argmax())
        rng = float(flat[amax] - flat[amin])
        if rng < MINMAX_EPS:
            stats.append(None)
        else:
            out_data[i] = (data[i] - flat[amin]) / rng
            stats.append((amin, amax, rng))
    out = Tensor(out_data)

    def backward():
        gin = np.zeros_like(data)
        for i, st in enumerate(stats):
            if st is None:
                continue
            amin, amax, rng = st
            g = out.grad[i]
            gi = g / rng
            shifted = data[i] - data[i].reshape(-1)[amin]
            s_total = float(g.sum())
            t_total = float((g * shifted).sum())
            gi_flat = gi.reshape(-1).copy()
            gi_flat[amin] += -s_total / rng + t_total / rng**2
            gi_flat[amax] += -t_total / rng**2
            gin[i] = gi_flat.reshape(data[i].shape)
        _accum = T._accumulate
        _accum(x, gin)

    return T._track(out, (x,), backward)


def _cubic_weight(d, a=-0.5):
    d = np.abs(d)
    w = np.where(
        d <= 1.0,
        (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0,
        np.where(d < 2.0, a * d**3 - 5.0 * a * d**2 + 8.0 * a * d - 4.0 * a, 0.0),
    )
    return w


def _bicubic_axis(img, axis, n_out):
    n_in = img.shape[axis]
    i = np.arange(n_out, dtype=np.float64)
    src = (i + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    t = src - base
    taps = np.stack([base - 1, base, base + 1, base + 2], axis=1)
    dist = src[:, None] - taps
    weights = _cubic_weight(dist)
    weights /= weights.sum(axis=1, keepdims=True)
    taps = np.clip(taps, 0, n_in - 1)
    moved = np.moveaxis(img, axis, -1)
    out = np.einsum("...ij,ij->...i", moved[..., taps], weights.astype(img.dtype))
    return np.moveaxis(out, -1, axis)


def bicubic_resize(img, scale):
    """Catmull-Rom bicubic resampling (a=-0.5, half-pixel centers, edge clamp)."""
    img = np.asarray(img)
    h, w = img.shape[-2:]
    oh = max(1, int(round(h * scale)))
    ow = max(1, int(round(w * scale)))
    if oh == h and ow == w and abs(scale - 1.0) < 1e-12:
        return img.copy()
    out = _bicubic_axis(img, img.ndim - 2, oh)
    out = _bicubic_axis(out, img.ndim - 1, ow)
    return out


def psnr(a, b):
    """Peak signal-to-noise ratio in dB over all pixels, capped at 100."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return 100.0
    return min(100.0, 10.0 * np.log10(1.0 / mse))


def _ssim_window(size=11, sigma=1.5):
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img, window):
    """Windowed weighted sums over valid positions only (no padding)."""
    kh, kw = window.shape
    h, w = img.shape[-2:]
    out = np.zeros(img.shape[:-2] + (h - kh + 1, w - kw + 1), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            out += window[u, v] * img[..., u : u + h - kh + 1, v : v + w - kw + 1]
    return out


def ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity with a Gaussian window, data range 1.0.

    Computed per channel over valid (fully inside) windows, then averaged.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    if h < window_size or w < window_size:
        raise ContractError(
            f"ssim: image {h}x{w} smaller than {window_size}x{window_size} window"
        )
    win = _ssim_window(window_size, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a**2
    var_b = _filter_valid(b * b, win) - mu_b**2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# dihedral transforms (4 rotations x optional horizontal flip)
# ---------------------------------------------------------------------------

def dihedral_apply(img, k):
    """Apply dihedral transform k in 0..7 to the trailing two axes."""
    if k >= 4:
        img = img[..., ::-1]
    return np.ascontiguousarray(np.rot90(img, k % 4, axes=(-2, -1)))


def dihedral_invert(img, k):
    """Undo :func:`dihedral_apply` with the same k."""
    img = np.rot90(img, -(k % 4), axes=(-2, -1))
    if k >= 4:
        img = img[..., ::-1]
    return np.ascontiguousarray(img)


def augment_pair(lr, hr, rng):
    """Draw one of the 8 dihedral transforms and apply it to both images."""
    lr, hr = np.asarray(lr), np.asarray(hr)
    if (
        hr.shape[-2] % lr.shape[-2]
        or hr.shape[-1] % lr.shape[-1]
        or hr.shape[-2] // lr.shape[-2] != hr.shape[-1] // lr.shape[-1]
    ):
        raise DimensionError(
            f"augment_pair: hr {hr.shape} is not an integer multiple of lr {lr.shape}",
            axis=2,
        )
    k = int(rng.integers(0, 8))
    return dihedral_apply(lr, k), dihedral_apply(hr, k)


def self_ensemble(model, lr):
    """Average the model over all 8 dihedral transforms (uniform 1/8 weights).

    ``model`` maps an LR (B,C,H,W) array to its SR counterpart.
    """
    lr = np.asarray(lr)
    acc = None
    for k in range(8):
        out = dihedral_invert(np.asarray(model(dihedral_apply(lr, k))), k)
        acc = out.astype(np.float64) if acc is None else acc + out
    return (acc / 8.0).astype(lr.dtype)
