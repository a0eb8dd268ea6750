"""Image and regularization losses with analytic gradients, plus PSNR/SSIM
metrics and the line-delimited metrics records consumed by the report command.

Reduction conventions: L1 is the mean absolute error over supervised pixels
and channels; the L2 regularizers use the mean (not sum) of squared entries so
their weights are resolution-independent. Note this rescales the offset weight
relative to any sum-convention reading of the published weights.
"""

import csv
import math
import os
from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

PSNR_INF = float("inf")  # sentinel for identical images


@dataclass
class LossWeights:
    """Weights of the two-stage training objective.

    Stage 1 uses ``feature`` (on the feature tensor); stage 2 swaps it for
    ``pose_feature`` (on the encoder output). The perceptual weight is
    reserved but unused: that term needs a pretrained network, which this
    artifact does not ship.
    """
    rgb: float = 0.8
    ssim: float = 0.2
    feature: float = 1.0
    pose_feature: float = 1.0
    offset: float = 10.0
    scale: float = 1.0
    lpips: float = 0.2  # reserved, not applied

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"negative loss weight {name}={v}")


def l1_rgb(rendered, target, mask=None):
    """Mean absolute error over (masked) pixels and channels.

    Returns (value, gradient wrt rendered). The subgradient at zero is zero.
    """
    rendered = np.asarray(rendered, dtype=float)
    target = np.asarray(target, dtype=float)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    diff = rendered - target
    if mask is None:
        n = diff.size
        value = float(np.abs(diff).sum() / n)
        grad = np.sign(diff) / n
        return value, grad
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != rendered.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != image {rendered.shape[:2]}")
    n_pix = int(mask.sum())
    if n_pix == 0:
        raise ValueError("empty mask")
    n = n_pix * rendered.shape[2]
    m = mask[..., None]
    value = float((np.abs(diff) * m).sum() / n)
    grad = np.sign(diff) * m / n
    return value, grad


def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filt_valid(img, k):
    """Separable valid-mode correlation of a 2-D image with a 1-D kernel."""
    r = len(k) // 2
    out = correlate1d(img, k, axis=0, mode="constant")
    out = correlate1d(out, k, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _spread_full(win_field, k, shape):
    """Adjoint of _filt_valid (symmetric kernel): scatter window-level fields
    back to pixel space."""
    r = len(k) // 2
    pad = np.zeros(shape)
    pad[r:-r, r:-r] = win_field
    out = correlate1d(pad, k, axis=0, mode="constant")
    out = correlate1d(out, k, axis=1, mode="constant")
    return out


def ssim(rendered, target):
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5) on the
    [0,1] dynamic range, averaged over channels and valid window positions.

    Returns (ssim value, d ssim / d rendered). The loss term is 1 - value
    with the negated gradient.
    """
    x_img = np.asarray(rendered, dtype=float)
    y_img = np.asarray(target, dtype=float)
    if x_img.shape != y_img.shape:
        raise ValueError(f"shape mismatch {x_img.shape} vs {y_img.shape}")
    H, W = x_img.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError(f"image {H}x{W} smaller than the {SSIM_WINDOW}x"
                         f"{SSIM_WINDOW} SSIM window")
    if x_img.ndim == 2:
        x_img = x_img[..., None]
        y_img = y_img[..., None]
    k = _gauss_kernel()
    C = x_img.shape[2]
    total = 0.0
    grad = np.zeros_like(x_img)
    for c in range(C):
        x = x_img[..., c]
        y = y_img[..., c]
        mx = _filt_valid(x, k)
        my = _filt_valid(y, k)
        mxx = _filt_valid(x * x, k)
        myy = _filt_valid(y * y, k)
        mxy = _filt_valid(x * y, k)
        A1 = 2.0 * mx * my + SSIM_C1
        A2 = 2.0 * (mxy - mx * my) + SSIM_C2
        B1 = mx * mx + my * my + SSIM_C1
        B2 = (mxx - mx * mx) + (myy - my * my) + SSIM_C2
        D = B1 * B2
        S = A1 * A2 / D
        total += float(S.mean())
        nwin = S.size
        dS_dmx = (2.0 * my * (A2 - A1) - 2.0 * mx * S * (B2 - B1)) / D
        dS_dmxx = -S * B1 / D
        dS_dmxy = 2.0 * A1 / D
        gc = (_spread_full(dS_dmx, k, (H, W))
              + 2.0 * x * _spread_full(dS_dmxx, k, (H, W))
              + y * _spread_full(dS_dmxy, k, (H, W)))
        grad[..., c] = gc / nwin
    value = total / C
    grad /= C
    if np.asarray(rendered).ndim == 2:
        grad = grad[..., 0]
    return value, grad


def ssim_reference(rendered, target):
    """Direct per-window evaluation of the SSIM formula (independent oracle;
    quadratic cost, test use only)."""
    x_img = np.asarray(rendered, dtype=float)
    y_img = np.asarray(target, dtype=float)
    if x_img.ndim == 2:
        x_img = x_img[..., None]
        y_img = y_img[..., None]
    k = _gauss_kernel()
    k2 = np.outer(k, k)
    H, W, C = x_img.shape
    r = SSIM_WINDOW
    vals = []
    for c in range(C):
        for i in range(H - r + 1):
            for j in range(W - r + 1):
                wx = x_img[i:i + r, j:j + r, c]
                wy = y_img[i:i + r, j:j + r, c]
                mx = (k2 * wx).sum()
                my = (k2 * wy).sum()
                vx = (k2 * wx * wx).sum() - mx * mx
                vy = (k2 * wy * wy).sum() - my * my
                vxy = (k2 * wx * wy).sum() - mx * my
                vals.append(((2 * mx * my + SSIM_C1) * (2 * vxy + SSIM_C2))
                            / ((mx * mx + my * my + SSIM_C1)
                               * (vx + vy + SSIM_C2)))
    return float(np.mean(vals))


_REG_KINDS = ("f", "p", "offset", "scale")


def reg_l2(values, which):
    """Mean of squared entries; gradient 2 v / N."""
    if which not in _REG_KINDS:
        raise ValueError(f"unknown regularizer '{which}'")
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty array")
    if not np.isfinite(values).all():
        raise ValueError(f"non-finite values in '{which}' regularizer")
    value = float(np.mean(values ** 2))
    grad = 2.0 * values / values.size
    return value, grad


_STAGE_COMPONENTS = {1: ("rgb", "ssim", "f", "offset", "scale"),
                     2: ("rgb", "ssim", "p", "offset", "scale")}

_WEIGHT_OF = {"rgb": "rgb", "ssim": "ssim", "f": "feature",
              "p": "pose_feature", "offset": "offset", "scale": "scale"}


def total_loss(stage, components, weights: LossWeights | None = None):
    """Weighted sum of per-stage loss components.

    ``components`` maps a component name to (value, gradient); returns
    (total value, {name: weighted gradient}). Stage 1 expects rgb, ssim, f,
    offset, scale; stage 2 swaps f for p.
    """
    if stage not in _STAGE_COMPONENTS:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    weights = weights or LossWeights()
    total = 0.0
    grads = {}
    for name in _STAGE_COMPONENTS[stage]:
        if name not in components:
            raise ValueError(f"missing loss component '{name}' for stage {stage}")
        lam = getattr(weights, _WEIGHT_OF[name])
        value, grad = components[name]
        total += lam * float(value)
        grads[name] = lam * np.asarray(grad)
    return total, grads


def psnr(rendered, target):
    """Peak signal-to-noise ratio in dB on the [0,1] range; +inf for
    identical images."""
    rendered = np.asarray(rendered, dtype=float)
    target = np.asarray(target, dtype=float)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    mse = float(np.mean((rendered - target) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# metrics records (one CSV row per epoch; consumed by the report command)
# ---------------------------------------------------------------------------

METRIC_FIELDS = ("epoch", "stage", "loss", "l1", "ssim_loss", "reg_f", "reg_p",
                 "reg_offset", "reg_scale", "psnr", "ssim")


def append_metrics(path, record):
    """Append one metrics record; writes the header on first use."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        if new:
            w.writeheader()
        w.writerow({k: record.get(k, "") for k in METRIC_FIELDS})


def read_metrics(path):
    """All records of a metrics file, numeric fields parsed."""
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rec = {}
            for key, val in row.items():
                if val == "" or val is None:
                    rec[key] = None
                elif key in ("epoch", "stage"):
                    rec[key] = int(val)
                else:
                    rec[key] = float(val)
            out.append(rec)
    return out
