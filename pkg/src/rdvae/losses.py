"""Coding losses, their quadratic (metric tensor) forms, and the Gaussian KL term.

All loss functions accept a single vector ``(m,)`` or a batch ``(batch, m)``
and return a scalar or a per-row vector respectively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOSS_TAGS = ("square_error", "downward_convex", "upward_convex", "bce", "ssim")
SCALED_TAGS = ("square_error", "downward_convex", "upward_convex")
CLI_ALIASES = {"mse": "square_error", "down": "downward_convex", "up": "upward_convex",
               "bce": "bce", "ssim": "ssim"}

SSIM_C1 = 1e-8
SSIM_C2 = 1e-8


@dataclass(frozen=True)
class CodingLossKind:
    """Loss selector.

    ``reduction`` controls how per-dimension terms are combined for the
    scaled square errors and BCE: ``"mean"`` divides by the input dimension,
    ``"sum"`` does not. SSIM is always an average over windows.
    """

    tag: str = "square_error"
    ssim_window: int = 8
    image_shape: tuple[int, int] | None = None
    clamp_eps: float = 1e-6
    reduction: str = "mean"

    def __post_init__(self):
        tag = CLI_ALIASES.get(self.tag, self.tag)
        object.__setattr__(self, "tag", tag)
        if tag not in LOSS_TAGS:
            raise ValueError(f"unknown loss tag {self.tag!r}; expected one of {LOSS_TAGS}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.ssim_window < 1:
            raise ValueError("ssim_window must be >= 1")
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))

    def to_dict(self) -> dict:
        return {"tag": self.tag, "ssim_window": self.ssim_window,
                "image_shape": list(self.image_shape) if self.image_shape else None,
                "clamp_eps": self.clamp_eps, "reduction": self.reduction}

    @classmethod
    def from_dict(cls, d: dict | str | "CodingLossKind") -> "CodingLossKind":
        if isinstance(d, CodingLossKind):
            return d
        if isinstance(d, str):
            return cls(tag=d)
        shape = d.get("image_shape")
        return cls(tag=d.get("tag", "square_error"), ssim_window=int(d.get("ssim_window", 8)),
                   image_shape=tuple(shape) if shape else None,
                   clamp_eps=float(d.get("clamp_eps", 1e-6)),
                   reduction=d.get("reduction", "mean"))


def _as_kind(kind) -> CodingLossKind:
    return CodingLossKind.from_dict(kind)


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _norm(kind: CodingLossKind, m: int) -> float:
    return 1.0 / m if kind.reduction == "mean" else 1.0


# --- KL ----------------------------------------------------------------------

def kl_divergence(mu, sigma):
    """Per-dimension KL of N(mu, sigma^2) from N(0, 1) and its sum over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    s2 = sigma * sigma
    per_dim = 0.5 * (mu * mu + s2 - np.log(s2) - 1.0)
    return per_dim, per_dim.sum(axis=-1)


# --- scaled square errors ------------------------------------------------------

def convex_scale(x, kind="square_error"):
    """Scale factor ``a_x`` of the scaled square-error losses (row-wise)."""
    kind = _as_kind(kind)
    x = np.asarray(x, dtype=np.float64)
    sq = np.sum(x * x, axis=-1)
    if kind.tag == "square_error":
        return np.ones_like(sq)
    down = 2.0 / 3.0 + 2.0 * sq / 21.0
    if kind.tag == "downward_convex":
        return down
    if kind.tag == "upward_convex":
        return 1.0 / down
    raise ValueError(f"convex_scale undefined for loss {kind.tag!r}")


def _convex_scale_grad(x, kind: CodingLossKind):
    if kind.tag == "square_error":
        return np.zeros_like(x)
    g = 4.0 * x / 21.0
    if kind.tag == "downward_convex":
        return g
    down = 2.0 / 3.0 + 2.0 * np.sum(x * x, axis=-1, keepdims=True) / 21.0
    return -g / (down * down)


# --- SSIM ----------------------------------------------------------------------

def _window_stats(x, y):
    mx = x.mean(axis=-1)
    my = y.mean(axis=-1)
    dx = x - mx[..., None]
    dy = y - my[..., None]
    vx = (dx * dx).mean(axis=-1)
    vy = (dy * dy).mean(axis=-1)
    cxy = (dx * dy).mean(axis=-1)
    return mx, my, dx, dy, vx, vy, cxy


def ssim_window(x, y, c1: float = SSIM_C1, c2: float = SSIM_C2):
    """Luminance-times-structure SSIM of two flattened windows (last axis)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("windows must have equal shapes")
    mx, my, _, _, vx, vy, cxy = _window_stats(x, y)
    lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1)
    struct = (2.0 * cxy + c2) / (vx + vy + c2)
    return lum * struct


def _ssim_window_grads(x, y, c1=SSIM_C1, c2=SSIM_C2):
    """SSIM and its gradients w.r.t. both windows (last axis = pixels)."""
    P = x.shape[-1]
    mx, my, dx, dy, vx, vy, cxy = _window_stats(x, y)
    A1 = 2.0 * mx * my + c1
    B1 = mx * mx + my * my + c1
    A2 = 2.0 * cxy + c2
    B2 = vx + vy + c2
    lum = A1 / B1
    struct = A2 / B2
    dlum_dmy = (2.0 * mx * B1 - 2.0 * my * A1) / (B1 * B1)
    dlum_dmx = (2.0 * my * B1 - 2.0 * mx * A1) / (B1 * B1)
    dst_dc = 2.0 / B2
    dst_dv = -A2 / (B2 * B2)
    gy = (struct * dlum_dmy)[..., None] / P + lum[..., None] * (
        dst_dc[..., None] * dx / P + dst_dv[..., None] * 2.0 * dy / P)
    gx = (struct * dlum_dmx)[..., None] / P + lum[..., None] * (
        dst_dc[..., None] * dy / P + dst_dv[..., None] * 2.0 * dx / P)
    return lum * struct, gx, gy


def _image_shape(kind: CodingLossKind, m: int) -> tuple[int, int]:
    if kind.image_shape is not None:
        if kind.image_shape[0] * kind.image_shape[1] != m:
            raise ValueError(f"image_shape {kind.image_shape} does not hold {m} values")
        return kind.image_shape
    side = math.isqrt(m)
    if side * side != m:
        raise ValueError("ssim loss needs image_shape for non-square inputs")
    return side, side


def _to_windows(img, shape, n):
    """(B, H*W) -> (B, n_windows, n*n) over non-overlapping n x n tiles."""
    B = img.shape[0]
    H, W = shape
    h, w = H // n, W // n
    if h == 0 or w == 0:
        raise ValueError(f"window {n} larger than image {shape}")
    t = img.reshape(B, H, W)[:, :h * n, :w * n]
    return t.reshape(B, h, n, w, n).transpose(0, 1, 3, 2, 4).reshape(B, h * w, n * n)


def _from_windows(win, shape, n):
    B = win.shape[0]
    H, W = shape
    h, w = H // n, W // n
    out = np.zeros((B, H, W))
    out[:, :h * n, :w * n] = win.reshape(B, h, w, n, n).transpose(0, 1, 3, 2, 4).reshape(B, h * n, w * n)
    return out.reshape(B, H * W)


def ssim_image(x, y, kind=None):
    """Mean SSIM over non-overlapping windows (stride equal to the window size)."""
    kind = _as_kind(kind or "ssim")
    xb, sq = _batch(x)
    yb, _ = _batch(y)
    shape = _image_shape(kind, xb.shape[1])
    n = min(kind.ssim_window, *shape)
    vals = ssim_window(_to_windows(xb, shape, n), _to_windows(yb, shape, n)).mean(axis=-1)
    return vals[0] if sq else vals


# --- coding loss + gradients ---------------------------------------------------------

def coding_loss(x, xhat, kind="square_error"):
    """Distortion ``D(x, xhat)`` for the selected loss kind."""
    kind = _as_kind(kind)
    xb, sq = _batch(x)
    yb, _ = _batch(xhat)
    if xb.shape != yb.shape:
        raise ValueError(f"shape mismatch {xb.shape} vs {yb.shape}")
    m = xb.shape[1]
    if kind.tag in SCALED_TAGS:
        d = yb - xb
        val = convex_scale(xb, kind) * np.sum(d * d, axis=1) * _norm(kind, m)
    elif kind.tag == "bce":
        eps = kind.clamp_eps
        p = np.clip(yb, eps, 1.0 - eps)
        t = np.clip(xb, 0.0, 1.0)
        val = -np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p), axis=1) * _norm(kind, m)
    else:
        val = 1.0 - ssim_image(xb, yb, kind)
    return val[0] if sq else val


def coding_loss_grads(x, xhat, kind="square_error"):
    """Per-row loss plus gradients w.r.t. both arguments, all batched."""
    kind = _as_kind(kind)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(xhat, dtype=np.float64)
    m = x.shape[1]
    if kind.tag in SCALED_TAGS:
        nrm = _norm(kind, m)
        d = y - x
        sq = np.sum(d * d, axis=1)
        a = convex_scale(x, kind)
        val = a * sq * nrm
        gy = 2.0 * nrm * a[:, None] * d
        gx = -gy + nrm * sq[:, None] * _convex_scale_grad(x, kind)
        return val, gx, gy
    if kind.tag == "bce":
        nrm = _norm(kind, m)
        eps = kind.clamp_eps
        inside = (y > eps) & (y < 1.0 - eps)
        p = np.clip(y, eps, 1.0 - eps)
        t = np.clip(x, 0.0, 1.0)
        val = -np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p), axis=1) * nrm
        gy = np.where(inside, (-t / p + (1.0 - t) / (1.0 - p)) * nrm, 0.0)
        gx = np.where((x > 0.0) & (x < 1.0), (np.log1p(-p) - np.log(p)) * nrm, 0.0)
        return val, gx, gy
    shape = _image_shape(kind, m)
    n = min(kind.ssim_window, *shape)
    xw = _to_windows(x, shape, n)
    yw = _to_windows(y, shape, n)
    s, gxw, gyw = _ssim_window_grads(xw, yw)
    nw = xw.shape[1]
    val = 1.0 - s.mean(axis=1)
    gx = -_from_windows(gxw, shape, n) / nw
    gy = -_from_windows(gyw, shape, n) / nw
    return val, gx, gy


# --- metric tensors --------------------------------------------------------------

@dataclass(frozen=True)
class ScalarScaled:
    """``G = a_x * norm * I``; ``norm`` is 1/m under mean reduction."""

    a_x: float
    norm: float = 1.0

    def quad(self, delta):
        delta = np.asarray(delta, dtype=np.float64)
        return self.a_x * self.norm * np.sum(delta * delta, axis=-1)

    def matrix(self, m: int):
        return self.a_x * self.norm * np.eye(m)


@dataclass(frozen=True)
class Diagonal:
    d: np.ndarray
    norm: float = 1.0

    def quad(self, delta):
        delta = np.asarray(delta, dtype=np.float64)
        return self.norm * np.sum(self.d * delta * delta, axis=-1)

    def matrix(self, m: int | None = None):
        return self.norm * np.diag(self.d)


@dataclass(frozen=True)
class SsimWindowForm:
    """``G = M / (2 mu_x^2) + V / (2 sigma_x^2)`` on one N x N window."""

    mu_x: float
    sigma2_x: float
    window: int

    def quad(self, delta):
        delta = np.asarray(delta, dtype=np.float64)
        mu_d = delta.mean(axis=-1)
        var_d = delta.var(axis=-1)
        return mu_d ** 2 / (2.0 * self.mu_x ** 2) + var_d / (2.0 * self.sigma2_x)

    def matrix(self, m: int | None = None):
        P = self.window * self.window
        # M averages then squares (d'Md = mean(d)^2); V = I/P - M gives d'Vd = var(d)
        M = np.full((P, P), 1.0 / (P * P))
        V = np.eye(P) / P - M
        return M / (2.0 * self.mu_x ** 2) + V / (2.0 * self.sigma2_x)


def bce_metric_diag(x, clamp_eps: float | None = None):
    """Second-order BCE coefficients ``0.5 * (1/x + 1/(1-x))``."""
    x = np.asarray(x, dtype=np.float64)
    if clamp_eps is not None:
        x = np.clip(x, clamp_eps, 1.0 - clamp_eps)
    if np.any((x <= 0.0) | (x >= 1.0)):
        raise ValueError("bce metric is undefined at x in {0, 1}")
    return 0.5 * (1.0 / x + 1.0 / (1.0 - x))


def ssim_metric_form(x) -> SsimWindowForm:
    x = np.asarray(x, dtype=np.float64).ravel()
    n = math.isqrt(x.size)
    if n * n != x.size:
        raise ValueError("window must hold N*N pixels")
    mu, var = float(x.mean()), float(x.var())
    if mu == 0.0 or var <= 0.0:
        raise ValueError("ssim metric undefined for constant or zero-mean windows")
    return SsimWindowForm(mu, var, n)


def metric_form(x, kind="square_error"):
    """Quadratic form of ``D(x, x + delta)`` around a single point ``x``."""
    kind = _as_kind(kind)
    x = np.asarray(x, dtype=np.float64)
    m = x.size
    if kind.tag in SCALED_TAGS:
        return ScalarScaled(float(convex_scale(x, kind)), _norm(kind, m))
    if kind.tag == "bce":
        return Diagonal(bce_metric_diag(x, kind.clamp_eps), _norm(kind, m))
    shape = _image_shape(kind, m)
    if min(kind.ssim_window, *shape) ** 2 != m:
        raise ValueError("metric_form for ssim is defined per window; pass a single window")
    return ssim_metric_form(x)
