"""Monocular depth calibration: global affine alignment plus residual refinement.

A pluggable provider produces a raw depth map from an RGB image. The adapter
then fixes the provider's scale/offset bias with a learnable affine map and
corrects local structure with a small convolutional refiner whose last layer
starts at zero, so a freshly built adapter is exactly the identity.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, DimensionError, ParameterError
from .imageops import bilinear_resize
from .tensor import Module, Tensor

REFINER_WIDTH = 16


class AffineCalibration(Module):
    """Learnable global scale and shift, initialized to the identity."""

    def __init__(self, dtype=np.float64):
        super().__init__()
        self.scale = Tensor(np.ones((), dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros((), dtype=dtype), requires_grad=True)


def apply_affine(depth, calibration):
    """Elementwise scale * depth + shift, differentiable in all three."""
    return T.add(T.mul(calibration.scale, depth), calibration.shift)


class ResidualRefiner(Module):
    """Three 3x3 convolutions (1 -> 16 -> 16 -> 1), final layer zero-initialized.

    Zero initialization makes the refiner output exactly zero at start, so the
    adapter never harms the incoming depth before training.
    """

    def __init__(self, rng, dtype=np.float64, width=REFINER_WIDTH):
        super().__init__()
        self.w1 = T.he_normal(rng, (width, 1, 3, 3), fan_in=9, dtype=dtype)
        self.b1 = T.zeros_param((width,), dtype=dtype)
        self.w2 = T.he_normal(rng, (width, width, 3, 3), fan_in=9 * width, dtype=dtype)
        self.b2 = T.zeros_param((width,), dtype=dtype)
        self.w3 = T.zeros_param((1, width, 3, 3), dtype=dtype)
        self.b3 = T.zeros_param((1,), dtype=dtype)

    def forward(self, depth):
        if depth.ndim != 4 or depth.shape[1] != 1:
            raise DimensionError(
                f"refiner expects N x 1 x H x W depth, got {depth.shape}"
            )
        h = T.relu(T.conv2d(depth, self.w1, self.b1, stride=1, padding=1))
        h = T.relu(T.conv2d(h, self.w2, self.b2, stride=1, padding=1))
        return T.conv2d(h, self.w3, self.b3, stride=1, padding=1)


def refine(depth, refiner):
    return refiner.forward(depth)


class DepthAdapter(Module):
    """Affine calibration followed by additive residual refinement."""

    def __init__(self, rng, dtype=np.float64, use_refiner=True):
        super().__init__()
        self.calibration = AffineCalibration(dtype=dtype)
        self.use_refiner = use_refiner
        if use_refiner:
            self.refiner = ResidualRefiner(rng, dtype=dtype)

    def forward(self, depth):
        aligned = apply_affine(depth, self.calibration)
        if not self.use_refiner:
            return aligned
        return T.add(aligned, self.refiner.forward(aligned))


def adapt(depth, adapter):
    return adapter.forward(depth)


def normalize_depth(depth, eps=1e-8):
    """Per-sample min-max normalization to [0, 1] before the encoder."""
    low = T.tmin(depth, axis=(1, 2, 3), keepdims=True)
    high = T.tmax(depth, axis=(1, 2, 3), keepdims=True)
    span = T.add(T.sub(high, low), T.constant(np.full((1,), eps, dtype=depth.data.dtype)))
    return T.div(T.sub(depth, low), span)


def smooth_field(height, width, seed, coarse=4):
    """Low-frequency random surface with unit maximum absolute amplitude."""
    rng = np.random.Generator(np.random.PCG64(seed))
    grid = rng.normal(size=(coarse, coarse))
    field = bilinear_resize(grid, height, width)
    peak = np.max(np.abs(field))
    return field / peak if peak > 0 else field


def corrupt_depth(depth_gt, scale, shift, distortion_amp=0.0, noise_sd=0.0, seed=0):
    """Synthesize a biased provider output from ground-truth depth.

    Inverts the target affine map, then adds a smooth distortion surface and
    white noise. With scale=1, shift=0 and zero amplitudes this is the identity.
    """
    if scale == 0:
        raise ParameterError("corruption scale must be nonzero")
    depth_gt = np.asarray(depth_gt, dtype=np.float64)
    out = (depth_gt - shift) / scale
    h, w = depth_gt.shape[-2:]
    if distortion_amp != 0.0:
        out = out + distortion_amp * smooth_field(h, w, seed)
    if noise_sd != 0.0:
        rng = np.random.Generator(np.random.PCG64(seed + 1))
        out = out + rng.normal(0.0, noise_sd, size=depth_gt.shape)
    return out


def fit_affine_closed_form(depth_mono, depth_gt):
    """Ordinary least squares (scale, shift) minimizing ||scale*mono + shift - gt||^2."""
    x = np.asarray(depth_mono, dtype=np.float64).reshape(-1)
    y = np.asarray(depth_gt, dtype=np.float64).reshape(-1)
    if x.size < 2 or np.ptp(x) == 0:
        raise DegenerateInputError(
            "affine fit needs at least two distinct provider depth values"
        )
    mx, my = x.mean(), y.mean()
    xc = x - mx
    alpha = float(np.dot(xc, y - my) / np.dot(xc, xc))
    beta = float(my - alpha * mx)
    return alpha, beta


class DepthProvider:
    """Maps an RGB image (with optional per-sample context) to a raw depth map."""

    name = "abstract"

    def infer(self, rgb, context=None):
        raise NotImplementedError


class FileDepthProvider(DepthProvider):
    """Returns precomputed depth delivered alongside each sample."""

    name = "file"

    def __init__(self, max_depth=1.0):
        self.max_depth = float(max_depth)

    def infer(self, rgb, context=None):
        if context is None or "depth" not in context:
            raise DegenerateInputError(
                "file depth provider needs a per-sample depth array in context"
            )
        depth = np.asarray(context["depth"], dtype=np.float64)
        if depth.shape[-2:] != np.asarray(rgb).shape[-2:]:
            raise DimensionError(
                f"provider depth {depth.shape[-2:]} does not match image {np.asarray(rgb).shape[-2:]}"
            )
        return np.clip(depth, 0.0, self.max_depth)


class CorruptingDepthProvider(DepthProvider):
    """Applies a deterministic per-sample corruption to stored ground truth.

    Stands in for an external monocular model whose output carries scale and
    offset bias plus smooth structural error.
    """

    name = "corrupt"

    def __init__(self, scale=1.0, shift=0.0, distortion_amp=0.0, noise_sd=0.0,
                 max_depth=1.0):
        if scale == 0:
            raise ParameterError("corruption scale must be nonzero")
        self.scale = float(scale)
        self.shift = float(shift)
        self.distortion_amp = float(distortion_amp)
        self.noise_sd = float(noise_sd)
        self.max_depth = float(max_depth)

    def infer(self, rgb, context=None):
        if context is None or "depth" not in context:
            raise DegenerateInputError(
                "corrupting depth provider needs ground-truth depth in context"
            )
        seeds = context.get("seeds")
        depth = np.asarray(context["depth"], dtype=np.float64)
        out = np.empty_like(depth)
        for i in range(depth.shape[0]):
            seed = int(seeds[i]) if seeds is not None else 0
            out[i] = corrupt_depth(
                depth[i], self.scale, self.shift,
                distortion_amp=self.distortion_amp, noise_sd=self.noise_sd,
                seed=seed * 7919 + 17,
            )
        return np.clip(out, 0.0, self.max_depth)


def make_provider(kind, **kwargs):
    if kind == "file":
        return FileDepthProvider(max_depth=kwargs.get("max_depth", 1.0))
    if kind == "corrupt":
        return CorruptingDepthProvider(**kwargs)
    raise ParameterError(f"unknown depth provider '{kind}'")
