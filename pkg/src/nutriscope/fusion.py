"""Frequency-band feature fusion and cross-modal alignment.

RGB and depth feature maps are split into low- and high-frequency bands with a
binary radial mask on the DFT grid, bands are fused across modalities by
addition, and a learnable 1x1 convolution recombines the concatenated bands.
A contrastive loss on pooled global features keeps the two modalities aligned.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .fourier import apply_spectral_mask
from .tensor import Module


class LowpassMask:
    """Binary, conjugate-symmetric low-frequency selector on the DFT grid.

    A bin passes iff its normalized radial frequency is at or below ``cutoff``
    (fraction in [0, 1]). The complement ``1 - mask`` selects the high band, so
    the two bands always partition the spectrum exactly.
    """

    def __init__(self, height, width, cutoff):
        if not 0.0 <= cutoff <= 1.0:
            raise ParameterError(f"cutoff must be in [0, 1], got {cutoff}")
        self.height = int(height)
        self.width = int(width)
        self.cutoff = float(cutoff)
        self.values = _radial_mask(self.height, self.width, self.cutoff)

    @property
    def complement(self):
        return 1.0 - self.values


def _signed_frequencies(extent):
    freqs = np.fft.fftfreq(extent) * extent
    peak = np.max(np.abs(freqs))
    return freqs, (peak if peak > 0 else 1.0)


def _radial_mask(height, width, cutoff):
    fu, fu_max = _signed_frequencies(height)
    fv, fv_max = _signed_frequencies(width)
    radial = np.sqrt(
        (fu[:, None] / fu_max) ** 2 + (fv[None, :] / fv_max) ** 2
    ) / np.sqrt(2.0)
    return (radial <= cutoff).astype(np.float64)


def build_lowpass_mask(height, width, cutoff):
    return LowpassMask(height, width, cutoff)


def split_bands(x, mask):
    """Decompose a real NCHW tensor into (low, high) bands that sum to x."""
    if x.data.shape[-2:] != (mask.height, mask.width):
        raise DimensionError(
            f"mask is {mask.height}x{mask.width} but features are {x.data.shape[-2:]}"
        )
    low = apply_spectral_mask(x, mask.values)
    high = apply_spectral_mask(x, mask.complement)
    return low, high


class FusionLayer(Module):
    """Learnable 1x1 convolution recombining stacked band features (2C -> C)."""

    def __init__(self, channels, rng, dtype=np.float64):
        super().__init__()
        self.weight = T.he_normal(rng, (channels, 2 * channels, 1, 1),
                                  fan_in=2 * channels, dtype=dtype)
        self.bias = T.zeros_param((channels,), dtype=dtype)

    def forward(self, stacked):
        return T.conv2d(stacked, self.weight, self.bias, stride=1, padding=0)


def fuse_bands(rgb, depth, mask, layer):
    """Per-band cross-modal addition, then learnable recombination.

    Matching low/high bands of the two modalities are summed and the
    concatenated (high, low) pair is compressed back to the input width by the
    fusion layer. Because band splitting is linear, the band sums are computed
    as bands of the summed signal, which costs one transform instead of four.
    """
    if rgb.data.shape != depth.data.shape:
        raise DimensionError(
            f"fusion inputs differ: {rgb.data.shape} vs {depth.data.shape}"
        )
    combined = T.add(rgb, depth)
    fused_low = apply_spectral_mask(combined, mask.values)
    fused_high = T.sub(combined, fused_low)
    return layer.forward(T.concat_channels([fused_high, fused_low]))


def alignment_loss(feats_rgb, feats_depth, temperature):
    """One-directional contrastive loss over matched RGB/depth global features.

    Cosine similarities between RGB anchors and all depth candidates in the
    batch form the logits; each anchor's matched candidate is the positive.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if feats_rgb.data.shape != feats_depth.data.shape or feats_rgb.ndim != 2:
        raise DimensionError(
            f"alignment features must be matching N x C matrices, got "
            f"{feats_rgb.data.shape} and {feats_depth.data.shape}"
        )
    n = feats_rgb.data.shape[0]
    anchors = T.l2_normalize(feats_rgb)
    candidates = T.l2_normalize(feats_depth)
    logits = T.scale_shift(
        T.matmul(anchors, T.transpose(candidates, (1, 0))), 1.0 / temperature, 0.0
    )
    # log-sum-exp with a detached row-wise shift for stability
    shift = T.constant(logits.data.max(axis=-1, keepdims=True), dtype=logits.data.dtype)
    lse = T.add(
        T.log(T.tsum(T.exp(T.sub(logits, shift)), axis=-1)),
        T.reshape(shift, (n,)),
    )
    eye = T.constant(np.eye(n), dtype=logits.data.dtype)
    matched = T.tsum(T.mul(logits, eye), axis=-1)
    return T.tmean(T.sub(lse, matched))


class HierarchicalFusion(Module):
    """Per-stage band fusion across an encoder pyramid.

    Masks are built lazily per spatial size and cached; with the module
    disabled, fusion degrades to plain per-stage addition.
    """

    def __init__(self, stage_channels, rng, cutoffs, enabled=True, dtype=np.float64):
        super().__init__()
        if len(cutoffs) != len(stage_channels):
            raise ParameterError(
                f"{len(stage_channels)} stages but {len(cutoffs)} cutoffs"
            )
        self.cutoffs = [float(c) for c in cutoffs]
        self.enabled = enabled
        self.layers = T.ModuleList(
            [FusionLayer(c, rng, dtype=dtype) for c in stage_channels]
        )
        self._mask_cache = {}

    def mask_for(self, stage, height, width):
        key = (stage, height, width)
        if key not in self._mask_cache:
            self._mask_cache[key] = build_lowpass_mask(height, width, self.cutoffs[stage])
        return self._mask_cache[key]

    def forward(self, rgb_stages, depth_stages):
        if len(rgb_stages) != len(depth_stages) or len(rgb_stages) != len(self.layers):
            raise ParameterError(
                f"stage counts differ: {len(rgb_stages)} rgb, {len(depth_stages)} depth, "
                f"{len(self.layers)} fusion layers"
            )
        fused = []
        for s, (r, d) in enumerate(zip(rgb_stages, depth_stages)):
            if not self.enabled:
                fused.append(T.add(r, d))
                continue
            h, w = r.data.shape[-2:]
            fused.append(fuse_bands(r, d, self.mask_for(s, h, w), self.layers[s]))
        return fused
