"""Dual-stream encoder and the gated, channel-masked prediction head.

The RGB image and the calibrated depth map pass through separate multi-scale
convolutional encoders. Stage features are fused across modalities in the
frequency domain, and the head unifies the pyramids to a common grid, lets RGB
tokens attend over the fused semantic tokens, gates the two streams, masks
uninformative channels, and regresses the five nutrition quantities.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .depth import DepthAdapter, normalize_depth
from .errors import DimensionError, ParameterError
from .fusion import HierarchicalFusion
from .losses import N_TASKS
from .tensor import Module, ModuleList, Tensor

HEAD_BIAS_INIT = math.log(math.e - 1.0)  # softplus(bias) == 1


class Conv(Module):
    def __init__(self, cin, cout, kernel, stride, padding, rng, dtype,
                 zero_init=False):
        super().__init__()
        shape = (cout, cin, kernel, kernel)
        if zero_init:
            self.weight = T.zeros_param(shape, dtype=dtype)
        else:
            self.weight = T.he_normal(rng, shape, fan_in=cin * kernel * kernel,
                                      dtype=dtype)
        self.bias = T.zeros_param((cout,), dtype=dtype)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding)


class Linear(Module):
    def __init__(self, cin, cout, rng, dtype, zero_init=False, bias_init=0.0):
        super().__init__()
        if zero_init:
            self.weight = T.zeros_param((cin, cout), dtype=dtype)
        else:
            self.weight = T.he_normal(rng, (cin, cout), fan_in=cin, dtype=dtype)
        self.bias = Tensor(np.full((cout,), bias_init, dtype=dtype),
                           requires_grad=True)

    def forward(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)


class EncoderStage(Module):
    def __init__(self, cin, cout, rng, dtype):
        super().__init__()
        self.conv1 = Conv(cin, cout, 3, 1, 1, rng, dtype)
        self.conv2 = Conv(cout, cout, 3, 2, 1, rng, dtype)

    def forward(self, x):
        return T.relu(self.conv2.forward(T.relu(self.conv1.forward(x))))


class StageEncoder(Module):
    """Multi-scale feature pyramid; each stage halves the spatial extent."""

    def __init__(self, in_channels, widths, rng, dtype):
        super().__init__()
        if list(widths) != sorted(set(widths)):
            raise ParameterError(f"stage widths must be strictly increasing, got {widths}")
        self.widths = list(widths)
        stages = []
        prev = in_channels
        for w in widths:
            stages.append(EncoderStage(prev, w, rng, dtype))
            prev = w
        self.stages = ModuleList(stages)

    def forward(self, x):
        h, w = x.data.shape[-2:]
        need = 2 ** len(self.stages)
        if h < need or w < need:
            raise DimensionError(
                f"input {h}x{w} too small for {len(self.stages)} stride-2 stages"
            )
        feats = []
        for stage in self.stages:
            x = stage.forward(x)
            feats.append(x)
        return feats


class Unify(Module):
    """Project each pyramid level to a common width and pool to a common grid."""

    def __init__(self, stage_channels, out_channels, grid, rng, dtype):
        super().__init__()
        self.projections = ModuleList(
            [Conv(c, out_channels, 1, 1, 0, rng, dtype) for c in stage_channels]
        )
        self.grid = int(grid)

    def forward(self, features):
        if not features:
            raise ParameterError("unify needs at least one feature map")
        out = []
        for proj, feat in zip(self.projections, features):
            out.append(T.adaptive_avg_pool(proj.forward(feat), self.grid, self.grid))
        return out


class CrossAttentionBlock(Module):
    """Single-head attention: queries from one stream, keys/values from another.

    The value projection maps back to the token width so the residual
    connection type-checks for any attention dimension. It starts at zero, so
    a fresh block passes queries through unchanged and trains from there.
    """

    def __init__(self, dim, attn_dim, rng, dtype):
        super().__init__()
        self.wq = T.he_normal(rng, (dim, attn_dim), fan_in=dim, dtype=dtype)
        self.wk = T.he_normal(rng, (dim, attn_dim), fan_in=dim, dtype=dtype)
        self.wv = T.zeros_param((dim, dim), dtype=dtype)
        self.scale = 1.0 / math.sqrt(attn_dim)

    def forward(self, query_tokens, context_tokens):
        if query_tokens.data.shape[-1] != context_tokens.data.shape[-1]:
            raise DimensionError(
                f"token widths differ: {query_tokens.data.shape} vs {context_tokens.data.shape}"
            )
        q = T.matmul(query_tokens, self.wq)
        k = T.matmul(context_tokens, self.wk)
        v = T.matmul(context_tokens, self.wv)
        scores = T.scale_shift(T.matmul(q, T.transpose(k, (0, 2, 1))), self.scale, 0.0)
        attn = T.softmax_rows(scores)
        out = T.add(T.matmul(attn, v), query_tokens)
        return out, attn


class GatedFusion(Module):
    """Convex per-channel, per-position blend of two equally shaped maps.

    The gate projection starts at zero: a fresh gate mixes both inputs equally.
    """

    def __init__(self, channels, rng, dtype):
        super().__init__()
        self.proj = Conv(2 * channels, channels, 1, 1, 0, rng, dtype,
                         zero_init=True)

    def forward(self, a, b):
        if a.data.shape != b.data.shape:
            raise DimensionError(
                f"gated fusion inputs differ: {a.data.shape} vs {b.data.shape}"
            )
        gate = T.sigmoid(self.proj.forward(T.concat_channels([a, b])))
        inverse = T.scale_shift(gate, -1.0, 1.0)
        return T.add(T.mul(gate, a), T.mul(inverse, b))


class ChannelMask(Module):
    """Score channels from pooled context and damp the uninformative ones.

    Soft mode multiplies by sigmoid scores and stays differentiable; hard mode
    keeps exactly the top-k scoring channels and is meant for inference.
    """

    def __init__(self, channels, rng, dtype, reduction=4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = Linear(channels, hidden, rng, dtype)
        # final layer zero-initialized: fresh masks pass half of every channel
        self.fc2 = Linear(hidden, channels, rng, dtype, zero_init=True)
        self.channels = channels

    def scores(self, x):
        pooled = T.global_avg_pool(x)
        return self.fc2.forward(T.relu(self.fc1.forward(pooled)))

    def forward(self, x, hard=False, keep=None):
        n, c = x.data.shape[:2]
        if c != self.channels:
            raise DimensionError(f"mask scorer built for {self.channels} channels, got {c}")
        logits = self.scores(x)
        if hard:
            if keep is None or not 1 <= keep <= c:
                raise ParameterError(f"hard mask keep count {keep} outside [1, {c}]")
            order = np.argsort(-logits.data, axis=1, kind="stable")[:, :keep]
            hard_mask = np.zeros((n, c), dtype=x.data.dtype)
            np.put_along_axis(hard_mask, order, 1.0, axis=1)
            return T.mul(x, T.constant(hard_mask[:, :, None, None], dtype=x.data.dtype))
        soft = T.sigmoid(logits)
        return T.mul(x, T.reshape(soft, (n, c, 1, 1)))


class PredictHead(Module):
    """Global pooling, one fully connected layer, softplus to keep outputs positive.

    The bias starts at softplus^-1(1) so an untrained model predicts the
    per-task scale, not zero.
    """

    def __init__(self, channels, rng, dtype, bias_init=HEAD_BIAS_INIT):
        super().__init__()
        self.fc = Linear(channels, N_TASKS, rng, dtype, bias_init=bias_init)

    def forward(self, x):
        if x.ndim == 4:
            x = T.global_avg_pool(x)
        return T.softplus(self.fc.forward(x))


def to_tokens(feature_map):
    n, c, h, w = feature_map.data.shape
    return T.reshape(T.transpose(feature_map, (0, 2, 3, 1)), (n, h * w, c))


def to_map(tokens, h, w):
    n, t, c = tokens.data.shape
    if t != h * w:
        raise DimensionError(f"{t} tokens cannot tile a {h}x{w} grid")
    return T.transpose(T.reshape(tokens, (n, h, w, c)), (0, 3, 1, 2))


def _average(tensors):
    total = tensors[0]
    for t in tensors[1:]:
        total = T.add(total, t)
    return T.scale_shift(total, 1.0 / len(tensors), 0.0)


class NutritionModel(Module):
    """End-to-end regressor from an RGB image (plus provider depth) to nutrition.

    Toggles mirror the ablation rows: the depth branch exists when either
    fusion or the masked head needs it; with fusion disabled the branch falls
    back to per-stage addition; with the masked head disabled the deepest
    feature goes straight to the plain head.
    """

    def __init__(self, widths, rng, dtype=np.float64, *, unify_width=64,
                 unify_grid=4, attn_dim=64, use_fusion=True, use_adapter=True,
                 use_masked_head=True, lowpass_cutoffs=None, mask_reduction=4):
        super().__init__()
        self.widths = list(widths)
        self.dtype = np.dtype(dtype)
        self.use_fusion = bool(use_fusion)
        self.use_adapter = bool(use_adapter)
        self.use_masked_head = bool(use_masked_head)
        self.depth_active = self.use_fusion or self.use_masked_head
        self.unify_grid = int(unify_grid)

        self.rgb_encoder = StageEncoder(3, widths, rng, dtype)
        if self.depth_active:
            self.depth_encoder = StageEncoder(1, widths, rng, dtype)
            cutoffs = lowpass_cutoffs or [0.25] * len(widths)
            self.fuser = HierarchicalFusion(
                widths, rng, cutoffs, enabled=self.use_fusion, dtype=dtype
            )
        if self.use_adapter:
            if not self.depth_active:
                raise ParameterError(
                    "the depth adapter needs the depth branch (enable fusion or the masked head)"
                )
            self.adapter = DepthAdapter(rng, dtype=dtype)

        if self.use_masked_head:
            self.unify_rgb = Unify(widths, unify_width, unify_grid, rng, dtype)
            self.unify_sem = Unify(widths, unify_width, unify_grid, rng, dtype)
            self.attention = CrossAttentionBlock(unify_width, attn_dim, rng, dtype)
            self.gate_semantic = GatedFusion(unify_width, rng, dtype)
            self.channel_mask = ChannelMask(unify_width, rng, dtype,
                                            reduction=mask_reduction)
            self.gate_global = GatedFusion(unify_width, rng, dtype)
        else:
            self.head_proj = Conv(widths[-1], unify_width, 1, 1, 0, rng, dtype)
        self.head = PredictHead(unify_width, rng, dtype)
        # per-task output scale; calibrated to the train-split target means
        self.target_scale = Tensor(np.ones(N_TASKS, dtype=dtype), requires_grad=False)

    def set_target_scale(self, scale):
        self.target_scale.data = np.asarray(scale, dtype=self.dtype).reshape(N_TASKS)

    def forward(self, rgb, depth_mono=None, *, hard_mask=False, keep=None):
        """Run the pipeline; returns predictions plus features for the losses."""
        if not isinstance(rgb, Tensor):
            rgb = T.constant(np.asarray(rgb, dtype=self.dtype), dtype=self.dtype)
        # center unit-range inputs so first-layer preactivations are balanced
        rgb_stages = self.rgb_encoder.forward(T.scale_shift(rgb, 1.0, -0.5))
        out = {}

        fused_stages = None
        if self.depth_active:
            if depth_mono is None:
                raise ParameterError("model has a depth branch but no depth was given")
            if not isinstance(depth_mono, Tensor):
                depth_mono = T.constant(
                    np.asarray(depth_mono, dtype=self.dtype), dtype=self.dtype
                )
            adapted = (
                self.adapter.forward(depth_mono) if self.use_adapter else depth_mono
            )
            out["adapted_depth"] = adapted
            depth_in = T.scale_shift(normalize_depth(adapted), 1.0, -0.5)
            depth_stages = self.depth_encoder.forward(depth_in)
            fused_stages = self.fuser.forward(rgb_stages, depth_stages)
            if self.use_fusion:
                out["feats_rgb"] = T.global_avg_pool(rgb_stages[-1])
                out["feats_depth"] = T.global_avg_pool(depth_stages[-1])

        if self.use_masked_head:
            rgb_maps = self.unify_rgb.forward(rgb_stages)
            sem_source = fused_stages if fused_stages is not None else rgb_stages
            sem_maps = self.unify_sem.forward(sem_source)
            rgb_unified = _average(rgb_maps)
            sem_unified = _average(sem_maps)
            attended, attn = self.attention.forward(
                to_tokens(rgb_unified), to_tokens(sem_unified)
            )
            out["attention"] = attn
            attended_map = to_map(attended, self.unify_grid, self.unify_grid)
            semantic = self.gate_semantic.forward(attended_map, sem_unified)
            masked = self.channel_mask.forward(semantic, hard=hard_mask, keep=keep)
            features = self.gate_global.forward(rgb_unified, masked)
        else:
            deepest = fused_stages[-1] if fused_stages is not None else rgb_stages[-1]
            features = self.head_proj.forward(deepest)

        normalized = self.head.forward(features)
        out["pred"] = T.mul(
            normalized, T.constant(self.target_scale.data, dtype=self.dtype)
        )
        return out
