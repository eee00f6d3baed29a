"""Plain-array image helpers shared by the generator, providers and CLI."""

from __future__ import annotations

import numpy as np


def bilinear_resize(image, out_h, out_w):
    """Resize the last two axes of an array with bilinear interpolation.

    Uses half-pixel centers, so constant images stay constant and the identity
    size is an exact no-op.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)
    top = image[..., y0, :][..., :, x0] * (1 - wx) + image[..., y0, :][..., :, x1] * wx
    bot = image[..., y1, :][..., :, x0] * (1 - wx) + image[..., y1, :][..., :, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]
