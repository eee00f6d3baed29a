"""2-D Fourier transforms and differentiable spectral masking.

The forward transform is unnormalized and the inverse carries the 1/(H*W)
factor, so ``ifft2(fft2(x))`` reproduces ``x``. Arbitrary spatial extents are
supported, powers of two not required. Transforms always run in double
precision internally regardless of the tensor dtype.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError
from .tensor import Tensor, _make, _accumulate


class ComplexTensor:
    """Paired real/imaginary planes of a frequency-domain array."""

    __slots__ = ("values",)

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.complex128)

    @property
    def shape(self):
        return self.values.shape

    @property
    def real(self):
        return self.values.real

    @property
    def imag(self):
        return self.values.imag

    def __repr__(self):
        return f"ComplexTensor(shape={self.values.shape})"


def fft2(x):
    """Unnormalized 2-D DFT over the last two axes of a real tensor."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim < 2:
        raise DimensionError(f"fft2 needs at least 2 axes, got shape {data.shape}")
    return ComplexTensor(np.fft.fft2(data.astype(np.float64, copy=False)))


def ifft2(spectrum):
    """Inverse 2-D DFT with 1/(H*W) normalization; returns a ComplexTensor."""
    if not isinstance(spectrum, ComplexTensor):
        spectrum = ComplexTensor(spectrum)
    return ComplexTensor(np.fft.ifft2(spectrum.values))


_IMAG_TOLERANCE = 1e-5


def apply_spectral_mask(x, mask):
    """Filter a real tensor through a binary frequency mask, differentiably.

    ``mask`` must be a real (H, W) array, conjugate-symmetric on the DFT grid
    so the filtered signal stays real. The operator is self-adjoint, so the
    backward pass applies the same filter to the gradient.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if x.data.shape[-2:] != mask.shape:
        raise DimensionError(
            f"mask extents {mask.shape} do not match spatial extents {x.data.shape[-2:]}"
        )
    spectrum = np.fft.fft2(x.data.astype(np.float64, copy=False)) * mask
    filtered = np.fft.ifft2(spectrum)
    residual = float(np.max(np.abs(filtered.imag))) if filtered.size else 0.0
    if residual > _IMAG_TOLERANCE:
        raise NumericError(
            f"spectral mask produced imaginary residual {residual:.3e} > {_IMAG_TOLERANCE}"
        )
    out = filtered.real.astype(x.data.dtype, copy=False)

    def backward(g):
        gf = np.fft.ifft2(np.fft.fft2(g.astype(np.float64, copy=False)) * mask)
        _accumulate(x, gf.real.astype(g.dtype, copy=False))

    return _make(out, (x,), backward)
