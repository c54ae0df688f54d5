"""Dense complex linear algebra and a radix-2 FFT.

Vectors and matrices are plain numpy arrays (``complex128`` unless the caller
passes something narrower). Every function here is pure.
"""

from functools import lru_cache

import numpy as np

from .errors import InvalidDimensionError


def is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


def dft_matrix(n):
    """Unitary DFT matrix ``Q[j, k] = exp(-2 pi i j k / n) / sqrt(n)``."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidDimensionError(f"dft_matrix needs n >= 1, got {n!r}")
    j = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(j, j) / n) / np.sqrt(n)


@lru_cache(maxsize=None)
def _bit_reversal(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m):
    tw = np.exp(-1j * np.pi * np.arange(m) / m)
    tw.setflags(write=False)
    return tw


def _check_length(n):
    if not is_power_of_two(n):
        raise InvalidDimensionError(
            f"fft supports power-of-two lengths only, got length {n}; "
            "use dense_transform for other sizes"
        )


def fft(x):
    """Unnormalized forward DFT along the last axis (iterative radix-2).

    Leading axes are treated as a batch.
    """
    x = np.asarray(x)
    if x.ndim == 0:
        raise InvalidDimensionError("fft needs at least one axis")
    n = x.shape[-1]
    _check_length(n)
    lead = x.shape[:-1]
    y = x[..., _bit_reversal(n)].astype(np.result_type(x.dtype, np.complex64), copy=True)
    m = 1
    while m < n:
        y = y.reshape(*lead, n // (2 * m), 2, m)
        even = y[..., 0, :]
        odd = y[..., 1, :] * _twiddles(m)
        y = np.concatenate([even + odd, even - odd], axis=-1)
        m *= 2
    return y.reshape(*lead, n)


def ifft(x):
    """Inverse of :func:`fft`, carrying the ``1/n`` factor."""
    x = np.asarray(x)
    n = x.shape[-1] if x.ndim else 0
    return np.conj(fft(np.conj(x))) / n


def unitary_fft(x):
    """``Q @ x`` along the last axis, with ``Q = dft_matrix(n)``.

    Falls back to the dense product for non-power-of-two ``n``.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if is_power_of_two(n):
        return fft(x) / np.sqrt(n)
    return x @ dft_matrix(n).T


def unitary_ifft(x):
    """``Q^H @ x`` along the last axis."""
    x = np.asarray(x)
    n = x.shape[-1]
    if is_power_of_two(n):
        return ifft(x) * np.sqrt(n)
    return x @ dft_matrix(n).conj()


def matvec(m, x):
    m = np.asarray(m)
    x = np.asarray(x)
    if m.ndim != 2 or x.ndim != 1 or m.shape[1] != x.shape[0]:
        raise InvalidDimensionError(
            f"matvec shape mismatch: matrix {m.shape} with vector {x.shape}"
        )
    return m @ x


def bank_matvec(mat, x):
    """Apply one matrix per bank member: ``out[..., h, :] = mat[h] @ x[..., h, :]``.

    ``mat`` is (h, a, b) and ``x`` is (..., h, b). Routed through batched
    matmul, which is much faster than the equivalent einsum.
    """
    h, a, b = mat.shape
    lead = x.shape[:-2]
    if x.shape[-2:] != (h, b):
        raise InvalidDimensionError(f"bank_matvec: matrices {mat.shape} with input {x.shape}")
    xr = x.reshape(-1, h, b).transpose(1, 2, 0)
    out = np.matmul(mat, xr)
    return out.transpose(2, 0, 1).reshape(*lead, h, a)


def bank_outer_sum(u, v):
    """``sum over leading axes of u[..., h, :, None] * v[..., h, None, :]`` -> (h, a, b)."""
    h, a = u.shape[-2:]
    b = v.shape[-1]
    ur = u.reshape(-1, h, a).transpose(1, 2, 0)
    vr = v.reshape(-1, h, b).transpose(1, 0, 2)
    return np.matmul(ur, vr)
