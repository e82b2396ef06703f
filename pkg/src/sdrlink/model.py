"""Complex-baseband MIMO model and its real-valued equivalent.

Conventions used throughout the package:

* A QPSK symbol is (a + jb)/1 with a, b in {+1, -1}; symbol energy Es = 2.
* The real stacking puts all real parts first: for complex H_c (n_r x n_t),

      H = [[Re H_c, -Im H_c],
           [Im H_c,  Re H_c]],   y = [Re y_c; Im y_c],   s = [Re s_c; Im s_c].

* Bit order interleaves real/imag per antenna: bits (b_0, b_1) of antenna i
  map to (Re s_i, Im s_i) = (1 - 2 b_0, 1 - 2 b_1).
* sigma2 is the noise variance per real dimension, i.e. the complex noise is
  CN(0, 2*sigma2).  sigma2 = 0 is the noiseless limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ComplexSnapshot",
    "RealSnapshot",
    "NoiseParams",
    "complex_to_real",
    "real_to_complex",
    "qpsk_modulate",
    "qpsk_hard_demap",
    "bits_to_symbol_order",
    "symbol_to_bit_order",
    "generate_channel",
    "real_channel_matrix",
    "apply_channel",
]


@dataclass(frozen=True)
class ComplexSnapshot:
    """One channel use in the complex domain: y = H s + n.

    sigma2 is the noise variance per real dimension (complex noise CN(0, 2*sigma2)).
    """

    y: np.ndarray
    H: np.ndarray
    s: np.ndarray | None = None
    sigma2: float = 0.0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=complex)
        H = np.asarray(self.H, dtype=complex)
        if H.ndim != 2 or y.shape != (H.shape[0],):
            raise ValueError(f"shape mismatch: y {y.shape}, H {H.shape}")
        if self.s is not None and np.asarray(self.s).shape != (H.shape[1],):
            raise ValueError("s length must match number of transmit antennas")
        if not (np.isfinite(self.sigma2) and self.sigma2 >= 0):
            raise ValueError("sigma2 must be finite and >= 0")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "H", H)
        if self.s is not None:
            object.__setattr__(self, "s", np.asarray(self.s, dtype=complex))


@dataclass(frozen=True)
class RealSnapshot:
    """Real-valued stacked model y = H x + n with x in {-1, +1}^(2 n_t)."""

    y: np.ndarray
    H: np.ndarray
    sigma2: float
    s: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        H = np.asarray(self.H, dtype=float)
        if H.ndim != 2 or y.shape != (H.shape[0],):
            raise ValueError(f"shape mismatch: y {y.shape}, H {H.shape}")
        if H.shape[0] % 2 or H.shape[1] % 2:
            raise ValueError("stacked dimensions must be even")
        if self.s is not None and np.asarray(self.s).shape != (H.shape[1],):
            raise ValueError("s length must match stacked symbol dimension")
        if not (np.isfinite(self.sigma2) and self.sigma2 >= 0):
            raise ValueError("sigma2 must be finite and >= 0")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "H", H)
        if self.s is not None:
            object.__setattr__(self, "s", np.asarray(self.s, dtype=float))

    @property
    def n_t(self) -> int:
        return self.H.shape[1] // 2

    @property
    def n_r(self) -> int:
        return self.H.shape[0] // 2


@dataclass(frozen=True)
class NoiseParams:
    """Noise variance per real dimension plus the stream seed."""

    sigma2: float
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 >= 0):
            raise ValueError("sigma2 must be finite and >= 0")


def real_channel_matrix(H_c: np.ndarray) -> np.ndarray:
    """Stack a complex channel matrix into its real 2x2-block form."""
    H_c = np.asarray(H_c, dtype=complex)
    return np.block([[H_c.real, -H_c.imag], [H_c.imag, H_c.real]])


def complex_to_real(snapshot: ComplexSnapshot) -> RealSnapshot:
    """Map a complex snapshot to the stacked real model.

    The map is an isometry: ||y_c - H_c s_c|| == ||y - H s|| for the stacked
    vectors, so detection metrics are unchanged.
    """
    y = np.concatenate([snapshot.y.real, snapshot.y.imag])
    H = real_channel_matrix(snapshot.H)
    s = None
    if snapshot.s is not None:
        s = np.concatenate([snapshot.s.real, snapshot.s.imag])
    return RealSnapshot(y=y, H=H, sigma2=snapshot.sigma2, s=s)


def real_to_complex(snapshot: RealSnapshot) -> ComplexSnapshot:
    """Invert complex_to_real.  Raises if H lacks the stacked block structure."""
    n_r, n_t = snapshot.n_r, snapshot.n_t
    H = snapshot.H
    A, B = H[:n_r, :n_t], H[:n_r, n_t:]
    C, D = H[n_r:, :n_t], H[n_r:, n_t:]
    if not (np.array_equal(A, D) and np.array_equal(B, -C)):
        raise ValueError("H does not have the real-stacked block structure")
    y_c = snapshot.y[:n_r] + 1j * snapshot.y[n_r:]
    s_c = None
    if snapshot.s is not None:
        s_c = snapshot.s[:n_t] + 1j * snapshot.s[n_t:]
    return ComplexSnapshot(y=y_c, H=A + 1j * C, s=s_c, sigma2=snapshot.sigma2)


def bits_to_symbol_order(v_bits: np.ndarray) -> np.ndarray:
    """Reorder a bit-ordered vector (re, im interleaved) to [all re; all im]."""
    v_bits = np.asarray(v_bits)
    if v_bits.shape[-1] % 2:
        raise ValueError("bit-ordered vectors have even length")
    return np.concatenate([v_bits[..., 0::2], v_bits[..., 1::2]], axis=-1)


def symbol_to_bit_order(v_sym: np.ndarray) -> np.ndarray:
    """Reorder a stacked symbol vector [all re; all im] to interleaved bit order."""
    v_sym = np.asarray(v_sym)
    n = v_sym.shape[-1]
    if n % 2:
        raise ValueError("stacked symbol vectors have even length")
    out = np.empty_like(v_sym)
    out[..., 0::2] = v_sym[..., : n // 2]
    out[..., 1::2] = v_sym[..., n // 2 :]
    return out


def qpsk_modulate(bits: np.ndarray) -> np.ndarray:
    """Map 2*n_t bits to the stacked real symbol vector x in {-1,+1}^(2 n_t).

    Bit 0 maps to +1.  bits = (b_0, ..., b_{2nt-1}) with (b_{2i}, b_{2i+1})
    the (real, imag) pair of antenna i; the output stacks all real parts first.
    """
    bits = np.asarray(bits)
    if bits.ndim != 1 or bits.size % 2:
        raise ValueError("expected a flat, even-length bit vector")
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("bits must be 0/1")
    return bits_to_symbol_order(1.0 - 2.0 * bits.astype(float))


def qpsk_hard_demap(x_soft: np.ndarray) -> np.ndarray:
    """Quantize a stacked soft symbol vector to bits.  Ties at 0 give bit 0."""
    x_soft = np.asarray(x_soft, dtype=float)
    if x_soft.ndim != 1 or x_soft.size % 2:
        raise ValueError("expected a flat, even-length symbol vector")
    return (symbol_to_bit_order(x_soft) < 0).astype(np.uint8)


def generate_channel(n_t: int, n_r: int, rng: np.random.Generator) -> np.ndarray:
    """Draw an (n_r, n_t) channel with i.i.d. CN(0, 1) entries.

    Each call draws a fresh matrix; real and imaginary parts are N(0, 1/2).
    """
    if n_t < 1 or n_r < 1:
        raise ValueError("antenna counts must be positive")
    re = rng.standard_normal((n_r, n_t))
    im = rng.standard_normal((n_r, n_t))
    return (re + 1j * im) / np.sqrt(2.0)


def apply_channel(
    channel: np.ndarray,
    x: np.ndarray,
    noise: NoiseParams,
    rng: np.random.Generator | None = None,
) -> RealSnapshot:
    """Transmit a stacked symbol vector through a complex channel.

    y = H x + n in the stacked real model, n ~ N(0, sigma2 * I).  When rng is
    None a fresh default_rng(noise.seed) is used.
    """
    H = real_channel_matrix(channel)
    x = np.asarray(x, dtype=float)
    if x.shape != (H.shape[1],):
        raise ValueError(f"x must have length {H.shape[1]}, got {x.shape}")
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    y = H @ x
    if noise.sigma2 > 0:
        y = y + np.sqrt(noise.sigma2) * rng.standard_normal(H.shape[0])
    return RealSnapshot(y=y, H=H, sigma2=noise.sigma2, s=x)
