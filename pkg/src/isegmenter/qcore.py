"""Quantization primitives.

Symmetric uniform quantization with a single clipping threshold per tensor,
EMA range observers, and dyadic (``b / 2**c``) scales. Real-valued scale
arithmetic only happens at calibration time; everything an integer graph
needs at inference time is reachable from :class:`DyadicScale` through
integer operations (:func:`dyadic_mul`, :func:`dyadic_div`,
:func:`dyadic_reciprocal_round`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FrozenObserverError,
    InvalidInputError,
    InvalidThresholdError,
    NotCalibratedError,
    OverflowRiskError,
    ScaleOverflowError,
)

VALID_WIDTHS = (8, 16, 32)
DEFAULT_PRECISION = 15
# Threshold returned for a site that only ever saw zeros.
DEGENERATE_THRESHOLD = 2.0 ** -20
MAX_SHIFT = 63

_STORAGE_DTYPE = {8: np.int8, 16: np.int16, 32: np.int32}


def qmax(k: int) -> int:
    """Largest magnitude representable at width ``k`` (symmetric range)."""
    return (1 << (k - 1)) - 1


def _check_width(k: int) -> None:
    if k not in VALID_WIDTHS:
        raise InvalidInputError(f"bit-width must be one of {VALID_WIDTHS}, got {k}")


@dataclass(frozen=True)
class DyadicScale:
    """A scale factor ``b / 2**c`` with integer mantissa and shift."""

    b: int
    c: int

    def __post_init__(self):
        if self.b < 0 or self.c < 0:
            raise ScaleOverflowError(f"dyadic scale needs b, c >= 0, got ({self.b}, {self.c})")
        if self.c > MAX_SHIFT:
            raise ScaleOverflowError(f"shift {self.c} exceeds {MAX_SHIFT}")

    @property
    def value(self) -> float:
        """Real value of the scale. Oracle/debug use only."""
        return self.b / float(1 << self.c)

    def shifted(self, s: int) -> "DyadicScale":
        """The scale multiplied by ``2**-s`` (exact)."""
        return DyadicScale(self.b, self.c + s)


@dataclass(frozen=True)
class QuantSpec:
    k: int = 8
    p: int = DEFAULT_PRECISION

    def __post_init__(self):
        _check_width(self.k)
        if not 2 <= self.p <= 30:
            raise InvalidInputError(f"dyadic precision must be in [2, 30], got {self.p}")


@dataclass
class QuantizedTensor:
    """Integer payload of width ``k`` with its dyadic scale."""

    data: np.ndarray
    k: int
    scale: DyadicScale

    def __post_init__(self):
        _check_width(self.k)
        data = np.asarray(self.data)
        if data.dtype.kind not in "iu":
            raise InvalidInputError(f"payload must be integer, got dtype {data.dtype}")
        lim = qmax(self.k)
        if data.size and (int(data.max()) > lim or int(data.min()) < -lim):
            raise OverflowRiskError(f"payload exceeds the symmetric INT{self.k} range")
        self.data = data.astype(_STORAGE_DTYPE[self.k], copy=False)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def widen(self, k: int) -> "QuantizedTensor":
        """Same values and scale held at a wider width."""
        if k < self.k:
            raise InvalidInputError("widen cannot narrow a tensor")
        return QuantizedTensor(self.data, k, self.scale)


def scale_from_threshold(m: float, k: int) -> float:
    if not (m > 0) or not math.isfinite(m):
        raise InvalidThresholdError(f"clipping threshold must be positive and finite, got {m}")
    _check_width(k)
    return 2.0 * m / ((1 << k) - 1)


def threshold_scale(m: float, k: int, p: int = DEFAULT_PRECISION) -> DyadicScale:
    """Dyadic scale for clipping threshold ``m``, never below the real scale.

    Rounding up keeps every value in ``[-m, m]`` within half a step of a code.
    """
    return to_dyadic(scale_from_threshold(m, k), p, upward=True)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_dyadic(S: float, p: int = DEFAULT_PRECISION, upward: bool = False) -> DyadicScale:
    """Approximate ``S`` by ``b / 2**c`` with ``b`` in ``[2**(p-1), 2**p)``.

    Rounds the mantissa to nearest, or up with ``upward`` so that
    ``b / 2**c >= S``.
    """
    if not (S > 0) or not math.isfinite(S):
        raise ScaleOverflowError(f"scale must be positive and finite, got {S}")
    mant, exp = math.frexp(S)  # S = mant * 2**exp, mant in [0.5, 1)
    c = p - exp
    b = math.ceil(mant * (1 << p)) if upward else math.floor(mant * (1 << p) + 0.5)
    if b == 1 << p:
        b >>= 1
        c -= 1
    if c < 0 or c > MAX_SHIFT:
        raise ScaleOverflowError(f"scale {S!r} needs shift {c}, outside [0, {MAX_SHIFT}]")
    return DyadicScale(b, c)


def _mantissa(num: int, den: int, c0: int, p: int) -> tuple[int, int]:
    """``(b, c)`` with ``b / 2**c ~ (num / den) * 2**-c0``; ``c`` may be negative."""
    if num <= 0 or den <= 0:
        raise ScaleOverflowError("dyadic operands must be positive")
    s = p - 1 + den.bit_length() - num.bit_length()
    # num * 2**s / den lands in [2**(p-2), 2**p); nudge into [2**(p-1), 2**p)
    if s >= 0:
        scaled_num, scaled_den = num << s, den
    else:
        scaled_num, scaled_den = num, den << -s
    if scaled_num < scaled_den << (p - 1):
        s += 1
        if s >= 0:
            scaled_num, scaled_den = num << s, den
        else:
            scaled_num, scaled_den = num, den << -s
    b = (2 * scaled_num + scaled_den) // (2 * scaled_den)
    c = c0 + s
    if b == 1 << p:
        b >>= 1
        c -= 1
    return b, c


def _normalize(num: int, den: int, c0: int, p: int) -> DyadicScale:
    """Dyadic for ``(num / den) * 2**-c0`` rounded to a ``p``-bit mantissa."""
    b, c = _mantissa(num, den, c0, p)
    if c < 0 or c > MAX_SHIFT:
        raise ScaleOverflowError(f"dyadic result needs shift {c}, outside [0, {MAX_SHIFT}]")
    return DyadicScale(b, c)


def dyadic_mul(x: DyadicScale, y: DyadicScale, p: int = DEFAULT_PRECISION) -> DyadicScale:
    """Product of two scales, renormalized to ``p`` bits (integer arithmetic)."""
    return _normalize(x.b * y.b, 1, x.c + y.c, p)


def dyadic_ratio(x: DyadicScale, y: DyadicScale, p: int = DEFAULT_PRECISION) -> tuple[int, int]:
    """Multiplier ``(b, c)`` for ``x / y``; a negative ``c`` means a left shift."""
    # (bx / 2**cx) / (by / 2**cy) = (bx / by) * 2**-(cx - cy)
    c0 = x.c - y.c
    num, den = x.b, y.b
    if c0 < 0:
        num <<= -c0
        c0 = 0
    return _mantissa(num, den, c0, p)


def dyadic_div(x: DyadicScale, y: DyadicScale, p: int = DEFAULT_PRECISION) -> DyadicScale:
    """Ratio ``x / y`` as a ``p``-bit dyadic scale (integer arithmetic)."""
    b, c = dyadic_ratio(x, y, p)
    if c < 0 or c > MAX_SHIFT:
        raise ScaleOverflowError(f"dyadic result needs shift {c}, outside [0, {MAX_SHIFT}]")
    return DyadicScale(b, c)


def dyadic_reciprocal_round(d: DyadicScale) -> int:
    """``round(1 / S)`` computed from the dyadic integers alone."""
    # 1/S = 2**c / b
    return ((1 << (d.c + 1)) + d.b) // (2 * d.b)


def _check_finite(F: np.ndarray) -> None:
    if not np.all(np.isfinite(F)):
        raise InvalidInputError("input contains non-finite values")


def quantize(F, m: float, k: int = 8, p: int = DEFAULT_PRECISION) -> QuantizedTensor:
    """Symmetric uniform quantization of ``F`` with clipping threshold ``m``."""
    F = np.asarray(F, dtype=np.float64)
    _check_finite(F)
    S = threshold_scale(m, k, p)
    lim = qmax(k)
    I = round_half_away(np.clip(F, -m, m) / S.value)
    I = np.clip(I, -lim, lim).astype(np.int64)
    return QuantizedTensor(I, k, S)


def dequantize(Q: QuantizedTensor) -> np.ndarray:
    return Q.data.astype(np.float64) * Q.scale.value


def dyadic_apply(I, d) -> np.ndarray:
    """``(I * b) >> c`` element-wise, arithmetic (floor) shift.

    ``d`` is a :class:`DyadicScale` or a ``(b, c)`` multiplier whose negative
    ``c`` stands for a left shift.
    """
    b, c = (d.b, d.c) if isinstance(d, DyadicScale) else (int(d[0]), int(d[1]))
    I = np.asarray(I)
    if I.dtype.kind not in "iu":
        raise InvalidInputError(f"dyadic_apply needs integer input, got {I.dtype}")
    I = I.astype(np.int64)
    if I.size:
        peak = max(abs(int(I.max())), abs(int(I.min())))
        if (peak * b) << max(-c, 0) >= 1 << 63:
            raise OverflowRiskError("I * b does not fit in 64-bit signed")
    if c < 0:
        return (I * np.int64(b)) << np.int64(-c)
    return (I * np.int64(b)) >> np.int64(c)


def _real_multiplier(r: float, p: int) -> tuple[int, int]:
    mant, exp = math.frexp(r)
    b = math.floor(mant * (1 << p) + 0.5)
    c = p - exp
    if b == 1 << p:
        b, c = b >> 1, c - 1
    return b, c


def saturate(I: np.ndarray, k: int) -> np.ndarray:
    lim = qmax(k)
    return np.clip(I, -lim, lim)


def requantize(acc, s_combined, s_out, k_out: int, p: int = DEFAULT_PRECISION) -> QuantizedTensor:
    """Rescale an accumulator from ``s_combined`` to ``s_out`` and saturate.

    Scales may be given as :class:`DyadicScale` (the inference path, ratio
    formed with integer arithmetic) or as positive reals (calibration and
    test code).
    """
    if isinstance(s_combined, DyadicScale) and isinstance(s_out, DyadicScale):
        ratio = dyadic_ratio(s_combined, s_out, p)
        out_scale = s_out
    else:
        sc = s_combined.value if isinstance(s_combined, DyadicScale) else float(s_combined)
        so = s_out.value if isinstance(s_out, DyadicScale) else float(s_out)
        if not (sc > 0 and so > 0):
            raise ScaleOverflowError("requantize scales must be positive")
        ratio = _real_multiplier(sc / so, p)
        out_scale = s_out if isinstance(s_out, DyadicScale) else to_dyadic(so, p)
    out = saturate(dyadic_apply(acc, ratio), k_out)
    return QuantizedTensor(out, k_out, out_scale)


@dataclass
class RangeObserver:
    """EMA tracker of a site's min/max."""

    alpha: float = 0.05
    m_min: float = 0.0
    m_max: float = 0.0
    initialized: bool = False
    frozen: bool = False
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidInputError(f"EMA momentum must be in (0, 1], got {self.alpha}")


def observe(obs: RangeObserver, F) -> RangeObserver:
    if obs.frozen:
        raise FrozenObserverError(f"observer {obs.name or '<unnamed>'} is frozen")
    F = np.asarray(F, dtype=np.float64)
    if F.size == 0:
        raise InvalidInputError("cannot observe an empty tensor")
    _check_finite(F)
    lo, hi = float(F.min()), float(F.max())
    if not obs.initialized:
        obs.m_min = min(lo, 0.0)
        obs.m_max = max(hi, 0.0)
        obs.initialized = True
    else:
        a = obs.alpha
        obs.m_min = a * lo + (1.0 - a) * obs.m_min
        obs.m_max = a * hi + (1.0 - a) * obs.m_max
    return obs


def threshold(obs: RangeObserver) -> float:
    if not obs.initialized:
        raise NotCalibratedError(f"observer {obs.name or '<unnamed>'} has seen no data")
    m = max(-obs.m_min, obs.m_max)
    return m if m > 0 else DEGENERATE_THRESHOLD


def tensor_threshold(F) -> float:
    """``max|F|``, or the degenerate sentinel for an all-zero tensor."""
    F = np.asarray(F, dtype=np.float64)
    _check_finite(F)
    m = float(np.max(np.abs(F))) if F.size else 0.0
    return m if m > 0 else DEGENERATE_THRESHOLD
