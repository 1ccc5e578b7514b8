"""Receptive fields and frequency envelopes of dilated kernels.

Receptive fields use the cumulative-product formula

    RF = 1 + (k - 1) * (1 + d1 + d1*d2 + ... + d1*...*dL)

evaluated in exact integer arithmetic.  Note that this formula gives 5, not
3, for a single undilated k=3 layer; it is implemented as written.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import KernelLargerThanWindow
from .meshnet.spec import DilationSchedule

YU_KOLTUN = (1, 1, 2, 4, 8, 16, 1, 1)


def effective_kernel_size(k: int, d: int) -> int:
    """Span of a k-tap kernel with dilation d: ``1 + (k - 1) d``."""
    if k < 1 or k % 2 == 0 or d < 1:
        raise ValueError(f"need odd k >= 1 and d >= 1, got k={k}, d={d}")
    return 1 + (k - 1) * d


@dataclass(frozen=True)
class RFReport:
    schedule: DilationSchedule
    k: int
    rf: int


def receptive_field(schedule, k: int = 3) -> RFReport:
    if not isinstance(schedule, DilationSchedule):
        schedule = DilationSchedule(tuple(schedule))
    total, prod = 1, 1
    for d in schedule.dilations:
        prod *= int(d)
        total += prod
    return RFReport(schedule, k, 1 + (int(k) - 1) * total)


@dataclass(frozen=True)
class SpectrumEnvelope:
    fft_size: int
    magnitudes: np.ndarray


def dilate_taps(taps, d: int) -> np.ndarray:
    """Insert ``d - 1`` zeros between neighbouring taps."""
    taps = np.asarray(taps, dtype=np.float64).reshape(-1)
    out = np.zeros((len(taps) - 1) * d + 1)
    out[::d] = taps
    return out


def kernel_spectrum(taps, d: int, n: int, dims: int = 1) -> SpectrumEnvelope:
    """|DFT| of the dilated kernel placed centred (circularly) in a length-``n`` window.

    With ``dims=2`` the envelope is the outer product of the axis profiles.
    """
    kern = dilate_taps(taps, d)
    if len(kern) > n:
        raise KernelLargerThanWindow(f"dilated kernel spans {len(kern)} > window {n}")
    window = np.zeros(n)
    centre = len(kern) // 2
    window[(np.arange(len(kern)) - centre) % n] = kern
    mag = np.abs(np.fft.fft(window))
    if dims == 2:
        mag = np.outer(mag, mag)
    elif dims != 1:
        raise ValueError("dims must be 1 or 2")
    return SpectrumEnvelope(n, mag)


def format_matrix(mag: np.ndarray, fmt: str = "%.6g") -> str:
    buf = io.StringIO()
    np.savetxt(buf, np.atleast_2d(mag), fmt=fmt)
    return buf.getvalue()


# (name, dilations, published receptive field).  ◀▶ is read as the 9-layer
# palindrome; the formula gives 346,265 for it, one more than published.
PUBLISHED_SCHEDULES: Tuple[Tuple[str, Tuple[int, ...], Optional[str]], ...] = (
    ("◀▶", (1, 2, 4, 8, 16, 8, 4, 2, 1), "346264"),
    ("▶◀", (16, 8, 4, 2, 1, 1, 2, 4, 8, 16), "2.3M"),
    ("▶▶", (16, 8, 4, 2, 1) * 2, "5.5M"),
    ("▶▶▶▶▶", (16, 8, 4, 2, 1) * 5, "6e15"),
)


def _parse_reported(text: str) -> Tuple[float, float]:
    """Reported value and half-width of its last significant digit."""
    t = text.strip()
    mult = 1.0
    if t.endswith("M"):
        t, mult = t[:-1], 1e6
    if "e" in t:
        mant, exp = t.split("e")
        digits = mant.split(".")[1] if "." in mant else ""
        return float(t), 0.5 * 10 ** (int(exp) - len(digits))
    digits = t.split(".")[1] if "." in t else ""
    return float(t) * mult, 0.5 * mult * 10 ** (-len(digits))


def compare_reported(rf: int, reported: str) -> str:
    """``"exact"``, ``"rounds"`` (consistent after rounding) or ``"off by N"``."""
    value, half = _parse_reported(reported)
    if half <= 0.5 and rf == int(value):
        return "exact"
    if half > 0.5 and abs(rf - value) <= half:
        return "rounds"
    return f"off by {rf - int(value):+d}" if half <= 0.5 else f"off by {rf - value:+.3g}"


def schedule_report(schedules: Iterable = (), k: int = 3, include_published: bool = False) -> str:
    """CSV table: name, dilations, rf, per-layer effective kernel sizes, reported value, check.

    ``schedules`` yields ``(name, dilations)`` pairs or :class:`DilationSchedule`
    objects.
    """
    items = list(PUBLISHED_SCHEDULES) if include_published else []
    for s in schedules:
        if isinstance(s, DilationSchedule):
            items.append((s.name or "custom", s.dilations, None))
        else:
            name, dil = s[0], s[1]
            items.append((name, tuple(dil), s[2] if len(s) > 2 else None))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "dilations", "rf", "effective_kernels", "reported_rf", "check"])
    for name, dil, reported in items:
        rf = receptive_field(dil, k).rf
        eff = [effective_kernel_size(k, d) for d in dil]
        w.writerow([name, "-".join(map(str, dil)), rf, "-".join(map(str, eff)),
                    reported or "", compare_reported(rf, reported) if reported else ""])
    return buf.getvalue()


def published_schedules() -> Sequence[DilationSchedule]:
    return [DilationSchedule(d, n) for n, d, _ in PUBLISHED_SCHEDULES]
