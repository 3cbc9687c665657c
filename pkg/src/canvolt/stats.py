"""Small robust statistics shared by the learning stages."""

from __future__ import annotations

import numpy as np


def histogram_mode(values, lsb: float) -> float:
    """Most frequent value after binning at ``lsb`` width.

    Bins are centred on multiples of ``lsb`` so ADC-quantized input maps one
    code per bin.  Ties go to the bin closest to the median, then to the lower
    bin.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("mode of an empty set")
    codes, counts = np.unique(np.rint(v / lsb).astype(np.int64), return_counts=True)
    best = codes[counts == counts.max()]
    if best.size > 1:
        med = np.median(v) / lsb
        best = best[np.argsort(np.abs(best - med), kind="stable")]
    return float(best[0] * lsb)


def mad(values) -> float:
    """Raw median absolute deviation (no normal-consistency factor)."""
    v = np.asarray(values, dtype=float)
    return float(np.median(np.abs(v - np.median(v))))
