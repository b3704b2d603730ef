"""Step-up false discovery rate adjustment (Benjamini-Hochberg / Benjamini-Yekutieli)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METHODS = ("BH", "BY")


@dataclass(frozen=True)
class PValueVector:
    raw: np.ndarray
    adjusted: np.ndarray
    method: str

    def reject(self, level: float) -> np.ndarray:
        return self.adjusted <= level


def fdr_adjust(pvals, method: str = "BY") -> PValueVector:
    """Adjusted p-values for the step-up FDR procedures.

    Parameters
    ----------
    pvals : array_like
        Raw p-values in [0, 1]. Any shape; the adjustment treats them as one family.
    method : {"BH", "BY"}
        ``BY`` scales by the harmonic sum ``sum_{j<=m} 1/j``, which keeps FDR
        control under positive dependence.

    Returns
    -------
    PValueVector
        Adjusted values share the input shape.
    """
    method = method.upper()
    if method not in METHODS:
        raise ValueError(f"unknown FDR method {method!r}; expected one of {METHODS}")
    raw = np.asarray(pvals, dtype=float)
    flat = raw.ravel()
    m = flat.size
    if m == 0:
        raise ValueError("fdr_adjust needs at least one p-value")
    if np.any(~((flat >= 0) & (flat <= 1))):
        raise ValueError("p-values must lie in [0, 1]")

    order = np.argsort(flat, kind="stable")
    ranks = np.arange(1, m + 1, dtype=float)
    scaled = flat[order] * m / ranks
    if method == "BY":
        scaled = scaled * np.sum(1.0 / ranks)
    # cumulative minimum from the largest rank downwards
    stepped = np.minimum.accumulate(scaled[::-1])[::-1]
    adjusted = np.empty(m)
    # the max with the raw values only guards against rounding in p * m / k
    adjusted[order] = np.minimum(np.maximum(stepped, flat[order]), 1.0)
    return PValueVector(raw=raw.copy(), adjusted=adjusted.reshape(raw.shape), method=method)
