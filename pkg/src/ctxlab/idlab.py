"""Intrinsic-dimension and entropy measurement over eigenvalue spectra.

The measured dimension of a spectrum is the number of relative eigenvalues
clearing a threshold.  Across a family of trained context lengths there may
exist a single threshold band that recovers every true dimension at once;
``find_consistent_threshold`` computes that band honestly (possibly empty).
``ce_vs_id_report`` bundles the regression suite relating validation loss,
measured dimension and context length.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    EigenSpectrum,
    EntropyEstimate,
    LinearFit,
    PowerLawFit,
    _relative_values,
    fit_linear,
    fit_power_law,
)

# Threshold sweep bounds used by default throughout the reporting pipeline.
DEFAULT_THRESHOLD_RANGE = (0.002, 0.25)


@dataclass(frozen=True)
class IdMeasurement:
    """Largest count of leading relative eigenvalues >= threshold."""

    threshold: float
    measured_id: int
    spectrum: EigenSpectrum | None = None


def measure_id(spectrum, threshold: float) -> IdMeasurement:
    """Count leading relative eigenvalues at or above ``threshold``.

    Accepts an EigenSpectrum or a plain descending sequence of relative
    values.  Returns 0 when nothing clears the threshold (degenerate input).
    """
    if not (0.0 < threshold <= 1.0):
        raise ValueError("threshold must lie in (0, 1]")
    rel = _relative_values(spectrum)
    measured = int(np.count_nonzero(rel >= threshold))
    ref = spectrum if isinstance(spectrum, EigenSpectrum) else None
    return IdMeasurement(threshold=float(threshold), measured_id=measured, spectrum=ref)


def subspace_entropy(spectrum, n: int) -> EntropyEstimate:
    """Sum of log relative eigenvalues over the first n entries (nats).

    A log-hyper-volume proxy: comparable across spectra only up to an
    additive constant.
    """
    rel = _relative_values(spectrum)
    if n < 1 or n > len(rel):
        raise ValueError(f"subspace size {n} outside the spectrum (length {len(rel)})")
    vals = rel[:n]
    if np.any(vals <= 0):
        raise ValueError("zero eigenvalue inside the requested subspace")
    return EntropyEstimate(value=float(np.sum(np.log(vals))),
                           method="pca-subspace", subspace_size=int(n))


def find_consistent_threshold(spectra, true_ids) -> tuple[float, float] | None:
    """Intersection over context lengths of the per-spectrum threshold bands
    [rel_eig(true_id + 1), rel_eig(true_id)) that measure the true dimension
    exactly.  Returns (lo, hi), or None when the intersection is empty.
    """
    spectra = list(spectra)
    true_ids = [int(t) for t in true_ids]
    if len(spectra) != len(true_ids):
        raise ValueError("need one true dimension per spectrum")
    if len(spectra) < 2:
        raise ValueError("consistency needs at least 2 context lengths")
    lo = 0.0
    hi = math.inf
    for spec, tid in zip(spectra, true_ids):
        rel = _relative_values(spec)
        if not (1 <= tid <= len(rel)):
            raise ValueError(f"true dimension {tid} outside spectrum of length {len(rel)}")
        band_hi = float(rel[tid - 1])
        band_lo = float(rel[tid]) if tid < len(rel) else 0.0
        lo = max(lo, band_lo)
        hi = min(hi, band_hi)
    if lo >= hi:
        return None
    return (lo, hi)


@dataclass(frozen=True)
class CeIdReport:
    """Regression bundle: loss vs measured dimension (linear), dimension vs
    context length and loss vs context length (power laws)."""

    ce_vs_id: LinearFit
    id_vs_l: PowerLawFit
    ce_vs_l: PowerLawFit
    context_lengths: tuple[int, ...]
    ces: tuple[float, ...]
    ids: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "ce_vs_id": {
                "slope": self.ce_vs_id.slope,
                "intercept": self.ce_vs_id.intercept,
                "r_squared": self.ce_vs_id.r_squared,
            },
            "id_vs_l": _power_fit_dict(self.id_vs_l),
            "ce_vs_l": _power_fit_dict(self.ce_vs_l),
            "points": [
                {"context_length": l, "ce": ce, "id": i}
                for l, ce, i in zip(self.context_lengths, self.ces, self.ids)
            ],
        }


def _power_fit_dict(fit: PowerLawFit) -> dict:
    return {
        "c0": fit.c0, "c": fit.c, "gamma": fit.gamma,
        "c0_stderr": fit.c0_stderr, "c_stderr": fit.c_stderr,
        "gamma_stderr": fit.gamma_stderr, "r_squared": fit.r_squared,
        "degenerate": fit.degenerate,
    }


def ce_vs_id_report(runs) -> CeIdReport:
    """Fit the regression suite over (context length, validation CE, id) runs.

    ``runs`` is an iterable of records; each record is (l, ce, id) where id
    may be an IdMeasurement or a plain number (theoretical dimension).
    """
    rows = []
    for rec in runs:
        l, ce, id_val = rec
        if isinstance(id_val, IdMeasurement):
            id_val = id_val.measured_id
        rows.append((int(l), float(ce), float(id_val)))
    if len(rows) < 4:
        raise ValueError("need at least 4 context lengths for the fit bundle")
    rows.sort(key=lambda r: r[0])
    ls = np.array([r[0] for r in rows], dtype=float)
    ces = np.array([r[1] for r in rows])
    ids = np.array([r[2] for r in rows])
    return CeIdReport(
        ce_vs_id=fit_linear(ids, ces),
        id_vs_l=fit_power_law(ls, ids),
        ce_vs_l=fit_power_law(ls, ces),
        context_lengths=tuple(int(l) for l in ls),
        ces=tuple(float(c) for c in ces),
        ids=tuple(float(i) for i in ids),
    )


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def threshold_sweep_rows(spectra_by_l: dict[int, EigenSpectrum], thresholds,
                         entropies: dict[int, float] | None = None,
                         ces: dict[int, float] | None = None) -> list[dict]:
    """One row per (context length, threshold): measured id plus optional
    entropy and CE columns carried through for reporting."""
    rows = []
    for l in sorted(spectra_by_l):
        spec = spectra_by_l[l]
        for thr in thresholds:
            rows.append({
                "context_length": l,
                "threshold": float(thr),
                "measured_id": measure_id(spec, thr).measured_id,
                "entropy": None if entropies is None else entropies.get(l),
                "ce": None if ces is None else ces.get(l),
            })
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["context_length", "threshold", "measured_id", "entropy", "ce"])
        for r in rows:
            writer.writerow([
                r["context_length"],
                repr(float(r["threshold"])),
                r["measured_id"],
                "" if r.get("entropy") is None else repr(float(r["entropy"])),
                "" if r.get("ce") is None else repr(float(r["ce"])),
            ])


def default_thresholds(n: int = 50) -> np.ndarray:
    lo, hi = DEFAULT_THRESHOLD_RANGE
    return np.geomspace(lo, hi, n)
