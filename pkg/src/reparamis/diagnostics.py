"""Histogram, KL-divergence, coverage, and injectivity checks.

These back every quantitative claim about a trained sampler: binned sample
densities are compared against grid-normalized reference densities, and the
signed Jacobian determinant is scanned over the prior's effective support.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .pdfnet import PdfModel, pdf_eval
from .reparam import SamplerModel, transform_batch
from .targets import TargetDensity

REF_FLOOR = 1e-12


@dataclass
class DensityHistogram:
    """Binned sample density over an interval or the disk-in-square grid.

    ``density`` is count / (n_total * bin_area); summing density * area over
    unmasked bins gives the fraction of samples that landed inside them.
    """

    domain: str  # "line1d" or "disk2d"
    lo: float
    hi: float
    bins: int
    counts: np.ndarray
    density: np.ndarray
    mask: np.ndarray  # True where the bin is part of the domain
    n_total: int
    n_outside: int

    @property
    def bin_area(self) -> float:
        w = (self.hi - self.lo) / self.bins
        return w if self.domain == "line1d" else w * w

    def centers(self) -> np.ndarray:
        """Centers of unmasked bins, shape (m,) in 1D or (m, 2) in 2D."""
        edges = np.linspace(self.lo, self.hi, self.bins + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        if self.domain == "line1d":
            return mid[self.mask]
        gx, gy = np.meshgrid(mid, mid, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        return pts[self.mask.ravel()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.domain == "line1d":
            buf.write("u,density\n")
            for c, d in zip(self.centers(), self.density[self.mask]):
                buf.write(f"{c:.17g},{d:.17g}\n")
        else:
            buf.write("u_x,u_y,density\n")
            dens = self.density.ravel()[self.mask.ravel()]
            for (cx, cy), d in zip(self.centers(), dens):
                buf.write(f"{cx:.17g},{cy:.17g},{d:.17g}\n")
        return buf.getvalue()


def histogram_samples(samples: np.ndarray, bins: int, domain) -> DensityHistogram:
    """Bin samples over an interval (domain=(lo, hi)) or the disk ("disk").

    Zero samples yield an all-zero histogram rather than an error. Samples
    outside the domain (or in masked rim cells) are tallied in ``n_outside``.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    samples = np.asarray(samples, dtype=np.float64)
    if domain == "disk":
        lo, hi = -1.0, 1.0
        pts = samples.reshape(-1, 2) if samples.size else np.empty((0, 2))
        n_total = pts.shape[0]
        width = (hi - lo) / bins
        ix = np.floor((pts[:, 0] - lo) / width).astype(int)
        iy = np.floor((pts[:, 1] - lo) / width).astype(int)
        inside = (ix >= 0) & (ix < bins) & (iy >= 0) & (iy < bins)
        edges = np.linspace(lo, hi, bins + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        gx, gy = np.meshgrid(mid, mid, indexing="ij")
        mask = gx * gx + gy * gy < 1.0
        counts = np.zeros((bins, bins))
        np.add.at(counts, (ix[inside], iy[inside]), 1.0)
        counts[~mask] = 0.0
        kept = inside.copy()
        kept[inside] = mask[ix[inside], iy[inside]]
        n_outside = int(n_total - kept.sum())
        density = counts / (max(n_total, 1) * width * width)
        return DensityHistogram("disk2d", lo, hi, bins, counts, density, mask, n_total, n_outside)

    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise ValueError("interval domain needs hi > lo")
    x = samples.reshape(-1)
    n_total = x.size
    width = (hi - lo) / bins
    idx = np.floor((x - lo) / width).astype(int)
    inside = (idx >= 0) & (idx < bins)
    counts = np.bincount(idx[inside], minlength=bins).astype(np.float64)
    density = counts / (max(n_total, 1) * width)
    mask = np.ones(bins, dtype=bool)
    return DensityHistogram("line1d", lo, hi, bins, counts, density, mask, n_total, int(n_total - inside.sum()))


def _ref_values(ref, pts: np.ndarray, cond) -> np.ndarray:
    if isinstance(ref, TargetDensity):
        return np.asarray(ref.eval_values(pts, cond), dtype=np.float64)
    if isinstance(ref, PdfModel):
        return np.asarray(pdf_eval(ref, pts, cond), dtype=np.float64)
    if callable(ref):
        return np.asarray(ref(pts), dtype=np.float64)
    raise TypeError("reference must be a TargetDensity, PdfModel, or callable")


def _normalized_ref_masses(hist: DensityHistogram, ref, cond) -> np.ndarray:
    pts = hist.centers()
    if hist.domain == "line1d" and pts.ndim == 1:
        pts = pts[:, None]
    vals = _ref_values(ref, pts, cond)
    masses = vals * hist.bin_area
    total = masses.sum()
    if total <= 0:
        raise ValueError("reference density has no mass on the histogram grid")
    return masses / total


def kl_divergence(hist: DensityHistogram, ref, cond=None) -> float:
    """KL(histogram || reference) over the bin grid, in nats.

    The reference is evaluated at bin centers and normalized on the same
    grid (a midpoint quadrature of the domain). Empty histogram bins
    contribute zero; reference masses are floored at 1e-12.
    """
    p = hist.density[hist.mask] * hist.bin_area if hist.domain == "line1d" else (
        hist.density.ravel()[hist.mask.ravel()] * hist.bin_area
    )
    q = np.maximum(_normalized_ref_masses(hist, ref, cond), REF_FLOOR)
    pos = p > 0
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def coverage_check(
    samples: np.ndarray,
    target,
    cond=None,
    bins: int = 64,
    mass_threshold: float = 1e-4,
    domain=None,
) -> float:
    """Fraction of significant-mass bins that received zero samples.

    A bin is significant when its normalized reference mass is at least
    ``mass_threshold`` times the largest bin mass. 0 means full coverage;
    with no samples at all the fraction is 1 by convention.
    """
    if domain is None:
        domain = "disk" if getattr(target, "dim", 2) == 2 else None
    if domain is None:
        raise ValueError("1D coverage needs an explicit (lo, hi) domain")
    hist = histogram_samples(samples, bins, domain)
    masses = _normalized_ref_masses(hist, target, cond)
    significant = masses >= mass_threshold * masses.max()
    if hist.n_total == 0:
        return 1.0
    counts = hist.counts[hist.mask] if hist.domain == "line1d" else hist.counts.ravel()[hist.mask.ravel()]
    missed = significant & (counts == 0)
    return float(missed.sum() / max(significant.sum(), 1))


def injectivity_check(model: SamplerModel, cond=None, grid_resolution: int = 64):
    """Scan the signed determinant over the prior's effective support.

    Returns (min signed det, fraction of negative det); a healthy trained
    map has min det > 0.
    """
    pts = model.prior.grid(grid_resolution)
    _, det = transform_batch(model, pts, cond)
    return float(det.min()), float(np.mean(det < 0.0))
