"""Unbiased Monte Carlo estimation on a one-bounce toy scene.

The scene pairs a target density f (the reflectance role) with an emitter
that defines both the incident radiance field and an analytic sampling
distribution. Estimators: reparameterized sampling through a trained model,
emitter importance sampling, their power-heuristic MIS combination, and the
uniform-disk baseline. A convergence harness records MSE against the
quadrature oracle over sample counts.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from .pdfnet import PdfModel, pdf_eval
from .reparam import DrawBatch, SamplerModel, draw_samples
from .targets import Prior, TargetDensity, _omega_rows, quadrature_integral

_CHUNK = 1 << 18


class UniformDiskEmitter:
    """Constant radiance over the disk; pdf is exactly 1/pi."""

    def __init__(self, radiance: float = 1.0):
        if radiance < 0:
            raise ValueError("radiance must be >= 0")
        self._radiance = float(radiance)

    def pdf(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(u)
        return np.full(u.shape[0], 1.0 / np.pi)

    def radiance(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(u)
        return np.full(u.shape[0], self._radiance)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        r = np.sqrt(rng.uniform(size=n))
        theta = 2.0 * np.pi * rng.uniform(size=n)
        return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


class GaussianSpotEmitter:
    """Gaussian spot truncated to the disk.

    The sampling pdf is the spot shape renormalized over the disk (cached
    quadrature constant); emitted radiance is ``power`` times the shape, so
    the pdf is positive wherever the radiance is.
    """

    def __init__(self, center=(0.5, 0.0), sigma: float = 0.25, power: float = 1.0):
        self.center = np.asarray(center, dtype=np.float64)
        if self.center.shape != (2,) or np.dot(self.center, self.center) >= 1.0:
            raise ValueError("spot center must lie inside the unit disk")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)
        self.power = float(power)
        self._norm = self._disk_mass(resolution=512)

    def _shape(self, u: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(u) - self.center
        return np.exp(-0.5 * np.sum(d * d, axis=1) / (self.sigma**2))

    def _disk_mass(self, resolution: int) -> float:
        nr, nt = resolution, 2 * resolution
        dr, dt = 1.0 / nr, 2.0 * np.pi / nt
        r = (np.arange(nr) + 0.5) * dr
        th = (np.arange(nt) + 0.5) * dt
        rg, tg = np.meshgrid(r, th, indexing="ij")
        pts = np.column_stack([(rg * np.cos(tg)).ravel(), (rg * np.sin(tg)).ravel()])
        return float(np.sum(self._shape(pts) * rg.ravel()) * dr * dt)

    def pdf(self, u: np.ndarray) -> np.ndarray:
        return self._shape(u) / self._norm

    def radiance(self, u: np.ndarray) -> np.ndarray:
        return self.power * self._shape(u)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # rejection from the untruncated Gaussian; acceptance region is the disk
        out = np.empty((n, 2))
        got = 0
        while got < n:
            cand = self.center + self.sigma * rng.standard_normal((max(n - got, 64), 2))
            keep = cand[np.sum(cand * cand, axis=1) < 1.0]
            take = min(keep.shape[0], n - got)
            out[got : got + take] = keep[:take]
            got += take
        return out


@dataclass
class ToyScene:
    """One-bounce scene: target density f plus an emitter (L_i = L_e)."""

    target: TargetDensity
    emitter: object = field(default_factory=UniformDiskEmitter)

    def radiance(self, u: np.ndarray) -> np.ndarray:
        return self.emitter.radiance(u)

    def reference(self, cond=None, resolution: int = 512) -> float:
        """Quadrature oracle for the scene integral of L_e(u) f(u) du."""
        return quadrature_integral(self.target, cond, weight_fn=self.emitter.radiance, resolution=resolution)


@dataclass
class Estimate:
    mean: float
    sample_variance: float
    n: int

    def __post_init__(self):
        if self.sample_variance < 0:
            raise ValueError("sample variance must be >= 0")

    @property
    def stderr(self) -> float:
        return float(np.sqrt(self.sample_variance / self.n))


def _estimate_from_values(values: np.ndarray) -> Estimate:
    n = values.size
    mean = float(values.mean())
    var = float(values.var(ddof=1)) if n > 1 else 0.0
    return Estimate(mean=mean, sample_variance=var, n=n)


def estimate_from_batch(batch: DrawBatch, scene: ToyScene, cond=None) -> Estimate:
    """Mean of L(u) f(u) det / q over an existing draw batch."""
    omega = _omega_rows(cond, batch.u.shape[0])
    f = scene.target.eval_values(batch.u, omega)
    vals = scene.radiance(batch.u) * f * batch.det_j / batch.q
    return _estimate_from_values(vals)


def estimate_reparam(model: SamplerModel, scene: ToyScene, cond, n: int, seed) -> Estimate:
    """Single-strategy estimator through the learned reparameterization."""
    if n < 1:
        raise ValueError("n must be >= 1")
    batch = draw_samples(model, cond, n, seed)
    if np.any(batch.q == 0.0):
        raise FloatingPointError("prior produced a zero-density draw")
    return estimate_from_batch(batch, scene, cond)


def estimate_emitter(scene: ToyScene, cond, n: int, seed) -> Estimate:
    """Single-strategy estimator by emitter importance sampling."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    u = scene.emitter.sample(n, rng)
    omega = _omega_rows(cond, n)
    f = scene.target.eval_values(u, omega)
    vals = scene.radiance(u) * f / scene.emitter.pdf(u)
    return _estimate_from_values(vals)


def power_heuristic(p: float, p_e: float):
    """Power-heuristic weights (w, w_e) with w + w_e = 1 exactly."""
    p = np.asarray(p, dtype=np.float64)
    p_e = np.asarray(p_e, dtype=np.float64)
    if np.any(p < 0) or np.any(p_e < 0):
        raise ValueError("pdf values must be >= 0")
    if np.any(p + p_e == 0.0):
        raise ValueError("power heuristic undefined when both pdfs are zero")
    w = p * p / (p * p + p_e * p_e)
    return w, 1.0 - w


def _pdf_fn(pmodel, cond):
    if isinstance(pmodel, PdfModel):
        return lambda u: pdf_eval(pmodel, u, cond)
    if callable(pmodel):
        return lambda u: np.asarray(pmodel(u), dtype=np.float64)
    value = float(pmodel)
    if value <= 0:
        raise ValueError("a constant pdf stand-in must be strictly positive")
    return lambda u: np.full(np.atleast_2d(u).shape[0], value)


def estimate_mis(model: SamplerModel, pmodel, scene: ToyScene, cond, n: int, seed) -> Estimate:
    """Two-strategy MIS estimate over n sample pairs.

    Per pair: one emitter draw weighted by w_e = p_e^2 / (p_hat^2 + p_e^2)
    with the usual L f / p_e quotient, plus one model draw whose main
    quotient uses the exact f |det| / q factor; the approximate pdf enters
    the weights only, so any strictly positive stand-in (a PdfModel, a
    callable, or a constant) leaves the estimator unbiased.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    phat = _pdf_fn(pmodel, cond)
    ss = np.random.SeedSequence(seed)
    em_seed, br_seed = ss.spawn(2)
    rng_e = np.random.default_rng(em_seed)
    batch = draw_samples(model, cond, n, br_seed)

    values = np.empty(n)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        m = hi - lo
        omega = _omega_rows(cond, m)

        ue = scene.emitter.sample(m, rng_e)
        pe_e = scene.emitter.pdf(ue)
        w_b_at_e, w_e = power_heuristic(phat(ue), pe_e)
        fe = scene.target.eval_values(ue, omega)
        contrib_e = w_e * scene.radiance(ue) * fe / pe_e

        ub = batch.u[lo:hi]
        w_b, _ = power_heuristic(phat(ub), scene.emitter.pdf(ub))
        fb = scene.target.eval_values(ub, omega)
        contrib_b = w_b * scene.radiance(ub) * fb * batch.det_j[lo:hi] / batch.q[lo:hi]

        values[lo:hi] = contrib_e + contrib_b
    return _estimate_from_values(values)


def baseline_uniform_sample(cond, n: int, seed) -> DrawBatch:
    """Uniform-area disk draws with constant pdf 1/pi, as a DrawBatch."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    r = np.sqrt(rng.uniform(size=n))
    theta = 2.0 * np.pi * rng.uniform(size=n)
    u = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    return DrawBatch(z=u.copy(), u=u, det_j=np.ones(n), q=np.full(n, 1.0 / np.pi))


@dataclass
class ConvergenceRecord:
    """(spp, mse, seconds) rows plus the fitted log-log slope."""

    spps: np.ndarray
    mses: np.ndarray
    seconds: np.ndarray

    def __post_init__(self):
        self.spps = np.asarray(self.spps, dtype=np.int64)
        self.mses = np.asarray(self.mses, dtype=np.float64)
        self.seconds = np.asarray(self.seconds, dtype=np.float64)
        if self.spps.size == 0:
            raise ValueError("at least one spp value is required")
        if np.any(np.diff(self.spps) <= 0):
            raise ValueError("spp values must be strictly increasing")

    def loglog_slope(self) -> float:
        """Least-squares slope of log(mse) against log(spp)."""
        x = np.log(self.spps.astype(np.float64))
        y = np.log(self.mses)
        coef = np.polyfit(x, y, 1)
        return float(coef[0])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("spp,mse,seconds\n")
        for s, m, t in zip(self.spps, self.mses, self.seconds):
            buf.write(f"{s},{m:.17g},{t:.17g}\n")
        return buf.getvalue()


def convergence_curve(estimate_fn, reference: float, spps, trials: int, seed) -> ConvergenceRecord:
    """MSE against a fixed reference for each sample count.

    ``estimate_fn(n, seed) -> Estimate`` runs one trial; per-spp MSE is the
    mean squared error over ``trials`` independently seeded runs. Wall time
    per spp row is recorded alongside.
    """
    spps = [int(s) for s in spps]
    if len(spps) == 0:
        raise ValueError("spp list must not be empty")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    ss = np.random.SeedSequence(seed)
    trial_seeds = ss.spawn(len(spps) * trials)
    mses = []
    times = []
    for i, spp in enumerate(spps):
        t0 = time.perf_counter()
        errs = []
        for t in range(trials):
            est = estimate_fn(spp, trial_seeds[i * trials + t])
            errs.append((est.mean - reference) ** 2)
        times.append(time.perf_counter() - t0)
        mses.append(float(np.mean(errs)))
    return ConvergenceRecord(spps=np.array(spps), mses=np.array(mses), seconds=np.array(times))
