"""Priors, conditions, and differentiable unnormalized target densities.

Densities live on the real line (1D kinds) or the open unit disk (2D kinds).
Disk densities are defined against the projected-hemisphere area measure, so
the cosine factor of the usual solid-angle integrals is already absorbed; the
microfacet lobe is therefore just the reflectance evaluated at directions
lifted from disk coordinates.

All evaluators accept a single point (shape (d,)) or a batch (n, d) and are
pure; a tensor-grid midpoint quadrature provides the brute-force oracle for
normalization constants and reference integrals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dual import Dual

DEFAULT_FLOOR_EPS = 1e-7


# ---------------------------------------------------------------------------
# priors and conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prior:
    """Sampling prior: standard normal (infinite support) or a uniform box."""

    kind: str = "std_normal"
    dim: int = 1
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("std_normal", "uniform"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.dim not in (1, 2):
            raise ValueError("prior dim must be 1 or 2")
        if self.kind == "uniform" and not self.hi > self.lo:
            raise ValueError("uniform prior needs hi > lo")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "std_normal":
            return rng.standard_normal((n, self.dim))
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def pdf(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if self.kind == "std_normal":
            return np.exp(-0.5 * np.sum(z * z, axis=1)) / (2.0 * np.pi) ** (self.dim / 2.0)
        vol = (self.hi - self.lo) ** self.dim
        inside = np.all((z >= self.lo) & (z <= self.hi), axis=1)
        return inside / vol

    def grid(self, resolution: int) -> np.ndarray:
        """Evaluation grid covering the effective support (+-4 sigma or the box)."""
        if self.kind == "std_normal":
            lo, hi = -4.0, 4.0
        else:
            lo, hi = self.lo, self.hi
        axis = np.linspace(lo, hi, resolution)
        if self.dim == 1:
            return axis[:, None]
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])


def prior_sample(prior: Prior, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw n i.i.d. prior points and their pdf values."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    z = prior.sample(n, rng)
    return z, prior.pdf(z)


@dataclass(frozen=True)
class Condition:
    """Outgoing direction in projected-hemisphere coordinates, or nothing."""

    omega_o: np.ndarray | None = None

    def __post_init__(self):
        if self.omega_o is not None:
            w = np.asarray(self.omega_o, dtype=np.float64)
            if w.shape != (2,):
                raise ValueError("omega_o must be a 2-vector")
            if np.dot(w, w) > 1.0 + 1e-12:
                raise ValueError("omega_o must lie in the closed unit disk")
            object.__setattr__(self, "omega_o", w)


def sample_conditions(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform (area measure) points on the unit disk, shape (n, 2)."""
    r = np.sqrt(rng.uniform(size=n))
    theta = 2.0 * np.pi * rng.uniform(size=n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def sample_condition(seed) -> Condition:
    rng = np.random.default_rng(seed)
    return Condition(omega_o=sample_conditions(1, rng)[0])


# ---------------------------------------------------------------------------
# target densities
# ---------------------------------------------------------------------------


def _omega_rows(omega, n: int):
    if omega is None:
        return None
    if isinstance(omega, Condition):
        omega = omega.omega_o
    w = np.asarray(omega, dtype=np.float64)
    if w.ndim == 1:
        w = np.broadcast_to(w, (n, 2))
    if w.shape != (n, 2):
        raise ValueError("condition must be a 2-vector or an (n, 2) array")
    return w


class TargetDensity:
    """Base class: an unnormalized density f(u | cond) with u-gradient."""

    dim: int = 1
    floor_eps: float = DEFAULT_FLOOR_EPS

    def eval_with_grad(self, u, cond=None):
        """Density value(s) and gradient(s) with respect to u."""
        ub, single = self._check_domain(u)
        vals, grads = self._eval(ub, _omega_rows(cond, ub.shape[0]), need_grad=True)
        if single:
            return float(vals[0]), grads[0]
        return vals, grads

    def eval_values(self, u, cond=None):
        ub, single = self._check_domain(u)
        vals, _ = self._eval(ub, _omega_rows(cond, ub.shape[0]), need_grad=False)
        return float(vals[0]) if single else vals

    def _check_domain(self, u):
        u = np.asarray(u, dtype=np.float64)
        single = u.ndim == 1
        ub = u[None, :] if single else u
        if ub.ndim != 2 or ub.shape[1] != self.dim:
            raise ValueError(f"points must have {self.dim} components, got shape {u.shape}")
        if self.dim == 2 and np.any(np.sum(ub * ub, axis=1) >= 1.0):
            raise ValueError("point outside the open unit disk")
        return ub, single

    def _eval(self, ub, omega, need_grad):
        raise NotImplementedError

    def quadrature_bound(self) -> float:
        raise NotImplementedError("only 1D targets have a quadrature bound")


def eval_density_with_grad(target: TargetDensity, u, cond=None):
    return target.eval_with_grad(u, cond)


@dataclass
class GaussMix1D(TargetDensity):
    """Mixture of 1D Gaussians plus a constant floor."""

    weights: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    means: np.ndarray = field(default_factory=lambda: np.array([0.0]))
    stds: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    floor_eps: float = DEFAULT_FLOOR_EPS
    dim: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if not (self.weights.shape == self.means.shape == self.stds.shape):
            raise ValueError("weights, means, stds must have equal length")
        if np.any(self.weights < 0) or np.any(self.stds <= 0):
            raise ValueError("weights must be >= 0 and stds > 0")

    def _components(self, x):
        # (n, k) component pdf values
        zscore = (x[:, None] - self.means[None, :]) / self.stds[None, :]
        return np.exp(-0.5 * zscore * zscore) / (self.stds[None, :] * np.sqrt(2.0 * np.pi)), zscore

    def _eval(self, ub, omega, need_grad):
        x = ub[:, 0]
        comp, zscore = self._components(x)
        vals = comp @ self.weights + self.floor_eps
        if not need_grad:
            return vals, None
        dcomp = -zscore / self.stds[None, :] * comp
        grads = (dcomp @ self.weights)[:, None]
        return vals, grads

    def quadrature_bound(self) -> float:
        return float(np.max(np.abs(self.means)) + 8.0 * np.max(self.stds))


@dataclass
class DisconnectedBimodal1D(TargetDensity):
    """Two Gaussian modes with the density hard-zeroed over a central gap.

    Inside the gap both the value and the gradient are exactly zero; outside,
    the usual floor applies. Used only to exercise mode-collapse behavior.
    """

    mode_distance: float = 3.0
    std: float = 0.25
    gap_width: float = 1.5
    floor_eps: float = DEFAULT_FLOOR_EPS
    dim: int = 1

    def __post_init__(self):
        if self.gap_width >= self.mode_distance:
            raise ValueError("gap must be narrower than the mode separation")
        half = self.mode_distance / 2.0
        self._mix = GaussMix1D(
            weights=np.array([0.5, 0.5]),
            means=np.array([-half, half]),
            stds=np.array([self.std, self.std]),
            floor_eps=self.floor_eps,
        )

    def _eval(self, ub, omega, need_grad):
        x = ub[:, 0]
        alive = (np.abs(x) >= self.gap_width / 2.0).astype(np.float64)
        vals, grads = self._mix._eval(ub, None, need_grad)
        vals = vals * alive
        if need_grad:
            grads = grads * alive[:, None]
        return vals, grads

    def quadrature_bound(self) -> float:
        return self._mix.quadrature_bound()


def _sqrt(x):
    return x.sqrt() if isinstance(x, Dual) else np.sqrt(x)


def _ggx_lobe(ux, uy, ox, oy, roughness: float, f0: float):
    """Isotropic microfacet reflectance at disk coordinates.

    Trowbridge-Reitz distribution, separable Smith shadowing, Schlick
    Fresnel. The G1/cos ratios are kept grouped so the value stays finite as
    either direction approaches grazing. Works on plain arrays and Duals.
    """
    a2 = roughness * roughness
    ci = _sqrt(1.0 - (ux * ux + uy * uy))
    co = np.sqrt(np.maximum(1.0 - (ox * ox + oy * oy), 0.0))
    hx = ux + ox
    hy = uy + oy
    hz = ci + co
    hnorm = _sqrt(hx * hx + hy * hy + hz * hz)
    cos_h = hz / hnorm
    cos_d = (ux * hx + uy * hy + ci * hz) / hnorm
    denom = cos_h * cos_h * (a2 - 1.0) + 1.0
    dist = a2 / (np.pi * denom * denom)
    g1_i = 2.0 / (ci + _sqrt(ci * ci * (1.0 - a2) + a2))
    g1_o = 2.0 / (co + np.sqrt(co * co * (1.0 - a2) + a2))
    fresnel = f0 + (1.0 - f0) * (1.0 - cos_d) ** 5
    return dist * fresnel * g1_i * g1_o * 0.25


@dataclass
class GgxDisk2D(TargetDensity):
    """GGX microfacet lobe on the projected-hemisphere disk."""

    roughness: float = 0.2
    f0: float = 1.0
    floor_eps: float = DEFAULT_FLOOR_EPS
    dim: int = 2

    def __post_init__(self):
        if not 0.0 < self.roughness <= 1.0:
            raise ValueError("roughness must be in (0, 1]")
        if not 0.0 < self.f0 <= 1.0:
            raise ValueError("f0 must be in (0, 1]")

    def _eval(self, ub, omega, need_grad):
        if omega is None:
            raise ValueError("GgxDisk2D requires an outgoing-direction condition")
        ox, oy = omega[:, 0], omega[:, 1]
        if need_grad:
            ux = Dual.seed(ub[:, 0], 2, 0)
            uy = Dual.seed(ub[:, 1], 2, 1)
            out = _ggx_lobe(ux, uy, ox, oy, self.roughness, self.f0)
            return out.val + self.floor_eps, out.tan
        vals = _ggx_lobe(ub[:, 0], ub[:, 1], ox, oy, self.roughness, self.f0)
        return vals + self.floor_eps, None


@dataclass
class Grid2D(TargetDensity):
    """Bilinear interpolation of a nonnegative node grid over [-1, 1]^2.

    Node (r, c) sits at y = -1 + 2r/(rows-1), x = -1 + 2c/(cols-1); only the
    part inside the unit disk is a valid domain.
    """

    values: np.ndarray = field(default_factory=lambda: np.ones((2, 2)))
    floor_eps: float = DEFAULT_FLOOR_EPS
    dim: int = 2

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 2:
            raise ValueError("grid needs at least 2x2 nodes")
        if np.any(self.values < 0):
            raise ValueError("grid values must be nonnegative")

    @classmethod
    def from_text(cls, path, floor_eps: float = DEFAULT_FLOOR_EPS) -> "Grid2D":
        """Load from a text file: 'rows cols' then row-major values."""
        with open(path) as fh:
            tokens = fh.read().split()
        if len(tokens) < 2:
            raise ValueError(f"{path}: expected 'rows cols' header")
        rows, cols = int(tokens[0]), int(tokens[1])
        body = np.array([float(t) for t in tokens[2:]])
        if body.size != rows * cols:
            raise ValueError(f"{path}: expected {rows * cols} values, found {body.size}")
        return cls(values=body.reshape(rows, cols), floor_eps=floor_eps)

    def _eval(self, ub, omega, need_grad):
        rows, cols = self.values.shape
        # continuous node coordinates; domain is inside the disk so strictly interior
        cx = (ub[:, 0] + 1.0) * 0.5 * (cols - 1)
        cy = (ub[:, 1] + 1.0) * 0.5 * (rows - 1)
        c0 = np.clip(np.floor(cx).astype(int), 0, cols - 2)
        r0 = np.clip(np.floor(cy).astype(int), 0, rows - 2)
        tx = cx - c0
        ty = cy - r0
        v00 = self.values[r0, c0]
        v01 = self.values[r0, c0 + 1]
        v10 = self.values[r0 + 1, c0]
        v11 = self.values[r0 + 1, c0 + 1]
        vals = (
            v00 * (1 - tx) * (1 - ty)
            + v01 * tx * (1 - ty)
            + v10 * (1 - tx) * ty
            + v11 * tx * ty
        ) + self.floor_eps
        if not need_grad:
            return vals, None
        dvdx = ((v01 - v00) * (1 - ty) + (v11 - v10) * ty) * 0.5 * (cols - 1)
        dvdy = ((v10 - v00) * (1 - tx) + (v11 - v01) * tx) * 0.5 * (rows - 1)
        return vals, np.column_stack([dvdx, dvdy])


# ---------------------------------------------------------------------------
# quadrature oracle
# ---------------------------------------------------------------------------


def quadrature_integral(target: TargetDensity, cond=None, weight_fn=None, resolution: int = 256) -> float:
    """Midpoint-rule integral of weight(u) * f(u) over the target's domain.

    1D targets integrate over [-B, B] with B from the target's mixture
    parameters; 2D targets over the unit disk on a polar grid (``resolution``
    radial cells, twice that many angular cells).
    """
    if resolution < 64:
        raise ValueError("resolution must be >= 64 per axis")
    if target.dim == 1:
        bound = target.quadrature_bound()
        step = 2.0 * bound / resolution
        x = -bound + (np.arange(resolution) + 0.5) * step
        pts = x[:, None]
        vals = target.eval_values(pts, cond)
        if weight_fn is not None:
            vals = vals * np.asarray(weight_fn(pts), dtype=np.float64)
        return float(np.sum(vals) * step)

    nr, nt = resolution, 2 * resolution
    dr = 1.0 / nr
    dt = 2.0 * np.pi / nt
    r = (np.arange(nr) + 0.5) * dr
    theta = (np.arange(nt) + 0.5) * dt
    rg, tg = np.meshgrid(r, theta, indexing="ij")
    pts = np.column_stack([(rg * np.cos(tg)).ravel(), (rg * np.sin(tg)).ravel()])
    vals = target.eval_values(pts, cond)
    if weight_fn is not None:
        vals = vals * np.asarray(weight_fn(pts), dtype=np.float64)
    return float(np.sum(vals * rg.ravel()) * dr * dt)
