"""The reparameterization sampler.

A small MLP T maps prior points z (plus an encoded conditioning direction)
to the target domain. On the line the map is ``u = net(z) (+ z)``; on the
disk the raw 3-vector output is softplus-constrained to the upper half
space, normalized, and projected to its first two components, which keeps
every sample strictly inside the unit disk and the whole map C^1.

Training minimizes the negative log of the defensively mixed reparameterized
integrand

    (1 - alpha) * f(T(z)) * pos(det J_T(z)) + alpha * f(I(z)) * |det J_I(z)|

where ``pos`` is max(., 0) for the orientation-penalizing upper-bound loss
and |.| for the plain negative-log-likelihood variant, and I is a fixed
analytic map covering the domain with strictly positive Jacobian. The
Jacobian determinant is produced by forward-mode tangents, and its parameter
gradient by reverse mode straight through the tangent computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import nnet
from .nnet import MlpParams, MlpSpec, TrainingDivergedError
from .targets import GgxDisk2D, Prior, TargetDensity, _omega_rows, sample_conditions

LOG_CLAMP = 1e-30
# floor on the softplus-constrained vertical component: keeps |u| strictly
# below 1 in float64 even when the raw output is very negative
H_MIN = 1e-3
_CHUNK = 1 << 18

DOMAIN_DIMS = {"line1d": 1, "disk2d": 2}


@dataclass
class SamplerModel:
    """Reparameterization network plus its domain map configuration."""

    net: MlpParams
    domain: str
    prior: Prior
    cond_num_freqs: int | None = None
    alpha: float = 0.0
    skip_identity: bool = False

    def __post_init__(self):
        if self.domain not in DOMAIN_DIMS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.prior.dim != self.dim:
            raise ValueError("prior dimension does not match the domain")
        if self.net.spec.in_dim != self.input_dim:
            raise ValueError(
                f"network input dim {self.net.spec.in_dim} != expected {self.input_dim}"
            )
        if self.net.spec.out_dim != self.raw_out_dim:
            raise ValueError(
                f"network output dim {self.net.spec.out_dim} != expected {self.raw_out_dim}"
            )

    @property
    def dim(self) -> int:
        return DOMAIN_DIMS[self.domain]

    @property
    def raw_out_dim(self) -> int:
        return 3 if self.domain == "disk2d" else 1

    @property
    def conditional(self) -> bool:
        return self.cond_num_freqs is not None

    @property
    def cond_dim(self) -> int:
        return 2 * (1 + 2 * self.cond_num_freqs) if self.conditional else 0

    @property
    def input_dim(self) -> int:
        return self.dim + self.cond_dim


def new_sampler(
    domain: str,
    prior: Prior | None = None,
    *,
    conditional: bool = False,
    hidden_layers: int = 2,
    hidden_features: int = 16,
    init: str | None = None,
    skip_identity: bool | None = None,
    alpha: float | None = None,
    cond_num_freqs: int = 4,
    seed=0,
) -> SamplerModel:
    """Build a sampler with the standard small architecture.

    Domain-specific defaults: the line uses a skip connection (so identity
    init yields T = id) and no defensive mixing; the disk has no meaningful
    identity through the normalization map and mixes the defensive term with
    weight 1e-3.
    """
    if domain not in DOMAIN_DIMS:
        raise ValueError(f"unknown domain {domain!r}")
    dim = DOMAIN_DIMS[domain]
    if prior is None:
        prior = Prior(kind="std_normal", dim=dim)
    if skip_identity is None:
        skip_identity = domain == "line1d"
    if alpha is None:
        alpha = 1e-3 if domain == "disk2d" else 0.0
    if init is None:
        init = "identity" if domain == "line1d" else "standard"
    cond_freqs = cond_num_freqs if conditional else None
    cond_dim = 2 * (1 + 2 * cond_num_freqs) if conditional else 0
    sizes = (dim + cond_dim,) + (hidden_features,) * hidden_layers + (3 if domain == "disk2d" else 1,)
    spec = MlpSpec(layer_sizes=sizes, hidden_activation="silu", output_activation="none", init=init)
    return SamplerModel(
        net=nnet.init_params(spec, seed),
        domain=domain,
        prior=prior,
        cond_num_freqs=cond_freqs,
        alpha=alpha,
        skip_identity=skip_identity,
    )


@dataclass
class TransformResult:
    u: np.ndarray
    det_j: float | np.ndarray


@dataclass
class DrawBatch:
    """Inference samples: prior points, mapped points, |det J|, prior pdf."""

    z: np.ndarray
    u: np.ndarray
    det_j: np.ndarray
    q: np.ndarray
    neg_det_fraction: float = 0.0


@dataclass
class TrainConfig:
    steps: int = 50000
    batch_conditions: int = 1024
    batch_z: int = 1024
    learning_rate: float = 5e-4
    seed: int = 0
    max_grad_norm: float | None = None
    loss: str = "rep_prime"

    def __post_init__(self):
        if self.steps < 1 or self.batch_conditions < 1 or self.batch_z < 1:
            raise ValueError("steps and batch sizes must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss not in ("rep_prime", "nll"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class TrainLog:
    losses: np.ndarray
    clamped_fractions: np.ndarray


# ---------------------------------------------------------------------------
# defensive map
# ---------------------------------------------------------------------------


def defensive_map(z: np.ndarray, dim: int | None = None) -> TransformResult:
    """I(z) = z / sqrt(z.z + 1); covers the domain with positive Jacobian.

    det J is (z.z + 1)^-2 on the disk and (z^2 + 1)^-3/2 on the line.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    if dim is None:
        dim = zb.shape[1]
    if zb.shape[1] != dim:
        raise ValueError(f"points must have {dim} components")
    s = np.sum(zb * zb, axis=1)
    u = zb / np.sqrt(s + 1.0)[:, None]
    det = (s + 1.0) ** -2.0 if dim == 2 else (s + 1.0) ** -1.5
    if single:
        return TransformResult(u=u[0], det_j=float(det[0]))
    return TransformResult(u=u, det_j=det)


# ---------------------------------------------------------------------------
# the z -> u map with forward-mode tangents and its reverse pass
# ---------------------------------------------------------------------------


def _assemble_input(model: SamplerModel, z: np.ndarray, omega):
    if model.conditional:
        if omega is None:
            raise ValueError("model is conditional; a condition is required")
        enc = nnet.positional_encode(omega, model.cond_num_freqs)
        return np.concatenate([z, enc], axis=1)
    return z


def _transform_core(model: SamplerModel, z: np.ndarray, omega, keep_cache: bool):
    """Map a batch of prior points; returns (u, signed det, cache).

    Tangents use layout (k, n, d): slot k holds d/dz_k of each output
    component, matching the network's stacked dual representation.
    """
    dim = model.dim
    x = _assemble_input(model, z, omega)
    y, ty, net_cache = nnet._dual_forward(model.net, x, list(range(dim)), keep_cache)

    if model.domain == "line1d":
        if model.skip_identity:
            u = y + z
            tu = ty + 1.0
        else:
            u, tu = y, ty
        det = tu[0, :, 0]
        cache = (x, z, net_cache, None) if keep_cache else None
        return u, det, cache

    # disk2d: optional skip on the in-plane components, softplus on the
    # vertical one, then normalize and project.
    if model.skip_identity:
        y = y.copy()
        ty = ty.copy()
        y[:, :2] += z
        ty[0, :, 0] += 1.0
        ty[1, :, 1] += 1.0
    h = y.copy()
    sig = expit(y[:, 2])
    h[:, 2] = np.logaddexp(0.0, y[:, 2]) + H_MIN
    th = ty.copy()
    th[:, :, 2] *= sig[None, :]

    s = np.sum(h * h, axis=1)
    ts = 2.0 * np.einsum("nm,knm->kn", h, th)
    w = s**-0.5
    tw = -0.5 * (s**-1.5)[None, :] * ts
    n_vec = h * w[:, None]
    tn = th * w[None, :, None] + h[None, :, :] * tw[:, :, None]
    u = n_vec[:, :2]
    tu = tn[:, :, :2]
    det = tu[0, :, 0] * tu[1, :, 1] - tu[0, :, 1] * tu[1, :, 0]
    cache = (x, z, net_cache, (y, ty, h, th, sig, s, ts, w, tw, tu)) if keep_cache else None
    return u, det, cache


def _transform_backward(model: SamplerModel, cache, gu: np.ndarray, gdet: np.ndarray):
    """Parameter gradient given upstream d loss/du and d loss/d det.

    The determinant cofactor expansion turns gdet into tangent upstreams;
    the disk output map then needs the saved normalization intermediates to
    propagate both the primal and tangent adjoints into the network.
    """
    x, z, net_cache, disk_cache = cache
    dim = model.dim
    n = x.shape[0]

    if model.domain == "line1d":
        gstack = np.empty((2, n, 1))
        gstack[0] = gu
        gstack[1] = gdet[:, None]
        return nnet._backward_stacked(model.net, list(range(dim)), gstack, net_cache)

    y, ty, h, th, sig, s, ts, w, tw, tu = disk_cache
    # det = tu[0,:,0] tu[1,:,1] - tu[0,:,1] tu[1,:,0]
    gtu = np.empty((2, n, 2))
    gtu[0, :, 0] = gdet * tu[1, :, 1]
    gtu[1, :, 1] = gdet * tu[0, :, 0]
    gtu[0, :, 1] = -gdet * tu[1, :, 0]
    gtu[1, :, 0] = -gdet * tu[0, :, 1]

    gn = np.zeros((n, 3))
    gn[:, :2] = gu
    gtn = np.zeros((2, n, 3))
    gtn[:, :, :2] = gtu

    # n_vec = h * w ; tn = th * w + h x tw
    gh = w[:, None] * gn + np.einsum("kn,knm->nm", tw, gtn)
    gw = np.einsum("nm,nm->n", h, gn) + np.einsum("knm,knm->n", th, gtn)
    gth = w[None, :, None] * gtn
    gtw = np.einsum("nm,knm->kn", h, gtn)

    # w = s^-1/2 ; tw = -1/2 s^-3/2 ts
    gs = -0.5 * s**-1.5 * gw + 0.75 * (s**-2.5) * np.einsum("kn,kn->n", ts, gtw)
    gts = -0.5 * (s**-1.5)[None, :] * gtw

    # s = sum h^2 ; ts = 2 h . th
    gh += 2.0 * h * gs[:, None] + 2.0 * np.einsum("kn,knm->nm", gts, th)
    gth += 2.0 * h[None, :, :] * gts[:, :, None]

    # softplus on the vertical component: h2 = softplus(y2), th2 = sig * ty2
    gy = gh
    gty = gth
    gy[:, 2] = sig * gh[:, 2] + (sig * (1.0 - sig)) * np.einsum("kn,kn->n", ty[:, :, 2], gth[:, :, 2])
    gty[:, :, 2] = sig[None, :] * gth[:, :, 2]
    # skip connection adds constants only; adjoints pass through unchanged
    gstack = np.empty((3, n, 3))
    gstack[0] = gy
    gstack[1:] = gty
    return nnet._backward_stacked(model.net, list(range(dim)), gstack, net_cache)


def transform(model: SamplerModel, z, cond=None) -> TransformResult:
    """Map prior point(s) to the domain with the signed Jacobian determinant."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim <= 1
    zb = np.atleast_1d(z).reshape(1, -1) if single else z
    if zb.shape[1] != model.dim:
        raise ValueError(f"z must have {model.dim} components")
    omega = _omega_rows(cond, zb.shape[0])
    with np.errstate(invalid="ignore", over="ignore"):
        u, det, _ = _transform_core(model, zb, omega, keep_cache=False)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(det))):
        raise FloatingPointError("non-finite transform output")
    if single:
        u0 = u[0, 0] if model.dim == 1 else u[0]
        return TransformResult(u=u0, det_j=float(det[0]))
    return TransformResult(u=u, det_j=det)


def transform_batch(model: SamplerModel, z: np.ndarray, omega=None):
    """Batch variant returning bare arrays (u, signed det)."""
    z = np.asarray(z, dtype=np.float64)
    u, det, _ = _transform_core(model, z, _omega_rows(omega, z.shape[0]), keep_cache=False)
    return u, det


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _loss_terms_and_cache(model, target, z, omega, alpha, det_mode, keep_cache):
    u, det, cache = _transform_core(model, z, omega, keep_cache)
    f_vals, f_grads = target._eval(u, omega, need_grad=keep_cache)
    detpos = np.maximum(det, 0.0) if det_mode == "pos" else np.abs(det)
    arg = (1.0 - alpha) * f_vals * detpos
    if alpha > 0.0:
        i_res = defensive_map(z, model.dim)
        arg = arg + alpha * target.eval_values(i_res.u, omega) * i_res.det_j
    live = arg > LOG_CLAMP
    arg = np.maximum(arg, LOG_CLAMP)
    terms = -np.log(arg)
    return terms, live, arg, (u, det, detpos, f_vals, f_grads, cache)


def loss_terms(model: SamplerModel, target: TargetDensity, z: np.ndarray, cond=None, *, det_mode: str = "pos", alpha: float | None = None) -> np.ndarray:
    """Per-sample negative-log terms of the chosen loss (no gradients)."""
    if alpha is None:
        alpha = model.alpha
    omega = _omega_rows(cond, np.asarray(z).shape[0])
    terms, _, _, _ = _loss_terms_and_cache(model, target, np.asarray(z, dtype=np.float64), omega, alpha, det_mode, keep_cache=False)
    return terms


def _loss_and_grad(model, target, z, omega, alpha, det_mode):
    n = z.shape[0]
    terms, live, arg, (u, det, detpos, f_vals, f_grads, cache) = _loss_terms_and_cache(
        model, target, z, omega, alpha, det_mode, keep_cache=True
    )
    loss = float(np.mean(terms))
    darg = -live.astype(np.float64) / (arg * n)
    gu = ((1.0 - alpha) * detpos * darg)[:, None] * f_grads
    if det_mode == "pos":
        ddet = (det > 0.0).astype(np.float64)
    else:
        ddet = np.sign(det)
    gdet = darg * (1.0 - alpha) * f_vals * ddet
    grads = _transform_backward(model, cache, gu, gdet)
    stats = {"clamped_fraction": 1.0 - float(np.mean(live)), "neg_det_fraction": float(np.mean(det < 0.0))}
    return loss, grads, stats


def loss_rep_prime(model: SamplerModel, target: TargetDensity, prior: Prior, cond_batch, z_batch):
    """Upper-bound loss (positive-part determinant) and its parameter gradient."""
    z = np.asarray(z_batch, dtype=np.float64)
    if prior.dim != model.dim:
        raise ValueError("prior dimension does not match the model")
    omega = _omega_rows(cond_batch, z.shape[0])
    loss, grads, _ = _loss_and_grad(model, target, z, omega, model.alpha, "pos")
    return loss, grads


def loss_nll(model: SamplerModel, target: TargetDensity, prior: Prior, cond_batch, z_batch):
    """Plain negative log likelihood: |det|, no defensive mixing."""
    z = np.asarray(z_batch, dtype=np.float64)
    if prior.dim != model.dim:
        raise ValueError("prior dimension does not match the model")
    omega = _omega_rows(cond_batch, z.shape[0])
    loss, grads, _ = _loss_and_grad(model, target, z, omega, 0.0, "abs")
    return loss, grads


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------


def train_sampler(
    target: TargetDensity,
    prior: Prior,
    config: TrainConfig,
    *,
    model: SamplerModel | None = None,
    conditional: bool | None = None,
    **model_kwargs,
) -> tuple[SamplerModel, TrainLog]:
    """Run the sampler training loop; deterministic given config.seed.

    A fresh default model is built unless one is passed in; extra keyword
    arguments go to ``new_sampler``.
    """
    nnet.tune_allocator()
    if model is None:
        domain = "line1d" if target.dim == 1 else "disk2d"
        if conditional is None:
            conditional = isinstance(target, _CONDITIONAL_KINDS)
        model = new_sampler(domain, prior, conditional=conditional, seed=config.seed, **model_kwargs)
    elif model.prior != prior:
        raise ValueError("model prior differs from the training prior")
    det_mode = "pos" if config.loss == "rep_prime" else "abs"
    alpha = model.alpha if config.loss == "rep_prime" else 0.0
    rng = np.random.default_rng(config.seed)
    opt = nnet.init_optimizer(model.net, config.learning_rate, config.max_grad_norm)
    losses = np.empty(config.steps)
    clamped = np.empty(config.steps)
    total = config.batch_conditions * config.batch_z
    for step in range(config.steps):
        if model.conditional:
            conds = sample_conditions(config.batch_conditions, rng)
            omega = np.repeat(conds, config.batch_z, axis=0)
        else:
            omega = None
        z = prior.sample(total, rng)
        loss, grads, stats = _loss_and_grad(model, target, z, omega, alpha, det_mode)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        nnet.adam_step(opt, model.net, grads)
        losses[step] = loss
        clamped[step] = stats["clamped_fraction"]
    return model, TrainLog(losses=losses, clamped_fractions=clamped)


def draw_samples(model: SamplerModel, cond, n: int, seed) -> DrawBatch:
    """Inference draws: z ~ prior, u = T(z); the defensive map is never mixed in.

    det_j is reported as |det|; the raw sign only feeds the health metric.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    nnet.tune_allocator()
    rng = np.random.default_rng(seed)
    z = model.prior.sample(n, rng)
    q = model.prior.pdf(z)
    u = np.empty((n, model.dim))
    det = np.empty(n)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        omega = _omega_rows(cond, hi - lo)
        u[lo:hi], det[lo:hi] = _transform_core(model, z[lo:hi], omega, keep_cache=False)[:2]
    neg = float(np.mean(det < 0.0))
    return DrawBatch(z=z, u=u, det_j=np.abs(det), q=q, neg_det_fraction=neg)


_CONDITIONAL_KINDS = (GgxDisk2D,)
