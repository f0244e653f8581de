"""Pdf-approximation network for MIS weights.

A 1-hidden-layer ReLU MLP with exponential output fits the sampler's
implied density: its training loss pushes p_hat(T(z)) * |det J_T(z)|
toward q(z), so at the optimum p_hat matches the pushforward of the prior.
The exponential output keeps p_hat strictly positive everywhere, which is
all the power heuristic needs; no normalization is enforced (MIS stays
unbiased regardless).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nnet
from .nnet import MlpParams, MlpSpec, TrainingDivergedError
from .reparam import DOMAIN_DIMS, SamplerModel, TrainConfig, TrainLog, _transform_core
from .targets import Prior, _omega_rows, sample_conditions


@dataclass
class PdfModel:
    net: MlpParams
    domain: str
    cond_num_freqs: int | None = None

    def __post_init__(self):
        if self.domain not in DOMAIN_DIMS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.net.spec.in_dim != self.input_dim or self.net.spec.out_dim != 1:
            raise ValueError("network shape does not match the pdf model domain")

    @property
    def dim(self) -> int:
        return DOMAIN_DIMS[self.domain]

    @property
    def conditional(self) -> bool:
        return self.cond_num_freqs is not None

    @property
    def input_dim(self) -> int:
        cond = 2 * (1 + 2 * self.cond_num_freqs) if self.conditional else 0
        return self.dim + cond


def new_pdf_model(
    domain: str,
    *,
    conditional: bool = False,
    hidden_features: int = 16,
    cond_num_freqs: int = 4,
    seed=0,
) -> PdfModel:
    dim = DOMAIN_DIMS[domain]
    cond_dim = 2 * (1 + 2 * cond_num_freqs) if conditional else 0
    spec = MlpSpec(
        layer_sizes=(dim + cond_dim, hidden_features, 1),
        hidden_activation="relu",
        output_activation="exp",
    )
    return PdfModel(
        net=nnet.init_params(spec, seed),
        domain=domain,
        cond_num_freqs=cond_num_freqs if conditional else None,
    )


def for_sampler(sampler: SamplerModel, *, hidden_features: int = 16, seed=0) -> PdfModel:
    """Pdf model with domain and condition encoding mirrored from a sampler."""
    return new_pdf_model(
        sampler.domain,
        conditional=sampler.conditional,
        hidden_features=hidden_features,
        cond_num_freqs=sampler.cond_num_freqs or 4,
        seed=seed,
    )


def _inputs(pmodel: PdfModel, u: np.ndarray, omega):
    if pmodel.conditional:
        if omega is None:
            raise ValueError("pdf model is conditional; a condition is required")
        enc = nnet.positional_encode(omega, pmodel.cond_num_freqs)
        return np.concatenate([u, enc], axis=1)
    return u


def pdf_eval(pmodel: PdfModel, u, cond=None):
    """Strictly positive approximate density at domain point(s)."""
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim <= 1
    ub = np.atleast_1d(u).reshape(1, -1) if single else u
    if ub.shape[1] != pmodel.dim:
        raise ValueError(f"points must have {pmodel.dim} components")
    if pmodel.dim == 2 and np.any(np.sum(ub * ub, axis=1) >= 1.0):
        raise ValueError("point outside the open unit disk")
    x = _inputs(pmodel, ub, _omega_rows(cond, ub.shape[0]))
    vals = nnet.forward(pmodel.net, x)[:, 0]
    return float(vals[0]) if single else vals


def loss_pdf(pmodel: PdfModel, sampler: SamplerModel, prior: Prior, cond_batch, z_batch):
    """Mean squared residual (p_hat(T(z)) |det J_T| - q(z))^2 and its gradient.

    Gradients flow into the pdf network only; the sampler is treated as a
    frozen data source.
    """
    z = np.asarray(z_batch, dtype=np.float64)
    n = z.shape[0]
    omega = _omega_rows(cond_batch, n)
    u, det, _ = _transform_core(sampler, z, omega, keep_cache=False)
    absdet = np.abs(det)
    q = prior.pdf(z)
    x = _inputs(pmodel, u, omega)
    phat = nnet.forward(pmodel.net, x)[:, 0]
    resid = phat * absdet - q
    loss = float(np.mean(resid * resid))
    upstream = (2.0 / n) * (resid * absdet)[:, None]
    grads = nnet.backward(pmodel.net, x, upstream)
    return loss, grads


def train_pdf(
    sampler: SamplerModel,
    prior: Prior,
    config: TrainConfig,
    *,
    pmodel: PdfModel | None = None,
    hidden_features: int = 16,
) -> tuple[PdfModel, TrainLog]:
    """Fit the pdf network against a frozen sampler; deterministic given seed."""
    nnet.tune_allocator()
    if pmodel is None:
        pmodel = for_sampler(sampler, hidden_features=hidden_features, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    opt = nnet.init_optimizer(pmodel.net, config.learning_rate, config.max_grad_norm)
    losses = np.empty(config.steps)
    total = config.batch_conditions * config.batch_z
    for step in range(config.steps):
        if sampler.conditional:
            conds = sample_conditions(config.batch_conditions, rng)
            omega = np.repeat(conds, config.batch_z, axis=0)
        else:
            omega = None
        z = prior.sample(total, rng)
        loss, grads = loss_pdf(pmodel, sampler, prior, omega, z)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        nnet.adam_step(opt, pmodel.net, grads)
        losses[step] = loss
    return pmodel, TrainLog(losses=losses, clamped_fractions=np.zeros(config.steps))
