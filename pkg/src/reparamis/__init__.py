"""Learned single-step importance samplers for 1D/2D densities.

A small MLP is trained to reparameterize an unnormalized target density
onto an easy-to-sample prior; the change-of-variable rule then gives
unbiased Monte Carlo estimates, and a second tiny network approximates the
sampler's pdf for multiple-importance-sampling weights.
"""

from .nnet import (
    MlpParams,
    MlpSpec,
    OptimizerState,
    TrainingDivergedError,
    adam_step,
    backward,
    forward,
    forward_with_input_jacobian,
    init_optimizer,
    init_params,
    positional_encode,
)
from .targets import (
    Condition,
    DisconnectedBimodal1D,
    GaussMix1D,
    GgxDisk2D,
    Grid2D,
    Prior,
    TargetDensity,
    eval_density_with_grad,
    prior_sample,
    quadrature_integral,
    sample_condition,
)
from .reparam import (
    DrawBatch,
    SamplerModel,
    TrainConfig,
    TrainLog,
    TransformResult,
    defensive_map,
    draw_samples,
    loss_nll,
    loss_rep_prime,
    loss_terms,
    new_sampler,
    train_sampler,
    transform,
    transform_batch,
)
from .pdfnet import PdfModel, loss_pdf, new_pdf_model, pdf_eval, train_pdf
from .estimator import (
    ConvergenceRecord,
    Estimate,
    GaussianSpotEmitter,
    ToyScene,
    UniformDiskEmitter,
    baseline_uniform_sample,
    convergence_curve,
    estimate_emitter,
    estimate_mis,
    estimate_reparam,
    power_heuristic,
)
from .diagnostics import (
    DensityHistogram,
    coverage_check,
    histogram_samples,
    injectivity_check,
    kl_divergence,
)

__version__ = "0.1.0"
