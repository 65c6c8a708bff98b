"""Bayesian low-rank adapters trained by backpropagation.

Library layout:

* ``linalg``    - dense float64 matrix utilities and seeded samplers;
* ``adapter``   - the variational low-rank adapter and its forward passes;
* ``kl``        - closed-form, Monte-Carlo, and full-weight KL routes;
* ``parammaps`` - square vs softplus std parameterizations and their race;
* ``network``   - frozen-backbone net with hand-written gradients;
* ``training``  - ELBO minibatch loop, KL re-weighting schedule, predict;
* ``baselines`` - mle / map / mc-dropout / ensemble / bbb comparisons;
* ``metrics``   - accuracy, ECE, NLL, reliability bins;
* ``tasks``     - synthetic datasets with controllable shift;
* ``suite``     - experiment orchestration and theorem verification;
* ``cli``       - the ``bayeslora`` command-line harness.
"""

from .adapter import (
    FlipoutMasks,
    VariationalAdapter,
    forward_flipout,
    forward_mean,
    forward_naive_shared,
    sample_a,
)
from .kl import (
    FullWeightGaussian,
    PriorSpec,
    build_full_posterior,
    build_full_prior,
    kl_closed_form,
    kl_closed_form_raw,
    kl_full_weight_regularized,
    kl_monte_carlo,
)
from .metrics import CalibrationReport, accuracy, ece, nll
from .parammaps import ParamMap, apply_map, convergence_race, kl_grad_rho
from .tasks import Dataset, TaskSpec, generate_task
from .training import (
    KlSchedule,
    TrainConfig,
    build_small_net,
    elbo_minibatch,
    init_adapter,
    kl_weight_at,
    predict,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "FlipoutMasks",
    "VariationalAdapter",
    "forward_flipout",
    "forward_mean",
    "forward_naive_shared",
    "sample_a",
    "FullWeightGaussian",
    "PriorSpec",
    "build_full_posterior",
    "build_full_prior",
    "kl_closed_form",
    "kl_closed_form_raw",
    "kl_full_weight_regularized",
    "kl_monte_carlo",
    "CalibrationReport",
    "accuracy",
    "ece",
    "nll",
    "ParamMap",
    "apply_map",
    "convergence_race",
    "kl_grad_rho",
    "Dataset",
    "TaskSpec",
    "generate_task",
    "KlSchedule",
    "TrainConfig",
    "build_small_net",
    "elbo_minibatch",
    "init_adapter",
    "kl_weight_at",
    "predict",
    "train",
    "__version__",
]
