"""Comparison methods trained on the same adapter-equipped network.

Every baseline reuses the trainer with a derived configuration:

* mle        - deterministic adapter, cross-entropy only;
* map        - mle plus decoupled L2 weight decay;
* mc_dropout - deterministic training with dropout on the adapter-branch
  inputs, dropout kept active at evaluation, predictions averaged over
  stochastic passes (one trained model, standard MC-dropout reading);
* ensemble   - independently seeded mle members whose logits are averaged
  before the softmax;
* bbb        - the variational loop with the softplus std map, uniform KL
  weighting, and shared-noise sampling instead of flipout, Bayesianizing
  the a-factor only.

The bbb configuration differs from the variational default in exactly
three fields (param_map, kl_mode, sampling), which is what makes the
ablation grid well defined.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .network import SmallNet, softmax_columns
from .parammaps import ParamMap
from .training import (
    KlSchedule,
    StepRecord,
    TrainConfig,
    build_small_net,
    logits_mean,
    predict,
    train,
)

__all__ = [
    "BaselineSpec",
    "BaselineModel",
    "BASELINE_KINDS",
    "derive_config",
    "train_baseline",
    "predict_baseline",
]

BASELINE_KINDS = ("mle", "map", "mc_dropout", "ensemble", "bbb")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    weight_decay: float = 1e-5   # map
    dropout_p: float = 0.1       # mc_dropout
    n_members: int = 3           # ensemble
    n_eval_samples: int = 10     # mc_dropout default evaluation passes

    def __post_init__(self) -> None:
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"kind must be one of {BASELINE_KINDS}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError("dropout_p must be in [0, 1)")
        if self.n_members < 1:
            raise ValueError("n_members must be >= 1")
        if self.n_eval_samples < 0:
            raise ValueError("n_eval_samples must be >= 0")


@dataclass
class BaselineModel:
    spec: BaselineSpec
    models: list[SmallNet]
    logs: list[list[StepRecord]]


def derive_config(spec: BaselineSpec, config: TrainConfig) -> TrainConfig:
    """Training configuration for a baseline, derived from the shared one."""
    deterministic = replace(
        config,
        sampling="none",
        kl_mode="off",
        param_map=ParamMap.SQUARE,
        weight_decay=0.0,
        dropout_p=0.0,
        bayesianize_b=False,
    )
    if spec.kind == "mle":
        return deterministic
    if spec.kind == "map":
        return replace(deterministic, weight_decay=spec.weight_decay)
    if spec.kind == "mc_dropout":
        return replace(deterministic, dropout_p=spec.dropout_p)
    if spec.kind == "ensemble":
        return deterministic
    # bbb: softplus std map, uniform KL weighting, shared-noise sampling
    return replace(config, param_map=ParamMap.SOFTPLUS, kl_mode="uniform", sampling="shared")


def _member_seeds(seed: int, n_members: int) -> list[int]:
    """First member reuses the run seed (so a 1-member ensemble is exactly
    the single model); further members get independently spawned seeds."""
    children = np.random.SeedSequence(seed).spawn(n_members)
    extra = [int(child.generate_state(1, dtype=np.uint64)[0] % (2**63)) for child in children]
    return [seed] + extra[1:]


def train_baseline(
    spec: BaselineSpec,
    net_shape: tuple[int, tuple[int, ...], int, int],
    dataset: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
) -> BaselineModel:
    """Train the requested baseline; ``net_shape`` is (input_dim, hidden, n_classes, rank)."""
    input_dim, hidden, n_classes, rank = net_shape
    run_config = derive_config(spec, config)
    deterministic = spec.kind != "bbb"
    n_examples = dataset[0].shape[0]

    seeds = [run_config.seed]
    if spec.kind == "ensemble":
        seeds = _member_seeds(run_config.seed, spec.n_members)

    models: list[SmallNet] = []
    logs: list[list[StepRecord]] = []
    for member_seed in seeds:
        member_config = replace(run_config, seed=member_seed)
        net = build_small_net(
            input_dim, hidden, n_classes, rank, member_config, zero_g=deterministic
        )
        schedule = KlSchedule.for_dataset(
            n_examples,
            member_config.batch_size,
            member_config.kl_mode,
            gamma=member_config.gamma,
            literal_ascending=member_config.literal_ascending_weights,
        )
        net, log = train(net, dataset, member_config, schedule)
        models.append(net)
        logs.append(log)
    return BaselineModel(spec=spec, models=models, logs=logs)


def predict_baseline(
    model: BaselineModel,
    x: np.ndarray,
    n_samples: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Class probabilities, one row per example.

    mle/map use the single deterministic pass; the ensemble averages
    member logits before one softmax; mc_dropout and bbb average the
    softmax outputs of n_samples stochastic passes (0 falls back to the
    deterministic pass).
    """
    spec = model.spec
    if spec.kind in ("mle", "map"):
        return predict(model.models[0], x, n_samples=0)
    if spec.kind == "ensemble":
        stacked = np.stack([logits_mean(net, x) for net in model.models])
        mean_logits = stacked.mean(axis=0)
        return softmax_columns(mean_logits.T).T
    n = spec.n_eval_samples if n_samples is None else n_samples
    return predict(model.models[0], x, n_samples=n, seed=seed)
