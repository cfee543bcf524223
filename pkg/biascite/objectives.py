"""Robust training objectives

* venue environments and the group risks over them
* GroupDRO weighting of the environment risks with exponentiated, standardized updates
* counterfactual effects of actionable factors with monotonicity and smoothness penalties
* auxiliary exposure calibration and adversarial venue-invariance terms
"""
import dataclasses
import enum
import logging
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from biascite import autodiff as ad
from biascite.agents import MINUS_FIELDS
from biascite.agents import PLUS_FIELDS
from biascite.agents import FeatureNormalizer
from biascite.autodiff import Tensor
from biascite.errors import ConfigError
from biascite.errors import EmptyEnvironment
from biascite.errors import NonActionableFactor
from biascite.heads import forward_heads
from biascite.heads import init_mlp
from biascite.heads import mlp


__all__ = [
    "Environment",
    "EnvironmentConfig",
    "GroupDroState",
    "GroupRisks",
    "CounterfactualConfig",
    "ACTIONABLE_FACTORS",
    "ADVERSARY",
    "partition_environments",
    "group_risks",
    "group_risks_with_fallback",
    "groupdro_objective",
    "update_group_weights",
    "intervene",
    "low_region",
    "counterfactual_delta",
    "mono_loss",
    "smooth_loss",
    "total_reg",
    "total_loss",
    "calibration_loss",
    "init_adversary_params",
    "adversarial_loss",
]


logger = logging.getLogger(__name__)

ACTIONABLE_FACTORS = ("r", "q")
ADVERSARY = "adversary"

_BOUNDARY_TOLERANCE = 1e-12

Scalar = Union[Tensor, float]


class Environment(enum.IntEnum):
    """Venue-tier environments"""

    LOW = 0
    HIGH = 1

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclasses.dataclass(frozen=True)
class EnvironmentConfig:
    """Threshold ``tau`` on normalized venue prestige ``(V - 1) / 4``"""

    tau: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"environment threshold must lie in (0, 1), got {self.tau}")


def partition_environments(v_raw: Sequence[float], config: EnvironmentConfig = EnvironmentConfig()) -> np.ndarray:
    """Label each paper :attr:`Environment.HIGH` iff ``(V - 1) / 4 >= tau``, else LOW

    The boundary is inclusive, with a ``1e-12`` allowance so that e.g. ``V = 4.2`` lands on
    ``tau = 0.8`` despite rounding.
    """
    normalized = (np.asarray(v_raw, dtype=np.float64) - 1.0) / 4.0
    return np.where(normalized >= config.tau - _BOUNDARY_TOLERANCE, Environment.HIGH, Environment.LOW).astype(
        np.int64
    )


@dataclasses.dataclass(frozen=True)
class GroupDroState:
    """Environment weights on the probability simplex plus update hyperparameters

    ``risks`` holds the most recent value of each environment risk, ``None`` until the
    environment has been seen.
    """

    w: Tuple[float, float] = (0.5, 0.5)
    alpha: float = 0.1
    eps: float = 1e-8
    w_min: float = 0.1
    w_max: float = 0.9
    risks: Tuple[Optional[float], Optional[float]] = (None, None)

    def __post_init__(self):
        if len(self.w) != len(Environment):
            raise ConfigError(f"expected {len(Environment)} group weights, got {len(self.w)}")
        if any(item < 0 for item in self.w) or abs(sum(self.w) - 1.0) > 1e-9:
            raise ConfigError(f"group weights {self.w} are not on the probability simplex")
        if not 0.0 <= self.w_min <= 1.0 / len(Environment) <= self.w_max <= 1.0:
            raise ConfigError(f"group weight clip bounds [{self.w_min}, {self.w_max}] are not feasible")
        if self.alpha < 0 or self.eps <= 0:
            raise ConfigError("GroupDRO step size must be non-negative and eps positive")


def group_risks(losses: Tensor, labels: Sequence[int]) -> Tuple[Tensor, Tensor]:
    """Mean loss per environment

    :raises EmptyEnvironment: If an environment has no sample in the batch
    """
    labels = np.asarray(labels)
    risks = []
    for env in Environment:
        members = np.flatnonzero(labels == env)
        if not len(members):
            raise EmptyEnvironment(f"environment '{env.label}' has no sample in the batch")
        risks.append(ad.mean(ad.take(losses, members)))
    return risks[0], risks[1]


@dataclasses.dataclass(frozen=True)
class GroupRisks:
    """Environment risks of one step

    ``values`` holds a differentiable risk for populated environments, a constant for
    environments whose previous risk was reused, and ``None`` for environments never seen.
    """

    values: Tuple[Optional[Tensor], Optional[Tensor]]
    fresh: Tuple[bool, bool]

    @property
    def complete(self) -> bool:
        return all(item is not None for item in self.values)

    def floats(self) -> Tuple[Optional[float], Optional[float]]:
        return tuple(None if item is None else item.item() for item in self.values)  # type: ignore


def group_risks_with_fallback(losses: Tensor, labels: Sequence[int], state: GroupDroState) -> GroupRisks:
    """Like :func:`group_risks`, reusing the state's previous risk for an empty environment"""
    labels = np.asarray(labels)
    values: List[Optional[Tensor]] = []
    fresh: List[bool] = []
    for env in Environment:
        members = np.flatnonzero(labels == env)
        if len(members):
            values.append(ad.mean(ad.take(losses, members)))
            fresh.append(True)
            continue
        previous = state.risks[env]
        if previous is None:
            logger.warning("Environment '%s' is empty and has no previous risk; excluded", env.label)
            values.append(None)
        else:
            logger.warning("Environment '%s' is empty; reusing previous risk %.6g", env.label, previous)
            values.append(Tensor(previous))
        fresh.append(False)
    return GroupRisks((values[0], values[1]), (fresh[0], fresh[1]))


def groupdro_objective(w: Sequence[float], risks: Sequence[Optional[Scalar]]) -> Tensor:
    """``sum_e w_e * L_e``; weights are constants, so gradients only flow through the risks

    An environment without any risk is dropped and the remaining risk enters unweighted.
    """
    present = [(weight, risk) for weight, risk in zip(w, risks) if risk is not None]
    if not present:
        raise EmptyEnvironment("no environment risk is available")
    if len(present) == 1:
        return ad.as_tensor(present[0][1])
    total = ad.mul(float(present[0][0]), present[0][1])
    for weight, risk in present[1:]:
        total = ad.add(total, ad.mul(float(weight), risk))
    return total


def update_group_weights(state: GroupDroState, risks: Sequence[float]) -> GroupDroState:
    """Exponentiated-gradient step on standardized risks, then clip and renormalize

    ``w_e <- w_e * exp(alpha * (L_e - mean(L)) / (std(L) + eps))``, normalized, clipped to
    ``[w_min, w_max]`` and normalized again. ``std`` is the population standard deviation.
    """
    losses = np.asarray(risks, dtype=np.float64)
    weights = np.asarray(state.w, dtype=np.float64)
    scores = (losses - losses.mean()) / (losses.std() + state.eps)
    weights = weights * np.exp(state.alpha * scores)
    weights = weights / weights.sum()
    weights = np.clip(weights, state.w_min, state.w_max)
    weights = weights / weights.sum()
    return dataclasses.replace(
        state, w=(float(weights[0]), float(weights[1])), risks=(float(losses[0]), float(losses[1]))
    )


@dataclasses.dataclass(frozen=True)
class CounterfactualConfig:
    """Actionable factors, their desired directions, low regions and intervention targets

    Targets are raw feature values: ``R -> 1`` and ``Q -> 5``. The low region of ``R`` is
    ``R < 1``; that of ``Q`` is ``Q`` below ``q_threshold`` (the training-split median).
    """

    factors: Tuple[str, ...] = ACTIONABLE_FACTORS
    directions: Tuple[Tuple[str, int], ...] = (("r", 1), ("q", 1))
    targets: Tuple[Tuple[str, float], ...] = (("r", 1.0), ("q", 5.0))
    r_threshold: float = 1.0
    q_threshold: float = 3.0
    lambda_mono: float = 1.0
    lambda_smooth: float = 0.1

    def __post_init__(self):
        for factor in self.factors:
            if factor not in ACTIONABLE_FACTORS:
                raise NonActionableFactor(f"factor '{factor}' is not actionable")
        if any(sign not in (1, -1) for _, sign in self.directions):
            raise ConfigError("counterfactual directions must be +1 or -1")
        targets = dict(self.targets)
        if targets.get("r") not in (0.0, 1.0):
            raise ConfigError("the reproducibility target must be 0 or 1")
        if not 1.0 <= targets.get("q", 0.0) <= 5.0:
            raise ConfigError("the text quality target must lie in [1, 5]")
        if self.lambda_mono < 0 or self.lambda_smooth < 0:
            raise ConfigError("regularization weights must be non-negative")

    def direction(self, factor: str) -> int:
        return dict(self.directions)[factor]

    def target(self, factor: str) -> float:
        return dict(self.targets)[factor]

    def threshold(self, factor: str) -> float:
        return self.r_threshold if factor == "r" else self.q_threshold


def _actionable(factor: str) -> None:
    if factor not in ACTIONABLE_FACTORS:
        raise NonActionableFactor(f"factor '{factor}' is not actionable; choose one of {ACTIONABLE_FACTORS}")


def intervene(
    factor: str,
    f_plus: np.ndarray,
    f_minus: np.ndarray,
    config: CounterfactualConfig,
    normalizer: FeatureNormalizer,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Set ``factor`` to its normalized target in both feature views

    :returns: The intervened views and a mask of the rows that actually changed
    """
    _actionable(factor)
    value = normalizer.normalize(factor, config.target(factor))
    plus_col, minus_col = PLUS_FIELDS.index(factor), MINUS_FIELDS.index(factor)
    changed = f_plus[:, plus_col] != value
    new_plus, new_minus = np.array(f_plus), np.array(f_minus)
    new_plus[:, plus_col] = value
    new_minus[:, minus_col] = value
    return new_plus, new_minus, changed


def low_region(factor: str, raw_values: Sequence[float], config: CounterfactualConfig) -> np.ndarray:
    """Indicator ``v < tau_v`` of the region where raising ``v`` must not hurt"""
    _actionable(factor)
    return np.asarray(raw_values, dtype=np.float64) < config.threshold(factor)


def counterfactual_delta(
    factor: str,
    params: Mapping[str, Union[Tensor, np.ndarray]],
    z_plus: Union[Tensor, np.ndarray],
    z_minus: Optional[Union[Tensor, np.ndarray]],
    f_plus: np.ndarray,
    f_minus: np.ndarray,
    config: CounterfactualConfig,
    normalizer: FeatureNormalizer,
    baseline: Optional[Tensor] = None,
    two_stage: bool = True,
) -> Tensor:
    """``u(s with factor raised) - u(s)`` per row, with the exposure recomputed by Stage A

    Rows already at the target get exactly zero.

    :param baseline: ``u`` of the unchanged inputs when already computed
    :raises NonActionableFactor: If ``factor`` is not in :data:`ACTIONABLE_FACTORS`
    """
    new_plus, new_minus, changed = intervene(factor, f_plus, f_minus, config, normalizer)
    if baseline is None:
        baseline = forward_heads(params, z_plus, z_minus, f_plus, f_minus, two_stage).u
    raised = forward_heads(params, z_plus, z_minus, new_plus, new_minus, two_stage).u
    return ad.mul(ad.sub(raised, baseline), changed.astype(np.float64))


def mono_loss(delta: Tensor, low: Sequence[bool], direction: int = 1) -> Tensor:
    """Mean of ``max(0, -t * delta) * 1{low}`` over the batch"""
    return ad.mean(ad.mul(ad.hinge(ad.mul(-float(direction), delta)), np.asarray(low, dtype=np.float64)))


def smooth_loss(delta: Tensor) -> Tensor:
    """Mean squared effect"""
    return ad.mean(ad.square(delta))


def total_reg(
    mono: Mapping[str, Scalar], smooth: Mapping[str, Scalar], lambda_mono: float, lambda_smooth: float
) -> Tensor:
    """``lambda_mono * sum_v L_mono[v] + lambda_smooth * sum_v L_smooth[v]``"""
    total: Tensor = Tensor(0.0)
    for value in mono.values():
        total = ad.add(total, ad.mul(lambda_mono, value))
    for value in smooth.values():
        total = ad.add(total, ad.mul(lambda_smooth, value))
    return total


def total_loss(
    groupdro: Scalar,
    reg: Scalar,
    lambda_main: float = 1.0,
    lambda_reg: float = 0.05,
    adv: Optional[Scalar] = None,
    calib: Optional[Scalar] = None,
    lambda_adv: float = 0.0,
    lambda_corr: float = 0.0,
) -> Tensor:
    """``lambda_main * L_groupdro + lambda_reg * L_reg + lambda_adv * L_adv + lambda_corr * L_calib``

    Auxiliary terms that are ``None`` are left out.
    """
    weights = (lambda_main, lambda_reg, lambda_adv, lambda_corr)
    if any(item < 0 for item in weights):
        raise ConfigError(f"loss weights must be non-negative, got {weights}")
    total = ad.add(ad.mul(lambda_main, groupdro), ad.mul(lambda_reg, reg))
    if adv is not None:
        total = ad.add(total, ad.mul(lambda_adv, adv))
    if calib is not None:
        total = ad.add(total, ad.mul(lambda_corr, calib))
    return total


def calibration_loss(exposure: Tensor, target: Sequence[float]) -> Optional[Tensor]:
    """Mean squared gap between the exposure estimate and a reference exposure

    Rows whose reference is missing (NaN) are left out of the mean.

    :returns: ``None`` when no row has a reference
    """
    target = np.asarray(target, dtype=np.float64)
    present = np.flatnonzero(np.isfinite(target.reshape(len(target), -1)).all(axis=1))
    if not present.size:
        return None
    if present.size < len(target):
        exposure, target = ad.take(exposure, present), target[present]
    return ad.mean(ad.square(ad.sub(exposure, target)))


def init_adversary_params(embed_width: int, seed: int) -> Dict[str, np.ndarray]:
    """Parameters of the two-layer environment discriminator"""
    return init_mlp(ADVERSARY, embed_width, np.random.default_rng(seed))


def adversarial_loss(
    z_no_venue: Tensor, labels: Sequence[int], params: Mapping[str, Union[Tensor, np.ndarray]], scale: float = 1.0
) -> Tensor:
    """Binary cross-entropy of the environment discriminator on gradient-reversed embeddings

    The discriminator learns to tell the environments apart while the encoder receives the
    reversed gradient and learns to hide venue tier from the venue-excluded embedding.
    """
    logits = mlp(ad.grad_reverse(z_no_venue, scale), params, ADVERSARY)
    targets = (np.asarray(labels) == Environment.HIGH).astype(np.float64)
    # log(1 + exp(x)) - y * x is the logistic loss in a stable form
    return ad.mean(ad.sub(ad.softplus(logits), ad.mul(logits, targets)))
