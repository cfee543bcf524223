"""Evaluation metrics in ``log(1 + citations)`` space

Predictions ``u`` are always log1p-space estimates, so ``Y_hat = expm1(u)``.
"""
import dataclasses
import json
from typing import Any
from typing import Dict
from typing import Iterable
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from biascite.errors import EmptyInput
from biascite.errors import LengthMismatch


__all__ = [
    "GroupMetrics",
    "EvalReport",
    "DEFAULT_KS",
    "male",
    "rmsle",
    "dcg_at_k",
    "ndcg_at_k",
    "citation_bands",
    "group_report",
]


DEFAULT_KS = (10, 20)


def _paired(y: Sequence[float], u: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(y, dtype=np.float64).reshape(-1)
    scores = np.asarray(u, dtype=np.float64).reshape(-1)
    if labels.shape != scores.shape:
        raise LengthMismatch(f"{labels.size} labels but {scores.size} predictions")
    if not labels.size:
        raise EmptyInput("metrics need at least one item")
    if np.any(labels < 0):
        raise ValueError("citation labels must be non-negative")
    return labels, scores


def male(y: Sequence[float], u: Sequence[float]) -> float:
    """Mean absolute log error ``mean |log1p(y) - u|``"""
    labels, scores = _paired(y, u)
    return float(np.mean(np.abs(np.log1p(labels) - scores)))


def rmsle(y: Sequence[float], u: Sequence[float]) -> float:
    """Root mean squared log error ``sqrt(mean (log1p(y) - u)^2)``"""
    labels, scores = _paired(y, u)
    return float(np.sqrt(np.mean(np.square(np.log1p(labels) - scores))))


def dcg_at_k(gains: Sequence[float], k: int) -> float:
    """Discounted cumulative gain of gains listed in rank order"""
    ranked = np.asarray(gains, dtype=np.float64)[:k]
    return float(np.sum(ranked / np.log2(np.arange(2, ranked.size + 2))))


def ndcg_at_k(y: Sequence[float], u: Sequence[float], k: int) -> float:
    """Normalized DCG of the ranking by ``u`` with gains ``log1p(y)``

    Items are ranked by descending ``u``, ties keep their input order. Returns 1.0 when the
    ideal DCG is zero.
    """
    if k < 1:
        raise ValueError(f"K must be at least 1, got {k}")
    labels, scores = _paired(y, u)
    gains = np.log1p(labels)
    order = np.argsort(-scores, kind="stable")
    ideal = dcg_at_k(np.sort(gains)[::-1], k)
    if ideal == 0.0:
        return 1.0
    return dcg_at_k(gains[order], k) / ideal


def citation_bands(y: Sequence[float], threshold: Optional[float] = None) -> np.ndarray:
    """Label each item ``low`` when ``y`` is below ``threshold`` (default: the median), else ``high``"""
    labels = np.asarray(y, dtype=np.float64)
    cut = float(np.median(labels)) if threshold is None else threshold
    return np.where(labels < cut, "low", "high")


@dataclasses.dataclass(frozen=True)
class GroupMetrics:
    male: float
    rmsle: float
    count: int


def _group(labels: np.ndarray, scores: np.ndarray) -> GroupMetrics:
    return GroupMetrics(male(labels, scores), rmsle(labels, scores), int(labels.size))


@dataclasses.dataclass(frozen=True)
class EvalReport:
    """Overall metrics plus breakdowns by ``(environment, band)`` and by each alone

    ``worst_group_rmsle`` is the largest RMSLE among the populated environments.
    """

    male: float
    rmsle: float
    ndcg: Mapping[int, float]
    count: int
    groups: Mapping[Tuple[str, str], GroupMetrics]
    environments: Mapping[str, GroupMetrics]
    bands: Mapping[str, GroupMetrics]

    @property
    def worst_group_rmsle(self) -> float:
        return max(item.rmsle for item in self.environments.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "male": self.male,
            "rmsle": self.rmsle,
            "ndcg": {str(k): value for k, value in sorted(self.ndcg.items())},
            "count": self.count,
            "worst_group_rmsle": self.worst_group_rmsle,
            "groups": [
                {"env": env, "band": band, **dataclasses.asdict(metrics)}
                for (env, band), metrics in sorted(self.groups.items())
            ],
            "environments": {key: dataclasses.asdict(value) for key, value in sorted(self.environments.items())},
            "bands": {key: dataclasses.asdict(value) for key, value in sorted(self.bands.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def rows(self) -> List[Tuple[str, str, float, float, int]]:
        """Flat ``(env, band, male, rmsle, count)`` rows, overall first, for plotting"""
        rows = [("all", "all", self.male, self.rmsle, self.count)]
        rows.extend((env, "all", item.male, item.rmsle, item.count) for env, item in sorted(self.environments.items()))
        rows.extend(("all", band, item.male, item.rmsle, item.count) for band, item in sorted(self.bands.items()))
        rows.extend(
            (env, band, item.male, item.rmsle, item.count) for (env, band), item in sorted(self.groups.items())
        )
        return rows


def _breakdown(labels: np.ndarray, scores: np.ndarray, keys: Iterable[Any]) -> Dict[Any, GroupMetrics]:
    keys = list(keys)
    out = {}
    for key in sorted(set(keys)):
        mask = np.array([item == key for item in keys])
        out[key] = _group(labels[mask], scores[mask])
    return out


def group_report(
    y: Sequence[float],
    u: Sequence[float],
    env_labels: Sequence[str],
    bands: Optional[Sequence[str]] = None,
    ks: Sequence[int] = DEFAULT_KS,
) -> EvalReport:
    """Compute metrics overall and per group

    :param env_labels: Environment label per item, e.g. ``"low"``/``"high"``
    :param bands: Citation band per item; defaults to :func:`citation_bands` of ``y``
    """
    labels, scores = _paired(y, u)
    envs = [str(item) for item in env_labels]
    if len(envs) != labels.size:
        raise LengthMismatch(f"{len(envs)} environment labels for {labels.size} items")
    band_labels = [str(item) for item in (citation_bands(labels) if bands is None else bands)]
    if len(band_labels) != labels.size:
        raise LengthMismatch(f"{len(band_labels)} band labels for {labels.size} items")
    return EvalReport(
        male=male(labels, scores),
        rmsle=rmsle(labels, scores),
        ndcg={k: ndcg_at_k(labels, scores, k) for k in ks},
        count=int(labels.size),
        groups=_breakdown(labels, scores, zip(envs, band_labels)),
        environments=_breakdown(labels, scores, envs),
        bands=_breakdown(labels, scores, band_labels),
    )
