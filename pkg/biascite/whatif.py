"""Per-paper "what-if" reports for the actionable factors of a trained model"""
import csv
import dataclasses
import json
import logging
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from biascite import objectives as obj
from biascite.errors import UntrainedCheckpoint
from biascite.heads import forward_heads
from biascite.training import TrainedModel
from biascite.training import TrainingData
from biascite.training import embed


__all__ = [
    "WhatIfRow",
    "FactorSummary",
    "WhatIfReport",
    "whatif",
    "summarize",
    "write_rows",
    "write_summary",
    "ROW_COLUMNS",
]


logger = logging.getLogger(__name__)

ROW_COLUMNS = ("paper_id", "factor", "u_base", "u_int", "delta", "y_base", "y_int", "low")


@dataclasses.dataclass(frozen=True)
class WhatIfRow:
    """Predicted change of one paper when ``factor`` is raised to its target

    ``delta`` is ``u_int - u_base`` as computed, and ``y_*`` are ``expm1`` of the ``u`` values
    floored at zero. ``low`` flags the region in which a negative effect is a violation.
    """

    paper_id: str
    factor: str
    u_base: float
    u_int: float
    delta: float
    y_base: float
    y_int: float
    low: bool


@dataclasses.dataclass(frozen=True)
class FactorSummary:
    factor: str
    count: int
    low_count: int
    median_delta: float
    mean_delta: float
    violation_rate: float


@dataclasses.dataclass(frozen=True)
class WhatIfReport:
    rows: List[WhatIfRow]
    summary: Dict[str, FactorSummary]

    def summary_dict(self) -> Dict[str, Any]:
        return {factor: dataclasses.asdict(item) for factor, item in sorted(self.summary.items())}


def _count(u: np.ndarray) -> np.ndarray:
    return np.maximum(np.expm1(u), 0.0)


def whatif(
    data: TrainingData,
    model: TrainedModel,
    factors: Sequence[str] = obj.ACTIONABLE_FACTORS,
    split: Optional[str] = "test",
) -> WhatIfReport:
    """Raise each factor to its target for every paper of ``split`` and report the predicted change

    Exposure is re-estimated by Stage A for the intervened inputs. Papers already at the
    target keep their baseline prediction, so their effect is exactly zero.

    :param split: ``train``, ``val``, ``test`` or ``None`` for every paper in the graph
    :raises UntrainedCheckpoint: If ``model`` holds no completed training epoch
    :raises NonActionableFactor: If a factor is not one of :data:`~biascite.objectives.ACTIONABLE_FACTORS`
    """
    if model.epochs < 1:
        raise UntrainedCheckpoint("what-if analysis needs a trained checkpoint")
    config = model.config
    counterfactual = config.counterfactual_config(model.q_threshold)
    rows_idx = np.arange(len(data.paper_ids)) if split is None else data.indices(split)
    z_plus, z_minus = embed(data, model.params, config, False, None)
    z_rows = z_plus.values[rows_idx]
    z_minus_rows = None if z_minus is None else z_minus.values[rows_idx]
    f_plus, f_minus = data.f_plus[rows_idx], data.f_minus[rows_idx]
    base = forward_heads(model.params, z_rows, z_minus_rows, f_plus, f_minus, config.two_stage).u.numpy()

    rows: List[WhatIfRow] = []
    for factor in factors:
        new_plus, new_minus, changed = obj.intervene(factor, f_plus, f_minus, counterfactual, data.normalizer)
        raised = forward_heads(model.params, z_rows, z_minus_rows, new_plus, new_minus, config.two_stage).u.numpy()
        intervened = np.where(changed, raised, base)
        low = obj.low_region(factor, data.raw[factor][rows_idx], counterfactual)
        for position, index in enumerate(rows_idx):
            u_base, u_int = float(base[position]), float(intervened[position])
            rows.append(
                WhatIfRow(
                    paper_id=data.paper_ids[index],
                    factor=factor,
                    u_base=u_base,
                    u_int=u_int,
                    delta=u_int - u_base,
                    y_base=float(_count(base[position])),
                    y_int=float(_count(intervened[position])),
                    low=bool(low[position]),
                )
            )
    report = WhatIfReport(rows, summarize(rows, counterfactual))
    for item in report.summary.values():
        logger.info(
            "Factor %s: median delta %.4g, violation rate %.3f over %d low-region papers",
            item.factor,
            item.median_delta,
            item.violation_rate,
            item.low_count,
        )
    return report


def summarize(
    rows: Iterable[WhatIfRow], config: obj.CounterfactualConfig = obj.CounterfactualConfig()
) -> Dict[str, FactorSummary]:
    """Median and mean effect per factor plus the share of low-region rows whose effect has the wrong sign"""
    grouped: Dict[str, List[WhatIfRow]] = {}
    for row in rows:
        grouped.setdefault(row.factor, []).append(row)
    summary = {}
    for factor, items in grouped.items():
        deltas = np.array([item.delta for item in items])
        signed = [config.direction(factor) * item.delta for item in items if item.low]
        summary[factor] = FactorSummary(
            factor=factor,
            count=len(items),
            low_count=len(signed),
            median_delta=float(np.median(deltas)),
            mean_delta=float(np.mean(deltas)),
            violation_rate=float(np.mean(np.array(signed) < 0)) if signed else 0.0,
        )
    return summary


def _cells(row: WhatIfRow) -> Tuple[str, ...]:
    return (
        row.paper_id,
        row.factor,
        repr(row.u_base),
        repr(row.u_int),
        repr(row.delta),
        repr(row.y_base),
        repr(row.y_int),
        str(int(row.low)),
    )


def write_rows(rows: Iterable[WhatIfRow], path: Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as outfile:
        writer = csv.writer(outfile, delimiter="\t", lineterminator="\n")
        writer.writerow(ROW_COLUMNS)
        writer.writerows(_cells(row) for row in rows)


def write_summary(report: WhatIfReport, path: Path) -> None:
    Path(path).write_text(json.dumps(report.summary_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
