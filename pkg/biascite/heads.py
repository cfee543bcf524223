"""Exposure and citation heads

Stage A reads the venue-inclusive embedding and feature vector and estimates the early
exposure ``E_hat >= 0``. Stage B reads only the venue-excluded embedding, the venue-excluded
feature vector and ``E_hat``, and returns ``u = log(1 + Y_hat)``. Venue prestige can therefore
reach the citation estimate only through ``E_hat``.

A single-stage head reading the venue-inclusive inputs directly is kept for ablations.
"""
import dataclasses
from typing import Dict
from typing import Mapping
from typing import Optional
from typing import Union

import numpy as np

from biascite import autodiff as ad
from biascite.agents import MINUS_FIELDS
from biascite.agents import PLUS_FIELDS
from biascite.autodiff import Tensor
from biascite.errors import ShapeMismatch


__all__ = [
    "HEAD_HIDDEN",
    "STAGE_A",
    "STAGE_B",
    "SINGLE_STAGE",
    "HeadOutputs",
    "init_mlp",
    "init_head_params",
    "mlp",
    "stage_a_forward",
    "stage_b_forward",
    "single_stage_forward",
    "forward_heads",
    "pred_loss",
]


HEAD_HIDDEN = 64
STAGE_A = "stage_a"
STAGE_B = "stage_b"
SINGLE_STAGE = "single_stage"

ParamSource = Mapping[str, Union[Tensor, np.ndarray]]
ArrayLike = Union[Tensor, np.ndarray]


def init_mlp(
    prefix: str, in_width: int, rng: np.random.Generator, hidden: int = HEAD_HIDDEN
) -> Dict[str, np.ndarray]:
    """One-hidden-layer perceptron parameters under ``prefix/hidden`` and ``prefix/output``"""
    params = {}
    for layer, (fan_in, fan_out) in (("hidden", (in_width, hidden)), ("output", (hidden, 1))):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}/{layer}/weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{prefix}/{layer}/bias"] = np.zeros(fan_out)
    return params


def init_head_params(embed_width: int, seed: int, two_stage: bool = True) -> Dict[str, np.ndarray]:
    """Parameters of the Stage A and Stage B heads, or of the single-stage head"""
    rng = np.random.default_rng(seed)
    if two_stage:
        params = init_mlp(STAGE_A, embed_width + len(PLUS_FIELDS), rng)
        params.update(init_mlp(STAGE_B, embed_width + len(MINUS_FIELDS) + 1, rng))
        return params
    return init_mlp(SINGLE_STAGE, embed_width + len(PLUS_FIELDS), rng)


def mlp(x: ArrayLike, params: ParamSource, prefix: str) -> Tensor:
    """``gelu(x @ W1 + b1) @ W2 + b2`` flattened to one value per row"""
    x = ad.as_tensor(x)
    weight = params[f"{prefix}/hidden/weight"]
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"{prefix}: input shape {x.shape} does not fit width {weight.shape[0]}")
    hidden = ad.gelu(ad.add(ad.matmul(x, weight), params[f"{prefix}/hidden/bias"]))
    out = ad.add(ad.matmul(hidden, params[f"{prefix}/output/weight"]), params[f"{prefix}/output/bias"])
    return ad.reshape(out, (x.shape[0],))


def _check_width(name: str, features: ArrayLike, width: int) -> None:
    if features.ndim != 2 or features.shape[1] != width:
        raise ShapeMismatch(f"{name} must have {width} columns, got shape {features.shape}")


def stage_a_forward(z_with_venue: ArrayLike, f_plus: ArrayLike, params: ParamSource) -> Tensor:
    """Exposure estimate ``E_hat = softplus(g_phi([z, f_plus]))``, one value per row"""
    _check_width("f_plus", f_plus, len(PLUS_FIELDS))
    return ad.softplus(mlp(ad.concat([z_with_venue, f_plus], axis=1), params, STAGE_A))


def stage_b_forward(
    z_no_venue: ArrayLike, f_minus: ArrayLike, exposure: ArrayLike, params: ParamSource
) -> Tensor:
    """Citation estimate ``u = f_theta([z, f_minus, E_hat])`` in ``log(1 + y)`` units"""
    _check_width("f_minus", f_minus, len(MINUS_FIELDS))
    exposure = ad.as_tensor(exposure)
    column = ad.reshape(exposure, (exposure.size, 1))
    return mlp(ad.concat([z_no_venue, f_minus, column], axis=1), params, STAGE_B)


def single_stage_forward(z_with_venue: ArrayLike, f_plus: ArrayLike, params: ParamSource) -> Tensor:
    _check_width("f_plus", f_plus, len(PLUS_FIELDS))
    return mlp(ad.concat([z_with_venue, f_plus], axis=1), params, SINGLE_STAGE)


@dataclasses.dataclass(frozen=True)
class HeadOutputs:
    """``u`` per row plus the exposure estimate (``None`` for the single-stage head)"""

    u: Tensor
    exposure: Optional[Tensor]


def forward_heads(
    params: ParamSource,
    z_plus: ArrayLike,
    z_minus: Optional[ArrayLike],
    f_plus: ArrayLike,
    f_minus: ArrayLike,
    two_stage: bool = True,
) -> HeadOutputs:
    """Run the configured head arrangement on aligned rows"""
    if not two_stage:
        return HeadOutputs(single_stage_forward(z_plus, f_plus, params), None)
    if z_minus is None:
        raise ValueError("the two-stage heads need the venue-excluded embedding")
    exposure = stage_a_forward(z_plus, f_plus, params)
    return HeadOutputs(stage_b_forward(z_minus, f_minus, exposure, params), exposure)


def pred_loss(y: Union[np.ndarray, float, int], u: ArrayLike) -> Tensor:
    """Per-sample squared log error ``(log1p(y) - u)^2``

    :raises ValueError: If any label is negative
    """
    labels = np.asarray(y, dtype=np.float64)
    if np.any(labels < 0):
        raise ValueError("citation labels must be non-negative")
    return ad.square(ad.sub(u, np.log1p(labels)))
