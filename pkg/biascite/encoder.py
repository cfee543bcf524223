"""Heterogeneous graph-transformer encoder producing paper embeddings

Each layer updates every node kind from its typed in-neighbours:

::

    logit(e) = sum_d (Q_t[target] * (K_s[source] @ Att_r))_hd / sqrt(D) + prior_r,h
    alpha    = softmax of logit over all in-edges of the target, per head
    message  = V_s[source] @ Msg_r
    out      = gelu(layer_norm(h + dropout(sum_e alpha * message @ W_out)) * gain + bias)

``Att_r`` and ``Msg_r`` are per-relation block-diagonal matrices (one ``D x D`` block per head)
and ``prior_r`` is a learned per-head scalar starting at zero. A node without in-neighbours only
takes the residual path.
"""
import dataclasses
import enum
import logging
import math
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np

from biascite import autodiff as ad
from biascite.autodiff import Tensor
from biascite.errors import ConfigError
from biascite.errors import ModeGraphMismatch
from biascite.errors import ShapeMismatch
from biascite.graph import RELATIONS
from biascite.graph import HeteroGraph
from biascite.graph import NodeKind
from biascite.graph import PAPER_NODE_WIDTH


__all__ = [
    "EncoderConfig",
    "EncoderMode",
    "EncoderParams",
    "PaperEmbedding",
    "init_params",
    "encode",
]


logger = logging.getLogger(__name__)

EncoderParams = Dict[str, np.ndarray]
ParamSource = Mapping[str, Union[Tensor, np.ndarray]]

_DEFAULT_WIDTHS = ((NodeKind.PAPER, PAPER_NODE_WIDTH), (NodeKind.AUTHOR, 1), (NodeKind.VENUE, 1), (NodeKind.TOPIC, 1))


class EncoderMode(enum.Enum):
    """Graph view an embedding was computed on"""

    WITH_VENUE = "with_venue"
    WITHOUT_VENUE = "without_venue"


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    """Shape of the encoder

    :param input_widths: ``(node kind, feature width)`` pairs for every node kind
    :raises ConfigError: If ``hidden`` is not divisible by ``heads`` or a width is not positive
    """

    layers: int = 2
    hidden: int = 128
    heads: int = 4
    dropout: float = 0.4
    input_widths: Tuple[Tuple[NodeKind, int], ...] = _DEFAULT_WIDTHS

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"encoder needs at least one layer, got {self.layers}")
        if self.hidden < 1 or self.heads < 1:
            raise ConfigError("encoder hidden size and head count must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        widths = dict(self.input_widths)
        if set(widths) != set(NodeKind):
            raise ConfigError("an input width is required for every node kind")
        for kind, width in widths.items():
            if width < 1:
                raise ConfigError(f"input width of '{kind.value}' nodes must be positive, got {width}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def width(self, kind: NodeKind) -> int:
        return dict(self.input_widths)[kind]


@dataclasses.dataclass(frozen=True)
class PaperEmbedding:
    """Paper embeddings in graph paper order, tagged with the view they came from

    ``attention`` is only filled when requested and maps ``(layer, target kind)`` to the
    per-edge attention weights and the target index of every edge.
    """

    z: Tensor
    mode: EncoderMode
    attention: Mapping[Tuple[int, NodeKind], Tuple[np.ndarray, np.ndarray]] = dataclasses.field(
        default_factory=dict
    )


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Create encoder parameters with fan-scaled uniform initialization

    Biases and relation priors start at zero, layer-norm gains at one. Parameters are drawn
    in a fixed name order, so ``seed`` fully determines the result.
    """
    rng = np.random.default_rng(seed)
    hidden, heads, dim = config.hidden, config.heads, config.head_dim
    params: EncoderParams = {}
    for kind in NodeKind:
        prefix = f"encoder/input/{kind.value}"
        params[f"{prefix}/weight"] = _uniform(rng, (config.width(kind), hidden), config.width(kind), hidden)
        params[f"{prefix}/bias"] = np.zeros(hidden)
    for layer in range(config.layers):
        for kind in NodeKind:
            prefix = f"encoder/layer{layer}/{kind.value}"
            for proj in ("q", "k", "v"):
                params[f"{prefix}/{proj}/weight"] = _uniform(rng, (hidden, hidden), hidden, hidden)
                params[f"{prefix}/{proj}/bias"] = np.zeros(hidden)
            params[f"{prefix}/out/weight"] = _uniform(rng, (hidden, hidden), hidden, hidden)
            params[f"{prefix}/norm/gain"] = np.ones(hidden)
            params[f"{prefix}/norm/bias"] = np.zeros(hidden)
        for relation in RELATIONS:
            prefix = f"encoder/layer{layer}/{relation.name}"
            params[f"{prefix}/att"] = _uniform(rng, (heads, dim, dim), dim, dim)
            params[f"{prefix}/msg"] = _uniform(rng, (heads, dim, dim), dim, dim)
            params[f"{prefix}/prior"] = np.zeros(heads)
    return params


def _linear(x: Tensor, params: ParamSource, prefix: str) -> Tensor:
    out = ad.matmul(x, params[f"{prefix}/weight"])
    if f"{prefix}/bias" in params:
        out = ad.add(out, params[f"{prefix}/bias"])
    return out


def _layer(
    g: HeteroGraph,
    h: Dict[NodeKind, Tensor],
    params: ParamSource,
    config: EncoderConfig,
    layer: int,
    train: bool,
    rng: Optional[np.random.Generator],
    attention: Optional[Dict[Tuple[int, NodeKind], Tuple[np.ndarray, np.ndarray]]],
) -> Dict[NodeKind, Tensor]:
    heads, dim = config.heads, config.head_dim
    query = {kind: _linear(h[kind], params, f"encoder/layer{layer}/{kind.value}/q") for kind in NodeKind}
    key = {kind: _linear(h[kind], params, f"encoder/layer{layer}/{kind.value}/k") for kind in NodeKind}
    value = {kind: _linear(h[kind], params, f"encoder/layer{layer}/{kind.value}/v") for kind in NodeKind}

    logits: Dict[NodeKind, List[Tensor]] = {kind: [] for kind in NodeKind}
    messages: Dict[NodeKind, List[Tensor]] = {kind: [] for kind in NodeKind}
    targets: Dict[NodeKind, List[np.ndarray]] = {kind: [] for kind in NodeKind}
    for relation in RELATIONS:
        src, dst = g.relation_edges(relation)
        if not len(src):
            continue
        prefix = f"encoder/layer{layer}/{relation.name}"
        # relation transforms are applied per node, then gathered per edge
        keyed = ad.matmul(key[relation.source], ad.block_diag(params[f"{prefix}/att"]))
        sent = ad.matmul(value[relation.source], ad.block_diag(params[f"{prefix}/msg"]))
        scores = ad.mul(ad.take(query[relation.target], dst), ad.take(keyed, src))
        logit = ad.sum(ad.reshape(scores, (len(src), heads, dim)), axis=2)
        logits[relation.target].append(ad.add(ad.div(logit, math.sqrt(dim)), params[f"{prefix}/prior"]))
        messages[relation.target].append(ad.take(sent, src))
        targets[relation.target].append(dst)

    updated = {}
    for kind in NodeKind:
        count = g.count(kind)
        prefix = f"encoder/layer{layer}/{kind.value}"
        residual = h[kind]
        if logits[kind]:
            segments = np.concatenate(targets[kind])
            edges = len(segments)
            alpha = ad.segment_softmax(ad.concat(logits[kind], axis=0), segments, count)
            if attention is not None:
                attention[(layer, kind)] = (alpha.numpy(), segments)
            weighted = ad.mul(
                ad.reshape(ad.concat(messages[kind], axis=0), (edges, heads, dim)),
                ad.reshape(alpha, (edges, heads, 1)),
            )
            pooled = ad.scatter_add(ad.reshape(weighted, (edges, config.hidden)), segments, count)
            out = ad.dropout(
                ad.matmul(pooled, params[f"{prefix}/out/weight"]), config.dropout, rng, train
            )
            residual = ad.add(residual, out)
        normed = ad.add(
            ad.mul(ad.layer_norm(residual), params[f"{prefix}/norm/gain"]),
            params[f"{prefix}/norm/bias"],
        )
        updated[kind] = ad.gelu(normed)
    return updated


def encode(
    g: HeteroGraph,
    params: ParamSource,
    config: EncoderConfig,
    mode: EncoderMode,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    keep_attention: bool = False,
) -> PaperEmbedding:
    """Encode every node of ``g`` and return the paper embeddings

    ``params`` values may be arrays or tensors; pass tensors requiring gradients while a
    :class:`~biascite.autodiff.Tape` is active to train.

    :param mode: View tag; :attr:`EncoderMode.WITHOUT_VENUE` requires a graph without venue
                 information (see :func:`biascite.graph.venue_excluded_view`)
    :param train: Enables dropout, which then needs ``rng``
    :param keep_attention: Record the attention weights of every layer
    :raises ModeGraphMismatch: If the mode does not match the graph view
    :raises ShapeMismatch: If a node feature matrix disagrees with the configured width
    """
    if mode is EncoderMode.WITHOUT_VENUE and g.has_venue_information:
        raise ModeGraphMismatch("venue-excluded encoding requested on a graph with venue information")

    h = {}
    for kind in NodeKind:
        features = g.features[kind]
        if features.shape[1] != config.width(kind):
            raise ShapeMismatch(
                f"'{kind.value}' features have width {features.shape[1]}, expected {config.width(kind)}"
            )
        h[kind] = _linear(Tensor(features), params, f"encoder/input/{kind.value}")

    attention: Optional[Dict[Tuple[int, NodeKind], Tuple[np.ndarray, np.ndarray]]] = (
        {} if keep_attention else None
    )
    for layer in range(config.layers):
        h = _layer(g, h, params, config, layer, train, rng, attention)
    return PaperEmbedding(h[NodeKind.PAPER], mode, attention or {})
