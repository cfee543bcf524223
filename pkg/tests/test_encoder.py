# pylint: disable=redefined-outer-name
# pylint: disable=missing-class-docstring
# pylint: disable=too-few-public-methods
# pylint: disable=unused-import
import numpy as np
import pytest

from biascite import autodiff as ad
from biascite import encoder
from biascite import heads
from biascite import objectives as obj
from biascite import training
from biascite.agents import FeatureNormalizer
from biascite.agents import PaperFeatureVector
from biascite.encoder import EncoderConfig
from biascite.encoder import EncoderMode
from biascite.errors import ConfigError
from biascite.errors import ModeGraphMismatch
from biascite.errors import ShapeMismatch
from biascite.graph import RELATIONS
from biascite.graph import Author
from biascite.graph import EdgeKind
from biascite.graph import HeteroGraph
from biascite.graph import NodeKind
from biascite.graph import PaperRecord
from biascite.graph import build_graph
from biascite.graph import venue_excluded_view
from biascite.training import TrainConfig
from .fixtures import corpus
from .fixtures import dataset


CONFIG = EncoderConfig(layers=2, hidden=8, heads=2, dropout=0.3)
NORMALIZER = FeatureNormalizer(h_min=0.0, h_max=3.0, year_min=2010, year_max=2020)


def _vector(v=3.0, q=3.0, year=2015):
    return PaperFeatureVector(a1=2.0, a2=3.0, a3=3.0, v=v, r=1, c=2.0, h=1.0, q=q, pub_year=year)


def _record(paper_id, author, venue, year=2015, references=()):
    return PaperRecord(
        id=paper_id,
        title=paper_id,
        pub_year=year,
        venue_name=venue,
        authors=(Author(author),),
        keywords=("graphs",),
        references=references,
    )


def test_public_api():
    """Test that the public API components are exposed via ``__all__``"""

    for item in (
        encoder.EncoderConfig,
        encoder.EncoderMode,
        encoder.PaperEmbedding,
        encoder.init_params,
        encoder.encode,
    ):
        assert item.__name__ in encoder.__all__


def test_config_errors():
    """Test the shape constraints of the encoder configuration"""

    assert CONFIG.head_dim == 4
    assert CONFIG.width(NodeKind.PAPER) == 8
    for kwargs in (
        {"hidden": 10, "heads": 3},
        {"layers": 0},
        {"dropout": 1.0},
        {"input_widths": ((NodeKind.PAPER, 8),)},
        {"input_widths": ((NodeKind.PAPER, 8), (NodeKind.AUTHOR, 0), (NodeKind.VENUE, 1), (NodeKind.TOPIC, 1))},
    ):
        with pytest.raises(ConfigError):
            EncoderConfig(**kwargs)


def test_init_params():
    """Test that the seed alone determines the parameters"""

    first = encoder.init_params(CONFIG, 5)
    second = encoder.init_params(CONFIG, 5)
    other = encoder.init_params(CONFIG, 6)
    assert sorted(first) == sorted(second)
    assert all(np.array_equal(first[name], second[name]) for name in first)
    assert not np.array_equal(first["encoder/layer0/paper/q/weight"], other["encoder/layer0/paper/q/weight"])
    assert np.all(first["encoder/layer1/topic/norm/gain"] == 1.0)
    assert first["encoder/input/paper/weight"].shape == (8, 8)


def test_encode_shapes(corpus):
    """Test embedding shape, determinism in evaluation mode and dropout in train mode"""

    g = build_graph(corpus.records, corpus.features, NORMALIZER)
    params = encoder.init_params(CONFIG, 0)
    first = encoder.encode(g, params, CONFIG, EncoderMode.WITH_VENUE)
    second = encoder.encode(g, params, CONFIG, EncoderMode.WITH_VENUE)
    assert first.z.shape == (g.count(NodeKind.PAPER), 8)
    assert first.mode is EncoderMode.WITH_VENUE
    assert np.array_equal(first.z.values, second.z.values)

    noisy = encoder.encode(g, params, CONFIG, EncoderMode.WITH_VENUE, train=True, rng=np.random.default_rng(1))
    assert not np.array_equal(noisy.z.values, first.z.values)


def test_attention_weights(corpus):
    """Test that recorded attention sums to one over the in-edges of every target"""

    g = build_graph(corpus.records, corpus.features, NORMALIZER)
    embedding = encoder.encode(
        g, encoder.init_params(CONFIG, 0), CONFIG, EncoderMode.WITH_VENUE, keep_attention=True
    )
    alpha, segments = embedding.attention[(0, NodeKind.PAPER)]
    assert alpha.shape == (len(segments), CONFIG.heads)
    totals = np.zeros((g.count(NodeKind.PAPER), CONFIG.heads))
    np.add.at(totals, segments, alpha)
    touched = np.unique(segments)
    assert np.allclose(totals[touched], 1.0)


def test_isolated_paper():
    """Test that a paper's embedding ignores papers it shares no path with"""

    params = encoder.init_params(CONFIG, 2)
    # no shared topic, so the two papers are disconnected
    records = [
        PaperRecord("P1", "P1", 2015, "Alpha Conference", (Author("Ada"),)),
        PaperRecord("P2", "P2", 2015, "Beta Conference", (Author("Bob"),)),
    ]
    before = build_graph(records, {"P1": _vector(), "P2": _vector(v=1.0, q=2.0)}, NORMALIZER)
    after = build_graph(records, {"P1": _vector(), "P2": _vector(v=5.0, q=5.0)}, NORMALIZER)
    z_before = encoder.encode(before, params, CONFIG, EncoderMode.WITH_VENUE).z.values
    z_after = encoder.encode(after, params, CONFIG, EncoderMode.WITH_VENUE).z.values
    assert np.allclose(z_before[0], z_after[0])
    assert not np.allclose(z_before[1], z_after[1])


def test_venue_excluded_embedding():
    """Test that without venue nodes the venue of a paper cannot reach its embedding"""

    params = encoder.init_params(CONFIG, 3)
    top = [_record("P1", "Ada", "Alpha Conference"), _record("P2", "Bob", "Alpha Conference", 2016, ("P1",))]
    low = [_record("P1", "Ada", "Beta Workshop"), _record("P2", "Bob", "Gamma Workshop", 2016, ("P1",))]
    top_graph = build_graph(top, {"P1": _vector(v=5.0), "P2": _vector(v=5.0)}, NORMALIZER)
    low_graph = build_graph(low, {"P1": _vector(v=1.0), "P2": _vector(v=2.0)}, NORMALIZER)

    with_top = encoder.encode(top_graph, params, CONFIG, EncoderMode.WITH_VENUE).z.values
    with_low = encoder.encode(low_graph, params, CONFIG, EncoderMode.WITH_VENUE).z.values
    assert not np.allclose(with_top, with_low)

    without_top = encoder.encode(venue_excluded_view(top_graph), params, CONFIG, EncoderMode.WITHOUT_VENUE)
    without_low = encoder.encode(venue_excluded_view(low_graph), params, CONFIG, EncoderMode.WITHOUT_VENUE)
    assert without_top.mode is EncoderMode.WITHOUT_VENUE
    assert np.array_equal(without_top.z.values, without_low.z.values)


def test_encode_errors(corpus):
    """Test view and width mismatches"""

    g = build_graph(corpus.records, corpus.features, NORMALIZER)
    params = encoder.init_params(CONFIG, 0)
    with pytest.raises(ModeGraphMismatch):
        encoder.encode(g, params, CONFIG, EncoderMode.WITHOUT_VENUE)

    wide = EncoderConfig(
        hidden=8,
        heads=2,
        input_widths=((NodeKind.PAPER, 9), (NodeKind.AUTHOR, 1), (NodeKind.VENUE, 1), (NodeKind.TOPIC, 1)),
    )
    with pytest.raises(ShapeMismatch):
        encoder.encode(g, encoder.init_params(wide, 0), wide, EncoderMode.WITH_VENUE)


def _shuffled(g, rng):
    """The same graph with every node list and every edge list in a random order"""

    order = {kind: rng.permutation(g.count(kind)) for kind in NodeKind}
    position = {kind: np.argsort(perm) for kind, perm in order.items()}
    endpoints = {item.edge_kind: (item.source, item.target) for item in RELATIONS if not item.reverse}
    edges, roles = {}, g.roles
    for kind, pairs in g.edges.items():
        src, dst = endpoints[kind]
        shuffle = rng.permutation(len(pairs))
        edges[kind] = np.stack([position[src][pairs[:, 0]], position[dst][pairs[:, 1]]], axis=1)[shuffle]
        if kind is EdgeKind.WRITES:
            roles = g.roles[shuffle]
    return HeteroGraph(
        nodes={kind: tuple(g.nodes[kind][index] for index in order[kind]) for kind in NodeKind},
        edges=edges,
        roles=roles,
        features={kind: g.features[kind][order[kind]] for kind in NodeKind},
    ), position[NodeKind.PAPER]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_encode_permutation_invariance(corpus, seed):
    """Test that node and edge order do not change any paper embedding"""

    g = build_graph(corpus.records, corpus.features, NORMALIZER)
    params = encoder.init_params(CONFIG, 4)
    shuffled, position = _shuffled(g, np.random.default_rng(seed))
    for mode, first, second in (
        (EncoderMode.WITH_VENUE, g, shuffled),
        (EncoderMode.WITHOUT_VENUE, venue_excluded_view(g), venue_excluded_view(shuffled)),
    ):
        expected = encoder.encode(first, params, CONFIG, mode).z.values
        moved = encoder.encode(second, params, CONFIG, mode).z.values
        assert np.allclose(moved[position], expected, rtol=0.0, atol=1e-12)


def test_training_loss_gradient_through_encoder(dataset):
    """Test the recorded gradient of the full training loss with respect to encoder weights"""

    config = TrainConfig(layers=2, hidden=8, heads=2, dropout=0.0, seed=4)
    counterfactual = config.counterfactual_config(dataset.q_threshold)
    base = training.init_model(config).params
    batch = dataset.train_idx[:16]
    f_plus, f_minus = dataset.f_plus[batch], dataset.f_minus[batch]
    rng = np.random.default_rng(8)

    def loss_of(name):
        def loss(weight):
            params = {**base, name: weight}
            z_plus, z_minus = training.embed(dataset, params, config, False, None)
            batch_plus, batch_minus = ad.take(z_plus, batch), ad.take(z_minus, batch)
            outputs = heads.forward_heads(params, batch_plus, batch_minus, f_plus, f_minus)
            losses = heads.pred_loss(dataset.labels[batch], outputs.u)
            risks = obj.group_risks_with_fallback(losses, dataset.env[batch], config.dro_state())
            mono, smooth = {}, {}
            for factor in counterfactual.factors:
                delta = obj.counterfactual_delta(
                    factor,
                    params,
                    batch_plus,
                    batch_minus,
                    f_plus,
                    f_minus,
                    counterfactual,
                    dataset.normalizer,
                    baseline=outputs.u,
                )
                low = obj.low_region(factor, dataset.raw[factor][batch], counterfactual)
                mono[factor] = obj.mono_loss(delta, low, counterfactual.direction(factor))
                smooth[factor] = obj.smooth_loss(delta)
            reg = obj.total_reg(mono, smooth, config.lambda_mono, config.lambda_smooth)
            return obj.total_loss(obj.groupdro_objective((0.4, 0.6), risks.values), reg, lambda_reg=config.lambda_reg)

        return loss

    for name in ("encoder/input/paper/weight", "encoder/layer0/paper/q/weight", "encoder/layer0/writes/msg"):
        indices = rng.choice(base[name].size, size=4, replace=False)
        assert ad.finite_difference_check(loss_of(name), base[name], indices=indices, floor=1e-6) < 1e-4
