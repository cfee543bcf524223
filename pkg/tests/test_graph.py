# pylint: disable=redefined-outer-name
# pylint: disable=missing-class-docstring
# pylint: disable=too-few-public-methods
# pylint: disable=unused-import
import collections
import json

import numpy as np
import pytest

from biascite import graph
from biascite.agents import FeatureNormalizer
from biascite.agents import PaperFeatureVector
from biascite.errors import ConfigError
from biascite.errors import IngestError
from biascite.errors import MissingFeatures
from biascite.errors import OverlappingYearRanges
from biascite.graph import EdgeKind
from biascite.graph import NodeKind
from .fixtures import corpus


def _line(paper_id, year=2015, **kwargs):
    data = {
        "id": paper_id,
        "title": f"On {paper_id}",
        "pub_year": year,
        "venue_name": "Venue 000 Conference",
        "authors": [{"name": "Ada Lovelace", "affiliation": "Institute 001"}, "Grace Hopper"],
    }
    data.update(kwargs)
    return json.dumps(data)


def _vector(year=2015, v=3.0, h=1.0, r=0):
    return PaperFeatureVector(a1=2.0, a2=3.0, a3=3.0, v=v, r=r, c=2.0, h=h, q=3.5, pub_year=year)


def _record(paper_id, year=2015, authors=("Ada",), venue="Venue 000 Conference", **kwargs):
    return graph.PaperRecord(
        id=paper_id,
        title=f"On {paper_id}",
        pub_year=year,
        venue_name=venue,
        authors=tuple(graph.Author(name) for name in authors),
        **kwargs,
    )


def test_public_api():
    """Test that the public API components are exposed via ``__all__``"""

    for item in (
        graph.PaperRecord,
        graph.HeteroGraph,
        graph.SplitConfig,
        graph.ingest_papers,
        graph.build_graph,
        graph.venue_excluded_view,
        graph.citation_view,
        graph.temporal_split,
        graph.export_graph,
    ):
        assert item.__name__ in graph.__all__
    assert "RELATIONS" in graph.__all__


def test_ingest_basic():
    """Test decoding of valid, blank and empty streams"""

    assert graph.ingest_papers([]) == graph.IngestResult([], [])

    result = graph.ingest_papers([_line("P1"), "", "   \n"])
    assert [item.id for item in result.records] == ["P1"]
    assert result.errors == []
    record = result.records[0]
    assert record.authors[0] == graph.Author("Ada Lovelace", "Institute 001")
    assert record.authors[1] == graph.Author("Grace Hopper")
    assert record.label_citations is None
    assert record.references == ()


def test_ingest_malformed():
    """Test that malformed lines are reported with their line number"""

    result = graph.ingest_papers([_line("P1"), "{not json", _line("P3")])
    assert [item.id for item in result.records] == ["P1", "P3"]
    assert len(result.errors) == 1
    assert result.errors[0].line_no == 2

    result = graph.ingest_papers(
        [
            _line("P1"),
            _line("P1"),
            _line("P2", authors=[]),
            _line("P3", pub_year="2015"),
            _line("P4", label_citations=-1),
            _line("P5", year=1990),
            json.dumps([1, 2]),
            json.dumps({"id": "P6"}),
        ],
        year_range=(2000, 2020),
    )
    assert [item.id for item in result.records] == ["P1"]
    assert [item.line_no for item in result.errors] == [2, 3, 4, 5, 6, 7, 8]
    assert "duplicate" in result.errors[0].reason
    assert "missing required" in result.errors[-1].reason

    with pytest.raises(IngestError):
        graph.ingest_papers(["{", "[]"])


def test_records_file(tmp_path, corpus):
    """Test that written record files are read back unchanged"""

    path = tmp_path / "records.jsonl"
    graph.write_records(corpus.records, path)
    result = graph.read_records(path)
    assert result.records == corpus.records
    assert result.errors == []


def test_build_empty():
    """Test that an empty corpus yields an empty graph"""

    g = graph.build_graph([], {})
    assert all(g.count(kind) == 0 for kind in NodeKind)
    assert all(len(g.edges[kind]) == 0 for kind in EdgeKind)
    assert g.features[NodeKind.PAPER].shape == (0, graph.PAPER_NODE_WIDTH)


def test_build_counts():
    """Test node and edge counts of a one-paper graph"""

    record = _record("P1", authors=("Ada", "Grace"), keywords=("graphs",))
    g = graph.build_graph([record], {"P1": _vector(v=5.0)})
    assert [g.count(kind) for kind in NodeKind] == [1, 2, 1, 1]
    assert [len(g.edges[kind]) for kind in EdgeKind] == [0, 2, 1, 1]
    assert g.features[NodeKind.VENUE][0, 0] == 1.0
    assert list(g.roles) == [graph.Role.FIRST, graph.Role.LAST]
    assert g.features[NodeKind.PAPER].shape == (1, graph.PAPER_NODE_WIDTH)


def test_build_roles_and_dedup():
    """Test byline roles and entity deduplication by normalized name"""

    records = [
        _record("P1", authors=("Ada", "Alan", "Grace"), keywords=("Graphs", " graphs ")),
        _record("P2", authors=("ada",), venue="venue 000  conference", keywords=("GRAPHS",)),
    ]
    g = graph.build_graph(records, {"P1": _vector(), "P2": _vector()})
    assert g.nodes[NodeKind.AUTHOR] == ("ada", "alan", "grace")
    assert g.count(NodeKind.VENUE) == 1
    assert g.count(NodeKind.TOPIC) == 1
    roles = dict(zip(g.edge_pairs(EdgeKind.WRITES), g.roles))
    assert roles[("ada", "P1")] == graph.Role.FIRST
    assert roles[("alan", "P1")] == graph.Role.MIDDLE
    assert roles[("grace", "P1")] == graph.Role.LAST
    assert roles[("ada", "P2")] == graph.Role.FIRST


def test_build_cites():
    """Test the time rule and the dropping of dangling citations"""

    records = [
        _record("P1", 2015, references=("P2", "P9")),
        _record("P2", 2015, references=("P1",)),
        _record("P3", 2012, references=("P1", "P3")),
    ]
    g = graph.build_graph(records, {paper: _vector() for paper in ("P1", "P2", "P3")})
    assert sorted(g.edge_pairs(EdgeKind.CITES)) == [("P1", "P2"), ("P2", "P1")]


def test_build_order_independent(corpus):
    """Test that node order does not depend on record order"""

    forward = graph.build_graph(corpus.records, corpus.features)
    backward = graph.build_graph(list(reversed(corpus.records)), corpus.features)
    assert forward.nodes == backward.nodes
    for kind in EdgeKind:
        assert np.array_equal(forward.edges[kind], backward.edges[kind])
    for kind in NodeKind:
        assert np.array_equal(forward.features[kind], backward.features[kind])


def test_build_missing_features():
    """Test that every paper needs a feature vector"""

    with pytest.raises(MissingFeatures):
        graph.build_graph([_record("P1"), _record("P2")], {"P1": _vector()})


def test_build_normalized_features():
    """Test that paper node features are the normalized 8-column vector"""

    normalizer = FeatureNormalizer(h_min=0.0, h_max=2.0, year_min=2010, year_max=2020)
    g = graph.build_graph([_record("P1")], {"P1": _vector(year=2015, h=1.0, r=1)}, normalizer)
    assert np.allclose(g.features[NodeKind.PAPER][0], [1.0, 0.625, 0.25, 0.5, 0.5, 0.25, 0.5, 0.5])


def test_venue_excluded_view(corpus):
    """Test that only venue nodes and PublishedIn edges disappear"""

    g = graph.build_graph(corpus.records, corpus.features)
    view = graph.venue_excluded_view(g)
    assert view.count(NodeKind.VENUE) == 0
    assert len(view.edges[EdgeKind.PUBLISHED_IN]) == 0
    assert not view.has_venue_information
    for kind in (EdgeKind.CITES, EdgeKind.WRITES, EdgeKind.HAS_TOPIC):
        assert collections.Counter(view.edge_pairs(kind)) == collections.Counter(g.edge_pairs(kind))
    assert np.array_equal(view.features[NodeKind.PAPER], g.features[NodeKind.PAPER])
    assert graph.venue_excluded_view(view) is view

    single = graph.build_graph([_record("P1")], {"P1": _vector()})
    single_view = graph.venue_excluded_view(single)
    assert [single_view.count(kind) for kind in NodeKind] == [1, 1, 0, 0]
    assert len(single_view.edges[EdgeKind.PUBLISHED_IN]) == 0


def test_citation_view():
    """Test that only citations made by the given papers are kept"""

    records = [_record("P1", 2012), _record("P2", 2014, references=("P1",)), _record("P3", 2020, references=("P1",))]
    g = graph.build_graph(records, {paper: _vector() for paper in ("P1", "P2", "P3")})
    view = graph.citation_view(g, ["P1", "P2", "P404"])
    assert view.edge_pairs(EdgeKind.CITES) == [("P2", "P1")]
    assert view.nodes == g.nodes


def test_split_config():
    """Test year range coercion and validation"""

    config = graph.SplitConfig(train=(2000, 2009), val=(2010, 2010), test=(2011, 2012))
    assert isinstance(config.train, graph.YearRange)
    assert 2005 in config.train
    assert 2010 not in config.train

    with pytest.raises(OverlappingYearRanges):
        graph.SplitConfig(train=(2010, 2019), val=(2019, 2019))
    with pytest.raises(ConfigError):
        graph.SplitConfig(test=(2021, 2020))


def test_temporal_split():
    """Test split membership by publication year"""

    records = [_record(f"P{year}", year) for year in range(2010, 2020)] + [_record("P2005", 2005)]
    split = graph.temporal_split(records, graph.SplitConfig())
    assert len(split.train_ids) == 9
    assert split.val_ids == ("P2019",)
    assert split.test_ids == ()
    assert "P2005" not in split.train_ids + split.val_ids + split.test_ids


def test_export_graph(tmp_path):
    """Test the manifest and edge files of an exported graph"""

    record = _record("P1", authors=("Ada", "Grace"), keywords=("graphs",))
    g = graph.build_graph([record], {"P1": _vector()})
    manifest_path = graph.export_graph(g, tmp_path / "graph")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    assert manifest["nodes"] == {"paper": 1, "author": 2, "venue": 1, "topic": 1}
    writes = (tmp_path / "graph" / manifest["edges"]["writes"]).read_text(encoding="utf-8").splitlines()
    assert writes == ["src_id\tdst_id", "ada\tP1", "grace\tP1"]
