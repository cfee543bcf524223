"""Heterogeneous academic graph: paper records, ingestion, graph views and temporal splits

The graph has four node kinds (paper, author, venue, topic) and four stored edge kinds:

* ``CITES``: citing paper -> cited paper
* ``WRITES``: author -> paper, annotated with the author's byline role
* ``PUBLISHED_IN``: paper -> venue
* ``HAS_TOPIC``: paper -> topic

The encoder additionally walks every edge kind backwards (see :data:`RELATIONS`), so
information can flow both ways along each stored edge.

Paper node features are the 8-dimensional ``[R, Q, C, H, Y, A1, A2, A3]`` vector; venue
prestige lives on the venue node, never on the paper node.
"""
import dataclasses
import enum
import json
import logging
import math
import re
from pathlib import Path
from typing import TYPE_CHECKING
from typing import Any
from typing import Dict
from typing import Iterable
from typing import List
from typing import Mapping
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Set
from typing import Tuple

import numpy as np

from biascite.errors import ConfigError
from biascite.errors import IngestError
from biascite.errors import MalformedRecord
from biascite.errors import MissingFeatures
from biascite.errors import OverlappingYearRanges

if TYPE_CHECKING:  # pragma: no cover
    from biascite.agents import FeatureNormalizer
    from biascite.agents import PaperFeatureVector


__all__ = [
    "Author",
    "PaperRecord",
    "NodeKind",
    "EdgeKind",
    "Role",
    "Relation",
    "RELATIONS",
    "HeteroGraph",
    "YearRange",
    "SplitConfig",
    "CorpusSplit",
    "IngestResult",
    "normalize_name",
    "ingest_papers",
    "read_records",
    "write_records",
    "build_graph",
    "venue_excluded_view",
    "citation_view",
    "temporal_split",
    "export_graph",
    "PAPER_NODE_WIDTH",
]


logger = logging.getLogger(__name__)

PAPER_NODE_WIDTH = 8

_REQUIRED_FIELDS = ("id", "title", "pub_year", "venue_name", "authors")


@dataclasses.dataclass(frozen=True)
class Author:
    """One byline entry of a paper"""

    name: str
    affiliation: str = ""
    pub_count: int = 0
    total_citations: int = 0
    country: str = ""


@dataclasses.dataclass(frozen=True)
class PaperRecord:
    """Metadata of one paper as read from a line-delimited record stream

    ``label_citations`` is the five-year citation count and may be ``None`` at inference time.
    ``references`` lists the ids of the papers this paper cites.
    """

    id: str
    title: str
    pub_year: int
    venue_name: str
    authors: Tuple[Author, ...]
    abstract: str = ""
    keywords: Tuple[str, ...] = ()
    fulltext_urls: Tuple[str, ...] = ()
    references: Tuple[str, ...] = ()
    label_citations: Optional[int] = None

    def __post_init__(self):
        if not self.authors:
            raise ValueError(f"paper '{self.id}' has no authors")
        if self.label_citations is not None and self.label_citations < 0:
            raise ValueError(f"paper '{self.id}' has a negative citation label")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PaperRecord":
        """Decode a record object; field names are exactly the dataclass field names

        :raises ValueError: If a required field is missing or holds the wrong type
        """
        missing = [name for name in _REQUIRED_FIELDS if name not in data]
        if missing:
            raise ValueError(f"missing required field(s): {', '.join(missing)}")
        if not isinstance(data["authors"], list):
            raise ValueError("'authors' must be a list")

        authors = []
        for entry in data["authors"]:
            if isinstance(entry, str):
                entry = {"name": entry}
            if not isinstance(entry, dict) or not str(entry.get("name", "")).strip():
                raise ValueError("every author needs a non-empty 'name'")
            authors.append(
                Author(
                    name=str(entry["name"]),
                    affiliation=str(entry.get("affiliation") or ""),
                    pub_count=_nonneg_int(entry.get("pub_count"), "pub_count"),
                    total_citations=_nonneg_int(entry.get("total_citations"), "total_citations"),
                    country=str(entry.get("country") or ""),
                )
            )

        label = data.get("label_citations")
        return cls(
            id=str(data["id"]),
            title=str(data["title"]),
            pub_year=_strict_int(data["pub_year"], "pub_year"),
            venue_name=str(data["venue_name"] or ""),
            authors=tuple(authors),
            abstract=str(data.get("abstract") or ""),
            keywords=tuple(str(item) for item in data.get("keywords") or ()),
            fulltext_urls=tuple(str(item) for item in data.get("fulltext_urls") or ()),
            references=tuple(str(item) for item in data.get("references") or ()),
            label_citations=None if label is None else _nonneg_int(label, "label_citations"),
        )

    def to_dict(self) -> Dict[str, Any]:
        """Encode the record in the line-delimited stream format"""
        data = dataclasses.asdict(self)
        for key in ("authors", "keywords", "fulltext_urls", "references"):
            data[key] = list(data[key])
        return data


def _strict_int(value: Any, field: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
        raise ValueError(f"'{field}' must be an integer, got {value!r}")
    return int(value)


def _nonneg_int(value: Any, field: str) -> int:
    if value is None:
        return 0
    number = _strict_int(value, field)
    if number < 0:
        raise ValueError(f"'{field}' must be non-negative, got {number}")
    return number


class NodeKind(enum.Enum):
    """Node kinds of the academic graph"""

    PAPER = "paper"
    AUTHOR = "author"
    VENUE = "venue"
    TOPIC = "topic"


class EdgeKind(enum.Enum):
    """Stored (forward) edge kinds of the academic graph"""

    CITES = "cites"
    WRITES = "writes"
    PUBLISHED_IN = "published_in"
    HAS_TOPIC = "has_topic"


class Role(enum.IntEnum):
    """Byline position carried by ``WRITES`` edges"""

    FIRST = 0
    LAST = 1
    MIDDLE = 2


_EDGE_ENDPOINTS = {
    EdgeKind.CITES: (NodeKind.PAPER, NodeKind.PAPER),
    EdgeKind.WRITES: (NodeKind.AUTHOR, NodeKind.PAPER),
    EdgeKind.PUBLISHED_IN: (NodeKind.PAPER, NodeKind.VENUE),
    EdgeKind.HAS_TOPIC: (NodeKind.PAPER, NodeKind.TOPIC),
}


class Relation(NamedTuple):
    """A message-passing relation: a stored edge kind walked forwards or backwards"""

    name: str
    edge_kind: EdgeKind
    reverse: bool
    source: NodeKind
    target: NodeKind


RELATIONS: Tuple[Relation, ...] = tuple(
    relation
    for kind, (src, dst) in _EDGE_ENDPOINTS.items()
    for relation in (
        Relation(kind.value, kind, False, src, dst),
        Relation(f"rev_{kind.value}", kind, True, dst, src),
    )
)


@dataclasses.dataclass(frozen=True)
class HeteroGraph:
    """Immutable heterogeneous graph

    :param nodes: Ordered node ids per kind; a node's position is its index
    :param edges: ``(E, 2)`` integer arrays of ``(source index, target index)`` per edge kind
    :param roles: Byline role of every ``WRITES`` edge, aligned with ``edges[WRITES]``
    :param features: ``(N, width)`` feature matrix per node kind
    """

    nodes: Mapping[NodeKind, Tuple[str, ...]]
    edges: Mapping[EdgeKind, np.ndarray]
    roles: np.ndarray
    features: Mapping[NodeKind, np.ndarray]

    def __post_init__(self):
        for array in list(self.edges.values()) + list(self.features.values()) + [self.roles]:
            array.setflags(write=False)

    def count(self, kind: NodeKind) -> int:
        """Number of nodes of ``kind``"""
        return len(self.nodes[kind])

    def index(self, kind: NodeKind) -> Dict[str, int]:
        """Map node ids of ``kind`` to their positions"""
        return {node: position for position, node in enumerate(self.nodes[kind])}

    @property
    def has_venue_information(self) -> bool:
        """Whether any venue node or ``PUBLISHED_IN`` edge is present"""
        return self.count(NodeKind.VENUE) > 0 or len(self.edges[EdgeKind.PUBLISHED_IN]) > 0

    def relation_edges(self, relation: Relation) -> Tuple[np.ndarray, np.ndarray]:
        """Return ``(source indices, target indices)`` of a message-passing relation"""
        pairs = self.edges[relation.edge_kind]
        if relation.reverse:
            return pairs[:, 1], pairs[:, 0]
        return pairs[:, 0], pairs[:, 1]

    def edge_pairs(self, kind: EdgeKind) -> List[Tuple[str, str]]:
        """Return the edges of ``kind`` as ``(source id, target id)`` pairs"""
        src_kind, dst_kind = _EDGE_ENDPOINTS[kind]
        src_ids, dst_ids = self.nodes[src_kind], self.nodes[dst_kind]
        return [(src_ids[src], dst_ids[dst]) for src, dst in self.edges[kind]]


class YearRange(NamedTuple):
    """Inclusive range of publication years"""

    first: int
    last: int

    def __contains__(self, year: object) -> bool:
        return isinstance(year, int) and self.first <= year <= self.last

    def overlaps(self, other: "YearRange") -> bool:
        return self.first <= other.last and other.first <= self.last


@dataclasses.dataclass(frozen=True)
class SplitConfig:
    """Publication-year ranges of the train/validation/test splits"""

    train: YearRange = YearRange(2010, 2018)
    val: YearRange = YearRange(2019, 2019)
    test: YearRange = YearRange(2020, 2020)

    def __post_init__(self):
        for name in ("train", "val", "test"):
            span = YearRange(*getattr(self, name))
            if span.first > span.last:
                raise ConfigError(f"split '{name}' year range is reversed: {span}")
            object.__setattr__(self, name, span)
        named = (("train", self.train), ("val", self.val), ("test", self.test))
        for position, (left_name, left) in enumerate(named):
            for right_name, right in named[position + 1 :]:
                if left.overlaps(right):
                    raise OverlappingYearRanges(
                        f"'{left_name}' {tuple(left)} overlaps '{right_name}' {tuple(right)}"
                    )


@dataclasses.dataclass(frozen=True)
class CorpusSplit:
    """Disjoint paper id sets selected by publication year"""

    train_ids: Tuple[str, ...]
    val_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]
    split_years: SplitConfig


class IngestResult(NamedTuple):
    """Records decoded from a stream plus the errors met on the way"""

    records: List[PaperRecord]
    errors: List[MalformedRecord]


_NAME_SPACE = re.compile(r"\s+")


def normalize_name(name: str) -> str:
    """Case-folded, whitespace-normalized entity name used for deduplication"""
    return _NAME_SPACE.sub(" ", name.casefold()).strip()


def ingest_papers(
    stream: Iterable[str], year_range: Optional[Tuple[int, int]] = None
) -> IngestResult:
    """Decode a line-delimited record stream

    Blank lines are skipped. Malformed lines and duplicate ids are collected as
    :class:`MalformedRecord` errors carrying their one-based line number.

    :param stream: Iterable of text lines, e.g. an open file
    :param year_range: Optional inclusive corpus year range; papers outside are malformed
    :returns: Valid records in input order and the collected errors
    :raises IngestError: If the stream held at least one line and every line failed
    """
    records: List[PaperRecord] = []
    errors: List[MalformedRecord] = []
    seen: Set[str] = set()
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            if not isinstance(data, dict):
                raise ValueError("record must be an object")
            record = PaperRecord.from_dict(data)
            if year_range is not None and not year_range[0] <= record.pub_year <= year_range[1]:
                raise ValueError(f"pub_year {record.pub_year} outside corpus range {year_range}")
            if record.id in seen:
                raise ValueError(f"duplicate paper id '{record.id}'")
        except ValueError as err:
            # json.JSONDecodeError is a ValueError too
            error = MalformedRecord(line_no, str(err))
            logger.warning("Skipping malformed record: %s", error)
            errors.append(error)
            continue
        seen.add(record.id)
        records.append(record)

    if errors and not records:
        raise IngestError(f"all {len(errors)} record line(s) are malformed")
    return IngestResult(records, errors)


def read_records(path: Path, year_range: Optional[Tuple[int, int]] = None) -> IngestResult:
    """Ingest the line-delimited record file at ``path``"""
    with Path(path).open(encoding="utf-8") as infile:
        return ingest_papers(infile, year_range=year_range)


def write_records(records: Iterable[PaperRecord], path: Path) -> None:
    """Write records as one JSON object per line, keys sorted"""
    with Path(path).open("w", encoding="utf-8") as outfile:
        for record in records:
            outfile.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def build_graph(
    records: Sequence[PaperRecord],
    feats: Mapping[str, "PaperFeatureVector"],
    normalizer: Optional["FeatureNormalizer"] = None,
) -> HeteroGraph:
    """Build the heterogeneous graph of a corpus

    Authors, venues and topics are deduplicated by :func:`normalize_name`. Node order is the
    sorted order of ids, so the result does not depend on the order of ``records``. Cites
    edges whose target is not in the corpus, or whose citing paper is older than the cited
    paper, are dropped.

    Node features:

    * paper: the 8-dim ``[R, Q, C, H, Y, A1, A2, A3]`` vector, normalized when a
      ``normalizer`` is given
    * author: ``log(1 + total_citations)`` divided by the corpus maximum
    * venue: normalized prestige ``(V - 1) / 4``
    * topic: mean hotness ``H`` of the papers carrying the topic, divided by the maximum

    :param records: Corpus papers
    :param feats: Feature vector per paper id
    :param normalizer: Optional fitted normalizer applied to paper node features
    :raises MissingFeatures: If a paper has no feature vector
    """
    for record in records:
        if record.id not in feats:
            raise MissingFeatures(record.id)

    papers = sorted(records, key=lambda item: item.id)
    paper_ids = tuple(record.id for record in papers)
    paper_index = {paper: position for position, paper in enumerate(paper_ids)}
    years = {record.id: record.pub_year for record in papers}

    author_citations: Dict[str, int] = {}
    venue_prestige: Dict[str, float] = {}
    topic_hotness: Dict[str, List[float]] = {}
    for record in papers:
        for author in record.authors:
            key = normalize_name(author.name)
            author_citations[key] = max(author_citations.get(key, 0), author.total_citations)
        venue = normalize_name(record.venue_name)
        if venue:
            venue_prestige[venue] = max(venue_prestige.get(venue, 1.0), feats[record.id].v)
        for keyword in record.keywords:
            topic = normalize_name(keyword)
            if topic:
                topic_hotness.setdefault(topic, []).append(feats[record.id].h)

    author_ids = tuple(sorted(author_citations))
    venue_ids = tuple(sorted(venue_prestige))
    topic_ids = tuple(sorted(topic_hotness))
    author_index = {name: position for position, name in enumerate(author_ids)}
    venue_index = {name: position for position, name in enumerate(venue_ids)}
    topic_index = {name: position for position, name in enumerate(topic_ids)}

    cites: Set[Tuple[int, int]] = set()
    writes: Dict[Tuple[int, int], Role] = {}
    published: Set[Tuple[int, int]] = set()
    has_topic: Set[Tuple[int, int]] = set()
    for record in papers:
        src = paper_index[record.id]
        for cited in record.references:
            if cited not in paper_index or cited == record.id:
                continue
            if years[cited] > record.pub_year:
                logger.debug("Dropping Cites edge %s -> %s against time order", record.id, cited)
                continue
            cites.add((src, paper_index[cited]))
        last = len(record.authors) - 1
        for position, author in enumerate(record.authors):
            role = Role.FIRST if position == 0 else Role.LAST if position == last else Role.MIDDLE
            writes.setdefault((author_index[normalize_name(author.name)], src), role)
        venue = normalize_name(record.venue_name)
        if venue:
            published.add((src, venue_index[venue]))
        for keyword in record.keywords:
            topic = normalize_name(keyword)
            if topic:
                has_topic.add((src, topic_index[topic]))

    if normalizer is not None:
        paper_matrix = normalizer.node_matrix([feats[paper] for paper in paper_ids])
    else:
        paper_matrix = np.array([feats[paper].node_vector() for paper in paper_ids])
    paper_matrix = paper_matrix.reshape(len(paper_ids), PAPER_NODE_WIDTH)

    cite_scale = max((math.log1p(value) for value in author_citations.values()), default=0.0)
    author_matrix = np.array(
        [
            [math.log1p(author_citations[name]) / cite_scale if cite_scale > 0 else 0.0]
            for name in author_ids
        ]
    ).reshape(len(author_ids), 1)
    venue_matrix = np.array(
        [[(venue_prestige[name] - 1.0) / 4.0] for name in venue_ids]
    ).reshape(len(venue_ids), 1)
    topic_means = {name: float(np.mean(values)) for name, values in topic_hotness.items()}
    hot_scale = max(topic_means.values(), default=0.0)
    topic_matrix = np.array(
        [[topic_means[name] / hot_scale if hot_scale > 0 else 0.0] for name in topic_ids]
    ).reshape(len(topic_ids), 1)

    ordered_writes = sorted(writes)
    return HeteroGraph(
        nodes={
            NodeKind.PAPER: paper_ids,
            NodeKind.AUTHOR: author_ids,
            NodeKind.VENUE: venue_ids,
            NodeKind.TOPIC: topic_ids,
        },
        edges={
            EdgeKind.CITES: _pairs(sorted(cites)),
            EdgeKind.WRITES: _pairs(ordered_writes),
            EdgeKind.PUBLISHED_IN: _pairs(sorted(published)),
            EdgeKind.HAS_TOPIC: _pairs(sorted(has_topic)),
        },
        roles=np.array([int(writes[pair]) for pair in ordered_writes], dtype=np.int64),
        features={
            NodeKind.PAPER: paper_matrix,
            NodeKind.AUTHOR: author_matrix,
            NodeKind.VENUE: venue_matrix,
            NodeKind.TOPIC: topic_matrix,
        },
    )


def _pairs(pairs: Sequence[Tuple[int, int]]) -> np.ndarray:
    return np.array(pairs, dtype=np.int64).reshape(len(pairs), 2)


def venue_excluded_view(g: HeteroGraph) -> HeteroGraph:
    """Drop every venue node and ``PUBLISHED_IN`` edge, keeping everything else as is

    Paper node features never hold venue prestige, so they pass through unchanged. A graph
    without venue information is returned as is, which makes the view idempotent.
    """
    if not g.has_venue_information:
        return g
    return dataclasses.replace(
        g,
        nodes={**g.nodes, NodeKind.VENUE: ()},
        edges={**g.edges, EdgeKind.PUBLISHED_IN: _pairs([])},
        features={**g.features, NodeKind.VENUE: np.zeros((0, 1))},
    )


def citation_view(g: HeteroGraph, citing_ids: Iterable[str]) -> HeteroGraph:
    """Keep only the ``CITES`` edges whose citing paper is in ``citing_ids``

    Used to hide citations made by papers outside the training years while training.
    """
    index = g.index(NodeKind.PAPER)
    allowed = np.zeros(g.count(NodeKind.PAPER), dtype=bool)
    allowed[[index[paper] for paper in citing_ids if paper in index]] = True
    cites = g.edges[EdgeKind.CITES]
    keep = allowed[cites[:, 0]] if len(cites) else np.zeros(0, dtype=bool)
    return dataclasses.replace(g, edges={**g.edges, EdgeKind.CITES: cites[keep]})


def temporal_split(records: Iterable[PaperRecord], config: SplitConfig) -> CorpusSplit:
    """Assign papers to the train/validation/test splits by publication year

    Papers outside every range are left out.
    """
    train, val, test = [], [], []
    for record in records:
        if record.pub_year in config.train:
            train.append(record.id)
        elif record.pub_year in config.val:
            val.append(record.id)
        elif record.pub_year in config.test:
            test.append(record.id)
    return CorpusSplit(tuple(train), tuple(val), tuple(test), config)


def export_graph(g: HeteroGraph, directory: Path) -> Path:
    """Write the graph manifest and one tab-separated edge file per edge kind

    :returns: Path of the written manifest
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "nodes": {kind.value: g.count(kind) for kind in NodeKind},
        "edges": {kind.value: f"edges_{kind.value}.tsv" for kind in EdgeKind},
    }
    for kind in EdgeKind:
        lines = ["src_id\tdst_id"] + [f"{src}\t{dst}" for src, dst in g.edge_pairs(kind)]
        (directory / f"edges_{kind.value}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
