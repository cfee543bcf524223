"""Deterministic feature agents producing the implicit-factor scores of a paper

Six agents each score one factor:

* ``A``: role-aware author reputation, split into first (A1), last (A2) and other (A3) authors
* ``V``: venue prestige, matched against a ranking table
* ``R``: reproducibility, open-source repository links
* ``C``: collaboration breadth
* ``H``: topic hotness from prior-year keyword counts
* ``Q``: text quality, from a built-in heuristic or an external scorer

Every agent is a pure function of the record and an immutable :class:`AgentContext`
snapshot, so :func:`extract_all` may run them concurrently.
"""
import concurrent.futures
import csv
import dataclasses
import enum
import logging
import math
import re
from pathlib import Path
from typing import Any
from typing import Dict
from typing import FrozenSet
from typing import Iterable
from typing import List
from typing import Mapping
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
import requests

from biascite.errors import ScorerError
from biascite.errors import ScorerTimeout
from biascite.errors import VerifierUnavailable
from biascite.graph import Author
from biascite.graph import PaperRecord
from biascite.graph import SplitConfig
from biascite.graph import normalize_name


__all__ = [
    "PaperFeatureVector",
    "FeatureNormalizer",
    "FeatureViews",
    "VenueTier",
    "VenueEntry",
    "VenueRankingTable",
    "InstitutionTier",
    "InstitutionDirectory",
    "KeywordCounts",
    "ReputationScale",
    "HeuristicQualityScorer",
    "RemoteQualityScorer",
    "GitHubRepositoryVerifier",
    "AgentContext",
    "Diagnostic",
    "Extraction",
    "PLUS_FIELDS",
    "MINUS_FIELDS",
    "NODE_FIELDS",
    "normalize_venue",
    "venue_similarity",
    "score_author_reputation",
    "score_venue_prestige",
    "score_reproducibility",
    "score_collaboration",
    "score_topic_hotness",
    "score_text_quality",
    "extract_features",
    "extract_all",
    "read_features",
    "write_features",
    "write_diagnostics",
]


logger = logging.getLogger(__name__)

PLUS_FIELDS = ("v", "r", "c", "h", "q", "pub_year", "a1", "a2", "a3")
MINUS_FIELDS = PLUS_FIELDS[1:]
NODE_FIELDS = ("r", "q", "c", "h", "pub_year", "a1", "a2", "a3")

_BOUNDED_FIELDS = ("a1", "a2", "a3", "v", "c", "q")

FUZZY_THRESHOLD = 0.90
DEFAULT_ROLE_SCORE = 3.0


@dataclasses.dataclass(frozen=True)
class PaperFeatureVector:
    """Agent outputs of one paper in raw units

    ``a1``-``a3``, ``v``, ``c`` and ``q`` are 1-5 scores, ``r`` is 0 or 1 and ``h`` is a
    non-negative hotness value.
    """

    a1: float
    a2: float
    a3: float
    v: float
    r: int
    c: float
    h: float
    q: float
    pub_year: int

    def __post_init__(self):
        for name in _BOUNDED_FIELDS:
            value = getattr(self, name)
            if not math.isfinite(value) or not 1.0 <= value <= 5.0:
                raise ValueError(f"feature '{name}' must lie in [1, 5], got {value}")
        if self.r not in (0, 1):
            raise ValueError(f"feature 'r' must be 0 or 1, got {self.r}")
        if not math.isfinite(self.h) or self.h < 0:
            raise ValueError(f"feature 'h' must be a finite non-negative value, got {self.h}")

    def values(self, fields: Sequence[str]) -> List[float]:
        return [float(getattr(self, name)) for name in fields]

    def plus_vector(self) -> np.ndarray:
        """Raw venue-inclusive vector ``[V, R, C, H, Q, Y, A1, A2, A3]``"""
        return np.array(self.values(PLUS_FIELDS))

    def minus_vector(self) -> np.ndarray:
        """Raw venue-excluded vector ``[R, C, H, Q, Y, A1, A2, A3]``"""
        return np.array(self.values(MINUS_FIELDS))

    def node_vector(self) -> np.ndarray:
        """Raw paper node attributes ``[R, Q, C, H, Y, A1, A2, A3]``"""
        return np.array(self.values(NODE_FIELDS))


@dataclasses.dataclass(frozen=True)
class FeatureViews:
    """Normalized venue-inclusive and venue-excluded feature matrices"""

    f_plus: np.ndarray
    f_minus: np.ndarray


@dataclasses.dataclass(frozen=True)
class FeatureNormalizer:
    """Maps raw feature values to model inputs

    1-5 scores become ``(x - 1) / 4``, ``R`` passes through, hotness and publication year are
    min-max scaled with statistics of the training split only.
    """

    h_min: float = 0.0
    h_max: float = 1.0
    year_min: float = 0.0
    year_max: float = 1.0

    @classmethod
    def fit(cls, vectors: Iterable[PaperFeatureVector]) -> "FeatureNormalizer":
        """Fit the min-max statistics on the (training) vectors"""
        vectors = list(vectors)
        if not vectors:
            raise ValueError("cannot fit a feature normalizer on zero vectors")
        hot = [item.h for item in vectors]
        years = [float(item.pub_year) for item in vectors]
        return cls(min(hot), max(hot), min(years), max(years))

    def normalize(self, name: str, value: float) -> float:
        """Normalize one raw value of feature ``name``"""
        if name in _BOUNDED_FIELDS:
            return (value - 1.0) / 4.0
        if name == "r":
            return float(value)
        if name == "h":
            return _scale(value, self.h_min, self.h_max)
        if name == "pub_year":
            return _scale(value, self.year_min, self.year_max)
        raise KeyError(name)

    def matrix(self, vectors: Sequence[PaperFeatureVector], fields: Sequence[str]) -> np.ndarray:
        return np.array(
            [[self.normalize(name, getattr(item, name)) for name in fields] for item in vectors],
            dtype=np.float64,
        ).reshape(len(vectors), len(fields))

    def node_matrix(self, vectors: Sequence[PaperFeatureVector]) -> np.ndarray:
        """Normalized paper node attributes, one row per vector"""
        return self.matrix(vectors, NODE_FIELDS)

    def views(self, vectors: Sequence[PaperFeatureVector]) -> FeatureViews:
        """Normalized ``f_plus`` (9 columns) and ``f_minus`` (8 columns) matrices"""
        return FeatureViews(self.matrix(vectors, PLUS_FIELDS), self.matrix(vectors, MINUS_FIELDS))

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "normalizer/h": np.array([self.h_min, self.h_max]),
            "normalizer/pub_year": np.array([self.year_min, self.year_max]),
        }

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "FeatureNormalizer":
        hot, years = arrays["normalizer/h"], arrays["normalizer/pub_year"]
        return cls(float(hot[0]), float(hot[1]), float(years[0]), float(years[1]))


def _scale(value: float, low: float, high: float) -> float:
    return (value - low) / (high - low) if high > low else 0.0


class VenueTier(enum.Enum):
    """Ranking tiers of the venue table and their prestige scores"""

    A_STAR = "A*"
    A = "A"
    B = "B"
    C = "C"
    UNRANKED = "unranked"

    @property
    def score(self) -> float:
        return {"A*": 5.0, "A": 4.0, "B": 3.0, "C": 2.0, "unranked": 1.0}[self.value]


@dataclasses.dataclass(frozen=True)
class VenueEntry:
    canonical_name: str
    aliases: Tuple[str, ...]
    tier: VenueTier


_ABBREVIATIONS = {
    "intl": "international",
    "int": "international",
    "conf": "conference",
    "proc": "proceedings",
    "symp": "symposium",
    "trans": "transactions",
    "j": "journal",
    "jour": "journal",
    "assoc": "association",
    "comput": "computing",
    "natl": "national",
    "eur": "european",
    "ann": "annual",
    "wkshp": "workshop",
    "ws": "workshop",
}
_VENUE_STOPWORDS = frozenset({"a", "an", "and", "at", "for", "in", "of", "on", "the", "to"})
_VENUE_TOKEN = re.compile(r"[a-z0-9*]+")


def normalize_venue(name: str) -> str:
    """Case-fold, expand common abbreviations and drop punctuation and stopwords"""
    text = name.casefold().replace("&", " and ")
    tokens = [_ABBREVIATIONS.get(token, token) for token in _VENUE_TOKEN.findall(text)]
    return " ".join(token for token in tokens if token not in _VENUE_STOPWORDS)


def venue_similarity(left: str, right: str) -> float:
    """Token-set intersection-over-union of two venue names after normalization"""
    left_tokens = frozenset(normalize_venue(left).split())
    right_tokens = frozenset(normalize_venue(right).split())
    if not left_tokens or not right_tokens:
        return 0.0
    return len(left_tokens & right_tokens) / len(left_tokens | right_tokens)


class VenueRankingTable:
    """Venue ranking lookup with exact and fuzzy matching

    :param entries: Table rows; canonical names must be unique after normalization
    :raises ValueError: On duplicate canonical names
    """

    def __init__(self, entries: Iterable[VenueEntry]):
        self.entries: Tuple[VenueEntry, ...] = tuple(entries)
        self._exact: Dict[str, VenueEntry] = {}
        self._tokens: List[Tuple[FrozenSet[str], VenueEntry]] = []
        canonical = set()
        for entry in self.entries:
            key = normalize_venue(entry.canonical_name)
            if key in canonical:
                raise ValueError(f"duplicate canonical venue name '{entry.canonical_name}'")
            canonical.add(key)
            for name in (entry.canonical_name,) + entry.aliases:
                normalized = normalize_venue(name)
                if normalized:
                    self._exact.setdefault(normalized, entry)
                    self._tokens.append((frozenset(normalized.split()), entry))

    def __len__(self) -> int:
        return len(self.entries)

    def match(self, venue_name: str) -> Optional[VenueEntry]:
        """Return the matching entry: exact normalized hit first, else best fuzzy match"""
        normalized = normalize_venue(venue_name)
        if not normalized:
            return None
        if normalized in self._exact:
            return self._exact[normalized]
        tokens = frozenset(normalized.split())
        best: Optional[VenueEntry] = None
        best_score = 0.0
        for candidate, entry in self._tokens:
            score = len(tokens & candidate) / len(tokens | candidate)
            if score > best_score:
                best, best_score = entry, score
        return best if best_score >= FUZZY_THRESHOLD else None

    @classmethod
    def load(cls, path: Path) -> "VenueRankingTable":
        """Read a tab-separated ``canonical_name, aliases, tier`` file (aliases pipe-separated)"""
        entries = []
        for row in _read_rows(path):
            aliases = tuple(item.strip() for item in row["aliases"].split("|") if item.strip())
            entries.append(VenueEntry(row["canonical_name"], aliases, VenueTier(row["tier"])))
        return cls(entries)

    def write(self, path: Path) -> None:
        _write_rows(
            path,
            ("canonical_name", "aliases", "tier"),
            (
                (entry.canonical_name, "|".join(entry.aliases), entry.tier.value)
                for entry in self.entries
            ),
        )


class InstitutionTier(enum.Enum):
    """Institution prestige tiers and their prestige values"""

    TOP = "top"
    MID = "mid"
    OTHER = "other"

    @property
    def prestige(self) -> float:
        return {"top": 1.0, "mid": 0.5, "other": 0.0}[self.value]


class InstitutionDirectory:
    """Institution prestige and country lookup (the external-knowledge snapshot)

    :param entries: Mapping of institution name to ``(tier, country)``
    :param default_prestige: Prestige of institutions missing from the directory
    """

    def __init__(
        self,
        entries: Optional[Mapping[str, Tuple[InstitutionTier, str]]] = None,
        default_prestige: float = 0.0,
    ):
        self._entries = {
            normalize_name(name): (tier, country) for name, (tier, country) in (entries or {}).items()
        }
        self.default_prestige = default_prestige

    def __len__(self) -> int:
        return len(self._entries)

    def prestige(self, institution: str) -> float:
        entry = self._entries.get(normalize_name(institution))
        return entry[0].prestige if entry else self.default_prestige

    def country(self, institution: str) -> str:
        entry = self._entries.get(normalize_name(institution))
        return entry[1] if entry else ""

    @classmethod
    def load(cls, path: Path) -> "InstitutionDirectory":
        """Read a tab-separated ``name, tier, country`` file"""
        return cls(
            {
                row["name"]: (InstitutionTier(row["tier"]), row.get("country") or "")
                for row in _read_rows(path)
            }
        )

    def write(self, path: Path) -> None:
        _write_rows(
            path,
            ("name", "tier", "country"),
            ((name, tier.value, country) for name, (tier, country) in sorted(self._entries.items())),
        )


class KeywordCounts:
    """Number of papers per ``(keyword, year)``"""

    def __init__(self, counts: Optional[Mapping[Tuple[str, int], int]] = None):
        self._counts = {
            (normalize_name(keyword), int(year)): int(count)
            for (keyword, year), count in (counts or {}).items()
        }

    def __len__(self) -> int:
        return len(self._counts)

    def count(self, keyword: str, year: int) -> int:
        return self._counts.get((normalize_name(keyword), year), 0)

    def prior_year(self, keywords: Iterable[str], pub_year: int) -> Dict[str, int]:
        """Counts of ``keywords`` in the year before ``pub_year``"""
        return {keyword: self.count(keyword, pub_year - 1) for keyword in keywords}

    @classmethod
    def from_records(cls, records: Iterable[PaperRecord]) -> "KeywordCounts":
        counts: Dict[Tuple[str, int], int] = {}
        for record in records:
            for keyword in {normalize_name(item) for item in record.keywords}:
                if keyword:
                    counts[(keyword, record.pub_year)] = counts.get((keyword, record.pub_year), 0) + 1
        return cls(counts)

    @classmethod
    def load(cls, path: Path) -> "KeywordCounts":
        """Read a tab-separated ``keyword, year, count`` file"""
        return cls({(row["keyword"], int(row["year"])): int(row["count"]) for row in _read_rows(path)})

    def write(self, path: Path) -> None:
        _write_rows(
            path,
            ("keyword", "year", "count"),
            ((keyword, year, count) for (keyword, year), count in sorted(self._counts.items())),
        )


@dataclasses.dataclass(frozen=True)
class ReputationScale:
    """Corpus maxima used to normalize author metadata"""

    max_log_citations: float = 0.0
    max_log_pub_count: float = 0.0

    @classmethod
    def fit(cls, records: Iterable[PaperRecord]) -> "ReputationScale":
        citations, counts = 0, 0
        for record in records:
            for author in record.authors:
                citations = max(citations, author.total_citations)
                counts = max(counts, author.pub_count)
        return cls(math.log1p(citations), math.log1p(counts))


class Diagnostic(NamedTuple):
    """A soft failure of one agent on one paper"""

    agent: str
    message: str


_TEXT_TOKEN = re.compile(r"[a-z0-9]+")
_PROBLEM_CUES = frozenset(
    {"problem", "problems", "challenge", "challenges", "gap", "gaps", "limitation",
     "limitations", "however", "issue", "issues", "lack"}
)
_METHOD_CUES = frozenset(
    {"propose", "proposes", "proposed", "method", "methods", "approach", "framework",
     "algorithm", "introduce", "introduces", "present", "presents"}
)
_RESULT_CUES = frozenset(
    {"result", "results", "show", "shows", "outperform", "outperforms", "experiment",
     "experiments", "demonstrate", "demonstrates", "achieve", "achieves", "improve",
     "improves", "improvement"}
)


def _band(value: float, low: float, high: float, falloff: float) -> float:
    if value < low:
        return value / low
    if value <= high:
        return 1.0
    return max(0.0, 1.0 - (value - high) / falloff)


class HeuristicQualityScorer:
    """Deterministic stand-in for an LLM text grader

    ``Q = 1 + 4 * mean(length adequacy, structure cues, type-token band)`` where

    * length adequacy is 1 for abstracts of 100-400 words, ramps up linearly below and
      decays to 0 at 800 words
    * structure cues is the fraction of {problem, method, result} cue groups present in the
      title and abstract
    * the type-token band is 1 for a type-token ratio in [0.4, 0.8], falling to 0 at 0 and 1
    """

    def score(self, title: str, abstract: str) -> float:
        words = _TEXT_TOKEN.findall(abstract.casefold())
        if not words:
            return 1.0
        length = _band(len(words), 100, 400, 400)
        present = set(words) | set(_TEXT_TOKEN.findall(title.casefold()))
        cues = sum(bool(present & group) for group in (_PROBLEM_CUES, _METHOD_CUES, _RESULT_CUES))
        ratio = _band(len(set(words)) / len(words), 0.4, 0.8, 0.2)
        return 1.0 + 4.0 * (length + cues / 3.0 + ratio) / 3.0


class RemoteQualityScorer:
    """Client of an external text-quality grading service

    Request body ``{"title", "abstract", "exemplar_refs"}``, response ``{"score", "rationale"}``.

    :param endpoint: URL accepting the JSON request via POST
    :param timeout: Seconds before the request is abandoned
    :param exemplar_refs: References to best-paper exemplars forwarded with each request
    :param session: Optional :class:`requests.Session` to reuse
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        exemplar_refs: Sequence[str] = (),
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint
        self.timeout = timeout
        self.exemplar_refs = tuple(exemplar_refs)
        self.session = session or requests.Session()

    def score(self, title: str, abstract: str) -> float:
        payload = {"title": title, "abstract": abstract, "exemplar_refs": list(self.exemplar_refs)}
        try:
            response = self.session.post(self.endpoint, json=payload, timeout=self.timeout)
            response.raise_for_status()
            value = float(response.json()["score"])
        except requests.Timeout as err:
            raise ScorerTimeout(f"quality scorer at {self.endpoint} timed out") from err
        except (requests.RequestException, ValueError, KeyError, TypeError) as err:
            raise ScorerError(f"quality scorer at {self.endpoint} failed: {err}") from err
        if not math.isfinite(value):
            raise ScorerError(f"quality scorer returned a non-finite score {value}")
        return value


_REPO_URL = re.compile(
    r"(?:https?://)?(?:www\.)?(github\.com|gitlab\.com|bitbucket\.org)/([A-Za-z0-9_.-]+)/([A-Za-z0-9_.-]+)",
    re.IGNORECASE,
)


def find_repositories(*texts: str) -> List[str]:
    """Return ``host/owner/repo`` strings of every repository link found in ``texts``"""
    found = []
    for text in texts:
        for host, owner, repo in _REPO_URL.findall(text):
            repo = repo.rstrip(".")
            if repo.endswith(".git"):
                repo = repo[: -len(".git")]
            if repo:
                link = f"{host.lower()}/{owner}/{repo}"
                if link not in found:
                    found.append(link)
    return found


class GitHubRepositoryVerifier:
    """Check through the GitHub REST API that a linked repository exists and is not empty

    Repositories hosted elsewhere are accepted on the link alone.

    :param token: Optional API token
    :param timeout: Seconds per request
    :param session: Optional :class:`requests.Session` to reuse
    """

    api_root = "https://api.github.com/repos"

    def __init__(
        self,
        token: Optional[str] = None,
        timeout: float = 10.0,
        session: Optional[requests.Session] = None,
    ):
        self.timeout = timeout
        self.session = session or requests.Session()
        if token:
            self.session.headers["Authorization"] = f"Bearer {token}"

    def is_nonempty(self, link: str) -> bool:
        host, owner, repo = link.split("/", 2)
        if host != "github.com":
            return True
        try:
            response = self.session.get(f"{self.api_root}/{owner}/{repo}", timeout=self.timeout)
        except requests.RequestException as err:
            raise VerifierUnavailable(f"cannot reach the GitHub API: {err}") from err
        if response.status_code == 404:
            return False
        if response.status_code != 200:
            raise VerifierUnavailable(f"GitHub API answered HTTP {response.status_code}")
        try:
            return int(response.json().get("size", 0)) > 0
        except (ValueError, TypeError) as err:
            raise VerifierUnavailable("GitHub API returned an unreadable body") from err


@dataclasses.dataclass(frozen=True)
class AgentContext:
    """Immutable dependency snapshot shared by all agents

    ``quality_scorer`` defaults to :class:`HeuristicQualityScorer`; ``repo_verifier`` is
    optional and only consulted when repository links are found.
    """

    venue_table: VenueRankingTable
    institutions: InstitutionDirectory
    keyword_counts: KeywordCounts
    reputation: ReputationScale = ReputationScale()
    quality_scorer: Any = None
    repo_verifier: Any = None

    @classmethod
    def from_corpus(
        cls,
        records: Iterable[PaperRecord],
        venue_table: VenueRankingTable,
        institutions: InstitutionDirectory,
        keyword_counts: KeywordCounts,
        split: SplitConfig = SplitConfig(),
        **kwargs: Any,
    ) -> "AgentContext":
        """Build a context whose reputation scale is fitted on the training years of ``records``

        A corpus without any training-year paper falls back to fitting on every record.
        """
        records = list(records)
        fitted = [record for record in records if record.pub_year in split.train]
        if not fitted:
            logger.warning("No paper in the training years %s, fitting the reputation scale on all papers", split.train)
            fitted = records
        return cls(venue_table, institutions, keyword_counts, ReputationScale.fit(fitted), **kwargs)


def _author_score(author: Author, wiki: InstitutionDirectory, scale: ReputationScale) -> float:
    def share(value: int, top: float) -> float:
        return min(math.log1p(value) / top, 1.0) if top > 0 else 0.0

    citations = share(author.total_citations, scale.max_log_citations)
    output = share(author.pub_count, scale.max_log_pub_count)
    prestige = wiki.prestige(author.affiliation) if author.affiliation else wiki.default_prestige
    return 1.0 + 4.0 * (citations + output + prestige) / 3.0


def score_author_reputation(
    authors: Sequence[Author],
    wiki: InstitutionDirectory,
    scale: ReputationScale = ReputationScale(),
) -> Tuple[float, float, float]:
    """Score the first, last and remaining authors on a 1-5 scale

    Each author scores ``1 + 4 * mean(log citations share, log publications share, prestige)``
    with shares taken against the corpus maxima in ``scale``. A single author is both first
    and last; ``A3`` is 3.0 when there are no middle authors.
    """
    if not authors:
        raise ValueError("author reputation needs at least one author")
    scores = [_author_score(author, wiki, scale) for author in authors]
    middle = scores[1:-1]
    return scores[0], scores[-1], float(np.mean(middle)) if middle else DEFAULT_ROLE_SCORE


def score_venue_prestige(venue_name: str, table: VenueRankingTable) -> float:
    """Map the venue's ranking tier to 5 (A*), 4 (A), 3 (B), 2 (C) or 1 (unranked/no match)"""
    entry = table.match(venue_name)
    return entry.tier.score if entry else VenueTier.UNRANKED.score


def score_reproducibility(
    title: str,
    abstract: str,
    fulltext_urls: Sequence[str],
    verifier: Any = None,
    diagnostics: Optional[List[Diagnostic]] = None,
) -> int:
    """Return 1 when an open-source repository link is found (and verified, if possible)

    Without a verifier any link counts. With one, at least one linked repository must be
    confirmed non-empty; if the verifier is unavailable the agent falls back to links only.
    """
    links = find_repositories(title, abstract, *fulltext_urls)
    if not links:
        return 0
    if verifier is None:
        return 1
    for link in links:
        try:
            if verifier.is_nonempty(link):
                return 1
        except VerifierUnavailable as err:
            logger.warning("Repository verifier unavailable, using link detection only: %s", err)
            if diagnostics is not None:
                diagnostics.append(Diagnostic("R", f"verifier unavailable: {err}"))
            return 1
    return 0


def score_collaboration(authors: Sequence[Author], wiki: InstitutionDirectory, band_offset: int = 1) -> float:
    """Composite 1-5 collaboration score

    ``C = 1 + 4 * mean(sat((n - o) / (8 - o)), sat((k - o) / (5 - o)), international)`` with ``n``
    authors, ``k`` distinct institutions, ``sat`` clipping to [0, 1] and ``international`` set
    when the authors span more than one country. Countries missing on an author are looked up
    through the institution directory.

    :param band_offset: ``o``; the default 1 puts a single-author, single-institution paper at
                        exactly 1, while 0 gives the plain ``sat(n / 8)`` and ``sat(k / 5)`` bands
    """
    if not authors:
        raise ValueError("collaboration needs at least one author")
    if band_offset not in (0, 1):
        raise ValueError(f"collaboration band offset must be 0 or 1, got {band_offset}")
    institutions = {normalize_name(item.affiliation) for item in authors if item.affiliation.strip()}
    countries = set()
    for author in authors:
        country = author.country or (wiki.country(author.affiliation) if author.affiliation else "")
        if country.strip():
            countries.add(normalize_name(country))

    def sat(value: float) -> float:
        return min(max(value, 0.0), 1.0)

    team = sat((len(authors) - band_offset) / (8.0 - band_offset))
    diversity = sat((len(institutions) - band_offset) / (5.0 - band_offset))
    international = 1.0 if len(countries) > 1 else 0.0
    return 1.0 + 4.0 * (team + diversity + international) / 3.0


def score_topic_hotness(keywords: Sequence[str], prior_year_counts: Mapping[str, int]) -> float:
    """``log(1 + mean prior-year paper count)`` over the keywords; 0 without keywords"""
    if not keywords:
        return 0.0
    counts = [max(int(prior_year_counts.get(keyword, 0)), 0) for keyword in keywords]
    return math.log1p(sum(counts) / len(counts))


def score_text_quality(
    title: str,
    abstract: str,
    scorer: Any = None,
    diagnostics: Optional[List[Diagnostic]] = None,
) -> float:
    """Text quality on a 1-5 scale

    A missing abstract takes the floor path. External scores are clamped to [1, 5]; when the
    external scorer fails the heuristic is used and a diagnostic is recorded.
    """
    heuristic = HeuristicQualityScorer()
    if not abstract.strip():
        return 1.0
    if scorer is None or isinstance(scorer, HeuristicQualityScorer):
        return heuristic.score(title, abstract)
    try:
        value = scorer.score(title, abstract)
    except ScorerError as err:
        logger.warning("Quality scorer failed, falling back to the heuristic: %s", err)
        if diagnostics is not None:
            diagnostics.append(Diagnostic("Q", f"scorer fallback: {err}"))
        return heuristic.score(title, abstract)
    return min(max(float(value), 1.0), 5.0)


class Extraction(NamedTuple):
    """Feature vector of one paper plus the agents' soft errors"""

    paper_id: str
    vector: PaperFeatureVector
    diagnostics: Tuple[Diagnostic, ...]


def extract_features(record: PaperRecord, deps: AgentContext) -> Extraction:
    """Run all six agents on one record"""
    diagnostics: List[Diagnostic] = []
    a1, a2, a3 = score_author_reputation(record.authors, deps.institutions, deps.reputation)
    vector = PaperFeatureVector(
        a1=a1,
        a2=a2,
        a3=a3,
        v=score_venue_prestige(record.venue_name, deps.venue_table),
        r=score_reproducibility(
            record.title, record.abstract, record.fulltext_urls, deps.repo_verifier, diagnostics
        ),
        c=score_collaboration(record.authors, deps.institutions),
        h=score_topic_hotness(
            record.keywords, deps.keyword_counts.prior_year(record.keywords, record.pub_year)
        ),
        q=score_text_quality(record.title, record.abstract, deps.quality_scorer, diagnostics),
        pub_year=record.pub_year,
    )
    return Extraction(record.id, vector, tuple(diagnostics))


def extract_all(
    records: Sequence[PaperRecord], deps: AgentContext, workers: int = 1
) -> List[Extraction]:
    """Extract features for every record, preserving input order

    :param workers: Thread count; only useful when an external scorer or verifier is involved
    """
    if workers <= 1:
        return [extract_features(record, deps) for record in records]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda record: extract_features(record, deps), records))


_FEATURE_COLUMNS = ("id",) + PLUS_FIELDS


def write_features(extractions: Iterable[Extraction], path: Path) -> None:
    """Write feature vectors as a tab-separated file, full float precision"""
    _write_rows(
        path,
        _FEATURE_COLUMNS,
        (
            [item.paper_id] + [repr(value) for value in item.vector.values(PLUS_FIELDS)]
            for item in extractions
        ),
    )


def read_features(path: Path) -> Dict[str, PaperFeatureVector]:
    """Read a file written by :func:`write_features`"""
    features = {}
    for row in _read_rows(path):
        values = {name: float(row[name]) for name in PLUS_FIELDS}
        values["r"] = int(values["r"])
        values["pub_year"] = int(values["pub_year"])
        features[row["id"]] = PaperFeatureVector(**values)
    return features


def write_diagnostics(extractions: Iterable[Extraction], path: Path) -> None:
    _write_rows(
        path,
        ("id", "agent", "message"),
        (
            (item.paper_id, diagnostic.agent, diagnostic.message)
            for item in extractions
            for diagnostic in item.diagnostics
        ),
    )


def _read_rows(path: Path) -> List[Dict[str, str]]:
    with Path(path).open(encoding="utf-8", newline="") as infile:
        return list(csv.DictReader(infile, delimiter="\t"))


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as outfile:
        writer = csv.writer(outfile, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
