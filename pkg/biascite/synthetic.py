"""Synthetic venue-confounded corpora with known exposure and causal effects

The generator writes the same artifacts a real corpus provides (records, venue ranking table,
institution directory, keyword counts) and derives features by running the real agents on
them. Outcomes then follow the exposure pathway literally:

::

    q      = b_R * R + b_Q * (Q - 3) / 2 + b_C * (C - 3) / 2 + b_H * H~ + noise
    E_true = exp(s_V * V~ + 0.5 * q + noise)
    y      ~ NegativeBinomial(mean = exp(a * log(1 + E_true) + b * q), shape = dispersion)

with ``V~ = (V - 1) / 4`` and ``H~ = H / max H``. Without a dispersion the label is the
rounded mean. Citations between papers are drawn with probability proportional to the cited
paper's exposure and never point forwards in time.
"""
import csv
import dataclasses
import logging
from pathlib import Path
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Tuple

import numpy as np

from biascite.agents import AgentContext
from biascite.agents import InstitutionDirectory
from biascite.agents import InstitutionTier
from biascite.agents import KeywordCounts
from biascite.agents import PaperFeatureVector
from biascite.agents import VenueEntry
from biascite.agents import VenueRankingTable
from biascite.agents import VenueTier
from biascite.agents import extract_all
from biascite.errors import ConfigError
from biascite.errors import NonActionableFactor
from biascite.graph import Author
from biascite.graph import PaperRecord
from biascite.graph import write_records


__all__ = [
    "GenConfig",
    "GroundTruth",
    "SyntheticCorpus",
    "generate",
    "ground_truth_effect",
    "write_corpus",
    "read_truth",
    "RECORDS_FILE",
    "TRUTH_FILE",
    "VENUES_FILE",
    "INSTITUTIONS_FILE",
    "KEYWORDS_FILE",
]


logger = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
TRUTH_FILE = "truth.tsv"
VENUES_FILE = "venues.tsv"
INSTITUTIONS_FILE = "institutions.tsv"
KEYWORDS_FILE = "keyword_counts.tsv"

_TIERS = (VenueTier.A_STAR, VenueTier.A, VenueTier.B, VenueTier.C, VenueTier.UNRANKED)
_INSTITUTION_TIERS = (InstitutionTier.TOP, InstitutionTier.MID, InstitutionTier.OTHER)
_COUNTRIES = ("CN", "US", "DE", "GB", "FR", "JP", "CA", "IN", "KR", "AU")
_CUES = (
    ("problem", "challenge", "limitation"),
    ("propose", "method", "framework"),
    ("results", "experiments", "outperforms"),
)
_VOCABULARY = 4000
_MAX_TEAM = 10


@dataclasses.dataclass(frozen=True)
class GenConfig:
    """Parameters of the synthetic corpus

    :param tier_probs: Probability of each venue tier, ordered A*, A, B, C, unranked
    :param shortcut: Venue-to-exposure strength ``s_V``
    :param exposure_gain: ``a``, the weight of ``log(1 + E)`` in the citation mean
    :param quality_gain: ``b``, the weight of the latent quality in the citation mean
    :param dispersion: Negative-binomial shape; ``None`` gives the deterministic rounded mean
    """

    n_papers: int = 5000
    n_authors: int = 2500
    n_venues: int = 40
    n_topics: int = 60
    n_institutions: int = 60
    tier_probs: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.25, 0.15)
    shortcut: float = 1.5
    beta_r: float = 0.6
    beta_q: float = 0.6
    beta_c: float = 0.3
    beta_h: float = 0.3
    exposure_gain: float = 1.2
    quality_gain: float = 0.5
    quality_noise: float = 0.5
    exposure_noise: float = 0.5
    dispersion: Optional[float] = 0.5
    first_year: int = 2010
    last_year: int = 2020
    mean_references: float = 6.0
    repo_base_rate: float = 0.15
    repo_tier_rate: float = 0.35
    seed: int = 0

    def __post_init__(self):
        for name in ("n_papers", "n_authors", "n_venues", "n_topics", "n_institutions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"'{name}' must be at least 1")
        if len(self.tier_probs) != len(_TIERS) or any(item < 0 for item in self.tier_probs):
            raise ConfigError(f"'tier_probs' needs {len(_TIERS)} non-negative probabilities")
        if abs(sum(self.tier_probs) - 1.0) > 1e-9:
            raise ConfigError("'tier_probs' must sum to 1")
        rates = (
            "shortcut",
            "beta_r",
            "beta_q",
            "beta_c",
            "beta_h",
            "quality_noise",
            "exposure_noise",
            "mean_references",
        )
        for name in rates:
            if getattr(self, name) < 0:
                raise ConfigError(f"'{name}' must be non-negative")
        if self.exposure_gain <= 0 or self.quality_gain <= 0:
            raise ConfigError("'exposure_gain' and 'quality_gain' must be positive")
        if self.dispersion is not None and self.dispersion <= 0:
            raise ConfigError("'dispersion' must be positive (or unset for deterministic labels)")
        if self.first_year > self.last_year:
            raise ConfigError("'first_year' is after 'last_year'")
        if min(self.repo_base_rate, self.repo_tier_rate) < 0 or self.repo_base_rate + self.repo_tier_rate > 1.0:
            raise ConfigError("repository rates must keep the link probability in [0, 1]")

    @property
    def deterministic(self) -> bool:
        return self.dispersion is None


class GroundTruth(NamedTuple):
    """Latent quantities of one generated paper"""

    e_true: float
    q: float


@dataclasses.dataclass(frozen=True)
class SyntheticCorpus:
    records: List[PaperRecord]
    truth: Dict[str, GroundTruth]
    features: Dict[str, PaperFeatureVector]
    venue_table: VenueRankingTable
    institutions: InstitutionDirectory
    keyword_counts: KeywordCounts

    def context(self) -> AgentContext:
        """Agent context reproducing the generator's features"""
        return AgentContext.from_corpus(self.records, self.venue_table, self.institutions, self.keyword_counts)


def _abstract(rng: np.random.Generator, skill: float, repo: Optional[str]) -> str:
    n_words = int(40 + 360 * skill + rng.integers(0, 60))
    n_unique = max(1, int(n_words * (0.25 + 0.6 * rng.random())))
    unique = [f"w{item}" for item in rng.choice(_VOCABULARY, size=n_unique, replace=False)]
    words = unique + [unique[item] for item in rng.integers(0, n_unique, size=n_words - n_unique)]
    for group in _CUES:
        if rng.random() < 0.2 + 0.7 * skill:
            words.append(group[int(rng.integers(0, len(group)))])
    words = [words[item] for item in rng.permutation(len(words))]
    text = " ".join(words) + "."
    if repo:
        text += f" Code at https://github.com/{repo}."
    return text


def _population(config: GenConfig, rng: np.random.Generator):
    institutions = []
    for position in range(config.n_institutions):
        tier = _INSTITUTION_TIERS[int(rng.choice(3, p=(0.15, 0.35, 0.5)))]
        institutions.append((f"Institute {position:03d}", tier, _COUNTRIES[int(rng.integers(0, len(_COUNTRIES)))]))
    directory = InstitutionDirectory({name: (tier, country) for name, tier, country in institutions})

    authors = []
    for position in range(config.n_authors):
        name, _, country = institutions[int(rng.integers(0, config.n_institutions))]
        pubs = 1 + int(rng.lognormal(1.5, 1.0))
        authors.append(
            Author(
                name=f"Author {position:05d}",
                affiliation=name,
                pub_count=pubs,
                total_citations=int(pubs * rng.lognormal(2.0, 1.0)),
                country=country,
            )
        )
    productivity = rng.lognormal(0.0, 1.0, size=config.n_authors)

    tiers = [_TIERS[int(item)] for item in rng.choice(len(_TIERS), size=config.n_venues, p=config.tier_probs)]
    table = VenueRankingTable(
        VenueEntry(f"Venue {position:03d} Conference", (f"V{position:03d}",), tier)
        for position, tier in enumerate(tiers)
    )
    venue_weights = 1.0 / np.arange(1, config.n_venues + 1)
    venue_weights = venue_weights[rng.permutation(config.n_venues)]
    topic_weights = 1.0 / np.arange(1, config.n_topics + 1) ** 1.1
    return (
        directory,
        authors,
        productivity / productivity.sum(),
        table,
        tiers,
        venue_weights / venue_weights.sum(),
        topic_weights / topic_weights.sum(),
    )


def generate(config: GenConfig = GenConfig()) -> SyntheticCorpus:
    """Generate a corpus; the result is a pure function of ``config`` (including its seed)"""
    rng = np.random.default_rng(config.seed)
    directory, authors, productivity, table, tiers, venue_weights, topic_weights = _population(config, rng)
    years = np.sort(rng.integers(config.first_year, config.last_year + 1, size=config.n_papers))

    records = []
    for position, year in enumerate(years):
        venue = int(rng.choice(config.n_venues, p=venue_weights))
        prestige = (tiers[venue].score - 1.0) / 4.0
        team = min(1 + int(rng.poisson(2.0)), _MAX_TEAM, config.n_authors)
        chosen = rng.choice(config.n_authors, size=team, replace=False, p=productivity)
        byline = tuple(authors[int(item)] for item in chosen)
        n_topics = min(1 + int(rng.integers(0, 3)), config.n_topics)
        picked = rng.choice(config.n_topics, size=n_topics, replace=False, p=topic_weights)
        keywords = tuple(f"topic {int(item):03d}" for item in picked)
        skill = float(np.clip(0.6 * rng.random() + 0.4 * prestige, 0.0, 1.0))
        linked = rng.random() < config.repo_base_rate + config.repo_tier_rate * prestige
        records.append(
            PaperRecord(
                id=f"P{position:06d}",
                title=f"Study {position} of {keywords[0]}",
                pub_year=int(year),
                venue_name=table.entries[venue].canonical_name,
                authors=byline,
                abstract=_abstract(rng, skill, f"lab{position}/project{position}" if linked else None),
                keywords=keywords,
            )
        )

    counts = KeywordCounts.from_records(records)
    context = AgentContext.from_corpus(records, table, directory, counts)
    features = {item.paper_id: item.vector for item in extract_all(records, context)}

    vectors = [features[record.id] for record in records]
    hot_max = max(item.h for item in vectors)
    q = np.array(
        [
            config.beta_r * item.r
            + config.beta_q * (item.q - 3.0) / 2.0
            + config.beta_c * (item.c - 3.0) / 2.0
            + config.beta_h * (item.h / hot_max if hot_max > 0 else 0.0)
            for item in vectors
        ]
    ) + rng.normal(0.0, config.quality_noise, size=config.n_papers)
    prestige = np.array([(item.v - 1.0) / 4.0 for item in vectors])
    noise = rng.normal(0.0, config.exposure_noise, size=config.n_papers)
    exposure = np.exp(config.shortcut * prestige + 0.5 * q + noise)
    mean = _citation_mean(config, exposure, q)
    if not np.all(np.isfinite(mean)):
        raise ConfigError("generator produced non-finite citation means; lower the effect sizes")
    if config.deterministic:
        labels = np.floor(mean + 0.5).astype(np.int64)
    else:
        labels = rng.negative_binomial(config.dispersion, config.dispersion / (config.dispersion + mean))

    year_end = np.searchsorted(years, years, side="right")
    finished = []
    for position, record in enumerate(records):
        pool = np.delete(np.arange(year_end[position]), position)
        count = min(int(rng.poisson(config.mean_references)), len(pool))
        cited: Tuple[str, ...] = ()
        if count:
            weights = exposure[pool] / exposure[pool].sum()
            drawn = rng.choice(pool, size=count, replace=False, p=weights)
            cited = tuple(sorted(records[int(item)].id for item in drawn))
        finished.append(dataclasses.replace(record, references=cited, label_citations=int(labels[position])))

    truth = {record.id: GroundTruth(float(exposure[pos]), float(q[pos])) for pos, record in enumerate(records)}
    logger.info(
        "Generated %d papers, %d citations in total, %d reference links",
        len(finished),
        int(labels.sum()),
        sum(len(item.references) for item in finished),
    )
    return SyntheticCorpus(finished, truth, features, table, directory, counts)


def _citation_mean(config: GenConfig, exposure: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.exp(config.exposure_gain * np.log1p(exposure) + config.quality_gain * q)


def ground_truth_effect(factor: str, config: GenConfig, corpus: Optional[SyntheticCorpus] = None) -> float:
    """Population-average effect of raising ``factor`` to its target, from the generative equations

    Raising ``R`` to 1 or ``Q`` to 5 shifts the latent quality by ``b_R * (1 - R)`` or
    ``b_Q * (5 - Q) / 2``; the exposure follows through ``0.5 * q``. The effect is the mean of
    ``log1p(mean') - log1p(mean)`` over the papers of ``corpus`` (generated from ``config``
    when not given), keeping each paper's realized noise.

    The value is exact: it is evaluated in closed form on the mean of the count law, and no
    counts are re-sampled under the intervention, so it carries no Monte-Carlo error.
    """
    if factor not in ("r", "q"):
        raise NonActionableFactor(f"no ground-truth effect for non-actionable factor '{factor}'")
    corpus = corpus or generate(config)
    ids = [record.id for record in corpus.records]
    exposure = np.array([corpus.truth[paper].e_true for paper in ids])
    q = np.array([corpus.truth[paper].q for paper in ids])
    if factor == "r":
        shift = config.beta_r * (1.0 - np.array([corpus.features[paper].r for paper in ids], dtype=np.float64))
    else:
        shift = config.beta_q * (5.0 - np.array([corpus.features[paper].q for paper in ids])) / 2.0
    before = _citation_mean(config, exposure, q)
    after = _citation_mean(config, exposure * np.exp(0.5 * shift), q + shift)
    return float(np.mean(np.log1p(after) - np.log1p(before)))


def write_corpus(corpus: SyntheticCorpus, directory: Path) -> Dict[str, Path]:
    """Write records, the truth sidecar and the lookup tables under ``directory``

    :returns: Mapping of artifact name to written path
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "records": directory / RECORDS_FILE,
        "truth": directory / TRUTH_FILE,
        "venues": directory / VENUES_FILE,
        "institutions": directory / INSTITUTIONS_FILE,
        "keyword_counts": directory / KEYWORDS_FILE,
    }
    write_records(corpus.records, paths["records"])
    with paths["truth"].open("w", encoding="utf-8", newline="") as outfile:
        writer = csv.writer(outfile, delimiter="\t", lineterminator="\n")
        writer.writerow(("id", "e_true", "q"))
        for record in corpus.records:
            truth = corpus.truth[record.id]
            writer.writerow((record.id, repr(truth.e_true), repr(truth.q)))
    corpus.venue_table.write(paths["venues"])
    corpus.institutions.write(paths["institutions"])
    corpus.keyword_counts.write(paths["keyword_counts"])
    return paths


def read_truth(path: Path) -> Dict[str, GroundTruth]:
    """Read a truth sidecar written by :func:`write_corpus`"""
    with Path(path).open(encoding="utf-8", newline="") as infile:
        return {
            row["id"]: GroundTruth(float(row["e_true"]), float(row["q"]))
            for row in csv.DictReader(infile, delimiter="\t")
        }

