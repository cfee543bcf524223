# pylint: disable=redefined-outer-name
# pylint: disable=missing-class-docstring
# pylint: disable=too-few-public-methods
# pylint: disable=unused-import
import dataclasses

import numpy as np
import pytest
from scipy import stats

from biascite import synthetic
from biascite.agents import InstitutionDirectory
from biascite.agents import KeywordCounts
from biascite.agents import VenueRankingTable
from biascite.agents import extract_features
from biascite.errors import ConfigError
from biascite.errors import NonActionableFactor
from biascite.graph import read_records
from .fixtures import SMALL_CORPUS
from .fixtures import corpus


TINY = dataclasses.replace(SMALL_CORPUS, n_papers=40, n_authors=30, seed=8)


def test_public_api():
    """Test that the public API components are exposed via ``__all__``"""

    for item in (
        synthetic.GenConfig,
        synthetic.GroundTruth,
        synthetic.SyntheticCorpus,
        synthetic.generate,
        synthetic.ground_truth_effect,
        synthetic.write_corpus,
        synthetic.read_truth,
    ):
        assert item.__name__ in synthetic.__all__


def test_config_errors():
    """Test the validation of generator parameters"""

    assert not synthetic.GenConfig().deterministic
    assert synthetic.GenConfig(dispersion=None).deterministic
    for kwargs in (
        {"n_papers": 0},
        {"tier_probs": (0.5, 0.5)},
        {"tier_probs": (0.5, 0.5, 0.5, 0.0, 0.0)},
        {"tier_probs": (1.2, -0.2, 0.0, 0.0, 0.0)},
        {"beta_r": -0.1},
        {"exposure_gain": 0.0},
        {"dispersion": 0.0},
        {"first_year": 2021},
        {"repo_base_rate": 0.8, "repo_tier_rate": 0.3},
    ):
        with pytest.raises(ConfigError):
            synthetic.GenConfig(**kwargs)


def test_generate_is_deterministic():
    """Test that the seed fixes the whole corpus"""

    first = synthetic.generate(TINY)
    second = synthetic.generate(TINY)
    assert first.records == second.records
    assert first.truth == second.truth
    assert first.features == second.features
    assert first.venue_table.entries == second.venue_table.entries

    other = synthetic.generate(dataclasses.replace(TINY, seed=9))
    assert [item.label_citations for item in other.records] != [item.label_citations for item in first.records]


def test_corpus_shape(corpus):
    """Test sizes, years, labels and the time order of references"""

    records = corpus.records
    assert len(records) == SMALL_CORPUS.n_papers
    assert len({item.id for item in records}) == len(records)
    years = {item.id: item.pub_year for item in records}
    assert set(years.values()) <= set(range(SMALL_CORPUS.first_year, SMALL_CORPUS.last_year + 1))
    for record in records:
        assert record.label_citations >= 0
        assert record.id not in record.references
        assert all(years[cited] <= record.pub_year for cited in record.references)
    assert set(corpus.features) == set(years) == set(corpus.truth)
    assert all(item.e_true > 0 for item in corpus.truth.values())


def test_features_come_from_the_agents(corpus):
    """Test that every venue is a table entry and features match the agent context"""

    names = {entry.canonical_name for entry in corpus.venue_table.entries}
    assert {record.venue_name for record in corpus.records} <= names
    record = corpus.records[0]
    assert extract_features(record, corpus.context()).vector == corpus.features[record.id]


def test_deterministic_labels():
    """Test that without dispersion the label is the rounded citation mean"""

    config = dataclasses.replace(TINY, dispersion=None, quality_noise=0.0, exposure_noise=0.0)
    generated = synthetic.generate(config)
    exposure = np.array([generated.truth[item.id].e_true for item in generated.records])
    quality = np.array([generated.truth[item.id].q for item in generated.records])
    mean = np.exp(config.exposure_gain * np.log1p(exposure) + config.quality_gain * quality)
    assert [item.label_citations for item in generated.records] == np.floor(mean + 0.5).astype(int).tolist()


def test_ground_truth_effect(corpus):
    """Test the sign of the generative effects"""

    assert synthetic.ground_truth_effect("r", dataclasses.replace(SMALL_CORPUS, beta_r=0.0), corpus) == 0.0
    assert synthetic.ground_truth_effect("r", SMALL_CORPUS, corpus) > 0.0
    assert synthetic.ground_truth_effect("q", SMALL_CORPUS, corpus) > 0.0

    with pytest.raises(NonActionableFactor):
        synthetic.ground_truth_effect("v", SMALL_CORPUS, corpus)


def test_ground_truth_effect_is_closed_form(corpus):
    """Test that the effect is the exact mean shift of log citations, the same on every call"""

    ids = [record.id for record in corpus.records]
    exposure = np.array([corpus.truth[paper].e_true for paper in ids])
    quality = np.array([corpus.truth[paper].q for paper in ids])
    shift = SMALL_CORPUS.beta_r * (1.0 - np.array([corpus.features[paper].r for paper in ids], dtype=np.float64))

    def log_mean(e, q):
        return np.log1p(np.exp(SMALL_CORPUS.exposure_gain * np.log1p(e) + SMALL_CORPUS.quality_gain * q))

    expected = np.mean(log_mean(exposure * np.exp(0.5 * shift), quality + shift) - log_mean(exposure, quality))
    assert synthetic.ground_truth_effect("r", SMALL_CORPUS, corpus) == pytest.approx(expected, rel=1e-12)
    assert synthetic.ground_truth_effect("r", SMALL_CORPUS, corpus) == synthetic.ground_truth_effect(
        "r", SMALL_CORPUS, corpus
    )


def test_venue_shortcut_grows_with_strength():
    """Test that venue prestige tracks log citations more closely as the shortcut strengthens"""

    base = synthetic.GenConfig(n_papers=2000, n_authors=1000, seed=5)
    correlations = []
    for shortcut in (0.5, 1.5, 3.0):
        generated = synthetic.generate(dataclasses.replace(base, shortcut=shortcut))
        prestige = [(generated.features[item.id].v - 1.0) / 4.0 for item in generated.records]
        citations = np.log1p([item.label_citations for item in generated.records])
        correlations.append(np.corrcoef(prestige, citations)[0, 1])
    assert correlations[0] > 0.0
    assert correlations[0] < correlations[1] < correlations[2]


@pytest.mark.slow
def test_default_citations_are_long_tailed():
    """Test the skew and the top-percentile share of citations in a default-sized corpus"""

    generated = synthetic.generate(synthetic.GenConfig())
    labels = np.array(sorted((item.label_citations for item in generated.records), reverse=True), dtype=np.float64)
    assert stats.skew(labels) > 2.0
    assert labels[: len(labels) // 100].sum() / labels.sum() > 0.15


def test_write_corpus(tmp_path, corpus):
    """Test that every written artifact reads back unchanged"""

    paths = synthetic.write_corpus(corpus, tmp_path / "corpus")
    assert sorted(paths) == ["institutions", "keyword_counts", "records", "truth", "venues"]
    assert all(path.is_file() for path in paths.values())

    assert read_records(paths["records"]).records == corpus.records
    assert synthetic.read_truth(paths["truth"]) == corpus.truth
    assert VenueRankingTable.load(paths["venues"]).entries == corpus.venue_table.entries
    assert len(KeywordCounts.load(paths["keyword_counts"])) == len(corpus.keyword_counts)
    assert len(InstitutionDirectory.load(paths["institutions"])) == len(corpus.institutions)
