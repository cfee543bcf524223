import uuid

import peewee
import pytest

from biascite import store
from biascite import synthetic
from biascite import training


SMALL_CORPUS = synthetic.GenConfig(
    n_papers=120,
    n_authors=60,
    n_venues=10,
    n_topics=12,
    n_institutions=10,
    tier_probs=(0.4, 0.15, 0.15, 0.15, 0.15),
    seed=3,
)

TINY_TRAINING = training.TrainConfig(
    layers=1,
    hidden=8,
    heads=2,
    dropout=0.1,
    max_epochs=3,
    warmup_epochs=1,
    batch_size=32,
    patience=5,
    lr=1e-2,
    seed=11,
)


@pytest.fixture(scope="function")
def fakedb(tmp_path):
    """Create a temporary pho-database (fakedb) for testing fields"""

    sqlite = peewee.SqliteDatabase(
        str(tmp_path / f"{uuid.uuid4()}.db"),
        pragmas=store.SQLITE_DEFAULT_PRAGMAS,
    )

    yield sqlite


@pytest.fixture(scope="session")
def corpus():
    """Small synthetic corpus covering every split year"""

    yield synthetic.generate(SMALL_CORPUS)


@pytest.fixture(scope="session")
def dataset(corpus):
    """Model inputs of the small synthetic corpus with the default year split"""

    yield training.prepare_data(corpus.records, corpus.features)


@pytest.fixture(scope="session")
def trained(dataset):
    """A few epochs of training on the small corpus"""

    yield training.fit(dataset, TINY_TRAINING)
