"""SQLite persistence for ingested corpora and sweep bookkeeping

Models are bound to :data:`DATABASE`, a :class:`peewee.DatabaseProxy` that
:func:`open_database` initializes.

:constant SQLITE_DEFAULT_VARIABLE_LIMIT: The default number of variables that a single SQL query
                                         can contain when interfacing with SQLite. The actual
                                         number is set at compile time; this default is correct
                                         for the stock bindings of the running interpreter.

:constant SQLITE_DEFAULT_PRAGMAS: Pragmas used for every database connection, following the
                                  `Peewee documentation`_ recommended settings

.. _`Peewee documentation`: https://docs.peewee-orm.com/en/latest/peewee/database.html#recommended-settings
"""
import contextlib
import enum
import functools
import json
import logging
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Type
from typing import TypeVar

import peewee

from biascite.graph import Author
from biascite.graph import CorpusSplit
from biascite.graph import PaperRecord


__all__ = [
    "calc_batch_size",
    "DATABASE",
    "EnumField",
    "flat_transaction",
    "JSONField",
    "load_corpus",
    "load_sweep_cells",
    "open_database",
    "PaperRow",
    "PathField",
    "record_sweep_cell",
    "save_corpus",
    "SplitName",
    "SQLITE_DEFAULT_PRAGMAS",
    "SQLITE_DEFAULT_VARIABLE_LIMIT",
    "SweepCell",
    "SweepStatus",
]


logger = logging.getLogger(__name__)


SQLITE_DEFAULT_PRAGMAS: Dict[str, Any] = {
    "journal_mode": "wal",
    "cache_size": -1 * 64000,
    "foreign_keys": 1,
    "ignore_check_constraints": 0,
    "synchronous": 0,
}


SQLITE_DEFAULT_VARIABLE_LIMIT: int

# SQLite 3.32 raised the default variable limit from 999 to 32766
try:
    import sqlite3
except ImportError:
    SQLITE_DEFAULT_VARIABLE_LIMIT = 999
else:
    SQLITE_DEFAULT_VARIABLE_LIMIT = 32766 if sqlite3.sqlite_version_info >= (3, 32) else 999


DATABASE = peewee.DatabaseProxy()


T = TypeVar("T", bound=peewee.Model)


def calc_batch_size(models: Sequence[T], sqlite_variable_limit: int = SQLITE_DEFAULT_VARIABLE_LIMIT) -> int:
    """Number of records that fit in one bulk query without exceeding the SQLite variable limit

    The bound is conservative: every field of the model, plus one, is counted as a variable per
    record. On non-SQLite backends the whole sequence fits in one batch.

    :param models: Instances of a single model class that will be written together
    :param sqlite_variable_limit: Compile-time variable limit of the SQLite bindings
    :returns: Records per batch, or zero for an empty sequence
    """
    if not models:
        return 0
    meta = models[0]._meta  # pylint: disable=protected-access
    database = meta.database.obj if isinstance(meta.database, peewee.DatabaseProxy) else meta.database
    if isinstance(database, peewee.SqliteDatabase):
        return int(sqlite_variable_limit / (len(meta.fields) + 1))
    return len(models)


def flat_transaction(interface: peewee.Database):
    """Decorator running the wrapped callable in one transaction, reusing an open one

    Nested calls to decorated functions therefore share the outermost transaction instead of
    opening savepoints.

    :param interface: Database (or proxy) that opens the transaction
    """

    def outer(func):
        @functools.wraps(func)
        def inner(*args, **kwargs):
            with interface.atomic() if not interface.in_transaction() else contextlib.nullcontext():
                return func(*args, **kwargs)

        return inner

    return outer


class PathField(peewee.CharField):  # pylint: disable=abstract-method
    """Stores :class:`~pathlib.Path` values, optionally relative to a root assigned at runtime

    Absolute paths under ``relative_to`` are written relative to it and read back as absolute
    paths under the current root, so a sweep directory can be moved together with its registry.

    :param relative_to: Root that stored paths are relative to
    :raises ValueError: When writing an absolute path outside ``relative_to``
    """

    def __init__(self, *args, relative_to: Optional[Path] = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.relative_to = relative_to

    def db_value(self, value: Optional[Path]) -> Optional[str]:
        if value is None:
            return None
        value = Path(value)
        if value.is_absolute() and self.relative_to:
            value = value.relative_to(self.relative_to)
        return super().db_value(value.as_posix())

    def python_value(self, value: Optional[str]) -> Optional[Path]:
        if value is None:
            return None
        path = Path(super().python_value(value))
        return self.relative_to / path if self.relative_to else path


class JSONField(peewee.TextField):  # pylint: disable=abstract-method
    """Stores JSON-serializable data, written with sorted keys

    :raises ValueError: When writing a value that cannot be JSON encoded
    :raises peewee.IntegrityError: When the stored column is not valid JSON
    """

    def db_value(self, value: Any) -> Optional[str]:
        if value is None and self.null:
            return None
        try:
            return super().db_value(json.dumps(value, sort_keys=True))
        except TypeError as err:
            raise ValueError(f"Failed to JSON encode object of type '{type(value)}'") from err

    def python_value(self, value: Optional[str]) -> Any:
        if value is None and self.null:
            return None
        try:
            return json.loads(super().python_value(value))
        except (json.JSONDecodeError, TypeError) as err:
            raise peewee.IntegrityError(f"Failed to decode JSON value from database column '{self.column}'") from err


class EnumField(peewee.CharField):  # pylint: disable=abstract-method
    """Stores members of an :class:`enum.Enum` by name

    :param enumeration: Enum whose members the field accepts
    :raises TypeError: When writing a value that is not a member of ``enumeration``
    :raises peewee.IntegrityError: When the stored name is not a member of ``enumeration``
    """

    def __init__(self, enumeration: Type[enum.Enum], *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.enumeration = enumeration

    def db_value(self, value: Optional[enum.Enum]) -> Optional[str]:
        if value is None and self.null:
            return None
        if not isinstance(value, self.enumeration):
            raise TypeError(f"Enum {self.enumeration.__name__} has no value '{value}'")
        return super().db_value(value.name)

    def python_value(self, value: Optional[str]) -> Optional[enum.Enum]:
        if value is None and self.null:
            return None
        try:
            return self.enumeration[super().python_value(value)]
        except KeyError:
            raise peewee.IntegrityError(f"Enum {self.enumeration.__name__} has no value with name '{value}'") from None


class SplitName(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class SweepStatus(enum.Enum):
    PENDING = "pending"
    DONE = "done"
    FAILED = "failed"


class _Model(peewee.Model):
    class Meta:  # pylint: disable=too-few-public-methods
        database = DATABASE


class PaperRow(_Model):
    """One paper record; ``position`` keeps the order in which the corpus was saved"""

    position = peewee.IntegerField(index=True)
    paper_id = peewee.CharField(unique=True)
    title = peewee.TextField()
    pub_year = peewee.IntegerField(index=True)
    venue_name = peewee.TextField()
    authors = JSONField()
    abstract = peewee.TextField(default="")
    keywords = JSONField(default=list)
    fulltext_urls = JSONField(default=list)
    references = JSONField(default=list)
    label_citations = peewee.IntegerField(null=True)
    split = EnumField(SplitName, null=True)

    @classmethod
    def from_record(cls, record: PaperRecord, position: int, split: Optional[SplitName] = None) -> "PaperRow":
        data = record.to_dict()
        return cls(
            position=position,
            paper_id=record.id,
            title=record.title,
            pub_year=record.pub_year,
            venue_name=record.venue_name,
            authors=data["authors"],
            abstract=record.abstract,
            keywords=data["keywords"],
            fulltext_urls=data["fulltext_urls"],
            references=data["references"],
            label_citations=record.label_citations,
            split=split,
        )

    def to_record(self) -> PaperRecord:
        return PaperRecord(
            id=self.paper_id,
            title=self.title,
            pub_year=self.pub_year,
            venue_name=self.venue_name,
            authors=tuple(Author(**entry) for entry in self.authors),
            abstract=self.abstract,
            keywords=tuple(self.keywords),
            fulltext_urls=tuple(self.fulltext_urls),
            references=tuple(self.references),
            label_citations=self.label_citations,
        )


class SweepCell(_Model):
    """Bookkeeping of one cell of a loss-weight sweep

    ``output_dir`` is stored relative to the directory that holds the database.
    """

    param = peewee.CharField()
    value = peewee.FloatField()
    seed = peewee.IntegerField(default=0)
    status = EnumField(SweepStatus, default=SweepStatus.PENDING)
    output_dir = PathField()
    metrics = JSONField(null=True)

    class Meta:  # pylint: disable=too-few-public-methods
        indexes = ((("param", "value", "seed"), True),)


MODELS: List[Type[peewee.Model]] = [PaperRow, SweepCell]


def open_database(path: Path) -> peewee.SqliteDatabase:
    """Open (creating if needed) the SQLite database at ``path`` and bind the models to it"""
    path = Path(path).resolve()
    path.parent.mkdir(parents=True, exist_ok=True)
    database = peewee.SqliteDatabase(str(path), pragmas=SQLITE_DEFAULT_PRAGMAS)
    DATABASE.initialize(database)
    SweepCell.output_dir.relative_to = path.parent
    database.create_tables(MODELS)
    logger.debug("Opened database %s", path)
    return database


def _split_of(split: Optional[CorpusSplit]) -> Dict[str, SplitName]:
    if split is None:
        return {}
    membership = {paper: SplitName.TRAIN for paper in split.train_ids}
    membership.update({paper: SplitName.VAL for paper in split.val_ids})
    membership.update({paper: SplitName.TEST for paper in split.test_ids})
    return membership


@flat_transaction(DATABASE)
def save_corpus(records: Iterable[PaperRecord], split: Optional[CorpusSplit] = None) -> int:
    """Replace the stored corpus with ``records``

    :param split: Optional split assignment stored with every paper
    :returns: Number of papers written
    """
    membership = _split_of(split)
    rows = [
        PaperRow.from_record(record, position, membership.get(record.id)) for position, record in enumerate(records)
    ]
    PaperRow.delete().execute()
    if rows:
        PaperRow.bulk_create(rows, batch_size=calc_batch_size(rows))
    logger.info("Stored %d papers", len(rows))
    return len(rows)


def load_corpus(split: Optional[SplitName] = None) -> List[PaperRecord]:
    """Stored papers in the order they were saved, optionally restricted to one split"""
    query = PaperRow.select().order_by(PaperRow.position)
    if split is not None:
        query = query.where(PaperRow.split == split)
    return [row.to_record() for row in query]


@flat_transaction(DATABASE)
def record_sweep_cell(
    param: str,
    value: float,
    output_dir: Path,
    status: SweepStatus = SweepStatus.PENDING,
    metrics: Optional[Dict[str, Any]] = None,
    seed: int = 0,
) -> SweepCell:
    """Create or update the registry row of one sweep cell"""
    cell = SweepCell.get_or_none(
        (SweepCell.param == param) & (SweepCell.value == float(value)) & (SweepCell.seed == seed)
    )
    if cell is None:
        cell = SweepCell(param=param, value=float(value), seed=seed)
    cell.status = status
    cell.output_dir = Path(output_dir).resolve()
    cell.metrics = metrics
    cell.save()
    return cell


def load_sweep_cells(param: Optional[str] = None) -> List[SweepCell]:
    """Registry rows ordered by parameter, value and seed"""
    query = SweepCell.select().order_by(SweepCell.param, SweepCell.value, SweepCell.seed)
    if param is not None:
        query = query.where(SweepCell.param == param)
    return list(query)
