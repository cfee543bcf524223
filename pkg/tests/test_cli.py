# pylint: disable=redefined-outer-name
# pylint: disable=missing-class-docstring
# pylint: disable=too-few-public-methods
# pylint: disable=unused-import
import csv
import json

import pytest
import toml

from biascite import agents
from biascite import cli
from biascite import store
from biascite.graph import read_records


GEN_SETTINGS = (
    "n_papers=120",
    "n_authors=60",
    "n_venues=10",
    "n_topics=12",
    "n_institutions=10",
    "tier_probs=[0.4, 0.15, 0.15, 0.15, 0.15]",
)

TRAIN_SETTINGS = (
    "layers=1",
    "hidden=8",
    "heads=2",
    "dropout=0.1",
    "max_epochs=2",
    "warmup_epochs=1",
    "batch_size=32",
    "lr=0.01",
)


def _sets(settings):
    args = []
    for item in settings:
        args.extend(["--set", item])
    return args


def _read_tsv(path):
    with path.open(encoding="utf-8", newline="") as infile:
        return list(csv.DictReader(infile, delimiter="\t"))


def _error(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


@pytest.fixture(scope="session")
def generated(tmp_path_factory):
    """A small synthetic corpus written by the ``gen`` command"""

    out = tmp_path_factory.mktemp("gen")
    assert cli.main(["gen", "--out", str(out), "--seed", "3"] + _sets(GEN_SETTINGS)) == 0
    yield out


@pytest.fixture(scope="session")
def trained_run(generated, tmp_path_factory):
    """Output directory of a short ``train`` run on the generated corpus"""

    out = tmp_path_factory.mktemp("train")
    argv = [
        "train",
        "--out",
        str(out),
        "--records",
        str(generated / "records.jsonl"),
        "--features",
        str(generated / cli.FEATURES_FILE),
    ]
    assert cli.main(argv + _sets(TRAIN_SETTINGS)) == 0
    yield out


def _inputs(generated, trained_run):
    return [
        "--records",
        str(generated / "records.jsonl"),
        "--features",
        str(generated / cli.FEATURES_FILE),
        "--checkpoint",
        str(trained_run / cli.CHECKPOINT_DIR),
    ]


def test_public_api():
    """Test that the public API components are exposed via ``__all__``"""

    for item in (cli.main, cli.build_parser):
        assert item.__name__ in cli.__all__


def test_gen_is_reproducible(generated, tmp_path):
    """Test that the same settings and seed write byte-identical files"""

    again = tmp_path / "again"
    assert cli.main(["gen", "--out", str(again), "--seed", "3"] + _sets(GEN_SETTINGS)) == 0
    names = sorted(path.name for path in generated.iterdir())
    assert names == sorted(path.name for path in again.iterdir())
    assert cli.FEATURES_FILE in names
    assert cli.RESOLVED_CONFIG_FILE in names
    for name in names:
        assert (generated / name).read_bytes() == (again / name).read_bytes()

    resolved = toml.load(str(generated / cli.RESOLVED_CONFIG_FILE))
    assert resolved["seed"] == 3
    assert resolved["n_papers"] == 120
    assert resolved["deterministic"] is False


def test_gen_from_config_file(tmp_path):
    """Test that a flat TOML file and a deterministic flag reach the generator"""

    config = tmp_path / "gen.toml"
    config.write_text("n_papers = 30\nn_authors = 20\nn_venues = 10\ndeterministic = true\n", encoding="utf-8")
    out = tmp_path / "out"
    assert cli.main(["gen", "--config", str(config), "--out", str(out)]) == 0
    resolved = toml.load(str(out / cli.RESOLVED_CONFIG_FILE))
    assert resolved["n_papers"] == 30
    assert resolved["deterministic"] is True
    assert "dispersion" not in resolved
    assert len((out / "records.jsonl").read_text(encoding="utf-8").splitlines()) == 30


def test_train_outputs(trained_run):
    """Test the checkpoint, history, ledger and the resolved configuration of a run"""

    assert (trained_run / cli.CHECKPOINT_DIR).is_dir()
    history = _read_tsv(trained_run / cli.HISTORY_FILE)
    assert 1 <= len(history) <= 2
    assert _read_tsv(trained_run / cli.LEDGER_FILE)
    resolved = toml.load(str(trained_run / cli.RESOLVED_CONFIG_FILE))
    assert resolved["hidden"] == 8
    assert resolved["lambda_reg"] == 0.05
    assert resolved["val_first"] == 2019


def test_eval_on_validation_matches_history(generated, trained_run, tmp_path):
    """Test that evaluating the checkpoint on the validation split repeats the best history row"""

    out = tmp_path / "eval"
    argv = ["eval", "--out", str(out), "--set", "split=val"] + _inputs(generated, trained_run)
    assert cli.main(argv) == 0

    report = json.loads((out / cli.EVAL_REPORT_FILE).read_text(encoding="utf-8"))
    best = [row for row in _read_tsv(trained_run / cli.HISTORY_FILE) if row["is_best"] == "1"][-1]
    assert report["male"] == float(best["val_male"])
    assert report["rmsle"] == float(best["val_rmsle"])
    assert json.loads((trained_run / cli.VAL_REPORT_FILE).read_text(encoding="utf-8"))["male"] == report["male"]

    groups = _read_tsv(out / cli.EVAL_GROUPS_FILE)
    assert groups[0]["env"] == "all"
    assert int(groups[0]["count"]) == report["count"]


def test_whatif(generated, trained_run, tmp_path):
    """Test the per-paper table and the summary of a what-if run"""

    out = tmp_path / "whatif"
    argv = ["whatif", "--out", str(out), "--set", 'factors=["r"]'] + _inputs(generated, trained_run)
    assert cli.main(argv) == 0
    rows = _read_tsv(out / cli.WHATIF_ROWS_FILE)
    assert rows
    assert {row["factor"] for row in rows} == {"r"}
    assert all(float(row["delta"]) == 0.0 for row in rows if row["low"] == "0")
    summary = json.loads((out / cli.WHATIF_SUMMARY_FILE).read_text(encoding="utf-8"))
    assert list(summary) == ["r"]
    assert summary["r"]["count"] == len(rows)


def test_sweep(generated, tmp_path):
    """Test one cell per value, the results table and the cell registry"""

    out = tmp_path / "sweep"
    argv = [
        "sweep",
        "--out",
        str(out),
        "--records",
        str(generated / "records.jsonl"),
        "--features",
        str(generated / cli.FEATURES_FILE),
        "--set",
        "sweep_values=[0.0, 0.05, 0.1]",
        "--set",
        "max_epochs=1",
    ]
    assert cli.main(argv + _sets(TRAIN_SETTINGS[:-4] + TRAIN_SETTINGS[-3:])) == 0

    results = _read_tsv(out / cli.SWEEP_RESULTS_FILE)
    assert [float(row["value"]) for row in results] == [0.0, 0.05, 0.1]
    assert {row["param"] for row in results} == {"lambda_reg"}
    assert all(row["best_epoch"] == "1" for row in results)
    for position in range(3):
        assert len(list((out / cli.SWEEP_CELLS_DIR).glob(f"{position:03d}_lambda_reg=*"))) == 1

    store.open_database(out / cli.SWEEP_DB_FILE)
    cells = store.load_sweep_cells("lambda_reg")
    assert [cell.value for cell in cells] == [0.0, 0.05, 0.1]
    assert all(cell.status == store.SweepStatus.DONE for cell in cells)
    assert all(cell.output_dir.is_dir() for cell in cells)
    assert cells[1].metrics["male"] == float(results[1]["male"])


def test_unknown_key(generated, tmp_path, capsys):
    """Test that an unknown configuration key fails with a JSON error"""

    argv = ["eval", "--out", str(tmp_path), "--records", str(generated / "records.jsonl"), "--set", "colour=blue"]
    assert cli.main(argv) == 1
    error = _error(capsys)
    assert error["command"] == "eval"
    assert error["error"] == "ConfigError"
    assert "colour" in error["message"]


def test_error_reports(generated, tmp_path, capsys):
    """Test missing inputs, malformed overrides and invalid values"""

    assert cli.main(["train", "--out", str(tmp_path / "a")]) == 1
    assert "records" in _error(capsys)["message"]

    assert cli.main(["gen", "--out", str(tmp_path / "b"), "--set", "n_papers"]) == 1
    assert _error(capsys)["error"] == "ConfigError"

    assert cli.main(["gen", "--out", str(tmp_path / "c"), "--set", "n_papers=0"]) == 1
    assert _error(capsys)["error"] == "ConfigError"

    argv = ["sweep", "--out", str(tmp_path / "d"), "--set", "sweep_param=lr"]
    assert cli.main(argv) == 1
    assert "sweep_param" in _error(capsys)["message"]

    missing = tmp_path / "nowhere"
    argv = ["whatif", "--out", str(tmp_path / "e"), "--checkpoint", str(missing)]
    assert cli.main(argv + ["--records", str(generated / "records.jsonl")]) == 1
    assert _error(capsys)["error"] == "ConfigError"


def test_train_is_reproducible(generated, trained_run, tmp_path):
    """Test that a second run with the same settings writes identical history and checkpoint files"""

    argv = [
        "train",
        "--out",
        str(tmp_path),
        "--records",
        str(generated / "records.jsonl"),
        "--features",
        str(generated / cli.FEATURES_FILE),
    ]
    assert cli.main(argv + _sets(TRAIN_SETTINGS)) == 0
    for name in (cli.HISTORY_FILE, cli.LEDGER_FILE, cli.RESOLVED_CONFIG_FILE):
        assert (tmp_path / name).read_bytes() == (trained_run / name).read_bytes()
    checkpoint = sorted(path.name for path in (trained_run / cli.CHECKPOINT_DIR).iterdir())
    assert checkpoint == sorted(path.name for path in (tmp_path / cli.CHECKPOINT_DIR).iterdir())
    for name in checkpoint:
        first, second = trained_run / cli.CHECKPOINT_DIR / name, tmp_path / cli.CHECKPOINT_DIR / name
        assert first.read_bytes() == second.read_bytes()


def test_ingest(generated, tmp_path):
    """Test that valid records are stored with their split and malformed lines are listed"""

    source = tmp_path / "input.jsonl"
    text = (generated / "records.jsonl").read_text(encoding="utf-8")
    source.write_text(text + "not a record\n", encoding="utf-8")
    out = tmp_path / "ingest"
    assert cli.main(["ingest", "--out", str(out), "--input", str(source)]) == 0

    records = read_records(generated / "records.jsonl").records
    assert read_records(out / "records.jsonl").records == records
    errors = _read_tsv(out / cli.INGEST_ERRORS_FILE)
    assert [row["line_no"] for row in errors] == [str(len(records) + 1)]

    store.open_database(out / cli.CORPUS_DB_FILE)
    assert store.load_corpus() == records
    assert len(store.load_corpus(store.SplitName.VAL)) == sum(1 for item in records if item.pub_year == 2019)


def test_features(generated, tmp_path):
    """Test that the agents reproduce the generated features from the written tables"""

    out = tmp_path / "features"
    argv = ["features", "--out", str(out), "--records", str(generated / "records.jsonl"), "--tables", str(generated)]
    assert cli.main(argv + ["--set", "workers=2"]) == 0
    assert agents.read_features(out / cli.FEATURES_FILE) == agents.read_features(generated / cli.FEATURES_FILE)
    assert (out / cli.DIAGNOSTICS_FILE).is_file()
    assert (out / cli.GRAPH_DIR).is_dir()
