# pylint: disable=redefined-outer-name
# pylint: disable=missing-class-docstring
# pylint: disable=too-few-public-methods
# pylint: disable=unused-import
import csv
import dataclasses

import numpy as np
import pytest

from biascite import training
from biascite.errors import ConfigError
from biascite.errors import UntrainedCheckpoint
from biascite.graph import SplitConfig
from biascite.objectives import Environment
from biascite.training import TrainConfig
from .fixtures import TINY_TRAINING
from .fixtures import corpus
from .fixtures import dataset
from .fixtures import trained


def _read_tsv(path):
    with path.open(encoding="utf-8", newline="") as infile:
        return list(csv.reader(infile, delimiter="\t"))


def test_public_api():
    """Test that the public API components are exposed via ``__all__``"""

    for item in (
        training.TrainConfig,
        training.LossBundle,
        training.TrainingData,
        training.EarlyStopping,
        training.lr_at,
        training.adamw_update,
        training.prepare_data,
        training.stratified_batches,
        training.init_model,
        training.train_step,
        training.predict,
        training.evaluate,
        training.fit,
        training.save_model,
        training.load_model,
        training.write_history,
        training.write_ledger,
    ):
        assert item.__name__ in training.__all__


def test_config_errors():
    """Test the validation of training settings"""

    for kwargs in (
        {"batch_size": 1},
        {"lr": 0.0},
        {"lambda_reg": -0.1},
        {"max_epochs": 0},
        {"adam_beta1": 1.0},
        {"hidden": 10, "heads": 4},
        {"tau": 1.0},
        {"w_min": 0.6},
    ):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    assert TrainConfig.from_dict(TINY_TRAINING.to_dict()) == TINY_TRAINING


def test_lr_schedule():
    """Test the warm-up ramp and the cosine decay at the default settings"""

    config = TrainConfig()
    assert training.lr_at(0, config) == pytest.approx(1e-4)
    assert training.lr_at(5, config) == pytest.approx(5.5e-4)
    assert training.lr_at(10, config) == pytest.approx(1e-3)
    assert training.lr_at(199, config) == pytest.approx(1e-5)
    rates = [training.lr_at(epoch, config) for epoch in range(10, 200)]
    assert all(later <= earlier for earlier, later in zip(rates, rates[1:]))

    assert training.lr_at(0, TrainConfig(max_epochs=1, warmup_epochs=0)) == 1e-3
    with pytest.raises(ValueError):
        training.lr_at(200, config)
    with pytest.raises(ValueError):
        training.lr_at(-1, config)


def test_adamw_update():
    """Test the first AdamW step and the parameters exempt from weight decay"""

    config = TrainConfig(weight_decay=0.1)
    params = {"encoder/input/paper/weight": np.ones(2), "stage_a/hidden/bias": np.ones(2)}

    still, state = training.adamw_update(params, {}, training.AdamState(), 0.01, config)
    assert state.step == 1
    assert np.allclose(still["encoder/input/paper/weight"], 1.0 - 0.01 * 0.1)
    assert np.array_equal(still["stage_a/hidden/bias"], np.ones(2))

    grads = {"encoder/input/paper/weight": np.array([3.0, -0.5]), "stage_a/hidden/bias": np.array([2.0, -2.0])}
    moved, _ = training.adamw_update(params, grads, training.AdamState(), 0.01, config)
    assert np.allclose(moved["stage_a/hidden/bias"], [0.99, 1.01])
    assert np.allclose(moved["encoder/input/paper/weight"], [1.0 - 0.01 - 0.001, 1.0 + 0.01 - 0.001])


def test_prepare_data(corpus, dataset):
    """Test the alignment of graph, features, labels and splits"""

    count = len(corpus.records)
    assert len(dataset.paper_ids) == count
    assert dataset.f_plus.shape == (count, 9)
    assert dataset.f_minus.shape == (count, 8)
    assert not dataset.graph_minus.has_venue_information
    assert len(dataset.train_idx) + len(dataset.val_idx) + len(dataset.test_idx) == count
    assert not set(dataset.train_idx) & set(dataset.val_idx)
    assert {dataset.paper_ids[item] for item in dataset.val_idx} == set(dataset.split.val_ids)
    assert set(np.unique(dataset.env)) <= {Environment.LOW, Environment.HIGH}
    assert dataset.q_threshold == float(np.median([corpus.features[paper].q for paper in dataset.split.train_ids]))

    labels = {record.id: record.label_citations for record in corpus.records}
    assert [labels[paper] for paper in dataset.paper_ids] == dataset.labels.astype(int).tolist()
    with pytest.raises(ValueError):
        dataset.indices("holdout")


def test_prepare_data_errors(corpus):
    """Test missing labels and empty training splits"""

    unlabeled = [dataclasses.replace(record, label_citations=None) for record in corpus.records]
    with pytest.raises(ValueError):
        training.prepare_data(unlabeled, corpus.features)
    with pytest.raises(ValueError):
        training.prepare_data(corpus.records, corpus.features, SplitConfig(train=(2000, 2001)))

    hidden_test = [
        dataclasses.replace(record, label_citations=None) if record.pub_year == 2020 else record
        for record in corpus.records
    ]
    data = training.prepare_data(hidden_test, corpus.features)
    assert np.isnan(data.labels[data.test_idx]).all()
    with pytest.raises(ValueError):
        training.evaluate(data, training.init_model(TINY_TRAINING).params, TINY_TRAINING, "test")


def test_stratified_batches(dataset):
    """Test that batches partition the indices and mix both environments"""

    rng = np.random.default_rng(0)
    batches = training.stratified_batches(dataset.train_idx, dataset.env, 32, rng)
    joined = np.concatenate(batches)
    assert sorted(joined.tolist()) == sorted(dataset.train_idx.tolist())
    assert len(batches) == int(np.ceil(len(dataset.train_idx) / 32))
    for batch in batches:
        assert set(dataset.env[batch]) == {Environment.LOW, Environment.HIGH}

    assert len(training.stratified_batches(dataset.train_idx, dataset.env, 1000, rng)) == 1


def test_init_model():
    """Test that the seed fixes the parameters and the arrangement fixes the names"""

    first = training.init_model(TINY_TRAINING)
    second = training.init_model(TINY_TRAINING)
    assert all(np.array_equal(first.params[name], second.params[name]) for name in first.params)
    assert any(name.startswith("stage_b/") for name in first.params)
    assert not any(name.startswith("adversary/") for name in first.params)

    adversarial = training.init_model(dataclasses.replace(TINY_TRAINING, lambda_adv=0.1))
    assert any(name.startswith("adversary/") for name in adversarial.params)

    single = training.init_model(dataclasses.replace(TINY_TRAINING, two_stage=False))
    assert any(name.startswith("single_stage/") for name in single.params)
    assert not any(name.startswith("stage_a/") for name in single.params)


def test_train_step(dataset):
    """Test the loss bundle of one step and its reproducibility"""

    batch = dataset.train_idx[:32]
    model = training.init_model(TINY_TRAINING)
    dro = TINY_TRAINING.dro_state()

    updated, new_dro, bundle = training.train_step(batch, model, dro, dataset, TINY_TRAINING, np.random.default_rng(4))
    assert updated.step == 1
    assert bundle.step == 0
    assert bundle.lr == training.lr_at(0, TINY_TRAINING)
    assert bundle.l_total == pytest.approx(bundle.reconstructed_total(TINY_TRAINING))
    assert set(bundle.l_mono) == {"r", "q"}
    assert sum(new_dro.w) == pytest.approx(1.0)
    assert bundle.w == new_dro.w
    assert not np.array_equal(updated.params["stage_b/output/bias"], model.params["stage_b/output/bias"])

    _, _, again = training.train_step(batch, model, dro, dataset, TINY_TRAINING, np.random.default_rng(4))
    assert again == bundle


def test_train_step_plain_risk(dataset):
    """Test that with every extra term off a step minimizes the plain squared log error"""

    config = dataclasses.replace(TINY_TRAINING, lambda_reg=0.0, group_dro=False, dropout=0.0)
    model = training.init_model(config)
    batch = dataset.train_idx[:20]
    _, dro, bundle = training.train_step(batch, model, config.dro_state(), dataset, config, np.random.default_rng(0))

    prediction = training.predict(dataset, model.params, config, batch)
    expected = training.validation_loss(dataset.labels[batch], prediction.u)
    assert bundle.l_groupdro == pytest.approx(expected)
    assert bundle.l_total == pytest.approx(expected)
    assert bundle.l_mono == {}
    assert dro.w == (0.5, 0.5)


def test_early_stopping():
    """Test the patience counter on a scripted validation curve"""

    stopper = training.EarlyStopping(patience=3)
    losses = [5.0, 4.0, 4.5, 4.0, 3.0, 3.1, 3.0, 3.2, 2.0]
    stopped = None
    for epoch, loss in enumerate(losses):
        stopper.update(epoch, loss)
        if stopper.should_stop:
            stopped = epoch
            break
    assert stopped == 7
    assert stopper.best_epoch == 4
    assert stopper.best == 3.0


def test_fit(trained, dataset):
    """Test the history, the best epoch and the report that goes with it"""

    history = trained.history
    assert 1 <= len(history) <= TINY_TRAINING.max_epochs
    assert [row.epoch for row in history] == list(range(1, len(history) + 1))
    best_rows = [row for row in history if row.is_best]
    assert best_rows[-1].epoch == trained.best_epoch
    assert min(row.val_loss for row in history) == best_rows[-1].val_loss
    assert trained.best_report.male == best_rows[-1].val_male

    report = training.evaluate(dataset, trained.best.params, TINY_TRAINING, "val")
    assert report.male == best_rows[-1].val_male
    assert report.count == len(dataset.val_idx)
    assert all(np.isfinite(bundle.l_total) for bundle in trained.bundles)


def test_fit_single_epoch(dataset):
    """Test that a one-epoch run reports epoch 1 as the best"""

    result = training.fit(dataset, dataclasses.replace(TINY_TRAINING, max_epochs=1))
    assert result.best_epoch == 1
    assert len(result.history) == 1
    assert result.history[0].is_best


def test_fit_partial_exposure_target(corpus):
    """Test that papers missing from the reference exposure only drop out of the calibration term"""

    papers = sorted(corpus.truth)
    target = {paper: corpus.truth[paper].e_true for paper in papers[::2]}
    data = training.prepare_data(corpus.records, corpus.features, exposure_target=target)
    assert np.isnan(data.exposure_target).any()
    assert np.isfinite(data.exposure_target).any()

    result = training.fit(data, dataclasses.replace(TINY_TRAINING, max_epochs=1, lambda_corr=0.1))
    assert any(bundle.l_calib is not None for bundle in result.bundles)
    assert all(np.isfinite(bundle.l_total) for bundle in result.bundles)


def test_fit_lowers_training_loss(dataset):
    """Test that twenty epochs of plain risk training bring the training loss down"""

    config = dataclasses.replace(
        TINY_TRAINING, dropout=0.0, lambda_reg=0.0, group_dro=False, max_epochs=20, patience=20
    )
    history = training.fit(dataset, config).history
    assert len(history) == 20
    assert history[-1].train_total < history[0].train_total


def test_fit_stops_on_plateau(dataset, monkeypatch):
    """Test that a run whose parameters never move stops after the patience window"""

    monkeypatch.setattr(training, "lr_at", lambda epoch, config: 0.0)
    result = training.fit(dataset, dataclasses.replace(TINY_TRAINING, max_epochs=10, patience=2))
    assert len(result.history) == 3
    assert result.best_epoch == 1
    assert [row.is_best for row in result.history] == [True, False, False]
    assert len({row.val_loss for row in result.history}) == 1


def test_save_and_load_model(tmp_path, trained, dataset):
    """Test that a checkpoint restores parameters, statistics and settings"""

    split = SplitConfig(train=(2010, 2017), val=(2018, 2019), test=(2020, 2020))
    directory = training.save_model(
        tmp_path / "model", trained.best.params, dataset.normalizer, TINY_TRAINING, trained.best_epoch, 3.25, split
    )
    assert (directory / training.TRAIN_CONFIG_FILE).is_file()

    loaded = training.load_model(directory)
    assert sorted(loaded.params) == sorted(trained.best.params)
    assert all(np.array_equal(loaded.params[name], trained.best.params[name]) for name in loaded.params)
    assert loaded.normalizer == dataset.normalizer
    assert loaded.config == TINY_TRAINING
    assert loaded.epochs == trained.best_epoch
    assert loaded.q_threshold == 3.25
    assert loaded.split == split

    training.save_model(tmp_path / "blank", trained.best.params, dataset.normalizer, TINY_TRAINING, 0, 3.0)
    with pytest.raises(UntrainedCheckpoint):
        training.load_model(tmp_path / "blank")


def test_write_history_and_ledger(tmp_path, trained):
    """Test the column layout of the history and the per-step ledger"""

    training.write_history(trained.history, tmp_path / "history.tsv")
    rows = _read_tsv(tmp_path / "history.tsv")
    assert tuple(rows[0]) == training.HISTORY_COLUMNS
    assert len(rows) == len(trained.history) + 1
    assert rows[1][0] == "1"
    assert rows[1][-1] == "1"
    assert float(rows[1][5]) == trained.history[0].val_male

    training.write_ledger(trained.bundles, tmp_path / "ledger.tsv")
    rows = _read_tsv(tmp_path / "ledger.tsv")
    assert tuple(rows[0]) == training.LEDGER_COLUMNS
    assert len(rows) == len(trained.bundles) + 1
    assert [row[0] for row in rows[1:]] == [str(item) for item in range(len(trained.bundles))]
    assert float(rows[-1][-1]) == trained.bundles[-1].l_total
