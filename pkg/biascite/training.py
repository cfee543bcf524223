"""Training loop joining the encoder, the heads and the robust objectives

One step runs, in order:

1. encode the venue-inclusive and venue-excluded graph views (full graph, masked batch)
2. Stage A, then Stage B (or the single-stage head)
3. per-sample squared log error and the environment risks
4. GroupDRO weight update, then the weighted objective
5. counterfactual effects of the actionable factors and their penalties
6. optional auxiliary terms, the total loss and its gradients
7. one AdamW update at the learning rate of the current epoch
"""
import csv
import dataclasses
import logging
import math
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Iterable
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
import toml

from biascite import autodiff as ad
from biascite import objectives as obj
from biascite.agents import FeatureNormalizer
from biascite.agents import PaperFeatureVector
from biascite.autodiff import Tape
from biascite.autodiff import Tensor
from biascite.config import from_mapping
from biascite.encoder import EncoderConfig
from biascite.encoder import EncoderMode
from biascite.encoder import encode
from biascite.encoder import init_params
from biascite.errors import ConfigError
from biascite.errors import NonFiniteLoss
from biascite.errors import NonFiniteValue
from biascite.errors import UntrainedCheckpoint
from biascite.graph import CorpusSplit
from biascite.graph import HeteroGraph
from biascite.graph import NodeKind
from biascite.graph import PaperRecord
from biascite.graph import SplitConfig
from biascite.graph import YearRange
from biascite.graph import build_graph
from biascite.graph import citation_view
from biascite.graph import temporal_split
from biascite.graph import venue_excluded_view
from biascite.heads import forward_heads
from biascite.heads import init_head_params
from biascite.heads import pred_loss
from biascite.metrics import EvalReport
from biascite.metrics import group_report


__all__ = [
    "TrainConfig",
    "AdamState",
    "ModelState",
    "LossBundle",
    "TrainingData",
    "Prediction",
    "HistoryRow",
    "EarlyStopping",
    "FitResult",
    "TrainedModel",
    "lr_at",
    "adamw_update",
    "prepare_data",
    "stratified_batches",
    "init_model",
    "embed",
    "train_step",
    "predict",
    "validation_loss",
    "evaluate",
    "fit",
    "save_model",
    "load_model",
    "write_history",
    "write_ledger",
    "HISTORY_COLUMNS",
    "LEDGER_COLUMNS",
    "TRAIN_CONFIG_FILE",
]


logger = logging.getLogger(__name__)

TRAIN_CONFIG_FILE = "train_config.toml"
_NO_DECAY_SUFFIXES = ("/bias", "/gain", "/prior")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Loss weights, optimizer, schedule, GroupDRO and model-shape settings

    ``two_stage = false`` swaps the exposure-shielded heads for one head on venue-inclusive
    inputs; ``group_dro = false`` replaces the weighted environment risk with the plain mean.
    """

    lambda_main: float = 1.0
    lambda_reg: float = 0.05
    lambda_mono: float = 1.0
    lambda_smooth: float = 0.1
    lambda_adv: float = 0.0
    lambda_corr: float = 0.0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_epochs: int = 10
    final_lr: float = 1e-5
    max_epochs: int = 200
    batch_size: int = 128
    alpha: float = 0.1
    w_min: float = 0.1
    w_max: float = 0.9
    tau: float = 0.8
    patience: int = 20
    seed: int = 0
    layers: int = 2
    hidden: int = 128
    heads: int = 4
    dropout: float = 0.4
    two_stage: bool = True
    group_dro: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        weights = ("lambda_main", "lambda_reg", "lambda_mono", "lambda_smooth", "lambda_adv", "lambda_corr")
        for name in weights + ("weight_decay",):
            if getattr(self, name) < 0:
                raise ConfigError(f"'{name}' must be non-negative")
        if self.lr <= 0 or self.final_lr <= 0:
            raise ConfigError("learning rate schedule endpoints must be positive")
        if self.max_epochs < 1 or self.warmup_epochs < 0 or self.patience < 1:
            raise ConfigError("'max_epochs' and 'patience' must be positive and 'warmup_epochs' non-negative")
        if self.batch_size < 2:
            raise ConfigError(f"'batch_size' must be at least 2, got {self.batch_size}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0 and self.adam_eps > 0):
            raise ConfigError("AdamW betas must lie in [0, 1) and eps must be positive")
        # the remaining invariants are owned by the component configs
        self.encoder_config()
        self.environment_config()
        self.dro_state()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(layers=self.layers, hidden=self.hidden, heads=self.heads, dropout=self.dropout)

    def environment_config(self) -> obj.EnvironmentConfig:
        return obj.EnvironmentConfig(tau=self.tau)

    def dro_state(self) -> obj.GroupDroState:
        return obj.GroupDroState(alpha=self.alpha, w_min=self.w_min, w_max=self.w_max)

    def counterfactual_config(self, q_threshold: float) -> obj.CounterfactualConfig:
        return obj.CounterfactualConfig(
            q_threshold=q_threshold, lambda_mono=self.lambda_mono, lambda_smooth=self.lambda_smooth
        )

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        return from_mapping(cls, data)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate of ``epoch``

    Linear ramp from ``lr / 10`` to ``lr`` over the warm-up epochs, then a cosine from ``lr``
    that reaches ``final_lr`` at the last epoch.

    :raises ValueError: If ``epoch`` is outside ``[0, max_epochs)``
    """
    if not 0 <= epoch < config.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.max_epochs})")
    start = config.lr / 10.0
    if epoch < config.warmup_epochs:
        return start + (config.lr - start) * epoch / config.warmup_epochs
    span = config.max_epochs - 1 - config.warmup_epochs
    if span <= 0:
        return config.lr
    progress = min(max((epoch - config.warmup_epochs) / span, 0.0), 1.0)
    return config.final_lr + (config.lr - config.final_lr) * (1.0 + math.cos(progress * math.pi)) / 2.0


@dataclasses.dataclass(frozen=True)
class AdamState:
    step: int = 0
    m: Mapping[str, np.ndarray] = dataclasses.field(default_factory=dict)
    v: Mapping[str, np.ndarray] = dataclasses.field(default_factory=dict)


def adamw_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    config: TrainConfig,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One AdamW step with decoupled weight decay

    Biases, layer-norm gains and relation priors are not decayed.
    """
    step = state.step + 1
    beta1, beta2 = config.adam_beta1, config.adam_beta2
    new_params, new_m, new_v = {}, {}, {}
    for name in sorted(params):
        value = params[name]
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        m = beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - beta1) * grad
        v = beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - beta2) * np.square(grad)
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        updated = value - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        if not name.endswith(_NO_DECAY_SUFFIXES):
            updated = updated - lr * config.weight_decay * value
        new_params[name], new_m[name], new_v[name] = updated, m, v
    return new_params, AdamState(step, new_m, new_v)


@dataclasses.dataclass(frozen=True)
class ModelState:
    params: Mapping[str, np.ndarray]
    adam: AdamState = AdamState()
    epoch: int = 0
    step: int = 0


@dataclasses.dataclass(frozen=True)
class LossBundle:
    """Every term of one training step

    ``l_low``/``l_high`` are ``None`` for an environment that was neither present nor seen
    before; ``l_groupdro`` is the plain mean risk when GroupDRO is disabled.
    """

    step: int
    epoch: int
    lr: float
    l_low: Optional[float]
    l_high: Optional[float]
    l_groupdro: float
    l_mono: Mapping[str, float]
    l_smooth: Mapping[str, float]
    l_reg: float
    l_adv: Optional[float]
    l_calib: Optional[float]
    l_total: float
    w: Tuple[float, float]

    def reconstructed_total(self, config: TrainConfig) -> float:
        """``L_total`` recomputed from the logged parts and the loss weights"""
        total = config.lambda_main * self.l_groupdro + config.lambda_reg * self.l_reg
        if self.l_adv is not None:
            total += config.lambda_adv * self.l_adv
        if self.l_calib is not None:
            total += config.lambda_corr * self.l_calib
        return total


@dataclasses.dataclass(frozen=True)
class TrainingData:
    """Model inputs of a corpus, aligned with the graph's paper order

    ``labels`` is NaN for unlabeled papers. ``q_threshold`` is the training-split median of the
    raw text quality.
    """

    paper_ids: Tuple[str, ...]
    graph_plus: HeteroGraph
    graph_minus: HeteroGraph
    f_plus: np.ndarray
    f_minus: np.ndarray
    raw: Mapping[str, np.ndarray]
    labels: np.ndarray
    env: np.ndarray
    split: CorpusSplit
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    normalizer: FeatureNormalizer
    q_threshold: float
    exposure_target: Optional[np.ndarray] = None

    def indices(self, split: str) -> np.ndarray:
        try:
            return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[split]
        except KeyError:
            raise ValueError(f"unknown split '{split}'") from None


def prepare_data(
    records: Sequence[PaperRecord],
    features: Mapping[str, PaperFeatureVector],
    split_config: SplitConfig = SplitConfig(),
    env_config: obj.EnvironmentConfig = obj.EnvironmentConfig(),
    normalizer: Optional[FeatureNormalizer] = None,
    q_threshold: Optional[float] = None,
    exposure_target: Optional[Mapping[str, float]] = None,
) -> TrainingData:
    """Split the corpus, fit the normalizer on the training split and build both graph views

    Citations made by papers outside the training and validation years are hidden from the
    graph, so test papers cannot leak their own outgoing references into training.

    :param normalizer: Reuse a fitted normalizer (e.g. from a checkpoint) instead of fitting
    :param q_threshold: Reuse a stored low-region threshold for text quality
    :param exposure_target: Optional reference exposure per paper for the calibration term
    :raises ValueError: If the training split is empty or a train/val paper has no label
    """
    split = temporal_split(records, split_config)
    if normalizer is None:
        if not split.train_ids:
            raise ValueError("the training split is empty")
        normalizer = FeatureNormalizer.fit(features[paper] for paper in split.train_ids)
    labels_by_id = {record.id: record.label_citations for record in records}
    for paper in split.train_ids + split.val_ids:
        if labels_by_id[paper] is None:
            raise ValueError(f"paper '{paper}' in the train/val split has no citation label")

    full = build_graph(records, features, normalizer)
    graph_plus = citation_view(full, split.train_ids + split.val_ids)
    graph_minus = venue_excluded_view(graph_plus)
    paper_ids = graph_plus.nodes[NodeKind.PAPER]
    index = graph_plus.index(NodeKind.PAPER)
    vectors = [features[paper] for paper in paper_ids]
    views = normalizer.views(vectors)
    raw = {name: np.array([float(getattr(item, name)) for item in vectors]) for name in ("v", "r", "q")}
    if q_threshold is None:
        train_q = [features[paper].q for paper in split.train_ids]
        q_threshold = float(np.median(train_q)) if train_q else 3.0
    target = None
    if exposure_target is not None:
        target = np.array([float(exposure_target.get(paper, np.nan)) for paper in paper_ids])

    def positions(ids: Iterable[str]) -> np.ndarray:
        return np.array(sorted(index[paper] for paper in ids), dtype=np.int64)

    return TrainingData(
        paper_ids=paper_ids,
        graph_plus=graph_plus,
        graph_minus=graph_minus,
        f_plus=views.f_plus,
        f_minus=views.f_minus,
        raw=raw,
        labels=np.array([np.nan if labels_by_id[paper] is None else float(labels_by_id[paper]) for paper in paper_ids]),
        env=obj.partition_environments(raw["v"], env_config),
        split=split,
        train_idx=positions(split.train_ids),
        val_idx=positions(split.val_ids),
        test_idx=positions(split.test_ids),
        normalizer=normalizer,
        q_threshold=q_threshold,
        exposure_target=target,
    )


def stratified_batches(
    indices: np.ndarray, env: np.ndarray, batch_size: int, rng: np.random.Generator
) -> List[np.ndarray]:
    """Shuffle ``indices`` into batches without replacement, spreading each environment evenly

    Every batch holds members of both environments whenever each has at least as many members
    as there are batches.
    """
    indices = np.asarray(indices, dtype=np.int64)
    count = max(1, math.ceil(len(indices) / batch_size))
    parts: List[List[np.ndarray]] = [[] for _ in range(count)]
    for label in obj.Environment:
        members = rng.permutation(indices[env[indices] == label])
        for position, chunk in enumerate(np.array_split(members, count)):
            parts[position].append(chunk)
    batches = [np.sort(np.concatenate(part)) for part in parts]
    return [batches[position] for position in rng.permutation(count) if len(batches[position])]


def init_model(config: TrainConfig) -> ModelState:
    """Initial parameters for the configured arrangement, fully determined by ``config.seed``"""
    seeds = np.random.SeedSequence(config.seed).generate_state(3)
    params = init_params(config.encoder_config(), int(seeds[0]))
    params.update(init_head_params(config.hidden, int(seeds[1]), config.two_stage))
    if config.lambda_adv > 0:
        params.update(obj.init_adversary_params(config.hidden, int(seeds[2])))
    return ModelState(params)


def embed(
    data: TrainingData,
    params: Mapping[str, Any],
    config: TrainConfig,
    train: bool,
    rng: Optional[np.random.Generator],
) -> Tuple[Tensor, Optional[Tensor]]:
    encoder = config.encoder_config()
    z_plus = encode(data.graph_plus, params, encoder, EncoderMode.WITH_VENUE, train, rng).z
    z_minus = None
    if config.two_stage or config.lambda_adv > 0:
        z_minus = encode(data.graph_minus, params, encoder, EncoderMode.WITHOUT_VENUE, train, rng).z
    return z_plus, z_minus


def train_step(
    batch: np.ndarray,
    model: ModelState,
    dro: obj.GroupDroState,
    data: TrainingData,
    config: TrainConfig,
    rng: np.random.Generator,
) -> Tuple[ModelState, obj.GroupDroState, LossBundle]:
    """Run one optimization step on the papers at positions ``batch``

    :raises NonFiniteLoss: If any term or the updated parameters become NaN or infinite; the
                           error carries the terms computed so far
    """
    lr = lr_at(model.epoch, config)
    counterfactual = config.counterfactual_config(data.q_threshold)
    params = {name: Tensor(value, requires_grad=True, name=name) for name, value in model.params.items()}
    diagnostics: Dict[str, Any] = {"step": model.step, "epoch": model.epoch, "lr": lr, "w": list(dro.w)}
    try:
        with Tape() as tape:
            z_plus, z_minus = embed(data, params, config, True, rng)
            batch_plus = ad.take(z_plus, batch)
            batch_minus = ad.take(z_minus, batch) if z_minus is not None else None
            f_plus, f_minus = data.f_plus[batch], data.f_minus[batch]
            heads = forward_heads(params, batch_plus, batch_minus, f_plus, f_minus, config.two_stage)
            losses = pred_loss(data.labels[batch], heads.u)
            env = data.env[batch]

            risks = obj.group_risks_with_fallback(losses, env, dro)
            floats = risks.floats()
            diagnostics["risks"] = list(floats)
            if config.group_dro and risks.complete:
                dro = obj.update_group_weights(dro, floats)  # type: ignore[arg-type]
            else:
                known = tuple(new if new is not None else old for new, old in zip(floats, dro.risks))
                dro = dataclasses.replace(dro, risks=known)
            main = obj.groupdro_objective(dro.w, risks.values) if config.group_dro else ad.mean(losses)
            diagnostics["l_groupdro"] = main.item()

            mono: Dict[str, Tensor] = {}
            smooth: Dict[str, Tensor] = {}
            if config.lambda_reg > 0:
                for factor in counterfactual.factors:
                    delta = obj.counterfactual_delta(
                        factor,
                        params,
                        batch_plus,
                        batch_minus,
                        f_plus,
                        f_minus,
                        counterfactual,
                        data.normalizer,
                        baseline=heads.u,
                        two_stage=config.two_stage,
                    )
                    low = obj.low_region(factor, data.raw[factor][batch], counterfactual)
                    mono[factor] = obj.mono_loss(delta, low, counterfactual.direction(factor))
                    smooth[factor] = obj.smooth_loss(delta)
            reg = obj.total_reg(mono, smooth, config.lambda_mono, config.lambda_smooth)
            diagnostics["l_reg"] = reg.item()

            adv = None
            if config.lambda_adv > 0:
                adv = obj.adversarial_loss(batch_minus if batch_minus is not None else batch_plus, env, params)
                diagnostics["l_adv"] = adv.item()
            calib = None
            if config.lambda_corr > 0 and heads.exposure is not None and data.exposure_target is not None:
                calib = obj.calibration_loss(heads.exposure, data.exposure_target[batch])
                if calib is not None:
                    diagnostics["l_calib"] = calib.item()

            total = obj.total_loss(
                main, reg, config.lambda_main, config.lambda_reg, adv, calib, config.lambda_adv, config.lambda_corr
            )
            grads = tape.backward(total)
    except NonFiniteValue as err:
        raise NonFiniteLoss(f"training step {model.step} became non-finite: {err}", diagnostics) from err

    new_params, adam = adamw_update(
        model.params, {name: grads.get(tensor) for name, tensor in params.items()}, model.adam, lr, config
    )
    if not all(np.all(np.isfinite(value)) for value in new_params.values()):
        raise NonFiniteLoss(f"parameters became non-finite after step {model.step}", diagnostics)

    bundle = LossBundle(
        step=model.step,
        epoch=model.epoch,
        lr=lr,
        l_low=floats[0],
        l_high=floats[1],
        l_groupdro=main.item(),
        l_mono={key: value.item() for key, value in mono.items()},
        l_smooth={key: value.item() for key, value in smooth.items()},
        l_reg=reg.item(),
        l_adv=None if adv is None else adv.item(),
        l_calib=None if calib is None else calib.item(),
        l_total=total.item(),
        w=dro.w,
    )
    return dataclasses.replace(model, params=new_params, adam=adam, step=model.step + 1), dro, bundle


@dataclasses.dataclass(frozen=True)
class Prediction:
    """Inference output per paper: ``u = log1p(Y_hat)``, ``Y_hat`` and the exposure estimate"""

    paper_ids: Tuple[str, ...]
    u: np.ndarray
    y_hat: np.ndarray
    exposure: Optional[np.ndarray]


def predict(
    data: TrainingData,
    params: Mapping[str, np.ndarray],
    config: TrainConfig,
    indices: Optional[np.ndarray] = None,
) -> Prediction:
    """Deterministic (dropout-free) predictions for the papers at ``indices`` (default: all)"""
    rows = np.arange(len(data.paper_ids)) if indices is None else np.asarray(indices, dtype=np.int64)
    z_plus, z_minus = embed(data, params, config, False, None)
    heads = forward_heads(
        params,
        z_plus.values[rows],
        None if z_minus is None else z_minus.values[rows],
        data.f_plus[rows],
        data.f_minus[rows],
        config.two_stage,
    )
    u = heads.u.numpy()
    return Prediction(
        paper_ids=tuple(data.paper_ids[item] for item in rows),
        u=u,
        y_hat=np.expm1(u),
        exposure=None if heads.exposure is None else heads.exposure.numpy(),
    )


def validation_loss(labels: np.ndarray, u: np.ndarray) -> float:
    """Unweighted mean squared log error"""
    return float(np.mean(np.square(np.log1p(labels) - u)))


def _env_names(env: np.ndarray) -> List[str]:
    return [obj.Environment(int(item)).label for item in env]


def evaluate(
    data: TrainingData, params: Mapping[str, np.ndarray], config: TrainConfig, split: str = "test"
) -> EvalReport:
    """Metrics of the predictions on one split, overall and per environment and band"""
    rows = data.indices(split)
    labels = data.labels[rows]
    if np.any(np.isnan(labels)):
        raise ValueError(f"split '{split}' holds unlabeled papers")
    prediction = predict(data, params, config, rows)
    return group_report(labels, prediction.u, _env_names(data.env[rows]))


@dataclasses.dataclass
class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` consecutive epochs"""

    patience: int
    best: float = math.inf
    best_epoch: int = -1
    wait: int = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record the loss of ``epoch``; returns whether it is a new best"""
        if loss < self.best:
            self.best, self.best_epoch, self.wait = loss, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


HISTORY_COLUMNS = (
    "epoch",
    "lr",
    "train_total",
    "train_groupdro",
    "val_loss",
    "val_male",
    "val_rmsle",
    "val_ndcg10",
    "val_ndcg20",
    "w_low",
    "w_high",
    "is_best",
)


@dataclasses.dataclass(frozen=True)
class HistoryRow:
    """One epoch of the training history; ``epoch`` counts completed epochs from 1"""

    epoch: int
    lr: float
    train_total: float
    train_groupdro: float
    val_loss: float
    val_male: float
    val_rmsle: float
    val_ndcg10: float
    val_ndcg20: float
    w_low: float
    w_high: float
    is_best: bool


@dataclasses.dataclass(frozen=True)
class FitResult:
    """Best-validation model plus the full history

    ``best_epoch`` counts completed epochs, so a one-epoch run has ``best_epoch == 1``.
    """

    best: ModelState
    best_epoch: int
    best_report: EvalReport
    history: List[HistoryRow]
    bundles: List[LossBundle]
    dro: obj.GroupDroState


def fit(data: TrainingData, config: TrainConfig) -> FitResult:
    """Train with early stopping on the unweighted validation loss

    :raises ValueError: If the train or validation split is empty
    """
    if not len(data.train_idx) or not len(data.val_idx):
        raise ValueError("training needs non-empty train and validation splits")
    model = init_model(config)
    dro = config.dro_state()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    stopper = EarlyStopping(config.patience)
    val_labels = data.labels[data.val_idx]
    val_envs = _env_names(data.env[data.val_idx])

    history: List[HistoryRow] = []
    bundles: List[LossBundle] = []
    best, best_report = model, None
    for epoch in range(config.max_epochs):
        model = dataclasses.replace(model, epoch=epoch)
        epoch_bundles = []
        for batch in stratified_batches(data.train_idx, data.env, config.batch_size, rng):
            model, dro, bundle = train_step(batch, model, dro, data, config, rng)
            epoch_bundles.append(bundle)
        bundles.extend(epoch_bundles)

        prediction = predict(data, model.params, config, data.val_idx)
        val_loss = validation_loss(val_labels, prediction.u)
        report = group_report(val_labels, prediction.u, val_envs)
        improved = stopper.update(epoch, val_loss)
        if improved:
            best, best_report = model, report
        history.append(
            HistoryRow(
                epoch=epoch + 1,
                lr=lr_at(epoch, config),
                train_total=float(np.mean([item.l_total for item in epoch_bundles])),
                train_groupdro=float(np.mean([item.l_groupdro for item in epoch_bundles])),
                val_loss=val_loss,
                val_male=report.male,
                val_rmsle=report.rmsle,
                val_ndcg10=report.ndcg.get(10, float("nan")),
                val_ndcg20=report.ndcg.get(20, float("nan")),
                w_low=dro.w[0],
                w_high=dro.w[1],
                is_best=improved,
            )
        )
        logger.info(
            "Epoch %d/%d lr=%.3g train=%.5f val=%.5f w=(%.3f, %.3f)%s",
            epoch + 1,
            config.max_epochs,
            history[-1].lr,
            history[-1].train_total,
            val_loss,
            dro.w[0],
            dro.w[1],
            " *" if improved else "",
        )
        if stopper.should_stop:
            logger.info("Validation loss flat for %d epochs, stopping after epoch %d", config.patience, epoch + 1)
            break

    return FitResult(best, stopper.best_epoch + 1, best_report, history, bundles, dro)  # type: ignore[arg-type]


@dataclasses.dataclass(frozen=True)
class TrainedModel:
    """Everything needed to predict with a saved checkpoint"""

    params: Mapping[str, np.ndarray]
    normalizer: FeatureNormalizer
    config: TrainConfig
    epochs: int
    q_threshold: float
    split: SplitConfig = SplitConfig()


def save_model(
    directory: Path,
    params: Mapping[str, np.ndarray],
    normalizer: FeatureNormalizer,
    config: TrainConfig,
    epochs: int,
    q_threshold: float,
    split: SplitConfig = SplitConfig(),
) -> Path:
    """Write parameters, normalizer statistics and metadata to a checkpoint container

    The training configuration goes next to it as TOML; the split years are kept in the
    container so evaluation reuses the training split.
    """
    arrays = dict(params)
    arrays.update(normalizer.to_arrays())
    arrays["meta/epochs"] = np.array([float(epochs)])
    arrays["meta/q_threshold"] = np.array([q_threshold])
    spans = (split.train, split.val, split.test)
    arrays["meta/split_years"] = np.array([float(year) for span in spans for year in span])
    directory = ad.save_checkpoint(arrays, directory)
    (directory / TRAIN_CONFIG_FILE).write_text(toml.dumps(config.to_dict()), encoding="utf-8")
    return directory


def _split_years(arrays: Mapping[str, np.ndarray]) -> SplitConfig:
    if "meta/split_years" not in arrays:
        return SplitConfig()
    years = [int(item) for item in arrays["meta/split_years"]]
    return SplitConfig(
        train=YearRange(years[0], years[1]), val=YearRange(years[2], years[3]), test=YearRange(years[4], years[5])
    )


def load_model(directory: Path) -> TrainedModel:
    """Read a checkpoint written by :func:`save_model`

    :raises UntrainedCheckpoint: If the checkpoint records zero completed epochs
    """
    directory = Path(directory)
    arrays = ad.load_checkpoint(directory)
    try:
        config = TrainConfig.from_dict(toml.load(str(directory / TRAIN_CONFIG_FILE)))
    except toml.TomlDecodeError as err:
        raise ConfigError(f"Failed to parse '{directory / TRAIN_CONFIG_FILE}'") from err
    epochs = int(arrays.get("meta/epochs", np.zeros(1))[0])
    if epochs < 1:
        raise UntrainedCheckpoint(f"checkpoint '{directory}' holds no completed training epoch")
    params = {
        name: value for name, value in arrays.items() if not name.startswith(("meta/", "normalizer/"))
    }
    return TrainedModel(
        params=params,
        normalizer=FeatureNormalizer.from_arrays(arrays),
        config=config,
        epochs=epochs,
        q_threshold=float(arrays["meta/q_threshold"][0]),
        split=_split_years(arrays),
    )


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_history(rows: Iterable[HistoryRow], path: Path) -> None:
    """Tab-separated history, floats at full precision"""
    with Path(path).open("w", encoding="utf-8", newline="") as outfile:
        writer = csv.writer(outfile, delimiter="\t", lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            writer.writerow([_cell(getattr(row, name)) for name in HISTORY_COLUMNS])


LEDGER_COLUMNS = ("step", "L_low", "L_high", "w_low", "w_high", "L_mono", "L_smooth", "L_total")


def write_ledger(bundles: Iterable[LossBundle], path: Path) -> None:
    """Per-step loss ledger; empty cells mark environments without a risk"""
    with Path(path).open("w", encoding="utf-8", newline="") as outfile:
        writer = csv.writer(outfile, delimiter="\t", lineterminator="\n")
        writer.writerow(LEDGER_COLUMNS)
        for item in bundles:
            writer.writerow(
                [
                    _cell(value)
                    for value in (
                        item.step,
                        item.l_low,
                        item.l_high,
                        item.w[0],
                        item.w[1],
                        float(sum(item.l_mono.values())),
                        float(sum(item.l_smooth.values())),
                        item.l_total,
                    )
                ]
            )
