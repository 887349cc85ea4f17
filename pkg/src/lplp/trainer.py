"""Training for the joint MIL + LLP model and the comparison methods.

Methods:

``ours``
    f, g, h trained jointly; positive bags pay the soft-masked proportion
    loss, every bag pays ``w_mil`` times the MIL loss.
``two_stage``
    f, g trained on the MIL loss alone, frozen, then a fresh f', h trained on
    the proportion loss over the instances the MIL head selects.
``ppl``
    one (C+1)-way classifier trained with the partial proportion loss.
``ce``, ``pl``
    oracle baselines reading generator ground truth (instance labels, full
    proportions).  They exist only to bound the weakly supervised methods.
"""
from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad
from .bagdata import ConfigurationError, DatasetSplit, atomic_write_text, full_proportion_from_partial
from .llp import masked_proportion_segments, ppl_loss_segments, proportion_loss
from .mil import KINDS, AggregationKind, Segments, aggregate_segments, mil_loss
from .nets import FlatClassifier, Mlp, ModelTriple, mlp_forward, save_checkpoint

log = logging.getLogger(__name__)

METHODS = ("ce", "pl", "ppl", "two_stage", "ours")
SELECT = "select_on_validation"


class TrainingError(RuntimeError):
    pass


class NonFiniteGradientError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "ours"
    learning_rate: float = 3e-4
    batch_bags: int = 16
    w_mil: float = 0.01
    patience: int = 30
    max_epochs: int = 1000
    aggregation: Union[str, AggregationKind] = SELECT
    lse_r: float = 4.0
    inference_threshold: float = 0.5
    seed: int = 0
    hidden: tuple = (32, 16)
    # open-question switches
    ppl_positive_block: str = "renormalize"
    two_stage_reuse_extractor: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.patience < 1 or self.batch_bags < 1 or self.max_epochs < 1:
            raise ConfigurationError("patience, batch_bags and max_epochs must be at least 1")
        if self.w_mil < 0:
            raise ConfigurationError("w_mil must be non-negative")
        if not 0 < self.inference_threshold < 1:
            raise ConfigurationError("inference_threshold must lie in (0, 1)")
        if self.ppl_positive_block not in ("renormalize", "ignore"):
            raise ConfigurationError("ppl_positive_block must be 'renormalize' or 'ignore'")
        agg = self.aggregation
        if isinstance(agg, str) and agg != SELECT:
            try:
                object.__setattr__(self, "aggregation", AggregationKind.parse(agg, self.lse_r))
            except ValueError as exc:
                raise ConfigurationError(str(exc)) from None

    def aggregation_candidates(self) -> list:
        if self.aggregation == SELECT:
            return [AggregationKind(k, self.lse_r) for k in KINDS]
        return [self.aggregation]


# -- Adam -----------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              blocks: Optional[dict] = None):
    """One bias-corrected Adam update.  Returns ``(new_params, state)``."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and optimizer state must have equal length")
    bad = ~np.isfinite(grads)
    if bad.any():
        where = int(np.argmax(bad))
        name = next((k for k, s in (blocks or {}).items() if s.start <= where < s.stop), "params")
        raise NonFiniteGradientError(f"non-finite gradient in block {name!r} (index {where})")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps), state


# -- early stopping -------------------------------------------------------

class EarlyStopping:
    """Stops once ``patience`` consecutive epochs fail to beat the best loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.since = 0

    def update(self, val_loss: float, epoch: int) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.since = val_loss, epoch, 0
            return False
        self.since += 1
        return self.since >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    timestamp: float
    epochs_since_improvement: int

    def to_text(self) -> str:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(self.timestamp))
        return (f"epoch={self.epoch}\ttrain_loss={self.train_loss!r}\tval_loss={self.val_loss!r}"
                f"\ttimestamp={stamp}\tepochs_since_improvement={self.epochs_since_improvement}")


@dataclass
class LoopResult:
    params: np.ndarray
    best_val_loss: float
    best_epoch: int
    epochs_run: int
    epochs_since_improvement: int
    history: list


def run_training_loop(params: np.ndarray, grad_fn: Callable, val_fn: Callable, n_train: int, *,
                      learning_rate: float, batch_bags: int, patience: int, max_epochs: int,
                      rng: np.random.Generator, blocks: Optional[dict] = None,
                      on_epoch: Optional[Callable] = None) -> LoopResult:
    """Minibatch Adam with early stopping on a validation loss.

    ``grad_fn(params, bag_indices) -> (loss, grad)`` and ``val_fn(params) ->
    float``.  Returns the parameters of the best validation epoch.
    """
    state = AdamState.zeros(params.size)
    stopper = EarlyStopping(patience)
    best_params = params.copy()
    history = []
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n_train)
        losses = []
        for start in range(0, n_train, batch_bags):
            loss, grad = grad_fn(params, order[start: start + batch_bags])
            try:
                params, state = adam_step(params, grad, state, learning_rate, blocks)
            except NonFiniteGradientError as exc:
                log.warning("epoch %d aborted: %s", epoch, exc)
                break
            losses.append(loss)
        val = float(val_fn(params))
        stop = stopper.update(val, epoch)
        if stopper.best_epoch == epoch:
            best_params = params.copy()
        rec = EpochRecord(epoch, float(np.mean(losses)) if losses else math.nan, val,
                          time.time(), stopper.since)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if stop:
            break
    return LoopResult(best_params, stopper.best, stopper.best_epoch, epoch, stopper.since, history)


# -- data preparation -----------------------------------------------------

@dataclass
class BagArrays:
    """Dense per-bag arrays for fast batching."""
    X: list
    labels: list
    Y: np.ndarray
    P: np.ndarray           # (B, C) partial proportions; zeros for negative bags
    full: np.ndarray        # (B, C+1) full proportions from ground truth (oracle use only)

    @classmethod
    def from_bags(cls, bags, C: int) -> "BagArrays":
        X = [b.features for b in bags]
        labels = [b.true_labels for b in bags]
        Y = np.array([b.bag_label for b in bags], dtype=np.float64)
        P = np.zeros((len(bags), C))
        full = np.zeros((len(bags), C + 1))
        for i, b in enumerate(bags):
            p_neg = float(np.mean(labels[i] == 0))
            if b.bag_label == 1:
                P[i] = b.partial_proportions
                full[i] = full_proportion_from_partial(b.partial_proportions, p_neg)
            else:
                full[i, C] = 1.0
        return cls(X, labels, Y, P, full)

    def __len__(self):
        return len(self.X)

    def batch(self, idx):
        idx = np.asarray(idx)
        X = np.concatenate([self.X[i] for i in idx])
        return X, Segments([len(self.X[i]) for i in idx]), idx


def flat_target_index(labels: np.ndarray, C: int) -> np.ndarray:
    """Column of the (C+1)-way head for each instance label (negative last)."""
    labels = np.asarray(labels)
    return np.where(labels == 0, C, labels - 1)


# -- per-batch losses -----------------------------------------------------

def joint_losses(bound, X, seg: Segments, Y, P, kind: AggregationKind, w_mil: float, tape):
    """Per-bag joint losses; positive bags add the proportion loss."""
    feats = mlp_forward(bound["f"], tape.const(X), tape)
    scores = ad.sigmoid(ad.reshape(mlp_forward(bound["g"], feats, tape), (-1,)))
    probs = ad.softmax(mlp_forward(bound["h"], feats, tape), axis=-1)
    S = aggregate_segments(scores, seg, kind)
    l_mil = mil_loss(Y, S)
    est = masked_proportion_segments(scores, probs, seg)
    l_llp = proportion_loss(P, est)
    return l_llp * Y + l_mil * w_mil


def mil_losses(bound, X, seg, Y, kind, tape):
    feats = mlp_forward(bound["f"], tape.const(X), tape)
    scores = ad.sigmoid(ad.reshape(mlp_forward(bound["g"], feats, tape), (-1,)))
    return mil_loss(Y, aggregate_segments(scores, seg, kind))


def joint_loss(model: ModelTriple, bag, kind: AggregationKind, w_mil: float, tape, bound=None):
    """Joint loss of a single bag as a scalar node."""
    if bound is None:
        bound, _ = model.bind(tape)
    C = model.num_classes
    P = bag.partial_proportions[None, :] if bag.bag_label == 1 else np.zeros((1, C))
    out = joint_losses(bound, bag.features, Segments([len(bag)]), np.array([float(bag.bag_label)]),
                       P, kind, w_mil, tape)
    return out[0]


def _flat_probs(bound, X, tape):
    feats = mlp_forward(bound["f"], tape.const(X), tape)
    return ad.softmax(mlp_forward(bound["head"], feats, tape), axis=-1)


def _llp_probs(bound, X, tape):
    fe = bound["f_llp"] if "f_llp" in bound else bound["f"]
    feats = mlp_forward(fe, tape.const(X), tape)
    return ad.softmax(mlp_forward(bound["h"], feats, tape), axis=-1)


class _Objective:
    """Mean per-bag loss over bag subsets for one method and parameter subset."""

    def __init__(self, model, trainable, per_bag: Callable):
        self.model = model
        self.trainable = tuple(trainable)
        self.per_bag = per_bag
        self.blocks = model.slices(self.trainable)

    def _model(self, params):
        return self.model.with_flat(params, self.trainable)

    def value_and_grad(self, params, arrays: BagArrays, idx):
        tape = ad.Tape()
        bound, leaf = self._model(params).bind(tape, self.trainable)
        X, seg, idx = arrays.batch(idx)
        loss = ad.mean(self.per_bag(bound, X, seg, idx, arrays, tape))
        ad.backward(tape, loss)
        return float(loss.value), leaf.adjoint.copy()

    def value(self, params, arrays: BagArrays) -> float:
        tape = ad.Tape()
        bound, _ = self._model(params).bind(tape, ())
        X, seg, idx = arrays.batch(np.arange(len(arrays)))
        return float(ad.mean(self.per_bag(bound, X, seg, idx, arrays, tape)).value)


def _objective(method: str, model, config: TrainConfig, kind=None, trainable=None) -> _Objective:
    C = model.num_classes
    if method == "ours":
        fn = lambda b, X, seg, idx, a, t: joint_losses(b, X, seg, a.Y[idx], a.P[idx], kind, config.w_mil, t)
        return _Objective(model, trainable or ("f", "g", "h"), fn)
    if method == "mil":
        fn = lambda b, X, seg, idx, a, t: mil_losses(b, X, seg, a.Y[idx], kind, t)
        return _Objective(model, trainable or ("f", "g"), fn)
    if method == "llp":
        fn = lambda b, X, seg, idx, a, t: proportion_loss(a.P[idx], seg.mean(_llp_probs(b, X, t)))
        return _Objective(model, trainable, fn)
    if method == "ppl":
        fn = lambda b, X, seg, idx, a, t: ppl_loss_segments(
            _flat_probs(b, X, t), seg, a.Y[idx], a.P[idx], config.ppl_positive_block)
        return _Objective(model, ("f", "head"), fn)
    if method == "pl":
        fn = lambda b, X, seg, idx, a, t: proportion_loss(a.full[idx], seg.mean(_flat_probs(b, X, t)))
        return _Objective(model, ("f", "head"), fn)
    if method == "ce":
        def fn(b, X, seg, idx, a, t):
            probs = _flat_probs(b, X, t)
            target = flat_target_index(np.concatenate([a.labels[i] for i in idx]), C)
            picked = probs[np.arange(target.size), target]
            return seg.mean(-ad.safe_log(picked))
        return _Objective(model, ("f", "head"), fn)
    raise ConfigurationError(f"unknown method {method!r}")


# -- training drivers -----------------------------------------------------

@dataclass
class TrainState:
    model: object
    method: str
    epoch: int
    best_epoch: int
    best_val_loss: float
    epochs_since_improvement: int
    history: list = field(default_factory=list)
    aggregation: Optional[AggregationKind] = None
    candidates: dict = field(default_factory=dict)
    stage1: Optional["TrainState"] = None
    skipped_bags: int = 0


def _seeds(seed: int):
    init, shuffle = np.random.SeedSequence(seed).spawn(2)
    return init, shuffle


def _check_pairing(config: TrainConfig, data: DatasetSplit):
    C = data.num_positive_classes
    for name in ("train", "validation"):
        bags = data.split(name)
        if not bags:
            raise ConfigurationError(f"{name} split is empty")
        if config.method in ("ours", "two_stage") and len({b.bag_label for b in bags}) < 2:
            raise ConfigurationError(f"{config.method} needs positive and negative {name} bags")
        if config.method in ("ce", "pl"):
            for b in bags:
                lab = b.true_labels
                if lab.min() < 0 or lab.max() > C:
                    raise ConfigurationError(f"bag {b.bag_id}: instance labels outside 0..{C}")


def _fit(objective: _Objective, params0, train: BagArrays, val: BagArrays, config: TrainConfig,
         shuffle_seed, on_epoch=None) -> LoopResult:
    return run_training_loop(
        params0,
        lambda p, idx: objective.value_and_grad(p, train, idx),
        lambda p: objective.value(p, val),
        len(train), learning_rate=config.learning_rate, batch_bags=config.batch_bags,
        patience=config.patience, max_epochs=config.max_epochs,
        rng=np.random.default_rng(shuffle_seed), blocks=objective.blocks, on_epoch=on_epoch)


def _state_from(result: LoopResult, model, method, **kw) -> TrainState:
    return TrainState(model, method, result.epochs_run, result.best_epoch, result.best_val_loss,
                      result.epochs_since_improvement, result.history, **kw)


def _train_selecting(method: str, model0, config, train, val, shuffle_seed, on_epoch):
    """Train once per aggregation candidate, keep the lowest validation loss."""
    best = None
    candidates = {}
    for kind in config.aggregation_candidates():
        obj = _objective(method, model0, config, kind)
        res = _fit(obj, model0.flat(obj.trainable), train, val, config, shuffle_seed, on_epoch)
        candidates[str(kind)] = res.best_val_loss
        log.info("%s aggregation=%s best_val=%.6g epochs=%d", method, kind, res.best_val_loss, res.epochs_run)
        if best is None or res.best_val_loss < best[1].best_val_loss:
            best = (kind, res, obj)
    kind, res, obj = best
    return _state_from(res, model0.with_flat(res.params, obj.trainable), method,
                       aggregation=kind, candidates=candidates)


def train(config: TrainConfig, data: DatasetSplit, out_dir=None) -> TrainState:
    """Train ``config.method`` and keep the best-validation parameters.

    With ``out_dir`` a checkpoint (``checkpoint.txt``) and per-epoch metric
    records (``metrics.txt``) are written there.
    """
    _check_pairing(config, data)
    if config.method == "two_stage":
        return train_two_stage(config, data, out_dir)
    C, d = data.num_positive_classes, data.feature_dim
    train_a = BagArrays.from_bags(data.train, C)
    val_a = BagArrays.from_bags(data.validation, C)
    init_seed, shuffle_seed = _seeds(config.seed)
    sink = _MetricSink(out_dir)
    if config.method == "ours":
        model0 = ModelTriple.init(d, C, init_seed, config.hidden)
        state = _train_selecting("ours", model0, config, train_a, val_a, shuffle_seed, sink)
    else:
        model0 = FlatClassifier.init(d, C, init_seed, config.hidden)
        obj = _objective(config.method, model0, config)
        res = _fit(obj, model0.flat(obj.trainable), train_a, val_a, config, shuffle_seed, sink)
        state = _state_from(res, model0.with_flat(res.params, obj.trainable), config.method)
    _write_checkpoint(out_dir, state, config)
    return state


def select_positive(model: ModelTriple, arrays: BagArrays, threshold: float):
    """Keep positive bags' instances whose frozen MIL score reaches ``threshold``."""
    keep_X, keep_P, skipped = [], [], 0
    for X, y, p in zip(arrays.X, arrays.Y, arrays.P):
        if y != 1:
            continue
        s = predict_scores(model, X)
        sel = s >= threshold
        if not sel.any():
            skipped += 1
            continue
        keep_X.append(X[sel])
        keep_P.append(p)
    P = np.array(keep_P).reshape(len(keep_P), arrays.P.shape[1])
    sub = BagArrays(keep_X, [np.zeros(len(x), dtype=np.int64) for x in keep_X],
                    np.ones(len(keep_X)), P, np.zeros((len(keep_X), P.shape[1] + 1)))
    return sub, skipped


def train_two_stage(config: TrainConfig, data: DatasetSplit, out_dir=None,
                    stage1: Optional[TrainState] = None) -> TrainState:
    """MIL alone first; then LLP on the hard-selected positive instances.

    Passing ``stage1`` skips MIL training and uses its (frozen) ``f`` and ``g``.
    Positive bags whose selection is empty are skipped and counted.
    """
    _check_pairing(config, data)
    C, d = data.num_positive_classes, data.feature_dim
    train_a = BagArrays.from_bags(data.train, C)
    val_a = BagArrays.from_bags(data.validation, C)
    init_seed, shuffle_seed = _seeds(config.seed)
    sink = _MetricSink(out_dir)

    if stage1 is None:
        model0 = ModelTriple.init(d, C, init_seed, config.hidden)
        stage1 = _train_selecting("mil", model0, config, train_a, val_a, shuffle_seed, sink)
    mil_model = stage1.model

    thr = config.inference_threshold
    sel_train, skipped = select_positive(mil_model, train_a, thr)
    sel_val, skipped_val = select_positive(mil_model, val_a, thr)
    if skipped or skipped_val:
        log.info("two_stage: skipped %d train and %d validation bags with empty selection",
                 skipped, skipped_val)
    if len(sel_train) == 0 or len(sel_val) == 0:
        raise TrainingError("no positive bag kept any instance after MIL selection")

    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    h = Mlp.init((config.hidden[-1], C), rng)
    if config.two_stage_reuse_extractor:
        model1, trainable = ModelTriple(mil_model.f, mil_model.g, h), ("h",)
    else:
        f_llp = Mlp.init((d, *config.hidden), rng)
        model1, trainable = ModelTriple(mil_model.f, mil_model.g, h, f_llp), ("f_llp", "h")
    obj = _objective("llp", model1, config, trainable=trainable)
    res = _fit(obj, model1.flat(trainable), sel_train, sel_val, config, shuffle_seed, sink)
    state = _state_from(res, model1.with_flat(res.params, trainable), "two_stage",
                        aggregation=stage1.aggregation, candidates=stage1.candidates,
                        stage1=stage1, skipped_bags=skipped)
    _write_checkpoint(out_dir, state, config)
    return state


class _MetricSink:
    def __init__(self, out_dir):
        self.path = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self.path = os.path.join(out_dir, "metrics.txt")
            open(self.path, "w").close()

    def __call__(self, rec: EpochRecord):
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(rec.to_text() + "\n")


def _write_checkpoint(out_dir, state: TrainState, config: TrainConfig):
    if out_dir is None:
        return
    meta = {"method": state.method, "seed": config.seed,
            "threshold": repr(config.inference_threshold)}
    if state.aggregation is not None:
        meta["aggregation"] = str(state.aggregation)
    save_checkpoint(os.path.join(out_dir, "checkpoint.txt"), state.model, state.epoch,
                    state.best_val_loss, meta)


# -- inference ------------------------------------------------------------

@dataclass
class InstancePrediction:
    score: float
    probs: np.ndarray
    label: int


def _forward_const(model, X):
    tape = ad.Tape()
    bound, _ = model.bind(tape, ())
    return bound, tape


def predict_scores(model: ModelTriple, X) -> np.ndarray:
    bound, tape = _forward_const(model, X)
    feats = mlp_forward(bound["f"], tape.const(np.atleast_2d(X)), tape)
    return ad.sigmoid(mlp_forward(bound["g"], feats, tape)).value[:, 0]


def predict(model, X, threshold: float = 0.5):
    """Labels in 0..C, positive scores and C-class probabilities for ``(n, d)`` inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.input_dim:
        raise ValueError(f"model expects {model.input_dim} features, data has {X.shape[1]}")
    bound, tape = _forward_const(model, X)
    if isinstance(model, FlatClassifier):
        C = model.num_classes
        full = _flat_probs(bound, X, tape).value
        k = np.argmax(full, axis=1)
        labels = np.where(k == C, 0, k + 1)
        scores = 1.0 - full[:, C]
        block = full[:, :C]
        probs = block / np.maximum(block.sum(axis=1, keepdims=True), 1e-300)
        return labels, scores, probs
    feats = mlp_forward(bound["f"], tape.const(X), tape)
    scores = ad.sigmoid(mlp_forward(bound["g"], feats, tape)).value[:, 0]
    probs = _llp_probs(bound, X, tape).value
    return label_from(scores, probs, threshold), scores, probs


def label_from(scores, probs, threshold: float) -> np.ndarray:
    """Negative below the threshold, else 1 + argmax (first index on ties)."""
    scores = np.asarray(scores)
    return np.where(scores < threshold, 0, np.argmax(probs, axis=-1) + 1)


def infer_instance(model, x, threshold: float = 0.5):
    feats = x.features if hasattr(x, "features") else x
    labels, scores, probs = predict(model, np.asarray(feats)[None, :], threshold)
    pred = InstancePrediction(float(scores[0]), probs[0], int(labels[0]))
    return pred.label, pred
