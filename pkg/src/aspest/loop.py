"""End-to-end active selective prediction runs.

Three algorithms share the same round structure: select a batch from the
unlabeled pool, query the oracle, fine-tune on every label so far jointly
with the source data.

* :func:`run_sr` fine-tunes a single model and scores by max softmax.
* :func:`run_de` fine-tunes ``N`` copies of the source model independently.
* :func:`run_aspest` additionally keeps a running average of checkpoint
  outputs, selects by its margin, and self-trains on its confident soft
  predictions.

Only labels returned by the :class:`Oracle` are used for training.  The
oracle's ground truth is also used to log per-round evaluation metrics.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics as M
from .acquisition import (
    ACQUISITIONS,
    RULE_DIRECTION,
    UNCERTAINTY_RULES,
    SelectionState,
    badge_select,
    clue_select,
    concat_members,
    k_center_greedy,
    select_top_m,
    select_uniform,
    uncertainty_score,
)
from .ensemble import CheckpointEnsemble, deep_ensemble_probs, top_two
from .exceptions import ConfigurationError, ProtocolError
from .nn import (
    MlpModel,
    TrainConfig,
    gradient_embedding,
    mlp_forward,
    mlp_init,
    sgd_train,
    train_epochs,
    train_steps,
)

log = logging.getLogger(__name__)


@dataclass
class AspestConfig:
    lam: float = 1.0
    n_source_steps: int = 1000
    n_members: int = 5
    n_rounds: int = 10
    ckpt_steps: int = 200
    ckpt_epochs: int = 5
    pseudo_fraction: float = 0.1
    threshold: float = 0.9
    self_train_epochs: int = 20

    def __post_init__(self):
        if not 0.0 < self.pseudo_fraction <= 1.0:
            raise ConfigurationError("pseudo_fraction must lie in (0, 1]")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("threshold must lie in (0, 1)")
        if self.lam < 0:
            raise ConfigurationError("lam must be nonnegative")
        if self.n_source_steps < 0:
            raise ConfigurationError("n_source_steps must be nonnegative")
        for name in ("n_members", "n_rounds", "ckpt_steps", "ckpt_epochs", "self_train_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")


class Oracle:
    """Simulated labeler backed by ground-truth labels.

    Each point may be labeled once and at most ``budget`` labels are handed
    out in total.
    """

    def __init__(self, labels, budget: int):
        self._labels = np.asarray(labels, dtype=np.int64)
        self.budget = int(budget)
        self._seen = np.zeros(self._labels.shape[0], dtype=bool)

    @property
    def consumed(self) -> int:
        return int(self._seen.sum())

    @property
    def ground_truth(self) -> np.ndarray:
        """Evaluation-only view of the labels."""
        return self._labels

    def label(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            return np.zeros(0, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= self._labels.shape[0]:
            raise ProtocolError("index outside the unlabeled pool")
        if len(np.unique(idx)) != idx.size or self._seen[idx].any():
            raise ProtocolError("point requested for labeling more than once")
        if self.consumed + idx.size > self.budget:
            raise ProtocolError(
                f"labeling {idx.size} points would exceed the budget of {self.budget}")
        self._seen[idx] = True
        return self._labels[idx].copy()


@dataclass
class RoundLog:
    round: int
    selected: np.ndarray
    ensemble_accuracy: float
    metrics: dict
    n_checkpoints: Optional[int] = None
    pseudo_indices: Optional[np.ndarray] = field(default=None, repr=False)
    pseudo_confidence: Optional[np.ndarray] = field(default=None, repr=False)
    n_self_train: Optional[int] = None

    def to_json(self) -> dict:
        out = {
            "round": self.round,
            "selected_indices": [int(i) for i in self.selected],
            "ensemble_accuracy": self.ensemble_accuracy,
            "metrics": self.metrics,
        }
        if self.n_checkpoints is not None:
            out["n_checkpoints"] = self.n_checkpoints
            out["n_pseudo_labeled"] = int(len(self.pseudo_indices))
            out["n_self_train"] = self.n_self_train
        return out


@dataclass
class RunResult:
    """Outcome of one run on the unlabeled pool."""

    probs: np.ndarray
    selection: SelectionState
    rounds: list
    models: list
    checkpoint_state: Optional[CheckpointEnsemble] = None

    @property
    def predictions(self) -> np.ndarray:
        return top_two(self.probs)[0]

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def selected_mask(self) -> np.ndarray:
        return self.selection.selected_mask()

    def frame(self, y_true) -> M.EvalFrame:
        return M.EvalFrame.from_predictions(self.confidence, self.predictions, y_true,
                                            self.selected_mask)


def source_train(X, y, n_classes: int, hidden: Sequence[int] = (64, 32), epochs: int = 200,
                 learning_rate: float = 1e-3, batch_size: int = 128, seed: int = 0,
                 optimizer: str = "sgd", dropout: float = 0.0, l2: float = 0.0,
                 activation: str = "relu", momentum: float = 0.0) -> MlpModel:
    """Train the source model with plain cross-entropy on source data."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ConfigurationError("source training set is empty")
    model = mlp_init([X.shape[1], *hidden, n_classes], dropout, l2, seed, activation)
    if epochs > 0:
        train_epochs(model, X, y, epochs, learning_rate, batch_size, optimizer, momentum)
    return model


# --- helpers ----------------------------------------------------------------

def _child_seeds(seed: int, n_members: int):
    """Selection seed plus one seed per member; member j's seed is independent of N."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(1 + n_members)
    ints = [int(c.generate_state(1)[0]) for c in children]
    return np.random.default_rng(ints[0]), ints[1:]


def _map(fn: Callable, items: list, threads: int) -> list:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _check_budget(budget: int, n_rounds: int, pool_size: int) -> None:
    if budget < 0:
        raise ConfigurationError("budget must be nonnegative")
    if 0 < budget < n_rounds:
        raise ConfigurationError(f"budget M={budget} is smaller than the number of rounds T={n_rounds}")
    if budget > pool_size:
        raise ConfigurationError(f"budget M={budget} exceeds the pool size {pool_size}")


def acquire(name: str, models: Sequence[MlpModel], X_target: np.ndarray,
            state: SelectionState, rng, temperature: float = 1.0,
            member_probs: Optional[list] = None) -> np.ndarray:
    """Select the next batch with acquisition ``name`` for a model or ensemble."""
    if name not in ACQUISITIONS:
        raise ConfigurationError(f"unknown acquisition {name!r}")
    if name == "uniform":
        return select_uniform(state, rng)
    if member_probs is None:
        member_probs = [mlp_forward(m, X_target)[0] for m in models]
    if name in UNCERTAINTY_RULES:
        scores = uncertainty_score(member_probs, name)
        return select_top_m(scores, RULE_DIRECTION[name], state, rng)
    if name == "badge":
        grads = concat_members([gradient_embedding(m, X_target) for m in models])
        return badge_select(grads, state, rng)
    emb = concat_members([mlp_forward(m, X_target)[1] for m in models])
    if name == "kcg":
        return k_center_greedy(emb, state.selected, state.per_round, state.remaining(), rng)
    return clue_select(emb, member_probs, state, rng, temperature)


def _round_log(t, batch, probs, oracle, state, t_a, t_c, **extra) -> RoundLog:
    y = oracle.ground_truth
    labels, conf, _ = top_two(probs)
    frame = M.EvalFrame.from_predictions(conf, labels, y, state.selected_mask())
    bundle = M.metric_bundle(frame, t_a, t_c)
    return RoundLog(t, np.asarray(batch, dtype=np.int64), bundle["accuracy"], bundle, **extra)


def _fine_tune(models, X_lab, y_lab, X_source, y_source, cfg, threads,
               hook_factory=None, every=None):
    def job(j):
        hook = hook_factory(j) if hook_factory else None
        sgd_train(models[j], X_lab, y_lab, cfg, X_source=X_source, y_source=y_source,
                  checkpoint_hook=hook, checkpoint_every=every)
    _map(job, list(range(len(models))), threads)


# --- Softmax Response / Deep Ensembles --------------------------------------

def run_de(source_model: MlpModel, X_source, y_source, X_target, oracle: Oracle,
           acquisition: str = "margin", budget: int = 0, n_rounds: int = 10,
           n_members: int = 5, n_source_steps: int = 1000,
           train_cfg: Optional[TrainConfig] = None, seed: int = 0, threads: int = 1,
           temperature: float = 1.0, target_accuracy: float = 0.8,
           target_coverage: float = 0.8) -> RunResult:
    """Deep ensemble of fine-tuned copies of the source model.

    Members start from the source model and are each trained for
    ``n_source_steps`` source minibatch steps with their own random stream.
    Every round selects on the ensemble's mean probabilities, labels the
    batch, and fine-tunes each member on all labels so far.
    """
    cfg = train_cfg or TrainConfig()
    X_source = np.asarray(X_source, dtype=np.float64)
    X_target = np.asarray(X_target, dtype=np.float64)
    n = X_target.shape[0]
    _check_budget(budget, n_rounds, n)
    rng, member_seeds = _child_seeds(seed, n_members)
    models = [source_model.copy(seed=s) for s in member_seeds]
    if n_source_steps > 0:
        _map(lambda m: train_steps(m, X_source, y_source, n_source_steps, cfg.learning_rate,
                                   cfg.batch_size, cfg.optimizer, cfg.momentum),
             models, threads)

    state = SelectionState(n, budget, n_rounds)
    rounds = []
    labeled_X = np.zeros((0, X_target.shape[1]))
    labeled_y = np.zeros(0, dtype=np.int64)
    if budget > 0:
        for t in range(1, n_rounds + 1):
            member_probs = [mlp_forward(m, X_target)[0] for m in models]
            batch = acquire(acquisition, models, X_target, state, rng, temperature, member_probs)
            y_batch = oracle.label(batch)
            state.add(batch)
            labeled_X = np.vstack([labeled_X, X_target[batch]])
            labeled_y = np.concatenate([labeled_y, y_batch])
            _fine_tune(models, labeled_X, labeled_y, X_source, y_source, cfg, threads)
            probs = deep_ensemble_probs([mlp_forward(m, X_target)[0] for m in models])
            rounds.append(_round_log(t, batch, probs, oracle, state,
                                     target_accuracy, target_coverage))
            log.debug("round %d: accuracy %.4f", t, rounds[-1].ensemble_accuracy)
    probs = deep_ensemble_probs([mlp_forward(m, X_target)[0] for m in models])
    return RunResult(probs, state, rounds, models)


def run_sr(source_model: MlpModel, X_source, y_source, X_target, oracle: Oracle,
           acquisition: str = "margin", budget: int = 0, n_rounds: int = 10,
           train_cfg: Optional[TrainConfig] = None, seed: int = 0,
           temperature: float = 1.0, target_accuracy: float = 0.8,
           target_coverage: float = 0.8) -> RunResult:
    """Softmax Response: a single fine-tuned model scored by its max softmax."""
    return run_de(source_model, X_source, y_source, X_target, oracle, acquisition, budget,
                  n_rounds, n_members=1, n_source_steps=0, train_cfg=train_cfg, seed=seed,
                  threads=1, temperature=temperature, target_accuracy=target_accuracy,
                  target_coverage=target_coverage)


# --- ASPEST -----------------------------------------------------------------

def build_pseudo_label_set(state: CheckpointEnsemble, threshold: float):
    """Indices with ``threshold <= max_k P[i, k] < 1`` and their full rows of P."""
    if state.n_checkpoints == 0:
        raise ConfigurationError("checkpoint ensemble is empty")
    conf = state.P.max(axis=1)
    idx = np.flatnonzero((conf >= threshold) & (conf < 1.0))
    return idx, state.P[idx].copy()


def _fold(state: CheckpointEnsemble, outputs_per_member: list) -> None:
    # Member order, then checkpoint order: keeps P bit-identical across thread counts.
    for outputs in outputs_per_member:
        for Q in outputs:
            state.update(Q)


def self_train_round(models: Sequence[MlpModel], state: CheckpointEnsemble, X_target,
                     pseudo_idx, soft_labels, X_source, y_source, lam: float, epochs: int,
                     ckpt_epochs: int, cfg: TrainConfig, threads: int = 1) -> int:
    """Train every member on soft pseudo-labels with the KL loss.

    The source cross-entropy term is weighted by ``lam``.  Checkpoint
    outputs on the whole pool are folded into ``state`` every
    ``ckpt_epochs`` epochs.  Returns the number of checkpoints added; an
    empty pseudo-labeled set skips training with a warning.
    """
    if len(pseudo_idx) == 0:
        warnings.warn("pseudo-labeled subset is empty; self-training skipped", RuntimeWarning,
                      stacklevel=2)
        return 0
    X_target = np.asarray(X_target, dtype=np.float64)
    st_cfg = replace(cfg, min_epochs=epochs, max_epochs=epochs, lam=lam)
    X_pl = X_target[np.asarray(pseudo_idx)]
    outputs = [[] for _ in models]

    def job(j):
        def hook(model, epoch):
            outputs[j].append(mlp_forward(model, X_target)[0])
        sgd_train(models[j], X_pl, soft_labels, st_cfg, X_source=X_source, y_source=y_source,
                  loss_kind="kl_divergence", checkpoint_hook=hook,
                  checkpoint_every=ckpt_epochs, early_stopping=False)

    _map(job, list(range(len(models))), threads)
    before = state.n_checkpoints
    _fold(state, outputs)
    return state.n_checkpoints - before


def run_aspest(source_model: MlpModel, X_source, y_source, X_target, oracle: Oracle,
               cfg: Optional[AspestConfig] = None, budget: int = 0,
               train_cfg: Optional[TrainConfig] = None, seed: int = 0, threads: int = 1,
               target_accuracy: float = 0.8, target_coverage: float = 0.8) -> RunResult:
    """Checkpoint ensembles with self-training.

    Phase 0 copies the source model into ``n_members`` members, trains each
    for ``n_source_steps`` source steps and records checkpoint outputs
    every ``ckpt_steps`` steps.  Each round then selects the lowest-margin
    points of the checkpoint ensemble, labels them, resets the ensemble,
    fine-tunes every member (checkpoints every ``ckpt_epochs`` epochs),
    builds the confident pseudo-labeled set, subsamples up to
    ``floor(pseudo_fraction * n)`` of it and self-trains on it.  The final
    classifier and confidence come from the checkpoint ensemble.
    """
    cfg = cfg or AspestConfig()
    tcfg = replace(train_cfg or TrainConfig(), lam=cfg.lam)
    X_source = np.asarray(X_source, dtype=np.float64)
    X_target = np.asarray(X_target, dtype=np.float64)
    n = X_target.shape[0]
    _check_budget(budget, cfg.n_rounds, n)
    rng, member_seeds = _child_seeds(seed, cfg.n_members)
    models = [source_model.copy(seed=s) for s in member_seeds]
    state = CheckpointEnsemble(n, source_model.n_classes)
    threads = max(1, int(threads))

    def collect(model_list, train_fn):
        outputs = [[] for _ in model_list]

        def job(j):
            def hook(model, _):
                outputs[j].append(mlp_forward(model, X_target)[0])
            train_fn(model_list[j], hook)
        _map(job, list(range(len(model_list))), threads)
        return outputs

    phase0 = collect(models, lambda m, hook: train_steps(
        m, X_source, y_source, cfg.n_source_steps, tcfg.learning_rate, tcfg.batch_size,
        tcfg.optimizer, tcfg.momentum, checkpoint_hook=hook, checkpoint_every=cfg.ckpt_steps))
    _fold(state, phase0)
    if state.n_checkpoints == 0:
        _fold(state, [[mlp_forward(m, X_target)[0]] for m in models])

    sel = SelectionState(n, budget, cfg.n_rounds)
    rounds = []
    labeled_X = np.zeros((0, X_target.shape[1]))
    labeled_y = np.zeros(0, dtype=np.int64)
    n_sub = int(np.floor(cfg.pseudo_fraction * n))
    if budget > 0:
        for t in range(1, cfg.n_rounds + 1):
            _, _, margin = state.predict()
            batch = select_top_m(margin, "lowest", sel, rng)
            y_batch = oracle.label(batch)
            sel.add(batch)
            labeled_X = np.vstack([labeled_X, X_target[batch]])
            labeled_y = np.concatenate([labeled_y, y_batch])

            state.reset()
            tuned = collect(models, lambda m, hook: sgd_train(
                m, labeled_X, labeled_y, tcfg, X_source=X_source, y_source=y_source,
                checkpoint_hook=hook, checkpoint_every=cfg.ckpt_epochs))
            _fold(state, tuned)
            if state.n_checkpoints == 0:
                _fold(state, [[mlp_forward(m, X_target)[0]] for m in models])

            pseudo_idx, soft = build_pseudo_label_set(state, cfg.threshold)
            pseudo_conf = state.P[pseudo_idx].max(axis=1)
            if pseudo_idx.size > n_sub:
                keep = np.sort(rng.choice(pseudo_idx.size, size=n_sub, replace=False))
                sub_idx, sub_soft = pseudo_idx[keep], soft[keep]
            else:
                sub_idx, sub_soft = pseudo_idx, soft
            self_train_round(models, state, X_target, sub_idx, sub_soft, X_source, y_source,
                             cfg.lam, cfg.self_train_epochs, cfg.ckpt_epochs, tcfg, threads)
            rounds.append(_round_log(t, batch, state.P, oracle, sel, target_accuracy,
                                     target_coverage, n_checkpoints=state.n_checkpoints,
                                     pseudo_indices=pseudo_idx, pseudo_confidence=pseudo_conf,
                                     n_self_train=int(sub_idx.size)))
            log.debug("round %d: accuracy %.4f, %d checkpoints, %d pseudo-labels", t,
                      rounds[-1].ensemble_accuracy, state.n_checkpoints, pseudo_idx.size)
    return RunResult(state.P.copy(), sel, rounds, models, state)
