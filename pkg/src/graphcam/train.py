"""Adam, balanced batching, stratified repeated cross-validation."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NumericalError, TrainingError, ValidationError
from .nn import ModelConfig, init_model, loss_and_grads, model_forward

log = logging.getLogger(__name__)

# purpose tags mixed into derived seeds
SEED_FOLDS = 1
SEED_INIT = 2
SEED_BATCH = 3
SEED_DROPOUT = 4


def derive_rng(seed, *offsets) -> np.random.Generator:
    """PCG64 generator keyed on ``(seed, *offsets)``; every stream is reproducible on its own."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(o) for o in offsets)]))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 5e-4
    batch_size: int = 200
    total_steps: int = 500
    eval_every: int = 10
    lr_decay_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValidationError("batch_size must be a positive even number")
        if self.eval_every < 1 or self.total_steps % self.eval_every:
            raise ValidationError("eval_every must divide total_steps")
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.weight_decay < 0:
            raise ValidationError("learning_rate and epsilon must be positive, weight_decay >= 0")


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig, lr=None):
    """One bias-corrected Adam update, in place on ``params``.

    ``lr`` overrides ``config.learning_rate`` (the schedule lives in the caller).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
    return params, state


class PlateauDecay:
    """Halve the learning rate after two successive strict drops in validation accuracy.

    After a decay the drop counter restarts from the current accuracy.
    """

    def __init__(self, lr, factor=0.5):
        self.lr = lr
        self.factor = factor
        self.previous = None
        self.drops = 0

    def update(self, accuracy) -> bool:
        if self.previous is not None and accuracy < self.previous:
            self.drops += 1
        else:
            self.drops = 0
        self.previous = accuracy
        if self.drops >= 2:
            self.lr *= self.factor
            self.drops = 0
            return True
        return False


# --- data splitting -----------------------------------------------------------


@dataclass
class FoldSplit:
    train_idx: list
    val_idx: list
    test_idx: list


def make_stratified_folds(labels, n_folds=10, seed=0):
    """Per-class shuffles dealt round-robin into folds; fold f tests, fold f+1 validates."""
    labels = np.asarray(labels)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n_folds < 3:
        raise ValidationError("need at least 3 folds for train/val/test")
    folds = [[] for _ in range(n_folds)]
    slot = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < n_folds:
            raise ValidationError(f"class {c} has {len(members)} samples, fewer than {n_folds} folds")
        for idx in rng.permutation(members):
            folds[slot % n_folds].append(int(idx))
            slot += 1
    folds = [sorted(f) for f in folds]
    splits = []
    for f in range(n_folds):
        v = (f + 1) % n_folds
        train = sorted(i for g in range(n_folds) if g not in (f, v) for i in folds[g])
        splits.append(FoldSplit(train, list(folds[v]), list(folds[f])))
    return splits


class BalancedBatcher:
    """Draws batches with half the samples from each class.

    Each class keeps a shuffled queue that is refilled (reshuffled) when
    exhausted, so within a class-epoch samples are drawn without replacement.
    """

    def __init__(self, train_idx, labels, batch_size, rng):
        labels = np.asarray(labels)
        train_idx = np.asarray(train_idx)
        self.rng = rng
        self.per_class = batch_size // 2
        self.pools = [train_idx[labels[train_idx] == c] for c in np.unique(labels[train_idx])]
        if len(self.pools) < 2:
            raise ValidationError("both classes must be present in the training indices")
        self.queues = [[] for _ in self.pools]

    def _take(self, c, n):
        out = []
        while len(out) < n:
            if not self.queues[c]:
                self.queues[c] = list(self.rng.permutation(self.pools[c]))
            need = n - len(out)
            out.extend(self.queues[c][:need])
            self.queues[c] = self.queues[c][need:]
        return out

    def next_batch(self):
        out = []
        for c in range(len(self.pools)):
            out.extend(int(i) for i in self._take(c, self.per_class))
        return out


def make_balanced_batch(train_idx, labels, batch_size, rng):
    """One-off balanced batch (fresh queues); use ``BalancedBatcher`` across steps."""
    return BalancedBatcher(train_idx, labels, batch_size, rng).next_batch()


# --- training / evaluation ------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows: true class, cols: predicted
    predictions: np.ndarray


def evaluate(model, ltilde, features, labels) -> EvalResult:
    features = np.asarray(features)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValidationError("cannot evaluate on an empty subject list")
    logits, _ = model_forward(model, ltilde, features, "eval")
    pred = np.argmax(logits, axis=1)
    c = model.config.num_classes
    conf = np.zeros((c, c), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    return EvalResult(float(np.mean(pred == labels)), conf, pred)


@dataclass
class FoldReport:
    test_accuracy: float
    val_accuracies: list
    lr_events: list  # [{"step": int, "lr": float}]
    final_lr: float
    final_loss: float


def train_model(dataset, split: FoldSplit, model_config: ModelConfig, train_config: TrainConfig):
    """Train one model on ``split.train_idx``; returns ``(model, FoldReport)``.

    The model after the final step is kept (no best-validation selection).
    """
    x, y = dataset.features, dataset.labels
    ltilde = dataset.ltilde
    seed = train_config.seed
    model = init_model(model_config, derive_rng(seed, SEED_INIT))
    batcher = BalancedBatcher(split.train_idx, y, train_config.batch_size, derive_rng(seed, SEED_BATCH))
    dropout_rng = derive_rng(seed, SEED_DROPOUT)
    params = model.parameters()
    state = AdamState()
    schedule = PlateauDecay(train_config.learning_rate, train_config.lr_decay_factor)
    val_acc, events = [], []
    loss = float("nan")
    for step in range(1, train_config.total_steps + 1):
        idx = batcher.next_batch()
        try:
            loss, grads = loss_and_grads(model, ltilde, x[idx], y[idx], train_config.weight_decay, dropout_rng)
            if not np.isfinite(loss):
                raise NumericalError("loss diverged")
            adam_step(params, grads, state, train_config, lr=schedule.lr)
        except NumericalError as exc:
            raise TrainingError(str(exc), step=step) from exc
        if step % train_config.eval_every == 0:
            acc = evaluate(model, ltilde, x[split.val_idx], y[split.val_idx]).accuracy
            val_acc.append(acc)
            if schedule.update(acc):
                events.append({"step": step, "lr": schedule.lr})
                log.debug("step %d: lr decayed to %g", step, schedule.lr)
    test = evaluate(model, ltilde, x[split.test_idx], y[split.test_idx])
    return model, FoldReport(test.accuracy, val_acc, events, schedule.lr, float(loss))


def replay_lr(lr0, events, factor=0.5):
    lr = lr0
    for _ in events:
        lr *= factor
    return lr


@dataclass
class CVResult:
    """Per-fold reports plus the trained models and splits."""

    fold_reports: list  # [run][fold] -> FoldReport
    splits: list  # [run][fold] -> FoldSplit
    models: list  # [run][fold] -> Model
    run_seeds: list

    @property
    def accuracies(self):
        return [[r.test_accuracy for r in run] for run in self.fold_reports]

    def summary(self) -> dict:
        runs = []
        for r, accs in enumerate(self.accuracies):
            a = np.asarray(accs)
            runs.append(
                {
                    "run": r,
                    "seed": self.run_seeds[r],
                    "fold_accuracies": [float(v) for v in accs],
                    "mean": float(np.mean(a)),
                    "std": float(np.std(a)),
                }
            )
        flat = np.asarray([v for accs in self.accuracies for v in accs])
        return {
            "runs": runs,
            "grand_mean": float(np.mean(flat)),
            "mean_run_std": float(np.mean([r["std"] for r in runs])),
            "n_runs": len(runs),
            "n_folds": len(self.fold_reports[0]) if runs else 0,
        }


def _fold_task(args):
    dataset, split, model_config, train_config, run, fold = args
    try:
        return train_model(dataset, split, model_config, train_config)
    except TrainingError as exc:
        raise TrainingError(str(exc), run=run, fold=fold) from exc


def run_cross_validation(dataset, model_config, train_config, n_runs=10, n_folds=10, workers=None):
    """Repeated stratified CV. Run ``r`` uses seed ``train_config.seed + r``.

    ``workers > 1`` trains folds in a process pool; results are collected in
    (run, fold) order so the output does not depend on it.
    """
    base = train_config.seed
    tasks, splits = [], []
    for r in range(n_runs):
        run_seed = base + r
        run_splits = make_stratified_folds(dataset.labels, n_folds, derive_rng(run_seed, SEED_FOLDS))
        splits.append(run_splits)
        for f, split in enumerate(run_splits):
            cfg = TrainConfig(**{**asdict(train_config), "seed": run_seed * 1000 + f})
            tasks.append((dataset, split, model_config, cfg, r, f))
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]
    models = [[None] * n_folds for _ in range(n_runs)]
    reports = [[None] * n_folds for _ in range(n_runs)]
    for (_, _, _, _, r, f), (model, rep) in zip(tasks, results):
        models[r][f] = model
        reports[r][f] = rep
    return CVResult(reports, splits, models, [base + r for r in range(n_runs)])
