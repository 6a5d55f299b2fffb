"""Class activation maps on graphs and their population-level aggregation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidStateError, ValidationError
from .nn import model_forward


@dataclass
class ClassActivationMap:
    subject_id: str
    class_index: int
    scores: np.ndarray  # (d_x,)


def cam_scores(model, ltilde, features):
    """CAMs for every class at once.

    Returns ``(scores, logits)`` where ``scores[s, c, v] = sum_i w[i, c] f_i(v)``
    for subject ``s``; the dense bias is not included.
    """
    logits, trace = model_forward(model, ltilde, features, "eval")
    scores = np.einsum("bvi,ic->bcv", trace.last_conv_features, model.dense.weights)
    return scores, logits


def class_activation_map(model, ltilde, subject, class_index) -> ClassActivationMap:
    c = model.config.num_classes
    if not 0 <= class_index < c:
        raise ValidationError(f"class_index {class_index} out of range [0, {c})")
    scores, _ = cam_scores(model, ltilde, subject.features[None])
    return ClassActivationMap(subject.id, int(class_index), scores[0, class_index])


def top_k_nodes(cam, k) -> list:
    """Indices of the ``k`` highest scores, descending; ties go to the lower index."""
    scores = np.asarray(cam.scores if isinstance(cam, ClassActivationMap) else cam)
    if not 1 <= k <= scores.size:
        raise ValidationError(f"k must lie in [1, {scores.size}], got {k}")
    order = np.lexsort((np.arange(scores.size), -scores))
    return [int(i) for i in order[:k]]


def minmax_scale(row):
    """Scale to [0, 1]; a constant row maps to zeros."""
    row = np.asarray(row, dtype=np.float64)
    lo, hi = row.min(), row.max()
    if hi == lo:
        return np.zeros_like(row)
    return (row - lo) / (hi - lo)


@dataclass
class PopulationSaliency:
    k: int
    mean_activation: np.ndarray  # (C, d_x), each row min-max scaled
    raw_mean_activation: np.ndarray  # (C, d_x), before scaling
    topk_counts: np.ndarray  # (d_x,) int
    n_subjects: int
    n_runs: int

    def ranking(self) -> list:
        """Nodes by topk_count descending, then node index ascending."""
        counts = self.topk_counts
        return [int(i) for i in np.lexsort((np.arange(counts.size), -counts))]


@dataclass
class SubjectCam:
    run: int
    subject_id: str
    label: int
    predicted: int
    scores: np.ndarray  # (C, d_x)
    top_nodes: list


def population_saliency(run_artifacts, dataset, k=3, keep_subject_cams=False):
    """Aggregate CAMs over subjects and runs.

    ``run_artifacts`` is a list (one per run) of ``(models, splits)`` where
    ``splits[f].test_idx`` lists the subjects tested by ``models[f]``. Each
    subject is attributed with the model of the fold that tested it.
    Returns ``PopulationSaliency`` or, with ``keep_subject_cams``, a pair
    ``(PopulationSaliency, [SubjectCam, ...])``.
    """
    n = len(dataset.subjects)
    d = dataset.num_nodes
    x = dataset.features
    ltilde = dataset.ltilde
    n_classes = None
    sums = None
    counts = np.zeros(d, dtype=np.int64)
    per_subject = []
    for r, (models, splits) in enumerate(run_artifacts):
        owner = np.full(n, -1)
        for f, split in enumerate(splits):
            for i in split.test_idx:
                if owner[i] != -1:
                    raise InvalidStateError(f"run {r}: subject {dataset.subjects[i].id} tested twice")
                owner[i] = f
        if np.any(owner < 0):
            missing = dataset.subjects[int(np.flatnonzero(owner < 0)[0])].id
            raise InvalidStateError(f"run {r}: subject {missing} has no test-fold model")
        run_scores = None
        run_logits = None
        for f, model in enumerate(models):
            idx = np.flatnonzero(owner == f)
            if idx.size == 0:
                continue
            if model is None:
                raise InvalidStateError(f"run {r}: fold {f} model is missing")
            scores, logits = cam_scores(model, ltilde, x[idx])
            if run_scores is None:
                n_classes = scores.shape[1]
                run_scores = np.empty((n, n_classes, d))
                run_logits = np.empty((n, n_classes))
            run_scores[idx] = scores
            run_logits[idx] = logits
        # fixed subject order keeps the float sums reproducible
        if sums is None:
            sums = np.zeros((n_classes, d))
        for s in range(n):
            sums += run_scores[s]
            pred = int(np.argmax(run_logits[s]))
            top = top_k_nodes(run_scores[s, pred], k)
            counts[top] += 1
            if keep_subject_cams:
                sub = dataset.subjects[s]
                per_subject.append(SubjectCam(r, sub.id, sub.label, pred, run_scores[s].copy(), top))
    n_runs = len(run_artifacts)
    if n_runs == 0:
        raise InvalidStateError("no runs to aggregate")
    raw = sums / (n * n_runs)
    scaled = np.stack([minmax_scale(row) for row in raw])
    result = PopulationSaliency(k, scaled, raw, counts, n, n_runs)
    return (result, per_subject) if keep_subject_cams else result
