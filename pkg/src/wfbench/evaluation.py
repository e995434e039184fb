"""Stratified cross-validation, classification metrics and reports."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import IO, Callable, Sequence

import numpy as np

from .features import FEATURE_NAMES, feature_matrix
from .forest import Forest, ForestParams, feature_importance, train
from .trace import Dataset, Observation

_LOGGER = logging.getLogger(__name__)

Defense = Callable[[Observation, int], Observation]


class EvaluationError(ValueError):
    pass


def confusion_matrix(true_idx: Sequence[int], pred_idx: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true_idx, dtype=np.int64), np.asarray(pred_idx, dtype=np.int64)), 1)
    return cm


def per_class_scores(confusion: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall, F1 and an 'active' mask per class.

    A class is inactive when it has neither samples nor predictions; 0/0 is
    defined as 0.
    """
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise EvaluationError("confusion matrix must be square")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    active = (support > 0) | (predicted > 0)
    return precision, recall, f1, active


def macro_f1(confusion: np.ndarray) -> float:
    _, _, f1, active = per_class_scores(confusion)
    if not active.any():
        return 0.0
    return float(f1[active].mean())


def stratified_folds(labels: Sequence[str], folds: int, seed: int) -> np.ndarray:
    """Fold index per sample; each class is shuffled then dealt round-robin."""
    if folds < 2:
        raise EvaluationError("folds must be >= 2")
    labels = list(labels)
    assignment = np.full(len(labels), -1, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
    offset = 0
    for cls in sorted(set(labels)):
        members = np.array([i for i, l in enumerate(labels) if l == cls])
        if members.size < folds:
            raise EvaluationError(f"class {cls!r} has {members.size} samples, fewer than {folds} folds")
        members = members[rng.permutation(members.size)]
        # rotating the start fold keeps test folds balanced in size
        assignment[members] = (np.arange(members.size) + offset) % folds
        offset += members.size
    return assignment


@dataclass
class EvaluationReport:
    class_list: list[str]
    confusion: np.ndarray
    macro_f1: float
    macro_f1_std: float
    fold_f1: list[float]
    importances: dict[str, float]
    overhead: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_folds(self) -> int:
        return len(self.fold_f1)

    @property
    def macro_f1_se(self) -> float:
        return self.macro_f1_std / np.sqrt(max(self.n_folds, 1))

    def per_class(self) -> dict[str, dict[str, float]]:
        precision, recall, f1, _ = per_class_scores(self.confusion)
        support = self.confusion.sum(axis=1)
        return {
            c: {"precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
            for c, p, r, f, s in zip(self.class_list, precision, recall, f1, support)
        }

    def top_importances(self, k: int = 20) -> list[tuple[str, float]]:
        ranked = sorted(self.importances.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:k]

    def to_json(self, topk: int = 20) -> dict:
        doc = {
            "macro_f1": self.macro_f1,
            "macro_f1_std": self.macro_f1_std,
            "fold_macro_f1": list(self.fold_f1),
            "classes": list(self.class_list),
            "per_class": self.per_class(),
            "confusion": self.confusion.tolist(),
            "importances_topk": [[n, v] for n, v in self.top_importances(topk)],
            "overhead": self.overhead,
        }
        doc.update(self.extra)
        return doc

    def write_csv(self, sink: IO) -> None:
        writer = csv.writer(sink)
        writer.writerow(["class", "precision", "recall", "f1", "support"])
        for cls, row in self.per_class().items():
            writer.writerow([cls, row["precision"], row["recall"], row["f1"], row["support"]])
        writer.writerow(["macro", "", "", self.macro_f1, int(self.confusion.sum())])


def apply_defense(dataset: Dataset, defense: Defense | None) -> Dataset:
    if defense is None:
        return dataset
    return Dataset(tuple(defense(obs, i) for i, obs in enumerate(dataset)))


def cross_validate_matrix(
    X: np.ndarray,
    labels: Sequence[str],
    folds: int = 10,
    params: ForestParams = ForestParams(),
    feature_names: Sequence[str] | None = None,
    n_jobs: int = 1,
) -> EvaluationReport:
    X = np.asarray(X, dtype=np.float64)
    if feature_names is None and X.shape[1] == len(FEATURE_NAMES):
        feature_names = FEATURE_NAMES
    labels = list(labels)
    class_list = sorted(set(labels))
    if len(class_list) < 2:
        raise EvaluationError("need at least 2 classes")
    code = {c: i for i, c in enumerate(class_list)}
    y = np.array([code[l] for l in labels])
    assignment = stratified_folds(labels, folds, params.seed)
    confusion = np.zeros((len(class_list),) * 2, dtype=np.int64)
    fold_f1, importances = [], []
    for k in range(folds):
        test = assignment == k
        train_labels = [labels[i] for i in np.flatnonzero(~test)]
        fold_params = ForestParams(
            n_trees=params.n_trees,
            max_features=params.max_features,
            min_samples_leaf=params.min_samples_leaf,
            max_depth=params.max_depth,
            seed=int(np.random.SeedSequence([params.seed, k]).generate_state(1, np.uint64)[0]),
            bootstrap=params.bootstrap,
        )
        forest: Forest = train(X[~test], train_labels, fold_params, n_jobs=n_jobs, feature_names=feature_names)
        # the fold's forest may lack classes absent from its training split
        pred = np.array([code[forest.class_list[j]] for j in forest.predict_indices(X[test])])
        cm = confusion_matrix(y[test], pred, len(class_list))
        confusion += cm
        fold_f1.append(macro_f1(cm))
        importances.append(feature_importance(forest))
        _LOGGER.debug("fold %d: macro F1 %.4f", k, fold_f1[-1])
    names = list(importances[0])
    mean_imp = {n: float(np.mean([imp[n] for imp in importances])) for n in names}
    return EvaluationReport(
        class_list=class_list,
        confusion=confusion,
        macro_f1=float(np.mean(fold_f1)),
        macro_f1_std=float(np.std(fold_f1)),
        fold_f1=fold_f1,
        importances=mean_imp,
    )


def cross_validate(
    dataset: Dataset,
    folds: int = 10,
    params: ForestParams = ForestParams(),
    defense: Defense | None = None,
    discard_timings: bool = False,
    n_jobs: int = 1,
) -> EvaluationReport:
    """Stratified k-fold evaluation of the random-forest attack.

    The defense, when given, is applied to every observation (train and test)
    before featurization.
    """
    defended = apply_defense(dataset, defense)
    X = feature_matrix(defended, discard_timings)
    return cross_validate_matrix(X, defended.labels, folds, params, FEATURE_NAMES, n_jobs)


def chance_macro_f1(labels: Sequence[str]) -> float:
    """Expected macro F1 of a uniform random guesser, approximately 1/C."""
    return 1.0 / len(set(labels))


def permutation_null(
    X: np.ndarray,
    labels: Sequence[str],
    folds: int,
    params: ForestParams,
    n_permutations: int = 5,
    seed: int = 0,
) -> tuple[float, float]:
    """Mean and standard deviation of macro F1 with shuffled labels.

    This is the no-information baseline of the same pipeline on the same
    feature matrix.
    """
    rng = np.random.default_rng(seed)
    scores = []
    labels = list(labels)
    for _ in range(n_permutations):
        shuffled = [labels[i] for i in rng.permutation(len(labels))]
        scores.append(cross_validate_matrix(X, shuffled, folds, params).macro_f1)
    return float(np.mean(scores)), float(np.std(scores))
