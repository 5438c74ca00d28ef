"""Empirical label statistics and the majority predictor accuracy (MPA).

Given aligned (source label, target label) pairs, the majority predictor
maps each source label to the target label with maximal empirical
conditional probability:

    f_mp(s) = argmax_t P_hat(t | s)

and the MPA is the accuracy of that predictor on the same pairs:

    MPA = (1/n) * sum_i 1[t_i == f_mp(s_i)]

All counting is done in exact integer arithmetic; probabilities are only
derived on demand so argmax comparisons never involve rounding.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PairedLabelDataset",
    "EmpiricalJoint",
    "MajorityPredictor",
    "CsvFormatError",
    "empirical_joint",
    "fit_majority_predictor",
    "compute_mpa",
    "make_dummy_source",
    "load_pairs_csv",
]


class CsvFormatError(ValueError):
    """Malformed CSV input; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class PairedLabelDataset:
    """Aligned (source label, target label) pairs with dense 0-based labels.

    Parameters
    ----------
    source_labels, target_labels : (n,) integer arrays
        Per-example labels, 0-based.
    num_source_classes, num_target_classes : int
        Label space sizes; every label must be strictly below its size.
    """

    source_labels: np.ndarray
    target_labels: np.ndarray
    num_source_classes: int
    num_target_classes: int

    def __post_init__(self):
        s = np.asarray(self.source_labels, dtype=np.int64)
        t = np.asarray(self.target_labels, dtype=np.int64)
        object.__setattr__(self, "source_labels", s)
        object.__setattr__(self, "target_labels", t)
        if s.ndim != 1 or t.ndim != 1 or len(s) != len(t):
            raise ValueError("source and target labels must be equal-length 1-D sequences")
        if len(s) < 1:
            raise ValueError("dataset must contain at least one pair")
        if self.num_source_classes < 1 or self.num_target_classes < 1:
            raise ValueError("label space sizes must be positive")
        if s.min() < 0 or s.max() >= self.num_source_classes:
            raise ValueError("source label out of range")
        if t.min() < 0 or t.max() >= self.num_target_classes:
            raise ValueError("target label out of range")

    @property
    def n(self) -> int:
        return len(self.source_labels)

    @classmethod
    def from_pairs(cls, pairs, num_source_classes=None, num_target_classes=None):
        """Build from an iterable of (s, t) tuples; sizes default to max+1."""
        arr = np.asarray(list(pairs), dtype=np.int64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError("pairs must be a sequence of (source, target) tuples")
        s, t = arr[:, 0], arr[:, 1]
        if num_source_classes is None:
            num_source_classes = int(s.max()) + 1 if len(s) else 0
        if num_target_classes is None:
            num_target_classes = int(t.max()) + 1 if len(t) else 0
        return cls(s, t, num_source_classes, num_target_classes)


@dataclass(frozen=True)
class EmpiricalJoint:
    """Integer contingency table of (source, target) label pairs.

    ``counts[s, t]`` is the number of examples with source label ``s`` and
    target label ``t``; ``n`` is the total. The joint, marginal, and
    conditional estimates are ``counts/n``, row sums over ``n``, and row
    normalization (only defined for rows with positive mass).
    """

    counts: np.ndarray
    n: int

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", c)
        if c.ndim != 2:
            raise ValueError("counts must be a 2-D matrix")
        if (c < 0).any():
            raise ValueError("counts must be non-negative")
        if int(c.sum()) != self.n:
            raise ValueError("counts must sum to n")

    def joint_prob(self) -> np.ndarray:
        return self.counts / self.n

    def source_marginal(self) -> np.ndarray:
        return self.counts.sum(axis=1) / self.n

    def target_marginal(self) -> np.ndarray:
        return self.counts.sum(axis=0) / self.n

    def conditional(self, s: int) -> np.ndarray:
        """P_hat(t | s); undefined (raises) when source label s was never seen."""
        row = self.counts[s]
        total = row.sum()
        if total == 0:
            raise ValueError(f"conditional undefined: source label {s} has zero mass")
        return row / total


@dataclass(frozen=True)
class MajorityPredictor:
    """The learned map from source label to most probable target label.

    ``mapping[s]`` holds the predicted target label for source label ``s``.
    Ties are broken toward the lowest target index, so identical inputs
    always produce identical mappings.
    """

    mapping: np.ndarray
    num_target_classes: int = field(default=0)

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        object.__setattr__(self, "mapping", m)
        if m.ndim != 1:
            raise ValueError("mapping must be 1-D")
        if len(m) and self.num_target_classes and m.max() >= self.num_target_classes:
            raise ValueError("mapping entry out of target label range")

    def __call__(self, source_labels):
        return self.mapping[np.asarray(source_labels, dtype=np.int64)]


def empirical_joint(data: PairedLabelDataset) -> EmpiricalJoint:
    """Count every (source, target) pair into an integer contingency table."""
    counts = np.zeros((data.num_source_classes, data.num_target_classes), dtype=np.int64)
    np.add.at(counts, (data.source_labels, data.target_labels), 1)
    return EmpiricalJoint(counts, data.n)


def fit_majority_predictor(joint: EmpiricalJoint) -> MajorityPredictor:
    """Per-source argmax of the conditional target distribution.

    Rows are compared on raw integer counts (row normalization cancels in
    the argmax). Source labels that never occur fall back to the globally
    most frequent target label, so the predictor is total on the source
    label space; both argmaxes break ties toward the lowest index.
    """
    counts = joint.counts
    mapping = counts.argmax(axis=1)
    global_modal = int(counts.sum(axis=0).argmax())
    empty_rows = counts.sum(axis=1) == 0
    mapping = np.where(empty_rows, global_modal, mapping)
    return MajorityPredictor(mapping, counts.shape[1])


def compute_mpa(data: PairedLabelDataset) -> float:
    """Majority predictor accuracy of the target labels given the source labels.

    Fits the majority predictor on ``data`` and scores it on the same pairs.
    Runs in O(n + num_source_classes * num_target_classes) time.

    Returns
    -------
    float in [0, 1], an exact ratio of integers matches/n.
    """
    matches, n = mpa_counts(data)
    return matches / n


def mpa_counts(data: PairedLabelDataset) -> tuple[int, int]:
    """(match count, n) behind :func:`compute_mpa`, for exact rational comparisons."""
    joint = empirical_joint(data)
    predictor = fit_majority_predictor(joint)
    matches = int((predictor(data.source_labels) == data.target_labels).sum())
    return matches, data.n


def make_dummy_source(model, target_inputs, target_labels,
                      num_target_classes=None) -> PairedLabelDataset:
    """Pair target labels with source labels predicted by a trained source model.

    Each input is pushed through the model and the argmax output label
    (lowest index on ties) becomes its surrogate source label. The MPA of
    the returned dataset is the different-inputs transferability score.

    Parameters
    ----------
    model : tinynet.Network
        Trained source model; its output dimension is the source label count.
    target_inputs : (p, d) array
        Target inputs, d matching the model input dimension.
    target_labels : (p,) integer array
        True target labels.
    num_target_classes : int, optional
        Defaults to max(target_labels) + 1.
    """
    inputs = np.asarray(target_inputs, dtype=np.float64)
    labels = np.asarray(target_labels, dtype=np.int64)
    if inputs.ndim != 2:
        raise ValueError("target inputs must be a (p, d) matrix")
    if len(inputs) != len(labels):
        raise ValueError("inputs and labels must have equal length")
    dummy = model.predict_labels(inputs)
    if num_target_classes is None:
        num_target_classes = int(labels.max()) + 1
    return PairedLabelDataset(dummy, labels, model.output_dim, num_target_classes)


def load_pairs_csv(path, num_source_classes=None, num_target_classes=None) -> PairedLabelDataset:
    """Read ``source_label,target_label`` rows from a CSV file.

    An optional single header row is skipped. Labels are 0-based integers;
    label space sizes are inferred as max+1 unless given. Raises
    :class:`CsvFormatError` with the offending line number on malformed
    input or when no data rows are present.
    """
    pairs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            if len(row) != 2:
                raise CsvFormatError(f"expected 2 columns, got {len(row)}", lineno)
            try:
                s, t = int(row[0]), int(row[1])
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise CsvFormatError(f"non-integer labels {row!r}", lineno) from None
            if s < 0 or t < 0:
                raise CsvFormatError(f"negative label in {row!r}", lineno)
            pairs.append((s, t))
    if not pairs:
        raise CsvFormatError("no data rows", 1)
    return PairedLabelDataset.from_pairs(
        pairs, num_source_classes=num_source_classes, num_target_classes=num_target_classes
    )
