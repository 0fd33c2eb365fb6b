#  Licensed under the Apache License, Version 2.0 (the "License");
#  you may not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing, software
#  distributed under the License is distributed on an "AS IS" BASIS,
#  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#  See the License for the specific language governing permissions and
#  limitations under the License.

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import silhouette_score

from heart_models.errors import DataError, ShapeError, UsageError
from heart_models.phantom import PHENOTYPE_TARGETS

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 120.0
_PSNR_MSE_FLOOR = 1e-12


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    n: int

    def to_dict(self) -> Dict[str, float]:
        return {"mean": self.mean, "std": self.std, "n": self.n}


def summarize(values: Sequence[float]) -> Summary:
    """Mean ± population std."""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        raise DataError("Cannot summarize an empty set of values.")
    return Summary(float(array.mean()), float(array.std()), int(array.size))


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ.")


def psnr(reference: np.ndarray, test: np.ndarray, peak: float = 1.0) -> float:
    """10·log10(peak²/MSE) in dB, capped at 120 dB for MSE < 1e-12."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    _same_shape(reference, test, "psnr")
    error = float(np.mean((reference - test) ** 2))
    if error < _PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * math.log10(peak * peak / error))


def dice(pred_mask: np.ndarray, true_mask: np.ndarray, class_id: int) -> float:
    """2|A∩B|/(|A|+|B|) for one class; 1.0 when the class is absent from both."""
    pred_mask, true_mask = np.asarray(pred_mask), np.asarray(true_mask)
    _same_shape(pred_mask, true_mask, "dice")
    a = pred_mask == class_id
    b = true_mask == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mae_metric(preds: np.ndarray, truths: np.ndarray, targets: Sequence[str] = PHENOTYPE_TARGETS) -> Dict[str, Summary]:
    """Per-target mean ± std of absolute error, in native units."""
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if preds.size == 0 or truths.size == 0:
        raise DataError("mae_metric needs at least one subject.")
    _same_shape(preds, truths, "mae_metric")
    errors = np.abs(preds - truths)
    return {name: summarize(errors[:, j]) for j, name in enumerate(targets)}


def mean_guess(train_truths: np.ndarray, test_truths: np.ndarray) -> Dict[str, Summary]:
    """MAE of predicting the train-split mean for every test subject."""
    train_truths = np.atleast_2d(np.asarray(train_truths, dtype=np.float64))
    test_truths = np.atleast_2d(np.asarray(test_truths, dtype=np.float64))
    if train_truths.size == 0:
        raise DataError("mean_guess needs a non-empty train split.")
    guess = np.broadcast_to(train_truths.mean(axis=0), test_truths.shape)
    return mae_metric(guess, test_truths)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    _same_shape(u, v, "cosine_similarity")
    if np.array_equal(u, v) and np.any(u):
        return 1.0
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UsageError("cosine_similarity is undefined for a zero vector.")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def quintile_groups(values: Sequence[float], n_groups: int = 5) -> np.ndarray:
    """Equal-frequency group index per value (stable rank, group = ⌊rank·k/n⌋)."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    groups = np.empty(values.size, dtype=np.int64)
    groups[order] = (np.arange(values.size) * n_groups) // max(values.size, 1)
    return groups


def silhouette(embeddings: np.ndarray, groups: Sequence[int]) -> Optional[float]:
    """Euclidean silhouette score, or None when fewer than 2 groups or too few samples."""
    groups = np.asarray(groups)
    n_labels = np.unique(groups).size
    if n_labels < 2 or n_labels >= groups.size:
        return None
    return float(silhouette_score(np.asarray(embeddings, dtype=np.float64), groups, metric="euclidean"))


@dataclass
class EvalReport:
    """Per-subject entries plus aggregates; serialized as sorted-key JSON."""

    kind: str
    per_subject: List[Dict[str, Any]] = field(default_factory=list)
    aggregate: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def add_subject(self, entry: Dict[str, Any]) -> None:
        self.per_subject.append(entry)

    def aggregate_metric(self, key: str) -> Summary:
        values = [entry[key] for entry in self.per_subject if entry.get(key) is not None]
        summary = summarize(values)
        self.aggregate[key] = summary.to_dict()
        return summary

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "metadata": self.metadata,
            "per_subject": self.per_subject,
            "aggregate": self.aggregate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"
