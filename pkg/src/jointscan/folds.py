"""Patient-disjoint k-fold planning.

Folds partition *patients*, not images, so the week-0/week-12 image pair
of one patient can never straddle a train/test boundary. Fold k's test
partition is fold k itself; its train partition is the complement
(an 8:2 split at five folds).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, SchemaError
from .manifest import DatasetManifest


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    assignments: dict[str, int]  # patient_id -> fold index
    seed: int
    train_fraction: Fraction = Fraction(8, 10)

    def test_patients(self, fold: int) -> tuple[str, ...]:
        self._check_fold(fold)
        return tuple(p for p, f in self.assignments.items() if f == fold)

    def train_patients(self, fold: int) -> tuple[str, ...]:
        self._check_fold(fold)
        return tuple(p for p, f in self.assignments.items() if f != fold)

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.n_folds:
            raise ConfigurationError(f"fold index must be in [0, {self.n_folds - 1}], got {fold}")


def make_folds(manifest: DatasetManifest, n_folds: int = 5, seed: int = 0) -> FoldPlan:
    """Assign every patient to exactly one fold, deterministically for a fixed seed.

    Patients are shuffled with a seeded generator and dealt round-robin,
    so fold sizes differ by at most one.
    """
    patients = sorted(manifest.patient_ids)
    if len(patients) < n_folds:
        raise ConfigurationError(
            f"need at least {n_folds} distinct patients for {n_folds} folds, got {len(patients)}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    assignments = {patients[int(i)]: int(pos % n_folds) for pos, i in enumerate(order)}
    # dict ordering follows dealing order; re-key in sorted patient order for stable serialization
    assignments = {p: assignments[p] for p in patients}
    return FoldPlan(
        n_folds=n_folds,
        assignments=assignments,
        seed=seed,
        train_fraction=Fraction(n_folds - 1, n_folds),
    )


def save_fold_plan(plan: FoldPlan, path: str | Path) -> None:
    payload = {
        "n_folds": plan.n_folds,
        "seed": plan.seed,
        "train_fraction": [plan.train_fraction.numerator, plan.train_fraction.denominator],
        "assignments": {p: plan.assignments[p] for p in sorted(plan.assignments)},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_fold_plan(path: str | Path) -> FoldPlan:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        num, den = payload["train_fraction"]
        return FoldPlan(
            n_folds=int(payload["n_folds"]),
            assignments={str(k): int(v) for k, v in payload["assignments"].items()},
            seed=int(payload["seed"]),
            train_fraction=Fraction(num, den),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad fold plan file {path}: {exc}") from exc
