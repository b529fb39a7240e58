"""Cohort containers and the CSV data formats used by the CLI.

A cohort is stored column-wise: covariates X, observability attributes A,
and a (n, horizon) result matrix padded with "no test" after each
individual's follow-up ends.  Follow-up ends either at the first positive
test (the individual is then diagnosed and censored) or at the study
horizon.  Rows are kept sorted by id so that likelihood sums have a fixed
order regardless of input order.

File formats (headers mandatory):

* baseline CSV: ``id`` plus covariate columns prefixed ``x_`` and
  attribute columns prefixed ``a_`` (order as in the file).
* panel CSV: ``id,t,r`` sorted by (id, t); rows are written for every
  t = 1..T_n, and on read any missing (id, t) is interpreted as r=3.
* truth CSV (optional): ``id,t,s_true`` with the latent stage path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DataError
from .model import TestResult

_POSITIVE = (TestResult.POSITIVE_EARLY, TestResult.POSITIVE_LATE)


@dataclass(frozen=True, eq=False)
class IndividualRecord:
    """One person's covariates, attributes and test history up to censoring."""

    id: int
    x: np.ndarray
    a: np.ndarray
    results: np.ndarray  # length t_n, values in {0, 1, 2, 3}
    t_n: int
    diagnosed: bool


@dataclass(frozen=True, eq=False)
class Cohort:
    ids: np.ndarray
    x: np.ndarray  # (n, n_x)
    a: np.ndarray  # (n, n_a)
    results: np.ndarray  # (n, horizon), padded with NO_TEST beyond t_n
    t_n: np.ndarray
    horizon: int
    x_names: tuple[str, ...] = ()
    a_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x_{i+1}" for i in range(self.x.shape[1])))
        if not self.a_names:
            object.__setattr__(self, "a_names", tuple(f"a_{i+1}" for i in range(self.a.shape[1])))

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def diagnosed(self) -> np.ndarray:
        last = self.results[np.arange(self.n), self.t_n - 1]
        return (last == TestResult.POSITIVE_EARLY) | (last == TestResult.POSITIVE_LATE)

    def record(self, i: int) -> IndividualRecord:
        t_n = int(self.t_n[i])
        return IndividualRecord(
            id=int(self.ids[i]),
            x=self.x[i].copy(),
            a=self.a[i].copy(),
            results=self.results[i, :t_n].copy(),
            t_n=t_n,
            diagnosed=bool(self.diagnosed[i]),
        )

    def records(self):
        return [self.record(i) for i in range(self.n)]

    def subset(self, idx, new_ids=None) -> "Cohort":
        """Row subset; pass ``new_ids`` to relabel (bootstrap resamples must)."""
        idx = np.asarray(idx)
        ids = self.ids[idx] if new_ids is None else np.asarray(new_ids, dtype=np.int64)
        if np.unique(ids).shape[0] != ids.shape[0]:
            raise DataError("subset would produce duplicate ids; pass new_ids to relabel")
        order = np.argsort(ids, kind="stable")
        return Cohort(
            ids=ids[order],
            x=self.x[idx][order],
            a=self.a[idx][order],
            results=self.results[idx][order],
            t_n=self.t_n[idx][order],
            horizon=self.horizon,
            x_names=self.x_names,
            a_names=self.a_names,
        )

    @classmethod
    def from_records(cls, records, horizon: int, x_names=(), a_names=()) -> "Cohort":
        if not records:
            raise DataError("cohort must contain at least one record")
        order = np.argsort([r.id for r in records], kind="stable")
        records = [records[i] for i in order]
        n = len(records)
        n_x = np.atleast_1d(records[0].x).shape[0]
        n_a = np.atleast_1d(records[0].a).shape[0]
        results = np.full((n, horizon), int(TestResult.NO_TEST), dtype=np.int8)
        x = np.empty((n, n_x))
        a = np.empty((n, n_a))
        ids = np.empty(n, dtype=np.int64)
        t_n = np.empty(n, dtype=np.int64)
        for i, rec in enumerate(records):
            ids[i] = rec.id
            x[i] = rec.x
            a[i] = rec.a
            t_n[i] = rec.t_n
            results[i, : rec.t_n] = rec.results
        cohort = cls(ids, x, a, results, t_n, horizon, tuple(x_names), tuple(a_names))
        cohort.validate()
        return cohort

    def validate(self) -> None:
        """Raise DataError on the first record violating a structural invariant."""
        if np.unique(self.ids).shape[0] != self.n:
            raise DataError("duplicate ids in cohort")
        if self.results.shape != (self.n, self.horizon):
            raise DataError("results matrix shape does not match (n, horizon)")
        if np.any(self.t_n < 1) or np.any(self.t_n > self.horizon):
            bad = int(self.ids[np.flatnonzero((self.t_n < 1) | (self.t_n > self.horizon))[0]])
            raise DataError(f"individual {bad}: follow-up length outside [1, horizon]")
        if np.any(self.results < 0) or np.any(self.results > 3):
            raise DataError("test results must be coded in {0, 1, 2, 3}")
        positive = (self.results == 1) | (self.results == 2)
        t_grid = np.arange(1, self.horizon + 1)[None, :]
        early_positive = positive & (t_grid < self.t_n[:, None])
        if np.any(early_positive):
            bad = int(self.ids[np.flatnonzero(early_positive.any(axis=1))[0]])
            raise DataError(f"individual {bad}: positive result before censoring time")
        undiag_short = ~self.diagnosed & (self.t_n != self.horizon)
        if np.any(undiag_short):
            bad = int(self.ids[np.flatnonzero(undiag_short)[0]])
            raise DataError(f"individual {bad}: undiagnosed but follow-up ends before the horizon")
        padded = positive & (t_grid > self.t_n[:, None])
        if np.any(padded):
            bad = int(self.ids[np.flatnonzero(padded.any(axis=1))[0]])
            raise DataError(f"individual {bad}: results recorded after censoring")


# ---------------------------------------------------------------------------
# CSV formats


def write_cohort(cohort: Cohort, baseline_path, panel_path) -> None:
    base = pd.DataFrame({"id": cohort.ids})
    for j, name in enumerate(cohort.x_names):
        base[f"x_{name}" if not name.startswith("x_") else name] = cohort.x[:, j]
    for j, name in enumerate(cohort.a_names):
        base[f"a_{name}" if not name.startswith("a_") else name] = cohort.a[:, j]
    base.to_csv(baseline_path, index=False)

    n_rows = int(cohort.t_n.sum())
    ids = np.repeat(cohort.ids, cohort.t_n)
    t = np.concatenate([np.arange(1, k + 1) for k in cohort.t_n]) if n_rows else np.empty(0, int)
    r = np.concatenate([cohort.results[i, : cohort.t_n[i]] for i in range(cohort.n)])
    pd.DataFrame({"id": ids, "t": t, "r": r}).to_csv(panel_path, index=False)


def write_truth(ids, stages, path) -> None:
    n, horizon = stages.shape
    pd.DataFrame(
        {
            "id": np.repeat(ids, horizon),
            "t": np.tile(np.arange(1, horizon + 1), n),
            "s_true": stages.reshape(-1),
        }
    ).to_csv(path, index=False)


def _baseline_columns(columns) -> tuple[list[str], list[str]]:
    x_cols = [c for c in columns if c.startswith("x_")]
    a_cols = [c for c in columns if c.startswith("a_")]
    unknown = [c for c in columns if c != "id" and c not in x_cols and c not in a_cols]
    if unknown:
        raise DataError(f"baseline file has unrecognised columns {unknown}")
    if "id" not in columns:
        raise DataError("baseline file is missing the id column")
    return x_cols, a_cols


def read_cohort(baseline_path, panel_path, horizon: int | None = None) -> Cohort:
    """Load a cohort from its baseline and panel CSVs.

    ``horizon`` defaults to the largest timepoint present in the panel.
    """
    base = pd.read_csv(baseline_path)
    x_cols, a_cols = _baseline_columns(list(base.columns))
    if base["id"].duplicated().any():
        raise DataError(f"duplicate ids in {baseline_path}")
    base = base.sort_values("id", kind="stable").reset_index(drop=True)
    ids = base["id"].to_numpy(dtype=np.int64)

    panel = pd.read_csv(panel_path)
    if list(panel.columns) != ["id", "t", "r"]:
        raise DataError(f"panel file must have columns id,t,r, got {list(panel.columns)}")
    if panel.duplicated(["id", "t"]).any():
        raise DataError(f"duplicate (id, t) rows in {panel_path}")
    if not np.isin(panel["id"].unique(), ids).all():
        missing = sorted(set(panel["id"].unique()) - set(ids))[:5]
        raise DataError(f"panel ids not present in baseline: {missing}")
    if horizon is None:
        if panel.empty:
            raise DataError("cannot infer the horizon from an empty panel file")
        horizon = int(panel["t"].max())
    if panel["t"].min() < 1 or panel["t"].max() > horizon:
        raise DataError(f"panel timepoints must lie in [1, {horizon}]")

    n = ids.shape[0]
    results = np.full((n, horizon), int(TestResult.NO_TEST), dtype=np.int8)
    row = np.searchsorted(ids, panel["id"].to_numpy())
    results[row, panel["t"].to_numpy() - 1] = panel["r"].to_numpy()

    positive = (results == 1) | (results == 2)
    any_pos = positive.any(axis=1)
    first_pos = np.where(any_pos, positive.argmax(axis=1) + 1, horizon)
    late_rows = positive & (np.arange(1, horizon + 1)[None, :] > first_pos[:, None])
    if late_rows.any():
        bad = int(ids[np.flatnonzero(late_rows.any(axis=1))[0]])
        raise DataError(f"individual {bad}: results recorded after a positive test")
    tested_after = (results != TestResult.NO_TEST) & (
        np.arange(1, horizon + 1)[None, :] > first_pos[:, None]
    )
    if tested_after.any():
        bad = int(ids[np.flatnonzero(tested_after.any(axis=1))[0]])
        raise DataError(f"individual {bad}: results recorded after a positive test")

    cohort = Cohort(
        ids=ids,
        x=base[x_cols].to_numpy(dtype=np.float64),
        a=base[a_cols].to_numpy(dtype=np.float64),
        results=results,
        t_n=first_pos.astype(np.int64),
        horizon=horizon,
        x_names=tuple(x_cols),
        a_names=tuple(a_cols),
    )
    cohort.validate()
    return cohort
