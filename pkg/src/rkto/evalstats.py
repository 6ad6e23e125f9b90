"""Evaluation statistics: stratified sampling, bootstrap CIs and rater agreement."""
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CapacityError, DimensionError, InvalidInputError, ParseError

JUDGMENTS_FORMAT = "rkto-judgments/1"


@dataclass
class JudgmentTable:
    """Binary judgments: one row per example, one column per rater."""

    ids: list
    raters: list
    values: np.ndarray
    strata: list = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape != (len(self.ids), len(self.raters)):
            raise DimensionError("judgment table must be rectangular: rows x raters")
        if not self.raters:
            raise InvalidInputError("judgment table needs at least one rater")
        if not np.all((self.values == 0) | (self.values == 1)):
            raise InvalidInputError("judgments must be binary")
        self.values = self.values.astype(np.int8)
        if self.strata is not None and len(self.strata) != len(self.ids):
            raise DimensionError("one stratum label per row")

    def column(self, rater):
        return self.values[:, self.raters.index(rater)]


def read_judgments(path):
    """Parse newline-delimited ``{"id", "stratum", "judgments": {rater: 0|1}}`` records."""
    ids, strata, rows, raters = [], [], [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"malformed record: {err.msg}", lineno) from None
            if not isinstance(rec, dict) or "id" not in rec or "judgments" not in rec:
                raise ParseError("record needs 'id' and 'judgments'", lineno)
            unknown = set(rec) - {"id", "stratum", "judgments"}
            if unknown:
                raise ParseError(f"unknown fields {sorted(unknown)} for {JUDGMENTS_FORMAT}", lineno)
            judg = rec["judgments"]
            if not isinstance(judg, dict) or not judg:
                raise ParseError("'judgments' must be a non-empty object", lineno)
            if raters is None:
                raters = sorted(judg)
            elif sorted(judg) != raters:
                raise ParseError("every row must be judged by the same raters", lineno)
            vals = [judg[r] for r in raters]
            if any(v not in (0, 1) for v in vals):
                raise ParseError("judgments must be 0 or 1", lineno)
            ids.append(str(rec["id"]))
            strata.append(rec.get("stratum"))
            rows.append(vals)
    if not rows:
        raise ParseError("judgment table is empty")
    has_strata = any(s is not None for s in strata)
    return JudgmentTable(ids, raters, np.array(rows), strata if has_strata else None)


def write_judgments(table, path):
    with open(path, "w") as fh:
        for i, ex_id in enumerate(table.ids):
            rec = {"id": ex_id, "judgments": {r: int(table.values[i, j]) for j, r in enumerate(table.raters)}}
            if table.strata is not None:
                rec["stratum"] = table.strata[i]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def stratified_sample(pool, per_stratum_counts, seed, key=None):
    """Sample without replacement inside each stratum.

    ``pool`` is a sequence of items and ``key`` maps an item to its stratum
    (defaults to ``item[1]`` for ``(item, stratum)`` pairs). Returns items in
    stratum order as given by ``per_stratum_counts``.
    """
    key = key or (lambda item: item[1])
    groups = {}
    for item in pool:
        groups.setdefault(key(item), []).append(item)
    rng = np.random.default_rng(seed)
    out = []
    for stratum, count in per_stratum_counts.items():
        members = groups.get(stratum, [])
        if count > len(members):
            raise CapacityError(f"stratum {stratum!r} has {len(members)} members, {count} requested")
        idx = np.sort(rng.choice(len(members), size=count, replace=False))
        out.extend(members[i] for i in idx)
    return out


def bootstrap_ci(outcomes, resamples=10_000, level=0.95, seed=0):
    """Percentile bootstrap of the mean: ``(mean, lo, hi)``."""
    x = np.asarray(outcomes, dtype=np.float64).ravel()
    if x.size == 0:
        raise InvalidInputError("bootstrap needs at least one outcome")
    if resamples < 1 or not 0.0 < level < 1.0:
        raise InvalidInputError("resamples must be >= 1 and level in (0, 1)")
    rng = np.random.default_rng(seed)
    n = x.size
    means = np.empty(resamples)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, resamples, chunk):
        m = min(chunk, resamples - start)
        idx = rng.integers(0, n, size=(m, n))
        means[start:start + m] = x[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(means, [tail, 100.0 - tail])
    mean = float(x.mean())
    return mean, float(min(lo, mean)), float(max(hi, mean))


def cohen_kappa(r1, r2):
    r1 = np.asarray(r1).ravel()
    r2 = np.asarray(r2).ravel()
    if r1.shape != r2.shape:
        raise DimensionError("raters judged different numbers of items")
    if r1.size == 0:
        raise InvalidInputError("need at least one item")
    cats = np.union1d(r1, r2)
    p_o = float(np.mean(r1 == r2))
    p_e = float(sum(np.mean(r1 == c) * np.mean(r2 == c) for c in cats))
    if p_e >= 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def fleiss_kappa(counts, n_raters):
    """Fleiss' kappa from an (items x categories) matrix of rater counts."""
    M = np.asarray(counts, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 1:
        raise DimensionError("counts must be a non-empty items x categories matrix")
    if n_raters < 2:
        raise InvalidInputError("Fleiss' kappa needs at least two raters")
    if np.any(M < 0) or not np.allclose(M.sum(axis=1), n_raters):
        raise InvalidInputError(f"every row must sum to n_raters={n_raters}")
    N, n = M.shape[0], float(n_raters)
    p_j = M.sum(axis=0) / (N * n)
    P_i = (np.sum(M * M, axis=1) - n) / (n * (n - 1))
    P_bar = P_i.mean()
    P_e = float(np.sum(p_j * p_j))
    if P_e >= 1.0:
        return 1.0
    return float((P_bar - P_e) / (1.0 - P_e))


def category_counts(table):
    """Per-row counts of NO/YES votes, shape (rows, 2)."""
    yes = table.values.sum(axis=1)
    return np.stack([len(table.raters) - yes, yes], axis=1)


def majority_vote(values):
    """Row-wise majority over raters; ties resolve to NO."""
    v = np.asarray(values)
    return (2 * v.sum(axis=1) > v.shape[1]).astype(np.int8)


def agreement_report(table, reference_column=None, resamples=10_000, level=0.95, seed=0):
    """Per-rater accuracy against a reference plus pairwise and group agreement.

    Without ``reference_column`` the reference is the raters' majority vote.
    """
    if len(table.raters) < 2:
        raise InvalidInputError("agreement needs at least two raters")
    majority = majority_vote(table.values)
    if reference_column is None:
        reference = majority
        raters = list(table.raters)
    else:
        if reference_column not in table.raters:
            raise InvalidInputError(f"unknown reference column {reference_column!r}")
        reference = table.column(reference_column)
        raters = [r for r in table.raters if r != reference_column]
    per_rater = {}
    for r in raters:
        hits = (table.column(r) == reference).astype(np.float64)
        mean, lo, hi = bootstrap_ci(hits, resamples, level, seed)
        per_rater[r] = {"accuracy": mean, "ci_lo": lo, "ci_hi": hi,
                        "kappa_vs_reference": cohen_kappa(table.column(r), reference)}
    pairwise = {a: {b: cohen_kappa(table.column(a), table.column(b)) for b in table.raters}
                for a in table.raters}
    return {
        "n_items": len(table.ids),
        "raters": list(table.raters),
        "reference": reference_column or "majority",
        "per_rater": per_rater,
        "pairwise_kappa": pairwise,
        "fleiss_kappa": fleiss_kappa(category_counts(table), len(table.raters)),
        "majority": [int(v) for v in majority],
    }


def report_rows(report):
    """Flat per-rater rows for plotting."""
    return [{"rater": r, **vals} for r, vals in report["per_rater"].items()]
