"""Result containers for single trajectories and ensembles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrajectoryRecord:
    """Sampled output of one integrated path.

    Arrays share a leading time axis of length ``len(times)``.
    ``expectations`` and ``dispersions`` have one column per monitored
    observable, ordered as in the model's observable set.  ``concurrence``
    is present only for four-amplitude quantum sectors.  ``converged_branch``
    and ``convergence_time`` are set when the collapse detector fired;
    ``error`` is a human-readable failure description, or None.
    """

    times: np.ndarray
    expectations: np.ndarray
    dispersions: np.ndarray
    q: np.ndarray
    p: np.ndarray
    gamma: np.ndarray
    seed: int
    path_index: int = 0
    concurrence: np.ndarray | None = None
    states: np.ndarray | None = None
    converged_branch: float | None = None
    convergence_time: float | None = None
    norm_drift_max: float = 0.0
    error: str | None = None
    final_state: np.ndarray | None = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return self.converged_branch is not None

    @property
    def ok(self) -> bool:
        return self.error is None

    def final_expectations(self) -> np.ndarray:
        return self.expectations[-1]


@dataclass
class EnsembleStats:
    """Aggregate view over an ensemble of trajectory records.

    ``branch_counts`` maps detector branch values (distinct eigenvalues of
    the first monitored observable) to path counts; paths whose detector
    never fired are counted under ``n_unconverged``.
    """

    n_paths: int
    master_seed: int
    branch_counts: dict
    n_unconverged: int
    n_errors: int
    mean_final_expectations: np.ndarray
    convergence_time_median: float | None
    convergence_time_p90: float | None

    @property
    def branch_fractions(self) -> dict:
        total = sum(self.branch_counts.values())
        if total == 0:
            return {}
        return {k: v / total for k, v in self.branch_counts.items()}


def summarize(records, master_seed: int, branch_values=None) -> EnsembleStats:
    """Build ensemble statistics from per-path records.

    ``branch_values`` fixes the set of reportable branches (all get an
    entry, possibly zero); otherwise branches observed in the records are
    used.  Errored paths contribute to ``n_errors`` only.
    """
    records = list(records)
    ok = [r for r in records if r.ok]
    n_errors = len(records) - len(ok)

    counts: dict = {}
    if branch_values is not None:
        counts = {float(b): 0 for b in branch_values}
    conv_times = []
    n_unconverged = 0
    for r in ok:
        if r.converged:
            b = float(r.converged_branch)
            counts[b] = counts.get(b, 0) + 1
            conv_times.append(r.convergence_time)
        else:
            n_unconverged += 1

    if ok:
        mean_final = np.mean([r.final_expectations() for r in ok], axis=0)
    else:
        mean_final = np.array([])

    if conv_times:
        ct = np.sort(np.asarray(conv_times, dtype=float))
        median = float(np.median(ct))
        p90 = float(np.quantile(ct, 0.9))
    else:
        median = None
        p90 = None

    return EnsembleStats(
        n_paths=len(records),
        master_seed=master_seed,
        branch_counts=counts,
        n_unconverged=n_unconverged,
        n_errors=n_errors,
        mean_final_expectations=mean_final,
        convergence_time_median=median,
        convergence_time_p90=p90,
    )
