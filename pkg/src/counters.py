"""Solve and Flop Accounting

Thread-safe counters shared by the forward solver, the reduced model and the
inversion loop. The offline/online ratio follows the cost model
(K_fun + K_Jac) / (2K).
"""

import threading
from dataclasses import dataclass, asdict
from typing import Dict, Optional


@dataclass(frozen=True)
class CostReport:
    """Snapshot of all counters."""

    large_solves: int
    reduced_solves: int
    update_flops: int
    k_fun: int
    k_jac: int
    k_samples: int

    @property
    def offline_online_ratio(self) -> Optional[float]:
        """(K_fun + K_Jac) / (2K), or None before any sample was taken."""
        if self.k_samples <= 0:
            return None
        return (self.k_fun + self.k_jac) / (2.0 * self.k_samples)

    def since(self, earlier: 'CostReport') -> 'CostReport':
        """Counts accumulated after `earlier` was taken (k_samples is kept)."""
        return CostReport(
            large_solves=self.large_solves - earlier.large_solves,
            reduced_solves=self.reduced_solves - earlier.reduced_solves,
            update_flops=self.update_flops - earlier.update_flops,
            k_fun=self.k_fun - earlier.k_fun,
            k_jac=self.k_jac - earlier.k_jac,
            k_samples=self.k_samples,
        )

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['offline_online_ratio'] = self.offline_online_ratio
        return data


class CostCounters:
    """Accumulates large solves, reduced solves, update flops and evaluation counts."""

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self) -> None:
        """Zero every counter."""
        with self._lock:
            self._large_solves = 0
            self._reduced_solves = 0
            self._update_flops = 0
            self._k_fun = 0
            self._k_jac = 0
            self._k_samples = 0

    def record_large_solves(self, count: int) -> None:
        with self._lock:
            self._large_solves += int(count)

    def record_reduced_solves(self, count: int) -> None:
        with self._lock:
            self._reduced_solves += int(count)

    def record_update_flops(self, flops: int) -> None:
        with self._lock:
            self._update_flops += int(flops)

    def record_function_evaluation(self) -> None:
        with self._lock:
            self._k_fun += 1

    def record_jacobian_evaluation(self) -> None:
        with self._lock:
            self._k_jac += 1

    def set_samples(self, k_samples: int) -> None:
        with self._lock:
            self._k_samples = int(k_samples)

    @property
    def large_solves(self) -> int:
        return self._large_solves

    def snapshot(self) -> CostReport:
        """Return an immutable copy of the current counts."""
        with self._lock:
            return CostReport(
                large_solves=self._large_solves,
                reduced_solves=self._reduced_solves,
                update_flops=self._update_flops,
                k_fun=self._k_fun,
                k_jac=self._k_jac,
                k_samples=self._k_samples,
            )
