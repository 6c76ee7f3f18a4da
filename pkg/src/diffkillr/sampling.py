"""Training-index samplers."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ParameterError


class HardExampleSampler:
    """Draw training batches, a fraction ``rho`` of which comes from recently hard items.

    Each item keeps its most recent loss.  The hard set is the top
    ``hard_quantile`` of items by that loss (items never seen count as
    hardest).  ``rho = 0`` is plain uniform sampling with replacement.
    """

    def __init__(self, n_items: int, rho: float, batch_size: int, seed: int = 0, hard_quantile: float = 0.25):
        if not 0.0 <= rho <= 1.0:
            raise ParameterError(f"rho must lie in [0, 1], got {rho}")
        if n_items < 1 or batch_size < 1:
            raise ParameterError("need at least one item and a positive batch size")
        self.n_items = n_items
        self.rho = float(rho)
        self.batch_size = batch_size
        self.hard_quantile = hard_quantile
        self.losses = np.full(n_items, np.inf)
        self.rng = np.random.default_rng(seed)

    def hard_set(self) -> np.ndarray:
        k = max(1, int(np.ceil(self.hard_quantile * self.n_items)))
        # Stable sort keeps ties in index order, so the set is reproducible.
        order = np.argsort(-self.losses, kind="stable")
        return np.sort(order[:k])

    def sample(self) -> np.ndarray:
        n_hard = int(round(self.rho * self.batch_size))
        parts = []
        if n_hard:
            hard = self.hard_set()
            parts.append(hard[self.rng.integers(0, len(hard), n_hard)])
        if self.batch_size - n_hard:
            parts.append(self.rng.integers(0, self.n_items, self.batch_size - n_hard))
        return np.concatenate(parts)

    def update(self, indices: Sequence[int], losses: Sequence[float]) -> None:
        for i, l in zip(np.asarray(indices), np.asarray(losses, dtype=float)):
            self.losses[i] = l
