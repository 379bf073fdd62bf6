import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from mixsur.config import Settings
from mixsur.config import settings as environment_settings
from mixsur.model.core import bic, check_identifiability, count_parameters
from mixsur.model.em import fit
from mixsur.objects import (
    Dataset,
    EmControls,
    EnumerationTooLarge,
    FitResult,
    MixSURError,
    ModelSpec,
)
from mixsur.util.parallel import run_tasks

__all__ = ["bic", "SearchCell", "SearchGrid", "count_cells", "search"]

MAX_CELLS = 2**20


@dataclass(frozen=True)
class SearchCell:
    """One (K, regressor subset) model of the search grid."""

    n_components: int
    mask: tuple[int, ...]
    regressors: tuple[tuple[int, ...], ...]
    npar: int
    status: str
    loglik: float | None = None
    bic: float | None = None
    reason: str | None = None
    fit: FitResult | None = field(default=None, compare=False, repr=False)

    @property
    def n_regressors(self) -> int:
        return sum(len(r) for r in self.regressors)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def mask_label(self, sizes: Sequence[int]) -> str:
        """Per-equation inclusion bits in candidate order, equations separated by '|'."""
        return "|".join(
            "".join("1" if (m >> j) & 1 else "0" for j in range(size))
            for m, size in zip(self.mask, sizes)
        )

    def sort_key(self) -> tuple:
        # larger BIC first, then fewer parameters, then the smaller mask
        return (-self.bic, self.npar, self.mask)


@dataclass
class SearchGrid:
    """Every cell of an exhaustive search, keyed by (K, mask)."""

    candidates: tuple[tuple[int, ...], ...]
    k_values: tuple[int, ...]
    cells: dict[tuple[int, tuple[int, ...]], SearchCell]
    spec: ModelSpec

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def successes(self) -> list[SearchCell]:
        return [cell for cell in self.cells.values() if cell.ok]

    @property
    def failures(self) -> list[SearchCell]:
        return [cell for cell in self.cells.values() if not cell.ok]

    @property
    def best(self) -> SearchCell | None:
        successes = self.successes
        if not successes:
            return None
        return min(successes, key=SearchCell.sort_key)

    def best_for(self, n_components: int) -> SearchCell | None:
        cells = [c for c in self.successes if c.n_components == n_components]
        return min(cells, key=SearchCell.sort_key) if cells else None

    def to_frame(self) -> pd.DataFrame:
        """One row per cell: K, P, regressor_mask, loglik, npar, bic, status."""
        sizes = [len(c) for c in self.candidates]
        rows = [
            {
                "K": cell.n_components,
                "P": cell.n_regressors,
                "regressor_mask": cell.mask_label(sizes),
                "loglik": cell.loglik,
                "npar": cell.npar,
                "bic": cell.bic,
                "status": cell.status,
            }
            for _, cell in sorted(self.cells.items())
        ]
        return pd.DataFrame(
            rows, columns=["K", "P", "regressor_mask", "loglik", "npar", "bic", "status"]
        )

    def best_by_size(self) -> pd.DataFrame:
        """Best BIC for every (K, P) pair among the successful cells."""
        frame = self.to_frame()
        frame = frame[frame["status"] == "ok"]
        if frame.empty:
            return pd.DataFrame(columns=["K", "P", "bic", "regressor_mask"])
        best = {}
        for cell in sorted(self.successes, key=SearchCell.sort_key):
            best.setdefault((cell.n_components, cell.n_regressors), cell)
        sizes = [len(c) for c in self.candidates]
        rows = [
            {
                "K": K,
                "P": P,
                "bic": cell.bic,
                "regressor_mask": cell.mask_label(sizes),
            }
            for (K, P), cell in sorted(best.items())
        ]
        return pd.DataFrame(rows, columns=["K", "P", "bic", "regressor_mask"])


def count_cells(candidates: Sequence[Sequence[int]], k_values: Sequence[int]) -> int:
    return int(np.prod([2 ** len(c) for c in candidates], dtype=object)) * len(k_values)


def _subset(candidates: Sequence[int], mask: int) -> tuple[int, ...]:
    return tuple(j for bit, j in enumerate(candidates) if (mask >> bit) & 1)


def _fit_cell(
    dataset: Dataset,
    spec: ModelSpec,
    mask: tuple[int, ...],
    controls: EmControls,
    settings: Settings,
) -> SearchCell:
    cell_data = dataset.with_spec(spec)
    npar = count_parameters(spec)
    common = dict(
        n_components=spec.n_components,
        mask=mask,
        regressors=spec.regressors,
        npar=npar,
    )
    identifiability = check_identifiability(cell_data)
    if not identifiability.ok:
        return SearchCell(
            **common, status="unidentifiable", reason=str(identifiability)
        )
    try:
        result = fit(cell_data, controls, settings=settings, n_jobs=1)
    except MixSURError as e:
        return SearchCell(**common, status="failed", reason=str(e))
    return SearchCell(
        **common, status="ok", loglik=result.loglik, bic=result.bic, fit=result
    )


def search(
    dataset: Dataset,
    candidates: Sequence[Sequence[int]],
    k_values: Sequence[int],
    controls: EmControls | None = None,
    max_cells: int = MAX_CELLS,
    settings: Settings | None = None,
) -> SearchGrid:
    """
    Fit every combination of per-equation regressor subsets and component counts.

    Args:
        dataset (Dataset): the sample; its spec supplies names, its regressors are ignored.
        candidates (Sequence[Sequence[int]]): candidate pool columns for each equation.
        k_values (Sequence[int]): component counts to try.
        controls (EmControls | None): EM controls used for every cell.
        max_cells (int): refuse grids larger than this.
        settings (Settings | None): settings to use. Defaults to the global settings.

    Returns:
        SearchGrid: every cell, fitted or with the reason it failed, and the best by BIC.
    """
    if settings is None:
        settings = environment_settings
    if controls is None:
        controls = EmControls()
    logger = settings.logger

    candidates = tuple(tuple(c) for c in candidates)
    k_values = tuple(sorted(set(int(k) for k in k_values)))
    if len(candidates) != dataset.spec.n_equations:
        raise ValueError(
            f"Need candidates for {dataset.spec.n_equations} equations, got {len(candidates)}"
        )
    if not k_values or min(k_values) < 1:
        raise ValueError("Component counts must be positive")

    n_cells = count_cells(candidates, k_values)
    if n_cells > max_cells:
        raise EnumerationTooLarge(n_cells, max_cells)

    tasks = []
    for K in k_values:
        for mask in itertools.product(*[range(2 ** len(c)) for c in candidates]):
            regressors = [_subset(c, m) for c, m in zip(candidates, mask)]
            spec = dataset.spec.with_regressors(regressors).with_components(K)
            tasks.append((dataset, spec, tuple(mask), controls, settings))

    logger.info(f"Searching {n_cells} models")
    results = run_tasks(_fit_cell, tasks, settings.N_JOBS)
    cells = {(cell.n_components, cell.mask): cell for cell in results}

    grid = SearchGrid(
        candidates=candidates, k_values=k_values, cells=cells, spec=dataset.spec
    )
    failed = len(grid.failures)
    if failed:
        logger.warning(f"{failed} of {n_cells} models could not be fitted")
    best = grid.best
    if best is not None:
        logger.info(
            f"Best model: K={best.n_components}, P={best.n_regressors}, BIC {best.bic:.4f}"
        )
    return grid
