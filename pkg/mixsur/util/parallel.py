from typing import Any, Callable, Iterable

import numpy as np
from joblib import Parallel, delayed


def seed_sequence(seed: int | None, *key: int) -> np.random.SeedSequence:
    """The child of `seed` at `key`; task `key` can be reproduced without running the others."""
    return np.random.SeedSequence(seed, spawn_key=tuple(key))


def derive_seed(seed: int | None, *key: int) -> int:
    """A plain integer seed for `key`, for APIs that take an int."""
    return int(seed_sequence(seed, *key).generate_state(1, dtype=np.uint32)[0])


def run_tasks(
    function: Callable[..., Any],
    tasks: Iterable[tuple],
    n_jobs: int = 1,
) -> list:
    """
    Run `function(*task)` for every task, in parallel when `n_jobs` != 1.
    Results come back in task order.
    """
    tasks = list(tasks)
    if n_jobs == 1 or len(tasks) <= 1:
        return [function(*task) for task in tasks]
    return Parallel(n_jobs=n_jobs)(delayed(function)(*task) for task in tasks)
