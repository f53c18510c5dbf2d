"""Small numerical toolkit shared by the learners.

Dense matrices are plain ``float64`` numpy arrays; this module adds the
shape/finiteness checks the rest of the package relies on, an Adam
optimizer working on flat parameter vectors, a rand/1/bin differential
evolution optimizer and seeded, splittable random streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a finite 2-d float64 array, optionally checking dims."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 1 and rows is not None and cols is not None:
        if a.size != rows * cols:
            raise ShapeError(f"expected {rows * cols} values, got {a.size}")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got ndim={a.ndim}")
    if rows is not None and a.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {a.shape[0]}")
    if cols is not None and a.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------


def seeded_rng(seed: int | np.random.SeedSequence | None) -> np.random.Generator:
    """Deterministic random stream (PCG64) for ``seed``.

    Use :func:`split_rng` to hand independent sub-streams to workers or
    sub-modules.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child streams from ``rng``."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def derive_seed(*parts: int) -> np.random.SeedSequence:
    """Seed sequence keyed by a tuple of integers (e.g. ``(seed, sample_id)``)."""
    return np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, size: int, learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, learning_rate, **kw)


def adam_step(state: AdamState, params, grads) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new params and a new state.

    Entries whose gradient is exactly zero are left untouched even if their
    momentum is non-zero, so frozen or unrouted parameters never drift; the
    moments still decay and the step counter still advances.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.first_moment.shape == state.second_moment.shape):
        raise ShapeError(
            f"adam: params {params.shape}, grads {grads.shape}, "
            f"moments {state.first_moment.shape}/{state.second_moment.shape}"
        )
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise ValueError(f"non-finite gradient at index {int(bad[0])}")

    t = state.step + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    # entries with an exactly-zero gradient stay put (lazy update)
    new_params = np.where(grads == 0.0, params, params - update)
    new_state = AdamState(m, v, t, state.learning_rate, state.beta1, state.beta2, state.epsilon)
    return new_params, new_state


# --------------------------------------------------------------------------
# differential evolution
# --------------------------------------------------------------------------


@dataclass
class DEConfig:
    bounds: Sequence[tuple[float, float]]
    population_size: int | None = None
    mutation_factor: float = 0.8
    crossover_prob: float = 0.7
    seed: int = 0
    # optional starting candidates copied into the initial population
    init: list = field(default_factory=list)

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(b)):
            raise ValueError("DE bounds must be finite")
        if np.any(b[:, 0] >= b[:, 1]):
            raise ValueError("every DE bound pair needs lower < upper")
        self.bounds = [tuple(r) for r in b.tolist()]
        if self.population_size is None:
            self.population_size = min(15 * len(self.bounds), 64)
        self.population_size = max(int(self.population_size), 4)
        if not 0.0 <= self.mutation_factor <= 2.0:
            raise ValueError("mutation_factor must lie in [0, 2]")
        if not 0.0 <= self.crossover_prob <= 1.0:
            raise ValueError("crossover_prob must lie in [0, 1]")


@dataclass
class DEResult:
    x: np.ndarray
    fun: float
    history: list[float]
    n_evals: int


def de_optimize(
    objective: Callable[[np.ndarray], float],
    config: DEConfig,
    max_iters: int,
    vectorized: bool = False,
) -> DEResult:
    """Minimize ``objective`` with classic DE/rand/1/bin.

    With ``vectorized=True`` the objective receives a ``(pop, dim)`` array
    and must return ``pop`` values; this is only a batching convenience, the
    search itself is identical.  Trial vectors are clipped into the bounds,
    so the objective is never evaluated outside them.  ``history`` holds the
    best value after initialisation and after each generation.
    """
    rng = seeded_rng(config.seed)
    bounds = np.asarray(config.bounds, dtype=np.float64)
    lo, hi = bounds[:, 0], bounds[:, 1]
    dim = len(lo)
    npop = config.population_size

    pop = lo + rng.random((npop, dim)) * (hi - lo)
    for i, x0 in enumerate(config.init[:npop]):
        pop[i] = np.clip(np.asarray(x0, dtype=np.float64), lo, hi)

    def evaluate(batch: np.ndarray) -> np.ndarray:
        if vectorized:
            return np.asarray(objective(batch), dtype=np.float64).reshape(len(batch))
        return np.array([float(objective(x)) for x in batch])

    fit = evaluate(pop)
    n_evals = npop
    best = int(np.argmin(fit))
    history = [float(fit[best])]

    for _ in range(max_iters):
        trials = np.empty_like(pop)
        for i in range(npop):
            choices = [j for j in range(npop) if j != i]
            a, b, c = rng.choice(choices, size=3, replace=False)
            mutant = pop[a] + config.mutation_factor * (pop[b] - pop[c])
            cross = rng.random(dim) < config.crossover_prob
            cross[rng.integers(dim)] = True
            trials[i] = np.clip(np.where(cross, mutant, pop[i]), lo, hi)
        trial_fit = evaluate(trials)
        n_evals += npop
        better = trial_fit <= fit
        pop[better] = trials[better]
        fit[better] = trial_fit[better]
        best = int(np.argmin(fit))
        history.append(float(fit[best]))

    return DEResult(pop[best].copy(), float(fit[best]), history, n_evals)
