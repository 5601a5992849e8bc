"""
bo.py
-----
GP-UCB search over the style latent box.

The loop evaluates a seeded random init design, fits GP hyperparameters,
then repeats propose -> evaluate -> update for a fixed number of
iterations. Failed evaluations are kept in the trace as -inf and left
out of the surrogate.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import optimize

import gp as gpm
from errors import ContractError
from style_manifold import LATENT_BOX, LATENT_DIM, clamp_latent, sample_latent

# Seed-stream tags; the init design and every pool get independent streams
INIT_STREAM = 0
POOL_STREAM = 1

Objective = Callable[[np.ndarray], float]


class AcquisitionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    beta: float = Field(0.1, ge=0.0)
    pool_size: int = Field(2048, ge=1)
    refine_steps: int = Field(20, ge=0)


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    z: np.ndarray
    value: float
    best_value: float


@dataclass
class BoState:
    gp: Optional[gpm.GpState]
    rng_seed: int
    best_z: Optional[np.ndarray] = None
    best_value: float = -math.inf
    iteration: int = 0
    init_samples: int = 0
    failures: int = 0
    trace: List[TraceRecord] = field(default_factory=list)

    @property
    def evaluations(self) -> int:
        return len(self.trace)

    def record(self, z: np.ndarray, value: float) -> TraceRecord:
        if value > self.best_value:
            self.best_value = value
            self.best_z = np.array(z, dtype=np.float64)
        rec = TraceRecord(len(self.trace), np.array(z, dtype=np.float64), value, self.best_value)
        self.trace.append(rec)
        return rec


def ucb(post: gpm.Posterior, beta: float) -> float:
    if post.variance < 0:
        raise ContractError(f"posterior variance must be >= 0, got {post.variance}")
    return post.mean + math.sqrt(beta) * math.sqrt(post.variance)


def init_design(seed: int, n: int) -> np.ndarray:
    """The n seeded N(0, I) latents evaluated before the search starts."""
    return sample_latent([seed, INIT_STREAM], n=n)


def _refine_simplex(start: np.ndarray, step: float = 0.25) -> np.ndarray:
    simplex = [start]
    for i in range(len(start)):
        vertex = start.copy()
        # step inward when the vertex would leave the box
        vertex[i] += step if start[i] + step <= LATENT_BOX else -step
        simplex.append(vertex)
    return np.array(simplex)


def propose_candidate(state: BoState, cfg: AcquisitionConfig) -> np.ndarray:
    """
    Maximize UCB: score a seeded random pool, take the argmax, polish it
    with bounded Nelder-Mead. The polished point is kept only if it does
    not score lower than the pool winner.
    """
    pool = sample_latent([state.rng_seed, POOL_STREAM, state.iteration], n=cfg.pool_size)
    if state.gp is None:
        # nothing finite observed yet
        return pool[0].copy()

    mean, var = gpm.posterior_batch(state.gp, pool)
    scores = mean + math.sqrt(cfg.beta) * np.sqrt(var)
    best = int(np.argmax(scores))
    start = pool[best].copy()
    if cfg.refine_steps == 0:
        return start

    def neg_ucb(z):
        return -ucb(gpm.posterior(state.gp, z), cfg.beta)

    res = optimize.minimize(
        neg_ucb, start, method="Nelder-Mead",
        bounds=[(-LATENT_BOX, LATENT_BOX)] * len(start),
        options={"maxiter": cfg.refine_steps, "initial_simplex": _refine_simplex(start)},
    )
    refined = clamp_latent(res.x)
    if -neg_ucb(refined) >= scores[best]:
        return refined
    return start


def _safe_value(objective: Objective, z: np.ndarray) -> float:
    try:
        value = float(objective(z))
    except ArithmeticError as e:
        logging.warning(f"Objective failed at z={np.round(z, 3).tolist()}: {e}")
        return -math.inf
    if not math.isfinite(value):
        logging.warning(f"Objective returned {value} at z={np.round(z, 3).tolist()}")
        return -math.inf
    return value


def _observe(state: BoState, z: np.ndarray, value: float):
    state.record(z, value)
    if not math.isfinite(value):
        state.failures += 1
        return
    if state.gp is None:
        state.gp = gpm.build_state(z.reshape(1, -1), [value])
    else:
        state.gp = gpm.add_observation(state.gp, z, value)


def run_bo(objective: Objective, cfg: AcquisitionConfig = None, init_samples: int = 100,
           iterations: int = 100, seed: int = 0, *,
           fit_steps: int = 50, fit_step: float = 0.1,
           refit_every: int = 10, refit_steps: int = 10,
           design: Optional[np.ndarray] = None, max_workers: int = 1,
           on_iteration: Optional[Callable[[BoState], None]] = None) -> BoState:
    """
    Full search: init design, hyperparameter fit, then `iterations`
    proposals. Exactly init_samples + iterations objective calls are made.

    `design` overrides the seeded init design (same row count required).
    `on_iteration` is called with the state after the init design
    (iteration 0) and after every search iteration.
    """
    cfg = cfg or AcquisitionConfig()
    if init_samples < 1 or iterations < 0:
        raise ContractError(f"need init_samples >= 1 and iterations >= 0, got {init_samples}, {iterations}")

    if design is None:
        design = init_design(seed, init_samples)
    design = np.asarray(design, dtype=np.float64)
    if design.shape != (init_samples, LATENT_DIM):
        raise ContractError(f"init design must be {init_samples}x{LATENT_DIM}, got {design.shape}")

    state = BoState(gp=None, rng_seed=seed, init_samples=init_samples)

    logging.info(f"BO: evaluating {init_samples} init samples (workers={max_workers})")
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            values = list(pool.map(lambda z: _safe_value(objective, z), design))
    else:
        values = [_safe_value(objective, z) for z in design]
    # inserted in sample-index order regardless of completion order
    for z, value in zip(design, values):
        _observe(state, z, value)

    if state.gp is not None and state.gp.n >= 2:
        state.gp = gpm.fit_hyperparameters(state.gp, fit_steps, fit_step)
    logging.info(f"✓ Init design done: best={state.best_value:.4f}, failures={state.failures}")
    if on_iteration:
        on_iteration(state)

    for k in range(1, iterations + 1):
        state.iteration = k
        z = propose_candidate(state, cfg)
        value = _safe_value(objective, z)
        _observe(state, z, value)

        if refit_every > 0 and k % refit_every == 0 and state.gp is not None and state.gp.n >= 2:
            state.gp = gpm.fit_hyperparameters(state.gp, refit_steps, fit_step)

        logging.debug(f"BO iter {k}: value={value:.4f} best={state.best_value:.4f}")
        if on_iteration:
            on_iteration(state)

    logging.info(
        f"✓ BO finished: {state.evaluations} evaluations, best={state.best_value:.4f}, "
        f"failures={state.failures}"
    )
    return state


def trace_frame(state: BoState) -> pd.DataFrame:
    rows = []
    for rec in state.trace:
        row = {"iteration": rec.iteration}
        row.update({f"z_{i}": float(v) for i, v in enumerate(rec.z)})
        row["value"] = rec.value
        row["best_value"] = rec.best_value
        rows.append(row)
    columns = ["iteration"] + [f"z_{i}" for i in range(LATENT_DIM)] + ["value", "best_value"]
    return pd.DataFrame(rows, columns=columns)


def write_trace(state: BoState, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace_frame(state).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logging.info(f"Trace written: {path}")
    return path
