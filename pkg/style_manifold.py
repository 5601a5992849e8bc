"""
style_manifold.py
-----------------
Explicit style manifold: a Gaussian latent space decoded into five
intensity/smoothness/noise perturbation parameters, the renderer that
applies a style to a content image, and an inverse estimator that fits
the style separating two renderings of the same content.

Latent coordinate i maps to parameter i through u = Phi(z_i), so
z ~ N(0, I) covers every parameter range uniformly.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, special
from scipy.stats import qmc

import imagecore
from errors import BoundaryError, ContractError

PARAM_NAMES = ("scale", "offset", "gamma", "blur_sharp", "noise_sigma")
LATENT_DIM = len(PARAM_NAMES)
LATENT_BOX = 3.0

# Interpolation weights for style paths; values outside [0, 1] extrapolate
DEFAULT_PATH_WEIGHTS = (-0.5, -0.25, 0.0, 0.33, 0.66, 1.0, 1.25, 1.5)

ESTIMATE_RESTARTS = 8
ESTIMATE_BUDGET = 400
# A restart at or below this fit error ends the multi-start early
ESTIMATE_EXACT_MSE = 1e-7
# Sharpening always compares against a unit-sigma blur
UNSHARP_SIGMA = 1.0


@dataclass(frozen=True)
class ParamRange:
    lo: float
    hi: float
    law: str = "linear"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ContractError(f"range needs lo < hi, got [{self.lo}, {self.hi}]")
        if self.law not in ("linear", "log"):
            raise ContractError(f"unknown interpolation law {self.law!r}")
        if self.law == "log" and self.lo <= 0:
            raise ContractError("logarithmic law requires lo > 0")

    def from_unit(self, u):
        if self.law == "log":
            return self.lo * (self.hi / self.lo) ** u
        return self.lo + (self.hi - self.lo) * u

    def to_unit(self, p):
        if self.law == "log":
            return math.log(p / self.lo) / math.log(self.hi / self.lo)
        return (p - self.lo) / (self.hi - self.lo)

    def contains(self, p: float) -> bool:
        return self.lo <= p <= self.hi

    def clamp(self, p: float) -> float:
        return min(max(p, self.lo), self.hi)


@dataclass(frozen=True)
class ParamBounds:
    """Per-parameter ranges. Defaults cover the perturbations and their inverses."""

    scale: ParamRange = ParamRange(0.5, 2.0, "log")
    offset: ParamRange = ParamRange(-0.3, 0.3)
    gamma: ParamRange = ParamRange(0.625, 1.6, "log")
    blur_sharp: ParamRange = ParamRange(-1.0, 1.5)
    noise_sigma: ParamRange = ParamRange(0.0, 0.05)

    def ranges(self) -> List[ParamRange]:
        return [getattr(self, name) for name in PARAM_NAMES]


DEFAULT_BOUNDS = ParamBounds()


@dataclass(frozen=True)
class StyleParams:
    """Decoded style. blur_sharp > 0 blurs (sigma in pixels), < 0 sharpens."""

    scale: float = 1.0
    offset: float = 0.0
    gamma: float = 1.0
    blur_sharp: float = 0.0
    noise_sigma: float = 0.0

    @classmethod
    def identity(cls) -> "StyleParams":
        return cls()

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "StyleParams":
        unknown = set(data) - set(PARAM_NAMES)
        if unknown:
            raise ContractError(f"unknown style fields: {sorted(unknown)}")
        return cls(**{name: float(data[name]) for name in PARAM_NAMES})

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES], dtype=np.float64)

    def without_noise(self) -> "StyleParams":
        return replace(self, noise_sigma=0.0)

    def within(self, bounds: ParamBounds = DEFAULT_BOUNDS) -> bool:
        return all(r.contains(v) for r, v in zip(bounds.ranges(), self.as_vector()))

    def clamped(self, bounds: ParamBounds = DEFAULT_BOUNDS) -> Tuple["StyleParams", List[str]]:
        """Clamp into bounds; also report which fields moved."""
        values, moved = {}, []
        for name, rng, v in zip(PARAM_NAMES, bounds.ranges(), self.as_vector()):
            values[name] = rng.clamp(float(v))
            if values[name] != v:
                moved.append(name)
        return StyleParams(**values), moved


@dataclass
class StyleEstimate:
    params: StyleParams
    mse: float
    converged: bool
    evaluations: int
    restart_index: int = 0
    restart_mse: List[float] = field(default_factory=list)


def check_latent(z) -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.shape != (LATENT_DIM,):
        raise ContractError(f"style latent must have shape ({LATENT_DIM},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("style latent contains non-finite components")
    return arr


def clamp_latent(z) -> np.ndarray:
    return np.clip(np.asarray(z, dtype=np.float64), -LATENT_BOX, LATENT_BOX)


def latent_to_params(z, bounds: ParamBounds = DEFAULT_BOUNDS) -> StyleParams:
    z = check_latent(z)
    u = special.ndtr(z)
    values = [rng.from_unit(float(ui)) for rng, ui in zip(bounds.ranges(), u)]
    return StyleParams(*values)


def params_to_latent(p: StyleParams, bounds: ParamBounds = DEFAULT_BOUNDS) -> np.ndarray:
    z = np.empty(LATENT_DIM)
    for i, (name, rng, value) in enumerate(zip(PARAM_NAMES, bounds.ranges(), p.as_vector())):
        if not rng.lo < value < rng.hi:
            raise BoundaryError(
                f"{name}={value} is not strictly inside [{rng.lo}, {rng.hi}]; latent would be infinite"
            )
        z[i] = special.ndtri(rng.to_unit(float(value)))
    return z


def sample_latent(rng_seed, n: Optional[int] = None) -> np.ndarray:
    """
    Standard-normal latent(s) from numpy's PCG64 generator, clamped to the box.

    Returns shape (LATENT_DIM,) when n is None, else (n, LATENT_DIM).
    """
    rng = np.random.default_rng(rng_seed)
    shape = LATENT_DIM if n is None else (n, LATENT_DIM)
    return clamp_latent(rng.standard_normal(shape))


def identity_anchor_latent(bounds: ParamBounds = DEFAULT_BOUNDS) -> np.ndarray:
    """Latent of the identity style with noise at the lowest in-box value."""
    z = params_to_latent(replace(StyleParams.identity(), noise_sigma=_interior_noise_floor(bounds)), bounds)
    return clamp_latent(z)


def _interior_noise_floor(bounds: ParamBounds) -> float:
    return float(bounds.noise_sigma.from_unit(special.ndtr(-LATENT_BOX)))


def apply_style(content: np.ndarray, p: StyleParams, noise_seed=None,
                bounds: ParamBounds = DEFAULT_BOUNDS) -> np.ndarray:
    """
    Render content under a style.

    Order: scale and offset (clamped to [0,1]), gamma, blur or unsharp
    sharpening, additive Gaussian noise (clamped to [0,1]).
    """
    img = imagecore.check_image(content, "content")
    if not p.within(bounds):
        raise ContractError(f"style out of bounds: {p}")

    out = np.clip(p.scale * img + p.offset, 0.0, 1.0)
    if p.gamma != 1.0:
        out = out ** p.gamma

    if p.blur_sharp > 0:
        out = imagecore.gaussian_blur(out, p.blur_sharp)
    elif p.blur_sharp < 0:
        out = out + abs(p.blur_sharp) * (out - imagecore.gaussian_blur(out, UNSHARP_SIGMA))

    if p.noise_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        out = out + rng.normal(0.0, p.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def apply_style_latent(content: np.ndarray, z, noise_seed=None,
                       bounds: ParamBounds = DEFAULT_BOUNDS) -> np.ndarray:
    return apply_style(content, latent_to_params(z, bounds), noise_seed, bounds)


# ============================================================================
# Style estimation
# ============================================================================

def _start_latents(restarts: int) -> np.ndarray:
    """Fixed Halton start set over the four noiseless coordinates."""
    sampler = qmc.Halton(d=LATENT_DIM - 1, scramble=False)
    # Skip the all-zero first point, then squeeze away from the tails
    u = sampler.random(restarts + 1)[1:]
    return special.ndtri(0.1 + 0.8 * u)


def _noiseless_params(w: np.ndarray, bounds: ParamBounds) -> StyleParams:
    u = special.ndtr(w)
    ranges = bounds.ranges()
    return StyleParams(*(rng.from_unit(float(ui)) for rng, ui in zip(ranges[:-1], u)), 0.0)


def estimate_style(content: np.ndarray, styled: np.ndarray,
                   bounds: ParamBounds = DEFAULT_BOUNDS,
                   restarts: int = ESTIMATE_RESTARTS,
                   budget: int = ESTIMATE_BUDGET,
                   max_workers: int = 1) -> StyleEstimate:
    """
    Fit the style mapping content onto styled.

    Minimizes the noiseless rendering MSE with Nelder-Mead in latent
    coordinates (always interior), from a fixed multi-start set. The noise
    level is then read off the residual of the best fit.

    Restarts run in index order, max_workers at a time. The first restart
    that fits to within ESTIMATE_EXACT_MSE wins and stops the rest; if none
    does, all restarts run and the lowest (mse, restart index) wins. Both
    rules give the same answer for any max_workers.
    """
    content = imagecore.check_image(content, "content")
    styled = imagecore.check_image(styled, "styled")
    if content.shape != styled.shape:
        raise ContractError(f"shape mismatch: {content.shape} vs {styled.shape}")

    def mse(w):
        rendered = apply_style(content, _noiseless_params(w, bounds), bounds=bounds)
        return float(np.mean((rendered - styled) ** 2))

    def run(start):
        simplex = np.vstack([start, start + 0.5 * np.eye(len(start))])
        return optimize.minimize(
            mse, start, method="Nelder-Mead",
            options={"maxfev": budget, "xatol": 1e-5, "fatol": 1e-12,
                     "initial_simplex": simplex},
        )

    starts = _start_latents(restarts)
    chunk = max(1, max_workers)
    results = []
    pool = ThreadPoolExecutor(max_workers=chunk) if chunk > 1 else None
    try:
        for lo in range(0, len(starts), chunk):
            batch = starts[lo:lo + chunk]
            results.extend(pool.map(run, batch) if pool else (run(s) for s in batch))
            if any(r.fun <= ESTIMATE_EXACT_MSE for r in results):
                break
    finally:
        if pool is not None:
            pool.shutdown()

    exact = [i for i, r in enumerate(results) if r.fun <= ESTIMATE_EXACT_MSE]
    if exact:
        best_index = exact[0]
    else:
        best_index = min(range(len(results)), key=lambda i: (results[i].fun, i))
    best = results[best_index]
    fit = _noiseless_params(best.x, bounds)

    residual = styled - apply_style(content, fit, bounds=bounds)
    noise = bounds.noise_sigma.clamp(float(np.std(residual)))
    params = replace(fit, noise_sigma=noise)

    evaluations = int(sum(r.nfev for r in results))
    if not best.success:
        logging.warning(
            f"Style estimate did not converge within {budget} evaluations "
            f"(restart {best_index}, mse={best.fun:.3e}); returning best found"
        )
    logging.debug(f"Style estimate: {params} mse={best.fun:.3e} evaluations={evaluations}")

    return StyleEstimate(
        params=params,
        mse=float(best.fun),
        converged=bool(best.success),
        evaluations=evaluations,
        restart_index=best_index,
        restart_mse=[float(r.fun) for r in results],
    )


# ============================================================================
# Manifold inspection
# ============================================================================

def interpolate_latents(z_a, z_b, weights: Sequence[float] = DEFAULT_PATH_WEIGHTS) -> List[np.ndarray]:
    """w * z_a + (1 - w) * z_b for each weight; no clamping."""
    z_a, z_b = check_latent(z_a), check_latent(z_b)
    return [w * z_a + (1.0 - w) * z_b for w in weights]


def attribute_presets(bounds: ParamBounds = DEFAULT_BOUNDS) -> Dict[str, StyleParams]:
    """Single-attribute shifts of the identity style."""
    base = StyleParams.identity()
    presets = {
        "brightness": replace(base, scale=1.3, offset=0.25),
        "contrast": replace(base, gamma=0.7),
        "blur": replace(base, blur_sharp=0.5),
        "noise": replace(base, noise_sigma=bounds.noise_sigma.hi),
    }
    for name, p in presets.items():
        if not p.within(bounds):
            raise ContractError(f"preset {name} falls outside the style bounds")
    return presets


def style_path_strip(content: np.ndarray, z_a, z_b,
                     weights: Sequence[float] = DEFAULT_PATH_WEIGHTS,
                     bounds: ParamBounds = DEFAULT_BOUNDS) -> List[np.ndarray]:
    """Noiseless renderings along the (clamped) latent path from z_b to z_a."""
    frames = []
    for z in interpolate_latents(z_a, z_b, weights):
        p = latent_to_params(clamp_latent(z), bounds).without_noise()
        frames.append(apply_style(content, p, bounds=bounds))
    return frames
