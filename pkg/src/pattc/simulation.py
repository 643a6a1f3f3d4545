"""Monte Carlo comparison of PATT-C, PATT and CACE on a synthetic population.

Latent indices with standard normal noise decide RCT eligibility ``S``,
compliance ``C`` and (in the population) treatment ``T``; six grid
parameters ``e1..e6`` shift these indices and scale the hidden confounder
``W4``. The unit effect is ``b = +1`` when ``W1 > 0.75`` and ``-1`` otherwise.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd

from .compliance import fit_compliance_model, predict_control_compliers
from .data_model import Dataset, FeatureSpec
from .estimators import (estimate_cace, estimate_pattc, fit_patt_model, fit_response_model)
from .learners import LearnerSpec, make_cv_plan

logger = logging.getLogger(__name__)

W_MEANS = np.array([0.5, 1.0, -1.0, -1.0])
PARAM_NAMES = ("e1", "e2", "e3", "e4", "e5", "e6")
SIM_ESTIMATORS = ("PATT-C", "PATT", "CACE")
OBSERVED_COVARIATES = ("w1", "w2", "w3")
RATE_NAMES = ("compliance_rate", "treatment_rate", "rct_rate")


class DegenerateRunError(ValueError):
    """A generated study has no RCT rows or no treated population rows."""


def covariance_matrix(variance: float = 2.0) -> np.ndarray:
    cov = np.array([
        [0.0, 1.0, 0.5, 1.0],
        [1.0, 0.0, 0.5, 1.0],
        [0.5, 0.5, 0.0, 1.0],
        [1.0, 1.0, 1.0, 0.0],
    ])
    np.fill_diagonal(cov, variance)
    return cov


def sample_covariates(n: int, seed=0, *, variance: float = 2.0) -> np.ndarray:
    """``n x 4`` multivariate normal draws via the symmetric square root of the covariance."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    vals, vecs = np.linalg.eigh(covariance_matrix(variance))
    if vals.min() <= 0:
        raise ValueError(f"covariance with diagonal {variance} is not positive definite")
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return W_MEANS + rng.standard_normal((n, 4)) @ root


@dataclass(frozen=True)
class SimParams:
    e1: float = 0.0
    e2: float = 0.0
    e3: float = 0.0
    e4: float = 0.0
    e5: float = 0.0
    e6: float = 0.0
    g: tuple[float, float, float] = (0.5, 0.25, 0.75)
    h: tuple[float, float] = (0.5, 0.5)
    f: tuple[float, float] = (0.25, 0.75)
    a: float = 1.0
    c: tuple[float, float, float] = (1.0, 2.0, 1.0)
    d: float = 1.0
    p: float = 0.5
    N: int = 30_000
    n: int = 5_000
    w_variance: float = 2.0
    effect: str = "heterogeneous"
    seed: int = 0

    def __post_init__(self):
        if self.N < 2 * self.n:
            raise ValueError("population size N must be at least 2n")
        if not 0.0 < self.p < 1.0:
            raise ValueError("assignment probability p must lie in (0, 1)")
        if self.effect not in ("heterogeneous", "constant", "zero"):
            raise ValueError(f"unknown effect pattern {self.effect!r}")

    @property
    def e(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in PARAM_NAMES)


@dataclass(frozen=True)
class SimDataset:
    W: np.ndarray
    S: np.ndarray
    C: np.ndarray
    T: np.ndarray
    D: np.ndarray
    Y: np.ndarray
    b: np.ndarray
    U: np.ndarray
    provenance: str

    def __len__(self) -> int:
        return len(self.Y)

    def outcome(self, params: SimParams, d) -> np.ndarray:
        """Potential outcome at receipt ``d`` (scalar or per-unit)."""
        c1, c2, c3 = params.c
        W = self.W
        return params.a + self.b * d + c1 * W[:, 0] + c2 * W[:, 1] + c3 * W[:, 3] + params.d * self.U

    def to_dataset(self) -> Dataset:
        """Estimator view: ``W4`` withheld, C hidden where it would be unobserved."""
        cov = {name: self.W[:, j] for j, name in enumerate(OBSERVED_COVARIATES)}
        if self.provenance == "rct":
            C = np.where(self.T == 1, self.C, np.nan)
            return Dataset.from_arrays(cov, S=self.S, T=self.T, D=self.D, C=C, Y=self.Y,
                                       provenance="rct")
        return Dataset.from_arrays(cov, S=self.S, D=self.D, Y=self.Y, provenance="observational")


def _unit_effect(W1, effect):
    if effect == "constant":
        return np.ones_like(W1)
    if effect == "zero":
        return np.zeros_like(W1)
    return np.where(W1 > 0.75, 1.0, -1.0)


def generate_population(params: SimParams, rng: np.random.Generator) -> dict[str, np.ndarray]:
    N = params.N
    W = sample_covariates(N, rng, variance=params.w_variance)
    R, Q, V, U = rng.standard_normal((4, N))
    g1, g2, g3 = params.g
    h1, h2 = params.h
    f1, f2 = params.f
    S = (params.e2 + g1 * W[:, 0] + g2 * W[:, 1] + g3 * W[:, 2] + params.e4 * W[:, 3] + R > 0)
    C = (params.e3 + h1 * W[:, 1] + h2 * W[:, 2] + params.e5 * W[:, 3] + Q > 0)
    T = (params.e1 + f1 * W[:, 0] + f2 * W[:, 1] + params.e6 * W[:, 3] + V > 0)
    b = _unit_effect(W[:, 0], params.effect)
    return {"W": W, "S": S.astype(float), "C": C.astype(float), "T": T.astype(float),
            "b": b, "U": U}


def _build(pop, idx, params, T, provenance) -> SimDataset:
    W, C = pop["W"][idx], pop["C"][idx]
    D = T * C
    c1, c2, c3 = params.c
    b, U = pop["b"][idx], pop["U"][idx]
    Y = params.a + b * D + c1 * W[:, 0] + c2 * W[:, 1] + c3 * W[:, 3] + params.d * U
    return SimDataset(W, pop["S"][idx], C, T, D, Y, b, U, provenance)


def generate_study(params: SimParams, seed=None) -> tuple[SimDataset, SimDataset, dict]:
    """RCT and observational samples from one simulated population.

    Two disjoint draws of ``n`` units are taken from the ``N``-unit
    population; the RCT keeps the ``S = 1`` rows of the first with a fresh
    Bernoulli(p) assignment, the observational sample keeps the ``S = 0`` rows
    of the second with the population's own treatment. Returns both samples
    and the realized rates.
    """
    rng = np.random.default_rng(params.seed if seed is None else seed)
    pop = generate_population(params, rng)
    draw = rng.permutation(params.N)[: 2 * params.n]
    first, second = draw[: params.n], draw[params.n:]
    rct_idx = first[pop["S"][first] == 1]
    obs_idx = second[pop["S"][second] == 0]
    T_rct = (rng.random(len(rct_idx)) < params.p).astype(float)
    rct = _build(pop, rct_idx, params, T_rct, "rct")
    obs = _build(pop, obs_idx, params, pop["T"][obs_idx], "observational")
    rates = {
        "compliance_rate": float(obs.C.mean()) if len(obs) else math.nan,
        "treatment_rate": float(obs.T.mean()) if len(obs) else math.nan,
        "rct_rate": float(pop["S"].mean()),
        "population_true_effect": _mean_or_nan(pop["b"][(pop["S"] == 0) & (pop["T"] * pop["C"] == 1)]),
    }
    if not len(rct):
        raise DegenerateRunError("RCT draw is empty")
    if not (obs.D == 1).any():
        raise DegenerateRunError("observational draw has no treated units")
    return rct, obs, rates


def _mean_or_nan(x) -> float:
    return float(x.mean()) if len(x) else math.nan


def true_effect(observational: SimDataset) -> float:
    """Mean unit effect over observational units that received treatment."""
    treated = observational.D == 1
    if not treated.any():
        raise DegenerateRunError("no treated observational units")
    return float(observational.b[treated].mean())


# --- pipeline -------------------------------------------------------------

FEATURES = FeatureSpec(covariates=OBSERVED_COVARIATES)


def default_learners() -> list[LearnerSpec]:
    return [LearnerSpec("gradient_boosted_trees", max_depth=3)]


@dataclass(frozen=True)
class PipelineConfig:
    """How each run estimates. ``learners`` is the candidate roster for both
    the compliance and the response models; one candidate means no stacking."""

    learners: tuple[LearnerSpec, ...] = field(default_factory=lambda: tuple(default_learners()))
    compliance_folds: int = 5
    folds: int = 10
    truth: str = "sample"

    def __post_init__(self):
        if self.truth not in ("sample", "population"):
            raise ValueError("truth must be 'sample' or 'population'")


def run_estimators(rct: SimDataset, obs: SimDataset, config: PipelineConfig,
                   seed: int) -> dict[str, float]:
    """PATT-C, PATT and CACE for one generated study."""
    rct_ds, obs_ds = rct.to_dataset(), obs.to_dataset()
    learners = [s.with_seed(seed) for s in config.learners]
    treated = rct_ds.subset((rct_ds.T == 1) & ~np.isnan(rct_ds.C))
    plan = make_cv_plan(len(treated), config.compliance_folds, seed, labels=treated.C)
    cmodel = fit_compliance_model(rct_ds, FEATURES, learners, plan)
    controls = rct_ds.T == 0
    c_hat = np.zeros(len(rct_ds))
    if controls.any():
        c_hat[controls] = predict_control_compliers(cmodel, rct_ds.subset(controls))
    kw = {"folds": config.folds, "seed": seed}
    rmodel = fit_response_model(rct_ds, c_hat, FEATURES, learners, **kw)
    pmodel = fit_patt_model(rct_ds, FEATURES, learners, **kw)
    return {
        "PATT-C": estimate_pattc(rmodel, obs_ds).estimate,
        "PATT": estimate_pattc(pmodel, obs_ds).estimate,
        "CACE": estimate_cace(rct_ds).estimate,
    }


@dataclass
class SimResult:
    params: SimParams
    cell: int = 0
    runs: pd.DataFrame = field(default_factory=pd.DataFrame, repr=False)
    rmse: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)
    n_failed: int = 0
    error: str | None = None

    @property
    def missing(self) -> bool:
        return not self.rmse

    def row(self) -> dict:
        """Wide summary: one row per cell."""
        out = {"cell": self.cell, **{k: getattr(self.params, k) for k in PARAM_NAMES}}
        out.update({k: self.rates.get(k, math.nan) for k in RATE_NAMES})
        out["true_effect"] = self.rates.get("true_effect", math.nan)
        for est in SIM_ESTIMATORS:
            out[f"rmse_{est}"] = self.rmse.get(est, math.nan)
        out["runs_ok"] = len(self.runs)
        out["runs_failed"] = self.n_failed
        out["error"] = self.error or ""
        return out


def rmse(estimates, truth) -> float:
    e = np.asarray(estimates, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean(e**2)))


def run_seed(base: int, *path: int) -> int:
    return int(np.random.SeedSequence([base, *path]).generate_state(1)[0])


def run_cell(params: SimParams, runs: int, config: PipelineConfig | None = None,
             cell: int = 0) -> SimResult:
    """Repeat generate-then-estimate ``runs`` times and score against the truth.

    Degenerate runs are skipped and counted; if every run is degenerate the
    cell has no RMSE and ``missing`` is true.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    config = config or PipelineConfig()
    rows, rate_rows, failed, last_error = [], [], 0, None
    for r in range(runs):
        seed = run_seed(params.seed, r)
        try:
            rct, obs, rates = generate_study(params, seed)
            truth = true_effect(obs) if config.truth == "sample" else rates["population_true_effect"]
            est = run_estimators(rct, obs, config, seed)
        except (DegenerateRunError, ValueError) as exc:
            failed += 1
            last_error = f"{type(exc).__name__}: {exc}"
            logger.debug("cell %d run %d failed: %s", cell, r, last_error)
            continue
        rate_rows.append({**{k: rates[k] for k in RATE_NAMES}, "true_effect": truth})
        rows.append({"run": r, "seed": seed, "true_effect": truth, **est})
    result = SimResult(params, cell, pd.DataFrame(rows), n_failed=failed, error=last_error)
    if rows:
        runs_df = result.runs
        result.rmse = {k: rmse(runs_df[k], runs_df["true_effect"]) for k in SIM_ESTIMATORS}
        result.rates = pd.DataFrame(rate_rows).mean().to_dict()
        result.error = None
    return result


def draw_grid(values_per_param: int, seed: int) -> dict[str, list[float]]:
    """Seeded standard normal values for each of ``e1..e6``."""
    if values_per_param < 1:
        raise ValueError("values_per_param must be >= 1")
    rng = np.random.default_rng(seed)
    return {k: [float(v) for v in rng.standard_normal(values_per_param)] for k in PARAM_NAMES}


def grid_cells(grid: dict[str, Sequence[float]], base: SimParams, seed: int) -> list[SimParams]:
    """Cartesian product in ``e1..e6`` order; cell ``i`` gets seed ``run_seed(seed, i)``."""
    for k in PARAM_NAMES:
        if not grid.get(k):
            raise ValueError(f"grid values for {k} must be a nonempty list")
    combos = itertools.product(*(grid[k] for k in PARAM_NAMES))
    return [replace(base, **dict(zip(PARAM_NAMES, map(float, vals))), seed=run_seed(seed, i))
            for i, vals in enumerate(combos)]


def _cell_task(args):
    params, runs, config, cell = args
    try:
        return run_cell(params, runs, config, cell)
    except Exception as exc:  # a broken cell must never abort the grid
        logger.exception("cell %d crashed", cell)
        return SimResult(params, cell, error=f"{type(exc).__name__}: {exc}", n_failed=runs)


def run_grid(grid: dict[str, Sequence[float]], runs: int, seed: int, threads: int = 1,
             base: SimParams | None = None, config: PipelineConfig | None = None,
             progress=None) -> list[SimResult]:
    """Run every grid cell; results are ordered by cell index.

    With ``threads > 1`` cells go to a process pool. Each cell's randomness
    depends only on ``(seed, cell index)`` so the outcome does not depend on
    scheduling.
    """
    base = base or SimParams()
    config = config or PipelineConfig()
    tasks = [(p, runs, config, i) for i, p in enumerate(grid_cells(grid, base, seed))]
    results = []
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            for res in pool.map(_cell_task, tasks, chunksize=1):
                results.append(res)
                if progress:
                    progress(res)
    else:
        for t in tasks:
            results.append(_cell_task(t))
            if progress:
                progress(results[-1])
    return sorted(results, key=lambda r: r.cell)


def results_frame(results: Sequence[SimResult]) -> pd.DataFrame:
    return pd.DataFrame([r.row() for r in results])


BIN_EDGES = np.round(np.linspace(0.0, 1.0, 11), 10)


def rate_bin(x) -> np.ndarray:
    """Index of the 10-point bin holding each rate; 1.0 falls in the top bin."""
    x = np.asarray(x, dtype=float)
    idx = np.minimum(np.floor(x * 10 + 1e-9), 9)
    return np.where(np.isnan(x), -1, idx).astype(int)


def summarize_rmse(results: Sequence[SimResult] | pd.DataFrame,
                   binning: Sequence[str] = ("compliance_rate", "rct_rate")) -> pd.DataFrame:
    """Average RMSE per estimator on a 10 x 10 (or 10-bin) grid of realized rates.

    Long format: one row per bin and estimator with columns ``<axis>_low``,
    ``<axis>_high``, ``estimator``, ``mean_rmse`` and ``n_cells``. Every bin is
    emitted; bins with no cells carry ``NaN`` and ``n_cells = 0``.
    """
    frame = results if isinstance(results, pd.DataFrame) else results_frame(results)
    if not len(frame):
        raise ValueError("no results to summarize")
    binning = tuple(binning)
    if not 1 <= len(binning) <= 2:
        raise ValueError("binning takes one or two rate axes")
    frame = frame.assign(**{f"_{a}": rate_bin(frame[a]) for a in binning})
    out = []
    for cell in itertools.product(range(10), repeat=len(binning)):
        mask = np.ones(len(frame), dtype=bool)
        for a, k in zip(binning, cell):
            mask &= frame[f"_{a}"].to_numpy() == k
        for est in SIM_ESTIMATORS:
            vals = frame.loc[mask, f"rmse_{est}"].dropna()
            row = {}
            for a, k in zip(binning, cell):
                row[f"{a}_low"] = BIN_EDGES[k]
                row[f"{a}_high"] = BIN_EDGES[k + 1]
            row.update(estimator=est, mean_rmse=float(vals.mean()) if len(vals) else math.nan,
                       n_cells=int(len(vals)))
            out.append(row)
    return pd.DataFrame(out)


def grand_means(results: Sequence[SimResult] | pd.DataFrame) -> dict[str, float]:
    """Mean RMSE per estimator over all non-missing cells."""
    frame = results if isinstance(results, pd.DataFrame) else results_frame(results)
    return {est: float(frame[f"rmse_{est}"].dropna().mean()) for est in SIM_ESTIMATORS}


def config_digest(*objs) -> str:
    """Stable hash of parameter objects, used to key cached grid results."""
    def norm(o):
        if hasattr(o, "__dataclass_fields__"):
            return {k: norm(v) for k, v in asdict(o).items()}
        if isinstance(o, dict):
            return {str(k): norm(v) for k, v in sorted(o.items())}
        if isinstance(o, (list, tuple)):
            return [norm(v) for v in o]
        return o

    blob = json.dumps([norm(o) for o in objs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
