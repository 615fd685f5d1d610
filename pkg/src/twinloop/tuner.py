"""Bayesian optimization of observer gains with a Gaussian-process surrogate."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import norm, qmc

if TYPE_CHECKING:
    from .benchmark import BenchGains, BenchModel
    from .observer import GainSet, ObserverSettings
    from .rigidbody import VehicleParams
    from .scenario import TruthRun
    from .twin import TwinConfig

Objective = Callable[[np.ndarray], float]


class AllDivergedError(RuntimeError):
    """Every seed evaluation diverged; the search box is probably wrong."""


@dataclass(frozen=True)
class BOConfig:
    bounds: tuple[tuple[float, float], ...]
    iterations: int = 120
    n_seed: int = 20
    seed: int = 0
    acquisition: str = "ei"
    restarts: int = 3
    candidates: int = 1000
    local_starts: int = 5
    jobs: int = 1
    names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in self.bounds))
        object.__setattr__(self, "names", tuple(self.names))
        if not self.bounds:
            raise ValueError("bounds must not be empty")
        for lo, hi in self.bounds:
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"invalid bound ({lo}, {hi})")
        if self.n_seed < 2:
            raise ValueError("n_seed must be >= 2")
        if self.iterations < self.n_seed:
            raise ValueError("iterations must be >= n_seed")
        if self.acquisition != "ei":
            raise ValueError("only expected improvement ('ei') is implemented")
        if self.names and len(self.names) != len(self.bounds):
            raise ValueError("names and bounds differ in length")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    def to_box(self, unit: np.ndarray) -> np.ndarray:
        return self.lower + np.clip(unit, 0.0, 1.0) * (self.upper - self.lower)

    def to_unit(self, theta: np.ndarray) -> np.ndarray:
        return (np.asarray(theta, dtype=float) - self.lower) / (self.upper - self.lower)


@dataclass
class EvalRecord:
    theta: np.ndarray
    value: float            # value fed to the surrogate (penalty if diverged)
    raw: float              # objective output, nan when diverged
    diverged: bool = False
    info: dict = field(default_factory=dict)


@dataclass
class BOResult:
    best_theta: np.ndarray
    best_value: float
    predicted_theta: np.ndarray
    predicted_value: float
    history: list[EvalRecord]

    @property
    def incumbent(self) -> np.ndarray:
        return np.minimum.accumulate(np.array([r.value for r in self.history]))


# -- Gaussian process -------------------------------------------------------------------------

class GaussianProcess:
    """Zero-mean GP with a squared-exponential ARD kernel on standardized targets."""

    def __init__(self, nugget: float = 1e-10, restarts: int = 3,
                 rng: np.random.Generator | None = None):
        self.nugget = nugget
        self.restarts = restarts
        self.rng = rng or np.random.default_rng(0)
        self.log_ls: np.ndarray | None = None
        self.log_sf = 0.0

    def _kernel(self, a: np.ndarray, b: np.ndarray, log_ls: np.ndarray, log_sf: float) -> np.ndarray:
        ls = np.exp(log_ls)
        d2 = (((a[:, None, :] - b[None, :, :]) / ls) ** 2).sum(-1)
        return np.exp(2 * log_sf - 0.5 * d2)

    def _factor(self, x: np.ndarray, log_ls: np.ndarray, log_sf: float):
        k = self._kernel(x, x, log_ls, log_sf)
        jitter = self.nugget
        for _ in range(8):
            try:
                return cho_factor(k + jitter * np.eye(len(x)), lower=True)
            except np.linalg.LinAlgError:
                jitter *= 100.0
        raise np.linalg.LinAlgError("kernel matrix not positive definite")

    def _nll(self, theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Negative log marginal likelihood and its gradient in the log-parameters."""
        log_ls, log_sf = theta[:-1], theta[-1]
        ls = np.exp(log_ls)
        diff2 = ((x[:, None, :] - x[None, :, :]) / ls) ** 2
        k = np.exp(2 * log_sf - 0.5 * diff2.sum(-1))
        try:
            c = cho_factor(k + self.nugget * np.eye(len(x)), lower=True)
        except np.linalg.LinAlgError:
            return 1e25, np.zeros_like(theta)
        alpha = cho_solve(c, y)
        nll = float(0.5 * y @ alpha + np.log(np.diag(c[0])).sum() + 0.5 * len(y) * math.log(2 * math.pi))
        w = np.outer(alpha, alpha) - cho_solve(c, np.eye(len(x)))
        grad = np.empty_like(theta)
        for d in range(len(log_ls)):
            grad[d] = -0.5 * np.sum(w * k * diff2[:, :, d])
        grad[-1] = -np.sum(w * k)
        return nll, grad

    def fit(self, x: np.ndarray, y: np.ndarray) -> "GaussianProcess":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        self.y_mean = float(y.mean())
        std = float(y.std())
        self.y_std = std if std > 1e-12 * max(1.0, abs(self.y_mean)) else 1.0
        ys = (y - self.y_mean) / self.y_std
        d = x.shape[1]
        lo = np.r_[np.full(d, math.log(1e-2)), math.log(1e-2)]
        hi = np.r_[np.full(d, math.log(1e1)), math.log(1e1)]
        starts = [np.r_[np.full(d, math.log(0.3)), 0.0]]
        if self.log_ls is not None and len(self.log_ls) == d:
            # the previous optimum is usually close after one more observation
            starts[0] = np.clip(np.r_[self.log_ls, self.log_sf], lo, hi)
        starts += [self.rng.uniform(lo, hi) for _ in range(max(0, self.restarts - 1))]
        best = None
        for s in starts:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = minimize(self._nll, s, args=(x, ys), jac=True, method="L-BFGS-B",
                               bounds=list(zip(lo, hi)), options={"maxiter": 200})
            if best is None or res.fun < best.fun:
                best = res
        self.log_ls, self.log_sf = best.x[:-1], float(best.x[-1])
        self.x = x
        self._chol = self._factor(x, self.log_ls, self.log_sf)
        self._alpha = cho_solve(self._chol, ys)
        return self

    def predict(self, xs: np.ndarray, return_std: bool = True):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ks = self._kernel(xs, self.x, self.log_ls, self.log_sf)
        mu = ks @ self._alpha
        mean = self.y_mean + self.y_std * mu
        if not return_std:
            return mean
        v = cho_solve(self._chol, ks.T)
        var = np.exp(2 * self.log_sf) - np.einsum("ij,ji->i", ks, v)
        return mean, self.y_std * np.sqrt(np.maximum(var, 1e-300))


def expected_improvement(mean: np.ndarray, std: np.ndarray, best: float) -> np.ndarray:
    """EI for minimization."""
    std = np.maximum(std, 1e-12)
    z = (best - mean) / std
    return (best - mean) * norm.cdf(z) + std * norm.pdf(z)


def _minimize_in_box(fun: Callable[[np.ndarray], float], starts: np.ndarray) -> tuple[np.ndarray, float]:
    best_x, best_f = None, math.inf
    for s in starts:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = minimize(fun, s, method="L-BFGS-B", bounds=[(0.0, 1.0)] * len(s))
        x = np.clip(res.x, 0.0, 1.0)
        f = fun(x)
        if f < best_f:
            best_x, best_f = x, f
    return best_x, best_f


def _sobol(dim: int, n: int, seed: int) -> np.ndarray:
    eng = qmc.Sobol(dim, scramble=True, seed=seed)
    m = max(1, math.ceil(math.log2(n)))
    return eng.random_base2(m)[:n]


# -- main loop --------------------------------------------------------------------------------

def _evaluate(objective: Objective, theta: np.ndarray) -> tuple[float, dict]:
    try:
        out = objective(theta)
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        return math.nan, {"error": str(exc)}
    info = {}
    if isinstance(out, tuple):
        out, info = out
    return float(out), dict(info)


def bo_minimize(objective: Objective, config: BOConfig) -> BOResult:
    """Minimize ``objective`` over the box with exactly ``config.iterations`` evaluations.

    The objective may raise, or return nan/inf, to flag a diverged rollout; such
    points enter the surrogate at 10x the worst finite value seen so far.
    It may also return ``(value, info_dict)``.
    """
    rng = np.random.default_rng(config.seed)
    lhs = qmc.LatinHypercube(d=config.dim, seed=config.seed)
    seeds_unit = lhs.random(config.n_seed)
    seed_thetas = [config.to_box(u) for u in seeds_unit]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as ex:
            outs = list(ex.map(_evaluate, [objective] * len(seed_thetas), seed_thetas))
    else:
        outs = [_evaluate(objective, th) for th in seed_thetas]
    finite = [v for v, _ in outs if math.isfinite(v)]
    if not finite:
        raise AllDivergedError("all seed evaluations diverged; widen or move the gain bounds")
    worst = max(finite)
    history: list[EvalRecord] = []
    for th, (v, info) in zip(seed_thetas, outs):
        ok = math.isfinite(v)
        history.append(EvalRecord(th, v if ok else _penalty(worst), v if ok else math.nan, not ok, info))

    gp = GaussianProcess(restarts=config.restarts, rng=rng)
    cand_seed = int(rng.integers(2 ** 31))
    for i in range(config.iterations - config.n_seed):
        x = np.array([config.to_unit(r.theta) for r in history])
        y = np.array([r.value for r in history])
        gp.fit(x, y)
        best = float(y.min())

        def neg_ei(u: np.ndarray) -> float:
            m, s = gp.predict(u[None, :])
            return -float(expected_improvement(m, s, best)[0])

        cands = _sobol(config.dim, config.candidates, cand_seed + i)
        m, s = gp.predict(cands)
        ei = expected_improvement(m, s, best)
        order = np.argsort(-ei)[:config.local_starts]
        u_next, _ = _minimize_in_box(neg_ei, cands[order])
        theta = config.to_box(u_next)
        v, info = _evaluate(objective, theta)
        ok = math.isfinite(v)
        if ok:
            worst = max(worst, v)
        history.append(EvalRecord(theta, v if ok else _penalty(worst), v if ok else math.nan, not ok, info))

    x = np.array([config.to_unit(r.theta) for r in history])
    y = np.array([r.value for r in history])
    gp.fit(x, y)
    ib = int(np.argmin(y))
    cands = _sobol(config.dim, config.candidates, cand_seed + 10 ** 6)
    means = gp.predict(cands, return_std=False)
    starts = np.vstack([cands[np.argsort(means)[:config.local_starts]], x[ib][None, :]])
    u_pred, f_pred = _minimize_in_box(lambda u: float(gp.predict(u[None, :], return_std=False)[0]), starts)
    return BOResult(history[ib].theta.copy(), float(y[ib]), config.to_box(u_pred), float(f_pred), history)


def _penalty(worst_finite: float) -> float:
    return 10.0 * worst_finite if worst_finite > 0 else 10.0 * abs(worst_finite) + 1.0


# -- observer objectives ----------------------------------------------------------------------

TIL_THETA = ("k_wheel", "k_ax_vx", "k_ay_vy", "k_wy_wy", "k_wz_wz", "k_ax_dm")
BENCH_THETA = ("k_ax_vx", "k_wz_wz", "k_ax_dm", "k_ay_vy")

# Mass and velocity gains are negative: see the sign discussion in the README.
TIL_BOUNDS: Mapping[str, tuple[float, float]] = {
    "k_wheel": (0.0, 1.5), "k_ax_vx": (-0.1, 0.0), "k_ay_vy": (-0.1, 0.0),
    "k_wy_wy": (0.2, 1.5), "k_wz_wz": (0.2, 1.5), "k_ax_dm": (-20.0, 0.0),
}
BENCH_BOUNDS: Mapping[str, tuple[float, float]] = {
    "k_ax_vx": (-0.1, 0.0), "k_wz_wz": (0.2, 1.5), "k_ax_dm": (-20.0, 0.0), "k_ay_vy": (-0.1, 0.0),
}


def theta_to_dict(theta: Sequence[float], names: Sequence[str]) -> dict[str, float]:
    return {n: float(v) for n, v in zip(names, theta)}


def bounds_for(names: Sequence[str], table: Mapping[str, tuple[float, float]]) -> tuple[tuple[float, float], ...]:
    return tuple(table[n] for n in names)


def til_objective(gains: "GainSet", run: "TruthRun", nominal: "VehicleParams", config: "TwinConfig",
                  settings: "ObserverSettings | None" = None, initial_dm: float = 0.0,
                  dm_true: float = 0.0) -> tuple[float, dict]:
    """Rollout cost of one TiL gain set on a recorded truth run (mass stage only).

    A diverged rollout returns ``inf`` with ``diverged`` set in the info dict.
    """
    from .metrics import tuning_cost
    from .observer import EstimationDivergedError, StageSchedule, run_estimation

    try:
        res = run_estimation(nominal, config, run.u_twin, run.y, run.scenario.fs, gains,
                             StageSchedule.single("mass"), initial=(initial_dm, 0.0, 0.0, 0.0),
                             x0=run.x0, settings=settings)
    except EstimationDivergedError as exc:
        return math.inf, {"diverged": True, "sample": exc.sample}
    dm = res.column("dm")
    j = tuning_cost(run.beta, res.beta, dm_true, dm, run.scenario.fs)
    return j, {"diverged": False, "final_dm": float(dm[-1])}


def bench_objective(gains: "BenchGains", run: "TruthRun", model: "BenchModel",
                    initial_dm: float = 0.0, dm_true: float = 0.0,
                    sign_source: str = "twin") -> tuple[float, dict]:
    from .benchmark import BenchState, run_benchmark
    from .metrics import tuning_cost
    from .observer import EstimationDivergedError

    init = BenchState(float(run.x0[0]), 0.0, 0.0, initial_dm)
    try:
        res = run_benchmark(model, run.u_twin[:, 0], run.y, run.scenario.fs, gains, init, sign_source)
    except EstimationDivergedError as exc:
        return math.inf, {"diverged": True, "sample": exc.sample}
    j = tuning_cost(run.beta, res.beta, dm_true, res.dm, run.scenario.fs)
    return j, {"diverged": False, "final_dm": float(res.dm[-1]),
               "saturation_events": res.saturation_events}


def _til_theta_objective(theta: np.ndarray, run: "TruthRun", nominal: "VehicleParams",
                         config: "TwinConfig", base_gains: "GainSet",
                         settings: "ObserverSettings | None", initial_dm: float,
                         dm_true: float) -> tuple[float, dict]:
    gains = base_gains.with_values(**theta_to_dict(theta, TIL_THETA))
    return til_objective(gains, run, nominal, config, settings, initial_dm, dm_true)


def _bench_theta_objective(theta: np.ndarray, run: "TruthRun", model: "BenchModel",
                           base_gains: "BenchGains", initial_dm: float,
                           dm_true: float) -> tuple[float, dict]:
    from dataclasses import replace

    gains = replace(base_gains, **theta_to_dict(theta, BENCH_THETA))
    return bench_objective(gains, run, model, initial_dm, dm_true)


def make_til_objective(run: "TruthRun", nominal: "VehicleParams", config: "TwinConfig",
                       base_gains: "GainSet", settings: "ObserverSettings | None" = None,
                       initial_dm: float = 0.0, dm_true: float = 0.0) -> Objective:
    """theta (ordered as TIL_THETA) -> (J, info); picklable for the parallel seed phase."""
    return partial(_til_theta_objective, run=run, nominal=nominal, config=config,
                   base_gains=base_gains, settings=settings, initial_dm=initial_dm, dm_true=dm_true)


def make_bench_objective(run: "TruthRun", model: "BenchModel", base_gains: "BenchGains",
                         initial_dm: float = 0.0, dm_true: float = 0.0) -> Objective:
    return partial(_bench_theta_objective, run=run, model=model, base_gains=base_gains,
                   initial_dm=initial_dm, dm_true=dm_true)
