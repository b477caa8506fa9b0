"""Monte Carlo study of the estimators under a Copas-type selection process.

Each replication draws ``total_studies`` two-arm trials with binary outcomes,
decides publication through a latent propensity correlated with the observed
effect, and applies every estimator to the result. Replications own
independent random streams, so they can run in any order or in parallel.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import copas_sens, registry_mle, remeta
from .dataset import MetaDataset, StudyRecord, two_by_two_effect
from .numkit import norm_quantile

__all__ = [
    "METHODS",
    "ScenarioConfig",
    "RngStream",
    "SimStudy",
    "MethodResult",
    "ReplicationResult",
    "MethodSummary",
    "ScenarioSummary",
    "solve_alphas",
    "draw_selection",
    "gen_study",
    "gen_meta",
    "run_replication",
    "run_scenario",
    "summarize",
    "read_config",
    "worker_cap",
]

METHODS = ("REML", "REML.KnHa", "Copas", "MLE(N)", "MLE(T)", "MLE(SE#)")
N_MIN = 20
P_CTL_RANGE = (0.2, 0.9)
LOGN_MEAN, LOGN_SD = 5.0, 1.0
MAX_ALLOCATION_TRIES = 100
MAX_REGENERATIONS = 1000
THREADS_ENV = "META_BIAS_THREADS"


def solve_alphas(p20: float, p500: float) -> Tuple[float, float]:
    """Selection parameters giving publication probabilities p20 at n = 20 and p500 at n = 500."""
    for name, p in (("p20", p20), ("p500", p500)):
        if not 0.0 < p < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {p!r}")
    q20, q500 = norm_quantile(p20), norm_quantile(p500)
    r20, r500 = math.sqrt(20.0), math.sqrt(500.0)
    a1 = (q500 - q20) / (r500 - r20)
    a0 = q20 - a1 * r20
    return a0, a1


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario.

    Give either ``alphas`` directly or ``anchors`` = (p20, p500), the
    publication probabilities at n = 20 and n = 500.
    """

    theta: float = -0.25
    tau: float = 0.05
    rho: float = -0.8
    alphas: Optional[Tuple[float, float]] = None
    anchors: Optional[Tuple[float, float]] = (0.1, 0.99)
    total_studies: int = 50
    replications: int = 1000
    seed: int = 20240101
    ci_level: float = 0.95

    def __post_init__(self):
        if self.alphas is not None:
            object.__setattr__(self, "alphas", (float(self.alphas[0]), float(self.alphas[1])))
            object.__setattr__(self, "anchors", None)
        elif self.anchors is not None:
            object.__setattr__(self, "anchors", (float(self.anchors[0]), float(self.anchors[1])))
            solve_alphas(*self.anchors)
        else:
            raise ValueError("give either alphas or anchors")
        if not math.isfinite(self.theta):
            raise ValueError("theta must be finite")
        if not (self.tau >= 0.0 and math.isfinite(self.tau)):
            raise ValueError(f"tau must be a finite non-negative number, got {self.tau!r}")
        if not abs(self.rho) < 1.0:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho!r}")
        if int(self.total_studies) != self.total_studies or self.total_studies < 2:
            raise ValueError("total_studies must be an integer >= 2")
        if int(self.replications) != self.replications or self.replications < 1:
            raise ValueError("replications must be an integer >= 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")
        object.__setattr__(self, "total_studies", int(self.total_studies))
        object.__setattr__(self, "replications", int(self.replications))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def selection(self) -> Tuple[float, float]:
        """(alpha0, alpha1) after resolving anchors."""
        return self.alphas if self.alphas is not None else solve_alphas(*self.anchors)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "ScenarioConfig":
        """Build from string or numeric values keyed by field name.

        ``p20``/``p500`` or ``alpha0``/``alpha1`` may be given instead of the
        tuple fields; ``total`` and ``reps`` are accepted as short names.
        """
        kw: Dict[str, object] = {}
        v = {k.strip().lower(): val for k, val in values.items()}
        aliases = {"total": "total_studies", "reps": "replications", "level": "ci_level"}
        for key, val in list(v.items()):
            key = aliases.get(key, key)
            if key in ("theta", "tau", "rho", "ci_level"):
                kw[key] = float(val)
            elif key in ("total_studies", "replications", "seed"):
                kw[key] = _as_int(val, key)
            elif key in ("p20", "p500", "alpha0", "alpha1"):
                continue
            else:
                raise ValueError(f"unknown scenario key {key!r}")
        if "alpha0" in v or "alpha1" in v:
            if "p20" in v or "p500" in v:
                raise ValueError("give either alpha0/alpha1 or p20/p500, not both")
            kw["alphas"] = (float(v["alpha0"]), float(v["alpha1"]))
        elif "p20" in v or "p500" in v:
            kw["anchors"] = (float(v["p20"]), float(v["p500"]))
        return cls(**kw)


def _as_int(val, key):
    f = float(val)
    if not f.is_integer():
        raise ValueError(f"{key} must be an integer, got {val!r}")
    return int(f)


def read_config(path: Union[str, os.PathLike]) -> ScenarioConfig:
    """Read a flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, val = (part.strip() for part in line.split("=", 1))
            if key.lower() in values:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key.lower()] = val
    return ScenarioConfig.from_mapping(values)


@dataclass(frozen=True)
class RngStream:
    """Independent PCG64 stream identified by (seed, stream_id)."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class SimStudy:
    theta_i: float
    p_ctl: float
    p_trt: float
    n: int
    total_trt: int
    total_ctl: int
    events_trt: int
    events_ctl: int
    yi: float
    sei: float
    y_latent: float
    published: bool

    def to_record(self, study_id: str) -> StudyRecord:
        if self.published:
            return StudyRecord(
                id=study_id, published=True, n=self.n, yi=self.yi, sei=self.sei,
                events_trt=self.events_trt, total_trt=self.total_trt,
                events_ctl=self.events_ctl, total_ctl=self.total_ctl,
            )
        return StudyRecord(id=study_id, published=False, n=self.n)


def draw_selection(y, theta, tau, sigma, u, rho, gen: np.random.Generator):
    """Latent publication propensity given the observed effect.

    Normal with mean ``u + rho sigma (y - theta) / (tau^2 + sigma^2)`` and
    variance ``1 - rho^2 sigma^2 / (tau^2 + sigma^2)``; vectorised.
    """
    y, sigma, u = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, sigma, u)))
    V = tau * tau + sigma * sigma
    mean = u + rho * sigma * (y - theta) / V
    sd = np.sqrt(1.0 - rho * rho * sigma * sigma / V)
    return mean + sd * gen.standard_normal(y.shape)


def _draw_n(gen):
    n = int(round(gen.lognormal(LOGN_MEAN, LOGN_SD)))
    return max(n, N_MIN)


def _allocate(n, gen):
    for _ in range(MAX_ALLOCATION_TRIES):
        n_trt = int(gen.binomial(n, 0.5))
        if 0 < n_trt < n:
            return n_trt, n - n_trt
    raise RuntimeError(f"could not allocate {n} subjects to two non-empty arms")


def _expit(x):
    return 1.0 / (1.0 + math.exp(-x))


def gen_study(config: ScenarioConfig, rng: Union[RngStream, np.random.Generator]) -> SimStudy:
    """Draw one trial and its publication decision.

    An ``RngStream`` is turned into a fresh generator, so repeated calls with
    the same stream return the same study; pass a ``Generator`` to draw a
    sequence.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    a0, a1 = config.selection
    theta_i = float(gen.normal(config.theta, config.tau)) if config.tau > 0 else config.theta
    p_ctl = float(gen.uniform(*P_CTL_RANGE))
    p_trt = _expit(math.log(p_ctl / (1.0 - p_ctl)) + theta_i)
    n = _draw_n(gen)
    n_trt, n_ctl = _allocate(n, gen)
    e_trt = int(gen.binomial(n_trt, p_trt))
    e_ctl = int(gen.binomial(n_ctl, p_ctl))
    yi, sei = two_by_two_effect(e_trt, n_trt, e_ctl, n_ctl)
    u = a0 + a1 * math.sqrt(n)
    y_latent = float(draw_selection(yi, config.theta, config.tau, sei, u, config.rho, gen))
    return SimStudy(
        theta_i=theta_i, p_ctl=p_ctl, p_trt=p_trt, n=n,
        total_trt=n_trt, total_ctl=n_ctl, events_trt=e_trt, events_ctl=e_ctl,
        yi=yi, sei=sei, y_latent=y_latent, published=y_latent > 0.0,
    )


def _gen_meta(config: ScenarioConfig, gen: np.random.Generator) -> Tuple[MetaDataset, int]:
    for redraws in range(MAX_REGENERATIONS):
        studies = [gen_study(config, gen) for _ in range(config.total_studies)]
        pub = [s for s in studies if s.published]
        if len(pub) >= 2:
            unpub = [s for s in studies if not s.published]
            records = [s.to_record(f"P{i + 1}") for i, s in enumerate(pub)]
            records += [s.to_record(f"U{i + 1}") for i, s in enumerate(unpub)]
            return MetaDataset(tuple(records)), redraws
    raise RuntimeError("fewer than 2 published studies in every regeneration attempt")


def gen_meta(config: ScenarioConfig, rng: Union[RngStream, np.random.Generator]) -> MetaDataset:
    """One simulated meta-analysis, published studies first.

    Draws with fewer than 2 published studies are discarded and redrawn.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return _gen_meta(config, gen)[0]


@dataclass(frozen=True)
class MethodResult:
    estimate: float = math.nan
    lower: float = math.nan
    upper: float = math.nan
    converged: bool = False


@dataclass(frozen=True)
class ReplicationResult:
    index: int
    n_published: int
    n_unpublished: int
    redraws: int
    results: Dict[str, MethodResult] = field(default_factory=dict)


def run_replication(config: ScenarioConfig, index: int, methods: Sequence[str] = METHODS) -> ReplicationResult:
    """Generate replication ``index`` and apply the requested methods."""
    data, redraws = _gen_meta(config, RngStream(config.seed, index).generator())
    level = config.ci_level
    out: Dict[str, MethodResult] = {}
    wanted = set(methods)

    reml, se_hk = None, None
    try:
        reml = remeta.fit_random_effects(data, "REML")
        se_hk = remeta.knapp_hartung_se(data.yi, data.sei, reml)
    except (remeta.ConvergenceError, ValueError):
        pass
    if "REML" in wanted:
        if reml is not None:
            out["REML"] = MethodResult(reml.theta_hat, *remeta.ci_normal(reml, level), True)
        else:
            out["REML"] = MethodResult()
    if "REML.KnHa" in wanted:
        if reml is not None and se_hk is not None:
            lo, hi, _ = remeta.ci_knapp_hartung(data, reml, level)
            out["REML.KnHa"] = MethodResult(reml.theta_hat, lo, hi, True)
        else:
            out["REML.KnHa"] = MethodResult()

    if "Copas" in wanted:
        out["Copas"] = _copas(data, level)

    mle_methods = [m for m in ("MLE(N)", "MLE(T)", "MLE(SE#)") if m in wanted]
    if mle_methods:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit = registry_mle.fit_full_mle(data)
        if fit.converged:
            bundle = registry_mle.ci_bundle(fit, se_hk if se_hk is not None else 0.0, level)
            intervals = {"MLE(N)": bundle.normal, "MLE(T)": bundle.t, "MLE(SE#)": bundle.se_sharp}
            for m in mle_methods:
                ok = m != "MLE(SE#)" or se_hk is not None
                out[m] = MethodResult(fit.theta, *intervals[m], ok)
        else:
            for m in mle_methods:
                out[m] = MethodResult(fit.theta, converged=False)
    return ReplicationResult(index, data.n_published, data.n_unpublished, redraws, out)


def _copas(data: MetaDataset, level: float) -> MethodResult:
    if data.n_published < 3:
        return MethodResult()
    try:
        point, _ = copas_sens.select_point(data.published_only())
    except (RuntimeError, ValueError):
        return MethodResult()
    if point is None or not point.converged:
        return MethodResult()
    return MethodResult(point.theta_hat, *point.ci(level), True)


@dataclass(frozen=True)
class MethodSummary:
    ave: float
    sd: float
    cp: float
    loci: float
    noc: int


@dataclass(frozen=True)
class ScenarioSummary:
    """Per-method summaries; a method with no converged replication maps to ``None``."""

    methods: Dict[str, Optional[MethodSummary]]
    replications: int
    truth: float
    redraws: int = 0
    mean_published: float = math.nan
    config: Optional[ScenarioConfig] = None

    def __getitem__(self, method: str) -> Optional[MethodSummary]:
        return self.methods[method]

    def as_dict(self) -> dict:
        return {
            "replications": self.replications,
            "truth": self.truth,
            "redraws": self.redraws,
            "mean_published": self.mean_published,
            "methods": {m: (None if s is None else asdict(s)) for m, s in self.methods.items()},
        }


def _mean(values):
    return math.fsum(values) / len(values)


def summarize(
    results: Iterable[ReplicationResult], truth: float, methods: Optional[Sequence[str]] = None
) -> ScenarioSummary:
    """Aggregate replications; order of ``results`` does not matter.

    Non-converged replications are left out of a method's AVE, SD, CP and
    LOCI and counted only through NOC. SD uses the n - 1 divisor and is NaN
    for a single converged replication.
    """
    results = sorted(results, key=lambda r: r.index)
    if methods is None:
        methods = [m for m in METHODS if any(m in r.results for r in results)]
    out: Dict[str, Optional[MethodSummary]] = {}
    for m in methods:
        ok = [r.results[m] for r in results if m in r.results and r.results[m].converged]
        if not ok:
            out[m] = None
            continue
        est = [x.estimate for x in ok]
        ave = _mean(est)
        sd = math.sqrt(math.fsum((e - ave) ** 2 for e in est) / (len(est) - 1)) if len(est) > 1 else math.nan
        cover = sum(1 for x in ok if x.lower <= truth <= x.upper)
        out[m] = MethodSummary(
            ave=ave,
            sd=sd,
            cp=cover / len(ok),
            loci=_mean([x.upper - x.lower for x in ok]),
            noc=len(ok),
        )
    n = len(results)
    return ScenarioSummary(
        methods=out,
        replications=n,
        truth=truth,
        redraws=sum(r.redraws for r in results),
        mean_published=_mean([r.n_published for r in results]) if n else math.nan,
    )


def worker_cap(requested: Optional[int] = None) -> int:
    """Worker count: ``requested`` (default: CPU count) capped by ``META_BIAS_THREADS``."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    env = os.environ.get(THREADS_ENV, "").strip()
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
        if cap < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        n = min(n, cap)
    return max(1, int(n))


def _run_chunk(args):
    config, indices, methods = args
    return [run_replication(config, i, methods) for i in indices]


def run_scenario(
    config: ScenarioConfig, methods: Sequence[str] = METHODS, workers: Optional[int] = None
) -> ScenarioSummary:
    """Run every replication of ``config`` and summarise.

    Replication ``i`` draws from stream ``(config.seed, i)``, so the summary
    does not depend on the number of workers.
    """
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
    methods = tuple(methods)
    n_workers = min(worker_cap(workers), config.replications)
    indices = list(range(config.replications))
    if n_workers == 1:
        results = _run_chunk((config, indices, methods))
    else:
        chunks = [indices[i::n_workers] for i in range(n_workers)]
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = [r for part in pool.map(_run_chunk, [(config, c, methods) for c in chunks]) for r in part]
    summary = summarize(results, config.theta, methods)
    return replace(summary, config=config)
