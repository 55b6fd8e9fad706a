"""
The branching cell population Z_t = sum over living cells of delta_{X^u_t}.

Cells divide at rate b (the load is split theta X / (1 - theta) X between the
two daughters, theta ~ kappa), die at rate d, receive reservoir doses at rate
lambda(X) and lysis doses at rate r(m(t)); between events every load follows the
single-cell flow. Time is discretised with a first-order event scheme: on each
sub-step a cell fires an event with probability rate * h, at most one event per
cell and sub-step (priority death > division > reservoir > lysis; a cell drawing
two or more events re-draws on two half steps).

All replicates of one block are advanced together, their cells stored in flat
arrays tagged with the replicate index.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from config import CFG
from functionals import Functional, parse_functional
from model import ModelSpec
from parallel import run_blocks
from sde_engine import CellLoad, StepDiagnostics, _safe, flow_kernel, substeps_for
from spinal import MeanFieldCurve, SpinalVariant, spinal_expectation
from store import write_csv

log = logging.getLogger(__name__)

EVENT_PRIORITY = ("death", "division", "reservoir-dose", "lysis-dose")
NO_EVENT = -1


class PopulationError(Exception):
    pass


@dataclass(frozen=True, order=True)
class CellLabel:
    """Ulam-Harris word over {0, 1}; the root is the empty word."""

    word: str = ""

    def __post_init__(self):
        if self.word.strip("01"):
            raise PopulationError(f"Invalid cell label {self.word!r}")

    def children(self) -> tuple:
        return CellLabel(self.word + "0"), CellLabel(self.word + "1")

    @property
    def depth(self) -> int:
        return len(self.word)

    def is_ancestor_of(self, other: "CellLabel") -> bool:
        return len(other.word) > len(self.word) and other.word.startswith(self.word)

    def __str__(self):
        return self.word or "root"


@dataclass(frozen=True)
class Caps:
    max_cells: int = 100000

    def __post_init__(self):
        if not (isinstance(self.max_cells, int) and self.max_cells > 0):
            raise PopulationError("caps.max_cells must be a positive integer")

    @classmethod
    def from_config(cls) -> "Caps":
        return cls(int(CFG.MAX_CELLS))


@dataclass
class Population:
    time: float
    living: dict
    capped: bool = False

    @property
    def extinct(self) -> bool:
        return not self.living

    @property
    def size(self) -> int:
        return len(self.living)

    def labels_consistent(self) -> bool:
        words = sorted(label.word for label in self.living)
        return not any(b.startswith(a) for a, b in zip(words, words[1:]))


@dataclass(frozen=True)
class PopulationEvent:
    time: float
    kind: str
    label: str
    magnitude: float
    replicate: int = 0


@dataclass
class PopulationRun:
    snapshots: list
    events: list
    capped: bool = False
    diagnostics: StepDiagnostics = field(default_factory=StepDiagnostics)

    def final(self) -> Population:
        return self.snapshots[-1]

    def snapshots_to_csv(self, path):
        def rows():
            for snap in self.snapshots:
                for label, cell in sorted(snap.living.items()):
                    yield snap.time, str(label), cell.x, cell.exploded
        return write_csv(path, ["time", "label", "load", "exploded"], rows())

    def events_to_csv(self, path):
        rows = ((e.time, e.replicate, e.kind, e.label, e.magnitude) for e in self.events)
        return write_csv(path, ["time", "replicate", "kind", "label", "magnitude"], rows)


def _lysis_level(mf: MeanFieldCurve | None, x0: float, t: float) -> float:
    return x0 if mf is None else mf(t)


class BlockEngine:
    """Cells of n replicates in flat arrays: load, replicate index, running sup."""

    def __init__(self, model: ModelSpec, x0: float, mf: MeanFieldCurve | None, n: int, stream, *,
                 dt: float, x_explode: float, max_cells: int, track_labels: bool = False,
                 log_events: bool = False):
        if mf is None and not model.r.is_constant():
            raise PopulationError("simulate_population needs a solved mean-field curve unless r is constant")
        self.model, self.mf, self.n, self.stream = model, mf, n, stream
        self.dt, self.xe, self.max_cells = dt, x_explode, max_cells
        self.x0 = float(x0)
        self.X = np.full(n, self.x0)
        self.rep = np.arange(n)
        self.runmax = self.X.copy()
        self.capped = np.zeros(n, dtype=bool)
        self.labels = [""] * n if track_labels else None
        self.events = [] if log_events else None
        self.diag = StepDiagnostics()
        self.t = 0.0

    def counts(self) -> np.ndarray:
        return np.bincount(self.rep, minlength=self.n)

    def sums(self, functional: Functional) -> np.ndarray:
        if self.X.size == 0:
            return np.zeros(self.n)
        vals = functional(self.X, self.runmax)
        return np.bincount(self.rep, weights=vals, minlength=self.n)

    def _rates(self, t_left: float) -> np.ndarray:
        m = self.model
        fin = np.isfinite(self.X)
        lam = np.where(fin, m.lam(_safe(self.X)), 0.0)
        lys = float(m.r(_lysis_level(self.mf, self.x0, t_left)))
        N = self.X.size
        return np.stack([np.full(N, m.d), np.full(N, m.b), lam, np.full(N, lys)])

    def _choose(self, rates: np.ndarray, h: float) -> np.ndarray:
        N = rates.shape[1]
        fires = self.stream.uniform(4 * N).reshape(4, N) < rates * h
        n_fire = fires.sum(axis=0)
        ev = np.where(n_fire > 0, np.argmax(fires, axis=0), NO_EVENT)
        multi = np.nonzero(n_fire >= 2)[0]
        if multi.size:
            sub = rates[:, multi] * (h / 2.0)
            first = self.stream.uniform(4 * multi.size).reshape(4, -1) < sub
            second = self.stream.uniform(4 * multi.size).reshape(4, -1) < sub
            pick = np.where(first.any(axis=0), np.argmax(first, axis=0),
                            np.where(second.any(axis=0), np.argmax(second, axis=0), NO_EVENT))
            ev[multi] = pick
            self.diag.escalations += int(multi.size)
        return ev

    def step(self, h: float):
        t_left = self.t
        N = self.X.size
        if N == 0:
            self.t += h
            return
        ev = self._choose(self._rates(t_left), h)
        X = flow_kernel(self.X[None, :], h, [self.model], self.stream, self.xe, self.diag)[0]
        gen = self.stream.gen
        t_ev = t_left + h
        m = self.model

        for kind, law in ((2, m.dose_i), (3, m.dose_p)):
            idx = np.nonzero(ev == kind)[0]
            if idx.size:
                doses = law.sample(gen, idx.size)
                X[idx] = X[idx] + doses
                self._log(t_ev, EVENT_PRIORITY[kind], idx, doses)
        X = np.where(X >= self.xe, np.inf, X)
        runmax = np.maximum(self.runmax, X)
        dead = np.nonzero(ev == 0)[0]
        if dead.size:
            self._log(t_ev, "death", dead, X[dead])
        div = np.nonzero(ev == 1)[0]
        child1 = np.zeros(0)
        if div.size:
            theta = m.kappa.sample(gen, div.size)
            parent = X[div]
            X[div] = theta * parent
            child1 = (1.0 - theta) * parent
            self._log(t_ev, "division", div, theta)

        keep = ev != 0
        if self.labels is not None:
            new_labels = [self.labels[i] + "1" for i in div]
            for i in div:
                self.labels[i] = self.labels[i] + "0"
            self.labels = [lab for lab, k in zip(self.labels, keep) if k] + new_labels
        self.X = np.concatenate((X[keep], child1))
        self.rep = np.concatenate((self.rep[keep], self.rep[div]))
        self.runmax = np.concatenate((runmax[keep], runmax[div]))
        self.t = t_ev
        self._enforce_cap()

    def _log(self, t, kind, idx, magnitudes):
        if self.events is None:
            return
        for i, mag in zip(idx, magnitudes):
            label = self.labels[i] if self.labels is not None else ""
            self.events.append(PopulationEvent(t, kind, str(CellLabel(label)), float(mag), int(self.rep[i])))

    def _enforce_cap(self):
        over = (self.counts() > self.max_cells) & ~self.capped
        if not over.any():
            return
        log.warning("population cap of %d cells exceeded in %d replicate(s) at t=%.4g; replicate stopped",
                    self.max_cells, int(over.sum()), self.t)
        self.capped |= over
        keep = ~self.capped[self.rep]
        self.X, self.rep, self.runmax = self.X[keep], self.rep[keep], self.runmax[keep]
        if self.labels is not None:
            self.labels = [lab for lab, k in zip(self.labels, keep) if k]

    def advance(self, t_end: float):
        """Run macro steps of size dt (with sub-steps) until t_end."""
        n_macro = int(math.ceil((t_end - self.t) / self.dt - 1e-9)) if t_end > self.t else 0
        start = self.t
        for i in range(n_macro):
            t_next = min(t_end, start + (i + 1) * self.dt)
            h_macro = t_next - self.t
            if self.X.size == 0:
                self.t = t_next
                continue
            hazard = self._rates(self.t).sum(axis=0)
            n_sub = substeps_for(self.X[None, :], h_macro, [self.model], extra_rate=hazard)
            self.diag.substeps += n_sub
            h = h_macro / n_sub
            for _ in range(n_sub):
                self.step(h)
            self.t = t_next

    def snapshot(self) -> Population:
        if self.labels is None:
            raise PopulationError("snapshots need an engine that tracks labels")
        living = {CellLabel(lab): CellLoad(float(x), math.isinf(x)) for lab, x, r in
                  zip(self.labels, self.X, self.rep) if r == 0}
        return Population(self.t, living, bool(self.capped[0]))


def simulate_population(model: ModelSpec, x0: float, T: float, mf: MeanFieldCurve | None, s,
                        caps: Caps | None = None, *, snapshot_times=None, dt: float | None = None,
                        x_explode: float | None = None) -> PopulationRun:
    """One replicate of the population on [0, T] with labelled snapshots and its event log."""
    if T < 0:
        raise PopulationError(f"T must be >= 0, got {T}")
    caps = caps or Caps.from_config()
    eng = BlockEngine(model, x0, mf, 1, s, dt=CFG.DT if dt is None else dt,
                      x_explode=CFG.X_EXPLODE if x_explode is None else x_explode,
                      max_cells=caps.max_cells, track_labels=True, log_events=True)
    times = sorted(set([0.0, T] if snapshot_times is None else list(snapshot_times) + [T]))
    snaps = []
    for t in times:
        eng.advance(t)
        snaps.append(eng.snapshot())
    return PopulationRun(snaps, eng.events, bool(eng.capped[0]), eng.diag)


def _population_block(stream, n, model, x0, mf, times, functionals, dt, x_explode, max_cells):
    eng = BlockEngine(model, x0, mf, n, stream, dt=dt, x_explode=x_explode, max_cells=max_cells)
    n_cells = np.zeros((len(times), n))
    sums = np.zeros((len(functionals), len(times), n))
    for j, t in enumerate(times):
        eng.advance(t)
        n_cells[j] = eng.counts()
        for i, f in enumerate(functionals):
            sums[i, j] = eng.sums(f)
        n_cells[j, eng.capped] = np.nan
        sums[:, j, eng.capped] = np.nan
    return n_cells, sums, eng.capped.copy()


@dataclass
class PopulationSample:
    times: np.ndarray
    functionals: list
    n_cells: np.ndarray   # (n_times, M), nan on capped replicates
    sums: np.ndarray      # (n_functionals, n_times, M)
    capped: int

    @property
    def replicates(self) -> int:
        return self.n_cells.shape[1]


def sample_population(model: ModelSpec, x0: float, mf: MeanFieldCurve | None, times, functionals, M: int, s, *,
                      dt: float | None = None, x_explode: float | None = None, max_cells: int | None = None,
                      block_size: int | None = None, workers: int | None = None) -> PopulationSample:
    """N_t and per-functional sums over the living cells at the given times, for M replicates."""
    times = np.asarray(sorted(float(t) for t in times))
    fs = [parse_functional(f) for f in functionals]
    parts = run_blocks(_population_block, s.master_seed, f"{s.tag}/population", M, block_size=block_size,
                       workers=workers,
                       args=(model, x0, mf, times, fs, CFG.DT if dt is None else dt,
                             CFG.X_EXPLODE if x_explode is None else x_explode,
                             int(max_cells or CFG.MAX_CELLS)))
    n_cells = np.concatenate([p[0] for p in parts], axis=1)
    sums = np.concatenate([p[1] for p in parts], axis=2)
    capped = int(sum(int(p[2].sum()) for p in parts))
    if capped:
        log.warning("%d of %d replicates hit the population cap", capped, M)
    return PopulationSample(times, fs, n_cells, sums, capped)


def _alpha_beta(b: float, d: float, t: float) -> tuple:
    if b <= 0 or d < 0:
        raise PopulationError(f"need b > 0 and d >= 0, got b={b}, d={d}")
    if b == d:
        raise PopulationError("the birth-death law is only provided for b != d")
    if t < 0:
        raise PopulationError(f"t must be >= 0, got {t}")
    rate = (b - d) * t
    if rate > 700.0:
        return d / b, 1.0
    e = math.expm1(rate)
    den = b * e + b - d
    return d * e / den, b * e / den


def birth_death_pmf(b: float, d: float, t: float, n: int) -> float:
    """P(N_t = n) for the linear birth-death process started from one cell."""
    if n < 0:
        raise PopulationError(f"n must be >= 0, got {n}")
    if t == 0:
        return 1.0 if n == 1 else 0.0
    alpha, beta = _alpha_beta(b, d, t)
    if n == 0:
        return alpha
    return (1.0 - alpha) * (1.0 - beta) * beta ** (n - 1)


def survival_probability(b: float, d: float, t: float) -> float:
    return 1.0 - _alpha_beta(b, d, t)[0]


def mean_cells(b: float, d: float, t: float) -> float:
    return math.exp((b - d) * t)


def sample_N(b: float, d: float, t: float, s, size: int | None = None):
    """Exact draw(s) of N_t from the alpha / geometric(beta) mixture."""
    n = 1 if size is None else int(size)
    if t == 0:
        out = np.ones(n, dtype=np.int64)
    else:
        alpha, beta = _alpha_beta(b, d, t)
        u = s.uniform(n)
        if beta >= 1.0:
            raise PopulationError(f"N_t is too large to sample at t={t}")
        alive = s.gen.geometric(1.0 - beta, n) if beta > 0 else np.ones(n, dtype=np.int64)
        out = np.where(u < alpha, 0, alive)
    return int(out[0]) if size is None else out


def _z(diff: float, se: float) -> float:
    if se == 0.0:
        return 0.0 if abs(diff) <= 1e-12 else math.copysign(math.inf, diff)
    return diff / se


@dataclass
class ManyToOneResult:
    functional: str
    t: float
    lhs: float
    rhs: float
    se_lhs: float
    se_rhs: float
    z: float

    def as_dict(self) -> dict:
        return {"functional": self.functional, "t": self.t, "lhs": self.lhs, "rhs": self.rhs,
                "se_lhs": self.se_lhs, "se_rhs": self.se_rhs, "z": self.z}


def many_to_one_check(F, t: float, model: ModelSpec, x0: float, mf: MeanFieldCurve | None, M_pop: int,
                      M_spine: int, s, *, dt: float | None = None, x_explode: float | None = None,
                      block_size: int | None = None, workers: int | None = None) -> ManyToOneResult:
    """Compare e^{-(b-d)t} E[sum_u F(X^u_t)] with E[F(Y_t)]."""
    functional = parse_functional(F)
    if not functional.bounded:
        growth = (model.g, model.sigma2, model.p, model.lam)
        if not all(f.at_most_linear() for f in growth):
            raise PopulationError("F=identity needs an explosion-free model (at most linear coefficients)")
    sample = sample_population(model, x0, mf, [t], [functional], M_pop, s.child("lhs"), dt=dt,
                               x_explode=x_explode, block_size=block_size, workers=workers)
    if sample.capped:
        raise PopulationError(f"{sample.capped} population replicate(s) hit the cap; raise max_cells")
    vals = sample.sums[0, 0] * math.exp(-(model.b - model.d) * t)
    if not np.all(np.isfinite(vals)):
        raise PopulationError(f"functional {functional.tag} is infinite on exploded cells")
    lhs = float(vals.mean())
    se_l = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    rhs, se_r = spinal_expectation(functional, SpinalVariant("Y"), t, model.with_(x0=x0), mf, M_spine,
                                   s.child("rhs"), dt=dt, x_explode=x_explode, block_size=block_size,
                                   workers=workers)
    z = _z(lhs - rhs, math.sqrt(se_l ** 2 + se_r ** 2))
    log.info("many-to-one %s at t=%g: lhs=%.5g rhs=%.5g z=%.3f", functional.tag, t, lhs, rhs, z)
    return ManyToOneResult(functional.tag, float(t), lhs, rhs, se_l, se_r, float(z))


@dataclass
class TrendResult:
    direction: str
    z_scores: list
    threshold: float
    monotone: bool
    significant: bool

    def as_dict(self) -> dict:
        return {"direction": self.direction, "z_scores": self.z_scores, "threshold": self.threshold,
                "monotone": self.monotone, "significant": self.significant}


def trend_test(estimates, direction: str = "decreasing", alpha: float = 0.05) -> TrendResult:
    """
    One-sided monotone trend check over a sequence of (mean, se) estimates.

    monotone: no consecutive pair moves against the direction at the
    Bonferroni-adjusted level alpha / (n - 1). significant: first vs last moves
    in the direction at level alpha.
    """
    if direction not in ("decreasing", "increasing"):
        raise PopulationError(f"direction must be 'decreasing' or 'increasing', got {direction!r}")
    if len(estimates) < 2:
        raise PopulationError("a trend needs at least two estimates")
    sign = 1.0 if direction == "decreasing" else -1.0
    pairs = len(estimates) - 1
    threshold = float(stats.norm.ppf(1.0 - alpha / pairs))
    zs = []
    for (m0, s0), (m1, s1) in zip(estimates, estimates[1:]):
        zs.append(_z(sign * (m0 - m1), math.sqrt(s0 ** 2 + s1 ** 2)))
    (mf_, sf), (ml, sl) = estimates[0], estimates[-1]
    z_all = _z(sign * (mf_ - ml), math.sqrt(sf ** 2 + sl ** 2))
    return TrendResult(direction, [float(z) for z in zs], threshold,
                       all(z > -threshold for z in zs), z_all > float(stats.norm.ppf(1.0 - alpha)))


@dataclass
class EnvelopeFit:
    C: float
    k_fit: float
    k_check: float
    bound: float
    estimate: float
    se: float
    passed: bool

    def as_dict(self) -> dict:
        return {"C": self.C, "k_fit": self.k_fit, "k_check": self.k_check, "bound": self.bound,
                "estimate": self.estimate, "se": self.se, "passed": self.passed}


@dataclass
class SurvivalStats:
    times: np.ndarray
    ks: list
    indicators: list
    replicates: int
    capped: int
    survival: dict = field(default_factory=dict)     # t -> (mean, se) of 1{N_t >= 1}
    estimates: dict = field(default_factory=dict)    # (indicator, K, t) -> (mean, se)
    records: dict = field(default_factory=dict)      # (indicator, K) -> (n_times, M) per-replicate ratios
    n_cells: np.ndarray | None = None

    def estimate(self, indicator: str, K: float, t: float | None = None) -> tuple:
        t = float(self.times[-1] if t is None else t)
        return self.estimates[(indicator, float(K), t)]

    def envelope(self, indicator: str = "ge", k_fit: float | None = None, k_check: float | None = None,
                 t: float | None = None) -> EnvelopeFit:
        """C fitted as estimate(k_fit) * sqrt(k_fit); checked at k_check against C / sqrt(k_check) + 4 SE."""
        k_fit = float(self.ks[0] if k_fit is None else k_fit)
        k_check = float(self.ks[-1] if k_check is None else k_check)
        m_fit, _ = self.estimate(indicator, k_fit, t)
        C = m_fit * math.sqrt(k_fit)
        m, se = self.estimate(indicator, k_check, t)
        bound = C / math.sqrt(k_check)
        return EnvelopeFit(C, k_fit, k_check, bound, m, se, m <= bound + 4.0 * se)

    def trend(self, indicator: str, K: float, direction: str = "decreasing", alpha: float = 0.05) -> TrendResult:
        return trend_test([self.estimates[(indicator, float(K), float(t))] for t in self.times], direction, alpha)

    def rows(self):
        for (ind, K, t), (m, se) in sorted(self.estimates.items()):
            yield t, ind, K, m, se, self.replicates

    def as_dict(self) -> dict:
        return {
            "replicates": self.replicates,
            "capped": self.capped,
            "survival": [{"t": t, "mean": m, "se": se} for t, (m, se) in sorted(self.survival.items())],
            "estimates": [{"t": t, "indicator": ind, "K": K, "mean": m, "se": se}
                          for (ind, K, t), (m, se) in sorted(self.estimates.items())],
        }


def _mean_se(vals: np.ndarray) -> tuple:
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return math.nan, math.nan
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), se


def survival_fraction_stats(model: ModelSpec, x0: float, mf: MeanFieldCurve | None, t, ks, M: int, s, *,
                            indicators=("ge",), dt: float | None = None, x_explode: float | None = None,
                            max_cells: int | None = None, block_size: int | None = None,
                            workers: int | None = None) -> SurvivalStats:
    """
    Estimates of E[1{N_t >= 1} sum_u 1{...} / N_t] per indicator and level K.

    indicators: 'ge' (X >= K), 'gt' (X > K), 'sup_le' (sup over the ancestral
    path <= K), 'finite' (X < inf; K ignored). Extinct replicates contribute 0.
    """
    if M < 1000:
        raise PopulationError(f"survival_fraction_stats needs M >= 1000 replicates, got {M}")
    times = [float(t)] if np.isscalar(t) else [float(x) for x in t]
    ks = [float(k) for k in ks]
    keys, functionals = [], []
    for ind in indicators:
        if ind not in ("ge", "gt", "sup_le", "finite"):
            raise PopulationError(f"Unknown indicator '{ind}'")
        for K in ([0.0] if ind == "finite" else ks):
            keys.append((ind, K))
            functionals.append(Functional(ind, K))
    sample = sample_population(model, x0, mf, times, functionals, M, s, dt=dt, x_explode=x_explode,
                               max_cells=max_cells, block_size=block_size, workers=workers)
    out = SurvivalStats(sample.times, ks, list(indicators), M, sample.capped, n_cells=sample.n_cells)
    alive = sample.n_cells >= 1
    for j, tj in enumerate(sample.times):
        surv = np.where(np.isnan(sample.n_cells[j]), np.nan, alive[j].astype(float))
        out.survival[float(tj)] = _mean_se(surv)
    for i, key in enumerate(keys):
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(alive, sample.sums[i] / np.where(alive, sample.n_cells, 1.0), 0.0)
        ratio = np.where(np.isnan(sample.n_cells), np.nan, ratio)
        out.records[key] = ratio
        for j, tj in enumerate(sample.times):
            out.estimates[(key[0], key[1], float(tj))] = _mean_se(ratio[j])
    return out
