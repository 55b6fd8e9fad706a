"""
Regime criteria: rho, I_a, D(a, x), G_a, membership of a in the admissible set,
the strong/weak tail-growth heuristics and the Monte Carlo checks built on the
spinal process (martingale Z^(a), explosion probability, coming down from
infinity, Markov bound).

Every verdict produced here is a heuristic over a finite grid of loads and is
serialised with that marker.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from config import CFG
from model import FragmentationLaw, JumpSizeLaw, ModelSpec, dose_mean, quad, theta_moment
from spinal import MeanFieldCurve, SpinalVariant, hitting_times, simulate_spinal_ensemble
from store import write_csv, write_json

log = logging.getLogger(__name__)

HEURISTIC = "heuristic over finite grid"
SN_CONSISTENT = "SN-consistent"
LN_CONSISTENT = "LN-consistent"
INCONCLUSIVE = "inconclusive"
SCAN_A_VALUES = (0.25, 0.5, 0.75, 1.5, 2.0, 3.0)
# G_a is tabulated on this many log-spaced loads when it needs quadrature
G_TABLE_POINTS = 513


class CriteriaError(Exception):
    pass


def default_grid() -> np.ndarray:
    return np.logspace(0, 12, 121)


def _tol(quad_tol):
    return CFG.QUAD_TOL if quad_tol is None else quad_tol


def _check_a(a: float):
    if not (math.isfinite(a) and a > 0):
        raise CriteriaError(f"a must be a positive number, got {a}")


def rho(x: float, model: ModelSpec) -> float:
    """E[I] lambda(x) + E[P] r(x) + g(x) - b x."""
    if x < 0:
        raise CriteriaError(f"rho is defined for x >= 0, got {x}")
    return float(dose_mean(model.dose_i) * model.lam(x) + dose_mean(model.dose_p) * model.r(x)
                 + model.g(x) - model.b * x)


def _power_kernel(u, a: float):
    """((1 + u)^(1-a) - 1) / (1 - a), with the a = 1 limit log(1 + u)."""
    u = np.asarray(u, dtype=float)
    if a == 1.0:
        return np.log1p(u)
    return np.expm1((1.0 - a) * np.log1p(u)) / (1.0 - a)


def _law_mean_over(law: JumpSizeLaw, fn, xs: np.ndarray, tol: float) -> np.ndarray:
    """E[fn(Z, x)] for every x in xs under the normalised law."""
    if law.family == "point-mass":
        return np.asarray(fn(law.params[0], xs), dtype=float)
    return np.array([law.expect(lambda z, x=x: float(fn(z, x)), tol) for x in xs])


def _inner_Ia(a: float, u: float, tol: float) -> float:
    return quad(lambda v: (1.0 + u * v) ** (-1.0 - a) * (1.0 - v), 0.0, 1.0, tol, "I_a inner integral")


def I_a(a: float, x: float, pi: JumpSizeLaw, quad_tol: float | None = None) -> float:
    """a x^-2 int z^2 (int_0^1 (1 + z v / x)^(-1-a) (1 - v) dv) pi(dz)."""
    _check_a(a)
    if not x > 0:
        raise CriteriaError(f"I_a needs x > 0, got {x}")
    if pi.mass == 0.0:
        return 0.0
    tol = _tol(quad_tol)
    outer = pi.expect(lambda z: z * z * _inner_Ia(a, z / x, tol), tol)
    return float(a * pi.mass * outer / (x * x))


def _frag_term(a: float, kappa: FragmentationLaw, b: float) -> float:
    """2b (1 - E[Theta^(1-a)]) / (1 - a); 2b E[ln(1/Theta)] at a = 1."""
    if a == 1.0:
        return 2.0 * b * kappa.mean_log_inverse()
    m = theta_moment(kappa, 1.0 - a)
    if not math.isfinite(m):
        raise CriteriaError(f"a={a} is not admissible: E[Theta^(1-a)] is infinite for kappa {kappa.family}")
    return 2.0 * b * (1.0 - m) / (1.0 - a)


def _d_values(a: float, xs: np.ndarray, model: ModelSpec, tol: float) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    val = model.g(xs) / xs - a * model.sigma2(xs) / (xs * xs)
    p = np.asarray(model.p(xs), dtype=float)
    if model.pi.mass != 0.0 and np.any(p != 0):
        ia = np.array([I_a(a, x, model.pi, tol) if pv != 0 else 0.0 for x, pv in zip(xs, p)])
        val = val - p * ia
    lam = np.asarray(model.lam(xs), dtype=float)
    if np.any(lam != 0):
        val = val + lam * _law_mean_over(model.dose_i, lambda z, x: _power_kernel(z / x, a), xs, tol)
    return val


def _lysis_increment(a: float, xs: np.ndarray, law: JumpSizeLaw, tol: float) -> np.ndarray:
    """E[(1 + P/x)^(1-a) - 1]."""
    return _law_mean_over(law, lambda z, x: np.expm1((1.0 - a) * np.log1p(z / x)), xs, tol)


def D(a: float, x: float, model: ModelSpec, quad_tol: float | None = None) -> float:
    """g/x - a sigma2/x^2 - p I_a + lambda E[((1 + I/x)^(1-a) - 1)/(1-a)]."""
    _check_a(a)
    if not x > 0:
        raise CriteriaError(f"D needs x > 0, got {x}")
    return float(_d_values(a, np.array([float(x)]), model, _tol(quad_tol))[0])


def in_A(a: float, kappa: FragmentationLaw) -> bool:
    if not a > 1:
        raise CriteriaError(f"membership in the admissible set is asked for a > 1, got {a}")
    return math.isfinite(theta_moment(kappa, 1.0 - a))


def _admissible(a: float, kappa: FragmentationLaw):
    _check_a(a)
    if a == 1.0 or (a > 1 and not in_A(a, kappa)):
        raise CriteriaError(f"a={a} is outside A u (0,1) for kappa {kappa.family}")


def _g_values(a: float, xs: np.ndarray, r_value: float, model: ModelSpec, tol: float) -> np.ndarray:
    val = (a - 1.0) * (_d_values(a, xs, model, tol) - _frag_term(a, model.kappa, model.b))
    if r_value != 0.0:
        val = val - r_value * _lysis_increment(a, xs, model.dose_p, tol)
    return val


def G_a(a: float, x: float, r_arg: float, model: ModelSpec, quad_tol: float | None = None) -> float:
    """
    (a-1) [D(a,x) - 2b (1 - E[Theta^(1-a)]) / (1-a)] - r(r_arg) E[(1 + P/x)^(1-a) - 1].

    r_arg is the mean-field value at the query time; +inf reads r at its bound.
    """
    _admissible(a, model.kappa)
    if not x > 0:
        raise CriteriaError(f"G_a needs x > 0, got {x}")
    return float(_g_values(a, np.array([float(x)]), float(model.r(r_arg)), model, _tol(quad_tol))[0])


@dataclass
class CriteriaReport:
    grid: np.ndarray
    a: float
    eta: float | None
    verdict: str
    in_A: bool | None
    rho: np.ndarray
    D: np.ndarray
    G: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    marker: str = HEURISTIC

    def as_dict(self) -> dict:
        return {
            "marker": self.marker,
            "verdict": self.verdict,
            "a": self.a,
            "eta": self.eta,
            "in_A": self.in_A,
            "diagnostics": self.diagnostics,
            "checks": self.checks,
            "grid": [float(x) for x in self.grid],
            "rho": [float(v) for v in self.rho],
            "D": [float(v) for v in self.D],
            "G": [float(v) for v in self.G],
        }

    def rows(self):
        for x, rv, dv, gv in zip(self.grid, self.rho, self.D, self.G):
            yield float(x), self.a, float(rv), float(dv), float(gv), self.marker

    def to_json(self, path):
        return write_json(path, self.as_dict())

    def to_csv(self, path):
        return write_csv(path, ["x", "a", "rho", "D", "G", "marker"], self.rows())


def _grid(grid) -> np.ndarray:
    xs = default_grid() if grid is None else np.asarray(sorted(float(x) for x in grid))
    if xs.size < 8 or xs[0] <= 0:
        raise CriteriaError("criteria grid needs at least 8 positive loads")
    if xs[-1] < 1e10:
        raise CriteriaError(f"criteria grid must reach 1e10, got max {xs[-1]:g}")
    return xs


def _tail(xs: np.ndarray) -> np.ndarray:
    """Upper half of the grid in log scale."""
    return xs >= math.sqrt(xs[0] * xs[-1])


def _report(model: ModelSpec, a: float, eta, xs: np.ndarray, tol: float) -> CriteriaReport:
    rho_v = np.array([rho(x, model) for x in xs])
    d_v = _d_values(a, xs, model, tol)
    try:
        g_v = _g_values(a, xs, float(model.r.limit()), model, tol)
        member = in_A(a, model.kappa) if a > 1 else None
    except CriteriaError:
        g_v = np.full(xs.shape, np.nan)
        member = False
    return CriteriaReport(xs, float(a), eta, INCONCLUSIVE, member, rho_v, d_v, g_v)


def check_SN(model: ModelSpec, a: float, grid=None, quad_tol: float | None = None) -> CriteriaReport:
    """
    Tail regression of D(a, x) on ln x; SN-consistent when the slope is not
    significantly positive, i.e. D grows slower than ln x on the grid.
    """
    if not 0 < a < 1:
        raise CriteriaError(f"the SN check takes a in (0, 1), got {a}")
    xs = _grid(grid)
    rep = _report(model, a, None, xs, _tol(quad_tol))
    tail = _tail(xs)
    dt = rep.D[tail]
    if not np.all(np.isfinite(dt)):
        rep.diagnostics = {"note": "D not finite on the tail"}
        return rep
    fit = stats.linregress(np.log(xs[tail]), dt)
    scale = max(1.0, float(np.max(np.abs(dt))))
    slope, se = float(fit.slope), float(fit.stderr)
    consistent = slope <= 2.0 * se + 1e-6 * scale
    rep.diagnostics = {"tail_slope": slope, "tail_slope_se": se, "tail_from": float(xs[tail][0])}
    rep.verdict = SN_CONSISTENT if consistent else INCONCLUSIVE
    log.debug("SN check a=%g: slope %.4g (se %.2g) -> %s", a, slope, se, rep.verdict)
    return rep


def check_LN(model: ModelSpec, a: float, eta: float, grid=None, quad_tol: float | None = None) -> CriteriaReport:
    """D(a, x) >= ln x (ln ln x)^(1+eta) on the upper half of the grid; x0 is where it starts to hold."""
    if not a > 1 or not in_A(a, model.kappa):
        raise CriteriaError(f"the LN check needs a in A (a > 1 with E[Theta^(1-a)] finite), got a={a}")
    if not eta > 0:
        raise CriteriaError(f"eta must be > 0, got {eta}")
    xs = _grid(grid)
    rep = _report(model, a, float(eta), xs, _tol(quad_tol))
    valid = xs > math.e
    lower = np.full(xs.shape, np.inf)
    lx = np.log(xs[valid])
    lower[valid] = lx * np.log(lx) ** (1.0 + eta)
    holds = rep.D >= lower
    # smallest grid point from which the inequality holds up to the end of the grid
    bad = np.nonzero(~holds)[0]
    start = 0 if bad.size == 0 else int(bad[-1]) + 1
    x0 = float(xs[start]) if start < xs.size else math.inf
    consistent = start < xs.size and bool(np.all(holds[_tail(xs)]))
    rep.diagnostics = {"x0": x0, "tail_from": float(xs[_tail(xs)][0]),
                       "min_margin": float(np.min((rep.D - lower)[_tail(xs)]))}
    rep.verdict = LN_CONSISTENT if consistent else INCONCLUSIVE
    log.debug("LN check a=%g eta=%g: x0=%g -> %s", a, eta, x0, rep.verdict)
    return rep


def criteria_scan(model: ModelSpec, grid=None, a_values=SCAN_A_VALUES, eta: float = 0.5,
                  quad_tol: float | None = None) -> CriteriaReport:
    """Run the SN check for a < 1 and the LN check for admissible a > 1; keep the strongest verdict."""
    results = []
    for a in a_values:
        if a == 1.0:
            continue
        if a < 1:
            results.append(check_SN(model, a, grid, quad_tol))
        elif in_A(a, model.kappa):
            results.append(check_LN(model, a, eta, grid, quad_tol))
        else:
            log.info("criteria scan: a=%g skipped (not admissible for kappa %s)", a, model.kappa.family)
    if not results:
        raise CriteriaError("no admissible a in the scan")
    best = next((r for r in results if r.verdict == LN_CONSISTENT), None)
    best = best or next((r for r in results if r.verdict == SN_CONSISTENT), results[0])
    best.checks = [{"a": r.a, "eta": r.eta, "verdict": r.verdict, "diagnostics": r.diagnostics,
                    "marker": HEURISTIC} for r in results]
    return best


def _needs_quadrature(model: ModelSpec) -> bool:
    jumps = model.pi.mass != 0.0 and not (model.p.is_constant() and model.p(1.0) == 0.0)
    reservoir = model.dose_i.family != "point-mass" and not (model.lam.is_constant() and model.lam(1.0) == 0.0)
    lysis = model.dose_p.family != "point-mass" and model.r.limit() != 0.0
    return jumps or reservoir or lysis


def _g_parts(a: float, model: ModelSpec, lo: float, hi: float, tol: float):
    """(core, increment) callables on load arrays: G = core(x) - r(m) * increment(x)."""
    if not _needs_quadrature(model):
        return (lambda y: _g_values(a, y, 0.0, model, tol),
                lambda y: _lysis_increment(a, y, model.dose_p, tol))
    table = np.geomspace(lo, hi, G_TABLE_POINTS)
    log.info("tabulating G_a on %d loads in [%g, %g]", G_TABLE_POINTS, lo, hi)
    core = _g_values(a, table, 0.0, model, tol)
    inc = _lysis_increment(a, table, model.dose_p, tol)
    lt = np.log(table)
    return (lambda y: np.interp(np.log(y), lt, core),
            lambda y: np.interp(np.log(y), lt, inc))


def _mf_value(mf: MeanFieldCurve | None, x0: float, t: float) -> float:
    return x0 if mf is None else mf(t)


def _z(diff: float, se: float, scale: float) -> float:
    if se == 0.0:
        return 0.0 if abs(diff) <= 1e-9 * max(1.0, abs(scale)) else math.copysign(math.inf, diff)
    return diff / se


@dataclass
class MartingaleCheckResult:
    a: float
    corridor: tuple
    t_grid: list
    estimates: list
    ses: list
    z_scores: list
    target: float
    exited: float

    @property
    def max_abs_z(self) -> float:
        return max((abs(z) for z in self.z_scores), default=0.0)

    def rows(self):
        for t, m, se, z in zip(self.t_grid, self.estimates, self.ses, self.z_scores):
            yield t, self.a, m, se, self.target, z

    def to_csv(self, path):
        return write_csv(path, ["t", "a", "estimate", "se", "target", "z"], self.rows())

    def as_dict(self) -> dict:
        return {"a": self.a, "corridor": list(self.corridor), "t_grid": self.t_grid,
                "estimates": self.estimates, "ses": self.ses, "z_scores": self.z_scores,
                "target": self.target, "exited_fraction": self.exited, "max_abs_z": self.max_abs_z}


def martingale_Za_check(a: float, c: float, b_high: float, t_grid, model: ModelSpec, x0: float,
                        mf: MeanFieldCurve | None, M: int, s, *, dt: float | None = None,
                        x_explode: float | None = None, quad_tol: float | None = None) -> MartingaleCheckResult:
    """
    E[Z^(a)_{t ^ T}] with Z^(a) = Y^(1-a) exp(int_0 G_a(x0, Y_s) ds), T the first
    exit of (c, b_high); the integral uses the trapezoid rule on every sub-step
    with the pre- and post-jump values as separate nodes.
    """
    if not 0 < c < x0 < b_high:
        raise CriteriaError(f"corridor must satisfy 0 < c < x0 < b_high, got c={c}, x0={x0}, b_high={b_high}")
    _admissible(a, model.kappa)
    tol = _tol(quad_tol)
    t_grid = sorted(float(t) for t in t_grid)
    if not t_grid or t_grid[0] < 0:
        raise CriteriaError("t_grid must be non-empty and non-negative")
    T = t_grid[-1]
    core, inc = _g_parts(a, model, c, b_high, tol)
    r_const = model.r.is_constant()
    r_fixed = float(model.r(x0))
    target = x0 ** (1.0 - a)
    integral = np.zeros(M)
    alive = np.ones(M, dtype=bool)
    frozen = np.full(M, np.nan)
    values = np.zeros((len(t_grid), M))
    pending = []
    for j, t in enumerate(t_grid):
        if t == 0.0:
            values[j] = target
        else:
            pending.append(j)

    def observe(t_left, h, Y_left, Y_pre, Y_new):
        y_new = Y_new[0]
        if alive.any():
            rv = r_fixed if r_const else float(model.r(_mf_value(mf, x0, t_left)))
            live = np.nonzero(alive)[0]
            y0 = np.clip(Y_left[0, live], c, b_high)
            y1 = np.clip(Y_pre[0, live], c, b_high)
            g0, g1 = core(y0), core(y1)
            if rv != 0.0:
                g0 = g0 - rv * inc(y0)
                g1 = g1 - rv * inc(y1)
            integral[live] += 0.5 * h * (g0 + g1)
            out = live[(y_new[live] <= c) | (y_new[live] >= b_high)]
            if out.size:
                with np.errstate(over="ignore", divide="ignore"):
                    frozen[out] = np.power(y_new[out], 1.0 - a) * np.exp(integral[out])
                alive[out] = False
        t_end = t_left + h
        while pending and t_grid[pending[0]] <= t_end + 0.5 * h:
            j = pending.pop(0)
            with np.errstate(over="ignore", divide="ignore"):
                live_val = np.power(y_new, 1.0 - a) * np.exp(integral)
            values[j] = np.where(alive, live_val, frozen)

    if T > 0:
        simulate_spinal_ensemble(SpinalVariant("Y"), x0, T, mf, model, s, M, dt=dt, x_explode=x_explode,
                                 record_times=[T], observer=observe)
    estimates, ses, zs = [], [], []
    for j, t in enumerate(t_grid):
        v = values[j]
        m = float(v.mean())
        se = float(v.std(ddof=1) / math.sqrt(M)) if (M > 1 and t > 0) else 0.0
        estimates.append(m)
        ses.append(se)
        zs.append(float(_z(m - target, se, target)))
    result = MartingaleCheckResult(float(a), (float(c), float(b_high)), t_grid, estimates, ses, zs, target,
                                   float(1.0 - alive.mean()))
    log.info("martingale check a=%g: max |z| = %.3f", a, result.max_abs_z)
    return result


def explosion_probability(model: ModelSpec, x0: float, T: float, M: int, s, *, mf: MeanFieldCurve | None = None,
                          dt: float | None = None, x_explode: float | None = None) -> tuple:
    """(fraction of spinal paths exploded by T, standard error)."""
    if M < 1000:
        raise CriteriaError(f"explosion_probability needs M >= 1000, got {M}")
    if T == 0:
        return 0.0, 0.0
    res = simulate_spinal_ensemble(SpinalVariant("Y"), x0, T, mf, model, s, M, dt=dt, x_explode=x_explode)
    p = float(np.isinf(res.final[0]).mean())
    return p, math.sqrt(p * (1.0 - p) / M)


@dataclass
class LSchedule:
    value: float
    lower: float
    upper: float
    terms: int

    def as_dict(self) -> dict:
        return {"value": self.value, "lower": self.lower, "upper": self.upper, "terms": self.terms}


def l_schedule(b_frak: float, delta: float, eta: float, tol: float = 1e-8, max_terms: int = 10 ** 8) -> LSchedule:
    """
    sum_{n >= 1} ((n-1) ln(1+delta) + ln ln b)^-(1+eta), summed until the
    integral bracket of the remaining tail is narrower than tol.
    """
    if not eta > 0:
        raise CriteriaError(f"eta must be > 0 (the series diverges otherwise), got {eta}")
    if not delta > 0:
        raise CriteriaError(f"delta must be > 0, got {delta}")
    if not b_frak > math.e:
        raise CriteriaError(f"b_frak must exceed e so that ln ln b > 0, got {b_frak}")
    c = math.log1p(delta)
    L = math.log(math.log(b_frak))
    s = 1.0 + eta

    def tail(n):
        # int_n^inf ((m-1) c + L)^-s dm
        return ((n - 1) * c + L) ** (-eta) / (c * eta)

    partial, n, chunk = 0.0, 0, 4096
    while True:
        idx = np.arange(n + 1, n + chunk + 1, dtype=float)
        partial += float(np.sum(((idx - 1.0) * c + L) ** (-s)))
        n += chunk
        hi, lo = tail(n), tail(n + 1)
        if hi - lo < tol:
            break
        if n >= max_terms:
            raise CriteriaError(f"l_schedule did not reach tol={tol} within {max_terms} terms")
        chunk = min(chunk * 2, 1 << 20)
    return LSchedule(partial + 0.5 * (lo + hi), partial + lo, partial + hi, n)


@dataclass
class ComingDownResult:
    b_frak: float
    horizon: float
    bound: float
    rows: list
    passed: bool

    def as_dict(self) -> dict:
        return {"b_frak": self.b_frak, "horizon": self.horizon, "bound": self.bound,
                "rows": self.rows, "passed": self.passed, "marker": HEURISTIC}


def coming_down_check(model: ModelSpec, x_list, b_frak: float, delta: float, eta: float, a: float, M: int, s, *,
                      dt: float | None = None, x_explode: float | None = None) -> ComingDownResult:
    """P_x(tau^-(b) <= l(b, delta, eta)) against the lower bound exp(-8 b^(-delta (1-a)))."""
    if not (model.r.is_constant() and model.r.limit() == 0.0):
        raise CriteriaError("coming_down_check needs r == 0")
    if not 0 < a < 1:
        raise CriteriaError(f"coming_down_check takes a in (0, 1), got {a}")
    sched = l_schedule(b_frak, delta, eta)
    bound = math.exp(-8.0 * b_frak ** (-delta * (1.0 - a)))
    rows, ok = [], True
    for i, x in enumerate(x_list):
        hits = hitting_times(SpinalVariant("Y"), float(x), b_frak, "down", sched.value, model, None, M,
                             s.child("x", i), dt=dt, x_explode=x_explode)
        p = float(np.mean(hits <= sched.value))
        se = math.sqrt(p * (1.0 - p) / M)
        passed = p + 3.0 * se >= bound
        ok = ok and passed
        rows.append({"x": float(x), "estimate": p, "se": se, "passed": passed})
    return ComingDownResult(float(b_frak), sched.value, bound, rows, ok)


@dataclass
class MarkovBoundResult:
    t: float
    mean: float
    mean_se: float
    rows: list
    passed: bool

    def as_dict(self) -> dict:
        return {"t": self.t, "mean": self.mean, "mean_se": self.mean_se, "rows": self.rows, "passed": self.passed}


def markov_bound_check(model: ModelSpec, t: float, ks, mf: MeanFieldCurve | None, M: int, s, *,
                       variant: SpinalVariant | None = None, dt: float | None = None,
                       x_explode: float | None = None) -> MarkovBoundResult:
    """P(Y_t >= K) <= E[Y_t] / K on a spinal ensemble, per K."""
    res = simulate_spinal_ensemble(variant or SpinalVariant("Y"), model.x0, t, mf, model, s, M, dt=dt,
                                   x_explode=x_explode)
    y = res.final[0]
    if not np.all(np.isfinite(y)):
        raise CriteriaError("markov_bound_check needs an explosion-free ensemble")
    m = float(y.mean())
    se_m = float(y.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0
    rows, ok = [], True
    for K in ks:
        p = float(np.mean(y >= K))
        se_p = math.sqrt(p * (1.0 - p) / M)
        slack = 3.0 * math.sqrt(se_p ** 2 + (se_m / K) ** 2)
        passed = p <= m / K + slack
        ok = ok and passed
        rows.append({"K": float(K), "estimate": p, "se": se_p, "bound": m / K, "passed": passed})
    return MarkovBoundResult(float(t), m, se_m, rows, ok)
