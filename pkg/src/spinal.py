"""
The spinal (auxiliary) process and its proof variants.

Y behaves like the load of a uniformly sampled cell: it follows the single-cell
flow, is multiplied by Theta ~ kappa at rate 2b, receives reservoir doses at rate
lambda(Y) and lysis doses at rate r(E[Y_s]). The lysis rate reads the mean-field
curve m(s) = E[Y_s], which is solved here as a fixed point by Picard iteration.

Variants:
    Y               full dynamics, needs a MeanFieldCurve
    Ybar(ybar)      lysis rate frozen at r(ybar)
    Ytilde          no reinfection at all
    Ytildetilde(l)  constant reservoir rate l, no lysis
    Yplus(x1)       Ytildetilde with l = min_{x <= 3 x1} lambda(x) until the path
                    first reaches 3 x1, Ytilde afterwards

All variants run on one engine that advances K coupled lanes of M paths with
shared drivers (Brownian increments B, parasite jumps Q, divisions N, lysis N1,
reservoir N2), each driver on its own child stream.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from config import CFG
from functionals import parse_functional
from model import ModelSpec
from parallel import run_blocks
from sde_engine import StepDiagnostics, _safe, flow_kernel, step_envelope, substeps_for, thinned_events
from store import write_csv

log = logging.getLogger(__name__)

# fraction of exploded paths above which E[Y_s] is reported as +inf
EXPLODED_WEIGHT = 1e-3
COUPLING_EPS = 1e-9
# the reservoir thinning bound covers the load plus this many predicted step sizes
RESERVOIR_ENVELOPES = 3.0

EVENT_KINDS = ("parasite-jump", "division-jump", "reservoir-dose", "lysis-dose")


class SpinalError(Exception):
    pass


@dataclass(frozen=True)
class SpinalVariant:
    tag: str = "Y"
    ybar: float | None = None
    lambda_floor: float | None = None
    x1: float | None = None

    def __post_init__(self):
        if self.tag not in ("Y", "Ybar", "Ytilde", "Ytildetilde", "Yplus"):
            raise SpinalError(f"Unknown spinal variant '{self.tag}'")
        if self.tag == "Ybar" and (self.ybar is None or self.ybar < 0):
            raise SpinalError("Ybar requires ybar >= 0")
        if self.tag == "Ytildetilde" and (self.lambda_floor is None or self.lambda_floor <= 0):
            raise SpinalError("Ytildetilde requires lambda_floor > 0")
        if self.tag == "Yplus" and (self.x1 is None or self.x1 <= 0):
            raise SpinalError("Yplus requires x1 > 0")

    @classmethod
    def parse(cls, text: str) -> "SpinalVariant":
        """'Y', 'Ytilde', 'Ybar:2.5', 'Ytildetilde:0.3', 'Yplus:10'."""
        tag, _, arg = str(text).partition(":")
        if tag == "Ybar":
            return cls(tag, ybar=float(arg))
        if tag == "Ytildetilde":
            return cls(tag, lambda_floor=float(arg))
        if tag == "Yplus":
            return cls(tag, x1=float(arg))
        return cls(tag)

    @property
    def label(self) -> str:
        if self.tag == "Ybar":
            return f"Ybar:{self.ybar:g}"
        if self.tag == "Ytildetilde":
            return f"Ytildetilde:{self.lambda_floor:g}"
        if self.tag == "Yplus":
            return f"Yplus:{self.x1:g}"
        return self.tag


def reservoir_floor(model: ModelSpec, x1: float) -> float:
    """min over [0, 3 x1] of lambda."""
    xs = np.concatenate((np.linspace(0.0, 3.0 * x1, 1001), np.geomspace(1e-9, 3.0 * x1, 200)))
    return float(np.min(model.lam(xs)))


@dataclass
class MeanFieldCurve:
    """t -> m(t) on a grid; m is constant on [t_j, t_{j+1}) at the left node value."""

    grid: np.ndarray
    values: np.ndarray
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0
    note: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.shape != self.values.shape or self.grid.size == 0:
            raise SpinalError("mean-field grid and values must be non-empty and of equal length")
        if np.any(np.diff(self.grid) <= 0):
            raise SpinalError("mean-field grid must be strictly increasing")
        if np.any(self.values < 0):
            raise SpinalError("mean-field values must be non-negative")

    @classmethod
    def constant(cls, value: float, grid) -> "MeanFieldCurve":
        grid = np.asarray(grid, dtype=float)
        return cls(grid, np.full(grid.shape, float(value)), True, 0, 0.0, "constant")

    def __call__(self, t: float) -> float:
        j = int(np.searchsorted(self.grid, t, side="right")) - 1
        return float(self.values[min(max(j, 0), self.values.size - 1)])

    @property
    def exploded(self) -> bool:
        return bool(np.isinf(self.values).any())

    def rows(self):
        for t, v in zip(self.grid, self.values):
            yield float(t), float(v), self.converged, self.iterations, float(self.residual), self.note

    def to_csv(self, path):
        return write_csv(path, ["time", "value", "converged", "iterations", "residual", "note"], self.rows())


@dataclass(frozen=True)
class SpinalEvent:
    kind: str
    time: float
    magnitude: float


@dataclass
class SpinalTrajectory:
    times: np.ndarray
    loads: np.ndarray
    events: list = field(default_factory=list)
    explosion_time: float | None = None
    variant: str = "Y"

    @property
    def exploded(self) -> bool:
        return self.explosion_time is not None

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def to_csv(self, path):
        rows = ((float(t), float(y), bool(math.isinf(y))) for t, y in zip(self.times, self.loads))
        return write_csv(path, ["time", "load", "exploded"], rows)

    def events_to_csv(self, path):
        rows = ((e.time, e.kind, e.magnitude) for e in self.events)
        return write_csv(path, ["time", "kind", "magnitude"], rows)


@dataclass
class Lane:
    variant: SpinalVariant
    model: ModelSpec
    x0: float
    mf: MeanFieldCurve | None = None
    floor: float = 0.0

    def __post_init__(self):
        if self.variant.tag == "Y" and self.mf is None:
            if self.model.r.is_constant():
                # rate does not read the curve; any curve will do
                self.mf = MeanFieldCurve.constant(self.x0, [0.0])
            else:
                raise SpinalError("variant Y needs a mean-field curve (its lysis rate reads r(m(s)))")
        if self.variant.tag == "Ytildetilde":
            self.floor = float(self.variant.lambda_floor)
        elif self.variant.tag == "Yplus":
            self.floor = reservoir_floor(self.model, self.variant.x1)
            if self.floor <= 0:
                raise SpinalError(f"Yplus needs min lambda over [0, 3 x1] > 0, got {self.floor:g}")

    def reservoir_rates(self, y: np.ndarray, switched: np.ndarray) -> np.ndarray:
        tag = self.variant.tag
        if tag in ("Y", "Ybar"):
            return self.model.lam(y)
        if tag == "Ytilde":
            return np.zeros_like(y)
        if tag == "Ytildetilde":
            return np.full_like(y, self.floor)
        return np.where(switched, 0.0, self.floor)

    def reservoir_bound(self, lo: np.ndarray, hi: np.ndarray, switched: np.ndarray) -> np.ndarray:
        """Upper bound of reservoir_rates over loads in [lo, hi]."""
        tag = self.variant.tag
        if tag in ("Y", "Ybar"):
            lam = self.model.lam
            if lam.is_constant():
                return np.full_like(lo, max(lam(0.0), 0.0))
            return lam.bound_on(lo, hi)
        return self.reservoir_rates(lo, switched)

    def reservoir_envelope(self, xs: np.ndarray) -> np.ndarray:
        """Largest reservoir rate the lane can use at load x."""
        tag = self.variant.tag
        if tag in ("Y", "Ybar"):
            return self.model.lam(xs)
        if tag == "Ytilde":
            return np.zeros_like(xs)
        if tag == "Ytildetilde":
            return np.full_like(xs, self.floor)
        return np.where(xs < 3.0 * self.variant.x1, self.floor, 0.0)

    def reservoir_floor_at(self, xs: np.ndarray) -> np.ndarray:
        """Smallest reservoir rate the lane can use at load x."""
        if self.variant.tag == "Yplus":
            return np.zeros_like(xs)
        return self.reservoir_envelope(xs)

    def lysis_rate(self, t: float) -> float:
        tag = self.variant.tag
        if tag == "Y":
            return float(self.model.r(self.mf(t)))
        if tag == "Ybar":
            return float(self.model.r(self.variant.ybar))
        return 0.0


@dataclass
class EnsembleResult:
    times: np.ndarray
    values: np.ndarray        # (K, n_times, M)
    running_max: np.ndarray   # (K, n_times, M)
    final: np.ndarray         # (K, M)
    explosion_time: np.ndarray  # (K, M), nan when not exploded
    counts: dict              # kind -> (K, M); parasite jumps only appear in event logs
    events: list              # per lane event lists (single-path runs only)
    diagnostics: StepDiagnostics


def _record_indices(record_times, T: float, dt: float, n_macro: int) -> dict:
    out = {}
    for i, t in enumerate(record_times):
        if t < -1e-12 or t > T + 1e-9:
            raise SpinalError(f"record time {t} outside [0, {T}]")
        idx = n_macro if abs(t - T) < 1e-12 else min(n_macro, int(round(t / dt)))
        out.setdefault(idx, []).append(i)
    return out


def run_lanes(lanes: list, T: float, stream, M: int, *, dt: float | None = None,
              x_explode: float | None = None, record_times=None, observer=None,
              log_events: bool = False, coupled: bool = False) -> EnsembleResult:
    """
    Advance K lanes of M spinal paths on [0, T] with shared drivers.

    observer(t_left, h, Y_left, Y_pre, Y_new) is called after every sub-step;
    Y_pre is the left limit at t_left + h (flow only), Y_new includes the
    division jumps and doses of the sub-step.
    """
    dt = CFG.DT if dt is None else dt
    xe = CFG.X_EXPLODE if x_explode is None else x_explode
    K = len(lanes)
    models = [ln.model for ln in lanes]
    base = models[0]
    sB, sQ, sN = stream.child("B"), stream.child("Q"), stream.child("N")
    sN1, sN2 = stream.child("N1"), stream.child("N2")
    r_sup = max(float(m.r.limit()) for m in models)
    if not math.isfinite(r_sup):
        raise SpinalError("lysis rate r must be bounded")
    two_b = 2.0 * base.b

    n_macro = int(math.ceil(T / dt - 1e-9)) if T > 0 else 0
    record_times = [T] if record_times is None else list(record_times)
    rec = _record_indices(record_times, T, dt, n_macro)
    values = np.zeros((K, len(record_times), M))
    runmax = np.zeros((K, len(record_times), M))

    Y = np.stack([np.full(M, float(ln.x0)) for ln in lanes])
    running = Y.copy()
    switched = np.zeros((K, M), dtype=bool)
    if any(ln.variant.tag == "Yplus" for ln in lanes):
        for k, ln in enumerate(lanes):
            if ln.variant.tag == "Yplus":
                switched[k] = Y[k] >= 3.0 * ln.variant.x1
    t_explode = np.full((K, M), np.nan)
    counts = {kind: np.zeros((K, M), dtype=np.int64) for kind in EVENT_KINDS[1:]}
    events = [[] for _ in range(K)]
    diag = StepDiagnostics()

    def store(idx):
        for j in rec.get(idx, ()):
            values[:, j, :] = Y
            runmax[:, j, :] = running

    store(0)
    t = 0.0
    for i in range(n_macro):
        t_next = min(T, (i + 1) * dt)
        h_macro = t_next - t
        ys = _safe(Y)
        hazard = np.full(M, two_b)
        for k, ln in enumerate(lanes):
            hazard = hazard + np.where(np.isfinite(Y[k]), ln.reservoir_rates(ys[k], switched[k]), 0.0)
        hazard = hazard + r_sup
        n_sub = substeps_for(Y, h_macro, models, extra_rate=hazard)
        diag.substeps += n_sub
        if n_sub > 1:
            diag.escalations += 1
        h = h_macro / n_sub
        for j in range(n_sub):
            t_left = t + j * h
            Y_left = Y
            fin = np.isfinite(Y_left)
            ys = _safe(Y_left)
            jump_marks = [] if log_events else None
            Y_pre = flow_kernel(Y_left, h, models, sB, xe, diag, jump_stream=sQ, jumps_out=jump_marks)

            # divisions at rate 2b, shared by all lanes
            n_div = sN.poisson(np.full(M, two_b * h))
            total = int(n_div.sum())
            factor = np.ones(M)
            thetas = None
            if total:
                owner = np.repeat(np.arange(M), n_div)
                thetas = base.kappa.sample(sN.gen, total)
                factor = np.exp(np.bincount(owner, weights=np.log(thetas), minlength=M))
            Y_new = Y_pre * factor

            # reservoir rate read at the flow load of the proposal time, thinned
            # against its bound over [load, load + 3 step envelopes] of the sub-step
            pre = _safe(Y_pre)
            lo = np.minimum(ys, pre)
            hi = np.maximum(pre, ys + RESERVOIR_ENVELOPES * step_envelope(Y_left, h, models))
            res_rates = np.stack([
                np.where(fin[k], ln.reservoir_rates(ys[k], switched[k]), 0.0) for k, ln in enumerate(lanes)
            ])
            res_bound = np.stack([
                np.where(fin[k], ln.reservoir_bound(lo[k], hi[k], switched[k]), 0.0) for k, ln in enumerate(lanes)
            ]).max(axis=0).clip(min=0.0)

            def res_at(owner, frac, ys=ys, pre=pre, fin=fin, sw=switched.copy()):
                x = ys[:, owner] + (pre[:, owner] - ys[:, owner]) * frac
                return np.stack([np.where(fin[k, owner], ln.reservoir_rates(x[k], sw[k, owner]), 0.0)
                                 for k, ln in enumerate(lanes)])

            c_res, s_res, m_res = thinned_events(res_rates, h, sN2, base.dose_i, bound=res_bound, rates_at=res_at,
                                                 return_marks=True)
            lys = np.array([ln.lysis_rate(t_left) for ln in lanes])
            lys_rates = np.where(fin, lys[:, None], 0.0)
            c_lys, s_lys, m_lys = thinned_events(lys_rates, h, sN1, base.dose_p, bound=r_sup, return_marks=True)
            Y_new = Y_new + s_res + s_lys
            Y_new = np.where(Y_new >= xe, np.inf, Y_new)

            if coupled and K == 2:
                over = Y_new[0] > Y_new[1] + COUPLING_EPS
                if over.any():
                    diag.crossings += int(np.count_nonzero(over))
                    Y_new[0] = np.where(over, Y_new[1], Y_new[0])

            counts["division-jump"] += n_div[None, :]
            counts["reservoir-dose"] += c_res
            counts["lysis-dose"] += c_lys
            if log_events:
                _log_substep(events, t_left, h, jump_marks, thetas, m_res, m_lys, fin)
            if observer is not None:
                observer(t_left, h, Y_left, Y_pre, Y_new)

            running = np.maximum(running, np.maximum(Y_pre, Y_new))
            newly = fin & ~np.isfinite(Y_new)
            if newly.any():
                t_explode[newly] = t_left + h
            for k, ln in enumerate(lanes):
                if ln.variant.tag == "Yplus":
                    switched[k] |= Y_new[k] >= 3.0 * ln.variant.x1
            Y = Y_new
        t = t_next
        store(i + 1)

    times = np.array([float(x) for x in record_times])
    return EnsembleResult(times, values, runmax, Y, t_explode, counts, events, diag)


def _log_substep(events, t_left, h, jump_marks, thetas, m_res, m_lys, fin):
    # single-path runs: every lane has M == 1; events of one sub-step are spread
    # over the sub-step so that logged times stay strictly increasing
    for k in range(len(events)):
        if not fin[k, 0]:
            continue
        batch = []
        if jump_marks:
            batch += [("parasite-jump", float(z)) for z in jump_marks[0][k]]
        if thetas is not None:
            batch += [("division-jump", float(th)) for th in thetas]
        batch += [("reservoir-dose", float(z)) for z in m_res[k]]
        batch += [("lysis-dose", float(z)) for z in m_lys[k]]
        n = len(batch)
        for i, (kind, mag) in enumerate(batch):
            events[k].append(SpinalEvent(kind, t_left + h * (i + 1) / (n + 1), mag))


def simulate_spinal(variant: SpinalVariant, x0: float, T: float, mf: MeanFieldCurve | None,
                    model: ModelSpec, s, *, dt: float | None = None,
                    x_explode: float | None = None) -> SpinalTrajectory:
    """One spinal path on the macro grid of spacing dt, with its event log."""
    dt = CFG.DT if dt is None else dt
    lane = Lane(variant, model, x0, mf)
    n_macro = int(math.ceil(T / dt - 1e-9)) if T > 0 else 0
    grid = [min(T, i * dt) for i in range(n_macro + 1)]
    res = run_lanes([lane], T, s, 1, dt=dt, x_explode=x_explode, record_times=grid, log_events=True)
    te = float(res.explosion_time[0, 0])
    return SpinalTrajectory(res.times, res.values[0, :, 0], res.events[0],
                            te if math.isfinite(te) else None, variant.label)


def simulate_spinal_ensemble(variant: SpinalVariant, x0: float, T: float, mf: MeanFieldCurve | None,
                             model: ModelSpec, s, M: int, *, dt: float | None = None,
                             x_explode: float | None = None, record_times=None,
                             observer=None) -> EnsembleResult:
    lane = Lane(variant, model, x0, mf)
    return run_lanes([lane], T, s, M, dt=dt, x_explode=x_explode, record_times=record_times, observer=observer)


def _mean_block(stream, n, model, x0, T, mf, grid, dt, x_explode):
    res = simulate_spinal_ensemble(SpinalVariant("Y"), x0, T, mf, model, stream, n, dt=dt,
                                   x_explode=x_explode, record_times=grid)
    vals = res.values[0]
    fin = np.isfinite(vals)
    return np.where(fin, vals, 0.0).sum(axis=1), (~fin).sum(axis=1), n


def spinal_mean(model: ModelSpec, x0: float, T: float, mf: MeanFieldCurve | None, grid, M: int, s, *,
                dt: float | None = None, x_explode: float | None = None, block_size: int | None = None,
                workers: int | None = None) -> tuple:
    """(mean of finite values, exploded fraction) of Y on the grid, reduced block by block."""
    parts = run_blocks(_mean_block, s.master_seed, f"{s.tag}/mean", M, block_size=block_size,
                       workers=workers, args=(model, x0, T, mf, np.asarray(grid), dt, x_explode))
    sums = np.zeros(len(grid))
    exploded = np.zeros(len(grid))
    total = 0
    for part_sum, part_exp, n in parts:
        sums += part_sum
        exploded += part_exp
        total += n
    return sums / total, exploded / total


def solve_mean_field(model: ModelSpec, x0: float, T: float, grid, tol_fp: float, k_max: int, M: int, s, *,
                     dt: float | None = None, x_explode: float | None = None, block_size: int | None = None,
                     workers: int | None = None) -> MeanFieldCurve:
    """
    Picard iteration for m(t) = E[Y_t] with Y driven by r(m(.)).

    Every iteration replays the same driver streams (common random numbers).
    A lysis rate that does not depend on m needs a single pass.
    """
    if not math.isfinite(model.r.limit()):
        raise SpinalError("solve_mean_field needs a bounded lysis rate r")
    if M < 1000:
        raise SpinalError(f"solve_mean_field needs M >= 1000 replicates, got {M}")
    grid = np.asarray(grid if grid is not None else np.arange(0.0, T + 1e-12, 0.05), dtype=float)
    if grid[0] != 0.0 or grid[-1] > T + 1e-9:
        raise SpinalError("mean-field grid must start at 0 and stay within [0, T]")
    m = np.full(grid.shape, float(x0))
    single_pass = model.r.is_constant()
    residual = math.inf
    for k in range(1, max(1, int(k_max)) + 1):
        curve = MeanFieldCurve(grid, m, False, k - 1, residual)
        mean, exploded = spinal_mean(model, x0, T, curve, grid, M, s, dt=dt, x_explode=x_explode,
                                     block_size=block_size, workers=workers)
        hit = np.nonzero(exploded > EXPLODED_WEIGHT)[0]
        if hit.size:
            out = mean.copy()
            out[hit[0]:] = np.inf
            note = (f"explosive regime: exploded weight {exploded[hit[0]]:.3g} at t={grid[hit[0]]:g}; "
                    "curve set to +inf from there, r read at its bound")
            log.warning("mean-field iteration %d aborted: %s", k, note)
            return MeanFieldCurve(grid, out, False, k, math.inf, note)
        residual = float(np.max(np.abs(mean - m)))
        log.debug("Picard iteration %d: residual %.3e", k, residual)
        m = mean
        if single_pass:
            return MeanFieldCurve(grid, m, True, k, 0.0, "lysis rate independent of the mean field")
        if residual <= tol_fp:
            return MeanFieldCurve(grid, m, True, k, residual, "")
    log.warning("mean-field fixed point not reached in %d iterations (residual %.3e)", k_max, residual)
    return MeanFieldCurve(grid, m, False, int(k_max), residual, "iteration budget exhausted")


def _order_precondition(lane_a: Lane, lane_b: Lane, T: float):
    ma, mb = lane_a.model, lane_b.model
    for name in ("sigma2", "p", "r", "pi", "dose_i", "dose_p", "kappa"):
        if getattr(ma, name) != getattr(mb, name):
            raise SpinalError(f"coupled models must share '{name}'")
    if ma.b != mb.b or ma.d != mb.d:
        raise SpinalError("coupled models must share b and d")
    if lane_a.x0 > lane_b.x0:
        raise SpinalError(f"coupling needs x0A <= x0B, got {lane_a.x0} > {lane_b.x0}")
    xs = np.concatenate(([0.0], np.logspace(-6, 12, 361)))
    ga, gb = ma.g(xs), mb.g(xs)
    if np.any(ga > gb + 1e-12 * np.maximum(1.0, np.abs(gb))):
        raise SpinalError("coupling needs gA <= gB pointwise")
    ea = lane_a.reservoir_envelope(xs)
    fb = lane_b.reservoir_floor_at(xs)
    # lambda_A(x) <= lambda_B(y) whenever x <= y
    fb_suffix_min = np.minimum.accumulate(fb[::-1])[::-1]
    if np.any(ea > fb_suffix_min + 1e-12):
        raise SpinalError("coupling needs lambdaA(x) <= lambdaB(y) for all x <= y")
    ts = np.linspace(0.0, T, 201)
    if any(lane_a.lysis_rate(t) > lane_b.lysis_rate(t) + 1e-12 for t in ts):
        raise SpinalError("coupling needs the lysis rate of A below that of B at all times")


@dataclass
class CouplingResult:
    times: np.ndarray
    a: np.ndarray   # (n_times, M)
    b: np.ndarray
    violations: int
    crossings: int
    reservoir_a: np.ndarray
    reservoir_b: np.ndarray


def couple_ensemble(variant_a: SpinalVariant, x0_a: float, model_a: ModelSpec,
                    variant_b: SpinalVariant, x0_b: float, model_b: ModelSpec, T: float, s, M: int, *,
                    mf_a: MeanFieldCurve | None = None, mf_b: MeanFieldCurve | None = None,
                    dt: float | None = None, x_explode: float | None = None, record_times=None) -> CouplingResult:
    """M coupled pairs driven by the same drivers; A stays below B at all grid times."""
    dt = CFG.DT if dt is None else dt
    lane_a = Lane(variant_a, model_a, x0_a, mf_a)
    lane_b = Lane(variant_b, model_b, x0_b, mf_b)
    _order_precondition(lane_a, lane_b, T)
    if record_times is None:
        n_macro = int(math.ceil(T / dt - 1e-9)) if T > 0 else 0
        record_times = [min(T, i * dt) for i in range(n_macro + 1)]
    res = run_lanes([lane_a, lane_b], T, s, M, dt=dt, x_explode=x_explode, record_times=record_times,
                    coupled=True)
    a, b = res.values[0], res.values[1]
    both_inf = np.isinf(a) & np.isinf(b)
    violations = int(np.count_nonzero(~both_inf & (a > b + COUPLING_EPS)))
    if res.diagnostics.crossings:
        log.debug("coupling: %d discretisation crossings merged", res.diagnostics.crossings)
    return CouplingResult(res.times, a, b, violations, res.diagnostics.crossings,
                          res.counts["reservoir-dose"][0], res.counts["reservoir-dose"][1])


def couple(variant_a: SpinalVariant, x0_a: float, model_a: ModelSpec,
           variant_b: SpinalVariant, x0_b: float, model_b: ModelSpec, T: float, s, *,
           mf_a: MeanFieldCurve | None = None, mf_b: MeanFieldCurve | None = None,
           dt: float | None = None, x_explode: float | None = None) -> tuple:
    """A monotone coupled pair of spinal trajectories (A below B)."""
    dt = CFG.DT if dt is None else dt
    lane_a = Lane(variant_a, model_a, x0_a, mf_a)
    lane_b = Lane(variant_b, model_b, x0_b, mf_b)
    _order_precondition(lane_a, lane_b, T)
    n_macro = int(math.ceil(T / dt - 1e-9)) if T > 0 else 0
    grid = [min(T, i * dt) for i in range(n_macro + 1)]
    res = run_lanes([lane_a, lane_b], T, s, 1, dt=dt, x_explode=x_explode, record_times=grid,
                    log_events=True, coupled=True)
    out = []
    for k, v in enumerate((variant_a, variant_b)):
        te = float(res.explosion_time[k, 0])
        out.append(SpinalTrajectory(res.times, res.values[k, :, 0], res.events[k],
                                    te if math.isfinite(te) else None, v.label))
    return tuple(out)


def _expectation_block(stream, n, variant, model, mf, t, functional, dt, x_explode):
    res = simulate_spinal_ensemble(variant, model.x0, t, mf, model, stream, n, dt=dt,
                                   x_explode=x_explode, record_times=[t])
    vals = functional(res.values[0, 0], res.running_max[0, 0])
    return vals


def spinal_expectation(F, variant: SpinalVariant, t: float, model: ModelSpec, mf: MeanFieldCurve | None,
                       M: int, s, *, dt: float | None = None, x_explode: float | None = None,
                       block_size: int | None = None, workers: int | None = None) -> tuple:
    """(estimate, standard error) of E_{x0}[F(Y)] at time t; x0 is model.x0."""
    if M < 100:
        raise SpinalError(f"spinal_expectation needs M >= 100, got {M}")
    functional = parse_functional(F)
    if functional.kind == "one":
        return 1.0, 0.0
    parts = run_blocks(_expectation_block, s.master_seed, f"{s.tag}/spine", M, block_size=block_size,
                       workers=workers, args=(variant, model, mf, t, functional, dt, x_explode))
    vals = np.concatenate(parts)
    if not np.all(np.isfinite(vals)):
        raise SpinalError(f"functional {functional.tag} is infinite on exploded paths")
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), se


def hitting_times(variant: SpinalVariant, x0: float, level: float, direction: str, T: float,
                  model: ModelSpec, mf: MeanFieldCurve | None, M: int, s, *, dt: float | None = None,
                  x_explode: float | None = None) -> np.ndarray:
    """First passage times above ('up') or below ('down') level; +inf if not reached by T."""
    if direction not in ("up", "down"):
        raise SpinalError(f"direction must be 'up' or 'down', got {direction!r}")
    hit = np.full(M, np.inf)
    if (direction == "up" and x0 >= level) or (direction == "down" and x0 <= level):
        return np.zeros(M)

    def observe(t_left, h, Y_left, Y_pre, Y_new):
        y_lo = np.minimum(Y_pre[0], Y_new[0])
        y_hi = np.maximum(Y_pre[0], Y_new[0])
        crossed = (y_hi >= level) if direction == "up" else (y_lo <= level)
        fresh = crossed & np.isinf(hit)
        hit[fresh] = t_left + h

    simulate_spinal_ensemble(variant, x0, T, mf, model, s, M, dt=dt, x_explode=x_explode,
                             record_times=[T], observer=observe)
    return hit
