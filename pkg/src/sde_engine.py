"""
Single-cell parasite dynamics between branching and reinfection events.

The load follows a diffusion with positive compensated jumps,

    dX = g(X) dt + sqrt(2 sigma2(X)) dB + compensated jumps at rate p(X),

integrated with Euler-Maruyama. Jump laws have finite mass and mean, so the
compensator is the explicit drift correction -p(X) * int z pi(dz) and the jumps
arrive at rate p(X) * mass(pi). Loads are clamped at 0 and a load reaching the
explosion threshold becomes +inf for good.

The stepping kernel works on K coupled lanes of M paths at once: lanes share the
Gaussian increments and the jump proposals (accepted by thinning), which is
what the monotone couplings of the spinal module rely on.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from config import CFG
from model import ModelSpec, QuadratureError
from store import write_csv

log = logging.getLogger(__name__)

# |g(x)| dt must stay below this fraction of max(x, 1) within one sub-step
DRIFT_FRACTION = 0.05
MAX_SUBSTEPS = 4096


@dataclass(frozen=True)
class CellLoad:
    x: float
    exploded: bool = False
    explosion_time: float | None = None

    def __post_init__(self):
        if self.exploded != math.isinf(self.x):
            raise ValueError("exploded flag must match an infinite load")


@dataclass
class StepDiagnostics:
    clamps: int = 0
    substeps: int = 0
    escalations: int = 0
    crossings: int = 0

    def as_dict(self) -> dict:
        return {"clamps": self.clamps, "substeps": self.substeps,
                "escalations": self.escalations, "crossings": self.crossings}


def _safe(y):
    return np.where(np.isfinite(y), y, 0.0)


def _clean(rates):
    return np.where(np.isfinite(rates) & (rates > 0), rates, 0.0)


def thinned_events(rates: np.ndarray, dt: float, stream, law=None, *, bound=None, rates_at=None,
                   return_marks: bool = False):
    """
    Shared-proposal Poisson events for K lanes.

    rates has shape (K, M). Proposals arrive at the bound (the lane-maximum rate
    unless a larger bound is given, per path or fixed) and a lane accepts a
    proposal when a shared uniform falls below its own rate over the bound, so
    every event of a lane with smaller rates is also an event of the lanes with
    larger ones.

    With rates_at, the rate is read at the proposal time rather than the left
    point: rates_at(owner, frac) returns the (K, n) rates of the owning paths at
    the fractions frac of the step. It needs a bound, which must dominate every
    rate it returns.

    Returns (counts, sums) of shape (K, M); sums adds up marks drawn from law
    (zeros when law is None). With return_marks, a third item lists the accepted
    marks of path 0 per lane.
    """
    rates = _clean(rates)
    K, M = rates.shape
    top = rates.max(axis=0)
    if bound is not None:
        bound = np.broadcast_to(np.asarray(bound, dtype=float), (M,))
        if np.any(top > bound * (1 + 1e-12)):
            raise ValueError("thinning bound below an event rate")
        top = bound
    elif rates_at is not None:
        raise ValueError("rates_at needs a thinning bound")
    n_prop = stream.poisson(top * dt)
    total = int(n_prop.sum())
    counts = np.zeros((K, M), dtype=np.int64)
    sums = np.zeros((K, M))
    accepted = [np.zeros(0) for _ in range(K)]
    if total == 0:
        return (counts, sums, accepted) if return_marks else (counts, sums)
    owner = np.repeat(np.arange(M), n_prop)
    u = stream.uniform(total)
    if rates_at is None:
        prop = rates[:, owner]
    else:
        prop = _clean(np.asarray(rates_at(owner, stream.uniform(total)), dtype=float))
        if np.any(prop > top[owner] * (1 + 1e-12)):
            raise ValueError("thinning bound below an event rate")
    marks = law.sample(stream.gen, total) if law is not None else np.zeros(total)
    for k in range(K):
        acc = u * top[owner] < prop[k]
        counts[k] = np.bincount(owner[acc], minlength=M)
        sums[k] = np.bincount(owner[acc], weights=marks[acc], minlength=M)
        if return_marks:
            accepted[k] = marks[acc & (owner == 0)]
    return (counts, sums, accepted) if return_marks else (counts, sums)


def substeps_for(Y: np.ndarray, dt: float, models, extra_rate: np.ndarray | None = None) -> int:
    """Sub-step count keeping |g(x)| h < 0.05 max(x, 1) and hazard * h < 0.1 on every lane."""
    need = 1.0
    for k, m in enumerate(models):
        y = Y[k]
        fin = np.isfinite(y)
        if not fin.any():
            continue
        ys = y[fin]
        ratio = np.abs(m.g(ys)) * dt / (DRIFT_FRACTION * np.maximum(ys, 1.0))
        need = max(need, float(np.max(ratio, initial=0.0)))
    if extra_rate is not None and extra_rate.size:
        need = max(need, float(np.max(extra_rate)) * dt / 0.1)
    return int(min(MAX_SUBSTEPS, math.ceil(need)))


def step_envelope(Y: np.ndarray, h: float, models) -> np.ndarray:
    """Predicted size of one flow step per lane: |drift| h + sqrt(2 sigma2 h); 0 on exploded entries."""
    ys = _safe(Y)
    out = np.empty_like(ys)
    for k, m in enumerate(models):
        y = ys[k]
        drift = m.g(y) - m.p(y) * m.jump_compensator()
        out[k] = np.abs(drift) * h + np.sqrt(np.maximum(2.0 * m.sigma2(y), 0.0) * h)
    return np.where(np.isfinite(Y), out, 0.0)


def flow_kernel(Y: np.ndarray, h: float, models, stream, x_explode: float,
                diag: StepDiagnostics | None = None, *, jump_stream=None, jumps_out: list | None = None) -> np.ndarray:
    """
    One Euler-Maruyama step of length h for K coupled lanes (Y has shape (K, M)).
    Exploded entries (+inf) are left untouched. Jumps are drawn from jump_stream
    (default: stream); jumps_out, when given, receives the accepted jump sizes of
    path 0 per lane.
    """
    K, M = Y.shape
    xi = stream.normal(M)
    ys = _safe(Y)
    jump_rates = np.stack([np.where(np.isfinite(Y[k]), m.p(ys[k]) * m.pi.mass, 0.0) for k, m in enumerate(models)])
    js = stream if jump_stream is None else jump_stream
    if jumps_out is not None:
        _, jumps, marks = thinned_events(jump_rates, h, js, models[0].pi, return_marks=True)
        jumps_out.append(marks)
    else:
        _, jumps = thinned_events(jump_rates, h, js, models[0].pi)
    out = np.empty_like(Y)
    for k, m in enumerate(models):
        y = ys[k]
        drift = m.g(y) - m.p(y) * m.jump_compensator()
        diff = np.sqrt(np.maximum(2.0 * m.sigma2(y), 0.0) * h) * xi
        new = y + drift * h + diff + jumps[k]
        neg = new < 0
        if diag is not None:
            diag.clamps += int(np.count_nonzero(neg & np.isfinite(Y[k])))
        new = np.where(neg, 0.0, new)
        new = np.where(np.isnan(new) | (new >= x_explode), np.inf, new)
        out[k] = np.where(np.isfinite(Y[k]), new, np.inf)
    return out


def step_flow(x: CellLoad, dt: float, model: ModelSpec, s, *, x_explode: float | None = None) -> CellLoad:
    """One Euler-Maruyama step of the single-cell SDE; exploded input returns itself."""
    if x.exploded:
        return x
    xe = CFG.X_EXPLODE if x_explode is None else x_explode
    y = flow_kernel(np.array([[x.x]]), dt, [model], s, xe)[0, 0]
    if math.isinf(y):
        return CellLoad(math.inf, True, None)
    return CellLoad(float(y))


@dataclass
class FlowPath:
    times: np.ndarray
    loads: np.ndarray
    explosion_time: float | None = None
    diagnostics: StepDiagnostics = field(default_factory=StepDiagnostics)

    @property
    def exploded(self) -> bool:
        return self.explosion_time is not None

    def end(self) -> CellLoad:
        y = float(self.loads[-1])
        return CellLoad(y, math.isinf(y), self.explosion_time)

    def rows(self):
        for t, y in zip(self.times, self.loads):
            yield float(t), float(y), bool(math.isinf(y))

    def to_csv(self, path):
        return write_csv(path, ["time", "load", "exploded"], self.rows())


def integrate_flow(Y0: np.ndarray, t0: float, t1: float, models, stream, *, dt: float,
                   x_explode: float, on_step=None, diag: StepDiagnostics | None = None):
    """
    Advance K coupled lanes from t0 to t1 on a macro grid of spacing dt, with
    adaptive sub-stepping inside each macro step. on_step(t, Y) is called at every
    macro grid time, including t0. Returns (Y, explosion_times).
    """
    Y = np.array(Y0, dtype=float, copy=True)
    t_explode = np.full(Y.shape, np.nan)
    n_macro = int(math.ceil((t1 - t0) / dt - 1e-9)) if t1 > t0 else 0
    t = t0
    if on_step is not None:
        on_step(t, Y)
    for i in range(n_macro):
        t_next = min(t1, t0 + (i + 1) * dt)
        h_macro = t_next - t
        n_sub = substeps_for(Y, h_macro, models)
        if diag is not None:
            diag.substeps += n_sub
            if n_sub > 1:
                diag.escalations += 1
        h = h_macro / n_sub
        for j in range(n_sub):
            before = np.isfinite(Y)
            Y = flow_kernel(Y, h, models, stream, x_explode, diag)
            newly = before & ~np.isfinite(Y)
            if newly.any():
                t_explode[newly] = t + (j + 1) * h
        t = t_next
        if on_step is not None:
            on_step(t, Y)
        if not np.isfinite(Y).any():
            break
    return Y, t_explode


def simulate_flow(x0: float, t0: float, t1: float, model: ModelSpec, s, *,
                  dt: float | None = None, x_explode: float | None = None) -> FlowPath:
    """Path of the single-cell SDE on [t0, t1]; ends early at explosion."""
    if t1 < t0:
        raise ValueError(f"need t0 <= t1, got t0={t0}, t1={t1}")
    dt = CFG.DT if dt is None else dt
    xe = CFG.X_EXPLODE if x_explode is None else x_explode
    times, loads = [], []

    def record(t, Y):
        if times and math.isinf(loads[-1]):
            return
        times.append(t)
        loads.append(float(Y[0, 0]))

    diag = StepDiagnostics()
    _, t_exp = integrate_flow(np.array([[float(x0)]]), t0, t1, [model], s, dt=dt, x_explode=xe,
                              on_step=record, diag=diag)
    te = float(t_exp[0, 0])
    if math.isfinite(te):
        times[-1] = te
    return FlowPath(np.array(times), np.array(loads), te if math.isfinite(te) else None, diag)


def simulate_flow_ensemble(x0: float, t1: float, model: ModelSpec, s, M: int, *,
                           dt: float | None = None, x_explode: float | None = None) -> np.ndarray:
    """End loads of M independent flow paths started at x0 on [0, t1]."""
    dt = CFG.DT if dt is None else dt
    xe = CFG.X_EXPLODE if x_explode is None else x_explode
    Y, _ = integrate_flow(np.full((1, M), float(x0)), 0.0, t1, [model], s, dt=dt, x_explode=xe)
    return Y[0]


@dataclass(frozen=True)
class ProbeFunction:
    """A twice differentiable test function given with its first two derivatives."""

    name: str
    f: object
    df: object
    d2f: object


def _exp_decay(c: float) -> ProbeFunction:
    return ProbeFunction(
        f"exp:{c:g}",
        lambda x: np.exp(-c * np.asarray(x, dtype=float)),
        lambda x: -c * np.exp(-c * np.asarray(x, dtype=float)),
        lambda x: c * c * np.exp(-c * np.asarray(x, dtype=float)),
    )


PROBE_FUNCTIONS = {
    "one": ProbeFunction("one", lambda x: np.ones_like(np.asarray(x, dtype=float)),
                        lambda x: np.zeros_like(np.asarray(x, dtype=float)),
                        lambda x: np.zeros_like(np.asarray(x, dtype=float))),
    "identity": ProbeFunction("identity", lambda x: np.asarray(x, dtype=float),
                             lambda x: np.ones_like(np.asarray(x, dtype=float)),
                             lambda x: np.zeros_like(np.asarray(x, dtype=float))),
    "square": ProbeFunction("square", lambda x: np.asarray(x, dtype=float) ** 2,
                           lambda x: 2.0 * np.asarray(x, dtype=float),
                           lambda x: np.full_like(np.asarray(x, dtype=float), 2.0)),
}


def probe_function(tag) -> ProbeFunction:
    """Resolve a tag ('one', 'identity', 'square', 'exp:<c>') or a (f, f', f'') triple."""
    if isinstance(tag, ProbeFunction):
        return tag
    if isinstance(tag, tuple) and len(tag) == 3:
        return ProbeFunction("custom", *tag)
    if isinstance(tag, str):
        if tag in PROBE_FUNCTIONS:
            return PROBE_FUNCTIONS[tag]
        if tag.startswith("exp:"):
            return _exp_decay(float(tag.split(":", 1)[1]))
    raise ValueError(f"Unknown test function {tag!r}")


def apply_generator(f, x: float, model: ModelSpec, *, quad_tol: float | None = None) -> float:
    """g f' + sigma2 f'' + p * int (f(x+z) - f(x) - z f'(x)) pi(dz) at a finite load x."""
    if not math.isfinite(x):
        raise ValueError("the generator is evaluated at finite loads only")
    tf = probe_function(f)
    tol = CFG.QUAD_TOL if quad_tol is None else quad_tol
    fx, dfx, d2fx = float(tf.f(x)), float(tf.df(x)), float(tf.d2f(x))
    value = model.g(x) * dfx + model.sigma2(x) * d2fx
    px = model.p(x)
    if px != 0.0 and model.pi.mass != 0.0:
        try:
            jump = model.pi.expect(lambda z: float(tf.f(x + z)) - fx - z * dfx, tol)
        except QuadratureError:
            log.warning("generator jump integral failed at x=%g", x)
            raise
        value += px * model.pi.mass * jump
    return float(value)


@dataclass
class WeakErrorResult:
    estimate: float
    generator: float
    se: float
    z: float

    def as_dict(self) -> dict:
        return {"estimate": self.estimate, "generator": self.generator, "se": self.se, "z": self.z}


def weak_error_check(f, x: float, model: ModelSpec, h: float, M: int, s, *,
                     dt: float | None = None, quad_tol: float | None = None) -> WeakErrorResult:
    """z-score of the finite-difference generator estimate (E[f(X_h)] - f(x)) / h."""
    if h > 0.01:
        raise ValueError(f"weak error check expects a small horizon h <= 0.01, got {h}")
    tf = probe_function(f)
    step = h if dt is None else min(dt, h)
    ends = simulate_flow_ensemble(x, h, model, s, M, dt=step)
    vals = (np.asarray(tf.f(ends), dtype=float) - float(tf.f(x))) / h
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0
    gen = apply_generator(tf, x, model, quad_tol=quad_tol)
    diff = est - gen
    if se == 0.0:
        z = 0.0 if abs(diff) <= 1e-12 * max(1.0, abs(gen)) else math.copysign(math.inf, diff)
    else:
        z = diff / se
    return WeakErrorResult(est, gen, se, float(z))
