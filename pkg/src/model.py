"""
Parametric model space for the infected cell population.

Every coefficient of the model (growth g, diffusion sigma2, jump rate p,
reservoir rate lambda, lysis rate r) is a member of a closed family of
parametric functions, every jump or dose law a member of a closed family of
finite-mean laws, and the fragmentation law kappa a symmetric law on (0, 1).
Working with closed families keeps the existence/uniqueness assumptions
checkable and gives closed-form moments to the rest of the package.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import integrate, special

from config import CFG

log = logging.getLogger(__name__)

ROLE_G = "growth-g"
ROLE_SIGMA2 = "diffusion-sigma2"
ROLE_P = "jump-rate-p"
ROLE_LAMBDA = "reservoir-rate-lambda"
ROLE_R = "lysis-rate-r"
FUNCTION_ROLES = (ROLE_G, ROLE_SIGMA2, ROLE_P, ROLE_LAMBDA, ROLE_R)

ROLE_PI = "parasite-jump-pi"
ROLE_DOSE_I = "reservoir-dose-I"
ROLE_DOSE_P = "lysis-dose-P"
LAW_ROLES = (ROLE_PI, ROLE_DOSE_I, ROLE_DOSE_P)

FUNCTION_FAMILIES = {
    # family: allowed parameter counts
    "constant": (1,),
    "linear": (1,),
    "affine": (2,),
    "logistic": (2,),
    "power": (2,),
    "saturating-hill": (1, 2, 3),
    "piecewise-linear": None,
    "log-boosted": (1, 2, 3),
}
LAW_FAMILIES = {
    "point-mass": (1,),
    "exponential": (1,),
    "uniform-interval": (2,),
    "truncated-pareto": (3,),
}
FRAGMENTATION_FAMILIES = {
    "beta-symmetric": (1,),
    "uniform01": (0,),
    "point-mass-half": (0,),
}

# Log-spaced probe grid used by the structural checks of validate_model.
_PROBE = np.concatenate(([0.0], np.logspace(-6, 12, 361)))


class ModelError(Exception):
    pass


class QuadratureError(Exception):
    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved tolerance {achieved:.3e})")
        self.achieved = achieved


def quad(fn, lo: float, hi: float, tol: float, what: str = "integral") -> float:
    """scipy quad with a hard failure when the requested tolerance is not met."""
    res = integrate.quad(fn, lo, hi, epsabs=tol, epsrel=tol, limit=400, full_output=1)
    value, err = float(res[0]), float(res[1])
    if not math.isfinite(value):
        raise QuadratureError(f"{what} did not converge to a finite value", err)
    if len(res) > 3 and err > max(tol, tol * abs(value)) * 100:
        raise QuadratureError(f"{what}: {res[3].splitlines()[0]}", err)
    return value


def _params(values, allowed, family: str, kind: str) -> tuple:
    try:
        out = tuple(float(v) for v in (values or ()))
    except (TypeError, ValueError) as e:
        raise ModelError(f"{kind} '{family}': parameters must be numbers, got {values!r}") from e
    if allowed is not None and len(out) not in allowed:
        raise ModelError(f"{kind} '{family}' takes {' or '.join(map(str, allowed))} parameter(s), got {len(out)}")
    if not all(math.isfinite(v) for v in out):
        raise ModelError(f"{kind} '{family}': parameters must be finite, got {out}")
    return out


@dataclass(frozen=True)
class FunctionSpec:
    family: str
    params: tuple
    role: str

    def __post_init__(self):
        if self.family not in FUNCTION_FAMILIES:
            raise ModelError(f"Unknown function family '{self.family}' (known: {', '.join(FUNCTION_FAMILIES)})")
        if self.role not in FUNCTION_ROLES:
            raise ModelError(f"Unknown function role '{self.role}'")
        ps = _params(self.params, FUNCTION_FAMILIES[self.family], self.family, "function family")
        object.__setattr__(self, "params", ps)
        if self.family == "piecewise-linear":
            if len(ps) < 4 or len(ps) % 2:
                raise ModelError("piecewise-linear needs knots as x0, y0, x1, y1, ... (at least two knots)")
            xs = ps[0::2]
            if xs[0] != 0.0 or any(b <= a for a, b in zip(xs, xs[1:])):
                raise ModelError("piecewise-linear knots must start at x=0 and be strictly increasing")
        if self.family == "logistic" and ps[1] <= 0:
            raise ModelError("logistic carrying capacity must be positive")
        if self.family == "power" and ps[1] <= 0:
            raise ModelError("power exponent must be positive")
        if self.family == "saturating-hill" and len(ps) > 1 and ps[1] <= 0:
            raise ModelError("saturating-hill half-saturation constant must be positive")
        if self.family == "saturating-hill" and len(ps) > 2 and ps[2] <= 0:
            raise ModelError("saturating-hill exponent must be positive")

    def __call__(self, x):
        """Evaluate at load(s) x; +inf (the explosion sentinel) maps to the family limit."""
        xa = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            out = self._formula(np.where(np.isinf(xa), 0.0, xa))
        out = np.where(np.isinf(xa), self.limit(), out)
        if np.ndim(x) == 0:
            return float(out)
        return out

    def _formula(self, x):
        f, ps = self.family, self.params
        if f == "constant":
            return np.full_like(x, ps[0])
        if f == "linear":
            return ps[0] * x
        if f == "affine":
            return ps[0] + ps[1] * x
        if f == "logistic":
            return ps[0] * x * (1.0 - x / ps[1])
        if f == "power":
            return ps[0] * np.power(x, ps[1])
        if f == "saturating-hill":
            r0 = ps[0]
            h = ps[1] if len(ps) > 1 else 1.0
            n = ps[2] if len(ps) > 2 else 1.0
            xn = np.power(x, n)
            return r0 * xn / (h ** n + xn)
        if f == "piecewise-linear":
            # flat beyond the last knot
            return np.interp(x, ps[0::2], ps[1::2])
        if f == "log-boosted":
            c = ps[0]
            g1 = ps[1] if len(ps) > 1 else 1.0
            g2 = ps[2] if len(ps) > 2 else 0.0
            l1 = np.log1p(x)
            return c * x * np.power(1.0 + l1, g1) * np.power(1.0 + np.log1p(l1), g2)
        raise ModelError(f"Unknown function family '{f}'")

    def limit(self) -> float:
        """Value of the family at the explosion sentinel (finite or signed infinity)."""
        f, ps = self.family, self.params
        if f == "constant":
            return ps[0]
        if f == "saturating-hill":
            return ps[0]
        if f == "piecewise-linear":
            return ps[-1]
        if f == "affine":
            slope, lead = ps[1], ps[0]
        elif f == "logistic":
            slope, lead = -ps[0], 0.0
        else:
            slope, lead = ps[0], 0.0
        if slope > 0:
            return math.inf
        if slope < 0:
            return -math.inf
        return lead

    def bound_on(self, lo, hi):
        """
        Upper bound of the function over [lo, hi] (thinning bound).

        lo and hi may be arrays of one shape, bounded entry by entry. The logistic
        peak and the piecewise-linear knots are added to the sampled loads, which
        makes the sampled maximum the supremum for every family. An infinite hi
        gives the limit at infinity.
        """
        lo = np.maximum(np.asarray(lo, dtype=float), 0.0)
        hi = np.maximum(np.asarray(hi, dtype=float), lo)
        lo, hi = np.broadcast_arrays(lo, hi)
        fin = np.isfinite(hi)
        top = np.where(fin, hi, lo)
        frac = np.linspace(0.0, 1.0, 33).reshape((-1,) + (1,) * lo.ndim)
        glo, ghi = np.log(np.maximum(lo, 1e-12)), np.log(np.maximum(top, 1e-12))
        pts = np.concatenate((lo + (top - lo) * frac, np.exp(glo + (ghi - glo) * frac)))
        out = np.max(self(pts), axis=0)
        inner = []
        if self.family == "logistic":
            inner.append(self.params[1] / 2)
        if self.family == "piecewise-linear":
            inner.extend(self.params[0::2])
        for x in inner:
            out = np.where((lo <= x) & (x <= top), np.maximum(out, self(float(x))), out)
        out = np.where(fin, out * (1.0 + 1e-12) + 1e-300, self.limit())
        return float(out) if out.ndim == 0 else out

    def at_most_linear(self) -> bool:
        """True when the family grows at most linearly at infinity."""
        if self.family == "power":
            return self.params[1] <= 1.0 or self.params[0] <= 0.0
        if self.family == "log-boosted":
            g1 = self.params[1] if len(self.params) > 1 else 1.0
            g2 = self.params[2] if len(self.params) > 2 else 0.0
            return self.params[0] <= 0.0 or (g1 <= 0.0 and g2 <= 0.0)
        return True

    def is_constant(self) -> bool:
        if self.family == "constant":
            return True
        if self.family in ("linear", "log-boosted", "saturating-hill", "power"):
            return self.params[0] == 0.0
        if self.family == "affine":
            return self.params[1] == 0.0
        if self.family == "logistic":
            return self.params[0] == 0.0
        ys = self.params[1::2]
        return all(y == ys[0] for y in ys)

    def as_dict(self) -> dict:
        return {"family": self.family, "params": list(self.params)}


@dataclass(frozen=True)
class JumpSizeLaw:
    family: str
    params: tuple
    role: str
    mass: float = 1.0

    def __post_init__(self):
        if self.family not in LAW_FAMILIES:
            raise ModelError(f"Unknown jump-size family '{self.family}' (known: {', '.join(LAW_FAMILIES)})")
        if self.role not in LAW_ROLES:
            raise ModelError(f"Unknown jump-size role '{self.role}'")
        ps = _params(self.params, LAW_FAMILIES[self.family], self.family, "jump-size law")
        object.__setattr__(self, "params", ps)
        try:
            mass = float(self.mass)
        except (TypeError, ValueError) as e:
            raise ModelError(f"jump-size law mass must be a number, got {self.mass!r}") from e
        if not math.isfinite(mass) or mass < 0:
            raise ModelError(f"jump-size law mass must be finite and non-negative, got {mass}")
        object.__setattr__(self, "mass", mass)
        f = self.family
        if f in ("point-mass", "exponential") and ps[0] <= 0:
            raise ModelError(f"{f}: empty support, parameter must be positive (got {ps[0]})")
        if f == "uniform-interval" and not (0 <= ps[0] < ps[1]):
            raise ModelError(f"uniform-interval: empty support [{ps[0]}, {ps[1]}] (need 0 <= lo < hi)")
        if f == "truncated-pareto" and not (ps[0] > 0 and 0 < ps[1] < ps[2]):
            raise ModelError(f"truncated-pareto: need index > 0 and 0 < lo < hi, got {ps}")

    def mean(self) -> float:
        """Mean of the normalised law."""
        f, ps = self.family, self.params
        if f in ("point-mass", "exponential"):
            return ps[0]
        if f == "uniform-interval":
            return 0.5 * (ps[0] + ps[1])
        alpha, lo, hi = ps
        norm = 1.0 - (lo / hi) ** alpha
        if abs(alpha - 1.0) < 1e-12:
            return lo * math.log(hi / lo) / norm
        return alpha * lo ** alpha * (hi ** (1.0 - alpha) - lo ** (1.0 - alpha)) / ((1.0 - alpha) * norm)

    def first_moment(self) -> float:
        """Integral of z against the (possibly non-normalised) measure."""
        return self.mass * self.mean()

    def support(self) -> tuple:
        f, ps = self.family, self.params
        if f == "point-mass":
            return ps[0], ps[0]
        if f == "exponential":
            return 0.0, math.inf
        if f == "uniform-interval":
            return ps[0], ps[1]
        return ps[1], ps[2]

    def pdf(self, z):
        f, ps = self.family, self.params
        z = np.asarray(z, dtype=float)
        if f == "exponential":
            return np.where(z >= 0, np.exp(-z / ps[0]) / ps[0], 0.0)
        if f == "uniform-interval":
            return np.where((z >= ps[0]) & (z <= ps[1]), 1.0 / (ps[1] - ps[0]), 0.0)
        if f == "truncated-pareto":
            alpha, lo, hi = ps
            c = alpha * lo ** alpha / (1.0 - (lo / hi) ** alpha)
            return np.where((z >= lo) & (z <= hi), c * np.power(np.maximum(z, lo), -alpha - 1.0), 0.0)
        raise ModelError("point-mass law has no density")

    def sample(self, gen: np.random.Generator, n: int) -> np.ndarray:
        f, ps = self.family, self.params
        if f == "point-mass":
            return np.full(n, ps[0])
        if f == "exponential":
            return gen.exponential(ps[0], n)
        if f == "uniform-interval":
            return gen.uniform(ps[0], ps[1], n)
        alpha, lo, hi = ps
        u = gen.random(n)
        return np.power(lo ** -alpha - u * (lo ** -alpha - hi ** -alpha), -1.0 / alpha)

    def expect(self, fn, tol: float = 1e-10) -> float:
        """E[fn(Z)] under the normalised law; closed form for point masses."""
        if self.family == "point-mass":
            return float(fn(self.params[0]))
        lo, hi = self.support()
        if self.family == "exponential":
            # split so quad sees the bulk of the density
            m = self.params[0]
            head = quad(lambda z: fn(z) * float(self.pdf(z)), 0.0, 20.0 * m, tol, "dose expectation")
            tail = quad(lambda z: fn(z) * float(self.pdf(z)), 20.0 * m, math.inf, tol, "dose expectation tail")
            return head + tail
        return quad(lambda z: fn(z) * float(self.pdf(z)), lo, hi, tol, "dose expectation")

    def as_dict(self) -> dict:
        out = {"family": self.family, "params": list(self.params)}
        if self.mass != 1.0:
            out["mass"] = self.mass
        return out


def dose_mean(law: JumpSizeLaw) -> float:
    return law.mean()


@dataclass(frozen=True)
class FragmentationLaw:
    family: str
    params: tuple = ()

    def __post_init__(self):
        if self.family not in FRAGMENTATION_FAMILIES:
            raise ModelError(f"Unknown fragmentation family '{self.family}' (known: {', '.join(FRAGMENTATION_FAMILIES)})")
        ps = _params(self.params, FRAGMENTATION_FAMILIES[self.family], self.family, "fragmentation law")
        if self.family == "beta-symmetric" and ps[0] <= 0:
            raise ModelError(f"beta-symmetric parameter must be positive, got {ps[0]}")
        object.__setattr__(self, "params", ps)

    @property
    def beta(self) -> float:
        if self.family == "uniform01":
            return 1.0
        return self.params[0] if self.params else math.inf

    def moment(self, q: float) -> float:
        """E[Theta^q]; +inf when the integral diverges."""
        if self.family == "point-mass-half":
            return 2.0 ** (-q)
        beta = self.beta
        if q <= -beta:
            return math.inf
        return math.exp(special.betaln(beta + q, beta) - special.betaln(beta, beta))

    def mean_log_inverse(self) -> float:
        """E[ln(1/Theta)]."""
        if self.family == "point-mass-half":
            return math.log(2.0)
        beta = self.beta
        return float(special.digamma(2.0 * beta) - special.digamma(beta))

    def sample(self, gen: np.random.Generator, n: int) -> np.ndarray:
        if self.family == "point-mass-half":
            return np.full(n, 0.5)
        if self.family == "uniform01":
            # open interval: redraw exact zeros
            u = gen.random(n)
            return np.where(u > 0.0, u, 0.5)
        beta = self.beta
        return gen.beta(beta, beta, n)

    def as_dict(self) -> dict:
        out = {"family": self.family}
        if self.params:
            out["params"] = list(self.params)
        return out


def theta_moment(kappa: FragmentationLaw, q: float) -> float:
    return kappa.moment(q)


@dataclass(frozen=True)
class ModelSpec:
    g: FunctionSpec
    sigma2: FunctionSpec
    p: FunctionSpec
    lam: FunctionSpec
    r: FunctionSpec
    pi: JumpSizeLaw
    dose_i: JumpSizeLaw
    dose_p: JumpSizeLaw
    kappa: FragmentationLaw
    b: float
    d: float = 0.0
    x0: float = 1.0

    def __post_init__(self):
        expected = {
            "g": ROLE_G, "sigma2": ROLE_SIGMA2, "p": ROLE_P, "lam": ROLE_LAMBDA, "r": ROLE_R,
            "pi": ROLE_PI, "dose_i": ROLE_DOSE_I, "dose_p": ROLE_DOSE_P,
        }
        for name, role in expected.items():
            spec = getattr(self, name)
            if getattr(spec, "role", None) != role:
                raise ModelError(f"Field '{name}' must carry role '{role}', got '{getattr(spec, 'role', None)}'")
        if not isinstance(self.kappa, FragmentationLaw):
            raise ModelError("Field 'kappa' must be a FragmentationLaw")
        for name in ("b", "d", "x0"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ModelError(f"'{name}' must be finite, got {v}")
            object.__setattr__(self, name, v)
        if self.b <= 0:
            raise ModelError(f"division rate b must be > 0, got {self.b}")
        if self.d < 0:
            raise ModelError(f"death rate d must be >= 0, got {self.d}")
        if self.x0 < 0:
            raise ModelError(f"initial load x0 must be >= 0, got {self.x0}")

    def with_(self, **changes) -> "ModelSpec":
        return replace(self, **changes)

    def jump_compensator(self) -> float:
        """Integral of z against pi; the drift correction is -p(x) times this."""
        return self.pi.first_moment()

    def as_dict(self) -> dict:
        return {
            "g": self.g.as_dict(), "sigma2": self.sigma2.as_dict(), "p": self.p.as_dict(),
            "lambda": self.lam.as_dict(), "r": self.r.as_dict(),
            "pi": self.pi.as_dict(), "dose_i": self.dose_i.as_dict(), "dose_p": self.dose_p.as_dict(),
            "kappa": self.kappa.as_dict(), "b": self.b, "d": self.d, "x0": self.x0,
        }


@dataclass(frozen=True)
class NumericsSpec:
    dt: float = 1e-3
    T: float = 1.0
    x_explode: float = 1e12
    max_cells: int = 100000
    replicates: int = 10000
    master_seed: int = 20240601
    tol_fp: float = 1e-3
    k_max_fp: int = 20
    quad_tol: float = 1e-10
    block_size: int = 1000
    mf_grid_step: float = 0.05

    def __post_init__(self):
        if not self.dt > 0:
            raise ModelError(f"dt must be > 0, got {self.dt}")
        if self.T < 0:
            raise ModelError(f"horizon T must be >= 0, got {self.T}")
        if not self.x_explode > 0:
            raise ModelError(f"x_explode must be > 0, got {self.x_explode}")
        if self.max_cells < 1 or self.replicates < 1 or self.block_size < 1:
            raise ModelError("max_cells, replicates and block_size must be positive")
        if not self.mf_grid_step > 0:
            raise ModelError(f"mf_grid_step must be > 0, got {self.mf_grid_step}")

    def with_(self, **changes) -> "NumericsSpec":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_config(cls, **overrides) -> "NumericsSpec":
        base = dict(
            dt=CFG.DT, x_explode=CFG.X_EXPLODE, max_cells=CFG.MAX_CELLS, master_seed=CFG.MASTER_SEED,
            tol_fp=CFG.TOL_FP, k_max_fp=CFG.K_MAX_FP, quad_tol=CFG.QUAD_TOL, block_size=CFG.BLOCK_SIZE,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class ClauseCheck:
    clause: str
    passed: bool
    detail: str


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def clause_passed(self, clause: str) -> bool:
        return all(c.passed for c in self.checks if c.clause == clause)

    def add(self, clause: str, passed, detail: str):
        self.checks.append(ClauseCheck(clause, bool(passed), detail))

    def summary(self) -> str:
        if self.passed:
            return "model passes EU (i)-(iv) and fragmentation checks"
        return "; ".join(f"EU({c.clause}) {c.detail}" if c.clause != "kappa" else f"kappa: {c.detail}"
                         for c in self.failures())

    def as_dict(self) -> dict:
        return {"passed": self.passed, "checks": [asdict(c) for c in self.checks]}


def _nonneg(f: FunctionSpec) -> bool:
    v = f(_PROBE)
    return bool(np.all(v >= -1e-12)) and f.limit() >= 0


def _non_decreasing(f: FunctionSpec) -> bool:
    v = f(_PROBE)
    scale = max(1.0, float(np.max(np.abs(v[np.isfinite(v)]), initial=0.0)))
    return bool(np.all(np.diff(v) >= -1e-12 * scale))


def _zero_at_origin(f: FunctionSpec) -> bool:
    return abs(f(0.0)) <= 1e-14


def validate_model(spec: ModelSpec) -> ValidationReport:
    """Structural check of the existence/uniqueness assumptions, clause by clause."""
    rep = ValidationReport()
    # (i) p locally Lipschitz, non-decreasing, p(0)=0; g continuous, g(0)=0
    rep.add("i", _zero_at_origin(spec.p), f"p(0)=0 (got p(0)={spec.p(0.0):g})")
    rep.add("i", _nonneg(spec.p), "p >= 0")
    rep.add("i", _non_decreasing(spec.p), "p non-decreasing")
    rep.add("i", _zero_at_origin(spec.g), f"g(0)=0 (got g(0)={spec.g(0.0):g})")
    # (ii) sigma Hoelder-1/2 on compacts (families are), sigma(0)=0
    rep.add("ii", _nonneg(spec.sigma2), "sigma2 >= 0")
    rep.add("ii", _zero_at_origin(spec.sigma2), f"sigma2(0)=0 (got sigma2(0)={spec.sigma2(0.0):g})")
    # (iii) int (z ^ z^2) pi(dz) < inf; finite mass and finite mean suffice
    rep.add("iii", math.isfinite(spec.pi.mass), f"pi has finite mass (got {spec.pi.mass:g})")
    rep.add("iii", math.isfinite(spec.pi.mean()), "pi has finite mean")
    # (iv) r, lambda continuous; r non-decreasing, bounded, r(0)=0; finite dose means
    rep.add("iv", _zero_at_origin(spec.r), f"r(0)=0 (got r(0)={spec.r(0.0):g})")
    rep.add("iv", _nonneg(spec.r), "r >= 0")
    rep.add("iv", _non_decreasing(spec.r), "r non-decreasing")
    rep.add("iv", math.isfinite(spec.r.limit()), f"r bounded (limit {spec.r.limit():g})")
    rep.add("iv", _nonneg(spec.lam), "lambda >= 0")
    mi, mp = spec.dose_i.first_moment(), spec.dose_p.first_moment()
    rep.add("iv", math.isfinite(mi) and math.isfinite(mp),
            f"finite dose means (int i I(di)={mi:g}, int p P(dp)={mp:g})")
    rep.add("kappa", math.isfinite(spec.kappa.mean_log_inverse()), "E[ln(1/Theta)] finite")
    for c in rep.failures():
        log.debug("validation failure EU(%s): %s", c.clause, c.detail)
    return rep


def function_from_dict(data, role: str) -> FunctionSpec:
    if not isinstance(data, dict):
        raise ModelError(f"{role}: expected an object with 'family' and 'params', got {data!r}")
    unknown = set(data) - {"family", "params"}
    if unknown:
        raise ModelError(f"{role}: unknown key(s) {sorted(unknown)}")
    if "family" not in data:
        raise ModelError(f"{role}: 'family' is required")
    return FunctionSpec(data["family"], tuple(data.get("params") or ()), role)


def law_from_dict(data, role: str) -> JumpSizeLaw:
    if not isinstance(data, dict):
        raise ModelError(f"{role}: expected an object with 'family' and 'params', got {data!r}")
    unknown = set(data) - {"family", "params", "mass"}
    if unknown:
        raise ModelError(f"{role}: unknown key(s) {sorted(unknown)}")
    if "family" not in data:
        raise ModelError(f"{role}: 'family' is required")
    return JumpSizeLaw(data["family"], tuple(data.get("params") or ()), role, data.get("mass", 1.0))


def kappa_from_dict(data) -> FragmentationLaw:
    if not isinstance(data, dict):
        raise ModelError(f"kappa: expected an object with 'family', got {data!r}")
    unknown = set(data) - {"family", "params"}
    if unknown:
        raise ModelError(f"kappa: unknown key(s) {sorted(unknown)}")
    if "family" not in data:
        raise ModelError("kappa: 'family' is required")
    return FragmentationLaw(data["family"], tuple(data.get("params") or ()))


_MODEL_KEYS = {"g", "sigma2", "p", "lambda", "r", "pi", "dose_i", "dose_p", "kappa", "b", "d", "x0"}


def model_from_dict(data: dict) -> ModelSpec:
    if not isinstance(data, dict):
        raise ModelError("model: expected a JSON object")
    unknown = set(data) - _MODEL_KEYS
    if unknown:
        raise ModelError(f"model: unknown key(s) {sorted(unknown)}")
    missing = {"g", "kappa", "b"} - set(data)
    if missing:
        raise ModelError(f"model: missing required key(s) {sorted(missing)}")
    zero = {"family": "constant", "params": [0.0]}
    unit = {"family": "point-mass", "params": [1.0]}
    try:
        return ModelSpec(
            g=function_from_dict(data["g"], ROLE_G),
            sigma2=function_from_dict(data.get("sigma2", zero), ROLE_SIGMA2),
            p=function_from_dict(data.get("p", zero), ROLE_P),
            lam=function_from_dict(data.get("lambda", zero), ROLE_LAMBDA),
            r=function_from_dict(data.get("r", zero), ROLE_R),
            pi=law_from_dict(data.get("pi", unit), ROLE_PI),
            dose_i=law_from_dict(data.get("dose_i", unit), ROLE_DOSE_I),
            dose_p=law_from_dict(data.get("dose_p", unit), ROLE_DOSE_P),
            kappa=kappa_from_dict(data["kappa"]),
            b=data["b"],
            d=data.get("d", 0.0),
            x0=data.get("x0", 1.0),
        )
    except (TypeError, ValueError) as e:
        raise ModelError(f"model: {e}") from e


def numerics_from_dict(data: dict | None) -> NumericsSpec:
    data = dict(data or {})
    known = set(NumericsSpec.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ModelError(f"numerics: unknown key(s) {sorted(unknown)}")
    try:
        return NumericsSpec.from_config(**data)
    except TypeError as e:
        raise ModelError(f"numerics: {e}") from e
