"""
Named models and the hypotheses each experiment pins.

Models are kept as plain JSON-shaped dicts (the same shape a config file
uses) and turned into ModelSpec on demand, so a config may name a preset and
override single fields.
"""
import logging

import numpy as np

from criteria import LN_CONSISTENT, criteria_scan, rho
from model import ModelSpec, dose_mean, model_from_dict

log = logging.getLogger(__name__)


def _f(family, *params):
    return {"family": family, "params": list(params)}


PRESET_MODELS = {
    # only divisions: Theta ~ U(0,1)
    "pure-fragmentation": {
        "g": _f("constant", 0.0), "kappa": {"family": "uniform01"}, "b": 1.0, "x0": 1.0,
    },
    "fragmentation-diffusion": {
        "g": _f("constant", 0.0), "sigma2": _f("power", 0.5, 2.0),
        "kappa": {"family": "uniform01"}, "b": 1.0, "x0": 1.0,
    },
    # every mechanism switched on, with cell death
    "full-death": {
        "g": _f("linear", 0.2), "sigma2": _f("linear", 0.1), "p": _f("linear", 0.1),
        "pi": _f("exponential", 0.2), "lambda": _f("constant", 0.3), "dose_i": _f("exponential", 0.5),
        "r": _f("saturating-hill", 0.4, 1.0), "dose_p": _f("point-mass", 0.3),
        "kappa": {"family": "beta-symmetric", "params": [2.0]}, "b": 1.0, "d": 0.5, "x0": 1.0,
    },
    # m' = (0.5 - b) m + 0.3, m(0) = 1
    "linear-mean-field": {
        "g": _f("linear", 0.5), "lambda": _f("constant", 0.3), "dose_i": _f("point-mass", 1.0),
        "kappa": {"family": "uniform01"}, "b": 1.0, "x0": 1.0,
    },
    # g + E[I] lambda = 0.5 x < b x
    "subcritical": {
        "g": _f("linear", 0.3), "sigma2": _f("linear", 0.1), "lambda": _f("linear", 0.4),
        "dose_i": _f("point-mass", 0.5), "kappa": {"family": "uniform01"}, "b": 1.0, "x0": 1.0,
    },
    # g + E[I] lambda = 1.5 x > b x
    "supercritical": {
        "g": _f("linear", 1.5), "sigma2": _f("linear", 0.1), "kappa": {"family": "uniform01"},
        "b": 1.0, "x0": 1.0,
    },
    # g = x (1 + ln(1+x)) (1 + ln(1 + ln(1+x)))^2 blows up in finite time
    "strong-growth": {
        "g": _f("log-boosted", 1.0, 1.0, 2.0), "lambda": _f("constant", 0.2), "dose_i": _f("point-mass", 1.0),
        "kappa": {"family": "uniform01"}, "b": 1.0, "x0": 1.0,
    },
    # lambda = 0, linear decay: rho(x) = -2x
    "no-reservoir-decay": {
        "g": _f("linear", -1.0), "sigma2": _f("linear", 0.2), "kappa": {"family": "uniform01"},
        "b": 1.0, "x0": 1.0,
    },
    "no-reservoir-explosive": {
        "g": _f("log-boosted", 1.0, 1.0, 2.0), "r": _f("saturating-hill", 0.5, 1.0),
        "dose_p": _f("point-mass", 1.0), "kappa": {"family": "uniform01"}, "b": 1.0, "x0": 1.0,
    },
    # strong decay from infinity, steady reservoir contact, no lysis reinfection
    "coming-down": {
        "g": _f("log-boosted", -1.0, 1.0, 2.0), "lambda": _f("constant", 1.0), "dose_i": _f("point-mass", 1.0),
        "kappa": {"family": "uniform01"}, "b": 1.0, "x0": 1.0,
    },
}

# tail grid used by the growth-rate clauses
_TAIL = np.logspace(3, 12, 91)
_ALL = np.logspace(-6, 12, 181)


def preset_model(name: str, overrides: dict | None = None) -> ModelSpec:
    if name not in PRESET_MODELS:
        raise KeyError(f"Unknown preset '{name}' (known: {', '.join(sorted(PRESET_MODELS))})")
    data = dict(PRESET_MODELS[name])
    data.update(overrides or {})
    return model_from_dict(data)


def _effective_growth(model: ModelSpec, xs: np.ndarray) -> np.ndarray:
    return (model.g(xs) + dose_mean(model.dose_i) * model.lam(xs)) / xs


def _lambda_zero(model: ModelSpec) -> bool:
    return model.lam.is_constant() and model.lam(1.0) == 0.0


def _ln_consistent(model: ModelSpec) -> bool:
    try:
        return criteria_scan(model).verdict == LN_CONSISTENT
    except Exception as e:
        log.debug("criteria scan failed during pinning: %s", e)
        return False


def pin_subcritical(model: ModelSpec) -> list:
    ratio = float(np.max(_effective_growth(model, _TAIL)))
    if ratio < model.b:
        return []
    return [f"Prop 2.3(1): needs g(x) + E[I] lambda(x) <= g~ x with g~ < b for large x "
            f"(sup ratio on the tail {ratio:g} >= b={model.b:g})"]


def pin_supercritical(model: ModelSpec) -> list:
    ratio = float(np.min(_effective_growth(model, _ALL)))
    if ratio > model.b:
        return []
    return [f"Prop 2.3(2): needs g(x) + E[I] lambda(x) >= g~ x with g~ > b for all x > 0 "
            f"(inf ratio {ratio:g} <= b={model.b:g})"]


def pin_explosive(model: ModelSpec) -> list:
    out = []
    if float(np.min(model.lam(_ALL))) <= 0:
        out.append("Prop 2.3(3): needs lambda(x) > 0 for every x > 0")
    if not _ln_consistent(model):
        out.append("Prop 2.3(3): needs the LN growth condition (no admissible a gave an LN-consistent verdict)")
    return out


def pin_no_reservoir_extinction(model: ModelSpec) -> list:
    out = []
    if not _lambda_zero(model):
        out.append("Prop 2.4: assumes lambda == 0")
    xs = np.linspace(0.0, 1e3, 2001)
    g2 = np.diff(model.g(xs), 2)
    if np.any(g2 > 1e-9 * max(1.0, float(np.max(np.abs(model.g(xs)))))):
        out.append("Prop 2.4(1): needs a concave g")
    pos = _ALL
    worst = float(np.max(np.array([rho(x, model) for x in pos]) / np.minimum(pos, 1.0)))
    if worst >= 0:
        out.append(f"Prop 2.4(1): needs rho(x) <= -(alpha x ^ eta) for some alpha, eta > 0 "
                   f"(max rho(x)/min(x,1) = {worst:g})")
    return out


def pin_no_reservoir_explosive(model: ModelSpec) -> list:
    out = []
    if not _lambda_zero(model):
        out.append("Prop 2.4: assumes lambda == 0")
    if not model.r(model.x0) > 0:
        out.append(f"Prop 2.4(2): needs r(x0) > 0 (r({model.x0:g}) = {model.r(model.x0):g})")
    if not _ln_consistent(model):
        out.append("Prop 2.4(2): needs the LN growth condition (no admissible a gave an LN-consistent verdict)")
    return out


def pin_coming_down(model: ModelSpec) -> list:
    if model.r.is_constant() and model.r.limit() == 0.0:
        return []
    return ["Prop 2.5: assumes r == 0"]


def _no_pin(model: ModelSpec) -> list:
    return []


# experiment -> (default preset, hypothesis pinning)
EXPERIMENTS = {
    "regime-subcritical": ("subcritical", pin_subcritical),
    "regime-supercritical": ("supercritical", pin_supercritical),
    "regime-explosive": ("strong-growth", pin_explosive),
    "no-reservoir-extinction": ("no-reservoir-decay", pin_no_reservoir_extinction),
    "no-reservoir-explosive": ("no-reservoir-explosive", pin_no_reservoir_explosive),
    "coming-down": ("coming-down", pin_coming_down),
    "many-to-one-suite": ("pure-fragmentation", _no_pin),
    "martingale-suite": ("pure-fragmentation", _no_pin),
    "criteria-scan": ("subcritical", _no_pin),
}


def pin(experiment: str, model: ModelSpec) -> list:
    """Violated hypothesis clauses of the experiment (empty when the model qualifies)."""
    if experiment not in EXPERIMENTS:
        raise KeyError(f"Unknown experiment '{experiment}'")
    return EXPERIMENTS[experiment][1](model)
