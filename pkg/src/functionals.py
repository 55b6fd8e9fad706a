"""
Path functionals F used on both sides of the Many-to-One identity.

A functional is evaluated from the current load and the running supremum of
the (ancestral) path, which is all the statistics of the population module
need. Tags:

    one | 1          F = 1
    identity         F = x
    ge:K             F = 1{x >= K}
    gt:K             F = 1{x > K}
    le:K             F = 1{x <= K}
    sup_le:K         F = 1{sup_{s<=t} x_s <= K}
    finite           F = 1{x < inf}
    grid:x0,y0;...   F = piecewise-linear interpolation of the given points
"""
from dataclasses import dataclass

import numpy as np

KINDS = ("one", "identity", "ge", "gt", "le", "sup_le", "finite", "grid")


@dataclass(frozen=True)
class Functional:
    kind: str
    level: float = 0.0
    xs: tuple = ()
    ys: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown functional '{self.kind}' (known: {', '.join(KINDS)})")
        if self.kind == "grid" and (len(self.xs) < 2 or len(self.xs) != len(self.ys)):
            raise ValueError("grid functional needs at least two (x, y) points")

    @property
    def bounded(self) -> bool:
        return self.kind != "identity"

    @property
    def tag(self) -> str:
        if self.kind in ("one", "identity", "finite"):
            return self.kind
        if self.kind == "grid":
            return "grid:" + ";".join(f"{x:g},{y:g}" for x, y in zip(self.xs, self.ys))
        return f"{self.kind}:{self.level:g}"

    def __call__(self, x, running_max=None):
        x = np.asarray(x, dtype=float)
        k = self.kind
        if k == "one":
            return np.ones_like(x)
        if k == "identity":
            return x.copy()
        if k == "ge":
            return (x >= self.level).astype(float)
        if k == "gt":
            return (x > self.level).astype(float)
        if k == "le":
            return (x <= self.level).astype(float)
        if k == "finite":
            return np.isfinite(x).astype(float)
        if k == "sup_le":
            sup = x if running_max is None else np.maximum(np.asarray(running_max, dtype=float), x)
            return (sup <= self.level).astype(float)
        out = np.interp(np.where(np.isfinite(x), x, self.xs[-1]), self.xs, self.ys)
        return out


def parse_functional(tag) -> Functional:
    if isinstance(tag, Functional):
        return tag
    t = str(tag).strip()
    if t in ("1", "one"):
        return Functional("one")
    if t in ("identity", "finite"):
        return Functional(t)
    kind, _, rest = t.partition(":")
    if kind == "grid":
        pts = [p.split(",") for p in rest.split(";") if p.strip()]
        try:
            xs = tuple(float(p[0]) for p in pts)
            ys = tuple(float(p[1]) for p in pts)
        except (IndexError, ValueError) as e:
            raise ValueError(f"Malformed grid functional {t!r}") from e
        return Functional("grid", xs=xs, ys=ys)
    if kind in ("ge", "gt", "le", "sup_le") and rest:
        try:
            return Functional(kind, float(rest))
        except ValueError as e:
            raise ValueError(f"Malformed functional level in {t!r}") from e
    raise ValueError(f"Unknown functional tag {t!r}")
