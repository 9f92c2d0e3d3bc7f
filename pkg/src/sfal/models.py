"""Coefficient sets for two-scale systems and the built-in model zoo.

All coefficient callables are batched: ``x`` has shape ``(N, n)``, ``y`` has
shape ``(N, m)`` and ``t`` is a scalar shared by the batch.  Return shapes are
``(N, n)`` for ``b``, ``(N, n, d)`` for ``sigma``, ``(N, m)`` for ``f`` and
``(N, n, n)`` for ``Sigma``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np


class ConfigurationError(ValueError):
    """Invalid parameters or a request the toolkit refuses to run."""


class ModelBlowupError(FloatingPointError):
    """A simulated state became non-finite."""

    def __init__(self, path: int, time: float, what: str = "state"):
        self.path = int(path)
        self.time = float(time)
        super().__init__(f"non-finite {what} on path {self.path} at t={self.time:.6g}")


@dataclass(frozen=True)
class DissipativityParams:
    C: float
    K: float
    r0: float
    C_star: float
    K1: Optional[float] = None
    K2: Optional[float] = None

    def __post_init__(self):
        for name in ("C", "K", "r0", "C_star"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"dissipativity parameter {name} must be positive")
        if self.K1 is not None and not 0 < self.K1 < self.K:
            raise ConfigurationError("need 0 < K1 < K")
        if self.K2 is not None and not self.K2 > 0:
            raise ConfigurationError("need K2 > 0")

    def derive(self) -> "DissipativityParams":
        """Fill in K1, K2 of the one-sided growth bound <f(t,x,y),y> <= -K1|y|^2 + K2(1+|x|^2).

        Takes K1 = K/2 and absorbs the remaining terms with Young's inequality.
        """
        K1 = self.K / 2
        # -K|y|^2 + (C+K) r0^2 + C*(1+|x|)|y| <= -K1|y|^2 + (C+K) r0^2 + C*^2 (1+|x|)^2 / (2K)
        K2 = (self.C + self.K) * self.r0**2 + self.C_star**2 / self.K
        return dataclasses.replace(self, K1=K1, K2=K2)


Coef = Callable[..., np.ndarray]


@dataclass
class ModelSpec:
    model_id: str
    n: int
    m: int
    d: int
    b: Coef
    sigma: Coef
    f: Coef
    dissipativity: DissipativityParams
    sigma_y_independent: bool = False
    b_hat: Optional[Coef] = None
    f_bar: Optional[Coef] = None
    k: float = 0.0
    sigma_bar: Optional[Coef] = None
    Sigma: Optional[Coef] = None
    x0: np.ndarray = field(default_factory=lambda: np.zeros(1))
    y0: np.ndarray = field(default_factory=lambda: np.zeros(1))
    sigma_floor: Optional[float] = None     # inf of <sigma sigma^T z, z>/|z|^2
    phi2: Optional[Callable[[float], float]] = None   # decay of |f - f_bar|
    description: str = ""

    def __post_init__(self):
        if min(self.n, self.m, self.d) < 1:
            raise ConfigurationError("dimensions must be positive")
        self.x0 = np.asarray(self.x0, dtype=float).reshape(self.n)
        self.y0 = np.asarray(self.y0, dtype=float).reshape(self.m)

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    # Batched helpers that accept single points as well.
    def _xy(self, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        N = max(x.shape[0], y.shape[0])
        return np.broadcast_to(x, (N, self.n)), np.broadcast_to(y, (N, self.m))

    def eval_b(self, t, x, y):
        return self.b(t, *self._xy(x, y))

    def eval_sigma(self, t, x, y):
        return self.sigma(t, *self._xy(x, y))

    def eval_f(self, t, x, y):
        return self.f(t, *self._xy(x, y))

    def frozen_drift(self, t: float, x, y):
        """Fast drift on the whole real line: f(|t|, x, y) (symmetric extension)."""
        return self.f(abs(t), *self._xy(x, y))


# ---------------------------------------------------------------------------
# zoo

def ou_lin() -> ModelSpec:
    """Linear fast OU with a decaying time modulation; slow drift y + sin t."""

    def f(t, x, y):
        return (1.0 + np.exp(-t)) * (0.5 * x - y)

    def b(t, x, y):
        return y + np.sin(t)

    def sigma(t, x, y):
        return np.ones((x.shape[0], 1, 1))

    return ModelSpec(
        model_id="ou-lin", n=1, m=1, d=1, b=b, sigma=sigma, f=f,
        dissipativity=DissipativityParams(C=2.0, K=0.5, r0=1.0, C_star=1.0),
        sigma_y_independent=True,
        b_hat=lambda x, y: y.copy(),
        f_bar=lambda x, y: 0.5 * x - y,
        k=1.0,
        sigma_bar=lambda x: np.ones((x.shape[0], 1, 1)),
        Sigma=lambda x, y: np.ones((x.shape[0], 1, 1)),
        x0=[1.0], y0=[0.0],
        sigma_floor=1.0,
        phi2=lambda t: float(np.exp(-abs(t))),
        description="f=(1+e^-t)(x/2-y), b=y+sin t, sigma=1; mu^x = N(x/2, 1/2), b_bar(x)=x/2",
    )


def double_well() -> ModelSpec:
    """Bistable fast drift y - y^3 + x + e^-t; slow drift y - x + e^-t."""

    def f(t, x, y):
        return y - y**3 + x + np.exp(-t)

    def b(t, x, y):
        return y - x + np.exp(-t)

    return ModelSpec(
        model_id="double-well", n=1, m=1, d=1, b=b,
        sigma=lambda t, x, y: np.ones((x.shape[0], 1, 1)),
        f=f,
        dissipativity=DissipativityParams(C=1.0, K=1.25, r0=3.0, C_star=1.0),
        sigma_y_independent=True,
        b_hat=lambda x, y: y - x,
        f_bar=lambda x, y: y - y**3 + x,
        k=0.0,
        sigma_bar=lambda x: np.ones((x.shape[0], 1, 1)),
        Sigma=lambda x, y: np.ones((x.shape[0], 1, 1)),
        x0=[0.0], y0=[0.0],
        sigma_floor=1.0,
        phi2=lambda t: float(np.exp(-abs(t))),
        description="stationary density of the limit fast SDE proportional to exp(y^2 - y^4/2 + 2xy)",
    )


def periodic_weak() -> ModelSpec:
    """Slow diffusion depends on y and oscillates in t (weak averaging case).

    sigma(t,x,y) = g(y) [1, sin(t)/sqrt(2)] with g = 1 + 0.1 tanh y, so
    sigma sigma^T = g^2 (1 + sin^2(t)/2) and its time average is 1.25 g^2.
    """

    def g(y):
        return 1.0 + 0.1 * np.tanh(y[:, 0])

    def f(t, x, y):
        return -y + 0.5 * np.sin(y) + 0.5 * x + np.exp(-t)

    def b(t, x, y):
        return -x + 0.5 * np.tanh(y) + 0.3 * np.sin(t)

    def sigma(t, x, y):
        gy = g(y)
        out = np.empty((x.shape[0], 1, 2))
        out[:, 0, 0] = gy
        out[:, 0, 1] = gy * np.sin(t) / np.sqrt(2.0)
        return out

    def Sigma(x, y):
        return (1.25 * g(y) ** 2).reshape(-1, 1, 1)

    return ModelSpec(
        model_id="periodic-weak", n=1, m=1, d=2, b=b, sigma=sigma, f=f,
        dissipativity=DissipativityParams(C=0.5, K=0.5, r0=1.0, C_star=1.0),
        sigma_y_independent=False,
        b_hat=lambda x, y: -x + 0.5 * np.tanh(y),
        f_bar=lambda x, y: -y + 0.5 * np.sin(y) + 0.5 * x,
        k=0.0,
        Sigma=Sigma,
        x0=[0.5], y0=[1.5],
        sigma_floor=0.81,
        phi2=lambda t: float(np.exp(-abs(t))),
        description="stationary density of the limit fast SDE proportional to exp(-y^2 - cos y + xy)",
    )


ZOO = {"ou-lin": ou_lin, "double-well": double_well, "periodic-weak": periodic_weak}


def get_model(name_or_path: str) -> ModelSpec:
    """Zoo model by id, or a JSON parameter file ``{"base": id, "x0": .., "y0": ..}``."""
    if name_or_path in ZOO:
        return ZOO[name_or_path]()
    p = Path(name_or_path)
    if not p.is_file():
        raise ConfigurationError(f"unknown model {name_or_path!r}; zoo has {sorted(ZOO)}")
    data = json.loads(p.read_text())
    allowed = {"base", "x0", "y0", "dissipativity"}
    extra = set(data) - allowed
    if extra:
        raise ConfigurationError(f"unknown model-file keys {sorted(extra)}")
    if data.get("base") not in ZOO:
        raise ConfigurationError("model file needs a 'base' zoo id")
    model = ZOO[data["base"]]()
    changes = {}
    if "x0" in data:
        changes["x0"] = np.asarray(data["x0"], dtype=float)
    if "y0" in data:
        changes["y0"] = np.asarray(data["y0"], dtype=float)
    if "dissipativity" in data:
        changes["dissipativity"] = DissipativityParams(**data["dissipativity"])
    return model.replace(**changes) if changes else model


# ---------------------------------------------------------------------------
# validation

@dataclass
class ValidationReport:
    n_pairs: int
    n_violations: int
    worst_margin: float        # max over pairs of (lhs - bound); <= 0 means satisfied
    growth_violations: int
    worst_growth_margin: float
    bounds: dict

    @property
    def passed(self) -> bool:
        return self.n_violations == 0 and self.growth_violations == 0


def _f_many(model: ModelSpec, ts: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """f at per-row times; uses a (N, 1) time column when the model broadcasts it."""
    try:
        out = np.asarray(model.f(ts[:, None], x, y), dtype=float)
        if out.shape == (len(ts), model.m):
            return out
    except (ValueError, TypeError, IndexError):
        pass
    return np.concatenate([model.f(float(t), x[j:j + 1], y[j:j + 1]) for j, t in enumerate(ts)])


def validate_partial_dissipativity(model: ModelSpec, bounds: dict, n_pairs: int,
                                   rng: np.random.Generator, chunk: int = 20000) -> ValidationReport:
    """Sample random (t, x1, x2, y1, y2) and test the two-regime inner-product bound.

    ``bounds`` maps ``"t"``, ``"x"``, ``"y"`` to ``(lo, hi)``; x and y bounds apply
    to every component.  Also checks |f(t,x,0)| <= C_star (1 + |x|).
    """
    if n_pairs < 1:
        raise ConfigurationError("n_pairs must be >= 1")
    p = model.dissipativity
    tlo, thi = bounds.get("t", (0.0, 10.0))
    xlo, xhi = bounds.get("x", (-5.0, 5.0))
    ylo, yhi = bounds.get("y", (-5.0, 5.0))
    tol = 1e-9
    nviol = gviol = 0
    worst = gworst = -np.inf
    done = 0
    while done < n_pairs:
        k = min(chunk, n_pairs - done)
        done += k
        ts = rng.uniform(tlo, thi, size=k)
        x1 = rng.uniform(xlo, xhi, size=(k, model.n))
        x2 = rng.uniform(xlo, xhi, size=(k, model.n))
        y1 = rng.uniform(ylo, yhi, size=(k, model.m))
        y2 = rng.uniform(ylo, yhi, size=(k, model.m))
        f1 = _f_many(model, ts, x1, y1)
        f2 = _f_many(model, ts, x2, y2)
        f0 = _f_many(model, ts, x1, np.zeros_like(y1))
        dy = y1 - y2
        ry = np.linalg.norm(dy, axis=1)
        rx = np.linalg.norm(x1 - x2, axis=1)
        lhs = np.einsum("ij,ij->i", f1 - f2, dy)
        bound = np.where(ry <= p.r0, p.C * ry**2, -p.K * ry**2) + p.C * rx * ry
        margin = lhs - bound
        scale = 1.0 + np.abs(bound)
        nviol += int(np.sum(margin > tol * scale))
        worst = max(worst, float(margin.max()))
        gm = np.linalg.norm(f0, axis=1) - p.C_star * (1.0 + np.linalg.norm(x1, axis=1))
        gviol += int(np.sum(gm > tol))
        gworst = max(gworst, float(gm.max()))
    return ValidationReport(n_pairs, nviol, worst, gviol, gworst,
                            {"t": (tlo, thi), "x": (xlo, xhi), "y": (ylo, yhi)})
