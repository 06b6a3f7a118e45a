"""Polynomial models from canopy volume density (m^3/ha) to fresh biomass (kg/ha)."""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import DomainError, SchemaError

LOW_BIOMASS_THRESHOLD = 30000.0


@dataclass(frozen=True)
class Sample:
    e_v: float
    b: float
    source_id: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.e_v) and math.isfinite(self.b)):
            raise DomainError(f"sample {self.source_id!r} is not finite")
        if self.e_v < 0 or self.b < 0:
            raise DomainError(f"sample {self.source_id!r} has a negative value")


@dataclass(frozen=True)
class PolyModel:
    order: int
    coefficients: tuple  # ascending powers

    def __post_init__(self):
        c = tuple(float(v) for v in self.coefficients)
        object.__setattr__(self, "coefficients", c)
        if self.order not in (1, 2):
            raise DomainError(f"order must be 1 or 2, got {self.order}")
        if len(c) != self.order + 1:
            raise DomainError(f"order {self.order} needs {self.order + 1} coefficients, got {len(c)}")
        if not all(math.isfinite(v) for v in c):
            raise DomainError("coefficients must be finite")


REFERENCE_LINEAR = PolyModel(1, (-3205.553278, 8.850490))
REFERENCE_QUADRATIC = PolyModel(2, (-49703.76, 28.47, -0.00203))


@dataclass
class FitReport:
    model: PolyModel
    r_squared: float
    n: int
    residuals: np.ndarray
    condition: float  # condition number of the scaled design matrix
    center: float
    scale: float
    n_low_biomass: int = 0

    @property
    def ss_res(self) -> float:
        return float(np.dot(self.residuals, self.residuals))


def predict(m: PolyModel, e_v):
    """Evaluate the model; negative predictions are returned unchanged."""
    x = np.asarray(e_v, dtype=float)
    out = np.zeros_like(x)
    for c in reversed(m.coefficients):
        out = out * x + c
    return out if out.ndim else float(out)


def _columns(samples):
    x = np.array([s.e_v for s in samples], dtype=float)
    y = np.array([s.b for s in samples], dtype=float)
    return x, y


def _r2(y, fitted):
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise DomainError("biomass has zero variance")
    return 1.0 - float(np.sum((y - fitted) ** 2)) / ss_tot


def r_squared(m: PolyModel, samples) -> float:
    if len(samples) < 2:
        raise DomainError("need at least two samples")
    x, y = _columns(samples)
    return _r2(y, predict(m, x))


def scaled_to_raw(coef_scaled, center: float, scale: float) -> np.ndarray:
    """Map ascending coefficients in u = (x - center)/scale back to powers of x."""
    k = len(coef_scaled)
    raw = np.zeros(k)
    for j, a in enumerate(coef_scaled):
        # a * ((x - c)/s)^j expanded binomially
        for i in range(j + 1):
            raw[i] += a * comb(j, i) * (-center) ** (j - i) / scale**j
    return raw


def fit_poly(samples, order: int) -> FitReport:
    """Least-squares polynomial fit on a centred and scaled abscissa."""
    if order not in (1, 2):
        raise DomainError(f"order must be 1 or 2, got {order}")
    n = len(samples)
    if n < order + 1:
        raise DomainError(f"need at least {order + 1} samples for order {order}, got {n}")
    x, y = _columns(samples)
    if np.unique(x).size < order + 1:
        raise DomainError("not enough distinct e_v values (rank deficient)")
    center = float(x.mean())
    scale = float(x.std())
    u = (x - center) / scale
    a = np.vander(u, order + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    raw = scaled_to_raw(coef, center, scale)
    fitted = a @ coef
    resid = y - fitted
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return FitReport(PolyModel(order, tuple(raw)), r2, n, resid, float(np.linalg.cond(a)), center, scale,
                     int(np.sum(y < LOW_BIOMASS_THRESHOLD)))


# model files


def _created_stamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def model_to_dict(m: PolyModel, r2: float | None = None, n: int | None = None) -> dict:
    return {"order": m.order, "coefficients": list(m.coefficients), "r_squared": r2, "n": n,
            "created": _created_stamp()}


def model_from_dict(d: dict) -> PolyModel:
    for k in ("order", "coefficients"):
        if k not in d:
            raise SchemaError(f"model document lacks {k!r}")
    try:
        return PolyModel(int(d["order"]), tuple(float(v) for v in d["coefficients"]))
    except (TypeError, ValueError) as e:
        raise SchemaError(f"bad model document: {e}") from None


def dumps_model(m: PolyModel, r2=None, n=None) -> str:
    return json.dumps(model_to_dict(m, r2, n), indent=2) + "\n"


def loads_model(text: str) -> PolyModel:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"model file is not JSON: {e}") from None
    if not isinstance(d, dict):
        raise SchemaError("model document must be an object")
    return model_from_dict(d)
