"""Amenable penalties (MCP, SCAD) and the convex L1 baseline.

All functions accept scalars or arrays and act elementwise.  For the
nonconvex kinds the shift ``q(t) = lam*|t| - rho(t)`` is smooth, which lets
the solver fold it into the gradient and keep a plain group soft-threshold
as the proximal step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("MCP", "SCAD", "L1")
DEFAULT_GAMMA = {"MCP": 3.0, "SCAD": 3.7, "L1": 0.0}


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "MCP"
    lam: float = 1.0
    gamma: float | None = None

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.gamma is None:
            object.__setattr__(self, "gamma", DEFAULT_GAMMA[kind])
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if kind == "MCP" and not self.gamma > 1:
            raise ValueError(f"MCP needs gamma > 1, got {self.gamma}")
        if kind == "SCAD" and not self.gamma > 2:
            raise ValueError(f"SCAD needs gamma > 2, got {self.gamma}")

    @property
    def mu(self) -> float:
        """Weak-convexity constant: ``rho + mu/2 t^2`` is convex."""
        if self.kind == "MCP":
            return 1.0 / self.gamma
        if self.kind == "SCAD":
            return 1.0 / (self.gamma - 1.0)
        return 0.0

    def with_lambda(self, lam: float) -> "RegularizerSpec":
        return RegularizerSpec(self.kind, lam, self.gamma)

    def rho(self, t):
        return rho(t, self)

    def rho_prime(self, t):
        return rho_prime(t, self)

    def q_value(self, t):
        return q_value(t, self)

    def q_prime(self, t):
        return q_prime(t, self)


def _out(x, like):
    return float(x) if np.ndim(like) == 0 else x


def rho(t, spec: RegularizerSpec):
    a = np.abs(np.asarray(t, dtype=np.float64))
    lam, g = spec.lam, spec.gamma
    if spec.kind == "L1":
        r = lam * a
    elif spec.kind == "MCP":
        r = np.where(a <= g * lam, lam * a - a * a / (2 * g), 0.5 * g * lam * lam)
    else:
        r = np.where(
            a <= lam,
            lam * a,
            np.where(a <= g * lam,
                     (2 * g * lam * a - a * a - lam * lam) / (2 * (g - 1)),
                     0.5 * lam * lam * (g + 1)),
        )
    return _out(r, t)


def rho_prime(t, spec: RegularizerSpec):
    """Derivative of ``rho`` away from the origin."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr == 0):
        raise ValueError("subdifferential at origin: rho_prime is undefined at t = 0")
    a, s = np.abs(t_arr), np.sign(t_arr)
    lam, g = spec.lam, spec.gamma
    if spec.kind == "L1":
        d = np.full_like(a, lam)
    elif spec.kind == "MCP":
        d = np.maximum(lam - a / g, 0.0)
    else:
        d = np.where(a <= lam, lam, np.maximum(g * lam - a, 0.0) / (g - 1))
    return _out(s * d, t)


def _require_shift(spec):
    if spec.kind == "L1":
        raise ValueError("the shift q is identically zero for L1; not defined for this kind")


def q_value(t, spec: RegularizerSpec):
    _require_shift(spec)
    a = np.abs(np.asarray(t, dtype=np.float64))
    return _out(spec.lam * a - np.asarray(rho(a, spec)), t)


def q_prime(t, spec: RegularizerSpec):
    _require_shift(spec)
    t_arr = np.asarray(t, dtype=np.float64)
    a, s = np.abs(t_arr), np.sign(t_arr)
    lam, g = spec.lam, spec.gamma
    if spec.kind == "MCP":
        d = np.minimum(a / g, lam)
    else:
        d = np.where(a <= lam, 0.0, np.minimum((a - lam) / (g - 1), lam))
    return _out(s * d, t)


@dataclass
class AmenabilityReport:
    """Per-property outcome of a grid check: ``checks[name] = (passed, worst_violation)``."""

    spec: RegularizerSpec
    mu_bound: float
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.checks.values())

    def failed(self) -> list[str]:
        return [k for k, (ok, _) in self.checks.items() if not ok]


def amenability_report(spec: RegularizerSpec, mu_bound: float, n_grid: int = 10_000,
                       tol: float = 1e-9) -> AmenabilityReport:
    """Numerically check the amenability properties of ``spec`` on a dense grid.

    The grid spans ``[-3*gamma*lam, 3*gamma*lam]`` (``[-3*lam, 3*lam]`` for L1).
    Convexity of ``rho + mu_bound/2 t^2`` is tested with raw second differences
    against ``-tol``.
    """
    lam = spec.lam
    span = 3 * spec.gamma * lam if spec.kind != "L1" else 3 * lam
    t = np.linspace(-span, span, n_grid)
    r = np.asarray(rho(t, spec))
    rep = AmenabilityReport(spec, mu_bound)

    def record(name, violation):
        v = float(max(violation, 0.0))
        rep.checks[name] = (v <= tol, v)

    record("symmetry", np.max(np.abs(r - np.asarray(rho(-t, spec)))))
    record("zero_at_origin", abs(rho(0.0, spec)))
    pos = t[t > 0]
    rp = np.asarray(rho(pos, spec))
    record("nondecreasing", np.max(-np.diff(rp), initial=0.0))
    ratio = rp / pos
    record("ratio_nonincreasing", np.max(np.diff(ratio), initial=0.0))
    f = r + 0.5 * mu_bound * t * t
    record("weak_convexity", np.max(-(f[2:] - 2 * f[1:-1] + f[:-2]), initial=0.0))
    small = np.asarray(rho_prime(lam * 1e-9, spec))
    record("slope_at_origin", abs(float(small) - lam) - 1e-6 * lam)
    if spec.kind == "L1":
        # no flat tail: report the derivative magnitude beyond gamma*lam as the violation
        rep.checks["selection"] = (False, lam)
    else:
        tail = pos[pos >= spec.gamma * lam]
        record("selection", np.max(np.abs(np.asarray(rho_prime(tail, spec))), initial=0.0))
    return rep
