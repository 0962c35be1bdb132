"""Radii polynomial certification shared by the local chart and the integrator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .errors import ValidationError
from .interval import Interval, up


@dataclass
class ValidationBounds:
    """The four Newton-Kantorovich constants and the certified root pair.

    ``r_minus`` is the rounded-up certified radius; ``r_plus`` is a lower
    bound for the far root (the isolation radius), ``inf`` when ``Z2 == 0``.
    ``extra`` keeps context specific diagnostics (``K_N`` for local charts).
    """

    Y0: float
    Z0: float
    Z1: float
    Z2: float
    r_minus: float | None = None
    r_plus: float | None = None
    extra: dict = field(default_factory=dict)

    def radii_polynomial(self, r: float) -> float:
        """Float value of Z2 r^2 + (Z0 + Z1 - 1) r + Y0 (diagnostics only)."""
        return self.Z2 * r * r + (self.Z0 + self.Z1 - 1.0) * r + self.Y0

    def as_dict(self) -> dict:
        return asdict(self)


def _p_upper(b: ValidationBounds, r: float) -> float:
    ri = Interval(r)
    val = Interval(b.Z2) * ri * ri + (Interval(b.Z0) + Interval(b.Z1) - 1.0) * ri + Interval(b.Y0)
    return val.hi


def certify(bounds: ValidationBounds) -> ValidationBounds:
    """Certify the smallest radius with a negative radii polynomial.

    On success ``bounds`` is returned with ``r_minus``/``r_plus`` filled in;
    otherwise :class:`ValidationError` is raised carrying the bounds.
    """
    Y0, Z0, Z1, Z2 = bounds.Y0, bounds.Z0, bounds.Z1, bounds.Z2
    for name, v in (("Y0", Y0), ("Z0", Z0), ("Z1", Z1), ("Z2", Z2)):
        if not (math.isfinite(v) and v >= 0.0):
            raise ValidationError(f"{name} = {v!r} is not a finite non-negative bound", bounds)
    lin = Interval(1.0) - Interval(Z0) - Interval(Z1)  # 1 - Z0 - Z1
    if lin.lo <= 0.0:
        raise ValidationError(f"Z0 + Z1 = {Z0 + Z1:.6g} >= 1", bounds)
    b = lin.lo
    if Y0 == 0.0:
        bounds.r_minus = 0.0
        bounds.r_plus = math.inf if Z2 == 0.0 else b / up(Z2)
        return bounds
    if Z2 == 0.0:
        r_est = Y0 / b
        r_far = math.inf
    else:
        disc = b * b - 4.0 * Z2 * Y0
        if disc <= 0.0:
            raise ValidationError("radii polynomial has no negative values", bounds)
        sq = math.sqrt(disc)
        r_est = 2.0 * Y0 / (b + sq)
        r_far = (b + sq) / (2.0 * Z2)
    # nudge the estimate upward until the polynomial is verifiably negative
    r_hat = up(r_est)
    for k in range(60):
        if _p_upper(bounds, r_hat) < 0.0:
            break
        r_hat = up(r_hat * (1.0 + 2.0 ** (-45 + k)))
        if r_hat >= r_far:
            raise ValidationError("radii polynomial negativity could not be verified", bounds)
    else:
        raise ValidationError("radii polynomial negativity could not be verified", bounds)
    bounds.r_minus = r_hat
    bounds.r_plus = r_far
    return bounds


def certify_radius(Y0: float, Z0: float, Z1: float, Z2: float, **extra) -> ValidationBounds:
    return certify(ValidationBounds(Y0, Z0, Z1, Z2, extra=dict(extra)))
