"""Scalar nonlinearities ``a(z)`` with their growth bounds, and the Kirchhoff
transform ``beta(z) = int_0^z a``.

Named families (config ``{"family": ...}``):

    exp    a(z) = e^z
    poly2  a(z) = c0 + c2 z^2        (c0 > 0, c2 >= 0)
    sin    a(z) = c0 + sin z         (c0 > 1)
    const  a(z) = c                  (c > 0)

Every family accepts an optional positive ``scale`` multiplying ``a``.
The max-principle constant is fixed to ``rho = 1``, so bounds are functions
of ``|z|`` directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import roots_legendre

EXP_WINDOW = 10.0


@dataclass(frozen=True, eq=False)
class CoefficientFamily:
    name: str
    a: object
    a_prime: object
    a_second: object
    floor_varkappa: float
    bound_mu: object
    bound_gamma: object
    bound_gamma_tilde: object = None
    max_principle_rho: float = 1.0
    params: dict = field(default_factory=dict)

    def __call__(self, z):
        return self.a(np.asarray(z, dtype=float))

    @property
    def is_constant(self):
        return bool(self.params.get("constant", False))

    def shifted(self, t):
        """Translated family ``a^t(z) = a(z + t)`` with bounds ``mu(|z| + |t|)``."""
        t = float(t)
        a, a1, a2 = self.a, self.a_prime, self.a_second
        mu, g, gt = self.bound_mu, self.bound_gamma, self.bound_gamma_tilde
        return CoefficientFamily(
            f"{self.name}^({t:g})",
            lambda z: a(np.asarray(z, dtype=float) + t),
            lambda z: a1(np.asarray(z, dtype=float) + t),
            None if a2 is None else (lambda z: a2(np.asarray(z, dtype=float) + t)),
            self.floor_varkappa,
            lambda s: mu(np.asarray(s) + abs(t)),
            lambda s: g(np.asarray(s) + abs(t)),
            None if gt is None else (lambda s: gt(np.asarray(s) + abs(t))),
            self.max_principle_rho,
            {**self.params, "shift": self.params.get("shift", 0.0) + t},
        )

    def scaled(self, lam):
        lam = float(lam)
        if not lam > 0:
            raise ValueError("scale must be positive")
        a, a1, a2 = self.a, self.a_prime, self.a_second
        mu, g, gt = self.bound_mu, self.bound_gamma, self.bound_gamma_tilde
        return CoefficientFamily(
            f"{lam:g}*{self.name}",
            lambda z: lam * a(z), lambda z: lam * a1(z),
            None if a2 is None else (lambda z: lam * a2(z)),
            lam * self.floor_varkappa,
            lambda s: lam * mu(s), lambda s: lam * g(s),
            None if gt is None else (lambda s: lam * gt(s)),
            self.max_principle_rho,
            {**self.params, "scale": self.params.get("scale", 1.0) * lam},
        )

    def translated_bounds(self, tau, s):
        """``(mu_tau(s), gamma_tau(s), gamma_tilde_tau(s))`` with ``mu_tau(s) = mu(s + tau)``."""
        vals = [self.bound_mu(s + tau), self.bound_gamma(s + tau)]
        vals.append(None if self.bound_gamma_tilde is None else self.bound_gamma_tilde(s + tau))
        return tuple(None if v is None else float(v) for v in vals)

    def validate(self, window=5.0, samples=2001):
        """Sample the admissibility assumptions on ``[-window, window]``.

        Returns a dict of booleans plus the finite-difference Lipschitz
        estimate of ``q_a = a'/a``.
        """
        z = np.linspace(-window, window, samples)
        s = np.abs(z) / self.max_principle_rho
        a, a1 = self.a(z), self.a_prime(z)
        tol = 1e-12 * np.maximum(1.0, np.abs(a))
        report = {
            "floor": bool(np.all(a >= self.floor_varkappa - tol)),
            "mu_bound": bool(np.all(a <= self.bound_mu(s) + tol)),
            "gamma_bound": bool(np.all(np.abs(a1) <= self.bound_gamma(s) + tol)),
        }
        if self.a_second is not None and self.bound_gamma_tilde is not None:
            a2 = self.a_second(z)
            report["gamma_tilde_bound"] = bool(np.all(np.abs(a2) <= self.bound_gamma_tilde(s) + tol))
        q = a1 / a
        report["q_lipschitz_estimate"] = float(np.max(np.abs(np.diff(q)) / np.diff(z)))
        report["admissible"] = all(v for k, v in report.items() if isinstance(v, bool))
        return report


def _const(c):
    return lambda z: np.full(np.shape(z), float(c)) if np.ndim(z) else float(c)


def _zero(z):
    return np.zeros(np.shape(z)) if np.ndim(z) else 0.0


def exp_family(window=EXP_WINDOW):
    # e^z has no positive floor on the whole line; the floor holds on [-window, window].
    return CoefficientFamily("exp", np.exp, np.exp, np.exp, math.exp(-window),
                             np.exp, np.exp, np.exp, params={"family": "exp", "window": window})


def poly2_family(c0, c2):
    if not c0 > 0 or c2 < 0:
        raise ValueError(f"poly2 needs c0 > 0 and c2 >= 0, got c0={c0}, c2={c2}")
    return CoefficientFamily(
        f"{c0:g}+{c2:g}z^2",
        lambda z: c0 + c2 * np.asarray(z, dtype=float) ** 2,
        lambda z: 2 * c2 * np.asarray(z, dtype=float),
        lambda z: np.full(np.shape(z), 2.0 * c2) if np.ndim(z) else 2.0 * c2,
        float(c0),
        lambda s: c0 + c2 * np.asarray(s, dtype=float) ** 2,
        lambda s: 2 * c2 * np.asarray(s, dtype=float),
        _const(2 * c2),
        params={"family": "poly2", "c0": c0, "c2": c2, "constant": c2 == 0},
    )


def sin_family(c0):
    if not c0 > 1:
        raise ValueError(f"sin family needs c0 > 1, got {c0}")
    return CoefficientFamily(
        f"{c0:g}+sin(z)",
        lambda z: c0 + np.sin(z), np.cos, lambda z: -np.sin(z),
        float(c0 - 1.0),
        lambda s: c0 + np.sin(np.minimum(s, np.pi / 2)),
        _const(1.0),
        lambda s: np.sin(np.minimum(s, np.pi / 2)),
        params={"family": "sin", "c0": c0},
    )


def const_family(c):
    if not c > 0:
        raise ValueError(f"constant family needs c > 0, got {c}")
    return CoefficientFamily(f"{c:g}", _const(c), _zero, _zero, float(c),
                             _const(c), _zero, _zero,
                             params={"family": "const", "c": c, "constant": True})


_FAMILY_KEYS = {"exp": {"window"}, "poly2": {"c0", "c2"}, "sin": {"c0"}, "const": {"c"}}


def make_family(spec):
    """Build a family from a config mapping such as ``{"family": "poly2", "c0": 2.0, "c2": 1.0}``."""
    spec = dict(spec)
    kind = spec.pop("family", None)
    scale = spec.pop("scale", 1.0)
    if kind not in _FAMILY_KEYS:
        raise ValueError(f"unknown family {kind!r}; expected one of {sorted(_FAMILY_KEYS)}")
    unknown = set(spec) - _FAMILY_KEYS[kind]
    if unknown:
        raise ValueError(f"unknown keys for family {kind!r}: {sorted(unknown)}")
    if kind == "exp":
        fam = exp_family(spec.get("window", EXP_WINDOW))
    elif kind == "poly2":
        fam = poly2_family(spec.get("c0", 2.0), spec.get("c2", 1.0))
    elif kind == "sin":
        fam = sin_family(spec.get("c0", 2.0))
    else:
        fam = const_family(spec.get("c", 1.0))
    return fam if scale == 1.0 else fam.scaled(scale)


# -- Kirchhoff transform ------------------------------------------------------

def kirchhoff_beta(family, z):
    """``int_0^z a(s) ds`` by adaptive quadrature (absolute tolerance 1e-12)."""
    val, _ = integrate.quad(lambda s: float(family.a(s)), 0.0, float(z), epsabs=1e-12, epsrel=1e-13, limit=200)
    return val


class KirchhoffTransform:
    """Vectorized ``beta`` and its inverse for one family.

    ``beta`` uses composite Gauss-Legendre panels on ``[0, z]``, doubling the
    panel count until successive values agree to ``atol``.
    """

    def __init__(self, family, atol=1e-12, order=16):
        self.family = family
        self.atol = atol
        self._x, self._w = roots_legendre(order)

    def _beta_panels(self, z, panels):
        edges = np.linspace(0.0, 1.0, panels + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 / panels
        s = (mid[:, None] + half * self._x[None, :]).ravel()
        w = np.tile(self._w * half, panels)
        vals = self.family.a(z[:, None] * s[None, :])
        return z * (vals @ w)

    def beta(self, z):
        z = np.asarray(z, dtype=float)
        flat = z.ravel()
        panels = max(1, int(np.ceil(np.abs(flat).max(initial=0.0))))
        cur = self._beta_panels(flat, panels)
        for _ in range(12):
            panels *= 2
            nxt = self._beta_panels(flat, panels)
            if np.max(np.abs(nxt - cur), initial=0.0) <= self.atol:
                return nxt.reshape(z.shape)
            cur = nxt
        return cur.reshape(z.shape)

    def beta_inverse(self, w, tol=1e-14, max_iter=200):
        """Safeguarded Newton with bisection fallback; ``beta`` is strictly increasing."""
        w = np.asarray(w, dtype=float)
        flat = w.ravel()
        a0 = float(self.family.a(0.0))
        z = flat / a0
        lo = z.copy()
        hi = z.copy()
        step = np.maximum(np.abs(z), 1.0)
        for _ in range(200):
            low_bad = self.beta(lo) > flat
            high_bad = self.beta(hi) < flat
            if not (low_bad.any() or high_bad.any()):
                break
            lo[low_bad] -= step[low_bad]
            hi[high_bad] += step[high_bad]
            step *= 2
        else:
            raise ArithmeticError("could not bracket the Kirchhoff inverse")
        for _ in range(max_iter):
            r = self.beta(z) - flat
            done = np.abs(r) <= tol * np.maximum(1.0, np.abs(flat))
            if done.all():
                return z.reshape(w.shape)
            lo = np.where(r < 0, z, lo)
            hi = np.where(r > 0, z, hi)
            newton = z - r / self.family.a(z)
            inside = (newton > lo) & (newton < hi)
            z = np.where(done, z, np.where(inside, newton, 0.5 * (lo + hi)))
            if np.all(((hi - lo) <= 1e-15 * np.maximum(1.0, np.abs(z))) | done):
                return z.reshape(w.shape)
        raise ArithmeticError("Kirchhoff inverse did not converge")
