"""Recovery of ``a1 - a2`` from linearized localized DtN maps and the
Lipschitz stability experiment.

At constant data ``t`` the linearized map of ``a`` is assembled through the
translated family ``a^t(z) = a(z + t)`` at base 0. A singular probe
``f_delta`` then turns the matrix difference into a scalar estimate of
``(a1 - a2)(t)``.
"""
from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dtn, fem
from .probes import Parametrix, build_probe, normalization_integral

PAIRING_FLOOR = 1e-14


class NormalizationMode(enum.Enum):
    PAIRING_RATIO = "PAIRING_RATIO"
    PARAMETRIX_QUADRATURE = "PARAMETRIX_QUADRATURE"


@dataclass(frozen=True, eq=False)
class RecoveryResult:
    t_grid: np.ndarray
    recovered_diff: np.ndarray
    true_diff: np.ndarray | None
    per_t_opnorm: np.ndarray
    normalization_mode: NormalizationMode
    reference_opnorm: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.t_grid) == 0:
            raise ValueError("empty t grid")
        if np.any(np.diff(self.t_grid) <= 0):
            raise ValueError("t grid must be strictly increasing")

    @property
    def sup_opnorm(self):
        return float(np.max(self.per_t_opnorm))

    @property
    def max_abs_diff(self):
        ref = self.recovered_diff if self.true_diff is None else self.true_diff
        return float(np.max(np.abs(ref)))


def _pairing(matrix, probe):
    f = probe.trace_f_delta.nodal_values
    return float(f @ matrix.apply(f))


def recover_boundary_value(dtn_diff, probe, K_delta=None, mode=NormalizationMode.PAIRING_RATIO,
                           reference=None):
    """Estimate ``(a1 - a2)(t)`` from ``<dtn_diff f_delta, f_delta>``.

    PAIRING_RATIO divides by ``<reference f_delta, f_delta>`` (``reference``
    is the localized linear DtN matrix); PARAMETRIX_QUADRATURE divides by
    ``K_delta``.
    """
    mode = NormalizationMode(mode)
    num = _pairing(dtn_diff, probe)
    if mode is NormalizationMode.PAIRING_RATIO:
        if reference is None:
            raise ValueError("PAIRING_RATIO needs the reference linear DtN matrix")
        den = _pairing(reference, probe)
    else:
        if K_delta is None:
            raise ValueError("PARAMETRIX_QUADRATURE needs K_delta")
        den = float(K_delta)
    if abs(den) < PAIRING_FLOOR:
        raise ValueError(f"normalization {den:.3e} is below {PAIRING_FLOOR:g}")
    return num / den


def shifted_frechet(mesh, family, A, t, chi=None, threads=None):
    """``d Lambda~_a^t(0)`` through the translated family at base 0."""
    return dtn.frechet_dtn_matrix(mesh, family.shifted(t), A, 0.0, chi=chi, threads=threads)


def _map(func, items, threads):
    if threads is None or threads <= 1:
        return [func(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


class _Setup:
    """Objects shared by all t values: linear reference map, probe, norms."""

    def __init__(self, mesh, A, spec, delta=None, chi=None, threads=None):
        self.mesh = mesh
        self.A = A
        self.chi = chi
        self.ctx = fem.build_norm_context(mesh)
        self.reference = dtn.linear_dtn_matrix(mesh, A, chi=chi, threads=threads)
        self.reference_norm = dtn.operator_norm(self.reference, self.ctx)
        p = Parametrix(A)
        self.probe = build_probe(p, spec, mesh, spec.offset_delta if delta is None else delta)
        self.K_delta = normalization_integral(p, p, mesh, self.probe.y_delta)


def recover_a_difference(fam1, fam2, A, mesh, spec, tau, t_count=17,
                         mode=NormalizationMode.PAIRING_RATIO, threads=None, setup=None,
                         delta=None, chi=None):
    """Sweep ``t`` over ``linspace(-tau, tau, t_count)`` and recover ``(a1 - a2)(t)``."""
    mode = NormalizationMode(mode)
    if not tau >= 0 or t_count < 1:
        raise ValueError("need tau >= 0 and t_count >= 1")
    s = _Setup(mesh, A, spec, delta, chi, threads) if setup is None else setup
    grid = np.linspace(-tau, tau, t_count) if t_count > 1 else np.array([0.0])

    def one(t):
        diff = shifted_frechet(mesh, fam1, A, t, s.chi) - shifted_frechet(mesh, fam2, A, t, s.chi)
        est = recover_boundary_value(diff, s.probe, s.K_delta, mode, s.reference)
        return est, dtn.operator_norm(diff, s.ctx)

    out = _map(one, grid, threads)
    rec = np.array([o[0] for o in out])
    ops = np.array([o[1] for o in out])
    true = fam1.a(grid) - fam2.a(grid)
    step = grid[1] - grid[0] if len(grid) > 1 else 0.0
    g1 = float(fam1.bound_gamma(tau))
    g2 = float(fam2.bound_gamma(tau))
    meta = {
        "delta": s.probe.delta,
        "K_delta": s.K_delta,
        # off-grid error of max|a1 - a2| is at most (gamma1 + gamma2)(tau) * step / 2
        "modulus_certificate": 0.5 * (g1 + g2) * step,
        "translated_bounds": {
            "fam1": fam1.translated_bounds(tau, 0.0),
            "fam2": fam2.translated_bounds(tau, 0.0),
        },
    }
    return RecoveryResult(grid, rec, true, ops, mode, s.reference_norm, meta)


@dataclass(frozen=True)
class PairReport:
    name1: str
    name2: str
    lhs: float
    rhs_sup: float
    C_measured: float
    result: RecoveryResult


@dataclass(frozen=True)
class StabilityReport:
    tau: float
    mode: NormalizationMode
    pairs: list
    reference_opnorm: float

    @property
    def constants(self):
        return np.array([p.C_measured for p in self.pairs])

    @property
    def C_measured(self):
        return float(np.mean(self.constants))

    @property
    def spread(self):
        """Relative spread ``(max - min) / mean`` of the per-pair constants."""
        c = self.constants
        return float((c.max() - c.min()) / c.mean())

    def summary(self):
        return {"tau": self.tau, "lhs": max(p.lhs for p in self.pairs),
                "rhs_sup": max(p.rhs_sup for p in self.pairs),
                "C_measured": self.C_measured, "mode": self.mode.value,
                "C_spread": self.spread, "inverse_reference_opnorm": 1.0 / self.reference_opnorm,
                "pairs": [{"a1": p.name1, "a2": p.name2, "lhs": p.lhs, "rhs_sup": p.rhs_sup,
                           "C_measured": p.C_measured} for p in self.pairs]}


def stability_experiment(pairs, A, mesh, spec, tau, t_count=17,
                         mode=NormalizationMode.PAIRING_RATIO, threads=None, delta=None, chi=None):
    """Grid counterpart of ``max|a1 - a2| <= C sup_t ||dLambda~_1 - dLambda~_2||_op``."""
    if not pairs:
        raise ValueError("need at least one pair")
    setup = _Setup(mesh, A, spec, delta, chi, threads)
    reports = []
    for fam1, fam2 in pairs:
        res = recover_a_difference(fam1, fam2, A, mesh, spec, tau, t_count, mode, threads, setup)
        lhs = float(np.max(np.abs(res.true_diff)))
        rhs = res.sup_opnorm
        C = lhs / rhs if rhs > 0 else float("nan")
        reports.append(PairReport(fam1.name, fam2.name, lhs, rhs, C, res))
    return StabilityReport(float(tau), NormalizationMode(mode), reports, setup.reference_norm)


@dataclass(frozen=True)
class UniquenessReport:
    holds: bool
    indistinguishable: bool
    sup_opnorm: float
    max_gap: float
    C_measured: float
    tol: float

    def __bool__(self):
        return self.holds


def uniqueness_check(fam1, fam2, A, mesh, spec, tau, tol=1e-10, t_count=17, threads=None, chi=None):
    """Check ``sup_t ||d diff||_op <= tol  =>  max_t |a1 - a2| <= C tol`` on the grid.

    ``C`` is the reciprocal norm of the localized linear DtN map. A pair whose
    operators agree on the grid is flagged ``indistinguishable``.
    """
    res = recover_a_difference(fam1, fam2, A, mesh, spec, tau, t_count, threads=threads, chi=chi)
    C = 1.0 / res.reference_opnorm
    sup_op = res.sup_opnorm
    gap = res.max_abs_diff
    indist = sup_op <= tol
    holds = (not indist) or gap <= C * tol * (1 + 1e-6)
    return UniquenessReport(bool(holds), bool(indist), sup_op, gap, C, tol)
