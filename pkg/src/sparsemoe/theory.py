"""Truncated second moments of Gaussian and shifted-exponential activations.

``eta`` is the kept fraction: a threshold ``t_eta`` satisfies
``P(|a| >= t_eta) = eta``. The removed part of an activation is
``a * 1{|a| < t}``; its second moment, normalized by ``E[a^2]``, is ``F(eta)``
for a centred Gaussian and ``G(eta, p)`` for ``a = x - c`` with
``x ~ Exp(lam)`` and ``p = lam * c``.

Monte-Carlo estimators draw fixed-size shards from counter-based Philox
streams (one stream per shard index) and aggregate summed moments, so a result
depends only on ``(seed, n_samples)`` and never on the worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

SHARD = 1 << 16
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianSpec:
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class ShiftedExpSpec:
    lam: float = 11.0
    c: float = 0.28

    def __post_init__(self):
        if not (self.lam > 0 and self.c > 0):
            raise ValueError("lam and c must be positive")

    @property
    def p(self) -> float:
        return self.lam * self.c

    @property
    def decreasing_regime(self) -> bool:
        return self.p >= 2.0

    def second_moment(self) -> float:
        return 2.0 / self.lam**2 - 2.0 * self.c / self.lam + self.c**2


def _check_eta(eta: float) -> None:
    if not 0 < eta <= 1:
        raise ValueError(f"kept fraction must lie in (0, 1], got {eta}")


# ---------------------------------------------------------------------------
# standard normal


def norm_pdf(x: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


# Acklam's rational approximation, relative error ~1e-9 before polishing
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        return num / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
    return num / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def norm_quantile(p: float) -> float:
    """Inverse standard normal CDF, polished with two Halley steps."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile needs 0 < p < 1, got {p}")
    if p == 0.5:
        return 0.0
    x = _acklam(p)
    for _ in range(2):
        # residual in the smaller tail keeps precision for p near 1
        e = norm_cdf(x) - p if p < 0.5 else (1.0 - p) - norm_cdf(-x)
        u = e / norm_pdf(x)
        x = x - u / (1.0 + 0.5 * x * u)
    return x


# ---------------------------------------------------------------------------
# Gaussian activations


def z_eta(eta: float) -> float:
    _check_eta(eta)
    return 0.0 if eta == 1 else norm_quantile(1.0 - eta / 2.0)


def gaussian_threshold(spec: GaussianSpec, eta: float) -> float:
    return spec.sigma * z_eta(eta)


def m2(eta: float) -> float:
    """``2 z phi(z)`` at ``z = z_eta``."""
    z = z_eta(eta)
    return 2.0 * z * norm_pdf(z)


def n_bound(eta: float) -> float:
    """Lower-bound term ``(1 - eta) * (5 e^-4 - ln(1 - eta))`` for ``G - F``."""
    return (1.0 - eta) * (5.0 * math.exp(-4.0) - math.log1p(-eta))


def F_gaussian(eta: float) -> float:
    """Fraction of ``E[a^2]`` removed when only the top ``eta`` mass by magnitude is kept."""
    return 1.0 - eta - m2(eta)


# ---------------------------------------------------------------------------
# shifted-exponential activations


def shifted_exp_threshold(spec: ShiftedExpSpec, eta: float) -> float:
    _check_eta(eta)
    lam, c = spec.lam, spec.c
    if eta >= math.exp(-2.0 * lam * c):
        return math.asinh(0.5 * (1.0 - eta) * math.exp(lam * c)) / lam
    return -math.log(eta) / lam - c


def q_eta(eta: float, p: float) -> float:
    """Threshold normalized by the shift: ``t_eta / c`` with ``p = lam * c``."""
    _check_eta(eta)
    return math.asinh(0.5 * (1.0 - eta) * math.exp(p)) / p


def shifted_exp_removed_moment(spec: ShiftedExpSpec, t: float) -> float:
    """``E[a^2 1{|a| < t}]`` for ``a = x - c``, ``x ~ Exp(lam)``.

    For ``t <= c`` this is the symmetric two-exponential closed form; past the
    shift the lower integration limit is clipped at ``x = 0``.
    """
    lam, c = spec.lam, spec.c
    if t <= 0:
        return 0.0
    if t <= c:
        up = math.exp(lam * (t - c)) * (2.0 / lam**2 - 2.0 * t / lam + t * t)
        down = math.exp(-lam * (c + t)) * (2.0 / lam**2 + 2.0 * t / lam + t * t)
        return up - down

    def antiderivative(x: float) -> float:
        u = x - c
        return -math.exp(-lam * x) * (u * u + 2.0 * u / lam + 2.0 / lam**2)

    return antiderivative(c + t) - antiderivative(0.0)


def G_shifted_exp(eta: float, p: float) -> float:
    """Removed-energy fraction for the shifted exponential in the ``t <= c`` regime."""
    _check_eta(eta)
    if not p > 0:
        raise ValueError("p must be positive")
    if eta < math.exp(-2.0 * p) * (1.0 - 1e-12):
        raise ValueError(f"eta={eta} below exp(-2p)={math.exp(-2 * p)}: outside the single-branch regime")
    q = q_eta(eta, p)
    norm = 2.0 / p**2 - 2.0 / p + 1.0
    g1 = math.exp(p * (q - 1.0)) * (2.0 / p**2 - 2.0 * q / p + q * q) / norm
    g2 = math.exp(-p * (1.0 + q)) * (2.0 / p**2 + 2.0 * q / p + q * q) / norm
    return g1 - g2


def f_p(p: float) -> float:
    if not p > 0:
        raise ValueError("p must be positive")
    return math.exp(-2.0 * p) * (2.0 + 2.0 * p + p * p) / (2.0 - 2.0 * p + p * p)


@dataclass(frozen=True)
class QGHBounds:
    q: float
    g: float
    h: float
    ok: bool  # all five strict inequalities hold
    at_edge: bool  # eta == exp(-2p): q reaches 1, the strict upper bounds become equalities


def qgh_bounds(eta: float, p: float, edge_tol: float = 1e-12) -> QGHBounds:
    if p < 2:
        raise ValueError("bounds need p >= 2")
    lo = math.exp(-2.0 * p)
    if not lo * (1 - edge_tol) <= eta <= 0.5:
        raise ValueError(f"eta must lie in [exp(-2p), 0.5], got {eta}")
    q = q_eta(eta, p)
    g, h = p * (q - 1.0), p * (q + 1.0)
    l1 = math.log1p(-eta)
    ok = (
        0.0 < 1.0 + l1 / p < q < 1.0
        and l1 < g < 0.0
        and 2.0 * p + l1 < h < 2.0 * p
    )
    return QGHBounds(q, g, h, ok, abs(eta - lo) <= edge_tol * lo)


def approx_threshold(spec: ShiftedExpSpec, eta: float) -> float:
    """Large-``lam * c`` approximation ``c + ln(1 - eta) / lam``."""
    return spec.c + math.log1p(-eta) / spec.lam


def approx_removed_moment(spec: ShiftedExpSpec, eta: float, t: float) -> float:
    return (1.0 - eta) * (2.0 / spec.lam**2 - 2.0 * t / spec.lam + t * t)


# ---------------------------------------------------------------------------
# Monte Carlo


def shard_rng(seed: int, shard: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed).jumped(shard))


def _shards(n_samples: int) -> list[tuple[int, int]]:
    return [(s, min(SHARD, n_samples - s * SHARD)) for s in range(-(-n_samples // SHARD))]


def _run_sharded(fn, n_samples: int, seed: int, workers: int) -> np.ndarray:
    """Sum ``fn(rng, size)`` moment vectors over shards in shard order."""
    jobs = _shards(n_samples)
    call = lambda job: fn(shard_rng(seed, job[0]), job[1])
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(call, jobs))
    else:
        parts = [call(j) for j in jobs]
    total = np.zeros_like(parts[0])
    for part in parts:
        total = total + part
    return total


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float

    def z(self, reference: float) -> float:
        return (self.mean - reference) / self.se if self.se > 0 else (0.0 if self.mean == reference else math.inf)


def _estimate(s1: float, s2: float, n: int) -> Estimate:
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return Estimate(mean, math.sqrt(var / n))


def mc_removed_fraction_gaussian(eta: float, n_samples: int = 10**6, seed: int = 0, workers: int = 1) -> Estimate:
    """MC of ``E[a^2 1{|a| < t_eta}] / E[a^2]`` for standard normal ``a``."""
    t = z_eta(eta)

    def moments(rng, size):
        a = rng.standard_normal(size)
        r = np.where(np.abs(a) < t, a * a, 0.0)
        return np.array([r.sum(), (r * r).sum()])

    s = _run_sharded(moments, n_samples, seed, workers)
    return _estimate(s[0], s[1], n_samples)


def mc_removed_fraction_shifted_exp(
    eta: float, spec: ShiftedExpSpec, n_samples: int = 10**6, seed: int = 0, workers: int = 1
) -> Estimate:
    t = shifted_exp_threshold(spec, eta)
    norm = spec.second_moment()

    def moments(rng, size):
        a = rng.exponential(1.0 / spec.lam, size) - spec.c
        r = np.where(np.abs(a) < t, a * a, 0.0) / norm
        return np.array([r.sum(), (r * r).sum()])

    s = _run_sharded(moments, n_samples, seed, workers)
    return _estimate(s[0], s[1], n_samples)


def mc_keep_fraction_shifted_exp(
    eta: float, spec: ShiftedExpSpec, n_samples: int = 10**6, seed: int = 0, workers: int = 1
) -> Estimate:
    t = shifted_exp_threshold(spec, eta)

    def moments(rng, size):
        a = rng.exponential(1.0 / spec.lam, size) - spec.c
        k = (np.abs(a) >= t).astype(np.float64)
        return np.array([k.sum(), k.sum()])

    s = _run_sharded(moments, n_samples, seed, workers)
    return _estimate(s[0], s[1], n_samples)


def product_threshold(gspec: GaussianSpec, espec: ShiftedExpSpec, eta: float) -> float:
    """Threshold with ``P(|a_gate * a_up| >= t) = eta`` by quadrature over ``a_gate``."""
    _check_eta(eta)
    if eta == 1:
        return 0.0
    lam, c, sigma = espec.lam, espec.c, gspec.sigma

    def keep(t):
        def integrand(x):
            g = abs(x - c)
            if g == 0:
                return 0.0
            return lam * math.exp(-lam * x) * math.erfc(t / (sigma * g) / _SQRT2)

        pts = [c] if c < 60.0 / lam else None
        val, _ = integrate.quad(integrand, 0.0, c + 60.0 / lam, points=pts, limit=400, epsabs=1e-13, epsrel=1e-11)
        return val

    hi = 1.0
    while keep(hi) > eta:
        hi *= 2.0
    return optimize.brentq(lambda t: keep(t) - eta, 0.0, hi, xtol=1e-14, rtol=1e-12)


@dataclass(frozen=True)
class LossEstimates:
    """Per-element removed energy of the three pruning strategies at equal kept fraction."""

    eta: float
    L_down: Estimate
    L_up: Estimate
    L_gate: Estimate
    up_minus_down: Estimate
    gate_minus_up: Estimate
    keep: tuple[float, float, float]  # realized kept fractions (down, up, gate)

    @property
    def se(self) -> float:
        return max(self.L_down.se, self.L_up.se, self.L_gate.se)


def mc_losses(
    gspec: GaussianSpec,
    espec: ShiftedExpSpec,
    eta: float,
    n_samples: int = 10**6,
    seed: int = 0,
    workers: int = 1,
) -> LossEstimates:
    """Monte-Carlo ``L_down``, ``L_up``, ``L_gate`` with the ``n m sigma_W^2`` factor divided out.

    ``a_up ~ N(0, sigma^2)`` and ``a_gate = x - c`` with ``x ~ Exp(lam)`` are
    independent. Each strategy thresholds its own statistic at kept fraction
    ``eta``: ``a_up`` and ``a_gate`` with their closed forms, the product
    ``a_down`` by quadrature.
    """
    _check_eta(eta)
    t_up = gaussian_threshold(gspec, eta)
    t_gate = shifted_exp_threshold(espec, eta)
    t_down = product_threshold(gspec, espec, eta)

    def moments(rng, size):
        up = rng.standard_normal(size) * gspec.sigma
        gate = rng.exponential(1.0 / espec.lam, size) - espec.c
        down = gate * up
        k_down = np.abs(down) >= t_down
        k_up = np.abs(up) >= t_up
        k_gate = np.abs(gate) >= t_gate
        l_down = np.where(k_down, 0.0, down * down)
        l_up = np.where(k_up, 0.0, down * down)
        l_gate = np.where(k_gate, 0.0, down * down)
        d1 = l_up - l_down
        d2 = l_gate - l_up
        cols = (l_down, l_up, l_gate, d1, d2)
        return np.array(
            [v.sum() for v in cols]
            + [(v * v).sum() for v in cols]
            + [k_down.sum(), k_up.sum(), k_gate.sum()],
            dtype=np.float64,
        )

    s = _run_sharded(moments, n_samples, seed, workers)
    est = [_estimate(s[i], s[i + 5], n_samples) for i in range(5)]
    keep = tuple(float(v) / n_samples for v in s[10:13])
    return LossEstimates(eta, *est, keep=keep)


@dataclass(frozen=True)
class IdentityCheck:
    name: str
    estimate: Estimate
    expected: float

    @property
    def z(self) -> float:
        return self.estimate.z(self.expected)


def moment_identity_checks(
    m: int = 8,
    n: int = 4,
    sigma_w: float = 0.5,
    distribution: str = "gaussian",
    n_samples: int = 10**5,
    seed: int = 0,
    sigma_x: float = 1.0,
    t: float = 0.5,
    workers: int = 1,
) -> list[IdentityCheck]:
    """MC checks of ``E||xW||^2 = n sigma_w^2 E||x||^2`` and ``E[(a - S_t(a)) b] = 0``.

    ``distribution`` selects ``x``: ``"unit"`` (fixed unit vector),
    ``"gaussian"`` (i.i.d. ``N(0, sigma_x^2)``) or ``"shifted_exp"`` (i.i.d.
    ``Exp(11) - 0.28``, not centred, so only the first identity applies).
    """
    spec = ShiftedExpSpec()
    if distribution == "unit":
        ex2 = 1.0
    elif distribution == "gaussian":
        ex2 = m * sigma_x**2
    elif distribution == "shifted_exp":
        ex2 = m * spec.second_moment()
    else:
        raise ValueError(f"unknown distribution {distribution!r}")

    def moments(rng, size):
        if distribution == "unit":
            x = np.zeros((size, m))
            x[:, 0] = 1.0
        elif distribution == "gaussian":
            x = rng.standard_normal((size, m)) * sigma_x
        else:
            x = rng.exponential(1.0 / spec.lam, (size, m)) - spec.c
        W = rng.standard_normal((size, m, n)) * sigma_w
        y = np.einsum("si,sij->sj", x, W)
        norm2 = (y * y).sum(axis=1)
        a = rng.standard_normal(size)
        b = rng.standard_normal(size)
        cross = np.where(np.abs(a) >= t, a, 0.0)
        cross = (a - cross) * b
        return np.array([norm2.sum(), (norm2 * norm2).sum(), cross.sum(), (cross * cross).sum()])

    s = _run_sharded(moments, n_samples, seed, workers)
    checks = [
        IdentityCheck(f"E||xW||^2 ({distribution})", _estimate(s[0], s[1], n_samples), n * sigma_w**2 * ex2),
        IdentityCheck("E[(a - S_t(a)) b]", _estimate(s[2], s[3], n_samples), 0.0),
    ]
    return checks


# ---------------------------------------------------------------------------
# tables

DEFAULT_ETAS = (math.exp(-4.0), 0.05, 0.1, 0.2, 0.3, 0.5)
DEFAULT_PS = (2.0, 3.08, 4.0, 8.0, 11.0)


def fg_rows(etas=DEFAULT_ETAS, ps=DEFAULT_PS) -> list[tuple[float, float, float, float, float]]:
    rows = []
    for p in ps:
        for eta in etas:
            F = F_gaussian(eta)
            G = G_shifted_exp(eta, p)
            rows.append((eta, p, F, G, G - F))
    return rows
