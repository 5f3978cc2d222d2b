"""Forecast step: closure coefficients for the CDF transport equation and its
solution by finite volumes (implicit upwind, dimension-split) or, in the
deterministic-rate case, by characteristics."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter
from scipy.special import ndtr

from .core import ContractError, DiscreteCdf, Grid2D
from .physics import PhysicsConfig, forcing

FAMILIES = (
    "exact_deterministic_k",
    "random_constant_k",
    "white_noise_k",
    "exponential_k",
    "general_quadrature",
)

_ALPHA_LIMIT = 1e-10
_EXP_CLIP = 700.0
MONOTONE_WARN_TOL = 1e-6


@dataclass(frozen=True)
class StatParams:
    """Coordinates of the statistical manifold: moments of the reaction rate
    and, in the random-input case, of the initial/boundary states."""

    k_mean: float | None = None
    k_std: float | None = None
    k_corr_len: float | None = None
    mu0: float | None = None
    sigma0: float | None = None
    mub: float | None = None
    sigmab: float | None = None

    def __post_init__(self):
        if self.k_std is not None and self.k_std < 0:
            raise ContractError("k_std must be nonnegative")
        if self.k_corr_len is not None and not self.k_corr_len > 0:
            raise ContractError("k_corr_len must be positive")
        for name in ("sigma0", "sigmab"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ContractError(f"{name} must be positive")

    def replace(self, **kw) -> "StatParams":
        return dataclasses.replace(self, **kw)

    def get(self, name: str) -> float:
        v = getattr(self, name)
        if v is None:
            raise ContractError(f"parameter {name} is not set")
        return v


@dataclass(frozen=True)
class ClosureSpec:
    """Which closure family supplies the CDF-equation coefficients.

    general_quadrature integrates exp(<k> tau) * C(v tau) over [0, t*] by
    trapezoid rule; a point mass of the covariance at zero lag (nugget)
    contributes half its weight, matching the one-sided integration range.
    """

    family: str
    sign_convention: str = "appendix"
    cov_fn: object | None = None
    nugget: float = 0.0
    quad_points: int = 2000

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown closure family {self.family!r}")
        if self.sign_convention not in ("appendix", "main_text"):
            raise ContractError(f"unknown sign convention {self.sign_convention!r}")
        if self.family == "general_quadrature" and self.cov_fn is None and self.nugget == 0.0:
            raise ContractError("general_quadrature needs cov_fn and/or nugget")


@dataclass(frozen=True)
class ClosureCoeffs:
    q1: float
    q2: np.ndarray
    d22: np.ndarray


def t_star(U, x, t, k_mean, u_max):
    """Memory horizon min{t, x/v, <k>^-1 ln(u_max / U)} (v = 1).

    The log term diverges as U -> 0 and is skipped when <k> <= 0, where the
    corresponding backward characteristic never exits through U = u_max.
    """
    U = np.asarray(U, dtype=float)
    base = np.minimum(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
    if k_mean > _ALPHA_LIMIT:
        with np.errstate(divide="ignore"):
            log_cap = np.where(U > 0, np.log(np.maximum(u_max, 1e-300) / np.where(U > 0, U, 1.0)) / k_mean, np.inf)
        out = np.minimum(base, log_cap)
    else:
        out = base * np.ones_like(U)
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def _expm1_over(alpha, ts):
    """(exp(alpha * ts) - 1) / alpha with the removable alpha -> 0 limit."""
    if abs(alpha) < _ALPHA_LIMIT:
        return np.asarray(ts, dtype=float).copy()
    ex = np.exp(np.clip(alpha * np.asarray(ts, dtype=float), -_EXP_CLIP, _EXP_CLIP))
    return (ex - 1.0) / alpha


def closure_correction(spec: ClosureSpec, phi: StatParams, ts):
    """Variance correction I(t*) entering both the drift and the diffusion."""
    ts = np.asarray(ts, dtype=float)
    if spec.family == "exact_deterministic_k":
        return np.zeros_like(ts)
    k = phi.get("k_mean")
    var = phi.get("k_std") ** 2
    if spec.family == "random_constant_k":
        return var * _expm1_over(k, ts)
    if spec.family == "white_noise_k":
        return np.where(ts > 0, 0.5 * var, 0.0)
    if spec.family == "exponential_k":
        alpha = k - 1.0 / phi.get("k_corr_len")
        return var * _expm1_over(alpha, ts)
    # general_quadrature
    out = np.zeros_like(ts)
    if spec.cov_fn is not None:
        n = spec.quad_points
        w = np.linspace(0.0, 1.0, n + 1)
        flat = ts.reshape(-1)
        res = np.empty_like(flat)
        chunk = max(1, int(2e7) // (n + 1))
        for lo in range(0, flat.size, chunk):
            tau = flat[lo:lo + chunk, None] * w  # each point uses its own [0, t*]
            integrand = np.exp(np.clip(k * tau, -_EXP_CLIP, _EXP_CLIP)) * spec.cov_fn(tau)
            res[lo:lo + chunk] = np.trapezoid(integrand, tau, axis=-1)
        out = res.reshape(ts.shape)
    if spec.nugget:
        out = out + np.where(ts > 0, 0.5 * spec.nugget, 0.0)
    return out


def closure_coefficients(spec: ClosureSpec, phi: StatParams, x, t, U,
                         u_max: float = 1.0, v: float = 1.0) -> ClosureCoeffs:
    """Drift and diffusion of the CDF equation at (x, t, U), broadcasting over
    array-valued x and U."""
    U = np.asarray(U, dtype=float)
    if spec.family == "exact_deterministic_k":
        q2 = -phi.get("k_mean") * U
        return ClosureCoeffs(v, q2, np.zeros_like(q2))
    k = phi.get("k_mean")
    ts = t_star(U, np.asarray(x, dtype=float) / v, t, k, u_max)
    corr = closure_correction(spec, phi, ts)
    q2_base = -k * U
    if spec.sign_convention == "appendix":
        q2 = q2_base + U * corr
    else:
        q2 = q2_base - U * corr
    d22 = np.maximum(U * U * corr, 0.0)
    q2, d22 = np.broadcast_arrays(q2, d22)
    return ClosureCoeffs(v, np.array(q2), np.array(d22))


def _trunc_gauss_cdf(u, mean, std, u_min, u_max):
    lo = ndtr((u_min - mean) / std)
    hi = ndtr((u_max - mean) / std)
    span = max(hi - lo, 1e-300)
    return np.clip((ndtr((np.asarray(u, dtype=float) - mean) / std) - lo) / span, 0.0, 1.0)


def initial_boundary_cdfs(phi: StatParams, deterministic_inputs: bool,
                          cfg: PhysicsConfig, u_min: float, u_max: float):
    """Initial CDF F0(U) and inflow CDF Fb(U, t).

    Deterministic inputs give Heaviside steps at u0 and ub + s(t); random
    inputs give Gaussians truncated to [u_min, u_max].
    """
    if deterministic_inputs:
        def f0(u):
            return (np.asarray(u, dtype=float) >= cfg.u0).astype(float)

        def fb(u, t):
            return (np.asarray(u, dtype=float) >= forcing(t, cfg)).astype(float)
    else:
        mu0, s0 = phi.get("mu0"), phi.get("sigma0")
        mub, sb = phi.get("mub"), phi.get("sigmab")

        def f0(u):
            return _trunc_gauss_cdf(u, mu0, s0, u_min, u_max)

        def fb(u, t):
            shift = forcing(t, cfg) - cfg.ub  # the sinusoid rides on the random baseline
            return _trunc_gauss_cdf(u, mub + shift, sb, u_min, u_max)

    return f0, fb


@dataclass
class CdfSolution:
    grid: Grid2D
    times: np.ndarray
    snapshots: np.ndarray  # (n_times, n_x + 1, n_u + 1)
    warnings: list

    def slice_at(self, x: float, t: float) -> DiscreteCdf:
        """Nearest-node U-slice as a validated CDF."""
        it = int(np.argmin(np.abs(self.times - t)))
        ix = int(np.argmin(np.abs(self.grid.x_nodes - x)))
        vals = np.maximum.accumulate(np.clip(self.snapshots[it, ix], 0.0, 1.0))
        vals[0], vals[-1] = 0.0, 1.0
        return DiscreteCdf(self.grid.u_nodes, vals)

    def min_forward_difference(self) -> float:
        return float(np.min(np.diff(self.snapshots, axis=2)))

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "U", "F"])
            xs, us = self.grid.x_nodes, self.grid.u_nodes
            for it, t in enumerate(self.times):
                for ix, x in enumerate(xs):
                    for iu, u in enumerate(us):
                        w.writerow([f"{t:.17g}", f"{x:.17g}", f"{u:.17g}",
                                    f"{self.snapshots[it, ix, iu]:.17g}"])


def _thomas(sub, diag, sup, rhs):
    """Solve independent tridiagonal systems along the last axis.

    The systems are concatenated into one large banded matrix with the
    off-diagonal entries at block boundaries zeroed, so a single LAPACK
    banded solve handles the whole batch.
    """
    from scipy.linalg import solve_banded

    shape = rhs.shape
    n = shape[-1]
    sub, diag, sup, rhs = (np.ascontiguousarray(a, dtype=float).reshape(-1, n)
                           for a in np.broadcast_arrays(sub, diag, sup, rhs))
    nsys = rhs.shape[0]
    size = nsys * n
    ab = np.zeros((3, size))
    ab[1] = diag.reshape(-1)
    ab[0, 1:] = sup.reshape(-1)[:-1]
    ab[2, :-1] = sub.reshape(-1)[1:]
    if nsys > 1:
        cut = np.arange(1, nsys) * n
        ab[0, cut] = 0.0      # no coupling from the previous block
        ab[2, cut - 1] = 0.0
    x = solve_banded((1, 1), ab, rhs.reshape(-1), overwrite_ab=True,
                     overwrite_b=False, check_finite=False)
    return x.reshape(shape)


def _correction_evaluator(spec: ClosureSpec, phi: StatParams, X, U,
                          u_max: float, v: float):
    """Build corr(t) for the solver loop with the t-independent part of t*
    precomputed.

    t* = min(t, base) with base = min(x/v, cap(U)), so for the closed-form
    families exp(alpha t*) = min/max(exp(alpha base), exp(alpha t)) by
    monotonicity, which avoids re-evaluating exp on the full grid each step.
    """
    k = phi.get("k_mean")
    base = t_star(U, np.asarray(X, dtype=float) / v, np.inf, k, u_max)
    base = np.broadcast_to(base, np.broadcast_shapes(np.shape(X), np.shape(U)))
    if spec.family == "white_noise_k":
        corr = np.where(base > 0, 0.5 * phi.get("k_std") ** 2, 0.0)
        return lambda t: corr
    if spec.family == "general_quadrature":
        return lambda t: closure_correction(spec, phi, np.minimum(t, base))
    var = phi.get("k_std") ** 2
    alpha = k if spec.family == "random_constant_k" else k - 1.0 / phi.get("k_corr_len")
    if abs(alpha) < _ALPHA_LIMIT:
        return lambda t: var * np.minimum(t, base)
    e_base = np.exp(np.clip(alpha * base, -_EXP_CLIP, _EXP_CLIP))
    cut = np.minimum if alpha > 0 else np.maximum

    def corr(t):
        e_t = np.exp(np.clip(alpha * t, -_EXP_CLIP, _EXP_CLIP))
        return var * (cut(e_base, e_t) - 1.0) / alpha

    return corr


def solve_cdf_fv(spec: ClosureSpec, phi: StatParams, cfg: PhysicsConfig,
                 grid: Grid2D, t_end: float | None = None,
                 deterministic_inputs: bool | None = None,
                 store: str = "all") -> CdfSolution:
    """Advance the CDF equation with backward-Euler time stepping.

    Each step applies an implicit upwind sweep in x followed by an implicit
    upwind/central tridiagonal solve in U (dimension splitting; the two
    operators commute exactly whenever the drift has no x dependence).
    Boundary rows F(U_min) = 0 and F(U_max) = 1 are enforced exactly.
    """
    if t_end is None:
        t_end = grid.t_end
    if deterministic_inputs is None:
        deterministic_inputs = spec.family != "exact_deterministic_k"
    n_steps = max(1, int(round(t_end / grid.dt)))
    dt = t_end / n_steps
    xs, us = grid.x_nodes, grid.u_nodes
    du = grid.du
    c = cfg.v * dt / grid.dx

    f0, fb = initial_boundary_cdfs(phi, deterministic_inputs, cfg, grid.u_min, grid.u_max)
    F = np.tile(f0(us), (grid.n_x + 1, 1))
    F[:, 0], F[:, -1] = 0.0, 1.0
    F[0] = fb(us, 0.0)
    F[0, 0], F[0, -1] = 0.0, 1.0

    times = [0.0]
    snaps = [F.copy()] if store == "all" else None
    warnings: list = []
    X = xs[:, None]
    U = us[None, :]
    if spec.family == "exact_deterministic_k":
        corr_fn = None
        q2_fixed = -phi.get("k_mean") * U * np.ones_like(X)
        d22_fixed = np.zeros_like(q2_fixed)
    else:
        corr_fn = _correction_evaluator(spec, phi, X, U, grid.u_max, cfg.v)
        k_mean = phi.get("k_mean")

    for step in range(n_steps):
        t_new = (step + 1) * dt
        # implicit upwind x-sweep (q1 = v > 0), forward substitution from inflow
        G = np.empty_like(F)
        G[0] = fb(us, t_new)
        G[0, 0], G[0, -1] = 0.0, 1.0
        # forward substitution G[i] = (F[i] + c G[i-1]) / (1 + c) as a linear
        # recursion along x
        a, b = 1.0 / (1.0 + c), c / (1.0 + c)
        G[1:], _ = lfilter([a], [1.0, -b], F[1:], axis=0, zi=(b * G[0])[None, :])

        if corr_fn is None:
            q2, d22 = q2_fixed, d22_fixed
        else:
            corr = corr_fn(t_new)
            if spec.sign_convention == "appendix":
                q2 = (corr - k_mean) * U
            else:
                q2 = (-corr - k_mean) * U
            d22 = np.maximum(U * U * corr, 0.0)
        qp = np.maximum(q2, 0.0)
        qm = np.minimum(q2, 0.0)
        dfp = np.empty_like(d22)
        dfm = np.empty_like(d22)
        dfp[:, :-1] = 0.5 * (d22[:, :-1] + d22[:, 1:])
        dfp[:, -1] = 0.0
        dfm[:, 1:] = dfp[:, :-1]
        dfm[:, 0] = 0.0

        sub = -dt * qp / du - dt * dfm / du ** 2
        sup = dt * qm / du - dt * dfp / du ** 2
        diag = 1.0 + dt * (qp - qm) / du + dt * (dfp + dfm) / du ** 2
        rhs = G.copy()
        # Dirichlet rows in U
        sub[:, 0] = sup[:, 0] = 0.0
        diag[:, 0] = 1.0
        rhs[:, 0] = 0.0
        sub[:, -1] = sup[:, -1] = 0.0
        diag[:, -1] = 1.0
        rhs[:, -1] = 1.0

        F = _thomas(sub, diag, sup, rhs)
        if not np.all(np.isfinite(F)):
            raise ArithmeticError(f"non-finite CDF values at t = {t_new:g}")
        F[0] = rhs[0]  # inflow slice is prescribed, not evolved
        min_diff = float(np.min(np.diff(F, axis=1)))
        if min_diff < -MONOTONE_WARN_TOL:
            warnings.append(f"monotonicity violation {min_diff:.3e} at t = {t_new:.6g}")
        times.append(t_new)
        if store == "all":
            snaps.append(F.copy())

    if store == "all":
        snapshots = np.stack(snaps)
        out_times = np.array(times)
    else:
        snapshots = F[None]
        out_times = np.array([times[-1]])
    return CdfSolution(grid, out_times, snapshots, warnings)


def solve_cdf_characteristics(k: float, phi: StatParams, cfg: PhysicsConfig,
                              x: float, t: float, u_nodes,
                              deterministic_inputs: bool = False) -> DiscreteCdf:
    """Exact solution of the deterministic-rate CDF equation at one (x, t).

    x > t pulls the initial CDF back along the characteristic, x <= t the
    inflow CDF; either way the state argument is amplified by the accumulated
    decay factor.
    """
    u = np.asarray(u_nodes, dtype=float)
    f0, fb = initial_boundary_cdfs(phi, deterministic_inputs, cfg, u[0], u[-1])
    if x > t:
        vals = f0(u * np.exp(k * t))
    else:
        vals = fb(u * np.exp(k * x), t - x)
    vals = np.clip(vals, 0.0, 1.0)
    vals[0], vals[-1] = 0.0, 1.0
    return DiscreteCdf(u, vals)
