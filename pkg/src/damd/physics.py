"""Ground-truth physical model: 1D advection with linear decay, u_t + v u_x = -k(x) u.

Holds the analytic characteristic solution, random-field sampling for k(x),
synthetic observation generation, an upwind finite-volume solver used by the
ensemble baseline, and variogram post-processing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import ContractError, Grid2D

COV_JITTER = 1e-10


def make_rng(seed, stream: int = 0) -> np.random.Generator:
    """Philox counter-based generator keyed on (seed, stream).

    Philox-4x64-10 is fully specified by its key, so streams are reproducible
    from the two integers alone.
    """
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream)]))


@dataclass(frozen=True)
class KField:
    """Discretized reaction-rate field: one value per grid cell of width dx."""

    kind: str  # constant | white | exponential
    mean: float
    std: float
    corr_len: float | None
    node_values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "node_values", np.asarray(self.node_values, dtype=float))
        if self.kind not in ("constant", "white", "exponential"):
            raise ContractError(f"unknown field kind {self.kind!r}")
        if self.std < 0:
            raise ContractError("std must be nonnegative")
        if self.kind == "exponential" and not (self.corr_len and self.corr_len > 0):
            raise ContractError("exponential field needs corr_len > 0")

    @classmethod
    def constant(cls, k: float, n_x: int) -> "KField":
        return cls("constant", k, 0.0, None, np.full(n_x, float(k)))


@dataclass(frozen=True)
class PhysicsConfig:
    u0: float = 0.4
    ub: float = 0.5
    a: float = 0.1
    nu: float = 1.0
    phase: float = 3.0 * np.pi / 2.0
    v: float = 1.0
    k_field: KField | None = None

    def __post_init__(self):
        if not self.v > 0:
            raise ContractError("velocity must be positive")


@dataclass(frozen=True)
class Measurement:
    x: float
    t: float
    d: float
    sigma_eps: float


@dataclass(frozen=True)
class MeasurementSet:
    records: tuple

    def __post_init__(self):
        for r in self.records:
            if not r.sigma_eps > 0:
                raise ContractError("sigma_eps must be positive")
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["idx", "x", "t", "d", "sigma_eps"])
            for i, r in enumerate(self.records):
                w.writerow([i, f"{r.x:.17g}", f"{r.t:.17g}", f"{r.d:.17g}", f"{r.sigma_eps:.17g}"])

    @classmethod
    def from_csv(cls, path):
        recs = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                recs.append(Measurement(float(row["x"]), float(row["t"]),
                                        float(row["d"]), float(row["sigma_eps"])))
        return cls(tuple(recs))


def k_field_to_csv(kf: KField, grid: Grid2D, path):
    xs = grid.x_min + (np.arange(len(kf.node_values)) + 0.5) * grid.dx
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "k"])
        for x, k in zip(xs, kf.node_values):
            w.writerow([f"{x:.17g}", f"{k:.17g}"])


def forcing(t, cfg: PhysicsConfig):
    """Boundary signal u(0, t) = ub + a sin(2 pi nu t + phase)."""
    return cfg.ub + cfg.a * np.sin(2.0 * np.pi * cfg.nu * t + cfg.phase)


def _k_line_integral(kf: KField, dx: float, x_lo, x_hi):
    """Integral of the piecewise-constant field over [x_lo, x_hi] (exact)."""
    vals = kf.node_values
    n = len(vals)
    cum = np.concatenate(([0.0], np.cumsum(vals) * dx))

    def antider(x):
        x = np.clip(np.asarray(x, dtype=float), 0.0, n * dx)
        idx = np.minimum((x / dx).astype(int), n - 1)
        return cum[idx] + vals[idx] * (x - idx * dx)

    return antider(x_hi) - antider(x_lo)


def analytic_state(x, t, cfg: PhysicsConfig, dx: float | None = None):
    """Exact solution along characteristics (unit slope since v = 1).

    x > t: the initial state decayed over [x - t, x]; x <= t: the boundary
    signal emitted at t - x, decayed over [0, x].
    """
    kf = cfg.k_field
    if kf is None:
        raise ContractError("PhysicsConfig.k_field must be set")
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if dx is None:
        dx = 1.0 / len(kf.node_values)
    from_ic = x > t
    decay_ic = _k_line_integral(kf, dx, np.maximum(x - t, 0.0), x)
    decay_bc = _k_line_integral(kf, dx, 0.0, x)
    u_ic = cfg.u0 * np.exp(-decay_ic)
    u_bc = forcing(np.maximum(t - x, 0.0), cfg) * np.exp(-decay_bc)
    out = np.where(from_ic, u_ic, u_bc)
    return float(out) if out.ndim == 0 else out


def sample_k_field(kind, mean, std, corr_len, grid: Grid2D, seed, stream: int = 0) -> KField:
    """One realization of the reaction-rate field on the grid cells.

    constant: a single Gaussian draw; white: i.i.d. per-cell draws with
    pointwise variance std**2; exponential: joint Gaussian with covariance
    std**2 exp(-|x - x'| / corr_len) via Cholesky (diagonal jitter 1e-10).
    """
    rng = make_rng(seed, stream)
    n = grid.n_x
    if std < 0:
        raise ContractError("std must be nonnegative")
    if kind == "constant":
        vals = np.full(n, mean + std * rng.standard_normal())
    elif kind == "white":
        vals = mean + std * rng.standard_normal(n)
    elif kind == "exponential":
        if not (corr_len and corr_len > 0):
            raise ContractError("exponential field needs corr_len > 0")
        xs = grid.x_min + (np.arange(n) + 0.5) * grid.dx
        cov = std ** 2 * np.exp(-np.abs(xs[:, None] - xs[None, :]) / corr_len)
        cov[np.diag_indices(n)] += COV_JITTER
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ArithmeticError("covariance not positive definite") from exc
        vals = mean + chol @ rng.standard_normal(n)
    else:
        raise ContractError(f"unknown field kind {kind!r}")
    return KField(kind, mean, std, corr_len, vals)


def generate_observations(cfg: PhysicsConfig, locations, sigma_eps, noise_seed,
                          dx: float | None = None) -> MeasurementSet:
    """Noisy point observations d = u(x, t) + eps, eps ~ N(0, sigma_eps**2)."""
    rng = make_rng(noise_seed, 1)
    recs = []
    for (x, t) in locations:
        u = analytic_state(x, t, cfg, dx=dx)
        eps = sigma_eps * rng.standard_normal() if sigma_eps > 0 else 0.0
        recs.append(Measurement(float(x), float(t), float(u + eps),
                                float(sigma_eps) if sigma_eps > 0 else 1e-12))
    return MeasurementSet(tuple(recs))


def two_sensor_schedule(xs=(0.1, 0.8), ts=None):
    """Time-major cross product of sensor locations and sampling times."""
    if ts is None:
        ts = np.arange(0.15, 0.6 + 1e-12, 0.05)
    locs = []
    for t in ts:
        for x in sorted(xs):
            locs.append((float(x), float(t)))
    return locs


def solve_physical_fv(k_values, cfg: PhysicsConfig, dx: float, t_end: float,
                      cfl: float = 0.9):
    """Explicit upwind solve of u_t + v u_x = -k(x) u on cell centers.

    k_values may be a single field (shape (n,)) or an ensemble (shape (m, n));
    the ensemble is advanced in lockstep.  Returns cell-center values at t_end.
    """
    k = np.atleast_2d(np.asarray(k_values, dtype=float))
    n = k.shape[1]
    n_steps = max(1, int(np.ceil(cfg.v * t_end / (cfl * dx))))
    dt = t_end / n_steps
    c = cfg.v * dt / dx
    u = np.full(k.shape, cfg.u0)
    for step in range(n_steps):
        t_new = (step + 1) * dt
        upstream = np.empty_like(u)
        upstream[:, 1:] = u[:, :-1]
        upstream[:, 0] = forcing(t_new, cfg)
        u = u - c * (u - upstream) - dt * k * u
    out = u
    return out[0] if np.asarray(k_values).ndim == 1 else out


def empirical_semivariogram(field_samples, grid: Grid2D, bin_width: float | None = None,
                            max_lag: float | None = None):
    """gamma(h) = mean squared increment / 2 over cell pairs binned by lag,
    averaged over the supplied field realizations.  Empty bins are omitted."""
    if len(field_samples) < 2:
        raise ContractError("need at least two field samples")
    dx = grid.dx
    if bin_width is None:
        bin_width = 5.0 * dx
    if max_lag is None:
        max_lag = 0.5 * (grid.x_max - grid.x_min)
    vals = np.stack([np.asarray(f.node_values, dtype=float) for f in field_samples])
    n = vals.shape[1]
    xs = (np.arange(n) + 0.5) * dx
    lags, gammas = [], []
    n_bins = int(np.ceil(max_lag / bin_width))
    max_sep = int(np.floor(max_lag / dx))
    # group integer cell separations by lag bin
    seps = np.arange(1, max_sep + 1)
    bin_of = np.minimum((seps * dx / bin_width).astype(int), n_bins - 1)
    for b in range(n_bins):
        ss = seps[bin_of == b]
        if ss.size == 0:
            continue
        num = 0.0
        cnt = 0
        for s in ss:
            d = vals[:, s:] - vals[:, :-s]
            num += np.sum(d * d)
            cnt += d.size
        if cnt == 0:
            continue
        lags.append(float(np.mean(ss) * dx))
        gammas.append(0.5 * num / cnt)
    return np.array(lags), np.array(gammas)
