"""Information-geometric diagnostics: Fisher information on the parameter
manifold and pointwise information-gain profiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ContractError, Grid2D, kl_divergence, pdf_from_cdf
from .mdist import ClosureSpec, StatParams, solve_cdf_characteristics, solve_cdf_fv
from .physics import PhysicsConfig

FIM_DENSITY_FLOOR = 1e-12
FIM_SYMMETRY_TOL = 1e-8


@dataclass(frozen=True)
class FimMatrix:
    coords: tuple
    entries: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.entries, dtype=float)
        object.__setattr__(self, "entries", g)
        object.__setattr__(self, "coords", tuple(self.coords))
        if g.shape != (len(self.coords), len(self.coords)):
            raise ContractError("entries must be square and match coords")
        if np.max(np.abs(g - g.T)) > FIM_SYMMETRY_TOL:
            raise ContractError("metric must be symmetric")
        if np.min(np.diag(g)) < -FIM_SYMMETRY_TOL:
            raise ContractError("diagonal entries must be nonnegative")


def fim_from_density_fn(density_fn, theta: dict, coords, h_rel: float = 1e-3) -> FimMatrix:
    """Finite-difference Fisher information for a parametrized density.

    density_fn maps a coordinate dict to a DiscretePdf on a fixed node set;
    log-density gradients use central differences with relative step h_rel.
    """
    coords = tuple(coords)
    base = density_fn(theta)
    u = base.u_nodes
    f = base.densities

    def logf(th):
        d = density_fn(th)
        return np.log(np.maximum(d.densities, FIM_DENSITY_FLOOR))

    grads = []
    for name in coords:
        h = h_rel * max(abs(theta[name]), 1.0)
        up = dict(theta)
        up[name] = theta[name] + h
        dn = dict(theta)
        dn[name] = theta[name] - h
        grads.append((logf(up) - logf(dn)) / (2.0 * h))

    n = len(coords)
    g = np.empty((n, n))
    for j in range(n):
        for k in range(j, n):
            val = float(np.trapezoid(grads[j] * grads[k] * f, u))
            if not np.isfinite(val):
                raise ArithmeticError(
                    f"non-finite metric entry for ({coords[j]}, {coords[k]})")
            g[j, k] = g[k, j] = val
    return FimMatrix(coords, g)


def fisher_information(spec: ClosureSpec, phi: StatParams, x: float, t: float,
                       coords, cfg: PhysicsConfig, grid: Grid2D,
                       h_rel: float = 1e-3,
                       deterministic_inputs: bool | None = None) -> FimMatrix:
    """Fisher information of the forecast state density at (x, t) with respect
    to the named closure parameters."""
    from .assimilate import forecast_slice

    coords = tuple(coords)

    def density_fn(theta):
        p = phi.replace(**{name: theta[name] for name in coords})
        sl = forecast_slice(p, spec, cfg, grid, x, t,
                            deterministic_inputs=deterministic_inputs)
        return pdf_from_cdf(sl)

    theta0 = {name: phi.get(name) for name in coords}
    return fim_from_density_fn(density_fn, theta0, coords, h_rel=h_rel)


def kl_gain_profile(spec: ClosureSpec, phi_prior: StatParams,
                    phi_post: StatParams, t: float, grid: Grid2D,
                    cfg: PhysicsConfig,
                    deterministic_inputs: bool | None = None):
    """KL divergence of the posterior forecast from the prior forecast as a
    function of x at time t.  Returns (x_nodes, dkl)."""
    xs = grid.x_nodes
    if spec.family == "exact_deterministic_k":
        if deterministic_inputs is None:
            deterministic_inputs = False
        slices = {
            "prior": [solve_cdf_characteristics(phi_prior.get("k_mean"), phi_prior,
                                                cfg, x, t, grid.u_nodes,
                                                deterministic_inputs) for x in xs],
            "post": [solve_cdf_characteristics(phi_post.get("k_mean"), phi_post,
                                               cfg, x, t, grid.u_nodes,
                                               deterministic_inputs) for x in xs],
        }
    else:
        sols = {
            "prior": solve_cdf_fv(spec, phi_prior, cfg, grid, t_end=t,
                                  deterministic_inputs=deterministic_inputs,
                                  store="last"),
            "post": solve_cdf_fv(spec, phi_post, cfg, grid, t_end=t,
                                 deterministic_inputs=deterministic_inputs,
                                 store="last"),
        }
        slices = {key: [sol.slice_at(x, t) for x in xs] for key, sol in sols.items()}
    dkl = np.array([
        kl_divergence(pdf_from_cdf(po), pdf_from_cdf(pr))
        for po, pr in zip(slices["post"], slices["prior"])
    ])
    return xs, dkl
