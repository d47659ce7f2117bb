"""Measurement-update particle flow in a pseudo-time.

A measurement is absorbed by integrating drift ODEs from pseudo-time 0 (the
prior) to 1 (the posterior):

    dx/dl = P H^T R^-1 (y - h(x))
    dP/dl = -P H^T R^-1 H P

Both a per-particle numeric route (:func:`flow_ensemble_ode`) and the
polynomial-map route (:func:`build_flow_map`) are provided; the map route
integrates a single polynomial state alongside the covariance and replaces
every particle integration with one polynomial evaluation.

Two covariance couplings are supported (``cov_coupling``):

* ``"mean"`` -- one shared covariance trajectory, with H frozen at the
  running mean (the polynomial state's constant part).
* ``"particle"`` -- the covariance rides along the flow as part of the
  state: per particle in the numeric route, as polynomials in the map
  route, with H evaluated wherever the state is.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .algebra import (
    AlgebraContext,
    DAScalar,
    DAVector,
    compose,
    constant,
    identity_map,
    partial_derive,
)
from .integrate import IntegratorSpec, Stacked, integrate

__all__ = [
    "FlowError",
    "GaussianBelief",
    "MeasurementModel",
    "LambdaSchedule",
    "Ensemble",
    "geometric_schedule",
    "flow_rhs",
    "cov_rhs",
    "flow_mean_cov",
    "build_flow_map",
    "flow_ensemble_ode",
    "da_jacobian",
]

INNOVATION_MODES = ("nonlinear", "linearized")
COV_COUPLINGS = ("mean", "particle")


class FlowError(RuntimeError):
    """The flow integration produced an invalid covariance or state."""


def _check_symmetric_psd(cov: np.ndarray, what: str) -> None:
    scale = max(np.abs(cov).max(), 1.0)
    if np.abs(cov - cov.T).max() > 1e-10 * scale:
        raise ValueError(f"{what} is not symmetric")
    eigmin = float(np.linalg.eigvalsh(cov).min())
    if eigmin < -1e-10 * max(np.trace(cov), 1e-300):
        raise ValueError(f"{what} is not positive semidefinite (eigmin={eigmin:g})")


@dataclass
class GaussianBelief:
    """Mean and covariance of the state distribution."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.asarray(self.cov, dtype=float)
        n = len(self.mean)
        if self.cov.shape != (n, n):
            raise ValueError(f"cov shape {self.cov.shape} does not match mean ({n},)")
        _check_symmetric_psd(self.cov, "belief covariance")

    @property
    def dim(self) -> int:
        return len(self.mean)

    def information(self):
        """Information pair (S, z) = (P^-1, P^-1 x)."""
        s = np.linalg.inv(self.cov)
        return s, s @ self.mean


@dataclass
class MeasurementModel:
    """Nonlinear measurement y = h(x) + v with Gaussian noise covariance R.

    ``h`` must accept a real state vector, a (N, n) batch, or a polynomial
    state (object array of DAScalar) and return the matching kind.  ``jac``
    optionally supplies the analytic Jacobian for the real paths; the
    polynomial path always differentiates the polynomial image of h.
    """

    h: Callable
    noise_cov: np.ndarray
    dim: int
    jac: Callable | None = None
    _noise_inv: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.noise_cov = np.asarray(self.noise_cov, dtype=float)
        if self.noise_cov.shape != (self.dim, self.dim):
            raise ValueError("noise_cov shape does not match dim")
        scale = np.abs(self.noise_cov).max()
        if np.abs(self.noise_cov - self.noise_cov.T).max() > 1e-12 * scale:
            raise ValueError("noise_cov must be symmetric")
        if np.linalg.eigvalsh(self.noise_cov).min() <= 0:
            raise ValueError("noise_cov must be positive definite")

    @property
    def noise_inv(self) -> np.ndarray:
        if self._noise_inv is None:
            self._noise_inv = np.linalg.inv(self.noise_cov)
        return self._noise_inv

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """dh/dx at a real state (or (N, n) batch -> (N, m, n))."""
        if self.jac is not None:
            return np.asarray(self.jac(x), dtype=float)
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return np.stack([self.jacobian(row) for row in x])
        return da_jacobian(self.h, x, self.dim)


def da_jacobian(h: Callable, x: np.ndarray, m: int) -> np.ndarray:
    """Jacobian of h at x extracted from a first-order polynomial expansion."""
    x = np.asarray(x, dtype=float)
    ctx = AlgebraContext(len(x), 1)
    xp = identity_map(ctx, x).as_object_array()
    hx = _object_vector(h(xp), ctx, m)
    out = np.empty((m, len(x)))
    for i in range(m):
        for j in range(len(x)):
            out[i, j] = partial_derive(hx[i], j).constant
    return out


def _object_vector(values, ctx: AlgebraContext, length: int) -> np.ndarray:
    """Normalize a model output to an object array of DAScalar (constants
    may degrade to plain floats when a component does not depend on x)."""
    arr = np.empty(length, dtype=object)
    for i, v in enumerate(np.asarray(values, dtype=object)):
        arr[i] = v if isinstance(v, DAScalar) else constant(ctx, float(v))
    return arr


@dataclass
class LambdaSchedule:
    """Strictly increasing pseudo-time nodes from 0 to 1."""

    nodes: np.ndarray

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        if (
            self.nodes.ndim != 1
            or len(self.nodes) < 2
            or self.nodes[0] != 0.0
            or self.nodes[-1] != 1.0
            or np.any(np.diff(self.nodes) <= 0)
        ):
            raise ValueError("schedule nodes must satisfy 0 = l0 < l1 < ... < lM = 1")

    def segments(self):
        return zip(self.nodes[:-1], self.nodes[1:])

    def __len__(self):
        return len(self.nodes)


def geometric_schedule(first: float = 0.001, last: float = 1.0, count: int = 50) -> LambdaSchedule:
    """{0} followed by ``count`` geometrically spaced nodes from first to last.

    Small early steps move particles gently where the flow is stiffest;
    later steps grow as the flow relaxes.
    """
    if not (0.0 < first < last <= 1.0):
        raise ValueError(f"need 0 < first < last <= 1, got ({first}, {last})")
    if count < 2:
        raise ValueError("count must be >= 2")
    ratio = (last / first) ** (1.0 / (count - 1))
    nodes = np.concatenate([[0.0], first * ratio ** np.arange(count)])
    nodes[-1] = last
    return LambdaSchedule(nodes)


@dataclass
class Ensemble:
    """Equally weighted particles representing a distribution."""

    particles: np.ndarray

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        if self.particles.shape[0] < 2:
            raise ValueError("an ensemble needs at least 2 particles")
        if not np.isfinite(self.particles).all():
            raise ValueError("ensemble contains non-finite particles")

    @property
    def n_particles(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]


# ---------------------------------------------------------------------------
# drift / covariance right-hand sides


def _matvec(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Matrix * vector where either factor may hold DAScalar entries."""
    vec = np.asarray(vec)
    mat = np.asarray(mat)
    if vec.dtype != object and mat.dtype != object:
        return mat.astype(float) @ vec
    out = np.empty(mat.shape[0], dtype=object)
    for i in range(mat.shape[0]):
        acc = mat[i, 0] * vec[0]
        for j in range(1, mat.shape[1]):
            acc = acc + mat[i, j] * vec[j]
        out[i] = acc
    return out


def _h_and_jac_poly(model: MeasurementModel, x: np.ndarray):
    """h and its Jacobian evaluated at a polynomial state.

    Differentiating h's polynomial image yields the true Jacobian only at an
    identity state (elsewhere it gives the chain-rule composite H * dx/dd),
    so both are expanded around the state's running mean and composed with
    the actual polynomials.
    """
    ctx = x[0].ctx
    n = len(x)
    m = model.dim
    xbar = np.array([xi.constant for xi in x])
    xloc = identity_map(ctx, xbar).as_object_array()
    hloc = _object_vector(model.h(xloc), ctx, m)
    comps = list(hloc)
    for i in range(m):
        for j in range(n):
            comps.append(partial_derive(hloc[i], j))
    composed = compose(
        DAVector(comps, center=xbar), DAVector(list(x), center=xbar)
    ).components
    hx = np.empty(m, dtype=object)
    hx[:] = composed[:m]
    hjx = np.empty((m, n), dtype=object)
    for i in range(m):
        for j in range(n):
            hjx[i, j] = composed[m + i * n + j]
    return hx, hjx


def _innovation_poly(x, hx, hjx, y, innovation):
    m = len(hx)
    innov = np.empty(m, dtype=object)
    if innovation == "nonlinear":
        for i in range(m):
            innov[i] = y[i] - hx[i]
    else:
        # first-order expansion of h about the running mean
        xbar = np.array([xi.constant for xi in x])
        for i in range(m):
            acc = y[i] - hx[i].constant
            for j in range(len(x)):
                acc = acc - hjx[i, j].constant * (x[j] - xbar[j])
            innov[i] = acc
    return innov


def flow_rhs(x, P, model: MeasurementModel, y, innovation: str = "nonlinear",
             center=None):
    """Drift P H^T R^-1 (y - h(x)) of the measurement flow.

    Accepts a real state (n,), a particle batch (N, n), or a polynomial
    state (object array), with H taken at the state itself (polynomial H in
    the polynomial case).  ``P`` may likewise be a constant matrix, a
    (N, n, n) per-particle stack, or an object matrix of polynomials.
    ``innovation='linearized'`` replaces h(x) by its first-order expansion
    about the running mean (``center`` for the real paths).
    """
    if innovation not in INNOVATION_MODES:
        raise ValueError(f"innovation must be one of {INNOVATION_MODES}")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (model.dim,):
        raise ValueError(f"measurement shape {y.shape} does not match model dim {model.dim}")
    x = np.asarray(x)
    if x.dtype == object:
        hx, hjx = _h_and_jac_poly(model, x)
        innov = _innovation_poly(x, hx, hjx, y, innovation)
        w = _matvec(model.noise_inv, innov)
        u = np.empty(len(x), dtype=object)
        for j in range(len(x)):
            acc = hjx[0, j] * w[0]
            for i in range(1, model.dim):
                acc = acc + hjx[i, j] * w[i]
            u[j] = acc
        return _matvec(P, u)
    x = x.astype(float)
    if x.ndim == 1:
        return _flow_rhs_real(x[None, :], P, model, y, innovation, center)[0]
    return _flow_rhs_real(x, P, model, y, innovation, center)


def _flow_rhs_real(x, P, model, y, innovation, center):
    hx = np.atleast_2d(np.asarray(model.h(x), dtype=float))
    hj = model.jacobian(x)
    if hj.ndim == 2:
        hj = hj[None, :, :]
    if innovation == "nonlinear" or center is None:
        innov = y[None, :] - hx
    else:
        center = np.asarray(center, dtype=float)
        hc = np.asarray(model.h(center), dtype=float)
        hjc = model.jacobian(center)
        innov = (y - hc)[None, :] - (x - center[None, :]) @ hjc.T
    w = innov @ model.noise_inv.T
    u = np.einsum("nij,ni->nj", hj, w)
    P = np.asarray(P, dtype=float)
    if P.ndim == 3:
        return np.einsum("njk,nk->nj", P, u)
    return u @ P.T


def cov_rhs(P: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """-P H^T R^-1 H P, exactly symmetrized."""
    P = np.asarray(P, dtype=float)
    H = np.asarray(H, dtype=float)
    hp = H @ P
    out = -hp.T @ np.linalg.solve(np.asarray(R, dtype=float), hp)
    return 0.5 * (out + out.T)


def _cov_rhs_poly(Ppoly: np.ndarray, hjx: np.ndarray, noise_inv: np.ndarray) -> np.ndarray:
    """Polynomial-valued -P H^T R^-1 H P via G = P H^T."""
    n = Ppoly.shape[0]
    m = hjx.shape[0]
    G = np.empty((n, m), dtype=object)
    for i in range(n):
        for k in range(m):
            acc = Ppoly[i, 0] * hjx[k, 0]
            for j in range(1, n):
                acc = acc + Ppoly[i, j] * hjx[k, j]
            G[i, k] = acc
    GR = np.empty((n, m), dtype=object)
    for i in range(n):
        for k in range(m):
            acc = G[i, 0] * noise_inv[0, k]
            for p in range(1, m):
                acc = acc + G[i, p] * noise_inv[p, k]
            GR[i, k] = acc
    out = np.empty((n, n), dtype=object)
    for i in range(n):
        for j in range(i, n):
            acc = GR[i, 0] * G[j, 0]
            for p in range(1, m):
                acc = acc + GR[i, p] * G[j, p]
            out[i, j] = out[j, i] = -1.0 * acc
    return out


# ---------------------------------------------------------------------------
# flow drivers


def _fix_cov(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    eigmin = float(np.linalg.eigvalsh(P).min())
    if eigmin < -1e-10 * max(np.trace(P), 1e-300):
        raise FlowError(
            f"flow covariance lost positive semidefiniteness (eigmin={eigmin:g}); "
            "the pseudo-time steps are too large"
        )
    return P


def _run_segments(rhs, state, schedule: LambdaSchedule, spec: IntegratorSpec, fix):
    for lam0, lam1 in schedule.segments():
        state = integrate(rhs, state, lam0, lam1, spec)
        state = fix(state)
    return state


def flow_mean_cov(prior: GaussianBelief, model: MeasurementModel, y,
                  schedule: LambdaSchedule, spec: IntegratorSpec,
                  innovation: str = "nonlinear") -> GaussianBelief:
    """Integrate the mean/covariance flow ODEs from prior to posterior."""

    def rhs(s, lam):
        xbar, P = s.parts
        hbar = model.jacobian(xbar)
        return Stacked(
            flow_rhs(xbar, P, model, y, innovation, center=xbar),
            cov_rhs(P, hbar, model.noise_cov),
        )

    def fix(s):
        return Stacked(s.parts[0], _fix_cov(s.parts[1]))

    out = _run_segments(rhs, Stacked(prior.mean.copy(), prior.cov.copy()),
                        schedule, spec, fix)
    return GaussianBelief(out.parts[0], out.parts[1])


def build_flow_map(prior: GaussianBelief, model: MeasurementModel, y,
                   schedule: LambdaSchedule, order: int, spec: IntegratorSpec,
                   innovation: str = "nonlinear",
                   cov_coupling: str = "mean") -> DAVector:
    """Polynomial flow map from prior deviations to posterior states.

    The polynomial state starts as the identity around the prior mean and is
    integrated through the drift with a polynomial-valued H.  Under
    ``cov_coupling="mean"`` the covariance entering the drift follows its
    own real-valued ODE with H frozen at the running mean; under
    ``"particle"`` the covariance is expanded in the deviation variables as
    well, so evaluating the map reproduces per-particle covariance flows.
    """
    if cov_coupling not in COV_COUPLINGS:
        raise ValueError(f"cov_coupling must be one of {COV_COUPLINGS}")
    if cov_coupling == "particle" and innovation == "linearized":
        raise ValueError("linearized innovation is defined about the running mean, "
                         "which the particle coupling does not carry")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if not np.isfinite(y).all():
        raise ValueError("measurement must be finite")
    n = prior.dim
    ctx = AlgebraContext(n, order)
    x0 = identity_map(ctx, prior.mean).as_object_array()

    if cov_coupling == "mean":
        def rhs(s, lam):
            x, P = s.parts
            xbar = np.array([xi.constant for xi in x])
            hbar = model.jacobian(xbar)
            return Stacked(
                flow_rhs(x, P, model, y, innovation),
                cov_rhs(P, hbar, model.noise_cov),
            )

        def fix(s):
            return Stacked(s.parts[0], _fix_cov(s.parts[1]))

        out = _run_segments(rhs, Stacked(x0, prior.cov.copy()), schedule, spec, fix)
    else:
        P0 = np.empty((n, n), dtype=object)
        for i in range(n):
            for j in range(n):
                P0[i, j] = constant(ctx, prior.cov[i, j])

        def rhs(s, lam):
            x, Ppoly = s.parts
            hx, hjx = _h_and_jac_poly(model, x)
            innov = _innovation_poly(x, hx, hjx, y, innovation)
            w = _matvec(model.noise_inv, innov)
            u = np.empty(n, dtype=object)
            for j in range(n):
                acc = hjx[0, j] * w[0]
                for i in range(1, model.dim):
                    acc = acc + hjx[i, j] * w[i]
                u[j] = acc
            return Stacked(_matvec(Ppoly, u),
                           _cov_rhs_poly(Ppoly, hjx, model.noise_inv))

        def fix(s):
            x, Ppoly = s.parts
            Pbar = np.array([[Ppoly[i, j].constant for j in range(n)] for i in range(n)])
            _fix_cov(Pbar)
            sym = np.empty((n, n), dtype=object)
            for i in range(n):
                sym[i, i] = Ppoly[i, i]
                for j in range(i + 1, n):
                    sym[i, j] = sym[j, i] = 0.5 * (Ppoly[i, j] + Ppoly[j, i])
            return Stacked(x, sym)

        out = _run_segments(rhs, Stacked(x0, P0), schedule, spec, fix)

    return DAVector(list(out.parts[0]), center=prior.mean,
                    metadata="flow lambda 0->1")


def flow_ensemble_ode(particles, prior: GaussianBelief, model: MeasurementModel,
                      y, schedule: LambdaSchedule, spec: IntegratorSpec,
                      innovation: str = "nonlinear",
                      cov_coupling: str = "mean"):
    """Flow every particle through the drift ODE.

    Under ``cov_coupling="mean"`` all particles share one covariance
    trajectory, integrated from the prior covariance with H evaluated at the
    running prior mean; under ``"particle"`` each particle carries its own
    covariance (initialized at the prior covariance) with H evaluated at the
    particle.  Each particle's drift always evaluates H at the particle
    itself.  Returns the kind it was given (Ensemble in, Ensemble out).
    """
    if cov_coupling not in COV_COUPLINGS:
        raise ValueError(f"cov_coupling must be one of {COV_COUPLINGS}")
    if cov_coupling == "particle" and innovation == "linearized":
        raise ValueError("linearized innovation is defined about the running mean, "
                         "which the particle coupling does not carry")
    wrap = isinstance(particles, Ensemble)
    x = particles.particles if wrap else np.atleast_2d(np.asarray(particles, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))

    if cov_coupling == "mean":
        def rhs(s, lam):
            xbar, P, X = s.parts
            hbar = model.jacobian(xbar)
            return Stacked(
                flow_rhs(xbar, P, model, y, innovation, center=xbar),
                cov_rhs(P, hbar, model.noise_cov),
                flow_rhs(X, P, model, y, innovation, center=xbar),
            )

        def fix(s):
            return Stacked(s.parts[0], _fix_cov(s.parts[1]), s.parts[2])

        out = _run_segments(
            rhs, Stacked(prior.mean.copy(), prior.cov.copy(), x.copy()),
            schedule, spec, fix)
        flowed = out.parts[2]
    else:
        PP0 = np.broadcast_to(prior.cov, (x.shape[0],) + prior.cov.shape).copy()

        def rhs(s, lam):
            X, PP = s.parts
            hj = model.jacobian(X)
            innov = y[None, :] - np.atleast_2d(np.asarray(model.h(X), dtype=float))
            w = innov @ model.noise_inv.T
            u = np.einsum("nij,ni->nj", hj, w)
            dX = np.einsum("njk,nk->nj", PP, u)
            G = np.einsum("nij,nkj->nik", PP, hj)
            dPP = -np.einsum("nip,pq,njq->nij", G, model.noise_inv, G)
            return Stacked(dX, dPP)

        def fix(s):
            X, PP = s.parts
            PP = 0.5 * (PP + np.swapaxes(PP, 1, 2))
            if np.min(np.diagonal(PP, axis1=1, axis2=2)) < -1e-10 * max(
                float(np.trace(prior.cov)), 1e-300
            ):
                raise FlowError("a per-particle flow covariance lost positive "
                                "semidefiniteness; the pseudo-time steps are too large")
            return Stacked(X, PP)

        out = _run_segments(rhs, Stacked(x.copy(), PP0), schedule, spec, fix)
        flowed = out.parts[0]

    if not np.isfinite(flowed).all():
        raise FlowError("particle flow produced non-finite particles")
    return Ensemble(flowed) if wrap else flowed
