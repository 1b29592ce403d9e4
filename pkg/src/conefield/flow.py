"""Flow integration: trajectories, the prolonged (variational) flow, fixed
points, limit cycles, monodromy and Floquet data.

The default stepper is an embedded Dormand-Prince 4(5) pair with PI-free
step control; a fixed-step classical RK4 is available for oracle-style
reproducibility. Dense output between accepted nodes is cubic Hermite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConvergenceError, DivergenceError, EigenbasisError,
                     MaxStepsError, NotOscillatingError, ResolutionError)
from .vectorfield import compile_field, compile_jacobian, eval_field

# Dormand-Prince 4(5) tableau (dopri5); the 4th-order difference row gives
# the local error estimate, the 5th-order solution propagates.
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_ERR = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk45"            # "rk45" adaptive pair | "rk4" fixed step
    initial_step: float = 1e-3
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    max_steps: int = 5_000_000
    divergence_radius: float = 1e6

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.divergence_radius <= 0:
            raise ValueError("divergence radius must be positive")
        if self.max_steps <= 0:
            raise ValueError("max steps must be positive")


DEFAULT_CONFIG = IntegratorConfig()


def integrate_ode(rhs, y0, t_end, cfg=DEFAULT_CONFIG, *, t0=0.0, norm_dim=None,
                  record=True):
    """Drive rhs(t, y) from (t0, y0) to t_end (forward or backward).

    Returns (times, states, derivs) as arrays; when record=False only the
    final node is kept. norm_dim limits the divergence-radius check to the
    leading entries of y (the state part of augmented systems).
    """
    y = np.asarray(y0, dtype=float).copy()
    nd = len(y) if norm_dim is None else norm_dim
    span = t_end - t0
    if span == 0.0:
        f0 = np.asarray(rhs(t0, y), dtype=float)
        return (np.array([t0]), np.array([y]), np.array([f0]))
    direction = 1.0 if span > 0 else -1.0

    if cfg.method == "rk4":
        return _fixed_rk4(rhs, y, t0, t_end, cfg, nd, record)
    if cfg.method != "rk45":
        raise ValueError(f"unknown integrator method {cfg.method!r}")

    t = t0
    f = np.asarray(rhs(t, y), dtype=float)
    times, states, derivs = [t], [y.copy()], [f.copy()]
    h = direction * min(abs(cfg.initial_step), abs(span))
    k = [np.empty_like(y) for _ in range(7)]
    steps = 0
    while (t_end - t) * direction > 0.0:
        if steps >= cfg.max_steps:
            raise MaxStepsError(f"exceeded {cfg.max_steps} steps at t={t}")
        if abs(h) > abs(t_end - t):
            h = t_end - t
        k[0] = f
        ynew, fnew, err = _dp_step(rhs, t, y, f, h, k)
        scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(ynew))
        enorm = math.sqrt(float(np.mean((err / scale) ** 2)))
        steps += 1
        if enorm <= 1.0 or abs(h) <= 1e-14 * max(1.0, abs(t)):
            t = t + h
            y = ynew
            f = fnew
            if record:
                times.append(t)
                states.append(y.copy())
                derivs.append(f.copy())
            snorm = float(np.linalg.norm(y[:nd]))
            if not math.isfinite(snorm) or snorm > cfg.divergence_radius:
                raise DivergenceError(
                    f"trajectory left divergence radius {cfg.divergence_radius} "
                    f"at t={t}", t=t, state=y[:nd].copy())
        factor = 0.9 * enorm ** -0.2 if enorm > 0 else 5.0
        h *= min(5.0, max(0.2, factor))
    if not record:
        times, states, derivs = [t], [y], [f]
    return (np.asarray(times), np.asarray(states), np.asarray(derivs))


def _dp_step(rhs, t, y, f, h, k):
    for i in range(1, 7):
        acc = y + h * (_DP_A[i][0] * k[0])
        for j in range(1, i):
            acc = acc + (h * _DP_A[i][j]) * k[j]
        k[i] = np.asarray(rhs(t + _DP_C[i] * h, acc), dtype=float)
    ynew = y + h * (_DP_B5[0] * k[0] + _DP_B5[2] * k[2] + _DP_B5[3] * k[3]
                    + _DP_B5[4] * k[4] + _DP_B5[5] * k[5])
    err = h * (_DP_ERR[0] * k[0] + _DP_ERR[2] * k[2] + _DP_ERR[3] * k[3]
               + _DP_ERR[4] * k[4] + _DP_ERR[5] * k[5] + _DP_ERR[6] * k[6])
    # FSAL: k7 = f(t+h, ynew) equals next step's k1
    fnew = k[6]
    return ynew, fnew, err


def _dp_step_k7(rhs, t, y, h, k):
    k[6] = np.asarray(rhs(t + h, y), dtype=float)


def _fixed_rk4(rhs, y, t0, t_end, cfg, nd, record):
    h = math.copysign(abs(cfg.initial_step), t_end - t0)
    n_steps = max(1, int(math.ceil(abs((t_end - t0) / h) - 1e-12)))
    if n_steps > cfg.max_steps:
        raise MaxStepsError(f"fixed-step plan needs {n_steps} > {cfg.max_steps} steps")
    t = t0
    f = np.asarray(rhs(t, y), dtype=float)
    times, states, derivs = [t], [y.copy()], [f.copy()]
    for i in range(n_steps):
        hh = (t_end - t) if i == n_steps - 1 else h
        k1 = f
        k2 = np.asarray(rhs(t + 0.5 * hh, y + 0.5 * hh * k1), dtype=float)
        k3 = np.asarray(rhs(t + 0.5 * hh, y + 0.5 * hh * k2), dtype=float)
        k4 = np.asarray(rhs(t + hh, y + hh * k3), dtype=float)
        y = y + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = t + hh
        f = np.asarray(rhs(t, y), dtype=float)
        snorm = float(np.linalg.norm(y[:nd]))
        if not math.isfinite(snorm) or snorm > cfg.divergence_radius:
            raise DivergenceError(f"trajectory left divergence radius at t={t}",
                                  t=t, state=y[:nd].copy())
        if record:
            times.append(t)
            states.append(y.copy())
            derivs.append(f.copy())
    if not record:
        times, states, derivs = [t], [y], [f]
    return (np.asarray(times), np.asarray(states), np.asarray(derivs))


def _hermite(t, t0, t1, y0, y1, f0, f1):
    h = t1 - t0
    s = (t - t0) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


@dataclass
class Trajectory:
    """Sampled orbit with cubic-Hermite dense output between nodes."""

    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray

    @property
    def t_end(self):
        return float(self.times[-1])

    @property
    def end_state(self):
        return self.states[-1]

    def sample(self, t):
        ts = self.times
        ascending = ts[-1] >= ts[0]
        tt = ts if ascending else ts[::-1]
        i = int(np.searchsorted(tt, t, side="right")) - 1
        i = min(max(i, 0), len(ts) - 2)
        if not ascending:
            i = len(ts) - 2 - i
        t0, t1 = ts[i], ts[i + 1]
        if t0 == t1:
            return self.states[i].copy()
        return _hermite(t, t0, t1, self.states[i], self.states[i + 1],
                        self.derivs[i], self.derivs[i + 1])


@dataclass
class TangentTrajectory:
    """Joint orbit of (x, M): M(t) columns are prolonged-flow images of the
    initial tangent basis; dM/dt = J(x(t)) M."""

    times: np.ndarray
    states: np.ndarray       # (N, n)
    frames: np.ndarray       # (N, n, n)
    state_derivs: np.ndarray
    frame_derivs: np.ndarray

    @property
    def end_state(self):
        return self.states[-1]

    @property
    def end_frame(self):
        return self.frames[-1]

    def sample(self, t):
        ts = self.times
        i = int(np.searchsorted(ts, t, side="right")) - 1
        i = min(max(i, 0), len(ts) - 2)
        t0, t1 = ts[i], ts[i + 1]
        if t0 == t1:
            return self.states[i].copy(), self.frames[i].copy()
        x = _hermite(t, t0, t1, self.states[i], self.states[i + 1],
                     self.state_derivs[i], self.state_derivs[i + 1])
        M = _hermite(t, t0, t1, self.frames[i], self.frames[i + 1],
                     self.frame_derivs[i], self.frame_derivs[i + 1])
        return x, M


def _field_rhs(spec):
    fld = compile_field(spec)

    def rhs(t, y):
        return fld(*y)
    return rhs


def integrate(spec, x0, t_end, cfg=DEFAULT_CONFIG):
    """Flow the state from x0 over [0, t_end]; t_end may be negative."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (spec.n,):
        raise ValueError(f"x0 must have length {spec.n}")
    times, states, derivs = integrate_ode(_field_rhs(spec), x0, float(t_end), cfg)
    return Trajectory(times, states, derivs)


def integrate_prolonged(spec, x0, M0, t_end, cfg=DEFAULT_CONFIG):
    """Flow (x, M) under the prolonged dynamics; with M0 = I the final frame
    is the flow differential at x0 for time t_end."""
    n = spec.n
    x0 = np.asarray(x0, dtype=float)
    M0 = np.asarray(M0, dtype=float)
    if M0.shape != (n, n):
        raise ValueError(f"M0 must be {n}x{n}")
    fld = compile_field(spec)
    jac = compile_jacobian(spec)

    def rhs(t, y):
        x = y[:n]
        dy = np.empty_like(y)
        dy[:n] = fld(*x)
        J = np.asarray(jac(*x))
        dy[n:] = (J @ y[n:].reshape(n, n)).ravel()
        return dy

    y0 = np.concatenate([x0, M0.ravel()])
    times, ys, dys = integrate_ode(rhs, y0, float(t_end), cfg, norm_dim=n)
    return TangentTrajectory(
        times=times,
        states=ys[:, :n],
        frames=ys[:, n:].reshape(-1, n, n),
        state_derivs=dys[:, :n],
        frame_derivs=dys[:, n:].reshape(-1, n, n),
    )


# --- fixed points -----------------------------------------------------------

@dataclass
class FixedPointModel:
    """Fixed point with eigendata sorted by descending real part.

    left_vectors[j] is normalized against right_vectors[:, j] so that
    v_j . u_j = 1 (biorthogonal rows)."""

    x_star: np.ndarray
    jacobian: np.ndarray
    eigenvalues: np.ndarray      # complex, Re descending
    right_vectors: np.ndarray    # columns u_j, unit norm
    left_vectors: np.ndarray     # rows v_j, v_j . u_k = delta_jk
    stable: bool

    @property
    def n(self):
        return len(self.x_star)


def find_fixed_point(spec, guess, cfg=DEFAULT_CONFIG, *, max_iter=60,
                     cond_limit=1e12):
    """Newton iteration for f(x*) = 0 from the guess, plus eigenanalysis."""
    from .vectorfield import eval_jacobian

    guess = np.asarray(guess, dtype=float)
    tol = 1e-12 * (1.0 + float(np.linalg.norm(guess)))
    x = guess.copy()
    for _ in range(max_iter):
        fx = eval_field(spec, x)
        if float(np.linalg.norm(fx)) <= tol:
            break
        J = eval_jacobian(spec, x)
        try:
            dx = np.linalg.solve(J, fx)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"singular Jacobian during Newton at {x}") from exc
        x = x - dx
        if float(np.linalg.norm(x)) > cfg.divergence_radius:
            raise ConvergenceError("Newton iterate left the divergence radius")
    else:
        raise ConvergenceError(
            f"Newton did not reach |f| <= {tol:.3e} in {max_iter} iterations",
            residual=float(np.linalg.norm(eval_field(spec, x))))

    J = eval_jacobian(spec, x)
    lam, U = np.linalg.eig(J)
    order = np.lexsort((-lam.imag, -lam.real))
    lam = lam[order]
    U = U[:, order]
    U = U / np.linalg.norm(U, axis=0, keepdims=True)
    cond = float(np.linalg.cond(U))
    if not math.isfinite(cond) or cond > cond_limit:
        raise EigenbasisError(
            f"eigenvector matrix condition {cond:.3e} exceeds {cond_limit:.1e}: "
            "eigenvectors are not reliably independent")
    V = np.linalg.inv(U)  # rows satisfy V[j] . U[:, k] = delta_jk
    resid = float(np.linalg.norm(J @ U - U * lam[None, :]))
    if resid > 1e-10 * max(1.0, float(np.linalg.norm(J))):
        raise EigenbasisError(f"eigen residual {resid:.3e} too large")
    return FixedPointModel(
        x_star=x, jacobian=J, eigenvalues=lam, right_vectors=U,
        left_vectors=V, stable=bool(np.all(lam.real < 0)))


# --- limit cycles -----------------------------------------------------------

@dataclass
class LimitCycleModel:
    """Stable hyperbolic limit cycle: anchor, period, dense samples, and
    monodromy/Floquet data. Samples are phase-uniform over [0, 2pi)."""

    period: float
    omega: float
    anchor: np.ndarray
    phases: np.ndarray           # theta_k, uniform on [0, 2pi)
    points: np.ndarray           # (K, n)
    tangents: np.ndarray         # f at the sample points
    normals: np.ndarray          # unit, tangent-orthogonal (planar)
    monodromy: np.ndarray
    floquet_exponents: np.ndarray   # nontrivial, Re descending
    trivial_multiplier: complex
    _angle_table: tuple = field(default=None, repr=False)

    @property
    def n(self):
        return len(self.anchor)

    def angle_table(self):
        """Polar angles of the cycle samples, sorted, with wraparound pads.
        Valid when the cycle is star-shaped about the origin."""
        if self._angle_table is None:
            ang = np.arctan2(self.points[:, 1], self.points[:, 0])
            order = np.argsort(ang)
            pts = self.points[order]
            nrm = self.normals[order]
            ang = ang[order]
            # pad one sample on each side for wraparound interpolation
            ang = np.concatenate([[ang[-1] - 2 * math.pi], ang, [ang[0] + 2 * math.pi]])
            pts = np.vstack([pts[-1], pts, pts[0]])
            nrm = np.vstack([nrm[-1], nrm, nrm[0]])
            self._angle_table = (ang, pts, nrm)
        return self._angle_table


def _poincare_crossings(traj, p, normal, fld, *, skip_until=0.0, refine_tol=1e-12):
    """Same-direction crossings of the hyperplane through p with the given
    normal, refined by bisection on the dense output."""
    s = (traj.states - p[None, :]) @ normal
    out = []
    for i in range(len(s) - 1):
        if traj.times[i + 1] <= skip_until:
            continue
        if s[i] < 0.0 <= s[i + 1]:
            lo, hi = traj.times[i], traj.times[i + 1]
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if float((traj.sample(mid) - p) @ normal) < 0.0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < refine_tol:
                    break
            tc = 0.5 * (lo + hi)
            xc = traj.sample(tc)
            if float(np.dot(normal, fld(*xc))) > 0.0:
                out.append((tc, xc))
    return out


def find_limit_cycle(spec, x0, cfg=DEFAULT_CONFIG, *, transient=60.0,
                     closure_tol=1e-9, max_time=2000.0, n_samples=1024,
                     unit_multiplier_tol=1e-5):
    """Locate an attracting periodic orbit from x0.

    Runs a transient, erects a Poincare section orthogonal to the flow at
    the arrival point, refines same-direction crossings by bisection, and
    accepts the period once successive return points agree to closure_tol.
    Dense samples, the monodromy matrix over one period and the Floquet
    exponents are computed from the anchor.
    """
    if spec.n != 2:
        raise NotOscillatingError(
            "limit-cycle analysis is implemented for planar systems only")
    fld = compile_field(spec)
    tr = integrate(spec, np.asarray(x0, dtype=float), float(transient), cfg)
    p = tr.end_state.copy()
    fp = np.array(fld(*p))
    fnorm = float(np.linalg.norm(fp))
    if fnorm < 1e-8:
        raise NotOscillatingError(
            f"orbit settled near an equilibrium (|f|={fnorm:.2e}); no cycle")
    normal = fp / fnorm

    anchor = None
    period = None
    t_accum = 0.0
    start = p.copy()
    prev_cross = None
    leg = 100.0
    while t_accum < max_time:
        traj = integrate(spec, start, leg, cfg)
        crossings = _poincare_crossings(traj, p, normal, fld,
                                        skip_until=1e-9 if t_accum == 0.0 else 0.0)
        for tc, xc in crossings:
            if prev_cross is not None:
                gap = float(np.linalg.norm(xc - prev_cross[1]))
                if gap < closure_tol:
                    period = (t_accum + tc) - prev_cross[0]
                    anchor = xc
                    break
            prev_cross = (t_accum + tc, xc)
        if anchor is not None:
            break
        t_accum += traj.t_end
        start = traj.end_state.copy()
        if prev_cross is None and t_accum >= 2 * leg:
            raise NotOscillatingError("no section crossing found: orbit does not "
                                      "return (not oscillating)")
    if anchor is None:
        if prev_cross is None:
            raise NotOscillatingError("no section crossing found: orbit does not "
                                      "return (not oscillating)")
        raise ConvergenceError(
            f"return map did not contract to closure tol {closure_tol:.1e} "
            f"within {max_time} time units")

    # dense phase-uniform samples over one period
    tt = integrate_prolonged(spec, anchor, np.eye(2), period, cfg)
    phases = np.linspace(0.0, 2.0 * math.pi, n_samples, endpoint=False)
    points = np.empty((n_samples, 2))
    tangents = np.empty((n_samples, 2))
    for k, th in enumerate(phases):
        xk, _ = tt.sample(th / (2.0 * math.pi) * period)
        points[k] = xk
        tangents[k] = fld(*xk)
    # planar unit normals: rotate tangents; orient away from the cycle centroid
    centroid = points.mean(axis=0)
    normals = np.column_stack([tangents[:, 1], -tangents[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if float(np.dot(normals[0], points[0] - centroid)) < 0.0:
        normals = -normals

    M = tt.end_frame.copy()
    mu, _ = np.linalg.eig(M)
    i_triv = int(np.argmin(np.abs(mu - 1.0)))
    if abs(mu[i_triv] - 1.0) > unit_multiplier_tol:
        raise ConvergenceError(
            f"monodromy lacks a multiplier near 1 (closest {mu[i_triv]:.6g}); "
            "orbit is not a clean periodic solution")
    nontriv = np.delete(mu, i_triv)
    expo = np.log(nontriv.astype(complex)) / period
    expo = expo[np.lexsort((-expo.imag, -expo.real))]

    closure = float(np.linalg.norm(tt.states[-1] - anchor))
    if closure > 1e-6:
        raise ConvergenceError(f"cycle closure residual {closure:.2e} too large")

    return LimitCycleModel(
        period=float(period), omega=2.0 * math.pi / float(period),
        anchor=anchor, phases=phases, points=points, tangents=tangents,
        normals=normals, monodromy=M, floquet_exponents=expo,
        trivial_multiplier=complex(mu[i_triv]))


def _radial_lookup(lc, x):
    x = np.asarray(x, dtype=float)
    r = float(np.linalg.norm(x))
    if r < 1e-12:
        raise ResolutionError("radial projection undefined at the origin")
    u = x / r
    ang, pts, nrm = lc.angle_table()
    alpha = math.atan2(x[1], x[0])
    i = int(np.searchsorted(ang, alpha)) - 1
    i = min(max(i, 0), len(ang) - 2)
    p0, p1 = pts[i], pts[i + 1]
    d = p1 - p0
    denom = d[0] * u[1] - d[1] * u[0]
    if abs(denom) < 1e-15:
        raise ResolutionError("degenerate chord in radial projection")
    s = -(p0[0] * u[1] - p0[1] * u[0]) / denom
    s = min(max(s, 0.0), 1.0)
    q = p0 + s * d
    if float(np.dot(q, u)) <= 0.0:
        raise ResolutionError("no cycle intersection on the ray through x")
    xi = (1.0 - s) * nrm[i] + s * nrm[i + 1]
    xi = xi / float(np.linalg.norm(xi))
    return q, xi


def radial_projection(lc, x):
    """Intersection of the cycle with the ray from the origin through x.

    Brackets the polar angle over the dense samples and interpolates
    linearly on the bracketing chord.
    """
    q, _ = _radial_lookup(lc, x)
    return q


def radial_normal(lc, x):
    """Unit cycle normal at the radial projection of x, with the projection."""
    q, xi = _radial_lookup(lc, x)
    return xi, q


# --- CSV export -------------------------------------------------------------

def write_trajectory_csv(path, traj, frames=None):
    """Dump `t, x1..xn[, m11..mnn]` with 17 significant digits."""
    states = traj.states
    n = states.shape[1]
    cols = ["t"] + [f"x{i + 1}" for i in range(n)]
    if frames is not None:
        cols += [f"m{i + 1}{j + 1}" for i in range(n) for j in range(n)]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(len(traj.times)):
            row = [traj.times[k]] + list(states[k])
            if frames is not None:
                row += list(frames[k].ravel())
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
