"""Koopman eigenvalues/eigenfunctions by Laplace averages along trajectories.

The average of g(psi^t(x)) e^{-lambda t} is taken over trailing windows of
length DT: the quadrature runs as extra ODE states (so its error is
controlled by the integrator tolerances), each window's mean is compared
with the previous one, and the value is frozen once the relative change
drops below the configured tolerance. For limit cycles the window must be
one period: full-period means cancel the oscillatory harmonics exactly,
which is what makes the cycle averages converge.

Gradient rows of eigenfunctions come from prolonged averages with the
tangent frame propagated alongside (one joint integration per evaluation
point serves every eigenpair and basis direction).
"""

from __future__ import annotations

import cmath
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (AngleUndefinedError, ConefieldError, ConvergenceError,
                     PositivityRefusal, ResolutionError)
from .flow import DEFAULT_CONFIG, IntegratorConfig, integrate_ode
from .vectorfield import compile_field, compile_jacobian, eval_field


class ResonanceWarning(UserWarning):
    """Spectral-gap condition for average finiteness is violated; averages
    may still converge empirically, so this is a warning, not an error."""


@dataclass(frozen=True)
class AverageConfig:
    """Truncation policy for the infinite-horizon averages.

    window:   horizon step DT; each convergence check compares means over
              consecutive windows of this length.
    t_max:    give up (with the best residual seen) beyond this horizon.
    tol:      relative change of the window mean that counts as converged.
    transient_skip: time discarded before the first window; only sensible
              for neutral (|Re lambda| ~ 0) modes, where the weight stays
              bounded. None lets pipelines pick their own default.
    """

    window: float = 1.0
    t_max: float = 200.0
    tol: float = 1e-6
    transient_skip: float | None = None

    def __post_init__(self):
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.t_max <= self.window:
            raise ValueError("t_max must exceed the window")


@dataclass(frozen=True)
class Observable:
    """Scalar observable g(x) (plain) or tangent-linear observable given by
    a row covector field r(x), acting as r(x) . dx (prolonged). The row
    representation makes linearity in dx structural."""

    kind: str                 # "plain" | "prolonged"
    fn: object                # plain: x -> complex ; prolonged: x -> complex row
    description: str = ""

    @staticmethod
    def plain(fn, description=""):
        return Observable("plain", fn, description)

    @staticmethod
    def prolonged(row_fn, description=""):
        return Observable("prolonged", row_fn, description)

    @staticmethod
    def coordinate(i, description=None):
        return Observable("plain", lambda x: complex(x[i]),
                          description or f"g(x) = x{i + 1}")

    @staticmethod
    def linear_form(vec, shift=None, description=None):
        v = np.asarray(vec, dtype=complex)
        s = np.zeros(len(v)) if shift is None else np.asarray(shift, dtype=float)

        def g(x):
            return complex(v @ (np.asarray(x, dtype=float) - s))
        return Observable("plain", g, description or "g(x) = v.(x - x*)")

    @staticmethod
    def constant_row(vec, description=None):
        v = np.asarray(vec, dtype=complex)
        return Observable("prolonged", lambda x: v, description or "r = const row")


# --- the averaging engine ---------------------------------------------------

_ABS_ZERO = 1e-6    # windows this small (on unit-scale channels) freeze as-is
_GROW_LIMIT = 3     # consecutive growing deltas after the best -> hopeless
_BLOWUP = 1e9


class _Channel:
    """One scalar complex quadrature with its own convergence bookkeeping."""

    __slots__ = ("lam", "value_fn", "skip", "scale_hint", "prev", "converged",
                 "value", "horizon", "resid", "best_resid", "best_value",
                 "grow_count", "w_max", "windows_seen")

    def __init__(self, lam, value_fn, skip=0.0, scale_hint=1.0):
        self.lam = complex(lam)
        self.value_fn = value_fn      # (x, tangent_block) -> complex integrand value
        self.skip = skip
        self.scale_hint = scale_hint
        self.prev = None
        self.converged = False
        self.value = None
        self.horizon = None
        self.resid = math.inf
        self.best_resid = math.inf
        self.best_value = None
        self.grow_count = 0
        self.w_max = 0.0
        self.windows_seen = 0

    def offer(self, w, t_end, tol):
        """Feed one window mean; returns True if newly frozen."""
        if self.converged:
            return False
        self.windows_seen += 1
        self.w_max = max(self.w_max, abs(w))
        if self.prev is None:
            self.prev = w
            return False
        d = abs(w - self.prev)
        rel = d / (abs(w) + 1e-300)
        self.prev = w
        if rel < self.best_resid:
            self.best_resid = rel
            self.best_value = w
            self.grow_count = 0
        else:
            self.grow_count += 1
        tol_scale = abs(w) + 1e-12 * self.scale_hint
        if d <= tol * tol_scale or (abs(w) <= _ABS_ZERO * self.scale_hint
                                    and d <= _ABS_ZERO * self.scale_hint):
            self.converged = True
            self.value = w
            self.horizon = t_end
            self.resid = rel
            return True
        if abs(w) > _BLOWUP * self.scale_hint:
            raise ConvergenceError(
                f"average blew up (|W|={abs(w):.3e}) at horizon {t_end:.3g}: "
                "wrong eigenvalue, wrong basin, or observable not vanishing "
                "on the attractor", residual=rel, best=self.best_value)
        return False

    @property
    def hopeless(self):
        return (not self.converged) and self.grow_count >= _GROW_LIMIT \
            and self.windows_seen >= 4


def _run_channels(spec, x, channels, tol, cfg, int_cfg, tangent):
    """Integrate the joint system and freeze every channel.

    tangent: None (plain only), a vector (single-tangent prolonged mode) or
    "frame" (full n x n tangent basis). Returns the max horizon used.
    """
    n = spec.n
    fld = compile_field(spec)
    x = np.asarray(x, dtype=float)

    if tangent is None:
        tdim = 0
    elif isinstance(tangent, str) and tangent == "frame":
        tdim = n * n
    else:
        tangent = np.asarray(tangent, dtype=float)
        tdim = n
    need_jac = tdim > 0
    jac = compile_jacobian(spec) if need_jac else None
    nc = len(channels)
    dim = n + tdim + 2 * nc
    lam_arr = [ch.lam for ch in channels]

    def rhs(t, y):
        xs = y[:n]
        dy = np.empty(dim)
        dy[:n] = fld(*xs)
        if tdim:
            J = np.asarray(jac(*xs))
            dy[n:n + tdim] = (J @ y[n:n + tdim].reshape(n, -1)).ravel()
        tb = y[n:n + tdim].reshape(n, -1) if tdim else None
        base = n + tdim
        for i, ch in enumerate(channels):
            w = cmath.exp(-lam_arr[i] * t)
            v = w * ch.value_fn(xs, tb)
            dy[base + 2 * i] = v.real
            dy[base + 2 * i + 1] = v.imag
        return dy

    y = np.empty(dim)
    y[:n] = x
    if tdim == n * n:
        y[n:n + tdim] = np.eye(n).ravel()
    elif tdim:
        y[n:n + tdim] = tangent
    y[n + tdim:] = 0.0

    # window boundaries: multiples of cfg.window, plus any channel skips
    skips = sorted({ch.skip for ch in channels})
    t = 0.0
    base = n + tdim
    max_horizon = 0.0
    while t < cfg.t_max:
        t_next = t + cfg.window
        _, ys, _ = integrate_ode(rhs, y, t_next, int_cfg, t0=t, norm_dim=n,
                                 record=False)
        y = ys[-1]
        for i, ch in enumerate(channels):
            if ch.converged or t < ch.skip - 1e-12:
                continue
            w = complex(y[base + 2 * i], y[base + 2 * i + 1]) / cfg.window
            if ch.offer(w, t_next, tol):
                max_horizon = max(max_horizon, t_next)
        # reset quadrature states so each window integrates from zero
        y[base:] = 0.0
        t = t_next
        if all(ch.converged for ch in channels):
            return max_horizon
        if any(ch.hopeless for ch in channels):
            break
    bad = [ch for ch in channels if not ch.converged]
    best = min(ch.best_resid for ch in bad)
    raise ConvergenceError(
        f"Laplace average did not converge by t={t:.3g} "
        f"(best residual {best:.3e}, tol {tol:.1e})",
        residual=best, best=[ch.best_value for ch in bad])


def laplace_average(spec, g, lam, x, cfg=None, *, int_cfg=DEFAULT_CONFIG):
    """Finite-horizon average of g(psi^t(x)) e^{-lambda t}.

    Returns the frozen window mean once its relative change over one window
    drops below cfg.tol; raises ConvergenceError (with best residual) or
    DivergenceError otherwise.
    """
    if g.kind != "plain":
        raise ValueError("laplace_average expects a plain observable")
    cfg = cfg or AverageConfig()
    skip = cfg.transient_skip or 0.0
    ch = _Channel(lam, lambda xs, tb: g.fn(xs), skip=skip)
    _run_channels(spec, x, [ch], cfg.tol, cfg, int_cfg, tangent=None)
    return ch.value


def laplace_average_prolonged(spec, g, lam, x, dx, cfg=None, *,
                              int_cfg=DEFAULT_CONFIG):
    """Prolonged average of r(psi^t(x)) . (dpsi^t dx) e^{-lambda t}.

    Linearity in dx is structural: the tangent is normalized up front and
    the result rescaled, so doubling dx doubles the value bitwise.
    """
    if g.kind != "prolonged":
        raise ValueError("laplace_average_prolonged expects a prolonged observable")
    cfg = cfg or AverageConfig()
    dx = np.asarray(dx, dtype=float)
    scale = float(np.linalg.norm(dx))
    if scale == 0.0:
        return 0.0j
    skip = cfg.transient_skip or 0.0
    ch = _Channel(lam, lambda xs, tb: complex(np.dot(g.fn(xs), tb[:, 0])),
                  skip=skip)
    _run_channels(spec, x, [ch], cfg.tol, cfg, int_cfg, tangent=dx / scale)
    return ch.value * scale


# --- eigenpairs -------------------------------------------------------------

@dataclass
class KoopmanEigenpair:
    """Eigenvalue plus evaluators for phi and its gradient row.

    The gradient row is assembled from prolonged averages with the tangent
    basis (hence exactly linear in dx). Cycle angle pairs additionally
    expose the phase and its (real) gradient row.
    """

    eigenvalue: complex
    kind: str                         # "fixed-point" | "cycle-angle" | "cycle-transverse"
    index: int
    _bundle: object = field(repr=False)
    provenance: dict = field(default_factory=dict)

    def phi(self, x):
        return self._bundle.phi(self.index, x)

    def gradient(self, x):
        return self._bundle.gradient(self.index, x)

    def diagnostics(self, x):
        """(horizon, residual) of the averaging run behind x's values."""
        return self._bundle.diagnostics(x)

    def angle(self, x):
        if self.kind != "cycle-angle":
            raise AngleUndefinedError("angle only defined for the cycle angle mode")
        return self._bundle.angle(x)

    def angle_gradient(self, x):
        if self.kind != "cycle-angle":
            raise AngleUndefinedError("angle only defined for the cycle angle mode")
        return self._bundle.angle_gradient(x)


@dataclass
class _PointData:
    phis: list
    rows: list
    horizon: float
    resid: float


class _AverageBundle:
    """Shared per-point evaluation: one joint integration yields phi and the
    full gradient row for every pair; results are memoized by point."""

    def __init__(self, spec, lams, plain_fns, row_fns, skips, cfg, int_cfg,
                 scales=None):
        self.spec = spec
        self.n = spec.n
        self.lams = lams
        self.plain_fns = plain_fns
        self.row_fns = row_fns
        self.skips = skips
        self.cfg = cfg
        self.int_cfg = int_cfg
        self.scales = scales if scales is not None else [1.0 + 0.0j] * len(lams)
        self.cache = {}

    def _key(self, x):
        return tuple(float(v) for v in x)

    def evaluate(self, x):
        key = self._key(x)
        hit = self.cache.get(key)
        if hit is not None:
            if isinstance(hit, ConefieldError):
                raise hit
            return hit
        try:
            data = self._evaluate(np.asarray(x, dtype=float))
        except ConefieldError as exc:
            self.cache[key] = exc
            raise
        self.cache[key] = data
        return data

    def _evaluate(self, x):
        # raw (unscaled) averages; scales are applied in the accessors so a
        # later normalization pass does not invalidate the cache
        n = self.n
        channels = []
        for j, lam in enumerate(self.lams):
            pf = self.plain_fns[j]
            rf = self.row_fns[j]
            channels.append(_Channel(lam, (lambda fn: lambda xs, tb: fn(xs))(pf),
                                     skip=self.skips[j]))
            for col in range(n):
                channels.append(_Channel(
                    lam,
                    (lambda fn, c: lambda xs, tb: complex(np.dot(fn(xs), tb[:, c])))(rf, col),
                    skip=self.skips[j]))
        horizon = _run_channels(self.spec, x, channels, self.cfg.tol, self.cfg,
                                self.int_cfg, tangent="frame")
        phis, rows = [], []
        resid = 0.0
        k = 0
        for j in range(len(self.lams)):
            phis.append(channels[k].value)
            resid = max(resid, channels[k].resid)
            k += 1
            row = np.empty(n, dtype=complex)
            for col in range(n):
                row[col] = channels[k].value
                resid = max(resid, channels[k].resid)
                k += 1
            rows.append(row)
        return _PointData(phis=phis, rows=rows, horizon=horizon, resid=resid)

    def phi(self, j, x):
        return self.evaluate(x).phis[j] * self.scales[j]

    def gradient(self, j, x):
        return self.evaluate(x).rows[j] * self.scales[j]

    def diagnostics(self, x):
        d = self.evaluate(x)
        return d.horizon, d.resid


class _CycleBundle(_AverageBundle):
    """Cycle version: pair 0 is the angle mode (phi scaled to unit modulus
    and zero phase at the anchor), pair 1 the transverse Floquet mode."""

    def __init__(self, *args, angle_floor=1e-8, **kwargs):
        super().__init__(*args, **kwargs)
        self.angle_floor = angle_floor

    def angle_phi_raw(self, x):
        return self.evaluate(x).phis[0]

    def angle(self, x):
        v = self.phi(0, x)
        if abs(v) < self.angle_floor:
            raise AngleUndefinedError(
                f"|phi| = {abs(v):.2e} below {self.angle_floor}: phase undefined "
                "(phaseless set)")
        return math.atan2(v.imag, v.real)

    def angle_gradient(self, x):
        d = self.evaluate(x)
        if abs(d.phis[0] * self.scales[0]) < self.angle_floor:
            raise AngleUndefinedError(
                f"|phi| = {abs(d.phis[0] * self.scales[0]):.2e}: phase gradient "
                "undefined (phaseless set)")
        # the scale cancels between the row and phi
        return (d.rows[0] / (1j * d.phis[0])).real


def _resonance_guard(lams):
    l1 = lams[0].real
    for lam in lams[1:]:
        if not (2.0 * l1 < lam.real < l1):
            warnings.warn(
                f"spectral gap condition 2 Re(l1) < Re(l_j) < Re(l1) violated "
                f"(l1={lams[0]:.4g}, l_j={lam:.4g}); averages may converge "
                "slowly or pick up resonant contamination", ResonanceWarning,
                stacklevel=3)


def eigenpairs_fixed_point(spec, fp, cfg=None, *, int_cfg=DEFAULT_CONFIG):
    """The n eigenpairs of a stable hyperbolic fixed point with real
    dominant eigenvalue; observables are the left-eigenvector forms
    v_j . (x - x*) whose averages are finite and nonzero."""
    cfg = cfg or AverageConfig(tol=1e-4)
    lam = fp.eigenvalues
    if abs(lam[0].imag) > 1e-10 * max(1.0, abs(lam[0])):
        raise PositivityRefusal(
            f"dominant eigenvalue {lam[0]:.6g} is complex: the linearized flow "
            "spirals, so no pointed cone can be invariant near the fixed point "
            "and the construction refuses")
    if not fp.stable:
        raise PositivityRefusal(
            "fixed point is not stable: forward Laplace averages require "
            "all eigenvalue real parts negative")
    if np.any(np.abs(lam.real) < 1e-12):
        raise PositivityRefusal("fixed point is not hyperbolic")
    _resonance_guard(lam)

    n = spec.n
    lams = [complex(l) for l in lam]
    plain_fns, row_fns, scales = [], [], []
    for j in range(n):
        v = fp.left_vectors[j].astype(complex)
        v = v / np.linalg.norm(v)       # unit gradient row at x*
        shift = fp.x_star
        plain_fns.append((lambda vv, sh: lambda xs: complex(vv @ (xs - sh)))(v, shift))
        row_fns.append((lambda vv: lambda xs: vv)(v))
        scales.append(1.0 + 0.0j)
    bundle = _AverageBundle(spec, lams, plain_fns, row_fns, [0.0] * n, cfg,
                            int_cfg, scales)
    prov = {"mode": "fixed-point", "x_star": fp.x_star.tolist(),
            "observables": "v_j . (x - x*), left eigenvectors scaled to unit norm",
            "window": cfg.window, "tol": cfg.tol, "t_max": cfg.t_max}
    return [KoopmanEigenpair(eigenvalue=lams[j], kind="fixed-point", index=j,
                             _bundle=bundle, provenance=dict(prov, j=j))
            for j in range(n)]


class _CycleGeometry:
    """Periodic cubic-spline lookup of the cycle in polar angle: radial
    projection rho(x), unit normal xi(rho(x)), both smooth enough that the
    residue of the distance observable on the cycle stays ~1e-12 (the
    lambda_2-weighted average amplifies any residue by e^{|l2| t})."""

    def __init__(self, lc):
        from scipy.interpolate import CubicSpline

        ang = np.arctan2(lc.points[:, 1], lc.points[:, 0])
        order = np.argsort(ang)
        ang = ang[order]
        vals = np.column_stack([
            np.linalg.norm(lc.points, axis=1)[order],
            lc.normals[order][:, 0],
            lc.normals[order][:, 1],
        ])
        if np.any(np.diff(ang) <= 0):
            raise ResolutionError(
                "cycle is not star-shaped about the origin: radial projection "
                "table is ambiguous")
        knots = np.concatenate([ang, [ang[0] + 2 * math.pi]])
        cyc = np.vstack([vals, vals[:1]])
        cs = CubicSpline(knots, cyc, bc_type="periodic", axis=0)
        self._x0 = float(knots[0])
        self._knots = cs.x
        self._coef = cs.c          # (4, K, 3)

    def lookup(self, x1, x2):
        """(rho(x), xi(rho(x))) for the ray through (x1, x2)."""
        r2 = x1 * x1 + x2 * x2
        if r2 < 1e-24:
            raise ResolutionError("radial projection undefined at the origin")
        a = math.atan2(x2, x1)
        if a < self._x0:
            a += 2.0 * math.pi
        k = int(np.searchsorted(self._knots, a, side="right")) - 1
        k = min(max(k, 0), self._coef.shape[1] - 1)
        dt = a - self._knots[k]
        c = self._coef
        vals = ((c[0, k] * dt + c[1, k]) * dt + c[2, k]) * dt + c[3, k]
        r, nx, ny = vals
        ca, sa = x1 / math.sqrt(r2), x2 / math.sqrt(r2)
        rho = (r * ca, r * sa)
        nn = math.hypot(nx, ny)
        return rho, (nx / nn, ny / nn)


def eigenpairs_limit_cycle(spec, lc, cfg=None, *, int_cfg=DEFAULT_CONFIG):
    """Angle pair (lambda_1 = i omega) and transverse Floquet pair for a
    planar stable hyperbolic limit cycle.

    Angle mode: g(x) = x1; the phase gradient is the prolonged-average row
    divided by i phi. Transverse mode: the row observable xi(rho(x)) and
    the radial distance g(x) = xi . (x - rho(x)); its windows must start
    immediately (the e^{-lambda_2 t} weight grows, so a transient skip
    would amplify sampling residue past the signal), while the neutral
    angle mode skips five periods as configured.
    """
    if spec.n != 2:
        raise ResolutionError("cycle eigenpairs are implemented for planar systems")
    lam2 = complex(lc.floquet_exponents[0])
    if lam2.real >= 0:
        raise PositivityRefusal(
            f"nontrivial Floquet exponent {lam2:.6g} is not contracting: "
            "cycle is not stable hyperbolic")
    cfg = cfg or AverageConfig(window=lc.period, t_max=60 * lc.period, tol=3e-4,
                               transient_skip=5 * lc.period)
    if abs(cfg.window / lc.period - round(cfg.window / lc.period)) > 1e-9 \
            or cfg.window < lc.period / 2:
        # full-period windows are what cancels the oscillatory harmonics
        cfg = AverageConfig(window=lc.period,
                            t_max=max(cfg.t_max, 20 * lc.period),
                            tol=cfg.tol, transient_skip=cfg.transient_skip)
    skip_neutral = cfg.transient_skip if cfg.transient_skip is not None \
        else 5 * lc.period
    skip_neutral = round(skip_neutral / lc.period) * lc.period

    geom = _CycleGeometry(lc)
    lam1 = 1j * lc.omega

    def g_angle(xs):
        return complex(xs[0])

    row_angle = np.array([1.0 + 0j, 0.0 + 0j])

    def g_trans(xs):
        rho, xi = geom.lookup(xs[0], xs[1])
        return complex(xi[0] * (xs[0] - rho[0]) + xi[1] * (xs[1] - rho[1]))

    def row_trans(xs):
        _, xi = geom.lookup(xs[0], xs[1])
        return np.array([xi[0], xi[1]], dtype=complex)

    bundle = _CycleBundle(
        spec, [lam1, lam2],
        [g_angle, g_trans],
        [lambda xs: row_angle, row_trans],
        [skip_neutral, 0.0],
        cfg, int_cfg)

    # normalization: unit modulus + zero phase at the anchor for the angle
    # mode; unit gradient row at the anchor for the transverse mode (its
    # phi vanishes on the cycle, so modulus normalization is impossible)
    anchor_data = bundle.evaluate(lc.anchor)
    phi1_a = anchor_data.phis[0]
    if abs(phi1_a) < 1e-10:
        raise ResolutionError("dominant cycle average vanished at the anchor")
    row2_a = anchor_data.rows[1]
    s2 = 1.0 / float(np.linalg.norm(row2_a))
    # keep the transverse row real-positive along the outward normal
    xi_a = np.array(geom.lookup(*lc.anchor)[1])
    if float((row2_a * s2).real @ xi_a) < 0:
        s2 = -s2
    bundle.scales = [1.0 / phi1_a, complex(s2)]

    prov = {"mode": "limit-cycle", "period": lc.period, "window": cfg.window,
            "tol": cfg.tol, "t_max": cfg.t_max, "skip_neutral": skip_neutral,
            "scales": [repr(s) for s in bundle.scales]}
    return [
        KoopmanEigenpair(eigenvalue=lam1, kind="cycle-angle", index=0,
                         _bundle=bundle,
                         provenance=dict(prov, observable="g(x) = x1")),
        KoopmanEigenpair(eigenvalue=lam2, kind="cycle-transverse", index=1,
                         _bundle=bundle,
                         provenance=dict(prov, observable="xi(rho(x)) . dx")),
    ]


def generator_residual(spec, pair, x):
    """|dphi . f - lambda phi| against a scale-aware floor; the primary
    quality diagnostic for a computed eigenpair. Returns +inf when the
    evaluators cannot be resolved at x."""
    try:
        phi = pair.phi(x)
        row = pair.gradient(x)
    except ConefieldError:
        return math.inf
    f = eval_field(spec, x)
    lam = pair.eigenvalue
    numer = abs(complex(row @ f) - lam * phi)
    denom = abs(lam) * abs(phi) + 1e-6 * (1.0 + float(np.linalg.norm(row))
                                          * float(np.linalg.norm(f)))
    return numer / denom


def write_eigenpair_csv(path, spec, pairs, points):
    """Dump `x1..xn, Re(phi), Im(phi), Re(dphi_1)..Im(dphi_n), residual,
    horizon` rows for each pair at each point (missing entries are nan)."""
    n = spec.n
    cols = [f"x{i + 1}" for i in range(n)]
    cols += ["pair", "re_phi", "im_phi"]
    for i in range(n):
        cols += [f"re_dphi_{i + 1}", f"im_dphi_{i + 1}"]
    cols += ["residual", "horizon"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for x in points:
            for j, pair in enumerate(pairs):
                row = list(x) + [j]
                try:
                    phi = pair.phi(x)
                    grad = pair.gradient(x)
                    horizon, _ = pair.diagnostics(x)
                    resid = generator_residual(spec, pair, x)
                    row += [phi.real, phi.imag]
                    for v in grad:
                        row += [v.real, v.imag]
                    row += [resid, horizon]
                except ConefieldError:
                    row += [math.nan] * (2 + 2 * n + 2)
                fh.write(",".join(_fmt17(v) for v in row) + "\n")


def _fmt17(v):
    return f"{v:.17g}" if isinstance(v, float) else str(v)
