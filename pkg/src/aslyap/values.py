"""Worst-case value functions by monotone grid iteration.

The almost-sure criteria are robust criteria: the essential supremum over
Brownian paths is approximated by an adversary choosing signed increments
(+/- sqrt(dt) per channel, plus the zero increment).  All three operators
below are monotone with multilinear interpolation and saturation outside the
box, so iterates are pointwise nondecreasing and converge under the cap;
monotonicity is asserted every sweep.

Convergence is measured in the sup norm; the discounted construction uses
risk-neutral expectation over increments instead of the worst case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .fields import BoxInterpolator, Grid, ScalarField
from .gauges import GaugeFunction
from .model import ControlledDiffusion

__all__ = [
    "NumericalError",
    "RobustScheme",
    "default_scheme",
    "step",
    "ValueResult",
    "worst_case_sup_value",
    "worst_case_integral_value",
    "discounted_value_and_prop_set",
    "FeedbackMap",
    "synthesize_feedback",
    "extended_system",
]


class NumericalError(RuntimeError):
    """Raised when an iteration produces NaNs or violates monotonicity."""


@dataclass(frozen=True)
class RobustScheme:
    """Time step, adversarial increment set, cap, and stopping controls."""

    dt: float
    increments: np.ndarray          # (n_w, dim_noise)
    cap: float
    max_iterations: int = 100_000
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.cap <= 0:
            raise ValueError("cap must be positive")
        w = np.asarray(self.increments, dtype=float)
        if w.ndim != 2 or w.shape[0] == 0:
            raise ValueError("increments must be a nonempty (n_w, M) array")
        object.__setattr__(self, "increments", w)
        have = {tuple(row) for row in np.round(w, 12)}
        if any(tuple(-np.asarray(row)) not in have for row in np.round(w, 12)):
            raise ValueError("increment set must be symmetric (w in W implies -w in W)")


def default_increments(dim_noise: int, dt: float, include_zero: bool = True) -> np.ndarray:
    rows = []
    if include_zero:
        rows.append(np.zeros(dim_noise))
    root = np.sqrt(dt)
    for j in range(dim_noise):
        e = np.zeros(dim_noise)
        e[j] = root
        rows.append(e.copy())
        rows.append(-e)
    return np.array(rows)


def max_drift_norm(model: ControlledDiffusion, grid: Grid) -> float:
    nodes = grid.nodes()
    best = 0.0
    for idx in range(model.n_controls):
        f = model.drift(nodes, idx)
        f = f[np.all(np.isfinite(f), axis=-1)]
        if len(f):
            best = max(best, float(np.linalg.norm(f, axis=-1).max()))
    return best


def default_scheme(
    model: ControlledDiffusion,
    grid: Grid,
    cap: float,
    dt: float | None = None,
    tolerance: float = 1e-6,
    max_iterations: int = 100_000,
) -> RobustScheme:
    """CFL-style default: dt = h / (2 max|f| + 1) keeps stencils local."""
    if dt is None:
        h = min(grid.spacing)
        dt = h / (2.0 * max_drift_norm(model, grid) + 1.0)
    return RobustScheme(
        dt=dt,
        increments=default_increments(model.dim_noise, dt),
        cap=cap,
        max_iterations=max_iterations,
        tolerance=tolerance,
    )


def step(model: ControlledDiffusion, x, control_index: int, w, dt: float) -> np.ndarray:
    """One explicit update x + f dt + sigma w with a prescribed increment w."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    return x + model.drift(x, control_index) * dt + model.sigma(x, control_index) @ w


@dataclass
class ValueResult:
    field: ScalarField
    residuals: list[float] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.field.converged


def _prepare_stencils(model, grid, scheme, point_fn=None):
    """Precompute interpolation stencils for x + f dt + sigma w per (a, w).

    ``point_fn`` additionally evaluates a function at the (raw) next points,
    e.g. the running cost in closed form.
    """
    interp = BoxInterpolator(grid)
    nodes = grid.nodes()
    prepared = []
    extras = []
    for ai in range(model.n_controls):
        f = model.drift(nodes, ai)
        s = model.sigma(nodes, ai)
        per_w = []
        per_w_extra = []
        for w in scheme.increments:
            nxt = nodes + f * scheme.dt + s @ w
            per_w.append(interp.prepare(nxt))
            if point_fn is not None:
                with np.errstate(all="ignore"):
                    per_w_extra.append(np.asarray(point_fn(nxt), dtype=float))
        prepared.append(per_w)
        extras.append(per_w_extra)
    return interp, prepared, extras


def _sweep_minmax(interp, prepared, flat_values, fill):
    """min over controls of max over increments of the interpolated field."""
    out = None
    for per_w in prepared:
        inner = None
        for prep in per_w:
            vals = interp.apply(flat_values, prep, fill=fill)
            inner = vals if inner is None else np.maximum(inner, vals)
        out = inner if out is None else np.minimum(out, inner)
    return out


def _sweep_minmax_anchored(interp, prepared, cost_next, excess, cap):
    """As _sweep_minmax, but reads cost(next) in closed form plus the
    interpolated excess over the cost.

    Interpolating the excess instead of the value removes the systematic
    overshoot of multilinear interpolation on cone-shaped fields, which
    otherwise accumulates along trajectories that spiral into the origin.
    """
    out = None
    for per_w, per_w_cost in zip(prepared, cost_next):
        inner = None
        for prep, cn in zip(per_w, per_w_cost):
            vals = np.minimum(cn, cap) + interp.apply(excess, prep, fill=0.0)
            vals = np.where(prep[2], vals, cap)
            inner = vals if inner is None else np.maximum(inner, vals)
        out = inner if out is None else np.minimum(out, inner)
    return out


def _sweep_minmean(interp, prepared, flat_values, fill):
    out = None
    for per_w in prepared:
        acc = 0.0
        for prep in per_w:
            acc = acc + interp.apply(flat_values, prep, fill=fill)
        inner = acc / len(per_w)
        out = inner if out is None else np.minimum(out, inner)
    return out


def _iterate(update, v0, scheme, require_monotone=True, snapshot_every=0):
    v = v0
    residuals = []
    snapshots = []
    converged = False
    iterations = 0
    for it in range(1, scheme.max_iterations + 1):
        vn = update(v)
        if np.isnan(vn).any():
            raise NumericalError(f"NaN produced at sweep {it}")
        delta = vn - v
        if require_monotone and delta.min() < 0:
            raise NumericalError(
                f"monotonicity violated at sweep {it} (min delta {delta.min():.3e})"
            )
        resid = float(np.abs(delta).max())
        residuals.append(resid)
        v = vn
        iterations = it
        if snapshot_every and it % snapshot_every == 0:
            snapshots.append(v.copy())
        if resid < scheme.tolerance:
            converged = True
            break
    return v, residuals, snapshots, converged, iterations


def worst_case_sup_value(
    model: ControlledDiffusion,
    grid: Grid,
    scheme: RobustScheme,
    cost=None,
    pin_mask: np.ndarray | None = None,
    snapshot_every: int = 0,
) -> ValueResult:
    """Fixed point of V <- min(cap, max(cost, min_a max_w V(x + f dt + s w))).

    ``cost`` defaults to |x|; the value is the robust running supremum of the
    cost along adversarially-driven trajectories, truncated at the cap.
    Iterates start at the cost and increase pointwise.  Off-grid reads
    saturate to the cap; the running cost is evaluated in closed form at the
    query points and only the excess over it is interpolated.

    ``pin_mask`` freezes nodes at the cost floor (used where the value is
    known to equal the cost, e.g. a small ball around the equilibrium set).
    """
    nodes = grid.nodes()
    if cost is None:
        cost_fn = lambda pts: np.linalg.norm(pts, axis=-1)  # noqa: E731
    else:
        cost_fn = cost
    cost_vals = np.asarray(cost_fn(nodes), dtype=float)
    interp, prepared, cost_next = _prepare_stencils(model, grid, scheme, point_fn=cost_fn)
    cap = scheme.cap
    floor = np.minimum(cost_vals, cap)

    def update(v):
        swept = _sweep_minmax_anchored(interp, prepared, cost_next, v - floor, cap)
        vn = np.minimum(cap, np.maximum(floor, swept))
        if pin_mask is not None:
            vn[pin_mask] = floor[pin_mask]
        return vn

    v, residuals, snapshots, converged, iterations = _iterate(
        update, floor.copy(), scheme, snapshot_every=snapshot_every
    )
    fld = ScalarField(grid=grid, values=v, name="sup-value", iterations=iterations,
                      residual=residuals[-1] if residuals else float("nan"),
                      converged=converged)
    return ValueResult(field=fld, residuals=residuals, snapshots=snapshots)


def worst_case_integral_value(
    model: ControlledDiffusion,
    grid: Grid,
    l: GaugeFunction,
    scheme: RobustScheme,
    pin_radius: float | None = None,
    snapshot_every: int = 0,
) -> ValueResult:
    """Fixed point of V <- min(cap, l dt + min_a max_w V(next)), pinned at 0
    on the ball |x| <= rho around the controlled equilibrium.

    The value is the robust total cost of the decrease gauge along the path;
    iterates start at zero and increase pointwise.  ``pin_radius`` overrides
    the grid's origin-exclusion radius for the pinned ball.
    """
    nodes = grid.nodes()
    run_cost = np.asarray(l.of_points(nodes), dtype=float) * scheme.dt
    if np.any(run_cost < 0):
        raise ValueError("gauge must be nonnegative")
    pin = np.linalg.norm(nodes, axis=-1) <= (
        grid.rho if pin_radius is None else pin_radius
    )
    interp, prepared, _ = _prepare_stencils(model, grid, scheme)
    cap = scheme.cap

    def update(v):
        swept = _sweep_minmax(interp, prepared, v, fill=cap)
        vn = np.minimum(cap, run_cost + swept)
        vn[pin] = 0.0
        return vn

    v0 = np.zeros(grid.n_nodes)
    v, residuals, snapshots, converged, iterations = _iterate(
        update, v0, scheme, snapshot_every=snapshot_every
    )
    fld = ScalarField(grid=grid, values=v, name="integral-value", iterations=iterations,
                      residual=residuals[-1] if residuals else float("nan"),
                      converged=converged)
    return ValueResult(field=fld, residuals=residuals, snapshots=snapshots)


def discounted_value_and_prop_set(
    model: ControlledDiffusion,
    grid: Grid,
    K: float,
    lam: float,
    theta: float,
    scheme: RobustScheme | None = None,
    dt: float | None = None,
) -> tuple[ValueResult, np.ndarray]:
    """Expected discounted cost of leaving the K-ball, and its zero set.

    Running cost max(0, |x| - K), discount exp(-lam dt), expectation over the
    increment set.  The propagation set is {W <= theta}: nodes from which the
    ball is (numerically) never left.  Requires lam > 0 and theta > 0.
    """
    if lam <= 0:
        raise ValueError("discount rate lam must be positive")
    if theta <= 0:
        raise ValueError("zero-threshold theta must be positive")
    inner_radius = min(min(abs(l), abs(u)) for l, u in zip(grid.lower, grid.upper))
    if K >= inner_radius:
        raise ValueError(f"K={K} must be below the grid radius {inner_radius}")

    nodes = grid.nodes()
    radii = np.linalg.norm(nodes, axis=-1)
    run_cost = np.maximum(0.0, radii - K)
    w_cap = float(run_cost.max()) / lam
    if scheme is None:
        base = default_scheme(model, grid, cap=max(w_cap, theta), dt=dt)
        scheme = base
    disc = np.exp(-lam * scheme.dt)
    interp, prepared, _ = _prepare_stencils(model, grid, scheme)

    def update(v):
        swept = _sweep_minmean(interp, prepared, v, fill=w_cap)
        return np.minimum(w_cap, run_cost * scheme.dt + disc * swept)

    v0 = np.zeros(grid.n_nodes)
    v, residuals, _, converged, iterations = _iterate(update, v0, scheme)
    fld = ScalarField(grid=grid, values=v, name="discounted-value", iterations=iterations,
                      residual=residuals[-1] if residuals else float("nan"),
                      converged=converged)
    prop_mask = v <= theta
    return ValueResult(field=fld, residuals=residuals), prop_mask


@dataclass
class FeedbackMap:
    """One control index per grid node, with nearest-node lookup."""

    grid: Grid
    control_indices: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.control_indices = np.asarray(self.control_indices, dtype=np.int64).ravel()
        if self.control_indices.shape != (self.grid.n_nodes,):
            raise ValueError("need one control index per node")

    def lookup(self, points: np.ndarray) -> np.ndarray:
        return self.control_indices[self.grid.nearest_index(points)]

    def to_csv(self) -> str:
        n = self.grid.dim
        lines = [",".join(f"x{i+1}" for i in range(n)) + ",control"]
        for row, c in zip(self.grid.nodes(), self.control_indices):
            lines.append(",".join(repr(float(v)) for v in row) + f",{int(c)}")
        return "\n".join(lines) + "\n"


def synthesize_feedback(
    model: ControlledDiffusion, value: ScalarField, scheme: RobustScheme
) -> FeedbackMap:
    """Per node, the control minimizing the worst interpolated next value.

    Ties break toward the lowest control index.
    """
    interp, prepared, _ = _prepare_stencils(model, value.grid, scheme)
    flat = value.flat
    rows = []
    for per_w in prepared:
        inner = None
        for prep in per_w:
            vals = interp.apply(flat, prep, fill=scheme.cap)
            inner = vals if inner is None else np.maximum(inner, vals)
        rows.append(inner)
    table = np.stack(rows, axis=0)
    indices = np.argmin(table, axis=0)  # first minimum wins
    return FeedbackMap(grid=value.grid, control_indices=indices,
                       provenance=value.name or "value-field")


def extended_system(
    model: ControlledDiffusion,
    l: GaugeFunction,
    y_bounds: tuple[float, float] = (0.0, 1.0),
) -> ControlledDiffusion:
    """Augment the state with the accumulated gauge: dY = l(|X|) dt, no noise.

    The supremum of |Y| along worst-case paths of the augmented system,
    started at (x, 0), equals the integral-cost value at x; this is the
    cross-check route.  Needs an expression gauge (the new drift row is a
    closed-form tree).
    """
    if l.expression is None:
        raise ValueError("extended system needs an expression gauge")
    n = model.dim_state
    sq_terms = None
    for i in range(n):
        term = ex.Bin("^", ex.Var(f"x{i+1}"), ex.Num(2.0))
        sq_terms = term if sq_terms is None else ex.Bin("+", sq_terms, term)
    radius_tree = ex.Call("sqrt", (sq_terms,))
    y_drift = ex.simplify(ex.substitute(l.expression, {"r": radius_tree}))

    zero_row = tuple(ex.Num(0.0) for _ in range(model.dim_noise))
    return ControlledDiffusion(
        dim_state=n + 1,
        dim_noise=model.dim_noise,
        controls=model.controls,
        drift_base=model.drift_base + (y_drift,),
        sigma_base=model.sigma_base + (zero_row,),
        drift_overrides=dict(model.drift_overrides),
        sigma_overrides=dict(model.sigma_overrides),
        domain_lower=model.domain_lower + (y_bounds[0],),
        domain_upper=model.domain_upper + (y_bounds[1],),
    )
