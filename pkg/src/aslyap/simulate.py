"""Euler-Maruyama ensembles and empirical stabilizability estimates.

Paths use counter-based per-path RNG streams keyed by (seed, path index), so
ensembles are bit-identical across chunk sizes and worker counts.  All
pathwise verdicts are statistical lower bounds on essential suprema: a max
over finitely many paths never proves an almost-sure bound, so results are
reported as "consistent with" the property, never as proof.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .gauges import ComparisonGauge, GaugeFunction, monotone_envelope
from .model import CandidateFunction, ControlledDiffusion
from .values import FeedbackMap

__all__ = [
    "TrajectoryEnsemble",
    "simulate_ensemble",
    "StabilizabilityEstimate",
    "estimate_stabilizability_gauge",
    "DecayEnvelopeEstimate",
    "estimate_decay_envelope",
    "OccupationEstimate",
    "measure_occupation_times",
    "DecayGaugeConstruction",
    "build_decay_gauge",
    "SupermaxingaleResult",
    "check_supermaxingale",
    "ViabilityEstimate",
    "empirical_viability",
]

_BLOCK_STEPS = 1024


def _path_generator(seed: int, path_index: int) -> np.random.Generator:
    key = (int(seed) << 64) + int(path_index)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class TrajectoryEnsemble:
    """Batch of Euler-Maruyama paths with online running statistics.

    Optional trackers (candidate, gauge, occupation radii, target distance)
    are bound at simulation time; checks that need them verify the binding.
    """

    x0: np.ndarray
    dt: float
    horizon: float
    n_paths: int
    seed: int
    increment_mode: str
    sup_radius: np.ndarray
    final_states: np.ndarray
    exited: np.ndarray
    exit_times: np.ndarray
    timeline_times: np.ndarray
    timeline_max_radius: np.ndarray
    integral_gauge: np.ndarray | None = None
    sup_candidate: np.ndarray | None = None
    supermax_excess: np.ndarray | None = None
    supermax_excess_time: np.ndarray | None = None
    sup_target_distance: np.ndarray | None = None
    occupation_radii: np.ndarray | None = None
    occupation: np.ndarray | None = None
    outside_at_horizon: np.ndarray | None = None
    path_times: np.ndarray | None = None
    paths: np.ndarray | None = None
    candidate_ref: CandidateFunction | None = None
    gauge_ref: GaugeFunction | None = None

    @property
    def initial_radius(self) -> float:
        return float(np.linalg.norm(self.x0))

    def to_csv(self) -> str:
        lines = ["path,sup_radius,final_radius,integral_gauge,exited,exit_time"]
        final_r = np.linalg.norm(self.final_states, axis=-1)
        intl = (self.integral_gauge if self.integral_gauge is not None
                else np.full(self.n_paths, np.nan))
        for i in range(self.n_paths):
            lines.append(
                f"{i},{float(self.sup_radius[i])!r},{float(final_r[i])!r},{float(intl[i])!r},"
                f"{int(self.exited[i])},{float(self.exit_times[i])!r}"
            )
        return "\n".join(lines) + "\n"

    def paths_csv(self) -> str:
        if self.paths is None:
            raise ValueError("ensemble was simulated without path storage (thin=0)")
        n = self.paths.shape[-1]
        header = "t," + ",".join(f"x{i+1}" for i in range(n)) + ",path"
        lines = [header]
        for k, t in enumerate(self.path_times):
            for j in range(self.n_paths):
                coords = ",".join(repr(float(v)) for v in self.paths[k, j])
                lines.append(f"{float(t)!r},{coords},{j}")
        return "\n".join(lines) + "\n"

    def manifest(self, model_hash: str = "") -> dict:
        return {
            "model_hash": model_hash,
            "x0": list(map(float, np.atleast_1d(self.x0))),
            "dt": self.dt,
            "horizon": self.horizon,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "increment_mode": self.increment_mode,
        }

    def manifest_json(self, model_hash: str = "") -> str:
        return json.dumps(self.manifest(model_hash), indent=2)


def _resolve_control(model: ControlledDiffusion, control) -> int:
    if control is None:
        return 0
    if isinstance(control, (int, np.integer)):
        if not 0 <= control < model.n_controls:
            raise ValueError(f"control index {control} out of range")
        return int(control)
    for idx, c in enumerate(model.controls):
        if c.label == control:
            return idx
    raise ValueError(f"unknown control label {control!r}")


def _simulate_chunk(model, x0, dt, n_steps, path_lo, path_hi, seed, increment_mode,
                    lower, upper, control_index, feedback, cand, gauge,
                    occ_radii, target_fn, thin):
    n = path_hi - path_lo
    dim = model.dim_state
    m = model.dim_noise
    root_dt = np.sqrt(dt)
    gens = [_path_generator(seed, i) for i in range(path_lo, path_hi)]

    x = np.tile(np.asarray(x0, dtype=float), (n, 1))
    alive = np.ones(n, dtype=bool)
    exit_times = np.full(n, np.inf)
    radius = np.linalg.norm(x, axis=-1)
    sup_radius = radius.copy()
    timeline = np.zeros(n_steps + 1)
    timeline[0] = radius.max()

    v0 = cand.value(x0) if cand is not None else None
    sup_v = np.full(n, v0) if cand is not None else None
    acc_l = np.zeros(n) if gauge is not None or cand is not None else None
    supermax = np.zeros(n) if cand is not None else None
    supermax_t = np.zeros(n) if cand is not None else None
    occupation = np.zeros((len(occ_radii), n)) if occ_radii is not None else None
    sup_d = (np.abs(np.asarray(target_fn(x), dtype=float)) if target_fn is not None
             else None)
    if thin:
        n_samples = n_steps // thin + 1
        stored = np.empty((n_samples, n, dim))
        stored[0] = x
        sample_row = 1

    single = model.n_controls == 1
    step_index = 0
    while step_index < n_steps:
        block = min(_BLOCK_STEPS, n_steps - step_index)
        if increment_mode == "gaussian":
            incs = np.stack([g.standard_normal((block, m)) for g in gens], axis=1) * root_dt
        else:  # signed-bernoulli
            incs = np.stack(
                [g.integers(0, 2, size=(block, m)) * 2.0 - 1.0 for g in gens], axis=1
            ) * root_dt
        for b in range(block):
            k = step_index + b
            w = incs[b]
            # pre-step state carries the running integrals over [t_k, t_k + dt)
            if acc_l is not None and gauge is not None:
                acc_l[alive] += gauge.of_points(x[alive]) * dt
            if occupation is not None:
                out = radius[None, :] > np.asarray(occ_radii)[:, None]
                occupation[:, alive] += dt * out[:, alive]

            if single or feedback is None:
                ci = control_index
                fx = model.drift(x, ci)
                sx = model.sigma(x, ci)
                xn = x + fx * dt + np.einsum("nij,nj->ni", sx, w)
            else:
                indices = feedback.lookup(x)
                xn = x.copy()
                for ci in np.unique(indices):
                    mask = indices == ci
                    fx = model.drift(x[mask], ci)
                    sx = model.sigma(x[mask], ci)
                    xn[mask] = x[mask] + fx * dt + np.einsum("nij,nj->ni", sx, w[mask])

            inside = np.all(np.isfinite(xn), axis=-1)
            inside &= np.all((xn >= lower) & (xn <= upper), axis=-1)
            newly_exited = alive & ~inside
            exit_times[newly_exited] = (k + 1) * dt
            x = np.where((alive & inside)[:, None], xn, x)
            alive = alive & inside

            radius = np.linalg.norm(x, axis=-1)
            np.maximum(sup_radius, np.where(alive, radius, -np.inf), out=sup_radius)
            timeline[k + 1] = radius[alive].max() if alive.any() else 0.0
            if cand is not None:
                vx = cand.value(x)
                np.maximum(sup_v, np.where(alive, vx, -np.inf), out=sup_v)
                excess = vx + (acc_l if gauge is not None else 0.0) - v0
                better = alive & (excess > supermax)
                supermax_t[better] = (k + 1) * dt
                np.maximum(supermax, np.where(alive, excess, -np.inf), out=supermax)
            if sup_d is not None:
                dx = np.abs(np.asarray(target_fn(x), dtype=float))
                np.maximum(sup_d, np.where(alive, dx, -np.inf), out=sup_d)
            if thin and (k + 1) % thin == 0:
                stored[sample_row] = x
                sample_row += 1
        step_index += block

    out = {
        "x": x, "alive": alive, "exit_times": exit_times, "sup_radius": sup_radius,
        "timeline": timeline, "sup_v": sup_v, "acc_l": acc_l, "supermax": supermax,
        "supermax_t": supermax_t, "occupation": occupation, "sup_d": sup_d,
        "radius": radius,
    }
    if thin:
        out["stored"] = stored
    return out


def simulate_ensemble(
    model: ControlledDiffusion,
    x0,
    dt: float,
    T: float,
    n_paths: int,
    seed: int,
    control=None,
    feedback: FeedbackMap | None = None,
    increment_mode: str = "gaussian",
    domain: tuple | None = None,
    candidate: CandidateFunction | None = None,
    gauge: GaugeFunction | None = None,
    occupation_radii=None,
    target_distance=None,
    thin: int = 0,
    workers: int = 1,
) -> TrajectoryEnsemble:
    """Simulate n_paths Euler-Maruyama trajectories from x0.

    Paths leaving the domain box are flagged exited and frozen (statistics
    truncated at exit).  ``thin`` > 0 stores every thin-th state for
    plotting; running statistics always use every step.
    """
    if dt <= 0 or T <= 0 or n_paths < 1:
        raise ValueError("need dt > 0, T > 0, n_paths >= 1")
    if increment_mode not in ("gaussian", "signed-bernoulli"):
        raise ValueError(f"unknown increment mode {increment_mode!r}")
    x0 = np.asarray(x0, dtype=float)
    n_steps = int(round(T / dt))
    control_index = _resolve_control(model, control)
    if domain is None:
        lower = np.asarray(model.domain_lower)
        upper = np.asarray(model.domain_upper)
    else:
        lower = np.asarray(domain[0], dtype=float)
        upper = np.asarray(domain[1], dtype=float)

    target_fn = None
    if target_distance is not None:
        from .verifier import _distance_evaluator

        target_fn = _distance_evaluator(target_distance, model.dim_state)
    occ = np.asarray(occupation_radii, dtype=float) if occupation_radii is not None else None

    chunk_bounds = np.linspace(0, n_paths, max(1, int(workers)) + 1).astype(int)
    chunk_bounds = np.unique(chunk_bounds)
    args = [
        (model, x0, dt, n_steps, int(lo), int(hi), seed, increment_mode, lower, upper,
         control_index, feedback, candidate, gauge, occ, target_fn, thin)
        for lo, hi in zip(chunk_bounds[:-1], chunk_bounds[1:])
    ]
    if len(args) == 1:
        results = [_simulate_chunk(*args[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(args)) as pool:
            results = list(pool.map(lambda a: _simulate_chunk(*a), args))

    def cat(key):
        parts = [r[key] for r in results]
        if parts[0] is None:
            return None
        return np.concatenate(parts, axis=-1 if key == "occupation" else 0)

    timeline = results[0]["timeline"]
    for r in results[1:]:
        timeline = np.maximum(timeline, r["timeline"])

    exited = ~cat("alive")
    radius_end = cat("radius")
    ens = TrajectoryEnsemble(
        x0=x0,
        dt=dt,
        horizon=T,
        n_paths=n_paths,
        seed=seed,
        increment_mode=increment_mode,
        sup_radius=cat("sup_radius"),
        final_states=cat("x"),
        exited=exited,
        exit_times=np.where(exited, cat("exit_times"), np.inf),
        timeline_times=np.arange(n_steps + 1) * dt,
        timeline_max_radius=timeline,
        integral_gauge=cat("acc_l") if gauge is not None else None,
        sup_candidate=cat("sup_v"),
        supermax_excess=cat("supermax"),
        supermax_excess_time=cat("supermax_t"),
        sup_target_distance=cat("sup_d"),
        occupation_radii=occ,
        occupation=cat("occupation"),
        outside_at_horizon=(
            (radius_end[None, :] > occ[:, None]) if occ is not None else None
        ),
        candidate_ref=candidate,
        gauge_ref=gauge,
    )
    if thin:
        ens.path_times = np.arange(0, n_steps + 1, thin) * dt
        ens.paths = np.concatenate([r["stored"] for r in results], axis=1)
    return ens


@dataclass
class StabilizabilityEstimate:
    gauge: ComparisonGauge
    radii: np.ndarray
    worst_sup: np.ndarray
    consistent: bool
    reason: str


def estimate_stabilizability_gauge(
    model: ControlledDiffusion,
    control_or_feedback,
    x0_list,
    dt: float,
    T: float,
    n_paths: int,
    seed: int,
    increment_mode: str = "gaussian",
    small_radius_factor: float = 2.0,
    workers: int = 1,
) -> StabilizabilityEstimate:
    """Class-K envelope of the worst pathwise sup-radius over initial radii.

    The envelope is the least monotone majorant of r -> max over paths of
    sup_t |X_t|.  The verdict is "consistent with" the pathwise bound; any
    exited path makes it negative immediately.
    """
    feedback = control_or_feedback if isinstance(control_or_feedback, FeedbackMap) else None
    control = None if feedback is not None else control_or_feedback
    radii = np.array([np.linalg.norm(np.asarray(x, dtype=float)) for x in x0_list])
    order = np.argsort(radii)
    worst = np.empty(len(x0_list))
    for rank, j in enumerate(order):
        ens = simulate_ensemble(
            model, x0_list[j], dt, T, n_paths, seed + j, control=control,
            feedback=feedback, increment_mode=increment_mode, workers=workers,
        )
        if ens.exited.any():
            gauge = ComparisonGauge("K", np.array([0.0, max(radii)]),
                                    np.array([0.0, max(radii)]))
            return StabilizabilityEstimate(
                gauge=gauge, radii=radii[order], worst_sup=np.full(len(radii), np.inf),
                consistent=False,
                reason=f"{int(ens.exited.sum())} path(s) left the domain from |x0|="
                       f"{radii[j]:.4g}",
            )
        worst[rank] = float(ens.sup_radius.max())
    radii_sorted = radii[order]
    env = monotone_envelope(radii_sorted, worst, strict=True)
    knots_r = np.concatenate([[0.0], radii_sorted])
    knots_v = np.concatenate([[0.0], env])
    # strictness of the first knot pair
    knots_v[1] = max(knots_v[1], 1e-12 * max(1.0, env.max()))
    gauge = ComparisonGauge("K", knots_r, knots_v)
    small_ok = worst[0] <= small_radius_factor * radii_sorted[0] or radii_sorted[0] == 0.0
    if not small_ok:
        return StabilizabilityEstimate(
            gauge=gauge, radii=radii_sorted, worst_sup=worst, consistent=False,
            reason=f"sup-radius {worst[0]:.4g} from |x0|={radii_sorted[0]:.4g} does not "
                   "shrink with the initial radius",
        )
    return StabilizabilityEstimate(
        gauge=gauge, radii=radii_sorted, worst_sup=worst, consistent=True,
        reason="all paths bounded; envelope monotone and small near 0",
    )


@dataclass
class DecayEnvelopeEstimate:
    gauge: ComparisonGauge | None
    kappa: float
    asymptotic: bool
    stable: bool
    reason: str


def estimate_decay_envelope(
    ensembles: list[TrajectoryEnsemble],
    kappa_min: float = 1e-4,
    fit_floor: float = 1e-10,
) -> DecayEnvelopeEstimate:
    """Fit the least separable envelope gamma(r) exp(-kappa t) over ensembles.

    kappa is the most conservative fitted decay rate across initial radii;
    gamma is then the least radius gauge making the envelope dominate every
    sampled max-radius curve.
    """
    rates = []
    for ens in ensembles:
        m = ens.timeline_max_radius
        t = ens.timeline_times
        mask = m > max(fit_floor, 1e-6 * max(m[0], fit_floor))
        if mask.sum() < 2:
            rates.append(0.0)
            continue
        slope = np.polyfit(t[mask], np.log(m[mask]), 1)[0]
        rates.append(-slope)
    kappa = float(min(rates))
    exited = any(ens.exited.any() for ens in ensembles)

    if exited or kappa <= kappa_min:
        final = np.array([np.linalg.norm(e.final_states, axis=-1).max() for e in ensembles])
        initial = np.array([e.initial_radius for e in ensembles])
        if exited:
            reason = "paths left the domain"
        elif np.all(final <= 0.5 * np.maximum(initial, 1e-300)):
            reason = ("no positive decay rate fit, but final radii shrank: "
                      "horizon likely too short")
        else:
            reason = "no decay observed (stable but not asymptotically)"
        stable = not exited
        return DecayEnvelopeEstimate(gauge=None, kappa=kappa, asymptotic=False,
                                     stable=stable, reason=reason)

    order = np.argsort([e.initial_radius for e in ensembles])
    radii = []
    gammas = []
    for j in order:
        ens = ensembles[j]
        amp = float(np.max(ens.timeline_max_radius * np.exp(kappa * ens.timeline_times)))
        radii.append(ens.initial_radius)
        gammas.append(amp)
    env = monotone_envelope(np.asarray(radii), np.asarray(gammas), strict=True)
    knots_r = np.concatenate([[0.0], radii])
    knots_v = np.concatenate([[0.0], env])
    knots_v[1] = max(knots_v[1], 1e-12 * max(1.0, env.max()))
    gauge = ComparisonGauge("KL", knots_r, knots_v, kappa=kappa)
    return DecayEnvelopeEstimate(gauge=gauge, kappa=kappa, asymptotic=True, stable=True,
                                 reason="positive decay rate fits all ensembles")


@dataclass
class OccupationEstimate:
    radii: np.ndarray
    times: np.ndarray          # nondecreasing over shrinking radii
    censored: np.ndarray       # horizon hit while still outside B_{r_i}

    def require_uncensored(self):
        if self.censored.any():
            bad = self.radii[self.censored]
            raise ValueError(
                f"occupation bounds censored at radii {bad.tolist()}: paths never "
                "entered these balls before the horizon; rerun with a longer T"
            )


def measure_occupation_times(ensembles: list[TrajectoryEnsemble], radii) -> OccupationEstimate:
    """Worst sampled Lebesgue time spent outside each ball B_{r_i}.

    Maxima over paths and initial points; estimates are lower bounds on the
    essential-supremum bounds.  Ensembles must have been simulated with
    matching occupation radii.
    """
    radii = np.asarray(radii, dtype=float)
    times = np.zeros(len(radii))
    censored = np.zeros(len(radii), dtype=bool)
    for ens in ensembles:
        if ens.occupation is None or ens.occupation_radii is None:
            raise ValueError("ensemble lacks occupation tracking; pass occupation_radii "
                             "to simulate_ensemble")
        if len(ens.occupation_radii) != len(radii) or np.any(ens.occupation_radii != radii):
            raise ValueError("ensemble occupation radii do not match the request")
        times = np.maximum(times, ens.occupation.max(axis=1))
        censored |= ens.outside_at_horizon.any(axis=1)
    times = np.maximum.accumulate(times)  # nondecreasing as radii shrink
    return OccupationEstimate(radii=radii, times=times, censored=censored)


@dataclass
class DecayGaugeConstruction:
    radii: np.ndarray
    occupation_bounds: np.ndarray
    weights: np.ndarray
    budget: float
    gauge: GaugeFunction


def default_weight_rule(i: int, occupation_time: float) -> float:
    return min(2.0 ** (-i), 2.0 ** (-i) / max(occupation_time, 1.0))


def build_decay_gauge(occupation, radii=None, weight_rule=None) -> DecayGaugeConstruction:
    """Decreasing weights against occupation bounds, summable by construction.

    The default rule l_i = min(2^-i, 2^-i / max(T_i, 1)) gives
    sum_i l_i T_i <= sum_i 2^-i <= 2 for any finite nondecreasing T_i.  The
    gauge ramps from 0 at the innermost radius and is constant beyond the
    outermost one.
    """
    if isinstance(occupation, OccupationEstimate):
        occupation.require_uncensored()
        t = occupation.times
        radii = occupation.radii
    else:
        t = np.asarray(occupation, dtype=float)
        radii = np.asarray(radii, dtype=float)
    if np.any(~np.isfinite(t)):
        raise ValueError("occupation bounds must be finite")
    if np.any(np.diff(t) < 0):
        raise ValueError("occupation bounds must be nondecreasing")
    if np.any(np.diff(radii) >= 0) or np.any(radii <= 0):
        raise ValueError("radii must be positive and strictly decreasing")
    rule = weight_rule or default_weight_rule
    n = len(radii)
    weights = np.array([rule(i, t[i]) for i in range(n)])
    if np.any(weights <= 0) or np.any(np.diff(weights) >= 0):
        raise ValueError("weight rule must produce positive decreasing weights")
    budget = float(np.sum(weights * t))
    inner_weight = rule(n, t[-1])  # one index past the innermost radius
    # gauge value at radius r_i is the next (smaller) weight l_{i+1}
    knots_r = np.concatenate([[0.0], radii[::-1]])
    knots_v = np.concatenate([[0.0], [inner_weight], weights[::-1][:-1]])
    gauge = GaugeFunction.from_knots(knots_r, knots_v, monotone=True)
    return DecayGaugeConstruction(radii=radii, occupation_bounds=t, weights=weights,
                                  budget=budget, gauge=gauge)


@dataclass
class SupermaxingaleResult:
    passed: bool
    worst_excess: float
    worst_path: int
    worst_time: float
    threshold: float


def check_supermaxingale(
    ensemble: TrajectoryEnsemble,
    candidate: CandidateFunction,
    gauge: GaugeFunction | None,
    tol: float,
) -> SupermaxingaleResult:
    """Worst pathwise excess of V(X_t) + int_0^t l over V(x0).

    Uses the statistics tracked online during simulation; the ensemble must
    have been simulated with the same candidate (and gauge).
    """
    if ensemble.supermax_excess is None:
        raise ValueError("ensemble lacks the running V + integral statistic; pass "
                         "candidate= (and gauge=) to simulate_ensemble")
    if ensemble.candidate_ref != candidate or (
        gauge is not None and ensemble.gauge_ref is not None
        and ensemble.gauge_ref != gauge
    ):
        raise ValueError("ensemble was tracked with a different candidate or gauge")
    v0 = float(candidate.value(ensemble.x0))
    worst_idx = int(np.argmax(ensemble.supermax_excess))
    worst = float(ensemble.supermax_excess[worst_idx])
    threshold = tol * (1.0 + v0)
    return SupermaxingaleResult(
        passed=worst <= threshold,
        worst_excess=worst,
        worst_path=worst_idx,
        worst_time=float(ensemble.supermax_excess_time[worst_idx]),
        threshold=threshold,
    )


@dataclass
class ViabilityEstimate:
    escape_fraction: float
    n_escaped: int
    excess_quantiles: dict


def empirical_viability(ensemble: TrajectoryEnsemble, mu: float,
                        tol: float = 0.0) -> ViabilityEstimate:
    """Fraction of paths whose running sup of the candidate exceeds mu (1+tol).

    For an almost-surely viable sublevel set the target is zero; small
    nonzero fractions are attributable to the Euler discretization and are
    reported with their excess distribution.
    """
    if ensemble.sup_candidate is None:
        raise ValueError("ensemble lacks candidate tracking; pass candidate= to "
                         "simulate_ensemble")
    v0 = float(ensemble.candidate_ref.value(ensemble.x0))
    if v0 > mu * (1 + 1e-12):
        raise ValueError(f"initial point has V(x0)={v0} above the level {mu}")
    sup_v = ensemble.sup_candidate
    escaped = sup_v > mu * (1.0 + tol)
    excess = np.maximum(sup_v - mu, 0.0) / mu
    qs = {q: float(np.quantile(excess, q)) for q in (0.5, 0.9, 0.99, 1.0)}
    return ViabilityEstimate(
        escape_fraction=float(escaped.mean()),
        n_escaped=int(escaped.sum()),
        excess_quantiles=qs,
    )
