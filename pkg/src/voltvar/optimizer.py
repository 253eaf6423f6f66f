"""Centralized volt-var optimization over PV reactive power and tap changes.

For each feasible integer tap-change combination (bounded per interval and
by the tap range), a continuous LP picks the cheapest reactive setpoints
that keep every constrained node inside the voltage limits; the cheapest
feasible (combination, setpoints) pair wins, with ties broken toward fewer
tap changes and then lexicographic regulator order. When no combination is
feasible, a relaxed solve minimizes weighted action costs plus the sum of
squared voltage violations, which always has a solution.

Predicted voltage at node i for a candidate plan:
    v0_i + sum_k dq[i,k] * (q_target_k - q_now_k) + sum_r dvr[i,r] * dT_r
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .smalllp import INFEASIBLE, OPTIMAL, active_set_qp, simplex_solve

DEFAULT_V_LIMITS = (0.975, 1.04)
DEFAULT_TAP_CHANGE_CAP = 2  # per control interval
DEFAULT_TAP_COST = 0.14  # per tap change
DEFAULT_Q_COST = 8e-4  # per kvar held over an interval
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 1e4
MAX_TAP_COMBINATIONS = 100_000

_TIE_EPS = 1e-12


class CvvcInfeasibleError(Exception):
    """No tap combination admits feasible reactive setpoints; callers should
    fall back to solve_cvvc_relaxed."""


class CvvcProblemError(Exception):
    pass


@dataclass
class PlantVar:
    id: str
    q_now_kvar: float
    q_min_kvar: float
    q_max_kvar: float
    cost_per_kvar: float = DEFAULT_Q_COST


@dataclass
class TapVar:
    id: str
    tap_now: int
    tap_min: int
    tap_max: int
    max_change: int = DEFAULT_TAP_CHANGE_CAP
    cost_per_tap: float = DEFAULT_TAP_COST


@dataclass
class CvvcProblem:
    nodes: list  # labels, reporting only
    v0: np.ndarray  # current voltages at the constrained nodes, pu
    plants: list  # PlantVar
    regulators: list  # TapVar (one per control group)
    dq: np.ndarray  # (n_nodes, n_plants), pu per kvar
    dvr: np.ndarray  # (n_nodes, n_regulators), pu per tap
    v_lo: float = DEFAULT_V_LIMITS[0]
    v_hi: float = DEFAULT_V_LIMITS[1]
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        self.v0 = np.asarray(self.v0, dtype=float)
        self.dq = np.asarray(self.dq, dtype=float).reshape(len(self.v0), len(self.plants))
        self.dvr = np.asarray(self.dvr, dtype=float).reshape(len(self.v0), len(self.regulators))
        if not self.v_lo < self.v_hi:
            raise CvvcProblemError("voltage limits inverted")
        if not (np.all(np.isfinite(self.dq)) and np.all(np.isfinite(self.dvr))):
            raise CvvcProblemError("non-finite sensitivities")
        for p in self.plants:
            if not p.q_min_kvar <= 0.0 <= p.q_max_kvar:
                raise CvvcProblemError(f"plant {p.id}: reactive bounds must straddle 0")
        for r in self.regulators:
            if not (r.tap_min <= r.tap_now <= r.tap_max):
                raise CvvcProblemError(f"regulator {r.id}: current tap out of range")
            if r.max_change < 0:
                raise CvvcProblemError(f"regulator {r.id}: negative tap-change cap")


@dataclass
class ControlPlan:
    q_target_kvar: dict  # plant id -> absolute setpoint
    tap_change: dict  # regulator id -> signed integer taps
    slack_pu: dict  # node label -> violation slack (0 on the strict branch)
    objective: float
    branch: str  # "strict" | "relaxed"
    predicted_v: dict  # node label -> pu after the plan

    @property
    def total_tap_changes(self) -> int:
        return sum(abs(d) for d in self.tap_change.values())


def _tap_combinations(problem: CvvcProblem):
    """Feasible tap-change vectors ordered for deterministic tie-breaking:
    fewer total changes first, then smaller per-regulator magnitudes in
    regulator order, then down before up."""
    choices = []
    for r in problem.regulators:
        opts = [
            d
            for d in range(-r.max_change, r.max_change + 1)
            if r.tap_min <= r.tap_now + d <= r.tap_max
        ]
        choices.append(opts)
    count = 1
    for opts in choices:
        count *= len(opts)
        if count > MAX_TAP_COMBINATIONS:
            raise CvvcProblemError(
                f"tap combination count exceeds {MAX_TAP_COMBINATIONS}; "
                "reduce regulators or the per-interval change cap"
            )
    combos = list(itertools.product(*choices))
    combos.sort(key=lambda c: (sum(abs(d) for d in c), tuple(abs(d) for d in c), c))
    return combos


def _tap_cost(problem, combo):
    return sum(r.cost_per_tap * abs(d) for r, d in zip(problem.regulators, combo))


def _strict_lp(problem, v_base):
    """Cheapest q (absolute setpoints) keeping v_base + dq (q - q_now)
    within limits; returns (q, cost) or None when infeasible."""
    k = len(problem.plants)
    if k == 0:
        ok = np.all(v_base >= problem.v_lo - 1e-9) and np.all(v_base <= problem.v_hi + 1e-9)
        return (np.zeros(0), 0.0) if ok else None

    q_now = np.array([p.q_now_kvar for p in problem.plants])
    shift = problem.dq @ q_now  # constant from measuring sensitivities at q_now
    ub = problem.v_hi - v_base + shift
    lb = problem.v_lo - v_base + shift

    # variables x = [q+, q-]; q = q+ - q-
    c = np.concatenate(
        [
            [p.cost_per_kvar for p in problem.plants],
            [p.cost_per_kvar for p in problem.plants],
        ]
    )
    a_rows = [np.concatenate([problem.dq, -problem.dq], axis=1),
              np.concatenate([-problem.dq, problem.dq], axis=1)]
    b_rows = [ub, -lb]
    caps = np.zeros((2 * k, 2 * k))
    for j, p in enumerate(problem.plants):
        caps[j, j] = 1.0
        caps[k + j, k + j] = 1.0
    a_rows.append(caps)
    b_rows.append(
        np.concatenate(
            [
                [max(p.q_max_kvar, 0.0) for p in problem.plants],
                [max(-p.q_min_kvar, 0.0) for p in problem.plants],
            ]
        )
    )
    a = np.concatenate(a_rows, axis=0)
    b = np.concatenate(b_rows)
    x, obj, status = simplex_solve(c, a, b)
    if status == INFEASIBLE:
        return None
    if status != OPTIMAL:
        raise CvvcProblemError(f"strict LP ended {status}")
    q = x[:k] - x[k:]
    return q, float(np.abs(q) @ np.array([p.cost_per_kvar for p in problem.plants]))


def _prune_infeasible(problem, v_base):
    """Bound propagation: a combo dies if some node cannot be brought inside
    the limits even at the best corner of the q box."""
    if not problem.plants:
        return False
    q_now = np.array([p.q_now_kvar for p in problem.plants])
    lo = np.array([p.q_min_kvar for p in problem.plants]) - q_now
    hi = np.array([p.q_max_kvar for p in problem.plants]) - q_now
    up = problem.dq.clip(min=0.0) @ hi + problem.dq.clip(max=0.0) @ lo
    dn = problem.dq.clip(min=0.0) @ lo + problem.dq.clip(max=0.0) @ hi
    reach_hi = v_base + up
    reach_lo = v_base + dn
    return bool(np.any(reach_hi < problem.v_lo - 1e-12) or np.any(reach_lo > problem.v_hi + 1e-12))


def _plan(problem, combo, q, slack, branch, objective):
    predicted = problem.v0 + problem.dvr @ np.array(combo, dtype=float)
    if problem.plants:
        q_now = np.array([p.q_now_kvar for p in problem.plants])
        predicted = predicted + problem.dq @ (q - q_now)
    return ControlPlan(
        q_target_kvar={p.id: float(q[j]) for j, p in enumerate(problem.plants)},
        tap_change={r.id: int(d) for r, d in zip(problem.regulators, combo)},
        slack_pu={n: float(s) for n, s in zip(problem.nodes, slack)},
        objective=float(objective),
        branch=branch,
        predicted_v={n: float(v) for n, v in zip(problem.nodes, predicted)},
    )


def solve_cvvc(problem: CvvcProblem) -> ControlPlan:
    """Strict branch: voltage limits are hard constraints. Raises
    CvvcInfeasibleError when every tap combination is infeasible."""
    best = None
    for combo in _tap_combinations(problem):
        v_base = problem.v0 + problem.dvr @ np.array(combo, dtype=float)
        if _prune_infeasible(problem, v_base):
            continue
        out = _strict_lp(problem, v_base)
        if out is None:
            continue
        q, q_cost = out
        obj = q_cost + _tap_cost(problem, combo)
        if best is None or obj < best[0] - _TIE_EPS:
            best = (obj, combo, q)
    if best is None:
        raise CvvcInfeasibleError("no tap combination satisfies the voltage limits")
    obj, combo, q = best
    return _plan(problem, combo, q, np.zeros(len(problem.v0)), "strict", obj)


def solve_cvvc_relaxed(problem: CvvcProblem) -> ControlPlan:
    """Relaxed branch: per-node slacks widen the voltage window and their
    squared sum is penalized; always solvable."""
    n = len(problem.v0)
    k = len(problem.plants)
    q_cost = np.array([p.cost_per_kvar for p in problem.plants])
    best = None
    for combo in _tap_combinations(problem):
        v_base = problem.v0 + problem.dvr @ np.array(combo, dtype=float)
        if k == 0:
            slack = np.maximum(0.0, np.maximum(problem.v_lo - v_base, v_base - problem.v_hi))
            obj = problem.alpha * _tap_cost(problem, combo) + problem.beta * float(slack @ slack)
            cand = (obj, combo, np.zeros(0), slack)
        else:
            q_now = np.array([p.q_now_kvar for p in problem.plants])
            shift = problem.dq @ q_now
            ub = problem.v_hi - v_base + shift
            lb = problem.v_lo - v_base + shift
            # x = [q+, q-, s]
            dim = 2 * k + n
            h = np.zeros((dim, dim))
            h[: 2 * k, : 2 * k] = 1e-12 * np.eye(2 * k)  # keep H positive definite
            h[2 * k :, 2 * k :] = 2.0 * problem.beta * np.eye(n)
            g = np.concatenate([problem.alpha * q_cost, problem.alpha * q_cost, np.zeros(n)])

            rows, rhs = [], []
            eye_n = np.eye(n)
            rows.append(np.concatenate([problem.dq, -problem.dq, -eye_n], axis=1))
            rhs.append(ub)
            rows.append(np.concatenate([-problem.dq, problem.dq, -eye_n], axis=1))
            rhs.append(-lb)
            box = np.zeros((2 * k, dim))
            for j in range(2 * k):
                box[j, j] = 1.0
            rows.append(box)
            rhs.append(
                np.concatenate(
                    [
                        [max(p.q_max_kvar, 0.0) for p in problem.plants],
                        [max(-p.q_min_kvar, 0.0) for p in problem.plants],
                    ]
                )
            )
            sneg = np.zeros((n, dim))
            sneg[:, 2 * k :] = -np.eye(n)
            rows.append(sneg)
            rhs.append(np.zeros(n))
            a = np.concatenate(rows, axis=0)
            b = np.concatenate(rhs)

            x0 = np.zeros(dim)
            viol0 = np.maximum(0.0, np.maximum(lb - shift, shift - ub))
            x0[2 * k :] = viol0
            x = active_set_qp(h, g, a, b, x0)
            q = x[:k] - x[k:]
            slack = np.maximum(x[2 * k :], 0.0)
            obj = problem.alpha * (
                float(np.abs(q) @ q_cost) + _tap_cost(problem, combo)
            ) + problem.beta * float(slack @ slack)
            cand = (obj, combo, q, slack)
        if best is None or cand[0] < best[0] - _TIE_EPS:
            best = cand
    obj, combo, q, slack = best
    return _plan(problem, combo, q, slack, "relaxed", obj)


def solve_with_fallback(problem: CvvcProblem):
    """Strict solve, falling back to the relaxed branch; returns the plan."""
    try:
        return solve_cvvc(problem)
    except CvvcInfeasibleError:
        return solve_cvvc_relaxed(problem)


# --------------------------------------------------------------------------- #
# JSON debugging interface


def problem_to_dict(problem: CvvcProblem) -> dict:
    return {
        "nodes": list(problem.nodes),
        "v0": [float(v) for v in problem.v0],
        "v_limits": [problem.v_lo, problem.v_hi],
        "alpha": problem.alpha,
        "beta": problem.beta,
        "plants": [
            {
                "id": p.id,
                "q_now_kvar": p.q_now_kvar,
                "q_min_kvar": p.q_min_kvar,
                "q_max_kvar": p.q_max_kvar,
                "cost_per_kvar": p.cost_per_kvar,
            }
            for p in problem.plants
        ],
        "regulators": [
            {
                "id": r.id,
                "tap_now": r.tap_now,
                "tap_min": r.tap_min,
                "tap_max": r.tap_max,
                "max_change": r.max_change,
                "cost_per_tap": r.cost_per_tap,
            }
            for r in problem.regulators
        ],
        "dq": problem.dq.tolist(),
        "dvr": problem.dvr.tolist(),
    }


def problem_from_dict(doc: dict) -> CvvcProblem:
    try:
        plants = [
            PlantVar(
                p["id"],
                float(p["q_now_kvar"]),
                float(p["q_min_kvar"]),
                float(p["q_max_kvar"]),
                float(p.get("cost_per_kvar", DEFAULT_Q_COST)),
            )
            for p in doc.get("plants", [])
        ]
        regs = [
            TapVar(
                r["id"],
                int(r["tap_now"]),
                int(r["tap_min"]),
                int(r["tap_max"]),
                int(r.get("max_change", DEFAULT_TAP_CHANGE_CAP)),
                float(r.get("cost_per_tap", DEFAULT_TAP_COST)),
            )
            for r in doc.get("regulators", [])
        ]
        v_lo, v_hi = doc.get("v_limits", DEFAULT_V_LIMITS)
        return CvvcProblem(
            nodes=list(doc["nodes"]),
            v0=np.array(doc["v0"], dtype=float),
            plants=plants,
            regulators=regs,
            dq=np.array(doc.get("dq", []), dtype=float).reshape(len(doc["nodes"]), len(plants)),
            dvr=np.array(doc.get("dvr", []), dtype=float).reshape(len(doc["nodes"]), len(regs)),
            v_lo=float(v_lo),
            v_hi=float(v_hi),
            alpha=float(doc.get("alpha", DEFAULT_ALPHA)),
            beta=float(doc.get("beta", DEFAULT_BETA)),
        )
    except KeyError as exc:
        raise CvvcProblemError(f"problem document missing field {exc}") from None


def plan_to_dict(plan: ControlPlan) -> dict:
    return {
        "branch": plan.branch,
        "objective": plan.objective,
        "q_target_kvar": plan.q_target_kvar,
        "tap_change": plan.tap_change,
        "slack_pu": plan.slack_pu,
        "predicted_v": plan.predicted_v,
    }


def load_problem(path) -> CvvcProblem:
    with open(path) as fh:
        return problem_from_dict(json.load(fh))


def save_plan(plan: ControlPlan, path) -> None:
    with open(path, "w") as fh:
        json.dump(plan_to_dict(plan), fh, indent=1)
        fh.write("\n")
