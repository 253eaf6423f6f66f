"""Voltage and voltage-sensitivity estimators fitted on training sweeps.

Three products come out of a training dataset:

* a per-critical-node linear regression of |V| on the measurement vector
  (feeder-head and plant P/Q channels) plus an intercept;
* per (node, plant) reactive-power sensitivity curves d = a / (c + Qs)^b
  over the feeder-head reactive power Qs, fitted by a log-space linear
  initializer refined with damped Gauss-Newton;
* a static per-(node, regulator-group) tap sensitivity table from the
  single-scenario tap perturbations.

Online estimation superimposes the tap term on the regression prediction;
the corrected variant shifts every node by the estimation error observed at
its upstream regulator's secondary bus.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg

from .feeder import FeederModel, NodeRef
from .training import CriticalNodeSet, TrainingDataset, select_critical_nodes

MODEL_SCHEMA_VERSION = 1

DEFAULT_CURVE_OFFSET_KVAR = 3000.0
NEGLIGIBLE_SENSITIVITY = 1e-8  # pu per kvar


class EstimatorError(Exception):
    pass


@dataclass
class VoltageRegressionModel:
    channels: list
    nodes: list  # critical NodeRef, fit order
    intercept: np.ndarray  # per node
    coef: np.ndarray  # (n_nodes, n_channels)
    residual_rms: np.ndarray  # per node, training residual
    t0: dict  # regulator device id -> baseline tap

    def predict(self, m: np.ndarray) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        if m.shape[-1] != len(self.channels):
            raise EstimatorError(
                f"measurement vector has {m.shape[-1]} channels, expected {len(self.channels)}"
            )
        return self.intercept + self.coef @ m


@dataclass
class SensitivityCurve:
    a: float
    b: float
    c: float  # kvar offset keeping c + Qs positive
    qs_min: float
    qs_max: float
    negligible: bool = False

    def covers(self, q_s: float) -> bool:
        return self.qs_min <= q_s <= self.qs_max


@dataclass
class TapSensitivityTable:
    groups: list  # group ids, column order
    nodes: list  # NodeRef, row order
    delta: np.ndarray  # (n_nodes, n_groups), pu per up-tap
    t0_group: dict  # group id -> baseline tap

    def __post_init__(self):
        self._row = {n: i for i, n in enumerate(self.nodes)}
        self._col = {g: j for j, g in enumerate(self.groups)}

    def value(self, node: NodeRef, group: str) -> float:
        return float(self.delta[self._row[node], self._col[group]])

    def tap_term(self, taps: dict) -> np.ndarray:
        """Per-node voltage shift for the given group taps vs the baseline."""
        dt = np.array([taps[g] - self.t0_group[g] for g in self.groups], dtype=float)
        return self.delta @ dt


@dataclass
class CorrectionContext:
    v_measured: dict  # regulator device id -> measured secondary voltage, pu
    epsilon: dict  # regulator device id -> measurement-minus-estimate error, pu
    upstream: dict  # NodeRef -> regulator device id or None


# --------------------------------------------------------------------------- #
# fitting


def fit_voltage_regression(
    dataset: TrainingDataset, critical: CriticalNodeSet
) -> VoltageRegressionModel:
    """Ordinary least squares of |V| on [1, M] per critical node. The sweep
    rows all share the baseline taps, so the tap term is absent here and is
    superimposed at estimation time."""
    m = dataset.measurement_matrix()
    n_rows, n_ch = m.shape
    if n_rows < n_ch + 1:
        raise EstimatorError(f"need at least {n_ch + 1} rows, have {n_rows}")
    x = np.column_stack([np.ones(n_rows), m])

    # rank check with column pivoting so the offending channels get named
    _, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diagonal(r))
    tol = diag.max() * max(x.shape) * np.finfo(float).eps
    rank = int((diag > tol).sum())
    if rank < x.shape[1]:
        names = ["intercept"] + list(dataset.channels)
        bad = sorted(names[j] for j in piv[rank:])
        raise EstimatorError(f"collinear measurement columns: {bad}")

    node_idx = [dataset.nodes.index(n) for n in critical.nodes]
    v = dataset.voltage_matrix()[:, node_idx]
    beta, _, _, _ = np.linalg.lstsq(x, v, rcond=None)
    resid = v - x @ beta
    rms = np.sqrt(np.mean(resid**2, axis=0))
    return VoltageRegressionModel(
        list(dataset.channels),
        list(critical.nodes),
        beta[0].copy(),
        beta[1:].T.copy(),
        rms,
        dict(dataset.t0),
    )


def _fit_power_curve(qs, delta, c, max_iter=50, tol=1e-10):
    """Fit delta = a / (c + qs)^b with b >= 0. Log-space linear fit seeds a
    damped Gauss-Newton refinement on the raw residuals."""
    qs = np.asarray(qs, dtype=float)
    delta = np.asarray(delta, dtype=float)
    base = c + qs
    if np.any(base <= 0.0):
        raise EstimatorError(
            f"offset {c} leaves non-positive c + Qs (min Qs {qs.min():.1f}); use a larger offset"
        )
    sign = 1.0 if np.median(delta) >= 0 else -1.0
    mag = sign * delta
    pos = mag > 0
    if pos.sum() >= 2:
        slope, intercept = np.polyfit(np.log(base[pos]), np.log(mag[pos]), 1)
        a = sign * float(np.exp(intercept))
        b = max(-float(slope), 0.0)
    else:
        a = float(np.mean(delta) * base.mean())
        b = 1.0
    if not np.isfinite(a) or not np.isfinite(b):
        a, b = float(np.mean(delta)), 0.0

    def sse(a_, b_):
        return float(np.sum((delta - a_ / base**b_) ** 2))

    best = sse(a, b)
    for _ in range(max_iter):
        f = a / base**b
        r = delta - f
        ja = 1.0 / base**b
        jb = -a * np.log(base) / base**b
        jtj = np.array([[ja @ ja, ja @ jb], [ja @ jb, jb @ jb]])
        jtr = np.array([ja @ r, jb @ r])
        try:
            step = np.linalg.solve(jtj + 1e-14 * np.eye(2), jtr)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        improved = False
        for _ in range(25):
            a_new = a + scale * step[0]
            b_new = max(b + scale * step[1], 0.0)
            val = sse(a_new, b_new)
            if val <= best:
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
        moved = max(abs(a_new - a), abs(b_new - b))
        a, b, best = a_new, b_new, val
        if moved < tol:
            break
    return a, b


def sensitivity_samples(dataset: TrainingDataset):
    """Finite-difference sensitivity samples from consecutive sweep rows.

    Yields (plant, qs, delta_v_per_kvar) with delta_v per node; qs is the
    feeder-head reactive power of the later (post-perturbation) row.
    """
    qs_all = dataset.head_q_total()
    by_key = {}
    for i, row in enumerate(dataset.rows):
        by_key.setdefault((row.scenario_id, row.plant), []).append(i)
    for (_, plant), idx in sorted(by_key.items()):
        for prev, cur in zip(idx, idx[1:]):
            dq = dataset.rows[cur].q_cmd_kvar - dataset.rows[prev].q_cmd_kvar
            if dq == 0.0:
                continue
            dv = (dataset.rows[cur].v_pu - dataset.rows[prev].v_pu) / dq
            yield plant, float(qs_all[cur]), dv


def fit_sensitivity_curves(
    dataset: TrainingDataset,
    critical: CriticalNodeSet,
    c_offset: float = DEFAULT_CURVE_OFFSET_KVAR,
) -> dict:
    """Fit one curve per (critical node, plant). Pairs whose samples never
    exceed the negligible threshold get a zero curve flagged negligible."""
    node_idx = [dataset.nodes.index(n) for n in critical.nodes]
    plants = sorted({r.plant for r in dataset.rows})
    samples = {p: ([], []) for p in plants}  # qs list, delta matrix rows
    for plant, qs, dv in sensitivity_samples(dataset):
        samples[plant][0].append(qs)
        samples[plant][1].append(dv[node_idx])

    curves = {}
    for plant in plants:
        qs_list, dv_rows = samples[plant]
        if len(qs_list) < 1:
            raise EstimatorError(
                f"plant {plant}: need at least 2 distinct Q levels per scenario"
            )
        qs = np.array(qs_list)
        dv = np.array(dv_rows)  # (n_samples, n_critical)
        qs_min, qs_max = float(qs.min()), float(qs.max())
        for j, node in enumerate(critical.nodes):
            d = dv[:, j]
            if np.max(np.abs(d)) < NEGLIGIBLE_SENSITIVITY:
                curves[(node, plant)] = SensitivityCurve(
                    0.0, 0.0, c_offset, qs_min, qs_max, negligible=True
                )
                continue
            a, b = _fit_power_curve(qs, d, c_offset)
            curves[(node, plant)] = SensitivityCurve(a, b, c_offset, qs_min, qs_max)
    return curves


def estimate_sensitivity(curve: SensitivityCurve, q_s: float) -> float:
    """Evaluate a fitted curve at the given feeder-head reactive power."""
    if curve.c + q_s <= 0.0:
        raise EstimatorError(f"Qs={q_s:.1f} kvar is outside the curve domain (c={curve.c})")
    return curve.a / (curve.c + q_s) ** curve.b


def fit_tap_table(dataset: TrainingDataset, model: FeederModel) -> TapSensitivityTable:
    groups = sorted(dataset.tap_perturbations)
    if set(groups) != set(model.control_groups()):
        raise EstimatorError("tap perturbations do not cover the model's control groups")
    delta = np.column_stack(
        [dataset.tap_perturbations[g].delta_v for g in groups]
    ) if groups else np.zeros((len(dataset.nodes), 0))
    t0_group = {}
    for gid, devs in model.control_groups().items():
        t0_group[gid] = dataset.t0[devs[0].id]
    table = TapSensitivityTable(groups, list(dataset.nodes), delta, t0_group)
    step = max((r.step_pu for r in model.regulators), default=0.00625)
    if groups and np.max(np.abs(delta)) > 2 * step:
        raise EstimatorError("tap sensitivity exceeds two tap steps; perturbation suspect")
    return table


# --------------------------------------------------------------------------- #
# online estimation


def estimate_voltages(
    regression: VoltageRegressionModel,
    taps: TapSensitivityTable,
    m: np.ndarray,
    group_taps: dict,
) -> dict:
    """Critical-node voltage estimates from measurements and current taps,
    no measurement correction."""
    pred = regression.predict(m)
    shift = taps.tap_term(group_taps)
    out = {}
    for i, node in enumerate(regression.nodes):
        out[node] = float(pred[i] + shift[taps._row[node]])
    return out


def correction_context(
    model: FeederModel,
    estimates: dict,
    v_r_measured: dict,
    critical_nodes,
) -> CorrectionContext:
    epsilon = {}
    for r in model.regulators:
        if r.id not in v_r_measured:
            raise EstimatorError(f"missing secondary voltage measurement for regulator {r.id!r}")
        sec = NodeRef(r.secondary, r.phase)
        if sec not in estimates:
            raise EstimatorError(f"regulator {r.id!r} secondary {sec} is not a critical node")
        epsilon[r.id] = float(v_r_measured[r.id]) - estimates[sec]
    upstream = {n: model.upstream_regulator(n) for n in critical_nodes}
    return CorrectionContext(dict(v_r_measured), epsilon, upstream)


def estimate_voltages_corrected(
    regression: VoltageRegressionModel,
    taps: TapSensitivityTable,
    m: np.ndarray,
    group_taps: dict,
    v_r_measured: dict,
    model: FeederModel,
) -> dict:
    """Estimates shifted by the error observed at each node's upstream
    regulator secondary; exact at the secondaries themselves."""
    base = estimate_voltages(regression, taps, m, group_taps)
    ctx = correction_context(model, base, v_r_measured, list(base))
    out = {}
    for node, v in base.items():
        rid = ctx.upstream[node]
        out[node] = v + (ctx.epsilon[rid] if rid is not None else 0.0)
    return out


# --------------------------------------------------------------------------- #
# bundle persistence


@dataclass
class EstimatorBundle:
    """Everything the online controller needs, persistable as a directory."""

    regression: VoltageRegressionModel
    curves: dict  # (NodeRef, plant) -> SensitivityCurve
    tap_table: TapSensitivityTable
    critical: CriticalNodeSet
    feeder_name: str
    c_offset: float = DEFAULT_CURVE_OFFSET_KVAR

    @property
    def critical_nodes(self):
        return self.regression.nodes

    def estimate(self, m, group_taps):
        return estimate_voltages(self.regression, self.tap_table, m, group_taps)

    def estimate_corrected(self, m, group_taps, v_r_measured, model):
        return estimate_voltages_corrected(
            self.regression, self.tap_table, m, group_taps, v_r_measured, model
        )

    def sensitivity_matrix(self, q_s: float, plants: list) -> np.ndarray:
        """delta-V per kvar for each (critical node, plant) at head Qs."""
        out = np.zeros((len(self.critical_nodes), len(plants)))
        for j, plant in enumerate(plants):
            for i, node in enumerate(self.critical_nodes):
                out[i, j] = estimate_sensitivity(self.curves[(node, plant)], q_s)
        return out

    @classmethod
    def fit(cls, dataset: TrainingDataset, model: FeederModel,
            c_offset: float = DEFAULT_CURVE_OFFSET_KVAR) -> "EstimatorBundle":
        critical = select_critical_nodes(dataset, model)
        regression = fit_voltage_regression(dataset, critical)
        curves = fit_sensitivity_curves(dataset, critical, c_offset)
        table = fit_tap_table(dataset, model)
        return cls(regression, curves, table, critical, model.name, c_offset)

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        reg = self.regression
        df = pd.DataFrame(
            {
                "node": [str(n) for n in reg.nodes],
                "intercept": reg.intercept,
                "residual_rms": reg.residual_rms,
                **{ch: reg.coef[:, j] for j, ch in enumerate(reg.channels)},
            }
        )
        df.to_csv(os.path.join(out_dir, "regression.csv"), index=False)

        rows = []
        for (node, plant), cu in sorted(self.curves.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
            rows.append(
                {
                    "node": str(node),
                    "plant": plant,
                    "a": cu.a,
                    "b": cu.b,
                    "c": cu.c,
                    "qs_min": cu.qs_min,
                    "qs_max": cu.qs_max,
                    "negligible": int(cu.negligible),
                }
            )
        pd.DataFrame(rows).to_csv(os.path.join(out_dir, "curves.csv"), index=False)

        tt = self.tap_table
        df = pd.DataFrame(
            {
                "node": [str(n) for n in tt.nodes],
                **{g: tt.delta[:, j] for j, g in enumerate(tt.groups)},
            }
        )
        df.to_csv(os.path.join(out_dir, "tap_table.csv"), index=False)

        pd.DataFrame(
            {
                "node": [str(n) for n, _ in self.critical.entries],
                "provenance": [p for _, p in self.critical.entries],
            }
        ).to_csv(os.path.join(out_dir, "critical_nodes.csv"), index=False)

        manifest = {
            "schema_version": MODEL_SCHEMA_VERSION,
            "feeder_name": self.feeder_name,
            "channels": reg.channels,
            "t0": reg.t0,
            "t0_group": tt.t0_group,
            "groups": tt.groups,
            "c_offset": self.c_offset,
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1)

    @classmethod
    def load(cls, out_dir) -> "EstimatorBundle":
        with open(os.path.join(out_dir, "manifest.json")) as fh:
            manifest = json.load(fh)
        if manifest.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise EstimatorError(f"unsupported model schema in {out_dir}")
        channels = manifest["channels"]
        reg_df = pd.read_csv(os.path.join(out_dir, "regression.csv"))
        nodes = [NodeRef.parse(s) for s in reg_df["node"]]
        regression = VoltageRegressionModel(
            channels,
            nodes,
            reg_df["intercept"].to_numpy(),
            reg_df[channels].to_numpy(),
            reg_df["residual_rms"].to_numpy(),
            {k: int(v) for k, v in manifest["t0"].items()},
        )
        cu_df = pd.read_csv(os.path.join(out_dir, "curves.csv"))
        curves = {}
        for _, row in cu_df.iterrows():
            curves[(NodeRef.parse(row["node"]), row["plant"])] = SensitivityCurve(
                float(row["a"]),
                float(row["b"]),
                float(row["c"]),
                float(row["qs_min"]),
                float(row["qs_max"]),
                bool(row["negligible"]),
            )
        tt_df = pd.read_csv(os.path.join(out_dir, "tap_table.csv"))
        groups = manifest["groups"]
        table = TapSensitivityTable(
            groups,
            [NodeRef.parse(s) for s in tt_df["node"]],
            tt_df[groups].to_numpy() if groups else np.zeros((len(tt_df), 0)),
            {k: int(v) for k, v in manifest["t0_group"].items()},
        )
        cn_df = pd.read_csv(os.path.join(out_dir, "critical_nodes.csv"))
        critical = CriticalNodeSet(
            [(NodeRef.parse(s), p) for s, p in zip(cn_df["node"], cn_df["provenance"])]
        )
        return cls(regression, curves, table, critical, manifest["feeder_name"],
                   float(manifest["c_offset"]))
