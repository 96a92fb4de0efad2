"""Branch-current state estimation by weighted-least-squares Gauss-Newton.

States are rectangular branch currents x = [I_r; I_x] (per-unit, oriented
parent -> child in BFS order). Node P/Q pseudo-measurements are converted
into equivalent current-injection measurements with the latest voltage
estimate, which makes the measurement function linear and the Jacobian
constant within each iteration. The head of the feeder carries one voltage
phasor reference (it also fixes the slack voltage) and one current phasor.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .feeder import FeederModel, FeederStructure

MEASUREMENT_KINDS = ("head_voltage_phasor", "head_current_phasor", "node_P", "node_Q")


class ObservabilityError(RuntimeError):
    """Gain matrix singular: the measurement set does not determine the state."""


class EstimationError(RuntimeError):
    """Gauss-Newton iteration failed to converge."""


@dataclass(frozen=True)
class Measurement:
    kind: str
    location: int          # node id (slack node for head measurements)
    value: complex         # complex for phasors, real part used for P/Q
    weight: float

    def __post_init__(self):
        if self.kind not in MEASUREMENT_KINDS:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if not self.weight > 0:
            raise ValueError("measurement weight must be positive")


@dataclass
class BcseConfig:
    tol: float = 1e-6           # on ||dx||_inf, per-unit
    max_iter: int = 50
    pmu_weight: float = 1e6
    pseudo_sigma_frac: float = 0.2   # sigma = frac * |pseudo value|, floored
    pseudo_sigma_floor: float = 1e-4


@dataclass
class EstimationResult:
    converged: bool
    iterations: int
    x: np.ndarray                    # (2B,) [I_r; I_x]
    branch_currents: np.ndarray      # (B,) complex
    node_ids: list[int]
    voltages: np.ndarray             # (n,) complex, BFS order
    objective: float
    residual: np.ndarray             # equivalent-space residual at the solution
    step_halvings: int = 0

    def voltage(self, node_id: int) -> complex:
        return complex(self.voltages[self.node_ids.index(node_id)])


def pseudo_weight(value: float, cfg: BcseConfig) -> float:
    sigma = max(cfg.pseudo_sigma_frac * abs(value), cfg.pseudo_sigma_floor)
    return 1.0 / sigma ** 2


def build_measurements(
    feeder: FeederModel,
    loads_kw: dict[int, tuple[float, float]],
    head_voltage: complex,
    head_current: complex,
    cfg: BcseConfig | None = None,
) -> list[Measurement]:
    """Standard measurement set: head PMU phasors plus per-node P/Q pseudo values.

    ``loads_kw`` maps every non-slack node id to (kW, kvar); values are
    converted to per-unit at the feeder base.
    """
    cfg = cfg or BcseConfig()
    ms = [
        Measurement("head_voltage_phasor", feeder.slack_node, head_voltage, cfg.pmu_weight),
        Measurement("head_current_phasor", feeder.slack_node, head_current, cfg.pmu_weight),
    ]
    for nid in sorted(loads_kw):
        if nid == feeder.slack_node:
            continue
        kw, kvar = loads_kw[nid]
        p, q = kw / feeder.base_kva, kvar / feeder.base_kva
        ms.append(Measurement("node_P", nid, p, pseudo_weight(p, cfg)))
        ms.append(Measurement("node_Q", nid, q, pseudo_weight(q, cfg)))
    return ms


def _head_phasor_from_pf(structure: FeederStructure, branch_currents: np.ndarray) -> complex:
    return complex(np.sum(branch_currents[structure.head_branches]))


def measurements_from_power_flow(
    feeder: FeederModel,
    loads_kw: dict[int, tuple[float, float]],
    pf_result,
    cfg: BcseConfig | None = None,
    structure: FeederStructure | None = None,
) -> list[Measurement]:
    """Measurement set whose head phasors come from a power-flow solution."""
    st = structure or FeederStructure(feeder)
    head_i = _head_phasor_from_pf(st, pf_result.branch_currents)
    return build_measurements(feeder, loads_kw, pf_result.voltages[0], head_i, cfg)


class MeasurementModel:
    """Rows of h(x) and H for a fixed feeder + measurement layout.

    The row layout interleaves re/im components for phasor measurements and
    uses one row per P/Q measurement (in equivalent-current space). H is
    constant because every converted measurement is linear in the states.
    """

    def __init__(self, structure: FeederStructure, measurements: list[Measurement]):
        self.st = structure
        self.measurements = measurements
        heads = [m for m in measurements if m.kind == "head_voltage_phasor"]
        if len(heads) != 1:
            raise ValueError("exactly one head voltage reference is required")
        self.slack_voltage = complex(heads[0].value)
        nb = len(structure.z)
        rows: list[np.ndarray] = []
        weights: list[float] = []
        self.row_tags: list[tuple[str, int, str]] = []  # (kind, node id, component)
        head_sel = np.zeros(nb)
        head_sel[structure.head_branches] = 1.0
        for m in measurements:
            nid = m.location
            if m.kind == "head_voltage_phasor":
                for comp in ("re", "im"):
                    rows.append(np.zeros(2 * nb))
                    weights.append(m.weight)
                    self.row_tags.append((m.kind, nid, comp))
            elif m.kind == "head_current_phasor":
                row_re = np.zeros(2 * nb)
                row_re[:nb] = head_sel
                row_im = np.zeros(2 * nb)
                row_im[nb:] = head_sel
                rows.extend([row_re, row_im])
                weights.extend([m.weight, m.weight])
                self.row_tags.extend([(m.kind, nid, "re"), (m.kind, nid, "im")])
            else:
                i = structure.idx[nid]
                if i == 0:
                    raise ValueError("P/Q measurement at the slack node is not supported")
                inc = structure.load_inc[i]
                row = np.zeros(2 * nb)
                if m.kind == "node_P":
                    row[:nb] = inc
                    comp = "re"
                else:
                    row[nb:] = inc
                    comp = "im"
                rows.append(row)
                weights.append(m.weight)
                self.row_tags.append((m.kind, nid, comp))
        self.H = np.array(rows)
        self.W = np.array(weights)

    def h(self, x: np.ndarray) -> np.ndarray:
        """Measurement function in equivalent-current space (linear in x)."""
        nb = len(self.st.z)
        base = self.H @ x
        # head voltage rows are constants equal to the slack reference
        for r, (kind, _, comp) in enumerate(self.row_tags):
            if kind == "head_voltage_phasor":
                base[r] = self.slack_voltage.real if comp == "re" else self.slack_voltage.imag
        return base

    def voltages(self, x: np.ndarray) -> np.ndarray:
        nb = len(self.st.z)
        current = x[:nb] + 1j * x[nb:]
        return self.st.voltages(current, self.slack_voltage)

    def equivalent_z(self, x: np.ndarray) -> np.ndarray:
        """Measurement vector with P/Q converted at the voltages implied by x."""
        V = self.voltages(x)
        z = np.empty(len(self.row_tags))
        for r, ((kind, nid, comp), m_val) in enumerate(zip(self.row_tags, self._row_values())):
            if kind == "head_voltage_phasor" or kind == "head_current_phasor":
                z[r] = m_val.real if comp == "re" else m_val.imag
            else:
                # pair this row's P with its sibling Q (or vice versa)
                p, q = self._pq_at(nid)
                inj = np.conj(complex(p, q) / V[self.st.idx[nid]])
                z[r] = inj.real if comp == "re" else inj.imag
        return z

    def _row_values(self):
        vals = []
        for m in self.measurements:
            if m.kind in ("head_voltage_phasor", "head_current_phasor"):
                vals.extend([complex(m.value), complex(m.value)])
            else:
                vals.append(complex(m.value))
        return vals

    def _pq_at(self, nid: int) -> tuple[float, float]:
        if not hasattr(self, "_pq_cache"):
            cache: dict[int, list[float]] = {}
            for m in self.measurements:
                if m.kind in ("node_P", "node_Q"):
                    entry = cache.setdefault(m.location, [0.0, 0.0])
                    entry[0 if m.kind == "node_P" else 1] = float(np.real(m.value))
            self._pq_cache = cache
        p, q = self._pq_cache.get(nid, [0.0, 0.0])
        return p, q


def measurement_model(
    feeder: FeederModel,
    x: np.ndarray,
    slack_voltage: complex,
    measurements: list[Measurement],
    structure: FeederStructure | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """h(x) and Jacobian H for the given measurement layout."""
    st = structure or FeederStructure(feeder)
    model = MeasurementModel(st, measurements)
    if slack_voltage != model.slack_voltage:
        model.slack_voltage = complex(slack_voltage)
    return model.h(np.asarray(x, dtype=float)), model.H


def solve_wls(
    feeder: FeederModel,
    measurements: list[Measurement],
    cfg: BcseConfig | None = None,
    structure: FeederStructure | None = None,
) -> EstimationResult:
    """Gauss-Newton WLS from a flat start (all branch currents zero).

    Each iteration re-converts P/Q measurements at the latest voltages and
    solves the (linear) normal equations; a step-halving fallback keeps the
    objective non-increasing.
    """
    cfg = cfg or BcseConfig()
    st = structure or FeederStructure(feeder)
    model = MeasurementModel(st, measurements)
    nb = len(st.z)
    H, Wd = model.H, model.W
    G = H.T @ (Wd[:, None] * H)
    try:
        G_chol = np.linalg.cholesky(G + 0.0)
    except np.linalg.LinAlgError as exc:
        raise ObservabilityError("singular gain matrix") from exc

    def objective(x: np.ndarray) -> float:
        r = model.equivalent_z(x) - model.h(x)
        return float(r @ (Wd * r))

    x = np.zeros(2 * nb)
    J_cur = objective(x)
    halvings = 0
    converged = False
    iters = 0
    for iters in range(1, cfg.max_iter + 1):
        z_eq = model.equivalent_z(x)
        rhs = H.T @ (Wd * (z_eq - model.h(x)))
        dx = np.linalg.solve(G_chol.T, np.linalg.solve(G_chol, rhs))
        # keep J non-increasing; halve the step if the conversion moved z
        step = 1.0
        for _ in range(20):
            J_new = objective(x + step * dx)
            if J_new <= J_cur + 1e-12:
                break
            step *= 0.5
            halvings += 1
        x = x + step * dx
        J_cur = objective(x)
        if float(np.max(np.abs(step * dx))) < cfg.tol:
            converged = True
            break
    if not converged:
        raise EstimationError(f"no convergence after {cfg.max_iter} iterations")
    current = x[:nb] + 1j * x[nb:]
    residual = model.equivalent_z(x) - model.h(x)
    return EstimationResult(
        converged=True,
        iterations=iters,
        x=x,
        branch_currents=current,
        node_ids=st.node_ids,
        voltages=model.voltages(x),
        objective=J_cur,
        residual=residual,
        step_halvings=halvings,
    )


@dataclass(frozen=True)
class TaggedResidual:
    kind: str
    location: int
    component: str
    value: float


def residuals(
    result: EstimationResult,
    measurements: list[Measurement],
    feeder: FeederModel,
    structure: FeederStructure | None = None,
) -> list[TaggedResidual]:
    """Residuals z - h(x_hat) in the original measurement space, tagged."""
    st = structure or FeederStructure(feeder)
    nb = len(st.z)
    current = result.x[:nb] + 1j * result.x[nb:]
    V = result.voltages
    load_current = st.load_inc @ current
    S_hat = V * np.conj(load_current)
    head_i = _head_phasor_from_pf(st, current)
    out: list[TaggedResidual] = []
    for m in measurements:
        if m.kind == "head_voltage_phasor":
            r = complex(m.value) - V[0]
            out.append(TaggedResidual(m.kind, m.location, "re", r.real))
            out.append(TaggedResidual(m.kind, m.location, "im", r.imag))
        elif m.kind == "head_current_phasor":
            r = complex(m.value) - head_i
            out.append(TaggedResidual(m.kind, m.location, "re", r.real))
            out.append(TaggedResidual(m.kind, m.location, "im", r.imag))
        elif m.kind == "node_P":
            out.append(TaggedResidual(m.kind, m.location, "re",
                                      float(np.real(m.value)) - S_hat[st.idx[m.location]].real))
        else:
            out.append(TaggedResidual(m.kind, m.location, "im",
                                      float(np.real(m.value)) - S_hat[st.idx[m.location]].imag))
    return out


def head_residuals(result: EstimationResult, measurements: list[Measurement],
                   feeder: FeederModel, structure: FeederStructure | None = None) -> np.ndarray:
    """Head-reference residual components (the inputs to the Bayesian update)."""
    tagged = residuals(result, measurements, feeder, structure)
    return np.array(
        [t.value for t in tagged if t.kind in ("head_voltage_phasor", "head_current_phasor")]
    )
