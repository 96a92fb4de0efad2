"""Recursive Bayesian identification of unobserved customers' load classes.

For one customer, every candidate class generates hourly pseudo loads via
its disaggregation model; branch-current estimation runs per class and per
timestep, and the head-reference residuals drive a multiplicative Bayesian
update of the class posterior. Customers are identified one at a time
(largest annual energy first), holding the others at their current best
class assignment.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bcse
from .amigen import HOURS_PER_MONTH, MonthlyBill
from .feeder import FeederModel, FeederStructure
from .mtsl import MtslModel, disaggregate


@dataclass
class PosteriorState:
    customer_id: str
    class_keys: list[str]
    probs: np.ndarray
    iteration: int = 0
    trajectory: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def uniform(cls, customer_id: str, class_keys: list[str]) -> "PosteriorState":
        n = len(class_keys)
        probs = np.full(n, 1.0 / n)
        return cls(customer_id=customer_id, class_keys=list(class_keys), probs=probs,
                   trajectory=[probs.copy()])

    def validate(self) -> None:
        assert abs(float(self.probs.sum()) - 1.0) <= 1e-12, "posterior left the simplex"
        assert np.all(self.probs >= 0) and np.all(self.probs <= 1)


def estimate_phi(samples: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Diagonal of Phi: inverse per-component variance of residual samples."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(samples) < 2:
        raise ValueError("need >= 2 residual samples per component")
    var = samples.var(axis=0)
    return 1.0 / np.maximum(var, eps)


def update_posterior(
    state: PosteriorState, residuals_by_class: np.ndarray, phi_diag: np.ndarray
) -> PosteriorState:
    """One multiplicative Bayesian update from per-class residual vectors.

    p_i <- exp(-0.5 r_i' Phi r_i) p_i / normalizer, computed with a max-log
    shift so the normalizer never underflows.
    """
    R = np.atleast_2d(np.asarray(residuals_by_class, dtype=float))
    if len(R) != len(state.class_keys):
        raise ValueError("one residual vector per candidate class required")
    phi_diag = np.asarray(phi_diag, dtype=float)
    if np.any(phi_diag <= 0) or np.any(~np.isfinite(phi_diag)):
        raise ValueError("Phi entries must be positive and finite")
    quad = 0.5 * np.sum(R * R * phi_diag[None, :], axis=1)
    log_like = -quad
    shift = log_like.max()
    weights = np.exp(log_like - shift) * state.probs
    total = float(weights.sum())
    assert total > 0, "all posterior mass vanished despite log shift"
    probs = weights / total
    probs = probs / probs.sum()  # restore exact normalization
    new = PosteriorState(
        customer_id=state.customer_id,
        class_keys=list(state.class_keys),
        probs=probs,
        iteration=state.iteration + 1,
        trajectory=state.trajectory + [probs.copy()],
    )
    new.validate()
    return new


@dataclass
class RblConfig:
    posterior_threshold: float = 0.99
    max_steps: int = 200
    warmup_steps: int = 24       # steps used to estimate Phi before updating
    phi_eps: float = 1e-12
    bcse: bcse.BcseConfig = field(default_factory=bcse.BcseConfig)


@dataclass
class CustomerResult:
    customer_id: str
    identified_class: str
    posterior: dict[str, float]
    iterations: int
    converged: bool              # posterior threshold reached
    trajectory: list[list[float]]
    skipped_steps: int = 0


@dataclass
class IdentificationReport:
    entries: dict[str, CustomerResult] = field(default_factory=dict)

    def accuracy(self, truth: dict[str, str]) -> float:
        hits = [
            1.0 if self.entries[cid].identified_class == truth[cid] else 0.0
            for cid in self.entries
            if cid in truth
        ]
        return float(np.mean(hits)) if hits else float("nan")

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "entries": {
                cid: {
                    "customer_id": e.customer_id,
                    "identified_class": e.identified_class,
                    "posterior": e.posterior,
                    "iterations": e.iterations,
                    "converged": e.converged,
                    "trajectory": e.trajectory,
                    "skipped_steps": e.skipped_steps,
                }
                for cid, e in sorted(self.entries.items())
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "IdentificationReport":
        rep = cls()
        for cid, d in raw["entries"].items():
            rep.entries[cid] = CustomerResult(
                customer_id=d["customer_id"],
                identified_class=d["identified_class"],
                posterior={k: float(v) for k, v in d["posterior"].items()},
                iterations=int(d["iterations"]),
                converged=bool(d["converged"]),
                trajectory=[[float(v) for v in row] for row in d["trajectory"]],
                skipped_steps=int(d.get("skipped_steps", 0)),
            )
        return rep

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "IdentificationReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_trajectories_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["customer_id", "step", "class_key", "probability"])
            for cid, e in sorted(self.entries.items()):
                keys = sorted(e.posterior)
                for step, row in enumerate(e.trajectory):
                    for key, p in zip(keys, row):
                        w.writerow([cid, step, key, repr(p)])


@dataclass
class NetworkContext:
    """Everything identification needs about the target feeder.

    ``pseudo_by_class[cid][class_key]`` is the customer's hourly pseudo-load
    series (kW at unity sampling, i.e. kWh per hour) under each candidate
    class. ``head_voltage``/``head_current`` are the measured per-step head
    phasors (per-unit). ``customer_node`` maps customers to feeder nodes.
    ``background_kw`` carries metered (known) per-node kW series added on
    top of the pseudo loads at every step.
    """
    feeder: FeederModel
    structure: FeederStructure
    customer_node: dict[str, int]
    candidate_keys: dict[str, list[str]]          # customer -> candidate class keys
    pseudo_by_class: dict[str, dict[str, np.ndarray]]
    head_voltage: np.ndarray                      # (T,) complex
    head_current: np.ndarray                      # (T,) complex
    power_factor: float = 0.95
    assignments: dict[str, str] = field(default_factory=dict)
    background_kw: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.head_voltage)

    def kvar_of(self, kw: np.ndarray | float):
        return kw * float(np.tan(np.arccos(self.power_factor)))


def build_context(
    feeder: FeederModel,
    customer_node: dict[str, int],
    candidate_models: dict[str, dict[str, MtslModel]],
    bills: dict[str, list[MonthlyBill]],
    head_voltage: np.ndarray,
    head_current: np.ndarray,
    power_factor: float = 0.95,
    start_dow: int = 0,
    background_kw: dict[int, np.ndarray] | None = None,
) -> NetworkContext:
    """Precompute per-class pseudo-load series from monthly bills."""
    pseudo: dict[str, dict[str, np.ndarray]] = {}
    candidates: dict[str, list[str]] = {}
    bank_mean: dict[str, float] = {}
    for cid, models in candidate_models.items():
        pseudo[cid] = {}
        candidates[cid] = sorted(models)
        for key, model in models.items():
            parts = [
                disaggregate(model, b.energy_kwh, start_dow=start_dow)
                for b in sorted(bills[cid], key=lambda b: b.month)
            ]
            pseudo[cid][key] = np.concatenate(parts)
    ctx = NetworkContext(
        feeder=feeder,
        structure=FeederStructure(feeder),
        customer_node=customer_node,
        candidate_keys=candidates,
        pseudo_by_class=pseudo,
        head_voltage=np.asarray(head_voltage, dtype=complex),
        head_current=np.asarray(head_current, dtype=complex),
        power_factor=power_factor,
        background_kw={n: np.asarray(v, dtype=float)
                       for n, v in (background_kw or {}).items()},
    )
    ctx.assignments = initial_assignments(ctx, candidate_models, bills)
    return ctx


def initial_assignments(
    ctx: NetworkContext,
    candidate_models: dict[str, dict[str, MtslModel]],
    bills: dict[str, list[MonthlyBill]],
) -> dict[str, str]:
    """Seed every customer with the class whose typical magnitude fits its bill.

    Uses each candidate's mean pseudo-load level versus the customer's own
    billed mean hourly energy; ties and equal-magnitude banks fall back to
    the first candidate key.
    """
    out: dict[str, str] = {}
    for cid, keys in ctx.candidate_keys.items():
        own_mean = float(np.mean([b.energy_kwh for b in bills[cid]])) / HOURS_PER_MONTH
        best_key, best_gap = keys[0], float("inf")
        for key in keys:
            gap = abs(float(ctx.pseudo_by_class[cid][key].mean()) - own_mean)
            if gap < best_gap - 1e-12:
                best_key, best_gap = key, gap
        out[cid] = best_key
    return out


def _node_loads_at_step(ctx: NetworkContext, step: int,
                        override: tuple[str, str] | None = None) -> dict[int, tuple[float, float]]:
    """Per-node (kW, kvar) from assigned pseudo series; one customer overridable."""
    loads: dict[int, list[float]] = {
        nd.id: [0.0, 0.0] for nd in ctx.feeder.nodes if nd.id != ctx.feeder.slack_node
    }
    for cid, node in ctx.customer_node.items():
        key = ctx.assignments[cid]
        if override is not None and cid == override[0]:
            key = override[1]
        kw = float(ctx.pseudo_by_class[cid][key][step])
        loads[node][0] += kw
        loads[node][1] += float(ctx.kvar_of(kw))
    for node, series in ctx.background_kw.items():
        kw = float(series[step])
        loads[node][0] += kw
        loads[node][1] += float(ctx.kvar_of(kw))
    return {nid: (kw, kvar) for nid, (kw, kvar) in loads.items()}


def _class_residual(ctx: NetworkContext, cid: str, key: str, step: int,
                    cfg: RblConfig) -> np.ndarray:
    loads = _node_loads_at_step(ctx, step, override=(cid, key))
    ms = bcse.build_measurements(
        ctx.feeder, loads, complex(ctx.head_voltage[step]), complex(ctx.head_current[step]),
        cfg.bcse,
    )
    result = bcse.solve_wls(ctx.feeder, ms, cfg.bcse, structure=ctx.structure)
    return bcse.head_residuals(result, ms, ctx.feeder, structure=ctx.structure)


def identify_customer(ctx: NetworkContext, cid: str, cfg: RblConfig) -> CustomerResult:
    """Stages of the per-customer loop: pseudo loads per class, estimation,
    residual-driven posterior updates, stop at threshold or step budget."""
    keys = ctx.candidate_keys[cid]
    state = PosteriorState.uniform(cid, keys)
    if len(keys) == 1:
        return CustomerResult(
            customer_id=cid, identified_class=keys[0], posterior={keys[0]: 1.0},
            iterations=0, converged=True, trajectory=[[1.0]],
        )
    t_max = min(ctx.n_steps, cfg.max_steps)
    residual_log: list[np.ndarray] = []   # (n_classes, m) per step
    skipped = 0
    phi = None
    step = 0
    while step < t_max:
        try:
            R = np.array([_class_residual(ctx, cid, key, step, cfg) for key in keys])
        except (bcse.EstimationError, bcse.ObservabilityError):
            skipped += 1
            step += 1
            continue
        residual_log.append(R)
        n_seen = len(residual_log)
        if phi is None and n_seen >= max(2, cfg.warmup_steps):
            phi = estimate_phi(np.vstack(residual_log), eps=cfg.phi_eps)
            for R_past in residual_log:   # replay the warm-up window
                state = update_posterior(state, R_past, phi)
        elif phi is not None:
            state = update_posterior(state, R, phi)
        if phi is not None and float(state.probs.max()) >= cfg.posterior_threshold:
            break
        step += 1
    if phi is None and len(residual_log) >= 2:
        phi = estimate_phi(np.vstack(residual_log), eps=cfg.phi_eps)
        for R_past in residual_log:
            state = update_posterior(state, R_past, phi)
    best = int(np.argmax(state.probs))
    identified = keys[best]
    ctx.assignments[cid] = identified
    return CustomerResult(
        customer_id=cid,
        identified_class=identified,
        posterior={k: float(p) for k, p in zip(keys, state.probs)},
        iterations=state.iteration,
        converged=float(state.probs.max()) >= cfg.posterior_threshold,
        trajectory=[[float(v) for v in row] for row in state.trajectory],
        skipped_steps=skipped,
    )


def identify_all(ctx: NetworkContext, cfg: RblConfig,
                 bills: dict[str, list[MonthlyBill]] | None = None) -> IdentificationReport:
    """Sequential identification, largest customers first; failures skip on."""
    def energy(cid: str) -> float:
        key = ctx.assignments[cid]
        return float(ctx.pseudo_by_class[cid][key].sum())

    report = IdentificationReport()
    for cid in sorted(ctx.candidate_keys, key=lambda c: (-energy(c), c)):
        report.entries[cid] = identify_customer(ctx, cid, cfg)
    return report
