"""End-to-end experiment orchestration and per-stage artifact handling.

Every stage reads its inputs from and writes its outputs to the configured
output directory, so any stage can be re-run from the persisted artifacts
of the previous one. The whole chain is deterministic under a fixed seed.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import yaml

from . import bcse, feeder as feeder_mod, metrics as metrics_mod, mtsl, rbl, spectral
from .amigen import (
    CustomerRecord,
    DAY_KINDS,
    HOURS_PER_DAY,
    HOURS_PER_MONTH,
    MonthlyBill,
    PopulationSpec,
    bill_from_truth,
    generate_population,
    ingest_csv,
    make_class_library,
    partition_subsets,
    write_csv,
)


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage and artifact trail."""


@dataclass
class PopulationConfig:
    counts: dict[str, int] = field(
        default_factory=lambda: {"residential": 42, "commercial": 18, "industrial": 12}
    )
    weekday_classes: dict[str, int] = field(
        default_factory=lambda: {"residential": 3, "commercial": 2, "industrial": 2}
    )
    weekend_classes: dict[str, int] = field(
        default_factory=lambda: {"residential": 3, "commercial": 2, "industrial": 2}
    )
    months: int = 3
    noise_sigma: float = 0.15
    customers_per_node: int = 1
    unobserved: int = 6          # feeder customers without meters (bills only)


@dataclass
class ClusteringConfig:
    K: int = 7
    k_min: int = 2
    k_max: int = 6
    restarts: int = 10


@dataclass
class MtslStageConfig:
    hidden: int = 16
    lr: float = 1e-2
    lr_decay: float = 0.999
    max_epochs: int = 300
    patience: int = 20
    noise_sigma: float = 0.01
    min_class_members: int = 6
    min_pairs: int = 10


@dataclass
class RblStageConfig:
    posterior_threshold: float = 0.99
    max_steps: int = 96
    warmup_steps: int = 24
    head_noise: float = 0.001


@dataclass
class BcseStageConfig:
    tol: float = 1e-6
    max_iter: int = 50
    pmu_weight: float = 1e6
    pseudo_sigma_frac: float = 0.2


@dataclass
class ExperimentConfig:
    seed: int = 7
    outdir: str = "out"
    feeder_path: str | None = None   # None -> packaged 18-node fixture
    population: PopulationConfig = field(default_factory=PopulationConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    mtsl: MtslStageConfig = field(default_factory=MtslStageConfig)
    rbl: RblStageConfig = field(default_factory=RblStageConfig)
    bcse: BcseStageConfig = field(default_factory=BcseStageConfig)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        cfg = cls()
        for key in ("seed", "outdir", "feeder_path"):
            if key in raw:
                setattr(cfg, key, raw[key])
        for section, obj in (
            ("population", cfg.population),
            ("clustering", cfg.clustering),
            ("mtsl", cfg.mtsl),
            ("rbl", cfg.rbl),
            ("bcse", cfg.bcse),
        ):
            for k, v in (raw.get(section) or {}).items():
                if not hasattr(obj, k):
                    raise ValueError(f"unknown config key {section}.{k}")
                setattr(obj, k, v)
        return cfg

    def to_yaml(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(asdict(self), sort_keys=True))

    def out(self) -> Path:
        p = Path(self.outdir)
        p.mkdir(parents=True, exist_ok=True)
        return p

    def load_feeder(self) -> feeder_mod.FeederModel:
        if self.feeder_path:
            return feeder_mod.load_feeder(self.feeder_path)
        return feeder_mod.feeder18()

    def bcse_config(self) -> bcse.BcseConfig:
        return bcse.BcseConfig(
            tol=self.bcse.tol,
            max_iter=self.bcse.max_iter,
            pmu_weight=self.bcse.pmu_weight,
            pseudo_sigma_frac=self.bcse.pseudo_sigma_frac,
        )

    def train_config(self) -> mtsl.TrainConfig:
        return mtsl.TrainConfig(
            hidden=self.mtsl.hidden,
            lr=self.mtsl.lr,
            lr_decay=self.mtsl.lr_decay,
            max_epochs=self.mtsl.max_epochs,
            patience=self.mtsl.patience,
            noise_sigma=self.mtsl.noise_sigma,
            min_pairs=self.mtsl.min_pairs,
            seed=self.seed,
        )


def _population_spec(cfg: ExperimentConfig, counts: dict[str, int], prefix: str) -> PopulationSpec:
    p = cfg.population
    return PopulationSpec(
        counts=counts,
        weekday_classes=dict(p.weekday_classes),
        weekend_classes=dict(p.weekend_classes),
        months=p.months,
        noise_sigma=p.noise_sigma,
        id_prefix=prefix,
    )


def stage_gen_data(cfg: ExperimentConfig) -> None:
    """Generate observed and feeder populations plus bills and truth metadata."""
    out = cfg.out()
    fdr = cfg.load_feeder()
    lib_spec = _population_spec(cfg, dict(cfg.population.counts), "obs")
    library = make_class_library(lib_spec, cfg.seed)
    observed = generate_population(lib_spec, cfg.seed, library)
    write_csv(observed, out / "observed.csv")

    sector_nodes: dict[str, list[int]] = {}
    for nd in fdr.nodes:
        if nd.sector:
            sector_nodes.setdefault(nd.sector, []).append(nd.id)
    feeder_counts = {
        t: len(nodes) * cfg.population.customers_per_node for t, nodes in sector_nodes.items()
    }
    feeder_spec = _population_spec(cfg, feeder_counts, "fdr")
    feeder_pop = generate_population(feeder_spec, cfg.seed + 1, library)
    write_csv(feeder_pop, out / "feeder_customers.csv")

    placement: dict[str, int] = {}
    by_type: dict[str, list[CustomerRecord]] = {}
    for rec in feeder_pop:
        by_type.setdefault(rec.type, []).append(rec)
    for t, nodes in sorted(sector_nodes.items()):
        for i, rec in enumerate(by_type.get(t, [])):
            placement[rec.id] = nodes[i % len(nodes)]

    truth = {
        "observed": {r.id: {"type": r.type, "true_class": r.true_class} for r in observed},
        "feeder": {r.id: {"type": r.type, "true_class": r.true_class} for r in feeder_pop},
    }
    (out / "truth.json").write_text(json.dumps(truth, sort_keys=True))
    (out / "placement.json").write_text(json.dumps(placement, sort_keys=True))

    # unmetered customers: smallest loads first (large customers are metered)
    ranked = sorted(feeder_pop, key=lambda r: (float(r.hourly_kwh.mean()), r.id))
    unobserved = sorted(r.id for r in ranked[: cfg.population.unobserved])
    (out / "unobserved.json").write_text(json.dumps(unobserved))

    bills = {
        rec.id: [asdict(bill_from_truth(rec, m)) for m in range(rec.n_full_months())]
        for rec in feeder_pop
    }
    (out / "bills.json").write_text(json.dumps(bills, sort_keys=True))


def stage_cluster(cfg: ExperimentConfig) -> None:
    """Partition observed customers into six subsets and build the pattern bank."""
    out = cfg.out()
    records, _ = ingest_csv(out / "observed.csv")
    subsets = partition_subsets(records)
    ccfg = spectral.ClusterConfig(
        K=cfg.clustering.K,
        k_min=cfg.clustering.k_min,
        k_max=cfg.clustering.k_max,
        restarts=cfg.clustering.restarts,
        seed=cfg.seed,
    )
    bank = spectral.build_pattern_bank(subsets, ccfg)
    bank.save(out / "bank.json")
    with open(out / "dbi_curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["customer_type", "day_kind", "k", "dbi"])
        for (t, k), sp in sorted(bank.subsets.items()):
            for kk in sorted(sp.dbi_curve):
                w.writerow([t, k, kk, repr(sp.dbi_curve[kk])])


def joint_class_key(ctype: str, wd_label: int, we_label: int) -> str:
    return f"{ctype}:c{wd_label}-{we_label}"


def derive_joint_classes(
    bank: spectral.PatternBank, records: list[CustomerRecord], min_members: int
) -> dict[str, list[str]]:
    """Group customers by their (weekday cluster, weekend cluster) label pair."""
    groups: dict[str, list[str]] = {}
    for rec in records:
        try:
            wd = bank.get(rec.type, "weekday").labels[rec.id]
            we = bank.get(rec.type, "weekend").labels[rec.id]
        except KeyError:
            continue
        groups.setdefault(joint_class_key(rec.type, wd, we), []).append(rec.id)
    return {k: v for k, v in sorted(groups.items()) if len(v) >= min_members}


def stage_train_mtsl(cfg: ExperimentConfig) -> None:
    """Train one disaggregation cascade per joint (weekday, weekend) class."""
    out = cfg.out()
    records, _ = ingest_csv(out / "observed.csv")
    by_id = {r.id: r for r in records}
    bank = spectral.PatternBank.load(out / "bank.json")
    joints = derive_joint_classes(bank, records, cfg.mtsl.min_class_members)
    if not joints:
        raise StageError("train-mtsl: no joint class reached the member minimum")
    tcfg = cfg.train_config()
    models: dict[str, mtsl.MtslModel] = {}
    for key, member_ids in joints.items():
        members = [by_id[cid] for cid in member_ids]
        models[key] = mtsl.train_mtsl(key, members, tcfg)
    mtsl.save_models(models, out / "models.json")

    truth = json.loads((out / "truth.json").read_text())["observed"]
    mapping = {}
    for key, member_ids in joints.items():
        planted = [truth[cid]["true_class"] for cid in member_ids if cid in truth]
        values, counts = np.unique([p for p in planted if p is not None], return_counts=True)
        mapping[key] = {
            "member_ids": member_ids,
            "majority_true_class": int(values[int(np.argmax(counts))]) if len(values) else None,
        }
    (out / "joint_classes.json").write_text(json.dumps(mapping, sort_keys=True))


def _load_bills(out: Path) -> dict[str, list[MonthlyBill]]:
    raw = json.loads((out / "bills.json").read_text())
    return {
        cid: [MonthlyBill(**b) for b in items]
        for cid, items in raw.items()
    }


def _feeder_truth_loads(
    records: list[CustomerRecord], placement: dict[str, int], step: int, power_factor: float
) -> dict[int, tuple[float, float]]:
    tan_phi = float(np.tan(np.arccos(power_factor)))
    loads: dict[int, list[float]] = {}
    for rec in records:
        node = placement[rec.id]
        kw = float(rec.hourly_kwh[step])
        entry = loads.setdefault(node, [0.0, 0.0])
        entry[0] += kw
        entry[1] += kw * tan_phi
    return {nid: (kw, kvar) for nid, (kw, kvar) in loads.items()}


def _head_series(
    cfg: ExperimentConfig,
    fdr: feeder_mod.FeederModel,
    structure: feeder_mod.FeederStructure,
    records: list[CustomerRecord],
    placement: dict[str, int],
    steps: range,
    noise: float,
    seed_tag: int,
) -> tuple[np.ndarray, np.ndarray, list]:
    """True power-flow head phasors (plus PMU noise) for the given steps."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed_tag]))
    hv = np.empty(len(steps), dtype=complex)
    hi = np.empty(len(steps), dtype=complex)
    pf_results = []
    for i, t in enumerate(steps):
        loads = _feeder_truth_loads(records, placement, t, power_factor=0.95)
        pf = feeder_mod.power_flow(fdr, loads, structure=structure)
        pf_results.append(pf)
        head_i = complex(np.sum(pf.branch_currents[structure.head_branches]))
        hv[i] = pf.voltages[0] * (1.0 + noise * complex(*rng.normal(0, 1, 2)))
        hi[i] = head_i * (1.0 + noise * complex(*rng.normal(0, 1, 2)))
    return hv, hi, pf_results


def stage_identify(cfg: ExperimentConfig) -> None:
    """Run recursive Bayesian identification for every feeder customer."""
    out = cfg.out()
    fdr = cfg.load_feeder()
    st = feeder_mod.FeederStructure(fdr)
    records, _ = ingest_csv(out / "feeder_customers.csv")
    placement = {k: int(v) for k, v in json.loads((out / "placement.json").read_text()).items()}
    unobserved = set(json.loads((out / "unobserved.json").read_text()))
    bills = _load_bills(out)
    models = mtsl.load_models(out / "models.json")

    steps = range(min(len(records[0].hourly_kwh),
                      cfg.rbl.max_steps + cfg.rbl.warmup_steps))
    hv, hi, _ = _head_series(cfg, fdr, st, records, placement, steps,
                             cfg.rbl.head_noise, seed_tag=11)
    targets = [r for r in records if r.id in unobserved]
    candidate_models = {
        rec.id: {key: m for key, m in models.items() if key.startswith(rec.type + ":")}
        for rec in targets
    }
    for cid, cands in candidate_models.items():
        if not cands:
            raise StageError(f"identify: no candidate models for customer {cid}")
    background: dict[int, np.ndarray] = {}
    for rec in records:
        if rec.id in unobserved:
            continue
        node = placement[rec.id]
        background[node] = background.get(node, 0.0) + rec.hourly_kwh
    ctx = rbl.build_context(
        fdr, {cid: placement[cid] for cid in candidate_models}, candidate_models,
        bills, hv, hi, power_factor=0.95, start_dow=0, background_kw=background,
    )
    rcfg = rbl.RblConfig(
        posterior_threshold=cfg.rbl.posterior_threshold,
        max_steps=cfg.rbl.max_steps,
        warmup_steps=cfg.rbl.warmup_steps,
        bcse=cfg.bcse_config(),
    )
    report = rbl.identify_all(ctx, rcfg)
    report.save(out / "identification.json")
    report.write_trajectories_csv(out / "trajectories.csv")
    (out / "assignments.json").write_text(json.dumps(ctx.assignments, sort_keys=True))


def stage_estimate(cfg: ExperimentConfig) -> None:
    """Online BCSE over the evaluation month with identified-class pseudo loads."""
    out = cfg.out()
    fdr = cfg.load_feeder()
    st = feeder_mod.FeederStructure(fdr)
    records, _ = ingest_csv(out / "feeder_customers.csv")
    placement = {k: int(v) for k, v in json.loads((out / "placement.json").read_text()).items()}
    bills = _load_bills(out)
    models = mtsl.load_models(out / "models.json")
    assignments = json.loads((out / "assignments.json").read_text())

    unobserved = set(json.loads((out / "unobserved.json").read_text()))
    eval_month = cfg.population.months - 1
    lo = eval_month * HOURS_PER_MONTH
    steps = range(lo, lo + HOURS_PER_MONTH)
    hv, hi, pf_results = _head_series(cfg, fdr, st, records, placement, steps,
                                      cfg.rbl.head_noise, seed_tag=13)
    pseudo: dict[str, np.ndarray] = {}
    for rec in records:
        if rec.id in unobserved:
            bill = next(b for b in bills[rec.id] if b.month == eval_month)
            pseudo[rec.id] = mtsl.disaggregate(models[assignments[rec.id]], bill.energy_kwh)
        else:
            pseudo[rec.id] = rec.hourly_kwh[lo:lo + HOURS_PER_MONTH]
    tan_phi = float(np.tan(np.arccos(0.95)))
    bcfg = cfg.bcse_config()
    rows = []
    mag_errs, phase_errs = [], []
    for i, t in enumerate(steps):
        loads: dict[int, list[float]] = {}
        for rec in records:
            kw = float(pseudo[rec.id][t - lo])
            entry = loads.setdefault(placement[rec.id], [0.0, 0.0])
            entry[0] += kw
            entry[1] += kw * tan_phi
        ms = bcse.build_measurements(
            fdr, {n: (v[0], v[1]) for n, v in loads.items()},
            complex(hv[i]), complex(hi[i]), bcfg,
        )
        result = bcse.solve_wls(fdr, ms, bcfg, structure=st)
        true_v = pf_results[i].voltages
        mag, phase = metrics_mod.voltage_errors(true_v[1:], result.voltages[1:])
        mag_errs.append(mag)
        phase_errs.append(phase)
        for nid, tv, ev in zip(st.node_ids, true_v, result.voltages):
            rows.append([t, nid, repr(abs(tv)), repr(float(np.angle(tv))),
                         repr(abs(ev)), repr(float(np.angle(ev)))])
    with open(out / "state_estimation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "node", "true_vmag", "true_vang", "est_vmag", "est_vang"])
        w.writerows(rows)
    summary = {
        "eval_month": eval_month,
        "mean_vmag_error_pct": float(np.mean(mag_errs)),
        "mean_phase_error_deg": float(np.mean(phase_errs)),
    }
    (out / "state_estimation_summary.json").write_text(json.dumps(summary, sort_keys=True))


def stage_evaluate(cfg: ExperimentConfig) -> None:
    """Metrics report: disaggregation MAPE/R vs baselines, clustering ARI,
    identification accuracy and state-estimation errors."""
    out = cfg.out()
    required = ["feeder_customers.csv", "bank.json", "models.json",
                "assignments.json", "identification.json", "state_estimation_summary.json"]
    missing = [f for f in required if not (out / f).exists()]
    if missing:
        raise StageError(f"evaluate: missing artifacts {missing} in {out}")
    records, _ = ingest_csv(out / "feeder_customers.csv")
    observed, _ = ingest_csv(out / "observed.csv")
    truth = json.loads((out / "truth.json").read_text())
    bank = spectral.PatternBank.load(out / "bank.json")
    models = mtsl.load_models(out / "models.json")
    assignments = json.loads((out / "assignments.json").read_text())
    joints = json.loads((out / "joint_classes.json").read_text())
    bills = _load_bills(out)
    report = metrics_mod.MetricsReport()

    # clustering quality vs planted labels
    for (t, k), sp in sorted(bank.subsets.items()):
        ids = sorted(sp.labels)
        pred = [sp.labels[cid] for cid in ids]
        planted = [truth["observed"][cid]["true_class"] for cid in ids]
        if k == "weekday":
            # weekday shapes are shared via (class id % weekday classes)
            n_wd = cfg.population.weekday_classes[t]
            planted = [p % n_wd for p in planted]
        report.set(f"clustering/{t}/{k}", chosen_k=sp.chosen_k,
                   ari=metrics_mod.adjusted_rand(planted, pred))

    # identification accuracy against planted classes
    ident = rbl.IdentificationReport.load(out / "identification.json")
    mapped = {
        key: info["majority_true_class"] for key, info in joints.items()
    }
    hits, total, certain = 0, 0, 0
    for cid, entry in ident.entries.items():
        total += 1
        if mapped.get(entry.identified_class) == truth["feeder"][cid]["true_class"]:
            hits += 1
        if entry.converged:
            certain += 1
    report.set("identification", accuracy=hits / total if total else float("nan"),
               threshold_reached_frac=certain / total if total else float("nan"),
               customers=total)

    # per-customer disaggregation accuracy on the evaluation month
    eval_month = cfg.population.months - 1
    lo = eval_month * HOURS_PER_MONTH
    type_profiles = _type_average_profiles(observed)
    pos = (np.arange(HOURS_PER_MONTH) // HOURS_PER_DAY) % 7
    masks = {"weekday": pos < 5, "weekend": pos >= 5}
    per_scope: dict[str, dict[str, list[float]]] = {}
    unobserved = set(json.loads((out / "unobserved.json").read_text()))
    agg_true = np.zeros(HOURS_PER_MONTH)
    agg_est = {m: np.zeros(HOURS_PER_MONTH) for m in ("mtsl", "uniform", "profile")}
    for rec in records:
        if rec.id not in unobserved:
            continue
        actual = rec.hourly_kwh[lo:lo + HOURS_PER_MONTH]
        bill = next(b for b in bills[rec.id] if b.month == eval_month)
        est = {
            "mtsl": mtsl.disaggregate(models[assignments[rec.id]], bill.energy_kwh),
            "uniform": metrics_mod.baseline_uniform(bill.energy_kwh),
            "profile": metrics_mod.baseline_profile_scaling(
                bill.energy_kwh, type_profiles[rec.type]),
        }
        agg_true += actual
        for method in est:
            agg_est[method] += est[method]
        for kind, mask in masks.items():
            for method, series in est.items():
                per_scope.setdefault(f"{rec.type}/{kind}", {}).setdefault(method, []).append(
                    metrics_mod.mape(actual[mask], series[mask]).percent
                )
        per_scope.setdefault(f"{rec.type}/r", {}).setdefault("mtsl", []).append(
            metrics_mod.goodness_r(actual, est["mtsl"])
        )
    for scope, methods in sorted(per_scope.items()):
        report.set(f"disaggregation/{scope}",
                   **{f"{m}_mean": float(np.mean(v)) for m, v in sorted(methods.items())})
    for kind, mask in masks.items():
        report.set(f"feeder/{kind}",
                   **{f"mape_{m}": metrics_mod.mape(agg_true[mask], agg_est[m][mask]).percent
                      for m in agg_est})

    se = json.loads((out / "state_estimation_summary.json").read_text())
    report.set("state_estimation", **se)
    report.save(out / "metrics.json")

    with open(out / "mape_tables.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scope", "metric", "value"])
        for scope, values in sorted(report.scopes.items()):
            for key, val in sorted(values.items()):
                w.writerow([scope, key, repr(val) if isinstance(val, float) else val])


def _type_average_profiles(records: list[CustomerRecord]) -> dict[str, np.ndarray]:
    """Unit-sum average daily profile per customer type (baseline estimator input)."""
    sums: dict[str, np.ndarray] = {}
    for rec in records:
        days = len(rec.hourly_kwh) // HOURS_PER_DAY
        prof = rec.hourly_kwh[: days * HOURS_PER_DAY].reshape(days, HOURS_PER_DAY).mean(axis=0)
        if prof.sum() <= 0:
            continue
        sums[rec.type] = sums.get(rec.type, np.zeros(HOURS_PER_DAY)) + prof / prof.sum()
    counts: dict[str, int] = {}
    for rec in records:
        counts[rec.type] = counts.get(rec.type, 0) + 1
    return {t: v / v.sum() for t, v in sums.items()}


STAGES = [
    ("gen-data", stage_gen_data),
    ("cluster", stage_cluster),
    ("train-mtsl", stage_train_mtsl),
    ("identify", stage_identify),
    ("estimate", stage_estimate),
    ("evaluate", stage_evaluate),
]


def run_pipeline(cfg: ExperimentConfig) -> Path:
    """Execute every stage in order; a failure names the stage and stops."""
    out = cfg.out()
    cfg.to_yaml(out / "config_used.yaml")
    for name, fn in STAGES:
        try:
            fn(cfg)
        except Exception as exc:
            raise StageError(f"stage {name!r} failed in {out}: {exc}") from exc
    return out / "metrics.json"
