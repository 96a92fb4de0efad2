"""Branch-current WLS state estimation against the power-flow oracle."""
from __future__ import annotations

import numpy as np
import pytest

from loadinfer.bcse import (
    BcseConfig,
    Measurement,
    MeasurementModel,
    ObservabilityError,
    build_measurements,
    head_residuals,
    measurement_model,
    measurements_from_power_flow,
    pseudo_weight,
    residuals,
    solve_wls,
)
from loadinfer.feeder import FeederStructure, power_flow, random_radial_feeder
from conftest import two_node_feeder

# Same frozen fixed point as the power-flow test (z = 0.01+0.01j, S = 1 pu).
TWO_NODE_I = 1.0102062074830835 - 0.010206207483085428j


def _noiseless_measurements(feeder, loads=None, cfg=None, structure=None):
    st = structure or FeederStructure(feeder)
    pf = power_flow(feeder, loads, tol=1e-12, structure=st)
    if loads is None:
        loads = {
            nd.id: (nd.load_kw, nd.load_kvar)
            for nd in feeder.nodes if nd.id != feeder.slack_node
        }
    return measurements_from_power_flow(feeder, loads, pf, cfg, structure=st), pf, st


def test_measurement_validation():
    with pytest.raises(ValueError):
        Measurement("teleport", 1, 1.0, 1.0)
    with pytest.raises(ValueError):
        Measurement("node_P", 1, 1.0, 0.0)


def test_pseudo_weight_floor():
    cfg = BcseConfig(pseudo_sigma_frac=0.2, pseudo_sigma_floor=1e-4)
    assert pseudo_weight(1.0, cfg) == pytest.approx(1.0 / 0.2 ** 2)
    assert pseudo_weight(0.0, cfg) == pytest.approx(1e8)


def test_zero_state_predictions():
    f = two_node_feeder()
    ms, _, st = _noiseless_measurements(f)
    model = MeasurementModel(st, ms)
    h0 = model.h(np.zeros(2 * len(st.z)))
    # head-voltage rows repeat the reference; every current-space row is zero
    for value, (kind, _, comp) in zip(h0, model.row_tags):
        if kind == "head_voltage_phasor":
            ref = model.slack_voltage.real if comp == "re" else model.slack_voltage.imag
            assert value == pytest.approx(ref)
        else:
            assert value == 0.0
    assert np.allclose(model.voltages(np.zeros(2 * len(st.z))), model.slack_voltage)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    f = random_radial_feeder(9, rng)
    ms, _, st = _noiseless_measurements(f)
    nb = len(st.z)
    x0 = rng.normal(0, 0.05, size=2 * nb)
    h0, H = measurement_model(f, x0, 1.0 + 0.0j, ms, structure=st)
    eps = 1e-7
    fd = np.zeros_like(H)
    for j in range(2 * nb):
        up, dn = x0.copy(), x0.copy()
        up[j] += eps
        dn[j] -= eps
        hu, _ = measurement_model(f, up, 1.0 + 0.0j, ms, structure=st)
        hd, _ = measurement_model(f, dn, 1.0 + 0.0j, ms, structure=st)
        fd[:, j] = (hu - hd) / (2 * eps)
    assert float(np.max(np.abs(H - fd))) < 1e-6


def test_two_node_analytic_solution():
    f = two_node_feeder()
    ms, pf, st = _noiseless_measurements(f, loads={2: (1000.0, 0.0)})
    res = solve_wls(f, ms, structure=st)
    assert complex(res.branch_currents[0]) == pytest.approx(TWO_NODE_I, abs=1e-8)
    assert res.objective < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_oracle_round_trip_random_feeders(seed):
    rng = np.random.default_rng(seed)
    f = random_radial_feeder(int(rng.integers(3, 31)), rng)
    st = FeederStructure(f)
    ms, pf, _ = _noiseless_measurements(f, structure=st)
    res = solve_wls(f, ms, structure=st)
    assert res.converged and res.iterations <= 10
    assert float(np.max(np.abs(res.branch_currents - pf.branch_currents))) < 1e-4
    assert res.objective < 1e-9


def test_noiseless_residuals_tiny(fixture18, fixture18_structure):
    ms, pf, st = _noiseless_measurements(fixture18, structure=fixture18_structure)
    res = solve_wls(fixture18, ms, structure=st)
    tagged = residuals(res, ms, fixture18, structure=st)
    assert len(tagged) == 2 * 2 + 2 * (len(fixture18.nodes) - 1)
    assert max(abs(t.value) for t in tagged) < 1e-6
    assert len(head_residuals(res, ms, fixture18, structure=st)) == 4


def test_biased_pseudo_measurement_localizes(fixture18, fixture18_structure):
    st = fixture18_structure
    loads = {nd.id: (nd.load_kw, nd.load_kvar) for nd in fixture18.nodes
             if nd.id != fixture18.slack_node}
    pf = power_flow(fixture18, loads, tol=1e-12, structure=st)
    target = 12
    biased = dict(loads)
    biased[target] = (loads[target][0] * 1.6, loads[target][1] * 1.6)
    ms = measurements_from_power_flow(fixture18, biased, pf, structure=st)
    res = solve_wls(fixture18, ms, structure=st)
    tagged = residuals(res, ms, fixture18, structure=st)
    p_res = {t.location: abs(t.value) for t in tagged if t.kind == "node_P"}
    worst = max(p_res, key=p_res.get)
    assert worst == target


def test_unobservable_set_raises(fixture18, fixture18_structure):
    ms = [Measurement("head_voltage_phasor", 1, 1.0 + 0.0j, 1e6)]
    with pytest.raises(ObservabilityError):
        solve_wls(fixture18, ms, structure=fixture18_structure)


def test_build_measurements_layout(fixture18):
    loads = {nd.id: (nd.load_kw, nd.load_kvar) for nd in fixture18.nodes
             if nd.id != fixture18.slack_node}
    ms = build_measurements(fixture18, loads, 1.0 + 0j, 0.02 + 0.01j)
    kinds = [m.kind for m in ms]
    assert kinds[0] == "head_voltage_phasor" and kinds[1] == "head_current_phasor"
    assert kinds[2:] == ["node_P", "node_Q"] * (len(fixture18.nodes) - 1)


def test_duplicate_head_voltage_rejected(fixture18, fixture18_structure):
    ms = [
        Measurement("head_voltage_phasor", 1, 1.0 + 0j, 1e6),
        Measurement("head_voltage_phasor", 1, 1.0 + 0j, 1e6),
    ]
    with pytest.raises(ValueError):
        MeasurementModel(fixture18_structure, ms)
