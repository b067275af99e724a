import json
import math

import numpy as np
import pytest

from koopgas.dispatch_opt import (
    GLOBAL,
    CouplingSpec,
    DispatchHorizon,
    GasDispatchSpec,
    GasFiredLink,
    Generator,
    Line,
    P2GLink,
    PowerSystemSpec,
    SourceSpec,
    assemble_lp,
    dispatch,
    gas_size_per_step,
    load_solution,
    save_solution,
    verify_solution,
)
from koopgas.errors import DimensionMismatch, SchemaMismatch, SpecError
from koopgas.gas_dynamics import LOCAL
from koopgas.koopman_id import KoopmanModel, train
from koopgas.network import single_pipeline_network
from koopgas.snapshots import ExcitationConfig, generate_snapshots

HOUR = DispatchHorizon(hours=1, control_interval=3600.0, dt=900.0)


def two_bus(load=150.0, hours=1):
    gens = (
        Generator("coal_a", "B1", "coal", 0.0, 100.0, 30.0),
        Generator("coal_b", "B2", "coal", 0.0, 100.0, 10.0),
        Generator("gt", "B2", "gas-fired", 0.0, 100.0, 20.0),
    )
    return PowerSystemSpec(("B1", "B2"), (Line("L", "B1", "B2", 0.1),), gens, {"B2": [load] * hours}, "B1")


@pytest.fixture(scope="module")
def pipe_gas():
    from koopgas.gas_dynamics import PipelineParams

    prm = PipelineParams(30000.0, 0.5, 0.0108, 340.0, 5.0, 20.0, 1e6, 8e6, "fig1")
    net = single_pipeline_network(prm, 6)
    exc = ExcitationConfig(nominal_pressure=5.78e6, pressure_band=0.05, mfr_low=1.0, mfr_high=1.5)
    model, _ = train(generate_snapshots(prm, exc, 800, 900.0, seed=4))
    sources = {"inlet": SourceSpec(0.0, 5.6e6, 5.95e6, 5.78e6)}
    return GasDispatchSpec(net, sources, {"outlet": [12.0] * 3}, {prm.name: model})


def coupling(coef=0.01):
    return CouplingSpec((GasFiredLink("gt", "outlet", coef),))


def test_merit_order_hand_solution(pipe_gas):
    # free gas and no binding network limit: cheapest units load first
    sol, _ = dispatch(two_bus(150.0), coupling(), pipe_gas, HOUR, LOCAL, 1.0)
    gen = dict(zip(sol.generator_ids, sol.generation[0]))
    assert gen["coal_b"] == pytest.approx(100.0, abs=1e-6)
    assert gen["gt"] == pytest.approx(50.0, abs=1e-6)
    assert gen["coal_a"] == pytest.approx(0.0, abs=1e-6)
    assert sol.generation_cost == pytest.approx(100 * 10.0 + 50 * 20.0, rel=1e-9)


def test_gas_fired_withdrawal_follows_generation(pipe_gas):
    sol, _ = dispatch(two_bus(150.0), coupling(0.02), pipe_gas, HOUR, LOCAL, 1.0)
    assert sol.withdrawal[0, 0] == pytest.approx(12.0 + 0.02 * 50.0, abs=1e-6)


@pytest.mark.parametrize("model", [GLOBAL, LOCAL])
def test_solutions_reverify(pipe_gas, model):
    horizon = DispatchHorizon(hours=3)
    sol, _ = dispatch(two_bus(150.0, 3), coupling(), pipe_gas, horizon, model, 1.0 if model == LOCAL else None)
    checks = verify_solution(sol, two_bus(150.0, 3), coupling(), pipe_gas)
    assert checks["max"] <= 1e-6
    assert sol.stats["duality_gap"] <= 1e-6


def test_verify_flags_tampering(pipe_gas):
    sol, _ = dispatch(two_bus(150.0), coupling(), pipe_gas, HOUR, GLOBAL)
    sol.generation[0, 0] += 5.0
    checks = verify_solution(sol, two_bus(150.0), coupling(), pipe_gas)
    assert checks["power_balance"] > 1e-3


def test_problem_size_global_vs_local(pipe_gas):
    lp_g = assemble_lp(two_bus(), coupling(), pipe_gas, HOUR, GLOBAL)
    lp_l = assemble_lp(two_bus(), coupling(), pipe_gas, HOUR, LOCAL, 1.0)
    vg, rg = gas_size_per_step(lp_g, "fig1")
    vl, rl = gas_size_per_step(lp_l, "fig1")
    assert (vg, rg) == (4 + 2, 4)  # lifted state plus two inputs; one N-row block per step
    assert (vl, rl) == (2 * 7, 2 * 6)  # pressures and flows on 7 nodes; mass and momentum per cell
    assert vg < vl and rg < rl
    assert lp_g.n_vars < lp_l.n_vars and lp_g.n_eq < lp_l.n_eq


def test_lifted_dynamics_blocks(pipe_gas):
    lp = assemble_lp(two_bus(), coupling(), pipe_gas, HOUR, GLOBAL)
    labels = [lab for lab in lp.eq_labels if lab.startswith("lifted dynamics fig1 ")]
    steps = {lab.split(" row ")[0] for lab in labels}
    assert len(steps) == 4
    assert len(labels) == 4 * 4


def test_solution_round_trip(tmp_path, pipe_gas):
    sol, _ = dispatch(two_bus(150.0), coupling(), pipe_gas, HOUR, GLOBAL)
    paths = save_solution(sol, tmp_path)
    assert [p.name for p in paths] == ["solution.json", "schedule.csv", "gas_states.csv"]
    back = load_solution(tmp_path)
    assert np.array_equal(back.generation, sol.generation)
    assert np.array_equal(back.pipes["fig1"]["psi"], sol.pipes["fig1"]["psi"])
    assert back.objective == sol.objective


def test_bad_solution_file(tmp_path):
    (tmp_path / "solution.json").write_text(json.dumps({"version": 1, "hours": 1}))
    with pytest.raises(SchemaMismatch):
        load_solution(tmp_path)


def test_spec_errors(pipe_gas):
    with pytest.raises(SpecError):
        Generator("w", "B1", "wind", 0.0, 10.0, 0.0)
    with pytest.raises(SpecError):
        Generator("x", "B1", "nuclear", 0.0, 10.0, 0.0)
    with pytest.raises(SpecError):
        PowerSystemSpec(("B1", "B2"), (), (), {}, "B1")  # disconnected
    with pytest.raises(SpecError):
        DispatchHorizon(hours=1, control_interval=3600.0, dt=700.0)
    with pytest.raises(SpecError):
        CouplingSpec((), (P2GLink("p", "B1", "outlet", 0.1, 5.0, 1.0),))
    with pytest.raises(SpecError):
        assemble_lp(two_bus(), coupling(), pipe_gas, HOUR, LOCAL)
    with pytest.raises(SpecError):
        assemble_lp(two_bus(), coupling(), pipe_gas, HOUR, "quadratic")
    with pytest.raises(SpecError):
        assemble_lp(two_bus(), coupling(), pipe_gas.with_models({}), HOUR, GLOBAL)
    with pytest.raises(SpecError):
        assemble_lp(two_bus(), coupling(), pipe_gas, DispatchHorizon(hours=1, dt=1800.0), GLOBAL)


def test_uncertified_model_rejected(pipe_gas):
    m = pipe_gas.models["fig1"]
    raw = KoopmanModel(m.Kx, m.Ku, m.observables, m.dt, pipeline_id="fig1")
    with pytest.raises(SpecError):
        assemble_lp(two_bus(), coupling(), pipe_gas.with_models({"fig1": raw}), HOUR, GLOBAL)


def test_observable_mismatch_rejected(pipe_gas):
    m = pipe_gas.models["fig1"]
    bad = KoopmanModel(m.Kx, m.Ku, m.observables, m.dt, pipeline_id="fig1", stability=m.stability)
    object.__setattr__(bad, "observables", "full")
    with pytest.raises(DimensionMismatch):
        assemble_lp(two_bus(), coupling(), pipe_gas.with_models({"fig1": bad}), HOUR, GLOBAL)


def test_gas_spec_validation(pipe_gas):
    with pytest.raises(SpecError):
        GasDispatchSpec(pipe_gas.network, {}, {})
    with pytest.raises(SpecError):
        GasDispatchSpec(pipe_gas.network, {"inlet": SourceSpec(0.0, 6e6, 5e6, 5.5e6)}, {})


def test_line_limit_binds(pipe_gas):
    gens = (Generator("cheap", "B1", "coal", 0.0, 200.0, 5.0), Generator("dear", "B2", "coal", 0.0, 200.0, 50.0))
    power = PowerSystemSpec(("B1", "B2"), (Line("L", "B1", "B2", 0.1, 60.0),), gens, {"B2": [100.0]}, "B1")
    sol, _ = dispatch(power, CouplingSpec(), pipe_gas, HOUR, LOCAL, 1.0)
    assert sol.generation[0, 0] == pytest.approx(60.0, abs=1e-6)
    assert sol.generation[0, 1] == pytest.approx(40.0, abs=1e-6)
    flow = 100.0 * (sol.theta[0, 0] - sol.theta[0, 1]) / 0.1
    assert flow == pytest.approx(60.0, abs=1e-6)
    assert not math.isnan(sol.objective)
