import numpy as np
import pytest

from koopgas.errors import ExcitationOutOfBounds, SchemaMismatch
from koopgas.snapshots import ExcitationConfig, SnapshotSet, excitation_profile, generate_snapshots


@pytest.fixture(scope="module")
def default_set():
    from koopgas.gas_dynamics import PipelineParams

    prm = PipelineParams(30000.0, 0.5, 0.0108, 340.0, 5.0, 20.0, 1e6, 8e6, "fig1")
    return prm, generate_snapshots(prm, ExcitationConfig(), 400, 900.0, seed=3)


def test_same_seed_same_data(fig1):
    a = generate_snapshots(fig1, ExcitationConfig(settle_hours=2), 50, 900.0, seed=7)
    b = generate_snapshots(fig1, ExcitationConfig(settle_hours=2), 50, 900.0, seed=7)
    c = generate_snapshots(fig1, ExcitationConfig(settle_hours=2), 50, 900.0, seed=8)
    assert np.array_equal(a.u, b.u) and np.array_equal(a.x, b.x)
    assert not np.array_equal(a.u, c.u)


def test_count_and_shapes(default_set):
    _, s = default_set
    assert len(s) == 400
    assert s.u.shape == s.x.shape == (400, 2)
    assert s.seed == 3


def test_default_excitation_ranges(default_set):
    prm, s = default_set
    u, x = s.physical()
    assert np.all(np.abs(u[:, 0] / 5.78e6 - 1) <= 0.10 + 1e-12)
    assert np.all((x[:, 1] >= 5.0 - 1e-9) & (x[:, 1] <= 20.0 + 1e-9))
    # the draw must actually cover a good part of both bands
    assert np.ptp(u[:, 0]) > 0.05 * 5.78e6
    assert np.ptp(x[:, 1]) > 5.0


def test_profile_draws_stay_inside_band(fig1, rng):
    cfg = ExcitationConfig(pressure_band=0.02, pressure_step=0.01)
    p, m = excitation_profile(fig1, cfg, 2000, 900.0, rng)
    lo, hi = cfg.pressure_range()
    assert np.all((p >= lo) & (p <= hi))
    assert np.all((m >= 5.0) & (m <= 20.0))


def test_constant_excitation_is_flat(fig1):
    s = generate_snapshots(fig1, ExcitationConfig(constant=True, settle_hours=2), 20, 900.0)
    assert np.ptp(s.u[:, 0]) == 0.0
    assert np.allclose(s.x[:, 1], 1.0)
    assert np.ptp(s.x[:, 0]) < 1e-9


def test_csv_round_trip(tmp_path, fig1):
    s = generate_snapshots(fig1, ExcitationConfig(settle_hours=2), 30, 900.0, seed=1)
    path = tmp_path / "snaps.csv"
    s.to_csv(path)
    back = SnapshotSet.from_csv(path)
    assert np.array_equal(back.u, s.u) and np.array_equal(back.x, s.x)
    assert back.dt == s.dt and back.seed == 1 and back.pipeline_id == "fig1"
    assert back.meta["segments"] == s.meta["segments"]


def test_bad_csv_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(SchemaMismatch):
        SnapshotSet.from_csv(path)


def test_mismatched_arrays_rejected():
    with pytest.raises(SchemaMismatch):
        SnapshotSet(np.zeros((5, 2)), np.zeros((4, 2)), 900.0)


def test_excitation_outside_limits(fig1):
    with pytest.raises(ExcitationOutOfBounds):
        generate_snapshots(fig1, ExcitationConfig(nominal_pressure=7.9e6), 10, 900.0)
    with pytest.raises(ExcitationOutOfBounds):
        generate_snapshots(fig1, ExcitationConfig(mfr_low=2.5, mfr_high=3.0), 10, 900.0)


def test_uncarriable_band():
    from koopgas.gas_dynamics import PipelineParams

    # about 1.5 MPa cannot push 20 kg/s through 100 km
    long_pipe = PipelineParams(100000.0, 0.5, 0.0108, 340.0, 5.0, 20.0, 1e6, 8e6, "long")
    cfg = ExcitationConfig(nominal_pressure=1.6e6, pressure_band=0.05)
    with pytest.raises(ExcitationOutOfBounds):
        generate_snapshots(long_pipe, cfg, 10, 900.0)
