import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from koopgas.errors import DimensionMismatch, InsufficientData, RankDeficient, SchemaMismatch, VersionError
from koopgas.koopman_id import (
    DelayConfig,
    KoopmanModel,
    Regression,
    build_regression,
    companion_matrix,
    edmd_fit,
    extract,
    get_observables,
    lift,
    load_model,
    norm_budget,
    one_step_errors,
    predict,
    project_stable,
    save_model,
    spectral_radius,
    train,
    training_residual,
)
from koopgas.snapshots import ExcitationConfig, SnapshotSet, generate_snapshots


def synthetic(Kx, Ku, count, rng, noise=0.0):
    """Drive a known linear delay system with random inputs (state observables)."""
    dx, du = len(Kx), len(Ku) - 1
    u = rng.uniform(0.5, 1.5, (count, 2))
    x = np.zeros((count, 2))
    x[: max(dx, du)] = rng.uniform(0.5, 1.5, (max(dx, du), 2))
    for t in range(max(dx, du), count):
        x[t] = sum(K @ x[t - i] for i, K in enumerate(Kx, 1)) + sum(K @ u[t - i] for i, K in enumerate(Ku))
    x += noise * rng.standard_normal(x.shape)
    return SnapshotSet(u, x, 900.0)


def random_blocks(rng, D, N, budget):
    blocks = [rng.standard_normal((N, N)) for _ in range(D)]
    return [b * (budget / norm_budget(blocks)) for b in blocks]


@pytest.fixture(scope="module")
def fig1_fit():
    from koopgas.config import load_pipeline_config

    cfg = load_pipeline_config("fig1_pipeline.json")
    snaps = generate_snapshots(cfg.params, cfg.excitation, 1200, 900.0, seed=2)
    on, reg = train(snaps, stability=True)
    off, _ = train(snaps, stability=False)
    return snaps, reg, on, off


# ---------------------------------------------------------------- observables


def test_lift_hand_values():
    obs = get_observables("pressure")
    p, m = 1.15, 0.9
    expected = [p, m, -p * np.exp(-p), np.exp(-p) * np.sin(-p)]
    assert np.allclose(lift(obs, [p, m]), expected, rtol=1e-15)
    full = lift(get_observables("full"), [p, m])
    assert full.shape == (6,)
    assert np.allclose(full[4:], [-m * np.exp(-m), np.exp(-m) * np.sin(-m)], rtol=1e-15)


def test_extract_recovers_state(rng):
    x = rng.uniform(0.5, 1.5, (10, 2))
    for name in ("pressure", "full", "state"):
        assert np.array_equal(extract(lift(get_observables(name), x)), x)


def test_aliases_and_unknown_set():
    assert get_observables("v5a") is get_observables("pressure")
    assert get_observables("c4").N == 6
    with pytest.raises(SchemaMismatch):
        get_observables("quartic")


def test_observable_maps_finite():
    for name in ("pressure", "full"):
        assert get_observables(name).sample_check()


# ---------------------------------------------------------------- regression


def test_regression_counts(rng):
    s = SnapshotSet(rng.uniform(size=(100, 2)), rng.uniform(size=(100, 2)), 900.0)
    reg = build_regression(s, get_observables("pressure"), DelayConfig(3, 2))
    assert reg.Y.shape == (97, 4)
    assert reg.Z.shape == (97, 3 * 4 + 3 * 2)
    assert reg.times[0] == 3 and reg.times[-1] == 99
    # training rows are the targets before 80% of the record
    assert reg.times[reg.split - 1] < 80 <= reg.times[reg.split]


def test_regression_row_layout(rng):
    s = SnapshotSet(rng.uniform(size=(20, 2)), rng.uniform(size=(20, 2)), 900.0)
    obs = get_observables("state")
    reg = build_regression(s, obs, DelayConfig(2, 1))
    t = reg.times[4]
    assert np.array_equal(reg.Z[4], np.concatenate([s.x[t - 1], s.x[t - 2], s.u[t], s.u[t - 1]]))
    assert np.array_equal(reg.Y[4], s.x[t])


def test_too_few_snapshots(rng):
    s = SnapshotSet(rng.uniform(size=(8, 2)), rng.uniform(size=(8, 2)), 900.0)
    with pytest.raises(InsufficientData):
        build_regression(s, get_observables("pressure"), DelayConfig(3, 2))


def test_rank_deficient_rows(rng):
    s = SnapshotSet(rng.uniform(size=(30, 2)), rng.uniform(size=(30, 2)), 900.0)
    reg = build_regression(s, get_observables("pressure"), DelayConfig(3, 2), train_fraction=0.3)
    with pytest.raises(RankDeficient):
        edmd_fit(reg)


def test_invalid_delays():
    with pytest.raises(DimensionMismatch):
        DelayConfig(0, 2)


# ---------------------------------------------------------------- fitting


def test_constant_data_zero_residual():
    s = SnapshotSet(np.full((60, 2), 1.0), np.full((60, 2), 1.0), 900.0)
    model, reg = train(s, observables="state", stability=False)
    assert training_residual(model, reg) < 1e-12


def test_stability_off_matches_normal_equations(rng):
    Kx = random_blocks(rng, 3, 2, 0.8)
    Ku = [0.1 * rng.standard_normal((2, 2)) for _ in range(3)]
    s = synthetic(Kx, Ku, 400, rng, noise=1e-3)
    reg = build_regression(s, get_observables("pressure"), DelayConfig(3, 2))
    model = edmd_fit(reg, stability=False, observables="pressure")
    Y, Z = reg.train
    W = np.linalg.solve(Z.T @ Z + 1e-10 * np.eye(Z.shape[1]), Z.T @ Y)
    assert np.max(np.abs(model.weights() - W)) <= 1e-8 * max(1.0, np.max(np.abs(W)))


@pytest.mark.parametrize("stability", [False, True])
def test_recovers_known_delay_system(rng, stability):
    Kx = random_blocks(rng, 3, 2, 0.7)
    Ku = [0.2 * rng.standard_normal((2, 2)) for _ in range(3)]
    s = synthetic(Kx, Ku, 300, rng)
    model, _ = train(s, DelayConfig(3, 2), "state", stability=stability)
    assert np.linalg.norm(np.hstack(model.Kx) - np.hstack(Kx)) <= 1e-6
    assert np.linalg.norm(np.hstack(model.Ku) - np.hstack(Ku)) <= 1e-6


def test_constrained_fit_matches_conic_solver(rng):
    cp = pytest.importorskip("cvxpy")
    # well-conditioned regressors, unstable generating operators so the constraint binds
    n_rows, N, D = 200, 2, 2
    Z = rng.standard_normal((n_rows, N * D + 2))
    W_true = rng.standard_normal((N * D + 2, N))
    Y = Z @ W_true + 0.05 * rng.standard_normal((n_rows, N))
    reg = Regression(Y, Z, np.arange(n_rows), n_rows, N, DelayConfig(D, 0))
    model = edmd_fit(reg, stability=True, epsilon=0.05, observables="state")
    assert norm_budget(model.Kx) <= 0.95 + 1e-9

    W = cp.Variable(W_true.shape)
    cons = [sum(cp.sigma_max(W[i * N:(i + 1) * N, :]) for i in range(D)) <= 0.95]
    obj = 0.5 * cp.sum_squares(Y - Z @ W) + 0.5e-10 * cp.sum_squares(W)
    ref = cp.Problem(cp.Minimize(obj), cons)
    ref.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    ours = model.stats["train_objective"]
    assert abs(ours - ref.value) <= 1e-6 * ref.value
    assert np.max(np.abs(model.weights() - W.value)) <= 1e-3


@pytest.mark.parametrize("mode", ["sum", "per_block", "scaled"])
def test_stability_modes_respect_their_sets(fig1_fit, mode):
    _, reg, _, off = fig1_fit
    model = edmd_fit(reg, stability=True, epsilon=1e-3, mode=mode, observables="pressure")
    if mode == "per_block":
        assert max(np.linalg.norm(k, 2) for k in model.Kx) <= 0.999 / 3 + 1e-9
    else:
        assert norm_budget(model.Kx) <= 0.999 + 1e-9
    assert model.stability["certified_spectral_radius"] < 1
    # sum set contains the other two, so its fit is the best of the three
    best = edmd_fit(reg, stability=True, epsilon=1e-3, mode="sum", observables="pressure")
    assert best.stats["train_objective"] <= model.stats["train_objective"] * (1 + 1e-6)


def test_unknown_mode(fig1_fit):
    _, reg, _, _ = fig1_fit
    with pytest.raises(ValueError):
        edmd_fit(reg, stability=True, mode="box")


def test_stability_certificate(fig1_fit):
    _, reg, on, off = fig1_fit
    A = on.companion()
    rho = spectral_radius(A)
    assert rho < 1
    assert rho == pytest.approx(np.max(np.abs(np.linalg.eigvals(A))), abs=1e-8)
    assert on.stability["certified_spectral_radius"] == pytest.approx(rho, abs=1e-12)
    assert training_residual(off, reg) <= training_residual(on, reg)


def test_free_response_decays(fig1_fit, rng):
    snaps = fig1_fit[0]
    on, _ = train(snaps, observables="state", stability=True)
    A = on.companion()
    x0 = rng.standard_normal(A.shape[0])
    x = x0.copy()
    for _ in range(500):
        x = A @ x
    assert np.linalg.norm(x) < 1e-3 * np.linalg.norm(x0)


def test_lifted_free_response_bounded_by_radius(fig1_fit, rng):
    # lifted sets keep one slow mode near the budget edge; decay follows its rate
    _, _, on, _ = fig1_fit
    A = on.companion()
    rho = spectral_radius(A)
    x = rng.standard_normal(A.shape[0])
    n0 = np.linalg.norm(x)
    x = np.linalg.matrix_power(A, 500) @ x
    assert np.linalg.norm(x) <= 10 * rho**500 * n0 * np.linalg.cond(np.linalg.eig(A)[1])


def test_fig1_one_step_errors_small(fig1_fit):
    _, reg, on, _ = fig1_fit
    err = one_step_errors(on, reg, "test")
    assert np.max(np.abs(err[:, 0])) < 1e-3
    assert np.max(np.abs(err[:, 1])) < 3e-2


def test_predict_matches_regression_rows(fig1_fit):
    snaps, reg, on, _ = fig1_fit
    psi = lift(on.obs, snaps.x)
    t = int(reg.times[10])
    out = predict(on, psi[t - 3:t], snaps.u[t - 2:t], snaps.u[t:t + 1])
    assert np.allclose(out[0], reg.Z[10] @ on.weights(), rtol=1e-12, atol=1e-14)


@given(t=st.floats(0.01, 0.95))
def test_companion_radius_against_eigensolver(t):
    rng = np.random.default_rng(int(t * 1e6))
    blocks = random_blocks(rng, 3, 4, t)
    A = companion_matrix(blocks)
    assert spectral_radius(A) == pytest.approx(np.max(np.abs(np.linalg.eigvals(A))), abs=1e-8)
    # the budget set guarantees a stable companion matrix
    assert spectral_radius(A) < 1


# ---------------------------------------------------------------- projection

block_stacks = arrays(np.float64, (3, 4, 4), elements=st.floats(-2, 2, allow_subnormal=False))


@given(B=block_stacks, eps=st.floats(1e-3, 0.5))
def test_projection_lands_in_set(B, eps):
    P = project_stable(list(B), eps)
    assert norm_budget(P) <= (1 - eps) * (1 + 1e-12) + 1e-12
    # applying it twice changes nothing
    Q = project_stable(P, eps)
    assert np.allclose(np.array(Q), np.array(P), atol=1e-10)


@given(B=block_stacks, eps=st.floats(1e-3, 0.5), seed=st.integers(0, 2**32 - 1))
def test_projection_variational_inequality(B, eps, seed):
    rng = np.random.default_rng(seed)
    P = np.array(project_stable(list(B), eps))
    for _ in range(5):
        Q = np.array(random_blocks(rng, 3, 4, (1 - eps) * rng.uniform()))
        assert np.sum((B - P) * (Q - P)) <= 1e-8 * (1 + np.sum(B * B))


@given(B=block_stacks)
def test_projection_keeps_interior_points(B):
    budget = norm_budget(B)
    if budget > 0:
        B = B * (0.5 / budget)
    P = project_stable(list(B), 1e-3)
    assert np.array_equal(np.array(P), B)


@given(B=block_stacks, eps=st.floats(1e-3, 0.5))
def test_other_modes(B, eps):
    per = project_stable(list(B), eps, "per_block")
    assert max(np.linalg.norm(b, 2) for b in per) <= (1 - eps) / 3 * (1 + 1e-12) + 1e-15
    sc = project_stable(list(B), eps, "scaled")
    assert norm_budget(sc) <= (1 - eps) * (1 + 1e-12) + 1e-15


def test_projection_against_conic_solver(rng):
    cp = pytest.importorskip("cvxpy")
    B = [2 * rng.standard_normal((3, 3)) for _ in range(3)]
    P = project_stable(B, 0.1)
    X = [cp.Variable((3, 3)) for _ in B]
    prob = cp.Problem(cp.Minimize(sum(cp.sum_squares(x - b) for x, b in zip(X, B))),
                      [sum(cp.sigma_max(x) for x in X) <= 0.9])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    assert max(np.max(np.abs(p - x.value)) for p, x in zip(P, X)) <= 1e-6


def test_projection_errors():
    with pytest.raises(ValueError):
        project_stable([np.eye(2)], 0.0)
    with pytest.raises(ValueError):
        project_stable([np.eye(2)], 0.1, "box")


# ---------------------------------------------------------------- persistence


def test_model_round_trip(tmp_path, fig1_fit):
    _, _, on, _ = fig1_fit
    path = tmp_path / "m.json"
    save_model(on, path)
    back = load_model(path)
    assert back == on
    assert all(np.array_equal(a, b) for a, b in zip(back.Kx, on.Kx))


def test_model_version_and_schema(tmp_path, fig1_fit):
    _, _, on, _ = fig1_fit
    path = tmp_path / "m.json"
    save_model(on, path)
    data = json.loads(path.read_text())
    path.write_text(json.dumps({**data, "version": 99}))
    with pytest.raises(VersionError):
        load_model(path)
    del data["Ku"]
    path.write_text(json.dumps(data))
    with pytest.raises(SchemaMismatch):
        load_model(path)
    path.write_text("{not json")
    with pytest.raises(SchemaMismatch):
        load_model(path)


def test_model_shape_checks():
    with pytest.raises(DimensionMismatch):
        KoopmanModel((np.eye(2),), (np.zeros((2, 2)),), "pressure", 900.0)
    with pytest.raises(DimensionMismatch):
        KoopmanModel((np.eye(2), np.eye(3)), (np.zeros((2, 2)),), "state", 900.0)
