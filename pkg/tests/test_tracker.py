import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.constants import speed_of_light as C

from sidelink_trk import tracker
from sidelink_trk.chest import SaConfig
from sidelink_trk.chest.estimator import estimate, estimate_delays
from sidelink_trk.crlb import eeclb
from sidelink_trk.scene import (CruState, MotionModel, PathParams, RsuState, SceneGeometry,
                                default_rsu, generate_paths, lane_trajectory, los_geometry)
from sidelink_trk.tracker import (BETA, EpochObservation, Gate, GaussianState, PosMeasurement,
                                  build_gate, dead_reckoning, identify_los, initial_state,
                                  make_measurement, measurement_jacobian, mse_tables, predict,
                                  run_benchmarks, run_filter, snapshot_positions, update)
from sidelink_trk.waveform import ArrayConfig, OfdmConfig, synthesize

HEIGHT = 1.5


def _spd(rng, n, scale=1.0):
    X = rng.standard_normal((n, n))
    return scale * (X @ X.T + 0.1 * np.eye(n))


def _state(rng):
    return GaussianState(rng.standard_normal(6) * [10, 10, 1, 3, 3, 0.1], _spd(rng, 6))


# --- predict ------------------------------------------------------------------------

def test_predict_static_without_noise():
    # no velocity uncertainty, so F P F^T leaves P alone too
    s = GaussianState([1.0, 2.0, 1.5, 0, 0, 0], np.diag([1.0, 1.0, 1.0, 0, 0, 0]))
    out = predict(s, MotionModel(sigma_a=0.0), substeps=10)
    np.testing.assert_array_equal(out.mean, s.mean)
    np.testing.assert_array_equal(out.cov, s.cov)


def test_predict_substeps_match_closed_form():
    rng = np.random.default_rng(0)
    s = _state(rng)
    m = MotionModel(T=0.01, sigma_a=0.1)
    out = predict(s, m, substeps=10)

    def F(t):
        return np.block([[np.eye(3), t * np.eye(3)], [np.zeros((3, 3)), np.eye(3)]])

    # closed form: F(0.1) P F(0.1)^T + sum_i F(iT) W F(iT)^T
    W = m.GQGt
    P = F(0.1) @ s.cov @ F(0.1).T + sum(F(i * 0.01) @ W @ F(i * 0.01).T for i in range(10))
    np.testing.assert_allclose(out.mean, F(0.1) @ s.mean, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.cov, P, rtol=0, atol=1e-12)


def test_predict_grows_trace_and_rejects_zero_substeps():
    s = GaussianState(np.zeros(6), np.eye(6))
    assert np.trace(predict(s, MotionModel()).cov) > np.trace(s.cov)
    with pytest.raises(ValueError):
        predict(s, MotionModel(), substeps=0)


# --- update -------------------------------------------------------------------------

def test_uninformative_measurement_leaves_prior():
    rng = np.random.default_rng(1)
    s = _state(rng)
    out = update(s, PosMeasurement(s.mean[:3] + 5.0, 1e12 * np.eye(3)))
    np.testing.assert_allclose(out.mean, s.mean, rtol=1e-6, atol=1e-6 * np.abs(s.mean).max())
    np.testing.assert_allclose(out.cov, s.cov, rtol=1e-6, atol=1e-6 * np.abs(s.cov).max())


def test_dogmatic_prior_ignores_measurement():
    P = np.diag([1e-14, 1e-14, 1e-14, 1.0, 1.0, 1.0])
    s = GaussianState([1.0, 2.0, 1.5, 3.0, 4.0, 0.0], P)
    out = update(s, PosMeasurement([9.0, 9.0, 9.0], np.eye(3)))
    np.testing.assert_allclose(out.mean, s.mean, atol=1e-12)


@given(st.integers(0, 100_000))
@settings(max_examples=60)
def test_update_equals_information_form(seed):
    rng = np.random.default_rng(seed)
    s = _state(rng)
    R = _spd(rng, 3, 0.5)
    z = s.mean[:3] + rng.standard_normal(3)
    out = update(s, PosMeasurement(z, R))
    H = tracker.H
    Pinv = np.linalg.inv(s.cov)
    info = Pinv + H.T @ np.linalg.solve(R, H)
    P_post = np.linalg.inv(info)
    m_post = P_post @ (Pinv @ s.mean + H.T @ np.linalg.solve(R, z))
    np.testing.assert_allclose(out.mean, m_post, rtol=0, atol=1e-9 * max(1, np.abs(m_post).max()))
    np.testing.assert_allclose(out.cov, P_post, rtol=0, atol=1e-9 * np.abs(P_post).max())
    # posterior never exceeds the prior
    assert np.linalg.eigvalsh(s.cov - out.cov).min() >= -1e-9 * np.trace(s.cov)
    np.testing.assert_array_equal(out.cov, out.cov.T)


def test_update_survives_widely_spread_measurement_covariance():
    # a bound with no information along one direction: eigenvalues 1e13 and 1e-3
    rng = np.random.default_rng(4)
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    R = Q @ np.diag([1e13, 1e-3, 2e-3]) @ Q.T
    s = GaussianState([0, 0, 0, 1, 1, 0], np.diag([1e-2, 1e-2, 1e-4, 1e-3, 1e-3, 1e-6]))
    z = np.array([0.1, -0.1, 0.0])
    out = update(s, PosMeasurement(z, R))
    assert np.all(np.isfinite(out.mean))
    assert np.linalg.eigvalsh(out.cov).min() > 0
    assert np.linalg.eigvalsh(s.cov - out.cov).min() >= -1e-12
    assert np.linalg.norm(out.mean[:3]) < np.linalg.norm(z)


def test_update_rejects_non_spd_r():
    s = GaussianState(np.zeros(6), np.eye(6))
    with pytest.raises(np.linalg.LinAlgError):
        update(s, PosMeasurement(np.zeros(3), np.diag([1.0, 0.0, 1.0])))


# --- gate ---------------------------------------------------------------------------

def test_gate_center_is_inside():
    rsu = default_rsu()
    pred = GaussianState([20.0, 5.0, HEIGHT, 0, 14, 0], np.eye(6))
    g = build_gate(pred, rsu)
    assert g.distance(g.center) == 0.0
    assert g.contains(g.center)


def test_gate_boundary():
    g = Gate([1e-7, 0.2, -0.1], np.diag([4.0, 0.01, 0.09]), BETA)
    q = g.center + np.array([2.0 * np.sqrt(BETA) / C, 0.0, 0.0])
    assert g.distance(q) == pytest.approx(BETA, rel=1e-9)
    q = g.center + np.array([0.0, 0.0, 0.3 * np.sqrt(BETA)])
    assert g.distance(q) == pytest.approx(BETA, rel=1e-9)
    with pytest.raises(ValueError):
        Gate([0, 0, 0], np.eye(3), 0.0)


@given(st.tuples(st.floats(-60, 60), st.floats(-60, 60), st.floats(0, 3)),
       st.tuples(st.floats(-3, 3), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3)))
def test_gate_jacobian_matches_finite_differences(p, euler):
    rsu = RsuState([0.0, 0.0, 10.0], np.array(euler))
    pos = np.array(p)
    if np.linalg.norm(pos[:2]) < 1.0:
        return
    M = measurement_jacobian(rsu, pos)
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-5
        a, b = los_geometry(rsu, pos + e), los_geometry(rsu, pos - e)
        fd = np.array([C * (a[0] - b[0]), tracker.wrap_angle(a[1] - b[1]), a[2] - b[2]]) / 2e-5
        assert np.abs(fd - M[:, j]).max() <= 1e-6 * max(np.abs(M[:, j]).max(), 1e-3)


def test_gate_uses_predicted_position_block():
    rsu = default_rsu()
    P = np.diag([4.0, 9.0, 1e-4, 1.0, 1.0, 1e-6])
    pred = GaussianState([15.0, -20.0, HEIGHT, 0, 14, 0], P)
    g = build_gate(pred, rsu)
    M = measurement_jacobian(rsu, pred.position)
    np.testing.assert_allclose(g.U, M @ P[:3, :3] @ M.T, rtol=1e-12)


# --- LoS identification ---------------------------------------------------------------

def _path(toa, az=0.3, el=-0.2):
    return PathParams(1e-4, toa, az, el)


def test_identify_empty():
    assert identify_los([]) is None
    assert identify_los([], Gate([0, 0, 0], np.eye(3))) is None


def test_identify_without_gate_is_shortest_delay():
    paths = [_path(3e-7), _path(1e-7), _path(2e-7)]
    assert identify_los(paths) == 1
    assert identify_los(paths, toas=[1e-7, 3e-7, 2e-7]) == 0


def test_in_gate_path_wins_over_shorter_out_of_gate_path():
    gate = Gate([2e-7, 0.3, -0.2], np.diag([1.0, 1e-4, 1e-4]))
    paths = [_path(1e-7, az=-0.8), _path(2.01e-7)]
    assert identify_los(paths, gate) == 1
    assert identify_los(paths, None) == 0


def test_gate_recovers_los_behind_spurious_early_path():
    rsu = default_rsu()
    truth = np.array([10.0, 30.0, HEIGHT])
    tau, az, el = los_geometry(rsu, truth)
    pred = GaussianState([*truth, 0, 14, 0], np.diag([1, 1, 1e-4, 1, 1, 1e-6]))
    spurious = PathParams(5e-5, tau - 3e-8, -az, el + 0.3)
    los = PathParams(1e-4, tau, az, el)
    reflected = PathParams(5e-5, tau + 4e-8, az + 0.5, el)
    est = [spurious, los, reflected]
    assert identify_los(est, None) == 0
    assert identify_los(est, build_gate(pred, rsu)) == 1
    far = [PathParams(1e-4, tau + 1e-6, az + 1.0, el)]
    assert identify_los(far, build_gate(pred, rsu)) is None


# --- measurement construction ---------------------------------------------------------

def test_perfect_estimate_back_projects_exactly():
    rsu = RsuState([2.0, -1.0, 10.0], [0.4, 0.05, -0.02])
    p = np.array([12.0, 31.0, HEIGHT])
    tau, az, el = los_geometry(rsu, p)
    m = make_measurement([PathParams(1e-4, tau, az, el)], 0, C * tau, rsu, np.eye(3))
    np.testing.assert_allclose(m.z, p, atol=1e-9)
    assert m.source_path_index == 0


def test_angle_error_maps_to_range_times_delta():
    rsu = default_rsu()
    p = np.array([1.6, 40.0, HEIGHT])
    tau, az, el = los_geometry(rsu, p)
    d = 1e-4
    m = make_measurement([PathParams(1e-4, tau, az + d, el)], 0, C * tau, rsu, np.eye(3))
    r = C * tau
    assert np.linalg.norm(m.z - p) == pytest.approx(r * np.cos(el) * d, rel=1e-3)


def test_make_measurement_errors():
    rsu = default_rsu()
    est = [PathParams(1e-4, 1e-7, 0.1, -0.1)]
    assert make_measurement(est, 0, -1.0, rsu, np.eye(3)) is None
    assert make_measurement(est, 0, np.nan, rsu, np.eye(3)) is None
    with pytest.raises(IndexError):
        make_measurement(est, 3, 10.0, rsu, np.eye(3))
    with pytest.raises(IndexError):
        make_measurement(est, None, 10.0, rsu, np.eye(3))


def test_planar_measurement_pins_height():
    rsu = default_rsu()
    est = [PathParams(1e-4, 1e-7, 0.1, -0.3)]
    m = make_measurement(est, 0, 25.0, rsu, np.eye(3), height=HEIGHT)
    assert m.z[2] == HEIGHT


def test_measurement_scatter_consistent_with_eeclb():
    """Fixed LoS-only geometry, 100 noisy epochs: z covariance within 3x of EECLB-LOS."""
    ofdm = OfdmConfig()
    array = ArrayConfig(n_x=4, n_z=2, wavelength=ofdm.wavelength)
    single = ArrayConfig.single(ofdm.wavelength)
    rsu = default_rsu()
    truth = np.array([1.6, -40.0, HEIGHT])
    paths = generate_paths(SceneGeometry([], ground=False), rsu, CruState(truth, np.zeros(3)),
                           ofdm.wavelength)
    zs, bounds = [], []
    for seed in range(100):
        est = estimate(synthesize(paths, array, ofdm, seed=2 * seed), array, ofdm, SaConfig(),
                       seed=seed)
        cru = estimate_delays(synthesize(paths, single, ofdm, seed=2 * seed + 1).data,
                              ofdm.noise_variance, ofdm, seed=seed)
        rng_m = C * (est.toas.min() + cru.toas.min()) / 2
        zs.append(make_measurement(est, 0, rng_m, rsu, np.eye(3), height=HEIGHT).z)
        bounds.append(eeclb(est, 0, truth, "LOS", array, ofdm, rsu).position_cov)
    S = np.cov(np.array(zs)[:, :2].T)
    B = np.mean(bounds, axis=0)[:2, :2]
    ratio = np.trace(S) / np.trace(B)
    assert 1 / 3 <= ratio <= 3, ratio


# --- filtering and benchmarks ---------------------------------------------------------

def _clean_epochs(truth, rsu):
    out = []
    for s in truth:
        tau, az, el = los_geometry(rsu, s.position)
        out.append(EpochObservation([PathParams(1e-4, tau, az, el, 0, True)], np.array([C * tau])))
    return out


@pytest.fixture(scope="module")
def lane():
    truth = lane_trajectory()
    rsu = default_rsu()
    prior = initial_state(truth[0].vector, np.random.default_rng(3))
    return truth, rsu, prior, _clean_epochs(truth, rsu)


def test_noise_free_benchmarks(lane):
    truth, rsu, prior, epochs = lane
    pos = np.array([s.position for s in truth])
    n = len(epochs)
    inst, avg = np.repeat(1e-4 * np.eye(3)[None], n, axis=0), 1e-4 * np.eye(3)
    out = run_benchmarks(prior, MotionModel(), 10, epochs, rsu, inst, avg, height=HEIGHT)
    np.testing.assert_allclose(out["BM3"], pos, atol=1e-9)
    for name in ("BM1", "BM2"):
        assert np.linalg.norm(out[name][-10:] - pos[-10:], axis=1).max() < 0.05
    assert np.linalg.norm(out["BM4"][-1] - pos[-1]) > 0.05


def test_benchmarks_need_mse_tables(lane):
    truth, rsu, prior, epochs = lane
    with pytest.raises(ValueError):
        run_benchmarks(prior, MotionModel(), 10, epochs, rsu)
    with pytest.raises(ValueError):
        run_benchmarks(prior, MotionModel(), 10, epochs, rsu, np.zeros((3, 3, 3)), np.eye(3))


def test_dead_reckoning_trace_nondecreasing(lane):
    _, _, prior, _ = lane
    tr = [np.trace(s.cov) for s in dead_reckoning(prior, MotionModel(), 10, 50)]
    assert np.all(np.diff(tr) >= 0)


def test_empty_gate_steps_follow_predict_path_bitwise(lane):
    truth, rsu, prior, epochs = lane
    # every candidate sits far outside any gate
    bad = [EpochObservation([PathParams(1e-4, e.estimates[0].toa + 2e-6, -1.2, 0.5)],
                            e.ranges + 600.0) for e in epochs]
    out = run_filter(prior, MotionModel(), 10, bad, rsu, lambda *a: np.eye(3), gated=True,
                     height=HEIGHT)
    dr = dead_reckoning(prior, MotionModel(), 10, len(bad))
    assert all(s.gate_empty and not s.updated for s in out)
    for s, d in zip(out, dr):
        np.testing.assert_array_equal(s.posterior.mean, d.mean)
        np.testing.assert_array_equal(s.posterior.cov, d.cov)


def test_provider_error_skips_update_and_is_recorded(lane):
    truth, rsu, prior, epochs = lane

    def failing(k, obs, i, pred):
        raise ValueError("no bound")

    out = run_filter(prior, MotionModel(), 10, epochs[:3], rsu, failing, height=HEIGHT)
    assert all(not s.updated and "no bound" in s.error for s in out)


def test_snapshot_skips_missing_epochs(lane):
    truth, rsu, _, epochs = lane
    eps = [None, EpochObservation([], np.zeros(0)), epochs[2],
           EpochObservation(epochs[3].estimates, np.array([np.nan]))]
    out = snapshot_positions(eps, rsu, HEIGHT)
    assert np.isnan(out[[0, 1, 3]]).all()
    np.testing.assert_allclose(out[2], truth[2].position, atol=1e-9)


def test_mse_tables_match_naive_loops():
    rng = np.random.default_rng(5)
    truth = rng.standard_normal((4, 3))
    snaps = truth[None] + rng.standard_normal((6, 4, 3))
    snaps[2, 1] = np.nan
    inst, avg = mse_tables(snaps, truth, z_variance=1e-4)
    for k in range(4):
        rows = [snaps[r, k] - truth[k] for r in range(6) if np.all(np.isfinite(snaps[r, k]))]
        M = sum(np.outer(e, e) for e in rows) / len(rows)
        np.testing.assert_allclose(inst[k][:2, :2], M[:2, :2], rtol=1e-6)
        assert inst[k][2, 2] == 1e-4 and np.all(inst[k][2, :2] == 0)
    rows = [snaps[r, k] - truth[k] for r in range(6) for k in range(4)
            if np.all(np.isfinite(snaps[r, k]))]
    M = sum(np.outer(e, e) for e in rows) / len(rows)
    np.testing.assert_allclose(avg[:2, :2], M[:2, :2], rtol=1e-6)
    _, sc = mse_tables(snaps, truth, scalar=True)
    assert sc[0, 1] == 0 and sc[0, 0] == sc[1, 1]


def test_random_prior_keeps_height_exact():
    truth = lane_trajectory()[0].vector
    s = initial_state(truth, np.random.default_rng(0))
    assert s.mean[2] == truth[2] and s.mean[5] == truth[5]
    assert s.mean[0] != truth[0]
    np.testing.assert_allclose(np.diag(s.cov), tracker.PRIOR_STD ** 2)
