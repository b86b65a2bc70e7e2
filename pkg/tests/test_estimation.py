"""Kalman filter runs and batch MMSE estimation."""

import json

import numpy as np
import pytest
import scipy.sparse as sp

from wqsp.dynamics import NoiseSpec, WqSystem, assemble, assemble_all, initial_state, measure, simulate
from wqsp.errors import SingularInnovation, TooLargeForDense
from wqsp.estimation import augmented_observability, batch_logdet, batch_mmse, kf_run
from wqsp.hydraulics import Fixed, load_hydraulics, plan_discretization
from wqsp.observability import LinearSystem, gramian_factors, metric_general
from wqsp.placement import greedy_step, MetricConfig
from wqsp.synthetic import bundle

from conftest import hydraulics_doc, random_sparse_matrix


def small_systems(model, flows, segments=4, n_steps=2, dt=20.0):
    prof = load_hydraulics(hydraulics_doc(flows, n_steps=n_steps), model)
    plans = plan_discretization(model, prof, Fixed(segments, dt=dt))
    return prof, assemble_all(model, prof, plans)


def trajectory(model, systems, prof, duration, process_std=0.0, seed=0):
    x0 = initial_state(model, systems[0].index)
    traj = simulate(systems, x0, duration, prof.dt_hydraulic_s,
                    NoiseSpec(process_std, 0.1), seed=seed)
    return traj, traj.as_array()


class TestKalmanFilter:
    def test_exact_full_sensing(self, mixed_model):
        prof, systems = small_systems(mixed_model, {"M1": 100, "PA": 60, "PB": 40, "PC": -10,
                                                    "PD": 40, "V1": 30, "V2": 60})
        traj, truth = trajectory(mixed_model, systems, prof, 400.0)
        sensors = list(mixed_model.node_ids)
        Y = measure(traj, sensors, 0.0)
        rep = kf_run(systems, sensors, truth, Y, np.zeros(systems[0].n_x), 1.0,
                     sensor_std=1e-7, dt_hydraulic_s=prof.dt_hydraulic_s)
        assert rep.rmse_sensed.max() <= 1e-8

    def test_no_sensors_is_open_loop(self, mixed_model):
        prof, systems = small_systems(mixed_model, {"M1": 100, "PA": 60, "PB": 40, "PC": -10,
                                                    "PD": 40, "V1": 30, "V2": 60})
        traj, truth = trajectory(mixed_model, systems, prof, 300.0)
        x_hat = np.full(systems[0].n_x, 0.3)
        rep = kf_run(systems, [], truth, np.zeros((len(truth), 0)), x_hat, 1.0,
                     dt_hydraulic_s=prof.dt_hydraulic_s)
        pred = [x_hat]
        for _ in range(len(truth) - 1):
            pred.append(systems[0].A @ pred[-1])
        expected = np.sqrt(np.mean((np.array(pred) - truth) ** 2, axis=1))
        np.testing.assert_allclose(rep.rmse, expected, rtol=1e-12)

    def test_adding_a_sensor_never_raises_variance(self, mixed_model):
        prof, systems = small_systems(mixed_model, {"M1": 100, "PA": 60, "PB": 40, "PC": -10,
                                                    "PD": 40, "V1": 30, "V2": 60})
        traj, truth = trajectory(mixed_model, systems, prof, 200.0)
        previous = None
        for S in (["J2"], ["J2", "T1"], ["J2", "T1", "J3"]):
            Y = measure(traj, S, 0.1, seed=1)
            rep = kf_run(systems, S, truth, Y, np.zeros(systems[0].n_x), 0.5,
                         process_std=0.01, sensor_std=0.1, dt_hydraulic_s=prof.dt_hydraulic_s)
            if previous is not None:
                assert np.all(rep.p_diag <= previous + 1e-10)
            previous = rep.p_diag

    def test_diagonal_mode_runs(self, mixed_model):
        prof, systems = small_systems(mixed_model, {"M1": 100, "PA": 60, "PB": 40, "PC": -10,
                                                    "PD": 40, "V1": 30, "V2": 60})
        traj, truth = trajectory(mixed_model, systems, prof, 200.0)
        Y = measure(traj, ["J2"], 0.1, seed=2)
        rep = kf_run(systems, ["J2"], truth, Y, np.zeros(systems[0].n_x), 0.5,
                     dt_hydraulic_s=prof.dt_hydraulic_s, diagonal=True)
        assert np.all(rep.rmse >= 0) and np.all(rep.p_diag >= 0)

    def test_singular_innovation(self, mixed_model):
        prof, systems = small_systems(mixed_model, {"M1": 100, "PA": 60, "PB": 40, "PC": -10,
                                                    "PD": 40, "V1": 30, "V2": 60})
        traj, truth = trajectory(mixed_model, systems, prof, 100.0)
        with pytest.raises(SingularInnovation):
            kf_run(systems, ["J2"], truth, measure(traj, ["J2"], 0.0), truth[0], 0.0,
                   sensor_std=0.0, dt_hydraulic_s=prof.dt_hydraulic_s)

    def test_dense_guard(self):
        A = sp.eye(2500, format="csr")
        index = LinearSystem(A, 1).index
        system = WqSystem(A, index, 1.0, 1)
        with pytest.raises(TooLargeForDense):
            kf_run([system], [], np.zeros((1, 2500)), np.zeros((1, 0)), np.zeros(2500), 1.0)

    def test_report_exports(self, mixed_model):
        prof, systems = small_systems(mixed_model, {"M1": 100, "PA": 60, "PB": 40, "PC": -10,
                                                    "PD": 40, "V1": 30, "V2": 60})
        traj, truth = trajectory(mixed_model, systems, prof, 100.0)
        rep = kf_run(systems, ["J1"], truth, measure(traj, ["J1"], 0.1, seed=0),
                     np.zeros(systems[0].n_x), 0.1, dt_hydraulic_s=prof.dt_hydraulic_s)
        doc = json.loads(rep.to_json())
        assert doc["sensors"] == ["J1"]
        assert rep.rmse_csv().count("\n") == len(truth) + 1

    @pytest.mark.slow
    def test_greedy_beats_worst_random_on_looped_network(self):
        model, profiles = bundle("net1")
        prof = profiles[0][1]
        plans = plan_discretization(model, prof, Fixed(10), window_s=300.0)
        steps = range(4)
        systems = [assemble(model, prof, plans[k], k) for k in steps]
        obj = MetricConfig().objective(systems[0])
        chosen = greedy_step(obj, 3).nodes
        rng = np.random.default_rng(0)
        nodes = model.node_ids
        randoms = [[nodes[i] for i in np.sort(rng.choice(len(nodes), 3, replace=False))]
                   for _ in range(10)]
        x0 = initial_state(model, systems[0].index)

        def mean_rmse(S):
            out = []
            for seed in range(10):
                traj = simulate(systems, x0, 2 * 3600.0, prof.dt_hydraulic_s,
                                NoiseSpec(0.0, 0.1), seed=seed, record_every=1)
                truth = traj.as_array()
                Y = measure(traj, S, 0.1, seed=seed)
                rep = kf_run(systems, S, truth, Y, np.zeros_like(x0), 5e-3, 1e-3, 0.1,
                             dt_hydraulic_s=prof.dt_hydraulic_s)
                out.append(rep.mean_rmse)
            return float(np.mean(out))

        greedy = mean_rmse(chosen)
        assert greedy <= max(mean_rmse(S) for S in randoms)


class TestBatch:
    def test_noiseless_single_state(self):
        z, Sigma = batch_mmse(np.array([[1.0]]), [0.37], 0.0, 1.0)
        assert z[0] == pytest.approx(0.37, abs=1e-15)
        assert Sigma[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_no_measurements(self):
        lam = np.array([0.1, 0.2, 0.3])
        z, Sigma = batch_mmse(np.zeros((0, 3)), [], 0.1, lam)
        np.testing.assert_array_equal(Sigma, np.diag(lam))
        np.testing.assert_array_equal(z, 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_two_state_matches_closed_form(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.uniform(-0.8, 0.8, size=(2, 2))
        sigma, lam0, lamw = 0.2, 5e-3, 1e-3
        system = LinearSystem(A, k_f=2)
        fac = list(gramian_factors(system, ["x0"]).values())
        ref = metric_general(fac, system, sigma, lam0, lamw).value
        got = batch_logdet(A, [0], 2, sigma, lam0, lamw)
        assert got == pytest.approx(ref, rel=1e-8, abs=1e-8)

    def test_posterior_mean_recovers_state(self, rng):
        A = random_sparse_matrix(rng, 4, 0.5, radius=0.9).toarray()
        O = augmented_observability(A, [0, 1, 2, 3], 2, process=False)
        z = rng.normal(size=4)
        z_hat, _ = batch_mmse(O, O @ z, 1e-6, 1.0)
        np.testing.assert_allclose(z_hat, z, atol=1e-8)

    def test_augmented_structure(self):
        A = np.array([[0.5, 0.1], [0.0, 0.9]])
        O = augmented_observability(A, [1], 2)
        assert O.shape == (3, 6)
        np.testing.assert_allclose(O[2, :2], (np.linalg.matrix_power(A, 2))[1])
        np.testing.assert_allclose(O[2, 2:4], A[1])
        np.testing.assert_allclose(O[2, 4:6], [0.0, 1.0])
        np.testing.assert_array_equal(O[0, 2:], 0.0)

    def test_guard(self):
        with pytest.raises(TooLargeForDense):
            augmented_observability(sp.eye(3000), [0], 2)
