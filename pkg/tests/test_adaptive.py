from dataclasses import replace

import numpy as np
import pytest

import thermocal.adaptive as adaptive
from thermocal.adaptive import (MeshResult, RefinementConfig, mesh_refine, run_adaptive,
                                stabilization_stat)
from thermocal.conductivity import ConductivityModel
from thermocal.data import Dataset
from thermocal.errors import ConfigError, NumericalError
from thermocal.forward import Discretization, SensorProbe, solve
from thermocal.mcmc import ChainConfig, sample
from thermocal.probabilistic import PosteriorProblem, SensorErrorModel, loss, morozov_threshold

TINY_CHAIN = ChainConfig(n_samples=200, burn_in=20, initial_proposal_std=1e-3)


def test_stabilization_stat_values():
    assert stabilization_stat([5.0, 5.0, 5.0]) == 0.0
    assert stabilization_stat([100.0, 100.0, 110.0]) == pytest.approx(0.0456198, rel=1e-5)
    assert stabilization_stat([1.0, 9.0, 100.0, 100.0, 110.0], 3) == pytest.approx(0.0456198, rel=1e-5)
    with pytest.raises(ConfigError):
        stabilization_stat([1.0, 2.0], 3)
    with pytest.raises(NumericalError):
        stabilization_stat([-1.0, 0.0, 1.0])


@pytest.mark.parametrize("scale", [1e-3, 7.0, -2.5, 1e4])
def test_stabilization_scale_invariant(scale):
    h = np.array([-9100.0, -9050.0, -9120.0, -9080.0])
    assert stabilization_stat(scale * h) == pytest.approx(stabilization_stat(h), rel=1e-12)


def test_refinement_config_validation():
    for kw in (dict(gamma=-0.1), dict(delta=1), dict(phi=0.0), dict(max_n_s=0), dict(p0=(0.3,)),
               dict(p0=(0.3, -0.1))):
        with pytest.raises(ConfigError):
            RefinementConfig(**kw)
    cfg = RefinementConfig(gamma=0.02, p0=(0.25, 0.35))
    assert RefinementConfig.from_dict(cfg.to_dict()) == cfg


def test_morozov_fires_on_self_consistent_data(setup):
    """Data equal to the model output at a coarse mesh plus the sensor bias."""
    err = SensorErrorModel([0.0, 100.0], [0.05, 0.05], [0.08, 0.08])
    truth_disc = Discretization(4, 4)
    times = np.array([10800.0, 21600.0, 32400.0, 43200.0])
    traj_model = ConductivityModel(20.0, 45.0, [0.3, 0.3])
    f = SensorProbe(setup, truth_disc, times)(solve(setup, traj_model, truth_disc))
    ds = Dataset(times, (f + 0.05).reshape(4, -1), setup.sensor_positions, err)
    shape = ConductivityModel(ds.T_min, ds.T_max, [0.3, 0.3])
    res = mesh_refine(ds, setup, shape, shape.k_values, RefinementConfig())
    assert res.stop_reason == "morozov"
    assert res.s_like <= res.threshold
    # the trace never refines past the generating mesh in both directions
    assert res.n_e <= 4 or res.n_t <= 4


@pytest.fixture(scope="module")
def ns1_mesh(setup, synthetic):
    shape = ConductivityModel(synthetic.T_min, synthetic.T_max, [0.3, 0.3])
    return mesh_refine(synthetic, setup, shape, shape.k_values, RefinementConfig()), shape


def test_mesh_trace_invariants(ns1_mesh):
    res, _ = ns1_mesh
    ne = [r.n_e for r in res.records]
    nt = [r.n_t for r in res.records]
    assert all(b >= a for a, b in zip(ne[:-1], ne[1:]))
    assert all(b >= a for a, b in zip(nt[:-1], nt[1:]))
    assert all(r.units > 0 for r in res.records)
    assert res.units == pytest.approx(sum(b.units for r in res.records for b in r.branches))
    # both counts grow in one step when the time branch needs more elements
    steps = list(zip(res.records[:-1], res.records[1:]))
    assert any(b.axis == "time" and b.n_e > a.n_e and b.n_t > a.n_t for a, b in steps)


def test_mesh_stop_is_sound(ns1_mesh):
    res, _ = ns1_mesh
    if res.stop_reason == "morozov":
        assert res.s_like <= res.threshold
    else:
        assert res.stop_reason == "stabilized"
        assert stabilization_stat([r.s_like for r in res.records], 3) <= 0.05
        assert res.selected_iteration == res.records[-3].iteration


def test_selected_state_reproduces_loss(ns1_mesh, setup, synthetic):
    res, shape = ns1_mesh
    again = loss(res.p, synthetic, setup, Discretization(res.n_e, res.n_t), shape)
    assert again.s_like == pytest.approx(res.s_like, rel=1e-8)


def test_mesh_refine_reproducible(setup, small_synthetic):
    shape = ConductivityModel(small_synthetic.T_min, small_synthetic.T_max, [0.3, 0.3])
    cfg = RefinementConfig(max_mesh_iters=6)
    a = mesh_refine(small_synthetic, setup, shape, shape.k_values, cfg)
    b = mesh_refine(small_synthetic, setup, shape, shape.k_values, cfg)
    assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]


def test_max_iters_cap(setup, small_synthetic):
    shape = ConductivityModel(small_synthetic.T_min, small_synthetic.T_max, [0.3, 0.3])
    res = mesh_refine(small_synthetic, setup, shape, shape.k_values,
                      RefinementConfig(max_mesh_iters=2, phi=1e-9))
    assert res.stop_reason == "max_iters"
    assert len(res.records) == 2


def _fake_mesh(s_like_by_level, stop_by_level):
    """Replace mesh refinement by a table lookup on the segment count."""
    def fake(dataset, setup, k_shape, p0, config, executor=None, threshold=None):
        n_s = k_shape.n_s
        rec = adaptive.IterationRecord(n_s, 1, 2, 2, "time", s_like_by_level[n_s], 0.0, 10.0,
                                       np.asarray(p0, float))
        return MeshResult(n_s, np.asarray(p0, float), 2, 2, s_like_by_level[n_s], 0.0,
                          stop_by_level[n_s], 1, threshold, [rec])
    return fake


def _run_fake(monkeypatch, setup, ds, s_like, stops, **cfg):
    monkeypatch.setattr(adaptive, "mesh_refine", _fake_mesh(s_like, stops))
    return run_adaptive(ds, setup, RefinementConfig(bic_only=True, **cfg), TINY_CHAIN)


def test_outer_stop_morozov_first(monkeypatch, setup, small_synthetic):
    r = _run_fake(monkeypatch, setup, small_synthetic, {1: 1000.0, 2: 500.0, 4: 100.0},
                  {1: "stabilized", 2: "morozov", 4: "stabilized"})
    assert (r.selected_n_s, r.stop_reason) == (2, "morozov")
    assert len(r.levels) == 2


def test_outer_stop_not_justified_selects_previous(monkeypatch, setup, small_synthetic):
    r = _run_fake(monkeypatch, setup, small_synthetic, {1: 1000.0, 2: 500.0, 4: 499.0},
                  {1: "stabilized", 2: "stabilized", 4: "stabilized"})
    assert (r.selected_n_s, r.stop_reason) == (2, "not_justified")
    # only the selected level is sampled in BIC-only mode
    assert [lv.chain is not None for lv in r.levels] == [False, True, False]
    assert r.trace.mcmc_units == {2: 200.0 * 2 ** 2 * 2}


def test_outer_stop_morozov_beats_not_justified(monkeypatch, setup, small_synthetic):
    r = _run_fake(monkeypatch, setup, small_synthetic, {1: 1000.0, 2: 999.0},
                  {1: "stabilized", 2: "morozov"})
    assert (r.selected_n_s, r.stop_reason) == (2, "morozov")


def test_outer_stop_max_n_s(monkeypatch, setup, small_synthetic):
    r = _run_fake(monkeypatch, setup, small_synthetic, {1: 1000.0, 2: 500.0, 4: 100.0},
                  {1: "stabilized", 2: "stabilized", 4: "stabilized"}, max_n_s=4)
    assert (r.selected_n_s, r.stop_reason) == (4, "max_n_s")
    assert [lv.n_s for lv in r.levels] == [1, 2, 4]


def test_refined_start_continues_previous_curve(monkeypatch, setup, small_synthetic):
    starts = {}
    fake = _fake_mesh({1: 1000.0, 2: 500.0}, {1: "stabilized", 2: "morozov"})

    def spy(dataset, setup, k_shape, p0, config, executor=None, threshold=None):
        starts[k_shape.n_s] = np.asarray(p0, float)
        return fake(dataset, setup, k_shape, p0, config, executor, threshold)

    monkeypatch.setattr(adaptive, "mesh_refine", spy)
    run_adaptive(small_synthetic, setup, RefinementConfig(bic_only=True, p0=(0.2, 0.4)), TINY_CHAIN)
    np.testing.assert_allclose(starts[1], [0.2, 0.4])
    np.testing.assert_allclose(starts[2], [0.2, 0.3, 0.4])


def test_small_run_end_to_end(setup, small_synthetic):
    cfg = RefinementConfig(max_n_s=2, max_mesh_iters=8)
    r = run_adaptive(small_synthetic, setup, cfg, TINY_CHAIN)
    assert r.threshold == pytest.approx(morozov_threshold(small_synthetic.error_model, small_synthetic.d, 0.01))
    assert all(lv.chain is not None and lv.record.dic is not None for lv in r.levels)
    units = r.trace.units_by_n_s()
    for lv in r.levels:
        assert units[lv.n_s] == pytest.approx(lv.mesh.units)
    s = r.summary()
    assert s["selected"]["n_s"] == r.selected_n_s
    assert s["total_units"] == pytest.approx(sum(units.values()) + sum(r.trace.mcmc_units.values()))
    band = r.band()
    assert np.all(band.lower <= band.upper)


def test_stalled_chain_gives_no_dic(setup, small_synthetic):
    shape = ConductivityModel(small_synthetic.T_min, small_synthetic.T_max, [0.3, 0.3])
    problem = PosteriorProblem(small_synthetic, setup, Discretization(4, 8), shape)
    mesh = MeshResult(1, shape.k_values, 4, 8, 100.0, 1.0, "stabilized", 1, -50.0, [])
    stalled = sample(problem.log_posterior, shape.k_values,
                     ChainConfig(n_samples=50, burn_in=10, initial_proposal_std=10.0, adapt=False))
    assert stalled.acceptance_rate == 0.0
    rec = adaptive._selection_record(problem, mesh, stalled)
    assert rec.dic is None and rec.criterion_name == "bic"
    moving = sample(problem.log_posterior, shape.k_values, TINY_CHAIN)
    assert adaptive._selection_record(problem, mesh, moving).dic is not None
