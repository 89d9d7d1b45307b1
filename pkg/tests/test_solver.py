import numpy as np
import pytest

from _sim import make_instance, quick_config, short_law, source_errors
from agis.constants import MAS
from agis.core import OBS_DTYPE, Catalog, ModelRows, model_rows
from agis.errors import (
    ConfigError,
    DegenerateAnchors,
    NonFiniteInput,
    NotConverged,
    SingularBlock,
    UnderdeterminedSource,
)
from agis.params import AttitudeModel, GlobalParams
from agis.simulator import PerturbationScales, perturb_catalog
from agis.solver import (
    BlockKind,
    BlockPartials,
    ObservationBatch,
    PartialNormalEquations,
    SolverConfig,
    accumulate_block_partials,
    accumulate_rows,
    attitude_update,
    calibration_update,
    frame_align,
    global_update,
    outer_iteration,
    partition,
    rotate_attitude,
    rotate_catalog,
    run_agis,
    secondary_solve,
    solve_sources,
    source_update,
)
from agis.solver.frame import FrameRotation
from agis.solver.sources import OK, UNDERDETERMINED


@pytest.fixture(scope="module")
def inst():
    return make_instance(60, short_law(2.0), seed=4)


def _one_source(inst, sid):
    obs = inst.obs[inst.obs["source_id"] == sid]
    return obs, inst.truth.source(sid)


# -- source update -----------------------------------------------------------------


def test_source_update_fixed_point(inst):
    nu = inst.truth_nuisance()
    obs, s = _one_source(inst, 3)
    out, cov = source_update(obs, nu.attitude, nu.calibration, nu.glob, s, inst.law)
    err = source_errors(Catalog.from_sources([out]), Catalog.from_sources([s]))
    assert np.max(np.abs(err)) < 1e-12
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_source_update_recovers_perturbed_start(inst):
    nu = inst.truth_nuisance()
    for sid in range(10):
        obs, s = _one_source(inst, sid)
        start = perturb_catalog(Catalog.from_sources([s]), PerturbationScales(100, 100, 0, 0, 0),
                                sid).source(0)
        out, _ = source_update(obs, nu.attitude, nu.calibration, nu.glob, start, inst.law)
        err = source_errors(Catalog.from_sources([out]), Catalog.from_sources([s]))
        assert np.max(np.abs(err)) < 1e-9


def test_source_update_two_observations(inst):
    nu = inst.truth_nuisance()
    obs, s = _one_source(inst, 5)
    with pytest.raises(UnderdeterminedSource):
        source_update(obs[:2], nu.attitude, nu.calibration, nu.glob, s, inst.law)


def test_nan_observation_is_rejected(inst):
    obs = inst.obs[inst.obs["source_id"] < 4].copy()
    obs["abscissa"][17] = np.nan
    with pytest.raises(NonFiniteInput) as info:
        ObservationBatch.build(obs, inst.law)
    assert info.value.where["source_id"] == int(obs["source_id"][17])
    assert info.value.where["transit"] == int(obs["transit"][17])


def test_solve_sources_flags_underdetermined(inst):
    obs = inst.obs[inst.obs["source_id"] < 3]
    keep = (obs["source_id"] != 1) | (obs["transit"] < 3)
    batch = ObservationBatch.build(obs[keep], inst.law, ids=np.arange(3))
    x0 = inst.truth.fit_matrix()[:3]
    sol, _, _ = solve_sources(batch, x0, inst.truth.epoch[:3], inst.truth_nuisance())
    assert sol.status.tolist() == [OK, UNDERDETERMINED, OK]
    assert np.all(np.isnan(sol.cov[1]))
    np.testing.assert_array_equal(sol.x[1], x0[1])


# -- accumulation ---------------------------------------------------------------------


def _batch(inst, n_src=8):
    obs = inst.obs[inst.obs["source_id"] < n_src]
    return ObservationBatch.build(obs, inst.law, ids=np.arange(n_src))


def test_empty_batch_accumulates_zeros(inst):
    batch = ObservationBatch.build(np.zeros(0, OBS_DTYPE), inst.law, ids=np.zeros(0, np.int64))
    nu = inst.truth_nuisance()
    acc = accumulate_block_partials(batch, np.zeros((0, 5)), np.zeros(0), nu)
    zero = BlockPartials.zeros(nu.attitude.n_knots, nu.calibration.n_units)
    assert acc.identical(zero)
    assert all(p.n_obs == 0 for p in acc)


def test_single_observation_is_rank_one(inst):
    batch = _batch(inst, 1)
    one = ObservationBatch(batch.obs[:1], batch.geom.take([0]), batch.ids, batch.seg[:1])
    nu = inst.truth_nuisance()
    nu.glob = GlobalParams(2e-5)
    x = inst.truth.fit_matrix()[:1]
    acc = accumulate_block_partials(one, x, inst.truth.epoch[:1], nu)
    rows = model_rows(x, inst.truth.epoch[:1], one.geom, one.obs["calib_unit"], nu.attitude,
                      nu.calibration, nu.glob.g, True)
    w = one.weight[0]
    a = np.zeros(nu.attitude.n_knots)
    j = rows.att_index[0]
    a[[j, j + 1]] = rows.att_weight[0]
    c = np.zeros(nu.calibration.n_units)
    c[one.obs["calib_unit"][0]] = 1.0
    scale = w * max(np.max(a * a), 1.0)
    assert np.max(np.abs(acc.attitude.dense() - w * np.outer(a, a))) <= 1e-15 * scale
    assert np.max(np.abs(acc.calibration.matrix - w * np.outer(c, c))) <= 1e-15 * w
    dg = rows.d_global[0]
    assert abs(acc.glob.matrix[0, 0] - w * dg * dg) <= 1e-15 * w * dg * dg
    assert np.linalg.matrix_rank(acc.attitude.dense(), tol=1e-12 * scale) == 1


def test_batch_accumulation_equals_sequential_single_sums(inst):
    batch = _batch(inst)
    nu = inst.truth_nuisance()
    nu.attitude.coeffs = np.random.default_rng(1).normal(0, 1e-7, nu.attitude.n_knots)
    x = inst.truth.fit_matrix()[:8]
    ep = inst.truth.epoch[:8]
    acc = accumulate_block_partials(batch, x, ep, nu)
    total = BlockPartials.zeros(nu.attitude.n_knots, nu.calibration.n_units)
    for i in range(len(batch)):
        one = ObservationBatch(batch.obs[i:i + 1], batch.geom.take([i]), batch.ids,
                               batch.seg[i:i + 1])
        total = total + accumulate_block_partials(one, x, ep, nu)
    assert acc.identical(total)


# -- attitude, calibration, global blocks -------------------------------------------


def _attitude_system(n_knots, n_obs, seed, skip=()):
    rng = np.random.default_rng(seed)
    att = AttitudeModel(0.0, 1.0, np.zeros(n_knots))
    t = rng.uniform(0, n_knots - 1, n_obs)
    t = t[~np.isin(np.floor(t), list(skip)) & ~np.isin(np.floor(t) + 1, list(skip))]
    j, hat = att.basis(t)
    rows = ModelRows(np.zeros(t.size), None, j, -hat, rng.normal(0, 1e-4, t.size))
    acc = BlockPartials.zeros(n_knots, 2)
    r = rng.normal(0, 1e-8, t.size)
    w = rng.uniform(0.5, 2.0, t.size)
    accumulate_rows(acc, rows, r, w, rng.integers(0, 2, t.size))
    return acc


def test_attitude_zero_rhs():
    acc = _attitude_system(10, 200, 1)
    acc.attitude.rhs[:] = 0
    np.testing.assert_array_equal(attitude_update(acc.attitude).delta, 0.0)


def test_attitude_matches_dense_solve():
    p = _attitude_system(10, 200, 2).attitude
    step = attitude_update(p)
    dense = p.dense() + step.damping * np.eye(p.n)
    expected = np.linalg.solve(dense, p.rhs)
    np.testing.assert_allclose(step.delta, expected, rtol=1e-10, atol=0)
    undamped = np.linalg.solve(p.dense(), p.rhs)
    np.testing.assert_allclose(step.delta, undamped, rtol=1e-8)


def test_attitude_unconstrained_knots():
    p = _attitude_system(12, 400, 3, skip=(4, 5, 6)).attitude
    step = attitude_update(p)
    assert 5 in step.unconstrained.tolist()
    np.testing.assert_array_equal(step.delta[step.unconstrained], 0.0)
    assert np.all(np.isfinite(step.delta))


def test_attitude_needs_attitude_block():
    with pytest.raises(ValueError):
        attitude_update(PartialNormalEquations.zeros(BlockKind.CALIBRATION, 3))


def test_calibration_zero_rhs():
    p = PartialNormalEquations.zeros(BlockKind.CALIBRATION, 4)
    p.matrix[np.diag_indices(4)] = 10.0
    np.testing.assert_array_equal(calibration_update(p).delta, 0.0)


def test_calibration_constant_residual_unit():
    n_per = 25
    r_bar = 3e-9
    units = np.repeat(np.arange(4), n_per)
    r = np.where(units == 2, r_bar, 0.0)
    acc = BlockPartials.zeros(3, 4)
    rows = ModelRows(np.zeros(r.size), None, np.zeros(r.size, np.int64),
                     np.zeros((r.size, 2)), np.zeros(r.size))
    accumulate_rows(acc, rows, r, np.ones(r.size), units)
    delta = calibration_update(acc.calibration).delta
    expected = np.where(np.arange(4) == 2, r_bar, 0.0) - r_bar / 4
    np.testing.assert_allclose(delta, expected, rtol=1e-12, atol=1e-24)


def test_calibration_empty_units():
    p = PartialNormalEquations.zeros(BlockKind.CALIBRATION, 3)
    p.matrix[0, 0] = 1.0
    p.rhs[0] = 1.0
    step = calibration_update(p)
    assert step.empty_units.tolist() == [1, 2]
    with pytest.raises(SingularBlock):
        calibration_update(p, allow_empty=False)


def test_global_zero_rhs_and_singular():
    p = PartialNormalEquations.zeros(BlockKind.GLOBAL, 1)
    with pytest.raises(SingularBlock):
        global_update(p)
    p.matrix[0, 0] = 5.0
    assert global_update(p) == 0.0


def test_global_signal_recovered_in_one_update():
    inst = make_instance(60, short_law(2.0), seed=6, g=1e-4)
    nu = inst.truth_nuisance()
    nu.glob = GlobalParams(0.0)
    batch = ObservationBatch.build(inst.obs, inst.law, ids=inst.truth.source_id)
    acc = accumulate_block_partials(batch, inst.truth.fit_matrix(), inst.truth.epoch, nu)
    assert global_update(acc.glob) == pytest.approx(1e-4, rel=0.01)


# -- outer iteration and run -----------------------------------------------------------


def test_outer_iteration_fixed_point(inst):
    cfg = quick_config(attitude_knot_spacing=0.25)
    state = inst.truth_state(cfg)
    _, rec = outer_iteration(state, inst.data, cfg)
    assert rec.max_update < 1e-11
    assert rec.max_source_update < 1e-11 and abs(rec.global_update) < 1e-11 * 1e4


def test_converged_input_stops_after_one_iteration(inst):
    cfg = quick_config(attitude_knot_spacing=0.25)
    _, report = run_agis(cfg, inst.data, inst.truth_state(cfg))
    assert len(report.records) == 1
    assert report.reason == "update below tolerance"
    assert report.converged


@pytest.fixture(scope="module")
def zero_noise_run():
    inst = make_instance(200, short_law(2.0), seed=3)
    cfg = quick_config(attitude_knot_spacing=2.0, max_outer=200)
    state, report = run_agis(cfg, inst.data, inst.start_state(cfg))
    return inst, state, report


def test_zero_noise_run_converges(zero_noise_run):
    inst, state, report = zero_noise_run
    assert report.converged
    assert report.final_rms < 1e-10
    assert np.max(np.abs(source_errors(state.catalog, inst.truth))) < 1e-9


def test_source_block_never_raises_chi2(zero_noise_run):
    _, _, report = zero_noise_run
    for rec in report.records:
        assert rec.chi2_after_sources <= rec.chi2_before_sources * (1 + 1e-9)
        assert rec.attitude_chi2_decrease >= 0


def test_not_converged_is_reported(inst):
    cfg = quick_config(attitude_knot_spacing=0.25, max_outer=2)
    state, report = run_agis(cfg, inst.data, inst.start_state(cfg))
    assert not report.converged
    assert report.reason == "max_outer reached"
    with pytest.raises(NotConverged) as info:
        run_agis(cfg, inst.data, inst.start_state(cfg), strict=True)
    assert info.value.state is not None


def test_nan_state_aborts_iteration(inst):
    cfg = quick_config(attitude_knot_spacing=0.25)
    state = inst.truth_state(cfg)
    state.nuisance.attitude.coeffs[7] = np.nan
    with pytest.raises(NonFiniteInput):
        outer_iteration(state, inst.data, cfg)


def test_solver_config_validation():
    with pytest.raises(ConfigError):
        SolverConfig(max_outer=0)
    with pytest.raises(ConfigError):
        SolverConfig(primary_fraction=0.0)


def test_partition_arithmetic():
    jobs = partition(np.arange(10_000), 3000, 0)
    assert [j.hi - j.lo for j in jobs] == [3000, 3000, 3000, 1000]
    assert partition(np.zeros(0, np.int64), 3000, 0) == []


# -- frame alignment ------------------------------------------------------------------


def test_frame_align_identity(inst):
    att = AttitudeModel.covering(0.0, inst.law.mission_end, 1.0)
    cat, att2, rot = frame_align(inst.truth, att, inst.data.anchors, inst.law)
    assert np.max(np.abs(rot.orientation)) < 1e-12
    assert np.max(np.abs(rot.spin)) < 1e-12
    assert np.max(np.abs(source_errors(cat, inst.truth))) < 1e-12


def test_frame_align_removes_injected_rotation(inst):
    eps = np.array([0.0, 0.0, 10 * MAS])
    rotated = rotate_catalog(inst.truth, FrameRotation(-eps, np.zeros(3)))
    att = AttitudeModel.covering(0.0, inst.law.mission_end, 1.0)
    cat, _, rot = frame_align(rotated, att, inst.data.anchors, inst.law)
    # bounded by float64 resolution of an angle in [0, 2 pi): a few ulps, ~1e-6 mas
    floor = 4 * np.spacing(2 * np.pi)
    np.testing.assert_allclose(rot.orientation, eps, rtol=0, atol=floor)
    assert np.max(np.abs(source_errors(cat, inst.truth))) < floor


def test_frame_align_compensates_attitude(inst):
    rot = FrameRotation(np.array([1e-8, -2e-8, 3e-8]), np.array([1e-9, 0.0, -1e-9]))
    att = rotate_attitude(AttitudeModel.covering(0.0, inst.law.mission_end, 1.0), rot, inst.law,
                          inst.truth.epoch[0])
    assert np.max(np.abs(att.coeffs)) > 0
    assert np.max(np.abs(att.coeffs)) < 1e-7


def test_frame_align_two_anchors(inst):
    att = AttitudeModel.covering(0.0, inst.law.mission_end, 1.0)
    with pytest.raises(DegenerateAnchors):
        frame_align(inst.truth, att, inst.truth.subset([0, 1]), inst.law)


# -- secondary solve ---------------------------------------------------------------------


def test_secondary_matches_primary_source(inst):
    cfg = quick_config(attitude_knot_spacing=0.25)
    state = inst.start_state(cfg, att_sigma=0.0)
    state.nuisance = inst.truth_nuisance()
    ids = np.arange(10, 20)
    res = secondary_solve(ids, state, inst.data, batch_size=4)
    batch = ObservationBatch.build(inst.data.slice_range(10, 20), inst.law, ids=ids)
    sol, _, _ = solve_sources(batch, state.catalog.fit_matrix()[10:20], state.catalog.epoch[10:20],
                              state.nuisance)
    err = source_errors(res.catalog.subset(ids), state.catalog.with_fit_matrix(sol.x, ids).subset(ids))
    assert np.max(np.abs(err)) < 1e-10
    assert np.max(np.abs(source_errors(res.catalog.subset(ids), inst.truth.subset(ids)))) < 1e-9
    assert res.failures == []


def test_secondary_records_underdetermined_and_continues(inst):
    obs = inst.obs[~((inst.obs["source_id"] == 12) & (inst.obs["transit"] >= 3))]
    data = type(inst.data)(inst.law, obs, inst.truth.source_id, inst.data.anchors)
    cfg = quick_config(attitude_knot_spacing=0.25)
    state = inst.start_state(cfg, att_sigma=0.0)
    state.nuisance = inst.truth_nuisance()
    res = secondary_solve(np.arange(10, 20), state, data, batch_size=4)
    assert res.failures == [12]
    assert res.status[12] == UNDERDETERMINED
    assert np.sum(res.status[10:20] == OK) == 9
