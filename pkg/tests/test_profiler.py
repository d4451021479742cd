import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from llmsched.errors import RangeError, TrainingError
from llmsched.model import (
    ApplicationTemplate,
    DurationDistribution,
    DynamicStageSpec,
    JobInstance,
    JobTruth,
    StageKind,
    StageTemplate,
    TaskState,
)
from llmsched.profiler import (
    ApplicationProfile,
    CalibrationProfile,
    EstimationSession,
    calibrate,
    discretize,
    load_profile,
    profile_from_dict,
    profile_to_dict,
    save_profile,
    train_profile,
)
from llmsched.workload import TraceRecord

CAL = CalibrationProfile((20.0, 24.0, 27.0, 30.0))


class TestCalibration:
    def test_validation(self):
        with pytest.raises(RangeError):
            CalibrationProfile(())
        with pytest.raises(RangeError):
            CalibrationProfile((10.0, -1.0))
        with pytest.raises(RangeError):
            CalibrationProfile((10.0, 9.0))  # latency must not drop with batch

    def test_latency_lookup(self):
        assert CAL.max_batch == 4
        assert CAL.latency(1) == 20.0
        assert CAL.latency(4) == 30.0
        with pytest.raises(RangeError):
            CAL.latency(0)
        with pytest.raises(RangeError):
            CAL.latency(5)

    def test_rescale_frozen_value(self):
        # 10 s at batch 1 (20 ms/token) is 500 tokens; at batch 4 the same
        # tokens take 500 * 30 ms = 15 s
        cal = CalibrationProfile((20.0, 24.0, 27.0, 30.0))
        assert calibrate(10.0, 1, 4, cal) == pytest.approx(15.0)

    @given(
        st.floats(0.01, 1000.0),
        st.integers(1, 4),
        st.integers(1, 4),
    )
    def test_rescale_round_trip(self, d, a, b):
        assert calibrate(calibrate(d, a, b, CAL), b, a, CAL) == pytest.approx(
            d, rel=1e-9
        )


class TestDiscretize:
    def test_quantile_bins_hand_case(self):
        d = discretize([1.0, 2.0, 3.0, 4.0], max_bins=2)
        # edges [1, 2.5, 4]; top bin holds {3, 4} so its upper edge moves to
        # 2*3.5 - 2.5 = 4.5, making the midpoint equal the in-bin average
        assert d.bounds == ((1.0, 2.5), (2.5, 4.5))
        assert d.probs == (0.5, 0.5)

    def test_zero_state(self):
        d = discretize([0.0, 0.0, 5.0, 5.0, 5.0, 5.0], max_bins=3)
        assert d.bounds[0] == (0.0, 0.0)
        assert d.probs[0] == pytest.approx(2 / 6)

    def test_constant_samples_collapse(self):
        d = discretize([7.0] * 10, max_bins=6)
        assert d.bounds == ((7.0, 7.0),)
        assert d.probs == (1.0,)

    def test_top_state_midpoint_matches_in_bin_mean(self):
        rng = np.random.default_rng(4)
        x = rng.lognormal(1.0, 0.9, size=4000)
        d = discretize(x, max_bins=6)
        lo, hi = d.bounds[-1]
        members = x[x > d.bounds[-2][1]] if len(d.bounds) > 1 else x
        assert (lo + hi) / 2 == pytest.approx(members.mean(), rel=1e-6)

    def test_samples_land_in_covering_state(self):
        rng = np.random.default_rng(8)
        x = rng.lognormal(0.5, 0.7, size=500)
        d = discretize(x, max_bins=6)
        for v in x:
            i = d.state_index(v)
            lo, hi = d.bounds[i]
            # the top state may clamp values beyond its adjusted edge
            assert lo <= v or i == len(d.bounds) - 1
            assert v <= hi or i == len(d.bounds) - 1

    def test_errors(self):
        with pytest.raises(TrainingError):
            discretize([])
        with pytest.raises(RangeError):
            discretize([-1.0])
        with pytest.raises(RangeError):
            discretize([1.0], max_bins=0)
        with pytest.raises(RangeError):
            discretize([0.0, 1.0], max_bins=1)  # zero state eats the only bin

    @given(
        st.lists(st.floats(0.0, 1000.0), min_size=1, max_size=200),
        st.integers(1, 6),
    )
    @settings(max_examples=80, deadline=None)
    def test_probabilities_partition_samples(self, xs, bins):
        if any(x == 0 for x in xs) and bins == 1 and any(x > 0 for x in xs):
            return
        d = discretize(xs, max_bins=bins)
        assert sum(d.probs) == pytest.approx(1.0)
        assert len(d.bounds) <= bins
        for p in d.probs:
            assert p > 0


def serial_template():
    stages = {
        0: StageTemplate(0, StageKind.REGULAR, (), 1),
        1: StageTemplate(1, StageKind.LLM, (0,), 1),
    }
    return ApplicationTemplate(app_id="serial", stages=stages)


def serial_records(n=8):
    # d1 = 10 * d0: states perfectly correlated, guaranteed edge 0 -> 1
    return [
        TraceRecord(
            job_id=i,
            app_id="serial",
            arrival=float(i),
            stages=((0, True, float(i + 1)), (1, True, 10.0 * (i + 1))),
        )
        for i in range(n)
    ]


def dynamic_template():
    spec = DynamicStageSpec(candidates=(3, 4, 5), edges=((3, 4), (4, 5)))
    stages = {
        0: StageTemplate(0, StageKind.REGULAR, (), 1),
        1: StageTemplate(1, StageKind.LLM, (0,), 1),
        2: StageTemplate(2, StageKind.DYNAMIC, (1,), 1, dynamic=spec),
        6: StageTemplate(6, StageKind.REGULAR, (2,), 1),
    }
    candidates = {
        3: StageTemplate(3, StageKind.REGULAR, (), 1),
        4: StageTemplate(4, StageKind.REGULAR, (), 2),
        5: StageTemplate(5, StageKind.REGULAR, (), 1),
    }
    return ApplicationTemplate(app_id="dyn", stages=stages, candidate_stages=candidates)


def dyn_records():
    base = ((0, True, 1.0), (1, True, 2.0), (6, True, 1.0))
    return [
        TraceRecord(
            job_id=0, app_id="dyn", arrival=0.0,
            stages=base + ((3, True, 2.0), (4, True, 3.0)),
            dynamic=((2, (3, 4), ((3, 4),)),),
        ),
        TraceRecord(
            job_id=1, app_id="dyn", arrival=1.0,
            stages=base + ((3, True, 4.0),),
            dynamic=((2, (3,), ()),),
        ),
        TraceRecord(
            job_id=2, app_id="dyn", arrival=2.0,
            stages=base + ((4, True, 1.0), (5, True, 2.0)),
            dynamic=((2, (4, 5), ((4, 5),)),),
        ),
    ]


class TestTrainProfile:
    def test_requires_records(self):
        with pytest.raises(TrainingError):
            train_profile(serial_template(), [], CAL)

    def test_stage_distributions_and_mean(self):
        prof = train_profile(serial_template(), serial_records(), CAL, max_bins=2)
        assert set(prof.stage_dists) == {0, 1}
        assert sum(prof.stage_dists[0].probs) == pytest.approx(1.0)
        # serial critical path of record i is 11 * (i + 1)
        assert prof.mean_job_duration == pytest.approx(11.0 * 4.5)
        assert prof.calibration is CAL

    def test_learns_correlation_edge(self):
        prof = train_profile(serial_template(), serial_records(), CAL, max_bins=2)
        assert prof.bn is not None
        assert prof.bn.parents[1] == (0,)
        assert prof.uncertainty_flags == {0: True, 1: False}

    def test_single_stage_app_has_no_net(self):
        t = ApplicationTemplate(
            app_id="one", stages={0: StageTemplate(0, StageKind.LLM, (), 1)}
        )
        recs = [
            TraceRecord(job_id=i, app_id="one", arrival=0.0, stages=((0, True, float(i + 1)),))
            for i in range(6)
        ]
        prof = train_profile(t, recs, CAL)
        assert prof.bn is None
        assert prof.uncertainty_flags == {0: False}

    def test_records_filtered_by_app(self):
        mixed = serial_records() + [
            TraceRecord(job_id=99, app_id="other", arrival=0.0, stages=((0, True, 1e9),))
        ]
        prof = train_profile(serial_template(), mixed, CAL, max_bins=2)
        lo, hi = prof.stage_dists[0].support()
        assert hi < 1e6

    def test_dynamic_profile_hand_counts(self):
        prof = train_profile(dynamic_template(), dyn_records(), CAL)
        dp = prof.dynamic[2]
        assert dp.node_probs == {3: 2 / 3, 4: 2 / 3, 5: 1 / 3}
        assert dp.edge_probs == {(3, 4): 1 / 3, (4, 5): 1 / 3}
        # both endpoints co-realized exactly once per edge, each time linked
        assert dp.edge_cond_probs == {(3, 4): 1.0, (4, 5): 1.0}
        # realized spans: 2+3=5, 4, 1+2=3
        lo, hi = dp.makespan.support()
        assert lo <= 3.0 and hi >= 5.0
        assert dp.expected_span > 0

    def test_dynamic_candidate_never_seen(self):
        recs = [r for r in dyn_records() if 5 not in r.stage_durations]
        with pytest.raises(TrainingError):
            train_profile(dynamic_template(), recs, CAL)

    def test_expected_span_deterministic(self):
        a = train_profile(dynamic_template(), dyn_records(), CAL)
        b = train_profile(dynamic_template(), dyn_records(), CAL)
        assert a.dynamic[2].expected_span == b.dynamic[2].expected_span


def point_profile(template, means, calibration=CAL):
    """Profile with degenerate one-state distributions; bn-free."""
    dists = {sid: DurationDistribution.point(v) for sid, v in means.items()}
    return ApplicationProfile(
        app_id=template.app_id,
        stage_dists=dists,
        bn=None,
        dynamic={},
        mean_job_duration=0.0,
        calibration=calibration,
    )


def diamond_template():
    stages = {
        0: StageTemplate(0, StageKind.REGULAR, (), 1),
        1: StageTemplate(1, StageKind.LLM, (0,), 1),
        2: StageTemplate(2, StageKind.REGULAR, (0,), 1),
        3: StageTemplate(3, StageKind.REGULAR, (1, 2), 1),
    }
    return ApplicationTemplate(app_id="diamond", stages=stages)


def job_of(template, durations=None, job_id=0):
    durations = durations or {sid: 1.0 for sid in template.stages}
    return JobInstance(
        job_id=job_id,
        template=template,
        truth=JobTruth(durations=dict(durations)),
        arrival_time=0.0,
    )


class TestEstimationSession:
    def test_missing_profile(self):
        sess = EstimationSession({})
        with pytest.raises(TrainingError):
            sess.estimated_remaining_duration(job_of(diamond_template()), 0.0)

    def test_critical_path_composition(self):
        t = diamond_template()
        prof = point_profile(t, {0: 1.0, 1: 10.0, 2: 4.0, 3: 2.0})
        sess = EstimationSession({t.app_id: prof})
        j = job_of(t)
        sess.register_job(j)
        assert sess.estimated_remaining_duration(j, 0.0) == pytest.approx(13.0)
        lo, hi = sess.remaining_interval(j, 0.0)
        assert lo == pytest.approx(13.0) and hi == pytest.approx(13.0)

    def test_batch_hint_scales_llm_stages_only(self):
        t = diamond_template()
        prof = point_profile(t, {0: 1.0, 1: 10.0, 2: 4.0, 3: 2.0})
        sess = EstimationSession({t.app_id: prof})
        j = job_of(t)
        # factor 30/20 = 1.5 applies to stage 1 alone: 1 + 15 + 2
        assert sess.estimated_remaining_duration(j, 0.0, batch_hint=4) == pytest.approx(18.0)

    def test_batch_hint_clamped_to_calibration(self):
        t = diamond_template()
        prof = point_profile(t, {0: 1.0, 1: 10.0, 2: 4.0, 3: 2.0})
        sess = EstimationSession({t.app_id: prof})
        j = job_of(t)
        a = sess.estimated_remaining_duration(j, 0.0, batch_hint=99)
        b = sess.estimated_remaining_duration(j, 0.0, batch_hint=4)
        assert a == b

    def start_stage(self, j, sid, now):
        j.mark_running(sid)
        for task in j.stages[sid].tasks:
            task.state = TaskState.RUNNING
            task.start_time = now

    def test_settled_and_running_stages(self):
        t = diamond_template()
        prof = point_profile(t, {0: 1.0, 1: 10.0, 2: 4.0, 3: 2.0})
        sess = EstimationSession({t.app_id: prof})
        j = job_of(t, {0: 1.0, 1: 10.0, 2: 4.0, 3: 2.0})
        sess.register_job(j)
        self.start_stage(j, 0, 0.0)
        j.stages[0].tasks[0].state = TaskState.DONE
        j.complete_stage(0, 1.0, 1.0)
        assert sess.estimated_remaining_duration(j, 1.0) == pytest.approx(12.0)
        self.start_stage(j, 1, 1.0)
        self.start_stage(j, 2, 1.0)
        # at t = 7: stage 1 has 10 - 6 = 4 left, stage 2 is past its estimate
        assert sess.estimated_remaining_duration(j, 7.0) == pytest.approx(4.0 + 2.0)

    def test_overrun_running_stage_clamps_to_zero(self):
        t = serial_template()
        prof = point_profile(t, {0: 5.0, 1: 1.0})
        sess = EstimationSession({t.app_id: prof})
        j = job_of(t, {0: 100.0, 1: 1.0})
        self.start_stage(j, 0, 0.0)
        assert sess.estimated_remaining_duration(j, 50.0) == pytest.approx(1.0)

    def test_posterior_point_mass_on_observed_stage(self):
        t = serial_template()
        prof = train_profile(t, serial_records(), CAL, max_bins=2)
        sess = EstimationSession({t.app_id: prof})
        j = job_of(t, {0: 1.5, 1: 15.0})
        sess.register_job(j)
        sess.update_evidence(j, 0, 1.5)
        post0 = sess.posterior(j, 0)
        s = prof.stage_dists[0].state_index(1.5)
        assert post0.probs[s] == pytest.approx(1.0)

    def test_evidence_sharpens_downstream_posterior(self):
        t = serial_template()
        prof = train_profile(t, serial_records(), CAL, max_bins=2)
        sess = EstimationSession({t.app_id: prof})
        j = job_of(t, {0: 2.0, 1: 20.0})
        sess.register_job(j)
        prior_mean = sess.posterior(j, 1).mean()
        sess.update_evidence(j, 0, 2.0)  # low state; correlated low stage 1
        post = sess.posterior(j, 1)
        assert post.probs[0] > 0.8
        assert post.mean() < prior_mean
        assert sess.evidence(j) == {0: prof.stage_dists[0].state_index(2.0)}

    def test_estimate_tracks_posterior(self):
        t = serial_template()
        prof = train_profile(t, serial_records(), CAL, max_bins=2)
        sess = EstimationSession({t.app_id: prof})
        j = job_of(t, {0: 2.0, 1: 20.0})
        sess.register_job(j)
        before = sess.estimated_remaining_duration(j, 0.0)
        sess.update_evidence(j, 0, 2.0)
        after = sess.estimated_remaining_duration(j, 0.0)
        assert after < before

    def test_posterior_ablation_ignores_evidence(self):
        t = serial_template()
        prof = train_profile(t, serial_records(), CAL, max_bins=2)
        sess = EstimationSession({t.app_id: prof}, use_posteriors=False)
        j = job_of(t, {0: 2.0, 1: 20.0})
        sess.register_job(j)
        sess.update_evidence(j, 0, 2.0)
        assert sess.evidence(j) == {}
        assert sess.posterior(j, 1) is prof.stage_dists[1]

    def test_forget_job(self):
        t = serial_template()
        prof = train_profile(t, serial_records(), CAL, max_bins=2)
        sess = EstimationSession({t.app_id: prof})
        j = job_of(t, {0: 2.0, 1: 20.0})
        sess.register_job(j)
        sess.update_evidence(j, 0, 2.0)
        sess.forget_job(j)
        assert sess.evidence(j) == {}

    def test_interval_brackets_estimate(self):
        t = serial_template()
        prof = train_profile(t, serial_records(), CAL, max_bins=3)
        sess = EstimationSession({t.app_id: prof})
        for i in range(8):
            j = job_of(t, {0: 1.0, 1: 10.0}, job_id=i)
            sess.register_job(j)
            if i % 2:
                sess.update_evidence(j, 0, float(i + 1))
            lo, hi = sess.remaining_interval(j, 0.0)
            m = sess.estimated_remaining_duration(j, 0.0)
            assert lo <= m + 1e-9
            assert m <= hi + 1e-9

    def test_dynamic_stage_priced_at_expected_span(self):
        t = dynamic_template()
        prof = train_profile(t, dyn_records(), CAL)
        sess = EstimationSession({t.app_id: prof})
        j = job_of(t, {0: 1.0, 1: 2.0, 3: 2.0, 4: 3.0, 6: 1.0})
        sess.register_job(j)
        want = (
            prof.stage_dists[0].mean()
            + prof.stage_dists[1].mean()
            + prof.dynamic[2].expected_span
            + prof.stage_dists[6].mean()
        )
        assert sess.estimated_remaining_duration(j, 0.0) == pytest.approx(want)

    def test_dynamic_without_llm_candidates_not_batch_scaled(self):
        t = dynamic_template()
        prof = train_profile(t, dyn_records(), CAL)
        sess = EstimationSession({t.app_id: prof})
        j = job_of(t, {0: 1.0, 1: 2.0, 3: 2.0, 4: 3.0, 6: 1.0})
        base = sess.estimated_remaining_duration(j, 0.0)
        scaled = sess.estimated_remaining_duration(j, 0.0, batch_hint=4)
        # only LLM stage 1 grows by factor 1.5
        assert scaled - base == pytest.approx(0.5 * prof.stage_dists[1].mean())

    def test_mean_job_duration_passthrough(self):
        t = serial_template()
        prof = train_profile(t, serial_records(), CAL, max_bins=2)
        sess = EstimationSession({t.app_id: prof})
        assert sess.mean_job_duration("serial") == prof.mean_job_duration


class TestSerialization:
    def test_round_trip_trained_profile(self, tmp_path):
        prof = train_profile(serial_template(), serial_records(), CAL, max_bins=3)
        p = tmp_path / "serial.profile.json"
        save_profile(prof, str(p))
        back = load_profile(str(p))
        assert back.app_id == prof.app_id
        assert set(back.stage_dists) == set(prof.stage_dists)
        for sid in prof.stage_dists:
            assert back.stage_dists[sid].bounds == prof.stage_dists[sid].bounds
            assert back.stage_dists[sid].probs == pytest.approx(prof.stage_dists[sid].probs)
        assert back.mean_job_duration == pytest.approx(prof.mean_job_duration)
        assert back.calibration.latencies_ms == CAL.latencies_ms
        assert back.bn is not None and back.bn.parents == prof.bn.parents
        for v in prof.bn.variables:
            assert np.allclose(back.bn.cpts[v], prof.bn.cpts[v])

    def test_round_trip_dynamic_profile(self, tmp_path):
        prof = train_profile(dynamic_template(), dyn_records(), CAL)
        back = profile_from_dict(profile_to_dict(prof))
        dp, bp = prof.dynamic[2], back.dynamic[2]
        assert bp.node_probs == dp.node_probs
        assert bp.edge_probs == dp.edge_probs
        assert bp.edge_cond_probs == dp.edge_cond_probs
        assert bp.expected_span == pytest.approx(dp.expected_span)
        assert bp.makespan.bounds == dp.makespan.bounds

    def test_posterior_estimates_survive_round_trip(self, tmp_path):
        t = serial_template()
        prof = train_profile(t, serial_records(), CAL, max_bins=2)
        p = tmp_path / "p.json"
        save_profile(prof, str(p))
        back = load_profile(str(p))
        for profile in (prof, back):
            sess = EstimationSession({t.app_id: profile})
            j = job_of(t, {0: 2.0, 1: 20.0})
            sess.register_job(j)
            sess.update_evidence(j, 0, 2.0)
        a = EstimationSession({t.app_id: prof})
        b = EstimationSession({t.app_id: back})
        ja, jb = job_of(t, {0: 2.0, 1: 20.0}), job_of(t, {0: 2.0, 1: 20.0})
        a.update_evidence(ja, 0, 2.0)
        b.update_evidence(jb, 0, 2.0)
        assert a.estimated_remaining_duration(ja, 0.0) == pytest.approx(
            b.estimated_remaining_duration(jb, 0.0)
        )
