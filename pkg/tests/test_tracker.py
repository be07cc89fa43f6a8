import numpy as np
import pytest

from meshtrack.losses import LossReport
from meshtrack.motion import sample_at_vertices
from meshtrack.phantom import FrameInputs
from meshtrack.tracker import (Adam, FrameFailure, TrackConfig, TrackingDiverged, TrackResult, build_objective,
                               check_result, track_pair, track_sequence, with_views)

FAST = TrackConfig(iters=15)


@pytest.fixture(scope="module")
def result(small_scene):
    sc = small_scene
    return track_pair(sc.mesh_0, sc.ed, sc.frame_t, FAST)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(iters=0), dict(lr=0.0), dict(views=("lax1",)), dict(views=()),
                                    dict(views=("sa", "sa")), dict(views=("sa", "3ch")), dict(combine="mean"),
                                    dict(control_spacing=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrackConfig(**kw)

    def test_defaults_and_aliases(self):
        cfg = TrackConfig()
        assert (cfg.iters, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (500, 1e-4, 0.9, 0.999, 1e-8)
        assert cfg.weights.lam == 300 and cfg.weights.beta == 200 and cfg.weights.tau == 3
        assert with_views(cfg, ["sa", "2ch", "4ch"]).views == ("sa", "lax1", "lax2")


class TestAdam:
    def test_first_step_is_signed_lr(self):
        opt = Adam((3,), lr=0.1)
        out = opt.step(np.zeros(3), np.array([2.0, -0.5, 1e-3]))
        np.testing.assert_allclose(out, [-0.1, 0.1, -0.1], rtol=1e-4)

    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(0)
        opt = Adam((4,), lr=0.01)
        x = rng.normal(size=4)
        m = v = np.zeros(4)
        ref = x.copy()
        for t in range(1, 30):
            g = rng.normal(size=4)
            x = opt.step(x, g)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(x, ref, rtol=1e-12)

    def test_minimises_quadratic(self):
        opt = Adam((2,), lr=0.05)
        x = np.array([3.0, -2.0])
        for _ in range(2000):
            x = opt.step(x, 2 * x)
        assert np.abs(x).max() < 1e-2


class TestTrackPair:
    def test_invariants(self, small_scene, result):
        sc = small_scene
        check_result(sc.mesh_0, result)
        assert np.array_equal(result.mesh_t.faces, sc.mesh_0.faces)
        np.testing.assert_allclose(result.dv, sample_at_vertices(result.field, sc.mesh_0), atol=1e-9)
        np.testing.assert_allclose(result.mesh_t.vertices, sc.mesh_0.vertices + result.dv, atol=1e-12)
        assert len(result.loss_history) == FAST.iters + 1
        assert result.final.total < result.initial.total
        assert result.final is result.loss_history[result.best_iteration]

    def test_moves_towards_ground_truth(self, small_scene, result):
        err0 = np.linalg.norm(small_scene.dv, axis=1).mean()
        err = np.linalg.norm(result.dv - small_scene.dv, axis=1).mean()
        assert err < err0

    def test_deterministic(self, small_scene, result):
        sc = small_scene
        again = track_pair(sc.mesh_0, sc.ed, sc.frame_t, FAST)
        assert np.array_equal(again.dv, result.dv) and np.array_equal(again.params, result.params)
        assert [r.total for r in again.loss_history] == [r.total for r in result.loss_history]

    def test_init_noise_uses_seed(self, small_scene):
        sc = small_scene
        cfg = TrackConfig(iters=1, init_noise=1e-3)
        a = track_pair(sc.mesh_0, sc.ed, sc.frame_t, cfg)
        b = track_pair(sc.mesh_0, sc.ed, sc.frame_t, cfg)
        c = track_pair(sc.mesh_0, sc.ed, sc.frame_t, TrackConfig(iters=1, init_noise=1e-3, seed=1))
        assert a.initial.total == b.initial.total != c.initial.total

    def test_bad_init_shape(self, small_scene):
        sc = small_scene
        with pytest.raises(ValueError):
            track_pair(sc.mesh_0, sc.ed, sc.frame_t, FAST, init_params=np.zeros((2, 2, 2, 3)))

    def test_divergence_reports_last(self, small_scene):
        sc = small_scene
        obj = build_objective(sc.mesh_0, sc.ed, sc.frame_t, FAST)
        real = obj.evaluate
        calls = []

        def flaky(params, with_grad=True):
            calls.append(1)
            r, g = real(params, with_grad)
            if len(calls) == 3:
                r = LossReport(float("nan"), r.shape, r.sim, r.smooth, r.per_view)
            return r, g

        obj.evaluate = flaky
        with pytest.raises(TrackingDiverged) as info:
            track_pair(sc.mesh_0, sc.ed, sc.frame_t, FAST, objective=obj)
        assert info.value.iteration == 2 and info.value.last_report is not None

    def test_views_subset(self, small_scene):
        sc = small_scene
        res = track_pair(sc.mesh_0, sc.ed, sc.frame_t, TrackConfig(iters=2, views=("sa",)))
        assert set(res.final.per_view) == {"sa"}


class TestSequence:
    def test_single_frame_equals_pair(self, small_scene, result):
        sc = small_scene
        (seq,) = track_sequence(sc.mesh_0, sc.ed, [sc.frame_t], FAST)
        assert np.array_equal(seq.dv, result.dv)

    def test_failure_isolated(self, small_scene):
        sc = small_scene
        broken = FrameInputs(sc.frame_t.sa, sc.frame_t.planes, {"sa": sc.frame_t.boundaries["sa"]})
        out = track_sequence(sc.mesh_0, sc.ed, [broken, sc.frame_t], TrackConfig(iters=2))
        assert isinstance(out[0], FrameFailure) and out[0].frame == 0
        assert isinstance(out[1], TrackResult)

    def test_warm_start_chains_params(self, small_scene):
        sc = small_scene
        cfg = TrackConfig(iters=3)
        cold = track_sequence(sc.mesh_0, sc.ed, [sc.frame_t, sc.frame_t], cfg)
        warm = track_sequence(sc.mesh_0, sc.ed, [sc.frame_t, sc.frame_t], cfg, warm_start=True)
        assert np.array_equal(cold[0].dv, warm[0].dv)
        assert np.array_equal(cold[0].dv, cold[1].dv)
        ref = track_pair(sc.mesh_0, sc.ed, sc.frame_t, cfg, init_params=cold[0].params)
        assert np.array_equal(warm[1].dv, ref.dv)
        for r in warm:
            assert r.mesh_t.n_vertices == sc.mesh_0.n_vertices and np.array_equal(r.mesh_t.faces, sc.mesh_0.faces)
