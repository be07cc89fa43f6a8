import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from meshtrack.geometry import GeometryError, ImagePlane, ImageVolume, PlaneFrame, TriMesh, VolumeGeometry
from meshtrack.losses import (WHD_ALPHA, WHD_EPS, LossReport, LossWeights, TrackingObjective, ViewTarget,
                              WeightedHausdorff, canonical_view, loss_shape, loss_sim, loss_smooth, mesh_predict,
                              uniform_laplacian, whd)
from meshtrack.motion import ControlGrid, MotionField, warp_volume
from meshtrack.phantom import displacement_function
from meshtrack.tracker import TrackConfig, build_objective

from conftest import central_diff, icosahedron, rel_err, subdivide

seeds = st.integers(0, 2**32 - 1)


def naive_whd(p, b, alpha=WHD_ALPHA, eps=WHD_EPS):
    """Double loop over pixels and boundary points."""
    nx, ny = p.shape
    ys = [(i, j) for i in range(nx) for j in range(ny) if b[i, j] >= 0.5]
    dmax = math.hypot(nx, ny)
    s = 0.0
    t1 = 0.0
    for i in range(nx):
        for j in range(ny):
            s += p[i, j]
            t1 += p[i, j] * min(math.hypot(i - y[0], j - y[1]) for y in ys)
    t1 /= s + eps
    t2 = 0.0
    for y in ys:
        acc = 0.0
        for i in range(nx):
            for j in range(ny):
                f = p[i, j] * math.hypot(i - y[0], j - y[1]) + (1 - p[i, j]) * dmax
                acc += (f + eps) ** alpha
        t2 += (acc / (nx * ny)) ** (1 / alpha)
    return t1 + t2 / len(ys)


def random_instance(rng, dims=None, density=0.3):
    dims = dims or tuple(rng.integers(3, 9, size=2))
    b = (rng.random(dims) < 0.15).astype(float)
    b.flat[rng.integers(b.size)] = 1.0
    p = rng.random(dims) * (rng.random(dims) < density)
    return p, b


class TestWHD:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_double_loop(self, seed):
        p, b = random_instance(np.random.default_rng(seed))
        assert whd(p, b)[0] == pytest.approx(naive_whd(p, b), rel=1e-9)

    def test_coincident_sets(self):
        b = np.zeros((12, 10))
        b[3, 2:8] = 1
        b[7, 4] = 1
        v, _ = whd(b.copy(), b)
        assert v <= 1e-6 * math.hypot(12, 10)

    def test_all_zero_prob(self):
        b = np.zeros((9, 7))
        b[4, 3] = 1
        b[1, 1] = 1
        v, _ = whd(np.zeros_like(b), b)
        # no mass: first term is zero and every generalised mean collapses to d_max (+eps)
        dmax = math.hypot(9, 7)
        assert v == pytest.approx(dmax + WHD_EPS, rel=1e-12)
        assert v == pytest.approx(naive_whd(np.zeros_like(b), b), rel=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        p, b = random_instance(rng, density=0.6)
        _, g = whd(p, b)
        fd = central_diff(lambda q: whd(q, b)[0], p, 1e-6)
        assert rel_err(g, fd) < 1e-4

    def test_support_restricts_gradient(self):
        rng = np.random.default_rng(3)
        p, b = random_instance(rng, dims=(8, 8))
        w = WeightedHausdorff(b)
        _, full = w(p)
        sup = np.array([0, 5, 17])
        _, part = w(p, support=sup)
        filled = np.unique(np.concatenate([sup, np.flatnonzero(p)]))
        np.testing.assert_allclose(part.ravel()[filled], full.ravel()[filled], rtol=1e-12, atol=1e-15)
        rest = np.setdiff1d(np.arange(p.size), filled)
        assert np.all(part.ravel()[rest] == 0)

    @given(seeds)
    def test_non_negative_and_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        p, b = random_instance(rng)
        w = WeightedHausdorff(b)
        v = w(p)[0]
        assert v >= 0
        w.Y = w.Y[rng.permutation(len(w.Y))]
        assert w(p)[0] == pytest.approx(v, rel=1e-12)

    def test_raising_adjacent_pixel_decreases(self):
        b = np.zeros((10, 10))
        b[5, 5] = 1
        b[5, 6] = 1
        p = np.zeros_like(b)
        p[5, 5] = 1.0
        before = whd(p, b)[0]
        p[5, 6] = 0.8
        assert whd(p, b)[0] < before

    def test_errors(self):
        with pytest.raises(ValueError):
            whd(np.zeros((4, 4)), np.zeros((4, 4)))
        b = np.zeros((4, 4))
        b[1, 1] = 1
        with pytest.raises(GeometryError):
            whd(np.zeros((4, 5)), b)

    def test_loss_shape_sums_views(self):
        rng = np.random.default_rng(4)
        maps, bounds = {}, {}
        for k in ("lax2", "sa", "lax1"):
            maps[k], bounds[k] = random_instance(rng, dims=(6, 6))
        total, grads, per = loss_shape(maps, bounds)
        assert list(per) == ["sa", "lax1", "lax2"]
        assert total == pytest.approx(sum(whd(maps[k], bounds[k])[0] for k in maps), rel=1e-14)
        with pytest.raises(ValueError):
            loss_shape({"sa": maps["sa"]}, bounds)


def vol(rng, dims=(5, 6, 4)):
    return VolumeGeometry(dims, (1.0, 1.5, 2.0), rng.normal(size=3), np.eye(3))


class TestSim:
    def test_identical(self):
        rng = np.random.default_rng(0)
        g = vol(rng)
        im = ImageVolume(g, rng.normal(size=g.dims))
        assert loss_sim(im, im, MotionField.zeros(g))[0] == 0

    def test_zero_vs_one(self):
        g = vol(np.random.default_rng(0))
        v, _ = loss_sim(ImageVolume(g, np.zeros(g.dims)), ImageVolume(g, np.ones(g.dims)), MotionField.zeros(g))
        assert v == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_per_voxel_accumulation(self, seed):
        rng = np.random.default_rng(seed)
        g = vol(rng)
        fixed = ImageVolume(g, rng.normal(size=g.dims))
        moving = ImageVolume(g, rng.normal(size=g.dims))
        f = MotionField(g, rng.normal(size=g.dims + (3,)))
        w = warp_volume(moving, f).data
        acc = 0.0
        for idx in np.ndindex(*g.dims):
            acc += (fixed.data[idx] - w[idx]) ** 2
        assert loss_sim(fixed, moving, f)[0] == pytest.approx(acc / w.size, rel=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        g = vol(rng, dims=(4, 5, 4))
        c = g.voxel_centers()
        fixed = ImageVolume(g, np.sin(c @ rng.normal(size=3) * 0.3))
        moving = ImageVolume(g, np.cos(c @ rng.normal(size=3) * 0.3))
        # voxel offsets with fractional parts in [0.1, 0.9] stay clear of trilinear kinks
        frac = rng.uniform(0.1, 0.9, size=g.dims + (3,)) * rng.choice([-1, 1], size=g.dims + (3,))
        disp = frac * g.spacing
        _, gr = loss_sim(fixed, moving, MotionField(g, disp))
        fd = central_diff(lambda d: loss_sim(fixed, moving, MotionField(g, d))[0], disp, 1e-5)
        assert rel_err(gr, fd) < 1e-3

    def test_geometry_mismatch(self):
        rng = np.random.default_rng(0)
        g, h = vol(rng), vol(rng)
        with pytest.raises(GeometryError):
            loss_sim(ImageVolume(g, np.zeros(g.dims)), ImageVolume(h, np.zeros(h.dims)), MotionField.zeros(g))


class TestMeshPredict:
    def test_examples(self):
        m = icosahedron()
        assert np.array_equal(mesh_predict(m, np.zeros((12, 3))).vertices, m.vertices)
        np.testing.assert_allclose(mesh_predict(m, np.tile([1.0, 2.0, 3.0], (12, 1))).vertices,
                                   m.vertices + [1, 2, 3], atol=1e-15)
        out = mesh_predict(m, 0.1 * m.vertices)
        np.testing.assert_allclose(out.vertices, 1.1 * m.vertices, atol=1e-15)
        assert np.array_equal(out.faces, m.faces)
        with pytest.raises(ValueError):
            mesh_predict(m, np.zeros((11, 3)))


def naive_smooth(mesh):
    nbr = [set() for _ in range(mesh.n_vertices)]
    for a, b, c in mesh.faces:
        for u, v in ((a, b), (b, c), (c, a)):
            nbr[u].add(v)
            nbr[v].add(u)
    tot = 0.0
    for i, ns in enumerate(nbr):
        lap = sum(mesh.vertices[i] - mesh.vertices[j] for j in ns) / len(ns)
        tot += float(np.linalg.norm(lap))
    return tot / mesh.n_vertices


class TestSmooth:
    def test_flat_grid_interior_is_zero(self):
        n = 5
        v = np.array([[i, j, 0.0] for i in range(n) for j in range(n)])
        f = []
        for i in range(n - 1):
            for j in range(n - 1):
                a, b, c, d = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
                f += [[a, b, c], [a, c, d], [d, c, b]]  # crossing diagonals make interior valence symmetric
        m = TriMesh(v, f)
        lv = uniform_laplacian(m) @ m.vertices
        centre = 2 * n + 2
        np.testing.assert_allclose(lv[centre], 0, atol=1e-15)

    def test_regular_tetrahedron(self):
        a = 2.0
        v = a / (2 * math.sqrt(2)) * np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float)
        m = TriMesh(v, [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
        assert loss_smooth(m)[0] == pytest.approx(naive_smooth(m), rel=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_naive_and_gradient(self, seed):
        rng = np.random.default_rng(seed)
        m = subdivide(icosahedron())
        m = m.with_vertices(m.vertices * 10 + rng.normal(size=m.vertices.shape))
        v, g = loss_smooth(m)
        assert v == pytest.approx(naive_smooth(m), rel=1e-12)
        fd = central_diff(lambda x: loss_smooth(m.with_vertices(x))[0], m.vertices, 1e-5)
        assert rel_err(g, fd) < 1e-4

    @given(seeds, st.floats(0.1, 10))
    def test_translation_and_scale(self, seed, s):
        rng = np.random.default_rng(seed)
        m = subdivide(icosahedron())
        m = m.with_vertices(m.vertices + rng.normal(scale=0.1, size=m.vertices.shape))
        base = loss_smooth(m)[0]
        t = rng.normal(scale=50, size=3)
        assert loss_smooth(m.with_vertices(m.vertices + t))[0] == pytest.approx(base, rel=1e-9)
        c = m.vertices.mean(0)
        assert loss_smooth(m.with_vertices(c + s * (m.vertices - c)))[0] == pytest.approx(s * base, rel=1e-9)

    def test_isolated_vertex(self):
        with pytest.raises(GeometryError):
            loss_smooth(TriMesh(np.zeros((4, 3)) + np.arange(4)[:, None], [[0, 1, 2]]))


def test_weights_validation():
    assert LossWeights() == LossWeights(300.0, 200.0, 3.0)
    with pytest.raises(ValueError):
        LossWeights(lam=-1)


def test_view_aliases():
    assert canonical_view("2ch") == "lax1" and canonical_view("4ch") == "lax2" and canonical_view("sa") == "sa"
    with pytest.raises(ValueError):
        canonical_view("3ch")


@pytest.fixture(scope="module")
def objective(small_scene):
    sc = small_scene
    return sc, build_objective(sc.mesh_0, sc.ed, sc.frame_t, TrackConfig())


class TestObjective:
    def test_total_identity(self, objective):
        _, obj = objective
        rng = np.random.default_rng(0)
        for _ in range(5):
            r, _ = obj.evaluate(rng.normal(scale=1e-3, size=obj.control.shape))
            w = obj.weights
            assert r.total == pytest.approx(r.shape + w.lam * r.sim + w.beta * r.smooth, rel=1e-10)
            assert r.shape == pytest.approx(sum(r.per_view.values()), rel=1e-12)

    def test_shape_only_when_unweighted(self, small_scene):
        sc = small_scene
        obj = build_objective(sc.mesh_0, sc.ed, sc.frame_t, TrackConfig(weights=LossWeights(0.0, 0.0)))
        r, _ = obj.evaluate(obj.control.zeros())
        assert r.total == r.shape

    def test_ground_truth_beats_identity(self, objective):
        sc, obj = objective
        gt = obj.control.params_from_function(displacement_function(sc.spec, sc.t))
        assert obj.evaluate(gt, with_grad=False)[0].total < obj.evaluate(obj.control.zeros(), with_grad=False)[0].total

    @pytest.mark.parametrize("seed", range(20))
    def test_end_to_end_directional_gradient(self, objective, seed):
        _, obj = objective
        rng = np.random.default_rng(seed)
        p = rng.normal(scale=2e-4, size=obj.control.shape)
        u = rng.normal(size=p.shape)
        u /= np.linalg.norm(u)
        _, g = obj.evaluate(p)
        h = 1e-6
        fd = (obj.evaluate(p + h * u, False)[0].total - obj.evaluate(p - h * u, False)[0].total) / (2 * h)
        assert abs(float(np.sum(g * u)) - fd) < 1e-3 * abs(fd)

    def test_report_dict(self):
        r = LossReport(1.0, 0.5, 0.1, 0.2, {"sa": 0.5})
        assert r.as_dict() == {"total": 1.0, "shape": 0.5, "sim": 0.1, "smooth": 0.2, "per_view": {"sa": 0.5}}
