import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from meshtrack.geometry import TriMesh
from meshtrack.phantom import PhantomSpec, make_scene

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_spec(**kw) -> PhantomSpec:
    """Coarse phantom that still covers the whole shell; fast enough for unit tests."""
    base = dict(subdivision=3, sax_dims=(32, 32, 32), sax_spacing=(2.5, 2.5, 2.5),
                lax_dims=(48, 48), lax_spacing=(1.5, 1.5), anchor="base")
    base.update(kw)
    return PhantomSpec(**base)


@pytest.fixture(scope="session")
def small_scene():
    return make_scene(small_spec())


def icosahedron() -> TriMesh:
    t = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return TriMesh(v / np.linalg.norm(v, axis=1, keepdims=True), f)


def subdivide(mesh: TriMesh) -> TriMesh:
    """Loop-style 1-to-4 split with midpoints pushed to the unit sphere."""
    v = list(mesh.vertices)
    mid = {}

    def m(a, b):
        key = (min(a, b), max(a, b))
        if key not in mid:
            p = (mesh.vertices[a] + mesh.vertices[b]) / 2
            v.append(p / np.linalg.norm(p))
            mid[key] = len(v) - 1
        return mid[key]

    faces = []
    for a, b, c in mesh.faces:
        ab, bc, ca = m(a, b), m(b, c), m(c, a)
        faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return TriMesh(np.array(v), np.array(faces))


def random_mesh(rng, n_vertices=30, n_faces=40, scale=5.0) -> TriMesh:
    v = rng.normal(scale=scale, size=(n_vertices, 3))
    faces = []
    while len(faces) < n_faces:
        f = rng.choice(n_vertices, 3, replace=False)
        faces.append(f)
    return TriMesh(v, np.array(faces))


def central_diff(f, x: np.ndarray, h: float, idx=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` along the flat indices ``idx`` (all if None)."""
    x = np.array(x, dtype=float)
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


ACCEPTANCE_LINES: dict[int, str] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        ACCEPTANCE_LINES[self.number] = f"criterion {self.number} [{status}] {self.title}: {self.detail}"
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c: ...``; set ``c.detail`` to the measured values."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
