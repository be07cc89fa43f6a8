"""Per-frame motion estimation by Adam on the control-grid parameters."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import GeometryError, TriMesh
from .losses import LossReport, LossWeights, TrackingObjective, ViewTarget, canonical_view, mesh_predict
from .motion import ControlGrid, MotionField, sample_at_vertices
from .phantom import FrameInputs
from .rasterizer import COMBINE_RULES

log = logging.getLogger(__name__)

CONVERGE_WINDOW = 10
CONVERGE_RTOL = 1e-6


class TrackingDiverged(RuntimeError):
    def __init__(self, message: str, last_report: LossReport | None, iteration: int):
        super().__init__(message)
        self.last_report = last_report
        self.iteration = iteration


@dataclass(frozen=True)
class TrackConfig:
    weights: LossWeights = LossWeights()
    control_spacing: int = 4
    iters: int = 500
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    views: tuple[str, ...] = ("sa", "lax1", "lax2")
    param_scale: float = 600.0  # mm of displacement per unit of control parameter
    init_noise: float = 0.0     # std of random initial parameters (units of param_scale)
    combine: str = "sum"        # splat combine rule inside the shape loss

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.combine not in COMBINE_RULES:
            raise ValueError(f"combine must be one of {COMBINE_RULES}, got {self.combine!r}")
        if self.control_spacing < 1:
            raise ValueError("control_spacing must be >= 1")
        views = tuple(canonical_view(v) for v in self.views)
        if not views:
            raise ValueError("at least one view is required")
        if "sa" not in views:
            raise ValueError("views must include 'sa'")
        if len(set(views)) != len(views):
            raise ValueError("duplicate views")
        object.__setattr__(self, "views", views)


@dataclass(eq=False)
class TrackResult:
    field: MotionField
    dv: np.ndarray
    mesh_t: TriMesh
    loss_history: list[LossReport]
    converged: bool
    params: np.ndarray
    best_iteration: int = -1  # iterate whose parameters were returned

    @property
    def initial(self) -> LossReport:
        return self.loss_history[0]

    @property
    def final(self) -> LossReport:
        return self.loss_history[self.best_iteration]


@dataclass(eq=False)
class FrameFailure:
    frame: int
    message: str
    last_report: LossReport | None = None


class Adam:
    def __init__(self, shape, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def build_objective(mesh_0: TriMesh, ed: FrameInputs, t_inputs: FrameInputs, cfg: TrackConfig) -> TrackingObjective:
    missing = [v for v in cfg.views if v not in t_inputs.boundaries]
    if missing:
        raise GeometryError(f"no boundary map for views {missing}")
    views = {v: ViewTarget(t_inputs.boundaries[v].frame, t_inputs.boundaries[v]) for v in cfg.views}
    control = ControlGrid(ed.sa.geometry, cfg.control_spacing, cfg.param_scale)
    return TrackingObjective(mesh_0, ed.sa, t_inputs.sa, views, control, cfg.weights, cfg.combine)


def _converged(history: list[LossReport]) -> bool:
    if len(history) <= CONVERGE_WINDOW:
        return False
    a, b = history[-1 - CONVERGE_WINDOW].total, history[-1].total
    return abs(a - b) <= CONVERGE_RTOL * max(abs(a), 1e-300)


def track_pair(mesh_0: TriMesh, ed: FrameInputs, t_inputs: FrameInputs, cfg: TrackConfig = TrackConfig(),
               init_params: np.ndarray | None = None, objective: TrackingObjective | None = None) -> TrackResult:
    """Estimate the ED-to-t displacement of every vertex of ``mesh_0``."""
    obj = build_objective(mesh_0, ed, t_inputs, cfg) if objective is None else objective
    if init_params is not None:
        params = np.array(init_params, dtype=float)
    else:
        params = obj.control.zeros()
        if cfg.init_noise > 0:
            params = np.random.default_rng(cfg.seed).normal(0.0, cfg.init_noise, params.shape)
    if params.shape != obj.control.shape:
        raise ValueError(f"initial parameters have shape {params.shape}, expected {obj.control.shape}")
    opt = Adam(params.shape, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    history: list[LossReport] = []
    # Adam does not descend monotonically, so the lowest-loss iterate is returned
    best_it, best_params = 0, params
    for it in range(cfg.iters + 1):
        report, grad = obj.evaluate(params, with_grad=it < cfg.iters)
        if not (np.isfinite(report.total) and (grad is None or np.all(np.isfinite(grad)))):
            last = history[-1] if history else None
            raise TrackingDiverged(f"non-finite loss at iteration {it}", last, it)
        history.append(report)
        if report.total < history[best_it].total:
            best_it, best_params = it, params
        if it % 50 == 0:
            log.debug("iter %d total %.6g shape %.4g sim %.4g smooth %.4g", it, report.total,
                      report.shape, report.sim, report.smooth)
        if grad is not None:
            params = opt.step(params, grad)
    field, dv = obj.displacement(best_params)
    return TrackResult(field, dv, mesh_predict(mesh_0, dv), history, _converged(history), best_params, best_it)


def track_sequence(mesh_0: TriMesh, ed: FrameInputs, frames: list[FrameInputs], cfg: TrackConfig = TrackConfig(),
                   warm_start: bool = False) -> list[TrackResult | FrameFailure]:
    """Track every frame against the ED frame; failures are reported per frame."""
    out: list[TrackResult | FrameFailure] = []
    prev = None
    for i, fr in enumerate(frames):
        try:
            res = track_pair(mesh_0, ed, fr, cfg, init_params=prev if warm_start else None)
        except (TrackingDiverged, GeometryError, ValueError) as exc:
            log.error("frame %d failed: %s", i, exc)
            out.append(FrameFailure(i, str(exc), getattr(exc, "last_report", None)))
            prev = None
            continue
        out.append(res)
        prev = res.params
    return out


def with_views(cfg: TrackConfig, views) -> TrackConfig:
    return replace(cfg, views=tuple(views))


def check_result(mesh_0: TriMesh, res: TrackResult) -> None:
    """Raise if ``res`` breaks vertex correspondence with ``mesh_0``."""
    if res.mesh_t.n_vertices != mesh_0.n_vertices or not np.array_equal(res.mesh_t.faces, mesh_0.faces):
        raise AssertionError("tracked mesh lost vertex correspondence")
    if not np.allclose(res.dv, sample_at_vertices(res.field, mesh_0), atol=1e-9):
        raise AssertionError("displacement does not match the field sampled at ED vertices")
