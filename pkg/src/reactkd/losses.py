"""Training objectives with analytic gradients.

Every loss returns a :class:`LossReport`.  Gradients are keyed by the name
of the differentiable input:

* ``"logits"`` -- student (or trained-model) logits, shape (C,)
* ``"node_features"`` -- student region-graph node features, shape (N, C)

Keys are shared across losses so :func:`total_loss` can sum them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .errors import ConfigError, DegenerateInputError, NotApplicableError, ShapeMismatchError
from .otgw import GwConfig, gw_discrepancy, gw_gradient_source, gw_objective
from .regiongraph import RegionGraph, cosine_matrix


@dataclass(frozen=True)
class LossReport:
    value: float
    components: dict = field(default_factory=dict)
    gradients: dict = field(default_factory=dict)
    converged: bool = True
    plan: np.ndarray = None  # GW coupling, when a GW term was solved

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise FloatingPointError(f"non-finite loss value {self.value}")

    def to_json(self) -> dict:
        comps = {k: (None if v is None else float(v)) for k, v in self.components.items()}
        return {"value": float(self.value), "components": comps, "converged": bool(self.converged)}


@dataclass(frozen=True)
class RgdWeights:
    lambda_node: float = 1.0
    lambda_edge: float = 1.0
    lambda_gw: float = 2.0

    def __post_init__(self):
        w = (self.lambda_node, self.lambda_edge, self.lambda_gw)
        if min(w) < 0 or max(w) == 0:
            raise ConfigError(f"RGD weights must be >= 0 and not all zero, got {w}")


@dataclass(frozen=True)
class TotalWeights:
    lambda_focal: float = 1.0
    lambda_logits: float = 1.0
    lambda_rgd: float = 1.0

    def __post_init__(self):
        w = (self.lambda_focal, self.lambda_logits, self.lambda_rgd)
        if min(w) < 0 or max(w) == 0:
            raise ConfigError(f"total-loss weights must be >= 0 and not all zero, got {w}")


@dataclass(frozen=True)
class FocalConfig:
    alpha: tuple = (1.5, 1.0, 2.0)
    gamma: float = 2.0

    def __post_init__(self):
        if min(self.alpha) < 0 or self.gamma < 0:
            raise ConfigError("focal alpha entries and gamma must be >= 0")


# ------------------------------------------------------------------- logits


@dataclass(frozen=True)
class LogitsPair:
    teacher: np.ndarray
    student: np.ndarray
    temperature: float = 4.0

    def __post_init__(self):
        if np.shape(self.teacher) != np.shape(self.student):
            raise ShapeMismatchError("teacher and student logits differ in length")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


def soft_predictions(z, tau: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax (max-subtracted)."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = np.asarray(z, dtype=np.float64) / tau
    e = np.exp(z - z.max())
    return e / e.sum()


def kd_loss(teacher, student=None, tau: float = 4.0) -> LossReport:
    """KL(softmax(teacher/tau) || softmax(student/tau)); gradient w.r.t. student logits.

    Accepts either a :class:`LogitsPair` or the two logit vectors and a
    temperature.  No tau**2 factor: the divergence is returned as is.
    """
    if isinstance(teacher, LogitsPair):
        teacher, student, tau = teacher.teacher, teacher.student, teacher.temperature
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.shape != student.shape:
        raise ShapeMismatchError(f"teacher {teacher.shape} and student {student.shape} logits differ")
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    log_p = log_softmax(teacher / tau)
    log_q = log_softmax(student / tau)
    p = np.exp(log_p)
    value = max(float(np.sum(p * (log_p - log_q))), 0.0)
    grad = (np.exp(log_q) - p) / tau
    return LossReport(value, {"kd": value}, {"logits": grad})


def focal_loss(logits, label: int, cfg: FocalConfig = FocalConfig()) -> LossReport:
    """``-alpha_y (1 - p_y)**gamma log p_y`` with ``p = softmax(logits)``.

    Differentiating through ``p_y`` gives::

        dL/dz = alpha_y [gamma (1-p_y)**(gamma-1) p_y log p_y - (1-p_y)**gamma] (e_y - p)
    """
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.size:
        raise ConfigError(f"label {label} outside 0..{z.size - 1}")
    if len(cfg.alpha) != z.size:
        raise ShapeMismatchError(f"{len(cfg.alpha)} class weights for {z.size} classes")
    log_p = log_softmax(z)
    p = np.exp(log_p)
    log_py = log_p[label]
    one_minus = -np.expm1(log_py)
    alpha, gamma = float(cfg.alpha[label]), float(cfg.gamma)
    modulating = one_minus**gamma if gamma > 0 else 1.0
    value = float(-alpha * modulating * log_py)

    if gamma > 0 and one_minus > 0:
        focus = gamma * one_minus ** (gamma - 1.0) * np.exp(log_py) * log_py
    else:
        focus = 0.0
    onehot = np.zeros_like(p)
    onehot[label] = 1.0
    grad = alpha * (focus - modulating) * (onehot - p)
    return LossReport(max(value, 0.0), {"focal": max(value, 0.0)}, {"logits": grad})


# ------------------------------------------------------------ region graphs


def _as_features(g) -> np.ndarray:
    if isinstance(g, RegionGraph):
        return g.features
    f = np.asarray(g, dtype=np.float64)
    return f[None, :] if f.ndim == 1 else f


def _unit_rows(f):
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("zero-norm node feature")
    return f / norms[:, None], norms


def _normalisation_vjp(unit, norms, grad_unit):
    """Pull a gradient on unit rows back to raw rows: (I - u u^T) g / |r|."""
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - radial * unit) / norms[:, None]


def _require_matched(fs, ft, what):
    if fs.shape[0] != ft.shape[0]:
        raise NotApplicableError(f"{what}: node counts differ ({fs.shape[0]} vs {ft.shape[0]})")


def node_loss(gs, gt) -> LossReport:
    """Mean squared distance between L2-normalised student and teacher node features."""
    fs, ft = _as_features(gs), _as_features(gt)
    _require_matched(fs, ft, "node_loss")
    if fs.shape != ft.shape:
        raise ShapeMismatchError(f"node features {fs.shape} vs {ft.shape}")
    us, ns = _unit_rows(fs)
    ut, _ = _unit_rows(ft)
    n = fs.shape[0]
    diff = us - ut
    value = float(np.sum(diff**2) / n)
    grad = _normalisation_vjp(us, ns, 2.0 * diff / n)
    return LossReport(value, {"node": value}, {"node_features": grad})


def _edges_vjp(fs, grad_s):
    """Gradient on raw node features of sum(grad_s * cos(fs))."""
    us, ns = _unit_rows(fs)
    g = 0.5 * (grad_s + grad_s.T)
    np.fill_diagonal(g, 0.0)  # diagonal is pinned to 1
    return _normalisation_vjp(us, ns, 2.0 * g @ us)


def edge_loss(gs, gt) -> LossReport:
    """Mean squared difference of the cosine-similarity matrices."""
    fs, ft = _as_features(gs), _as_features(gt)
    _require_matched(fs, ft, "edge_loss")
    S_s, S_t = cosine_matrix(fs), cosine_matrix(ft)
    n = fs.shape[0]
    diff = S_s - S_t
    value = float(np.sum(diff**2) / n**2)
    grad = _edges_vjp(fs, 2.0 * diff / n**2)
    return LossReport(value, {"edge": value}, {"node_features": grad})


def gw_term(gs, gt, cfg: GwConfig = GwConfig(), plan=None) -> LossReport:
    """GW discrepancy between the two graphs' similarity matrices.

    The gradient treats the optimal plan as fixed (envelope theorem).  Pass
    ``plan`` to evaluate the objective at a frozen coupling instead of solving.
    """
    fs, ft = _as_features(gs), _as_features(gt)
    S_s, S_t = cosine_matrix(fs), cosine_matrix(ft)
    converged = True
    if plan is None:
        value, tp = gw_discrepancy(S_s, S_t, cfg=cfg)
        pi, converged = tp.matrix, tp.converged
    else:
        pi = plan.matrix if hasattr(plan, "matrix") else np.asarray(plan, dtype=np.float64)
        value = gw_objective(S_s, S_t, pi)
    grad = _edges_vjp(fs, gw_gradient_source(S_s, S_t, pi))
    return LossReport(float(value), {"gw": float(value)}, {"node_features": grad}, converged, pi)


def rgd_loss(gs, gt, w: RgdWeights = RgdWeights(), gw_cfg: GwConfig = GwConfig(), plan=None) -> LossReport:
    """Weighted node + edge + GW distillation loss.

    When node counts differ, node and edge terms are reported as ``None``
    and only the GW term contributes.
    """
    fs, ft = _as_features(gs), _as_features(gt)
    matched = fs.shape[0] == ft.shape[0]
    if not matched and w.lambda_gw == 0:
        raise ConfigError("graphs have different node counts and lambda_gw = 0: no usable term")

    value = 0.0
    grad = np.zeros_like(fs)
    components = {"node": None, "edge": None, "gw": None}
    converged = True
    gw_plan = None
    if matched:
        node = node_loss(fs, ft)
        edge = edge_loss(fs, ft)
        components["node"], components["edge"] = node.value, edge.value
        value += w.lambda_node * node.value + w.lambda_edge * edge.value
        grad += w.lambda_node * node.gradients["node_features"] + w.lambda_edge * edge.gradients["node_features"]
    if w.lambda_gw > 0 or not matched:
        gw = gw_term(fs, ft, gw_cfg, plan)
        components["gw"] = gw.value
        value += w.lambda_gw * gw.value
        grad += w.lambda_gw * gw.gradients["node_features"]
        converged, gw_plan = gw.converged, gw.plan
    components["gw_only"] = 0.0 if matched else 1.0
    return LossReport(float(value), components, {"node_features": grad}, converged, gw_plan)


def rgd_value_from_components(components: dict, w: RgdWeights) -> float:
    total = 0.0
    for key, lam in (("node", w.lambda_node), ("edge", w.lambda_edge), ("gw", w.lambda_gw)):
        if components.get(key) is not None:
            total += lam * components[key]
    return total


# --------------------------------------------------------------------- total


def total_loss(focal: LossReport, kd: LossReport, rgd: LossReport, w: TotalWeights = TotalWeights()) -> LossReport:
    """Weighted sum of the three reports; gradients merged per input key."""
    parts = (("focal", focal, w.lambda_focal), ("kd", kd, w.lambda_logits), ("rgd", rgd, w.lambda_rgd))
    value = 0.0
    gradients: dict = {}
    for _, report, lam in parts:
        value += lam * report.value
        for key, g in report.gradients.items():
            g = lam * np.asarray(g, dtype=np.float64)
            if key in gradients:
                if gradients[key].shape != g.shape:
                    raise ShapeMismatchError(f"gradient {key!r}: shapes {gradients[key].shape} and {g.shape}")
                gradients[key] = gradients[key] + g
            else:
                gradients[key] = g
    components = {name: report.value for name, report, _ in parts}
    converged = all(r.converged for _, r, _ in parts)
    return LossReport(float(value), components, gradients, converged)


def total_value_from_components(components: dict, w: TotalWeights) -> float:
    return w.lambda_focal * components["focal"] + w.lambda_logits * components["kd"] + w.lambda_rgd * components["rgd"]
