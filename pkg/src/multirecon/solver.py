"""Regularised super-resolution reconstruction and the multi-weight sweep.

Minimises ``f(x) = sum_k 0.5 ||A_k x - y_k||^2 + w R(x)`` on an isotropic HR
grid. ``R`` is either the quadratic gradient energy (solved with conjugate
gradients on the normal equations) or a Huber-smoothed total variation
(gradient descent with Barzilai-Borwein trial steps and Armijo backtracking).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, GeometryError, InputError, ParameterError
from .forward import LRStack, StackOperator
from .volume import Grid, Volume

log = logging.getLogger(__name__)

REGULARIZERS = ("huber-tv", "tikhonov-gradient")
CONVENTIONS = ("lambda", "alpha")

MIALSRTK_LAMBDAS = (0.1, 0.75, 1.5, 3.0)
NIFTYMIC_ALPHAS = (0.01, 0.02, 0.05, 0.1)
DEFAULT_LAMBDA = 0.75
ALPHA_REF_SCALE = 0.05
REFERENCE_WEIGHTS = {"tikhonov-gradient": 0.05, "huber-tv": 0.003}
HUBER_DELTA_REL = 0.05


def _convention(name: str) -> str:
    key = name.lower().replace("-style", "").replace("_style", "")
    if key not in CONVENTIONS:
        raise ParameterError(f"unknown weight convention {name!r}")
    return key


@dataclass(frozen=True)
class ReconConfig:
    """Solver settings.

    ``weight_value`` is read according to ``weight_convention``: lambda-style
    weights act inversely (``w = w_ref * lambda_ref / lambda``), alpha-style
    weights directly (``w = alpha * w_ref / 0.05``, i.e. ``w = alpha`` for the
    quadratic regulariser). ``w_ref`` defaults per regulariser because total
    variation scales linearly with intensity while the data term scales
    quadratically.
    """

    regularizer: str = "huber-tv"
    weight_convention: str = "lambda"
    weight_value: float = DEFAULT_LAMBDA
    huber_delta: float | None = None  # None: HUBER_DELTA_REL x intensity sd of the initial estimate
    max_iters: int = 100
    tolerance: float = 1e-6
    hr_spacing: float | None = 1.1
    lambda_ref: float = DEFAULT_LAMBDA
    w_ref: float | None = None

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise ParameterError(f"unknown regularizer {self.regularizer!r}")
        object.__setattr__(self, "weight_convention", _convention(self.weight_convention))
        if not np.isfinite(self.weight_value) or self.weight_value <= 0:
            raise ParameterError(f"weight must be positive, got {self.weight_value}")
        if self.max_iters < 1 or self.tolerance < 0:
            raise ParameterError("max_iters must be >= 1 and tolerance >= 0")

    @property
    def weight(self) -> float:
        """Internal weight multiplying the regulariser."""
        return derived_weight(self.weight_convention, self.weight_value, self.lambda_ref, self.reference_weight)

    @property
    def reference_weight(self) -> float:
        return REFERENCE_WEIGHTS[self.regularizer] if self.w_ref is None else float(self.w_ref)

    def with_weight(self, value: float) -> "ReconConfig":
        return replace(self, weight_value=float(value))

    def to_dict(self) -> dict:
        return {
            "regularizer": self.regularizer,
            "weight_convention": self.weight_convention,
            "weight_value": self.weight_value,
            "derived_weight": self.weight,
            "huber_delta": self.huber_delta,
            "max_iters": self.max_iters,
            "tolerance": self.tolerance,
            "hr_spacing": self.hr_spacing,
            "lambda_ref": self.lambda_ref,
            "w_ref": self.reference_weight,
        }


def derived_weight(convention: str, value: float, lambda_ref: float = DEFAULT_LAMBDA, w_ref: float = 0.05) -> float:
    """Map a pipeline-style weight to the internal regulariser weight."""
    convention = _convention(convention)
    if value <= 0:
        raise ParameterError("weights must be positive")
    if convention == "alpha":
        return float(value * w_ref / ALPHA_REF_SCALE)
    return float(w_ref * lambda_ref / value)


@dataclass
class ReconResult:
    volume: Volume
    objective_trace: list[float]
    data_residual: float
    regularizer_value: float
    converged: bool
    weight: float
    config: ReconConfig | None = None
    iterations: int = 0
    huber_delta: float | None = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "weight_convention": self.config.weight_convention if self.config else None,
            "weight_value": self.config.weight_value if self.config else None,
            "derived_weight": self.weight,
            "regularizer": self.config.regularizer if self.config else None,
            "huber_delta": self.huber_delta,
            "iterations": self.iterations,
            "converged": self.converged,
            "data_residual": self.data_residual,
            "regularizer_value": self.regularizer_value,
            "objective_trace": list(self.objective_trace),
        }


# finite differences (forward, Neumann: last difference is zero)


def gradient(x: np.ndarray) -> np.ndarray:
    g = np.zeros((3,) + x.shape)
    g[0, :-1] = x[1:] - x[:-1]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    g[2, :, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    return g


def gradient_adjoint(g: np.ndarray) -> np.ndarray:
    out = np.zeros(g.shape[1:])
    out[:-1] -= g[0, :-1]
    out[1:] += g[0, :-1]
    out[:, :-1] -= g[1, :, :-1]
    out[:, 1:] += g[1, :, :-1]
    out[:, :, :-1] -= g[2, :, :, :-1]
    out[:, :, 1:] += g[2, :, :, :-1]
    return out


def laplacian(x: np.ndarray) -> np.ndarray:
    """``grad^T grad x``, positive semidefinite."""
    return gradient_adjoint(gradient(x))


def tv_statistic(x) -> float:
    """Mean isotropic gradient magnitude; lower means smoother."""
    data = x.data if isinstance(x, Volume) else np.asarray(x)
    return float(np.sqrt((gradient(data) ** 2).sum(axis=0)).mean())


class Regularizer:
    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class GradientEnergy(Regularizer):
    def value(self, x):
        return 0.5 * float((gradient(x) ** 2).sum())

    def grad(self, x):
        return laplacian(x)


class HuberTV(Regularizer):
    def __init__(self, delta: float):
        if delta <= 0:
            raise ParameterError("huber delta must be positive")
        self.delta = float(delta)

    def value(self, x):
        m = np.sqrt((gradient(x) ** 2).sum(axis=0))
        d = self.delta
        return float(np.where(m <= d, 0.5 * m * m / d, m - 0.5 * d).sum())

    def grad(self, x):
        g = gradient(x)
        m = np.sqrt((g**2).sum(axis=0))
        return gradient_adjoint(g / np.maximum(m, self.delta))


class _Problem:
    """Data term bookkeeping for a fixed set of stack operators."""

    def __init__(self, ops: list[StackOperator], ys: list[np.ndarray]):
        self.ops = ops
        self.ys = ys

    def forward(self, x):
        return [op.forward(x) for op in self.ops]

    def adjoint_sum(self, rs):
        out = None
        for op, r in zip(self.ops, rs):
            a = op.adjoint(r)
            out = a if out is None else out + a
        return out

    def residuals(self, x):
        return [ax - y for ax, y in zip(self.forward(x), self.ys)]

    @staticmethod
    def data_value(rs) -> float:
        return 0.5 * float(sum((r * r).sum() for r in rs))

    def initial_estimate(self) -> np.ndarray:
        num = self.adjoint_sum(self.ys)
        den = self.adjoint_sum([np.ones_like(y) for y in self.ys])
        out = np.zeros_like(num)
        ok = den > 1e-12
        out[ok] = num[ok] / den[ok]
        return out


def _check_finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {what}")
    return value


def _relative_decrease(prev: float, new: float) -> float:
    return (prev - new) / max(abs(prev), 1e-300)


def _solve_tikhonov(prob: _Problem, x0: np.ndarray, w: float, cfg: ReconConfig):
    b = prob.adjoint_sum(prob.ys)
    const = 0.5 * float(sum((y * y).sum() for y in prob.ys))

    def hess(v):
        return prob.adjoint_sum(prob.forward(v)) + w * laplacian(v)

    x = x0.copy()
    r = b - hess(x)
    p = r.copy()
    rr = float((r * r).sum())
    f = _check_finite(-0.5 * float((x * (b + r)).sum()) + const, "objective")
    trace = [f]
    converged = rr == 0.0
    it = 0
    while not converged and it < cfg.max_iters:
        hp = hess(p)
        php = float((p * hp).sum())
        if php <= 0:
            converged = True
            break
        step = rr / php
        x_new = x + step * p
        if (it + 1) % 50 == 0:
            r_new = b - hess(x_new)
        else:
            r_new = r - step * hp
        f_new = _check_finite(-0.5 * float((x_new * (b + r_new)).sum()) + const, "objective")
        if f_new > f:
            # round-off floor reached; keep the last accepted iterate
            converged = True
            break
        it += 1
        rel = _relative_decrease(f, f_new)
        x, r, f = x_new, r_new, f_new
        trace.append(f)
        rr_new = float((r * r).sum())
        if rel < cfg.tolerance or rr_new == 0.0:
            converged = True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, trace, converged, it


def _solve_gradient_descent(prob: _Problem, x0: np.ndarray, w: float, reg: Regularizer, cfg: ReconConfig):
    armijo = 1e-4
    x = x0.copy()
    rs = prob.residuals(x)
    f = _check_finite(prob.data_value(rs) + w * reg.value(x), "objective")
    g = prob.adjoint_sum(rs) + w * reg.grad(x)
    trace = [f]
    # conservative fallback step from a Lipschitz bound: ||A_k||^2 <= 1, Laplacian <= 12
    lip = len(prob.ops) + w * 12.0 / getattr(reg, "delta", 1.0)
    safe_step = 1.0 / lip
    step = safe_step
    failures = 0
    converged = False
    it = 0
    while it < cfg.max_iters:
        gg = float((g * g).sum())
        if gg == 0.0:
            converged = True
            break
        ag = prob.forward(g)
        t = step
        accepted = False
        for _ in range(40):
            x_try = x - t * g
            rs_try = [r - t * a for r, a in zip(rs, ag)]
            f_try = prob.data_value(rs_try) + w * reg.value(x_try)
            if np.isfinite(f_try) and f_try <= f - armijo * t * gg:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            failures += 1
            if failures >= 5:
                break
            step = safe_step
            continue
        failures = 0
        it += 1
        g_new = prob.adjoint_sum(rs_try) + w * reg.grad(x_try)
        s = x_try - x
        dy = g_new - g
        sy = float((s * dy).sum())
        yy = float((dy * dy).sum())
        step = sy / yy if sy > 0 and yy > 0 else safe_step
        rel = _relative_decrease(f, f_try)
        x, rs, g, f = x_try, rs_try, g_new, _check_finite(f_try, "objective")
        trace.append(f)
        if rel < cfg.tolerance:
            converged = True
            break
    return x, trace, converged, it


def hr_grid_for(stacks: list[LRStack], cfg: ReconConfig) -> Grid:
    """HR grid of the stacks, respaced to ``cfg.hr_spacing`` when that differs."""
    base = stacks[0].hr_grid
    if cfg.hr_spacing is None or np.allclose(base.spacing, cfg.hr_spacing, rtol=1e-9):
        return base
    h = float(cfg.hr_spacing)
    dims = tuple(max(1, int(round(f / h))) for f in base.fov)
    centre = base.affine[:3, :3] @ ((np.array(base.dims) - 1) / 2.0) + base.affine[:3, 3]
    rot = base.affine[:3, :3] / np.array(base.spacing)
    affine = np.eye(4)
    affine[:3, :3] = rot * h
    affine[:3, 3] = centre - affine[:3, :3] @ ((np.array(dims) - 1) / 2.0)
    return Grid(dims, (h, h, h), affine)


def build_operators(stacks: list[LRStack], transforms, hr: Grid) -> list[StackOperator]:
    if not stacks:
        raise InputError("at least one LR stack is required")
    if transforms is None:
        transforms = [s.model.motion for s in stacks]
    if len(transforms) != len(stacks):
        raise InputError("need one transform per stack")
    ops = []
    for s, t in zip(stacks, transforms):
        if isinstance(t, list):
            t = tuple(t)
        op = StackOperator(s.model.with_motion(t), hr)
        if not op.lr_grid.same_as(s.volume.grid):
            raise GeometryError("stack geometry is not derivable from the HR grid and model spacings")
        ops.append(op)
    return ops


def _solve(prob: _Problem, hr: Grid, cfg: ReconConfig, x0: np.ndarray) -> ReconResult:
    w = cfg.weight
    delta = None
    if cfg.regularizer == "tikhonov-gradient":
        reg: Regularizer = GradientEnergy()
        x, trace, converged, it = _solve_tikhonov(prob, x0, w, cfg)
    else:
        delta = cfg.huber_delta
        if delta is None:
            sd = float(x0.std())
            delta = HUBER_DELTA_REL * sd if sd > 0 else 1e-3
        reg = HuberTV(delta)
        x, trace, converged, it = _solve_gradient_descent(prob, x0, w, reg, cfg)
    rs = prob.residuals(x)
    data = _check_finite(prob.data_value(rs), "data residual")
    rv = _check_finite(reg.value(x), "regulariser")
    if not np.all(np.isfinite(x)):
        raise DivergenceError("reconstruction contains non-finite voxels")
    log.debug("recon %s w=%.4g iters=%d converged=%s f=%.6g", cfg.regularizer, w, it, converged, trace[-1])
    return ReconResult(
        volume=Volume(x, hr),
        objective_trace=trace,
        data_residual=data,
        regularizer_value=rv,
        converged=converged,
        weight=w,
        config=cfg,
        iterations=it,
        huber_delta=delta,
    )


def reconstruct(stacks: list[LRStack], transforms=None, cfg: ReconConfig | None = None) -> ReconResult:
    """Reconstruct one HR volume from ``stacks``.

    ``transforms`` gives the motion of each stack (a transform or a per-slice
    tuple); ``None`` uses the motion recorded in each stack's model.
    """
    cfg = cfg or ReconConfig()
    if not stacks:
        raise InputError("at least one LR stack is required")
    hr = hr_grid_for(stacks, cfg)
    ops = build_operators(stacks, transforms, hr)
    prob = _Problem(ops, [s.volume.data for s in stacks])
    return _solve(prob, hr, cfg, prob.initial_estimate())


def multi_reconstruct(
    stacks: list[LRStack], transforms, base_cfg: ReconConfig, weights
) -> list[tuple[float, ReconResult]]:
    """One reconstruction per weight (read in ``base_cfg``'s convention) on a shared HR grid.

    All weights are validated before any solve; an error in any solve aborts
    the whole sweep.
    """
    weights = [float(w) for w in weights]
    if not weights:
        raise InputError("weight list is empty")
    cfgs = [base_cfg.with_weight(w) for w in weights]
    if not stacks:
        raise InputError("at least one LR stack is required")
    hr = hr_grid_for(stacks, base_cfg)
    ops = build_operators(stacks, transforms, hr)
    prob = _Problem(ops, [s.volume.data for s in stacks])
    x0 = prob.initial_estimate()
    return [(w, _solve(prob, hr, c, x0)) for w, c in zip(weights, cfgs)]


def output_name(subject: str, convention: str, weight: float) -> str:
    """File name ``<subject>_rec-<convention><weight>.nii.gz``."""
    return f"{subject}_rec-{_convention(convention)}{weight:g}.nii.gz"
