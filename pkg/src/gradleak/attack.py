"""Reconstruction attacks against a captured gradient bundle.

Three attacks live here:

* `fc_analytic_reconstruct`: closed-form recovery of a biased dense layer's
  input as the ratio of a weight-gradient row to its bias-gradient entry.
* `dlg_attack`: the iterative gradient-matching attack. A virtual image and
  virtual label logits start as N(0, 1) noise; each iteration computes the
  gradient the model *would* have produced for them, measures the squared
  distance to the captured gradient, and moves both virtual tensors to shrink
  it. The default update is plain fixed-step descent on the distance's own
  gradient, which differentiates through the inner gradient computation
  (hence the second-order machinery in `graph`). Because the distance's
  curvature spans many orders of magnitude on CNNs, there is also a damped
  least-squares update (`optimizer="gauss_newton"`) that reaches pixel-exact
  reconstructions in tens of iterations where fixed-step descent stalls.
* `improved_dlg`: same loop with an extra mean-anchoring penalty that pulls
  pixels toward the image's running mean, damping leftover noise pixels in
  flat, light regions.

`label_from_gradient_sign` reads the victim's label straight off the final
bias gradient: under softmax cross-entropy with batch size 1 the true class
is the only strictly negative entry.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .errors import (
    AmbiguityError,
    BiasGradientVanishesError,
    ContractError,
    DivergenceError,
    IncompatibilityError,
    ShapeError,
)
from .graph import ExprGraph, NodeId, grad, meta_grad
from .flsim import GradientBundle
from .metrics import ImagePair, mse_255, mse_unit
from .models import Dense, ModelParams, ModelSpec, build_logits
from .tensor import SeedRng, Tensor, as_array

VARIANTS = ("baseline", "improved")
OPTIMIZERS = ("gd", "gauss_newton")

# invented plumbing: fail fast instead of emitting NaN images
_DIVERGENCE_FACTOR = 1e6
_DIVERGENCE_FLOOR = 1e-12
_MAX_HALVINGS_PER_STEP = 60

# gauss_newton internals
_GN_FD_STEP = 1e-6
_GN_DAMPING_SEED = 1e-3      # initial mu = this times max(diag(J^T J))
_GN_DAMPING_MIN = 1e-14
_GN_MAX_REJECTS_PER_STEP = 25
_GN_STEP_CAP = 10.0          # reject steps larger than this per coordinate
_GN_FREEZE_DISTANCE = 1e-14  # below this the step is numerical noise


@dataclass(frozen=True)
class VirtualSample:
    """The attacker's trainable stand-ins: image pixels and label logits."""

    x_virtual: Tensor
    y_virtual: Tensor


@dataclass(frozen=True)
class AttackConfig:
    eta: float = 1.0
    iterations: int = 200
    seed: int = 0
    variant: str = "baseline"
    lambda_mean: float = 0.01
    checkpoints: tuple[int, ...] = (20, 40, 50, 80, 200)
    clamp_output: bool = True
    halve_on_increase: bool = False
    optimizer: str = "gd"

    def __post_init__(self):
        if self.eta <= 0:
            raise ContractError(f"eta must be positive, got {self.eta}")
        if self.iterations < 1:
            raise ContractError(f"iterations must be >= 1, got {self.iterations}")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(
                f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}"
            )
        if self.lambda_mean < 0:
            raise ContractError(f"lambda_mean must be >= 0, got {self.lambda_mean}")
        cps = tuple(int(c) for c in self.checkpoints)
        if sorted(set(cps)) != list(cps):
            raise ContractError(f"checkpoints must be sorted and unique, got {cps}")
        if cps and (cps[0] < 1 or cps[-1] > self.iterations):
            raise ContractError(
                f"checkpoints {cps} fall outside [1, {self.iterations}]"
            )
        object.__setattr__(self, "checkpoints", cps)


@dataclass(frozen=True)
class TraceRecord:
    """State after `iteration` update steps. `step_events` counts step-size
    control events so far: halvings in gd mode, damping raises in
    gauss_newton mode."""

    iteration: int
    distance: float
    mse_255: float | None
    mse_raw: float | None
    snapshot: Tensor
    step_events: int


@dataclass(frozen=True)
class AttackTrace:
    records: tuple[TraceRecord, ...]

    def distances(self) -> list[float]:
        return [r.distance for r in self.records]

    def mses(self) -> list[float | None]:
        return [r.mse_255 for r in self.records]


def gradient_distance(g: ExprGraph, virtual_grads: Mapping[str, NodeId],
                      true_bundle: GradientBundle) -> NodeId:
    """Append sum of squared element-wise gradient differences to g.

    `virtual_grads` maps tensor names to gradient nodes already in the graph;
    the captured gradients enter as constants. The resulting scalar node is
    designated as the graph output and returned.
    """
    if set(virtual_grads) != set(true_bundle.names()):
        raise IncompatibilityError(
            f"gradient_distance: tensor names differ "
            f"({sorted(virtual_grads)} vs {sorted(true_bundle.names())})"
        )
    total: NodeId | None = None
    for name, tensor in true_bundle.tensors:
        vnode = virtual_grads[name]
        if g.shape_of(vnode) != tensor.shape:
            raise IncompatibilityError(
                f"gradient_distance: tensor {name!r} has graph shape "
                f"{g.shape_of(vnode)} but bundle shape {tensor.shape}"
            )
        term = g.sq_diff_sum(vnode, g.constant(tensor))
        total = term if total is None else g.add(total, term)
    return g.set_output(total)


def bundle_sq_distance(a: GradientBundle, b: GradientBundle) -> float:
    """Eager sum of squared differences between two bundles' tensors."""
    if a.names() != b.names():
        raise IncompatibilityError("bundle_sq_distance: tensor names differ")
    total = 0.0
    for (name, ta), (_, tb) in zip(a.tensors, b.tensors):
        if ta.shape != tb.shape:
            raise IncompatibilityError(f"bundle_sq_distance: tensor {name!r} shapes differ")
        d = ta.array - tb.array
        total += float((d * d).sum())
    return total


def mean_anchor_penalty(g: ExprGraph, x: NodeId, weight: float) -> NodeId:
    """weight * (1/P) * sum((x - mean(x))^2), with the mean kept inside the
    graph so its dependence on x enters the derivative in full."""
    pixels = 1
    for d in g.shape_of(x):
        pixels *= d
    mean = g.scale(g.sum_all(x), 1.0 / pixels)
    centered = g.sub(x, g.fill(mean, g.shape_of(x)))
    return g.scale(g.sum_all(g.mul(centered, centered)), weight / pixels)


def fc_analytic_reconstruct(grad_weight, grad_bias, *, tol: float = 1e-12) -> Tensor:
    """Recover a biased dense layer's input from its gradient pair.

    For any row r, grad_weight[r] = grad_bias[r] * input, so the input is the
    ratio; the row with the largest |bias gradient| is used for stability.
    """
    gw = as_array(grad_weight)
    gb = as_array(grad_bias)
    if gw.ndim != 2 or gb.ndim != 1 or gw.shape[0] != gb.shape[0]:
        raise ShapeError(
            f"fc_analytic_reconstruct: weight gradient {gw.shape} and bias gradient "
            f"{gb.shape} do not pair up"
        )
    row = int(np.argmax(np.abs(gb)))
    if abs(gb[row]) <= tol:
        raise BiasGradientVanishesError(
            f"all bias-gradient entries are within {tol} of zero"
        )
    return Tensor(gw[row] / gb[row])


def fc_reconstruction_spread(grad_weight, grad_bias, *, tol: float = 1e-12) -> float:
    """Diagnostic: worst disagreement between the per-row reconstructions.

    Near zero for a consistent gradient pair; a large spread means the bundle
    was not produced by a single forward/backward pass of this layer.
    """
    gw = as_array(grad_weight)
    gb = as_array(grad_bias)
    best = fc_analytic_reconstruct(gw, gb, tol=tol).array
    rows = np.nonzero(np.abs(gb) > tol)[0]
    spread = 0.0
    for r in rows:
        spread = max(spread, float(np.max(np.abs(gw[r] / gb[r] - best))))
    return spread


def label_from_gradient_sign(target: GradientBundle, spec: ModelSpec) -> int:
    """Class index of the unique negative final-layer bias-gradient entry."""
    if target.digest != spec.digest:
        raise IncompatibilityError(
            f"label_from_gradient_sign: bundle digest {target.digest:#018x} does not "
            f"match spec digest {spec.digest:#018x}"
        )
    name, layer, _ = spec.param_layers()[-1]
    if not isinstance(layer, Dense) or not layer.biased:
        raise ContractError("label_from_gradient_sign: final layer must be dense with bias")
    gb = target.get(f"{name}.B").array
    idx = int(np.argmin(gb))
    if gb[idx] >= 0:
        raise AmbiguityError("no strictly negative bias-gradient entry; cannot infer label")
    return idx


def infer_label_from_bundle(target: GradientBundle) -> int:
    """Label inference without the model spec: the final dense layer is the
    last '<name>.B' tensor whose sibling '<name>.W' is a matching matrix."""
    for name in reversed(target.names()):
        if not name.endswith(".B"):
            continue
        layer = name[:-2]
        gb = target.get(name)
        try:
            gw = target.get(f"{layer}.W")
        except KeyError:
            continue
        if gb.ndim == 1 and gw.ndim == 2 and gw.shape[0] == gb.shape[0]:
            idx = int(np.argmin(gb.array))
            if gb.array[idx] >= 0:
                raise AmbiguityError(
                    "no strictly negative bias-gradient entry; cannot infer label"
                )
            return idx
    raise ContractError("bundle has no biased dense layer to infer a label from")


def _check_compatible(spec: ModelSpec, params: ModelParams, target: GradientBundle) -> None:
    if params.spec.digest != spec.digest:
        raise IncompatibilityError("attack: params were built for a different model spec")
    if target.digest != spec.digest:
        raise IncompatibilityError(
            f"attack: bundle digest {target.digest:#018x} does not match model spec "
            f"digest {spec.digest:#018x}"
        )


@dataclass(frozen=True)
class _AttackGraph:
    graph: ExprGraph
    x: NodeId
    y: NodeId
    distance: NodeId
    objective: NodeId
    virtual_nodes: tuple[tuple[str, NodeId], ...]  # bundle order


def _build_attack_graph(spec: ModelSpec, params: ModelParams, target: GradientBundle,
                        cfg: AttackConfig) -> _AttackGraph:
    g = ExprGraph()
    xv = g.variable("x", spec.input_shape)
    yv = g.variable("y", (spec.classes,))
    param_nodes = {name: g.variable(name, t.shape) for name, t in params.flat()}
    virtual_target = g.softmax(yv)
    logits = build_logits(g, spec, xv, param_nodes)
    loss = g.cross_entropy_logits(logits, virtual_target)
    g.set_output(loss)
    loss_grads = grad(g, wrt=param_nodes.values())
    virtual = {name: loss_grads[node] for name, node in param_nodes.items()}
    distance = gradient_distance(g, virtual, target)
    objective = distance
    if cfg.variant == "improved" and cfg.lambda_mean > 0:
        objective = g.add(distance, mean_anchor_penalty(g, xv, cfg.lambda_mean))
        g.set_output(objective)
    ordered = tuple((name, virtual[name]) for name in target.names())
    return _AttackGraph(g, xv, yv, distance, objective, ordered)


# each stepper's step(x, y) returns (distance at the incoming point,
# new x, new y, distance at the new point or None if not computed)


class _GdStepper:
    """Fixed-step descent on the objective's gradient w.r.t. (x, y), with an
    optional halve-on-increase guard for stiff cases."""

    def __init__(self, ag: _AttackGraph, cfg: AttackConfig, bindings):
        meta = meta_grad(ag.graph, wrt=(ag.x, ag.y))
        self._eval = ag.graph.evaluator([ag.distance, meta[ag.x], meta[ag.y]])
        self._dist_eval = ag.graph.evaluator([ag.distance])
        self._bindings = bindings
        self._cfg = cfg
        self._eta = cfg.eta
        self.step_events = 0

    def _distance_at(self, x, y) -> float:
        self._bindings["x"] = x
        self._bindings["y"] = y
        return float(self._dist_eval(self._bindings)[0])

    def step(self, x, y):
        self._bindings["x"] = x
        self._bindings["y"] = y
        dist_arr, gx, gy = self._eval(self._bindings)
        dist = float(dist_arr)
        new_x = x - self._eta * gx
        new_y = y - self._eta * gy
        new_dist = None
        if self._cfg.halve_on_increase:
            new_dist = self._distance_at(new_x, new_y)
            tries = 0
            while ((not np.isfinite(new_dist) or new_dist > dist)
                   and tries < _MAX_HALVINGS_PER_STEP):
                self._eta /= 2.0
                self.step_events += 1
                tries += 1
                new_x = x - self._eta * gx
                new_y = y - self._eta * gy
                new_dist = self._distance_at(new_x, new_y)
        return dist, new_x, new_y, new_dist


class _GaussNewtonStepper:
    """Damped least-squares steps on the stacked gradient residuals.

    The residual vector is the flattened virtual-minus-true gradient (plus
    the mean-anchor rows for the improved variant); its Jacobian w.r.t.
    (x, y) comes from forward differences. Each iteration solves
    (J^T J + mu I) delta = -J^T r and scales the step by eta; mu shrinks on
    success and grows on rejection. Once the distance falls below the freeze
    threshold further steps are numerical noise and the point is held.
    """

    def __init__(self, ag: _AttackGraph, cfg: AttackConfig, bindings,
                 target: GradientBundle):
        self._resid_eval = ag.graph.evaluator([node for _, node in ag.virtual_nodes])
        self._targets = np.concatenate([t.array.ravel() for _, t in target.tensors])
        self._bindings = bindings
        self._cfg = cfg
        self._shape = ag.graph.shape_of(ag.x)
        self._pixels = int(np.prod(self._shape))
        self.step_events = 0
        self._mu: float | None = None  # seeded from the first Gram diagonal
        self._frozen = False

    def _residuals(self, x, y) -> np.ndarray:
        self._bindings["x"] = x
        self._bindings["y"] = y
        parts = [a.ravel() for a in self._resid_eval(self._bindings)]
        r = np.concatenate(parts) - self._targets
        if self._cfg.variant == "improved" and self._cfg.lambda_mean > 0:
            flat = x.ravel()
            w = np.sqrt(self._cfg.lambda_mean / self._pixels)
            r = np.concatenate([r, w * (flat - flat.mean())])
        return r

    def step(self, x, y):
        z = np.concatenate([x.ravel(), y])
        r = self._residuals(x, y)
        # distance excludes the penalty rows: it is the pure gradient gap
        core = len(self._targets)
        dist = float(r[:core] @ r[:core])

        if self._frozen or dist <= _GN_FREEZE_DISTANCE:
            self._frozen = True
            return dist, x, y, dist

        n = z.size
        jac = np.empty((r.size, n))
        for i in range(n):
            zp = z.copy()
            zp[i] += _GN_FD_STEP
            rp = self._residuals(zp[: self._pixels].reshape(self._shape), zp[self._pixels:])
            jac[:, i] = (rp - r) / _GN_FD_STEP

        gram = jac.T @ jac
        rhs = -(jac.T @ r)
        if self._mu is None:
            self._mu = _GN_DAMPING_SEED * max(float(gram.diagonal().max()), 1e-30)
        sq = float(r @ r)
        eye = np.eye(n)
        new_z, new_sq = z, dist
        for _ in range(_GN_MAX_REJECTS_PER_STEP):
            delta = np.linalg.solve(gram + self._mu * eye, rhs)
            step = self._cfg.eta * delta
            if np.abs(step).max() > _GN_STEP_CAP:
                self._mu *= 10.0
                self.step_events += 1
                continue
            cand = z + step
            rc = self._residuals(cand[: self._pixels].reshape(self._shape),
                                 cand[self._pixels:])
            if np.isfinite(rc).all() and float(rc @ rc) < sq:
                new_z, new_sq = cand, float(rc[:core] @ rc[:core])
                self._mu = max(self._mu / 3.0, _GN_DAMPING_MIN)
                break
            self._mu *= 10.0
            self.step_events += 1
        new_x = new_z[: self._pixels].reshape(self._shape)
        new_y = new_z[self._pixels:]
        return dist, new_x, new_y, new_sq


def _run_attack(spec: ModelSpec, params: ModelParams, target: GradientBundle,
                cfg: AttackConfig, truth: Tensor | None,
                init: VirtualSample | None) -> tuple[VirtualSample, AttackTrace]:
    _check_compatible(spec, params, target)
    if truth is not None and truth.shape != spec.input_shape:
        raise ShapeError(
            f"attack: ground truth of shape {truth.shape} does not match model "
            f"input {spec.input_shape}"
        )

    rng = SeedRng(cfg.seed)
    x = rng.normal_array(spec.input_shape)
    y = rng.normal_array((spec.classes,))
    if init is not None:
        if init.x_virtual.shape != spec.input_shape or init.y_virtual.shape != (spec.classes,):
            raise ShapeError("attack: init sample shapes do not match the model spec")
        x = init.x_virtual.array.copy()
        y = init.y_virtual.array.copy()

    ag = _build_attack_graph(spec, params, target, cfg)
    bindings = {name: t.array for name, t in params.flat()}
    if cfg.optimizer == "gd":
        stepper = _GdStepper(ag, cfg, bindings)
    else:
        stepper = _GaussNewtonStepper(ag, cfg, bindings, target)
    dist_eval = ag.graph.evaluator([ag.distance])

    def distance_at(px, py) -> float:
        bindings["x"] = px
        bindings["y"] = py
        return float(dist_eval(bindings)[0])

    records: list[TraceRecord] = []
    checkpoints = set(cfg.checkpoints)
    initial_distance: float | None = None

    for i in range(1, cfg.iterations + 1):
        dist, x, y, new_dist = stepper.step(x, y)

        if initial_distance is None:
            initial_distance = dist
        limit = _DIVERGENCE_FACTOR * max(initial_distance, _DIVERGENCE_FLOOR)
        if not np.isfinite(dist) or dist > limit:
            raise DivergenceError(
                f"gradient distance {dist} exceeded {limit} at iteration {i}",
                trace=AttackTrace(tuple(records)),
            )

        if i in checkpoints:
            if new_dist is None:
                new_dist = distance_at(x, y)
            snapshot = Tensor(x)
            if truth is not None:
                pair = ImagePair(truth, snapshot)
                rec_mse = mse_255(pair)
                rec_raw = mse_unit(pair)
            else:
                rec_mse = rec_raw = None
            records.append(
                TraceRecord(i, new_dist, rec_mse, rec_raw, snapshot, stepper.step_events)
            )

    final_x = np.clip(x, 0.0, 1.0) if cfg.clamp_output else x
    sample = VirtualSample(Tensor(final_x), Tensor(y))
    return sample, AttackTrace(tuple(records))


def dlg_attack(spec: ModelSpec, params: ModelParams, target: GradientBundle,
               cfg: AttackConfig, *, truth: Tensor | None = None,
               init: VirtualSample | None = None) -> tuple[VirtualSample, AttackTrace]:
    """Run the gradient-matching attack.

    Per iteration: virtual target = softmax(y'), virtual gradient = gradient
    of the loss at (x', virtual target), distance = squared gradient gap, and
    both virtual tensors move to shrink the distance (fixed-step descent by
    default; see AttackConfig.optimizer). `truth`, when given, only feeds the
    MSE columns of the trace; `init` overrides the seeded N(0, 1) starting
    point (useful for fixed-point tests).
    """
    if cfg.variant != "baseline":
        raise ContractError("dlg_attack: cfg.variant must be 'baseline'; use improved_dlg")
    return _run_attack(spec, params, target, cfg, truth, init)


def improved_dlg(spec: ModelSpec, params: ModelParams, target: GradientBundle,
                 cfg: AttackConfig, *, truth: Tensor | None = None,
                 init: VirtualSample | None = None) -> tuple[VirtualSample, AttackTrace]:
    """Gradient matching plus the mean-anchoring penalty on the virtual image.

    With lambda_mean = 0 the penalty is skipped entirely, so the trajectory
    is bit-identical to `dlg_attack` under the same seed.
    """
    if cfg.variant != "improved":
        cfg = replace(cfg, variant="improved")
    return _run_attack(spec, params, target, cfg, truth, init)
