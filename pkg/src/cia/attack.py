"""Centered Initial Attack.

Every component is written as ``x_hat = center + halfwidth * g(r)`` where
``[center - halfwidth, center + halfwidth]`` is the intersection of the
max-perturbation box and the valid domain, and ``g`` maps the reals onto
[-1, 1]. Optimizing the unconstrained ``r`` with Adam therefore never
produces an infeasible iterate and nothing is ever clipped. The search
starts at ``r = 0``, i.e. at the center of the feasible box.

The centered domain is held in float64 so the only rounding between the
exact feasible interval and the emitted float32 example is the final cast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import netlib
from . import tensor_core as tc

SQUASH_KINDS = ("tanh", "sigmoid2", "sin")


class BoundViolationError(AssertionError):
    """An emitted example left its feasible box. Always a bug."""


@dataclass(frozen=True)
class SquashFn:
    kind: str = "tanh"

    def __post_init__(self):
        if self.kind not in SQUASH_KINDS:
            raise ValueError(f"unknown squash function {self.kind!r}; choose from {SQUASH_KINDS}")

    def __call__(self, r):
        if self.kind == "sigmoid2":
            return 2.0 * (tc.elementwise_map(r, "sigmoid") - 0.5)
        return tc.elementwise_map(r, self.kind)

    def grad(self, r):
        if self.kind == "sigmoid2":
            return 2.0 * tc.elementwise_map(r, "sigmoid_grad")
        return tc.elementwise_map(r, self.kind + "_grad")


@dataclass(frozen=True)
class PerturbationBudget:
    """Per-component max perturbation (scalar broadcasts) and domain bounds."""

    delta: float | np.ndarray
    alpha: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if not self.alpha < self.beta:
            raise ValueError(f"need alpha < beta, got [{self.alpha}, {self.beta}]")
        if np.any(np.asarray(self.delta) < 0):
            raise ValueError("perturbation budget must be non-negative")

    @classmethod
    def from_int(cls, delta_int: int, alpha: float = 0.0, beta: float = 1.0) -> "PerturbationBudget":
        """Budget quoted in 8-bit units, e.g. 16 -> 16/255."""
        return cls(np.float32(delta_int / 255.0), alpha, beta)


@dataclass(frozen=True)
class CenteredDomain:
    center: np.ndarray
    halfwidth: np.ndarray

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.halfwidth

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.halfwidth


def center_domain(x, budget: PerturbationBudget) -> CenteredDomain:
    """Midpoint and half-width of ``[max(alpha, x - delta), min(beta, x + delta)]``.

    This covers the interior case, both boundary cases, and the degenerate
    case where the budget exceeds the whole domain.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < budget.alpha) or np.any(x > budget.beta):
        raise ValueError(f"x lies outside the domain [{budget.alpha}, {budget.beta}]")
    delta = np.broadcast_to(np.asarray(budget.delta, dtype=np.float64), x.shape)
    lo = np.maximum(budget.alpha, x - delta)
    hi = np.minimum(budget.beta, x + delta)
    return CenteredDomain((lo + hi) / 2, (hi - lo) / 2)


def reparameterize(dom: CenteredDomain, r, g: SquashFn = SquashFn()) -> np.ndarray:
    r = np.asarray(r)
    if r.shape != dom.center.shape:
        raise ValueError(f"r has shape {r.shape}, domain has {dom.center.shape}")
    out_dtype = r.dtype if np.issubdtype(r.dtype, np.floating) else tc.DTYPE
    return (dom.center + dom.halfwidth * g(r.astype(np.float64))).astype(out_dtype)


def bound_violation(x_hat, x, budget: PerturbationBudget) -> float:
    """Largest constraint excess beyond one float32 rounding ulp of ``x_hat``."""
    x_hat64 = np.asarray(x_hat, dtype=np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    delta = np.broadcast_to(np.asarray(budget.delta, dtype=np.float64), x64.shape)
    excess = np.maximum.reduce(
        [np.abs(x_hat64 - x64) - delta, budget.alpha - x_hat64, x_hat64 - budget.beta]
    )
    ulp = np.spacing(np.abs(np.asarray(x_hat, dtype=np.float32))).astype(np.float64)
    return float(np.max(np.maximum(excess - ulp, 0.0), initial=0.0))


# ------------------------------------------------------------- objective


@dataclass(frozen=True)
class ObjectiveTerm:
    network: netlib.Network
    weight: float = 1.0
    name: str = "F"
    model: str = "F"
    defended: bool = False


COMPOSITIONS = ("single", "ensemble", "hybrid", "ensemble_hybrid")


@dataclass(frozen=True)
class ObjectiveSpec:
    terms: tuple[ObjectiveTerm, ...]
    composition: str = "single"

    def __post_init__(self):
        if not self.terms:
            raise ValueError("objective needs at least one term")
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"unknown composition {self.composition!r}")
        if any(t.weight <= 0 for t in self.terms):
            raise ValueError("objective weights must be positive")
        shapes = {t.network.input_shape for t in self.terms}
        if len(shapes) != 1:
            raise ValueError(f"networks disagree on input shape: {shapes}")
        if self.composition == "single" and len(self.terms) != 1:
            raise ValueError("single composition takes exactly one term")
        if self.composition in ("hybrid", "ensemble_hybrid"):
            per_model: dict[str, list[bool]] = {}
            for t in self.terms:
                per_model.setdefault(t.model, []).append(t.defended)
            for model, flags in per_model.items():
                if sorted(flags) != [False, True]:
                    raise ValueError(f"hybrid needs one plain and one defended term for {model!r}")
            if self.composition == "hybrid" and len(per_model) != 1:
                raise ValueError("hybrid composition covers exactly one classifier")

    @property
    def input_shape(self):
        return self.terms[0].network.input_shape

    @classmethod
    def single(cls, net, name: str = "F", front: Sequence[netlib.Layer] | None = None) -> "ObjectiveSpec":
        if front:
            return cls((ObjectiveTerm(netlib.prepend(net, front), 1.0, name + "'", name, True),), "single")
        return cls((ObjectiveTerm(net, 1.0, name, name, False),), "single")

    @classmethod
    def ensemble(cls, nets, names=None, weights=None, fronts=None) -> "ObjectiveSpec":
        names = names or [f"F{i}" for i in range(len(nets))]
        weights = weights or [1.0] * len(nets)
        fronts = fronts or [None] * len(nets)
        terms = []
        for net, name, w, front in zip(nets, names, weights, fronts):
            if front:
                terms.append(ObjectiveTerm(netlib.prepend(net, front), w, name + "'", name, True))
            else:
                terms.append(ObjectiveTerm(net, w, name, name, False))
        return cls(tuple(terms), "ensemble")

    @classmethod
    def hybrid(cls, net, front, a: float = 1.0, b: float = 1.0, name: str = "F") -> "ObjectiveSpec":
        return cls(
            (
                ObjectiveTerm(net, a, name, name, False),
                ObjectiveTerm(netlib.prepend(net, front), b, name + "'", name, True),
            ),
            "hybrid",
        )

    @classmethod
    def ensemble_hybrid(cls, nets, fronts, names=None, a: float = 1.0, b: float = 1.0) -> "ObjectiveSpec":
        names = names or [f"F{i}" for i in range(len(nets))]
        terms = []
        for net, front, name in zip(nets, fronts, names):
            terms.append(ObjectiveTerm(net, a, name, name, False))
            terms.append(ObjectiveTerm(netlib.prepend(net, front), b, name + "'", name, True))
        return cls(tuple(terms), "ensemble_hybrid")


def composed_loss_and_input_grad(obj: ObjectiveSpec, x_hat: np.ndarray, classes, mode: str):
    """Weighted loss per sample and its gradient w.r.t. ``x_hat`` (batched)."""
    if mode not in ("targeted", "untargeted"):
        raise ValueError(f"unknown attack mode {mode!r}")
    sign = 1.0 if mode == "targeted" else -1.0
    loss = np.zeros(x_hat.shape[0])
    grad = np.zeros(x_hat.shape, dtype=np.float64)
    for term in obj.terms:  # fixed summation order: term order
        l, g, _ = netlib.loss_and_input_grad(term.network, x_hat, classes)
        loss += term.weight * l
        grad += term.weight * g
    return sign * loss, sign * grad


def attack_loss_and_grad(obj: ObjectiveSpec, dom: CenteredDomain, r, g: SquashFn, mode: str, classes):
    """Composed loss in r-space and its gradient (chain rule through the squash).

    ``classes`` are the targets (targeted mode) or the true labels
    (untargeted mode). Accepts a single sample or a batch.
    """
    r = np.asarray(r)
    single = r.shape == obj.input_shape
    rb = r[None] if single else r
    cb = np.atleast_1d(np.asarray(classes, dtype=np.int64))
    domb = CenteredDomain(dom.center.reshape(rb.shape), dom.halfwidth.reshape(rb.shape))
    x_hat = reparameterize(domb, rb, g)
    loss, gx = composed_loss_and_input_grad(obj, x_hat, cb, mode)
    grad_r = (gx * domb.halfwidth * g.grad(rb.astype(np.float64))).astype(x_hat.dtype)
    if single:
        return float(loss[0]), grad_r[0]
    return loss, grad_r


# ------------------------------------------------------------------ Adam


@dataclass(frozen=True)
class AdamSettings:
    lr: float = 0.2
    beta1: float = 0.1
    beta2: float = 0.6
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass(frozen=True)
class AdamState:
    r: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, r) -> "AdamState":
        r = np.asarray(r)
        return cls(r.copy(), np.zeros_like(r), np.zeros_like(r), 0)


def adam_step(state: AdamState, grad, settings: AdamSettings = AdamSettings()) -> AdamState:
    """One bias-corrected Adam update; returns a new state."""
    grad = np.asarray(grad, dtype=state.r.dtype)
    t = state.t + 1
    b1, b2 = settings.beta1, settings.beta2
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    r = state.r - settings.lr * m_hat / (np.sqrt(v_hat) + settings.eps)
    return AdamState(r.astype(state.r.dtype), m, v, t)


# ----------------------------------------------------------------- craft


@dataclass(frozen=True)
class AttackConfig:
    budget: PerturbationBudget
    mode: str = "targeted"
    iterations: int = 20
    adam: AdamSettings = AdamSettings()
    squash: SquashFn = SquashFn()

    def __post_init__(self):
        if self.mode not in ("targeted", "untargeted"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")


@dataclass
class AttackResult:
    adversarial: np.ndarray
    r_final: np.ndarray | None
    loss_trace: list[float]
    predicted_before: dict[str, int]
    predicted_after: dict[str, int]
    bound_violation: float
    confidence: float = float("nan")
    confidence_preclip: float = float("nan")
    extras: dict = field(default_factory=dict)


def _prepare(xs, config: AttackConfig, obj: ObjectiveSpec, labels, targets):
    xs = np.asarray(xs, dtype=tc.DTYPE)
    if xs.shape[1:] != obj.input_shape:
        raise ValueError(f"inputs {xs.shape} do not match network input {obj.input_shape}")
    b = config.budget
    if np.any(xs < b.alpha) or np.any(xs > b.beta):
        raise ValueError("inputs must lie inside the domain")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != xs.shape[0]:
        raise ValueError("one label per input is required")
    if config.mode == "targeted":
        if targets is None:
            raise ValueError("targeted mode requires targets")
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        if targets.shape != labels.shape:
            raise ValueError("one target per input is required")
        if np.any(targets == labels):
            raise ValueError("target class must differ from the true class")
        classes = targets
    else:
        classes = labels
    return xs, labels, classes


def _batch_budget(budget: PerturbationBudget, shape) -> PerturbationBudget:
    delta = np.asarray(budget.delta)
    if delta.ndim and delta.shape == shape[1:]:
        delta = np.broadcast_to(delta, shape)
    return PerturbationBudget(delta, budget.alpha, budget.beta)


def _predictions(obj: ObjectiveSpec, x):
    probs = {t.name: netlib.softmax(t.network.logits(x)) for t in obj.terms}
    return probs


def _confidence(probs: dict, classes, mode: str) -> np.ndarray:
    rows = np.arange(len(classes))
    p = np.mean([pr[rows, classes] for pr in probs.values()], axis=0)
    return p if mode == "targeted" else 1.0 - p


def craft_batch(xs, config: AttackConfig, obj: ObjectiveSpec, labels, targets=None) -> list[AttackResult]:
    """Craft one adversarial example per input; samples are fully independent."""
    xs, labels, classes = _prepare(xs, config, obj, labels, targets)
    budget = _batch_budget(config.budget, xs.shape)
    dom = center_domain(xs, budget)
    before = _predictions(obj, xs)

    state = AdamState.zeros_like(np.zeros(xs.shape, dtype=tc.DTYPE))
    trace = []
    for _ in range(config.iterations):
        loss, grad_r = attack_loss_and_grad(obj, dom, state.r, config.squash, config.mode, classes)
        trace.append(loss)
        state = adam_step(state, grad_r, config.adam)
    x_hat = reparameterize(dom, state.r, config.squash)
    after = _predictions(obj, x_hat)
    conf = _confidence(after, classes, config.mode)

    trace = np.stack(trace, axis=1)
    results = []
    for i in range(xs.shape[0]):
        sub = PerturbationBudget(np.asarray(budget.delta)[i] if np.ndim(budget.delta) else budget.delta,
                                 budget.alpha, budget.beta)
        viol = bound_violation(x_hat[i], xs[i], sub)
        if viol != 0.0:
            raise BoundViolationError(f"sample {i} exceeds its feasible box by {viol}")
        results.append(
            AttackResult(
                adversarial=x_hat[i],
                r_final=state.r[i],
                loss_trace=[float(v) for v in trace[i]],
                predicted_before={k: int(p[i].argmax()) for k, p in before.items()},
                predicted_after={k: int(p[i].argmax()) for k, p in after.items()},
                bound_violation=viol,
                confidence=float(conf[i]),
            )
        )
    return results


def craft(x, config: AttackConfig, obj: ObjectiveSpec, label: int, target: int | None = None) -> AttackResult:
    return craft_batch(np.asarray(x)[None], config, obj, [label], None if target is None else [target])[0]


def baseline_clipped_attack_batch(
    xs, config: AttackConfig, obj: ObjectiveSpec, labels, targets=None
) -> list[AttackResult]:
    """Iterative Adam directly on the example, clipped into the feasible box at the end.

    This is the conventional approach the reparameterization replaces; the
    pre- and post-clip confidences expose what the final clip costs.
    """
    xs, labels, classes = _prepare(xs, config, obj, labels, targets)
    budget = _batch_budget(config.budget, xs.shape)
    dom = center_domain(xs, budget)
    before = _predictions(obj, xs)

    state = AdamState.zeros_like(xs)
    trace = []
    for _ in range(config.iterations):
        loss, gx = composed_loss_and_input_grad(obj, state.r, classes, config.mode)
        trace.append(loss)
        state = adam_step(state, gx, config.adam)
    pre = state.r
    conf_pre = _confidence(_predictions(obj, pre), classes, config.mode)
    x_hat = np.clip(pre.astype(np.float64), dom.lower, dom.upper).astype(tc.DTYPE)
    after = _predictions(obj, x_hat)
    conf = _confidence(after, classes, config.mode)

    trace = np.stack(trace, axis=1)
    results = []
    for i in range(xs.shape[0]):
        sub = PerturbationBudget(np.asarray(budget.delta)[i] if np.ndim(budget.delta) else budget.delta,
                                 budget.alpha, budget.beta)
        results.append(
            AttackResult(
                adversarial=x_hat[i],
                r_final=None,
                loss_trace=[float(v) for v in trace[i]],
                predicted_before={k: int(p[i].argmax()) for k, p in before.items()},
                predicted_after={k: int(p[i].argmax()) for k, p in after.items()},
                bound_violation=bound_violation(x_hat[i], xs[i], sub),
                confidence=float(conf[i]),
                confidence_preclip=float(conf_pre[i]),
                extras={"preclip": pre[i]},
            )
        )
    return results


def baseline_clipped_attack(x, config: AttackConfig, obj: ObjectiveSpec, label: int, target=None) -> AttackResult:
    return baseline_clipped_attack_batch(
        np.asarray(x)[None], config, obj, [label], None if target is None else [target]
    )[0]
