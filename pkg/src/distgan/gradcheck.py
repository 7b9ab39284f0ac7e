"""Finite-difference check of the analytic backward pass on random small nets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ACTIVATIONS, LayerSpec, NetworkSpec, backward, build_network, forward, forward_trace

STEP = 1e-5
TOLERANCE = 1e-4
# Gradients smaller than this are compared in absolute terms; central
# differences cannot resolve relative error below roughly eps * |L| / h.
REL_FLOOR = 1e-4
KINK_MARGIN = 1e-3


@dataclass
class GradcheckReport:
    trials: int
    max_rel_error: float
    worst_trial: int
    activations_seen: set

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def random_spec(rng: np.random.Generator, trial: int) -> NetworkSpec:
    """1 to 3 dense layers with widths in [1, 8], each followed by an
    activation. Activation kinds rotate with ``trial`` so every kind shows up."""
    n_dense = int(rng.integers(1, 4))
    dims = [int(d) for d in rng.integers(1, 9, size=n_dense + 1)]
    layers = []
    for i in range(n_dense):
        act = ACTIVATIONS[(trial + i) % len(ACTIVATIONS)]
        layers.append(LayerSpec.dense(dims[i], dims[i + 1]))
        if act == "leaky_relu":
            layers.append(LayerSpec.act(act, float(rng.uniform(0.01, 0.5))))
        else:
            layers.append(LayerSpec.act(act))
    return NetworkSpec.from_layers(layers)


def _kinked(net, x) -> bool:
    """True when some relu-type pre-activation sits too close to zero."""
    trace = forward_trace(net, x)
    for i, layer in enumerate(net.spec.layers):
        if layer.kind == "activation" and layer.activation in ("relu", "leaky_relu"):
            if np.abs(trace[i]).min() < KINK_MARGIN:
                return True
    return False


def _rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_network(net, x: np.ndarray, upstream: np.ndarray, inject_sign_flip: bool = False) -> float:
    """Max relative error over all parameters and inputs for ``L = sum(upstream * net(x))``."""
    grad, dx = backward(net, x, upstream)
    analytic = grad.values.copy()
    if inject_sign_flip:
        analytic[: max(1, analytic.size // 2)] *= -1.0

    def loss(params=None, inp=x):
        if params is not None:
            net.set_params(params)
        return float(np.sum(upstream * forward(net, inp)))

    base = net.params.values.copy()
    numeric = np.empty_like(base)
    for i in range(base.size):
        w = base.copy()
        w[i] = base[i] + STEP
        hi = loss(w)
        w[i] = base[i] - STEP
        lo = loss(w)
        numeric[i] = (hi - lo) / (2 * STEP)
    net.set_params(base)

    num_dx = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += STEP
        xm = x.copy()
        xm[idx] -= STEP
        num_dx[idx] = (loss(None, xp) - loss(None, xm)) / (2 * STEP)
    return max(_rel_error(analytic, numeric), _rel_error(dx, num_dx))


def run_gradcheck(seed: int = 0, trials: int = 100, batch: int = 3, inject_sign_flip: bool = False) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    worst, worst_trial, seen = 0.0, -1, set()
    for t in range(trials):
        spec = random_spec(rng, t)
        net = build_network(spec, int(rng.integers(2**31)))
        for _ in range(100):
            # random biases too, so no pre-activation is pinned at exactly zero
            net.set_params(rng.standard_normal(net.params.values.size))
            x = rng.standard_normal((batch, spec.input_dim))
            if not _kinked(net, x):
                break
        else:
            raise RuntimeError(f"trial {t}: could not sample inputs away from activation kinks")
        upstream = rng.standard_normal((batch, spec.output_dim))
        err = check_network(net, x, upstream, inject_sign_flip)
        seen.update(l.activation for l in spec.layers if l.kind == "activation")
        if err > worst or worst_trial < 0:
            worst, worst_trial = err, t
    return GradcheckReport(trials, worst, worst_trial, seen)
