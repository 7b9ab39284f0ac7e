"""Generator/discriminator pair, BCE losses and the single-step trainers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    Network,
    NumericError,
    ParamVector,
    SpecError,
    backward,
    forward,
    forward_trace,
    sgd_step,
)

EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    batch_real: int = 256
    batch_fake: int = 256
    lr_d: float = 0.05
    lr_g: float = 0.05
    d_steps_per_g_step: int = 1

    def __post_init__(self):
        for name in ("batch_real", "batch_fake", "d_steps_per_g_step"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        for name in ("lr_d", "lr_g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


class NoiseSource:
    """Seeded latent noise, standard normal by default."""

    def __init__(self, dim: int, seed, distribution: str = "normal"):
        if dim <= 0:
            raise ValueError("noise dim must be positive")
        if distribution not in ("normal", "uniform"):
            raise ValueError(f"unknown noise distribution {distribution!r}")
        self.dim = dim
        self.distribution = distribution
        self.rng = np.random.default_rng(seed)

    def draw(self, n: int) -> np.ndarray:
        if self.distribution == "normal":
            return self.rng.standard_normal((n, self.dim))
        return self.rng.uniform(-1.0, 1.0, (n, self.dim))


@dataclass
class GanPair:
    generator: Network
    discriminator: Network
    noise_dim: int

    def __post_init__(self):
        if self.generator.input_dim != self.noise_dim:
            raise SpecError("generator input dim must equal noise_dim")
        if self.generator.output_dim != self.discriminator.input_dim:
            raise SpecError("generator output dim must equal discriminator input dim")
        if self.discriminator.output_dim != 1:
            raise SpecError("discriminator must emit one score per sample")
        if self.discriminator.spec.final_activation != "sigmoid":
            raise SpecError("discriminator must end in a sigmoid")


def bce_loss(predictions, targets) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``predictions``.

    Predictions are clamped to ``[EPS, 1 - EPS]`` so the loss stays finite.
    """
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions, {t.shape[0]} targets")
    if p.size == 0:
        raise ValueError("empty predictions")
    pc = np.clip(p, EPS, 1.0 - EPS)
    n = p.size
    loss = -float(np.mean(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)))
    grad = (-(t / pc) + (1.0 - t) / (1.0 - pc)) / n
    return loss, grad


def saturating_g_loss(predictions) -> float:
    """Original minimax generator objective ``mean ln(1 - D(G(z)))`` (minimized).

    Kept for reference; every strategy trains with the non-saturating form.
    """
    p = np.clip(np.asarray(predictions, dtype=np.float64).ravel(), EPS, 1.0 - EPS)
    return float(np.mean(np.log(1.0 - p)))


class DiscriminatorOracle:
    """What a generator needs from its adversary.

    ``score(x)`` returns per-sample scores in (0, 1) and their input gradients
    ``d score / d x`` (same shape as ``x``). ``evaluate`` turns those into the
    non-saturating generator loss and its gradient w.r.t. ``x``.
    """

    input_dim: int

    def score(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def evaluate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        p, dp_dx = self.score(x)
        loss, dl_dp = bce_loss(p, np.ones_like(p))
        return p, dl_dp[:, None] * dp_dx, loss


class NetworkOracle(DiscriminatorOracle):
    """Oracle backed directly by a discriminator network."""

    def __init__(self, net: Network):
        self.net = net
        self.input_dim = net.input_dim

    def score(self, x):
        return score_with_input_grad(self.net, x)


def score_with_input_grad(net: Network, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    trace = forward_trace(net, x)
    p = trace[-1][:, 0].copy()
    _, dp_dx = backward(net, None, np.ones_like(trace[-1]), trace=trace)
    return p, dp_dx


def discriminator_gradient(disc: Network, real: np.ndarray, fake: np.ndarray) -> tuple[float, ParamVector]:
    """Loss ``BCE(D(real), 1) + BCE(D(fake), 0)`` and its parameter gradient."""
    tr = forward_trace(disc, real)
    loss_r, g_r = bce_loss(tr[-1], np.ones(real.shape[0]))
    grad_r, _ = backward(disc, None, g_r[:, None], trace=tr, need_input_grad=False)
    tf = forward_trace(disc, fake)
    loss_f, g_f = bce_loss(tf[-1], np.zeros(fake.shape[0]))
    grad_f, _ = backward(disc, None, g_f[:, None], trace=tf, need_input_grad=False)
    loss = loss_r + loss_f
    if not np.isfinite(loss):
        raise NumericError("non-finite discriminator loss")
    grad_r.values += grad_f.values
    return loss, grad_r


def discriminator_step(disc: Network, real: np.ndarray, fake: np.ndarray, lr: float) -> float:
    """One SGD step on the discriminator; returns the loss before the step."""
    loss, grad = discriminator_gradient(disc, real, fake)
    sgd_step(disc, grad, lr)
    return loss


def generator_step(gen: Network, z: np.ndarray, critic: DiscriminatorOracle, lr: float) -> float:
    """One non-saturating SGD step of ``gen`` against ``critic``.

    The critic is only queried; its parameters are never touched.
    """
    trace = forward_trace(gen, z)
    _, dl_dx, loss = critic.evaluate(trace[-1])
    if not np.isfinite(loss):
        raise NumericError("non-finite generator loss")
    grad, _ = backward(gen, None, dl_dx, trace=trace, need_input_grad=False)
    sgd_step(gen, grad, lr)
    return loss


def d_train_step(pair: GanPair, real, noise: NoiseSource, cfg: TrainConfig) -> float:
    x = real.inputs if hasattr(real, "inputs") else np.asarray(real, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != pair.discriminator.input_dim:
        raise ValueError("real batch does not match discriminator input dim")
    fake = forward(pair.generator, noise.draw(cfg.batch_fake))
    return discriminator_step(pair.discriminator, x, fake, cfg.lr_d)


def g_train_step_nonsaturating(pair: GanPair, noise: NoiseSource, cfg: TrainConfig,
                               critic: DiscriminatorOracle | None = None) -> float:
    critic = critic if critic is not None else NetworkOracle(pair.discriminator)
    if critic.input_dim != pair.generator.output_dim:
        raise ValueError("critic does not accept generator output dim")
    return generator_step(pair.generator, noise.draw(cfg.batch_fake), critic, cfg.lr_g)


def sample(gen: Network, z: np.ndarray) -> np.ndarray:
    return forward(gen, z)
