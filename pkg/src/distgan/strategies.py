"""The three multi-user GAN training strategies plus the single-user baseline.

Every runner drives the same pieces: :class:`UserNode` objects that own a
private data partition and a local discriminator, a :class:`GeneratorSide`
that owns the generator, and a :class:`MessageLog` through which all
cross-party traffic flows. Users only ever receive generator samples or
aggregated gradients, and only ever send gradients or scores.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import protocol as proto
from .gan import (
    DiscriminatorOracle,
    NetworkOracle,
    NoiseSource,
    TrainConfig,
    discriminator_gradient,
    discriminator_step,
    generator_step,
    score_with_input_grad,
)
from .metrics import GENERATOR_ID, MetricsRecord
from .nn import Network, NetworkSpec, NumericError, ParamVector, build_network, forward, sgd_step
from .protocol import MessageKind, MessageLog, SelectionPolicy, ServerState

KINDS = ("federated", "averaged", "round_robin", "baseline")


class StrategyError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    epochs: int
    users: int
    gan: TrainConfig = field(default_factory=TrainConfig)
    policy: SelectionPolicy | None = None
    fake_refresh: int = 1
    g_steps: int = 1
    upload_fraction: float = 1.0
    lr_server: float | None = None
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StrategyError(f"unknown strategy {self.kind!r}; choose from {KINDS}")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise StrategyError("epochs must be a non-negative integer")
        if self.users < 1:
            raise StrategyError("at least one user is required")
        if self.kind == "federated":
            if self.users < 2:
                raise StrategyError("the federated strategy needs at least two users")
            if self.policy is None:
                raise StrategyError("the federated strategy needs a selection policy")
        if self.fake_refresh < 1 or self.g_steps < 1 or self.workers < 1:
            raise StrategyError("fake_refresh, g_steps and workers must be positive")
        if not 0.0 < self.upload_fraction <= 1.0:
            raise StrategyError("upload_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 0
    train: int = 0


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def init_seeds(seed: int, users: int) -> tuple[int, list[int]]:
    """``(generator_seed, [discriminator_seed per user])``."""
    kids = np.random.SeedSequence(seed).spawn(1 + max(users, 1))
    return _int_seed(kids[0]), [_int_seed(k) for k in kids[1:]]


def train_seeds(seed: int, users: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence, list]:
    """``(generator noise, evaluation noise, [per-user shuffling])``."""
    kids = np.random.SeedSequence(seed).spawn(2 + max(users, 1))
    return kids[0], kids[1], list(kids[2:])


def minibatches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One shuffled pass over ``n`` rows in chunks of at most ``batch``."""
    perm = rng.permutation(n)
    return [perm[i : i + batch] for i in range(0, n, batch)]


class UserNode:
    """A simulated participant. Its real samples never leave this object."""

    def __init__(self, user_id: int, data: np.ndarray, discriminator: Network, lr: float, shuffle_seed):
        self.user_id = user_id
        self._data = np.array(data, dtype=np.float64, order="C", copy=True)
        if self._data.ndim != 2 or self._data.shape[0] == 0:
            raise StrategyError(f"user {user_id} has no data")
        self.disc = discriminator
        self.lr = lr
        self._rng = np.random.default_rng(shuffle_seed)
        self._fakes: np.ndarray | None = None

    @property
    def name(self) -> str:
        return proto.user_name(self.user_id)

    @property
    def n_samples(self) -> int:
        return self._data.shape[0]

    @property
    def raw_data_for_audit(self) -> np.ndarray:
        """Read-only copy used by the channel auditor; never sent anywhere."""
        out = self._data.copy()
        out.setflags(write=False)
        return out

    def receive_fakes(self, payload: proto.FakeSamples) -> None:
        self._fakes = payload.samples

    def local_train(self, cfg: TrainConfig) -> tuple[float, int]:
        """``d_steps_per_g_step`` passes over the local data against the last
        received fakes. Returns ``(mean loss, real samples processed)``."""
        if self._fakes is None:
            raise StrategyError(f"user {self.user_id} has no fake samples to train against")
        losses = []
        for _ in range(cfg.d_steps_per_g_step):
            for idx in minibatches(self.n_samples, cfg.batch_real, self._rng):
                losses.append(discriminator_step(self.disc, self._data[idx], self._fakes, self.lr))
        return float(np.mean(losses)), cfg.d_steps_per_g_step * self.n_samples

    def local_gradient(self, cfg: TrainConfig) -> tuple[float, ParamVector, int]:
        """Mean minibatch gradient over one pass; the local model is not moved."""
        if self._fakes is None:
            raise StrategyError(f"user {self.user_id} has no fake samples to train against")
        batches = minibatches(self.n_samples, cfg.batch_real, self._rng)
        total = None
        losses = []
        for idx in batches:
            loss, g = discriminator_gradient(self.disc, self._data[idx], self._fakes)
            losses.append(loss)
            total = g if total is None else ParamVector(total.values + g.values, g.layout)
        total.values /= len(batches)
        return float(np.mean(losses)), total, self.n_samples

    def score(self, payload: proto.FakeSamples) -> proto.ScoreReport:
        p, dp_dx = score_with_input_grad(self.disc, payload.samples)
        return proto.ScoreReport(p, dp_dx)

    def receive_global(self, g: proto.GlobalGrad) -> None:
        sgd_step(self.disc, ParamVector(g.dense(), self.disc.layout), self.lr)


class GeneratorSide:
    """The party that owns the generator (the platform in the federated setup)."""

    def __init__(self, generator: Network, noise: NoiseSource, cfg: TrainConfig):
        self.gen = generator
        self.noise = noise
        self.cfg = cfg

    def fakes(self) -> proto.FakeSamples:
        return proto.FakeSamples(forward(self.gen, self.noise.draw(self.cfg.batch_fake)))

    def step(self, critic: DiscriminatorOracle) -> float:
        return generator_step(self.gen, self.noise.draw(self.cfg.batch_fake), critic, self.cfg.lr_g)


class RemoteOracle(DiscriminatorOracle):
    """A user's discriminator seen through the channel: samples go out as a
    FakeSampleBatch, scores and their input gradients come back."""

    def __init__(self, user: UserNode, log: MessageLog, epoch: int):
        self.user = user
        self.log = log
        self.epoch = epoch
        self.input_dim = user.disc.input_dim

    def score(self, x):
        sent = self.log.send(MessageKind.FakeSampleBatch, self.epoch, proto.GENERATOR, self.user.name,
                             proto.FakeSamples(np.array(x)))
        report = self.user.score(sent.payload)
        back = self.log.send(MessageKind.ScalarScores, self.epoch, self.user.name, proto.GENERATOR, report)
        return back.payload.scores, back.payload.input_grads


class AveragedOracle(DiscriminatorOracle):
    """Score is the arithmetic mean of the members' scores (summed in order)."""

    def __init__(self, members: Sequence[DiscriminatorOracle]):
        if not members:
            raise StrategyError("averaged oracle needs at least one member")
        self.members = list(members)
        self.input_dim = self.members[0].input_dim
        if any(m.input_dim != self.input_dim for m in self.members):
            raise StrategyError("discriminators disagree on input dim")

    def score(self, x):
        p_sum = None
        g_sum = None
        for m in self.members:
            p, g = m.score(x)
            p_sum = p.copy() if p_sum is None else p_sum + p
            g_sum = g.copy() if g_sum is None else g_sum + g
        k = len(self.members)
        return p_sum / k, g_sum / k


@dataclass
class RunResult:
    kind: str
    metrics: list[MetricsRecord]
    final_generator: Network
    message_log: MessageLog
    discriminators: list[Network] = field(default_factory=list)
    epoch_wall_ms: list[float] = field(default_factory=list)


EvalHook = Callable[[int, Network], None]


class _Run:
    """Shared bookkeeping: metrics, wall clock, eval hook, partial results."""

    def __init__(self, kind: str, gen: GeneratorSide, log: MessageLog, on_epoch: EvalHook | None):
        self.result = RunResult(kind, [], gen.gen, log)
        self.on_epoch = on_epoch
        self._t0 = 0.0

    def begin(self):
        self._t0 = time.perf_counter()

    def user(self, epoch, user_id, d_loss, work, wall_ms):
        self.result.metrics.append(MetricsRecord(epoch, user_id, d_loss, None, work, wall_ms))

    def generator(self, epoch, g_loss, steps, wall_ms):
        self.result.metrics.append(MetricsRecord(epoch, GENERATOR_ID, None, g_loss, steps, wall_ms))

    def end(self, epoch):
        self.result.epoch_wall_ms.append((time.perf_counter() - self._t0) * 1e3)
        if self.on_epoch is not None:
            self.on_epoch(epoch, self.result.final_generator)

    def fail(self, exc: NumericError):
        exc.partial_result = self.result
        raise exc


def _timed(fn, *args):
    t = time.perf_counter()
    out = fn(*args)
    return out, (time.perf_counter() - t) * 1e3


def _fan_out(fn, users: Sequence[UserNode], workers: int) -> list:
    """Run ``fn(user)`` for every user; results in ascending user order."""
    if workers <= 1 or len(users) <= 1:
        return [_timed(fn, u) for u in users]
    with ThreadPoolExecutor(max_workers=min(workers, len(users))) as pool:
        return list(pool.map(lambda u: _timed(fn, u), users))


def _check_users(users: Sequence[UserNode], gen: GeneratorSide) -> None:
    if not users:
        raise StrategyError("no users")
    for u in users:
        if u.disc.input_dim != gen.gen.output_dim:
            raise StrategyError(f"user {u.user_id} discriminator takes {u.disc.input_dim} inputs, "
                                f"generator emits {gen.gen.output_dim}")


def _send_fakes(log: MessageLog, epoch: int, gen: GeneratorSide, users: Sequence[UserNode]) -> None:
    batch = gen.fakes()
    for u in users:
        u.receive_fakes(log.send(MessageKind.FakeSampleBatch, epoch, proto.GENERATOR, u.name, batch).payload)


def run_federated(users: Sequence[UserNode], server: ServerState, gen: GeneratorSide, cfg: StrategyConfig,
                  log: MessageLog | None = None, on_epoch: EvalHook | None = None) -> RunResult:
    """Users jointly train the server's discriminator by selective gradient
    exchange; the generator, hosted next to the server, trains against it."""
    _check_users(users, gen)
    if any(u.disc.spec != server.spec for u in users):
        raise StrategyError("all users must share the server's network spec")
    log = log if log is not None else MessageLog()
    run = _Run("federated", gen, log, on_epoch)
    server_net = proto.network_of(server)
    critic = NetworkOracle(server_net)
    try:
        for e in range(1, cfg.epochs + 1):
            run.begin()
            if (e - 1) % cfg.fake_refresh == 0:
                batch = gen.fakes()  # one fresh batch, pushed to every user
                for u in users:
                    u.receive_fakes(log.send(MessageKind.FakeSampleBatch, e, proto.SERVER, u.name, batch).payload)
            losses = {u.user_id: [] for u in users}
            walls = {u.user_id: 0.0 for u in users}
            work = {u.user_id: 0 for u in users}
            for _ in range(cfg.gan.d_steps_per_g_step):
                results = _fan_out(lambda u: u.local_gradient(cfg.gan), users, cfg.workers)
                uploads = []
                for u, ((loss, grad, n), ms) in zip(users, results):
                    losses[u.user_id].append(loss)
                    walls[u.user_id] += ms
                    work[u.user_id] += n
                    up = proto.select_upload(grad, cfg.upload_fraction, user_id=u.user_id, epoch=server.epoch)
                    uploads.append(log.send(MessageKind.GradUpload, e, u.name, proto.SERVER, up).payload)
                agg = proto.aggregate(server, uploads)
                proto.apply_global(server, agg)
                proto.broadcast(server, users, agg, log, epoch=e)
            for u in users:
                run.user(e, u.user_id, float(np.mean(losses[u.user_id])), work[u.user_id], walls[u.user_id])
            t = time.perf_counter()
            g_losses = [gen.step(critic) for _ in range(cfg.g_steps)]
            run.generator(e, float(np.mean(g_losses)), cfg.g_steps, (time.perf_counter() - t) * 1e3)
            run.end(e)
    except NumericError as exc:
        run.fail(exc)
    run.result.discriminators = [server_net] + [u.disc for u in users]
    return run.result


def run_averaged(users: Sequence[UserNode], gen: GeneratorSide, cfg: StrategyConfig,
                 log: MessageLog | None = None, on_epoch: EvalHook | None = None) -> RunResult:
    """Each user trains its own discriminator; the generator trains against
    the mean of all users' scores."""
    _check_users(users, gen)
    log = log if log is not None else MessageLog()
    run = _Run("averaged", gen, log, on_epoch)
    try:
        for e in range(1, cfg.epochs + 1):
            run.begin()
            _send_fakes(log, e, gen, users)
            results = _fan_out(lambda u: u.local_train(cfg.gan), users, cfg.workers)
            for u, ((loss, n), ms) in zip(users, results):
                run.user(e, u.user_id, loss, n, ms)
            t = time.perf_counter()
            critic = AveragedOracle([RemoteOracle(u, log, e) for u in users])
            g_losses = [gen.step(critic) for _ in range(cfg.g_steps)]
            run.generator(e, float(np.mean(g_losses)), cfg.g_steps, (time.perf_counter() - t) * 1e3)
            run.end(e)
    except NumericError as exc:
        run.fail(exc)
    run.result.discriminators = [u.disc for u in users]
    return run.result


def run_round_robin(users: Sequence[UserNode], gen: GeneratorSide, cfg: StrategyConfig,
                    log: MessageLog | None = None, on_epoch: EvalHook | None = None) -> RunResult:
    """Within each epoch, users in ascending id take a discriminator step and
    the generator then takes ``g_steps`` steps against that user alone."""
    _check_users(users, gen)
    log = log if log is not None else MessageLog()
    run = _Run("round_robin", gen, log, on_epoch)
    ordered = sorted(users, key=lambda u: u.user_id)
    try:
        for e in range(1, cfg.epochs + 1):
            run.begin()
            g_losses = []
            g_ms = 0.0
            for u in ordered:
                _send_fakes(log, e, gen, [u])
                (loss, n), ms = _timed(u.local_train, cfg.gan)
                run.user(e, u.user_id, loss, n, ms)
                t = time.perf_counter()
                critic = RemoteOracle(u, log, e)
                g_losses.extend(gen.step(critic) for _ in range(cfg.g_steps))
                g_ms += (time.perf_counter() - t) * 1e3
            run.generator(e, float(np.mean(g_losses)), cfg.g_steps * len(ordered), g_ms)
            run.end(e)
    except NumericError as exc:
        run.fail(exc)
    run.result.discriminators = [u.disc for u in ordered]
    return run.result


def run_baseline(data: np.ndarray, gen: GeneratorSide, disc: Network, cfg: StrategyConfig,
                 shuffle_seed, on_epoch: EvalHook | None = None) -> RunResult:
    """Ordinary single-party GAN alternation on ``data`` (no channel traffic)."""
    data = np.ascontiguousarray(data, dtype=np.float64)
    rng = np.random.default_rng(shuffle_seed)
    log = MessageLog()
    run = _Run("baseline", gen, log, on_epoch)
    critic = NetworkOracle(disc)
    tcfg = cfg.gan
    try:
        for e in range(1, cfg.epochs + 1):
            run.begin()
            t = time.perf_counter()
            fake = forward(gen.gen, gen.noise.draw(tcfg.batch_fake))
            losses = []
            for _ in range(tcfg.d_steps_per_g_step):
                for idx in minibatches(data.shape[0], tcfg.batch_real, rng):
                    losses.append(discriminator_step(disc, data[idx], fake, tcfg.lr_d))
            run.user(e, 0, float(np.mean(losses)), tcfg.d_steps_per_g_step * data.shape[0],
                     (time.perf_counter() - t) * 1e3)
            t = time.perf_counter()
            g_losses = [generator_step(gen.gen, gen.noise.draw(tcfg.batch_fake), critic, tcfg.lr_g)
                        for _ in range(cfg.g_steps)]
            run.generator(e, float(np.mean(g_losses)), cfg.g_steps, (time.perf_counter() - t) * 1e3)
            run.end(e)
    except NumericError as exc:
        run.fail(exc)
    run.result.discriminators = [disc]
    return run.result


# ------------------------------------------------------------------- wiring


def build_and_run(cfg: StrategyConfig, partitions: Sequence[np.ndarray], gen_spec: NetworkSpec,
                  disc_spec: NetworkSpec, seeds: Seeds, noise_distribution: str = "normal",
                  on_epoch: EvalHook | None = None) -> RunResult:
    """Construct every party from seeds and run the configured strategy.

    ``partitions`` holds one sample matrix per user; the baseline trains on
    their concatenation. ``on_epoch`` is also called once with epoch 0 on the
    freshly initialised generator.
    """
    if cfg.kind != "baseline" and len(partitions) != cfg.users:
        raise StrategyError(f"config names {cfg.users} users but {len(partitions)} partitions were given")
    g_seed, d_seeds = init_seeds(seeds.init, len(partitions))
    noise_ss, _, shuffle_ss = train_seeds(seeds.train, len(partitions))
    noise_dim = gen_spec.input_dim
    gen = GeneratorSide(build_network(gen_spec, g_seed), NoiseSource(noise_dim, noise_ss, noise_distribution), cfg.gan)
    if on_epoch is not None:
        on_epoch(0, gen.gen)
    if cfg.kind == "baseline":
        data = np.concatenate(list(partitions), axis=0)
        return run_baseline(data, gen, build_network(disc_spec, d_seeds[0]), cfg, shuffle_ss[0], on_epoch)
    if cfg.kind == "federated":
        # every party starts from the same agreed initial weights
        init = build_network(disc_spec, d_seeds[0])
        users = [UserNode(u, p, init.copy(), cfg.gan.lr_d, shuffle_ss[u]) for u, p in enumerate(partitions)]
        server = ServerState(disc_spec, init.params.copy(), cfg.policy,
                             cfg.lr_server if cfg.lr_server is not None else cfg.gan.lr_d)
        return run_federated(users, server, gen, cfg, on_epoch=on_epoch)
    users = [UserNode(u, p, build_network(disc_spec, d_seeds[u]), cfg.gan.lr_d, shuffle_ss[u])
             for u, p in enumerate(partitions)]
    if cfg.kind == "averaged":
        return run_averaged(users, gen, cfg, on_epoch=on_epoch)
    return run_round_robin(users, gen, cfg, on_epoch=on_epoch)


def eval_noise(seeds: Seeds, users: int, n: int, dim: int, distribution: str = "normal") -> np.ndarray:
    """Fixed evaluation latents, independent of the training noise stream."""
    _, ev, _ = train_seeds(seeds.train, users)
    return NoiseSource(dim, ev, distribution).draw(n)
