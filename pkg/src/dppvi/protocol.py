"""Federated partitioned variational inference with DP client updates.

The server holds the global natural parameters ``lam = prior + sum_m t_m``;
each client owns its site factor ``t_m`` and optionally one virtual factor per
local data partition.  Four client update variants are provided:

* :func:`client_update_standard`: optimise the local ELBO against the cavity,
  optionally with DP-SGD (``dp_opt``).
* :func:`client_update_local_avg`: optimise one KL-reweighted objective per
  partition from the common start and release the (noised) average change.
* :func:`client_update_virtual`: treat each partition as a virtual client
  with its own factor and release the (noised) sum of changes.

:func:`run_pvi`, :func:`run_global_vi` and :func:`run_bcm` drive complete
simulations and return an :class:`ExperimentTrace`.

Randomness is derived from ``(seed, round, stream)`` so results do not depend
on the order in which clients are evaluated.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionMismatch, DomainError, NonNormalizable, NonNormalizableGlobal, OptimizerDiverged
from .expfam import (
    Factor,
    MeanFieldGaussian,
    MomentGaussian,
    is_normalizable,
    lambda_checksum,
    natural_to_params,
    natural_vector,
    prior_lambda,
    to_moment,
)
from .models import Dataset, ModelSpec, elbo_and_grad, evaluate_model
from .privacy import (
    Adam,
    DpConfig,
    PrivacyLedger,
    SUBSAMPLING_LABEL,
    calibrate_sigma,
    clip_to_ball,
    dp_sgd_step,
    gaussian_mechanism,
    nonprivate_direction,
)

METHODS = ("standard", "dp_opt", "local_avg", "virtual")

# rng namespaces inside one (seed, round)
_OPT, _NOISE, _EVAL = 0, 1, 2


def stream_rng(seed: int, round_index: int, namespace: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(round_index, namespace, stream)))


# --------------------------------------------------------------------------
# configuration types


@dataclass(frozen=True)
class Schedule:
    kind: str = "sequential"
    global_updates: int = 10
    damping: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sequential", "synchronous"):
            raise ConfigError(f"unknown schedule {self.kind!r}")
        if self.global_updates < 0:
            raise ConfigError("global_updates must be >= 0")
        if not 0.0 < self.damping <= 1.0:
            raise ConfigError("damping must lie in (0, 1]")


@dataclass(frozen=True)
class AggregatorMode:
    kind: str = "none"

    def __post_init__(self):
        if self.kind not in ("none", "trusted"):
            raise ConfigError(f"unknown aggregator {self.kind!r}")

    @property
    def trusted(self) -> bool:
        return self.kind == "trusted"


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-2
    local_steps: int = 50
    batch_size: int | None = None
    mc_samples: int = 1


# --------------------------------------------------------------------------
# local solvers


class VISolver:
    """Adam on the reparameterized local ELBO in (mean, log-variance) space.

    Each step draws a lot of ``batch_size`` examples without replacement.
    The ascent direction is the batch likelihood sum plus the KL gradient
    scaled by the lot fraction; with DP the likelihood rows are clipped and
    noised first.
    """

    def __init__(self, model: ModelSpec, opt: OptimizerConfig = OptimizerConfig()):
        self.model = model
        self.opt = opt

    def is_normalizable(self, lam) -> bool:
        return is_normalizable(lam)

    def lot_size(self, n: int) -> int:
        return n if self.opt.batch_size is None else min(self.opt.batch_size, n)

    def solve(self, init_lambda, effective_prior, data: Dataset, kl_weight=1.0, likelihood_temper=1.0,
              rng=None, dp: DpConfig | None = None, ledger: PrivacyLedger | None = None, callback=None,
              steps: int | None = None) -> np.ndarray:
        steps = self.opt.local_steps if steps is None else steps
        init_lambda = np.asarray(init_lambda, dtype=np.float64)
        if steps == 0:
            return init_lambda.copy()
        n = len(data)
        if n == 0:
            raise DomainError("cannot optimise on an empty shard")
        b = self.lot_size(n)
        lot_fraction = b / n
        d = self.model.param_dim
        params = natural_to_params(init_lambda)
        if not is_normalizable(effective_prior):
            raise NonNormalizable("effective prior is not a proper Gaussian")
        prior_moments = to_moment(effective_prior)
        adam = Adam(lr=self.opt.lr)
        for step in range(1, steps + 1):
            batch = data if b == n else data.subset(np.sort(rng.choice(n, size=b, replace=False)))
            q = MomentGaussian(params[:d], np.exp(params[d:]))
            report = elbo_and_grad(q, prior_moments, batch, self.model, kl_weight, likelihood_temper,
                                   self.opt.mc_samples, rng)
            if dp is None:
                params = adam.step(params, nonprivate_direction(report, lot_fraction))
            else:
                params = dp_sgd_step(report, dp, adam, params, rng, lot_fraction)
            if not np.all(np.isfinite(params)):
                raise OptimizerDiverged(f"non-finite variational parameters at step {step}")
            if callback is not None:
                callback(step, params)
        if dp is not None and ledger is not None:
            ledger.record("dp_sgd", dp.noise_multiplier, lot_fraction, steps)
        var = np.exp(params[d:])
        lam = np.concatenate([params[:d] / var, -0.5 / var])
        if not is_normalizable(lam):
            raise NonNormalizable("local approximation left the family")
        return lam


# --------------------------------------------------------------------------
# clients and messages


@dataclass
class UpdateMessage:
    client_id: int
    delta_lambda: np.ndarray
    round: int
    noise_applied: bool = False

    def __post_init__(self):
        if not np.all(np.isfinite(self.delta_lambda)):
            raise OptimizerDiverged(f"client {self.client_id} produced a non-finite update")

    @property
    def bytes(self) -> int:
        return int(np.asarray(self.delta_lambda, dtype="<f8").nbytes)


@dataclass
class ClientState:
    id: int
    shard: Dataset
    factor: Factor
    local_partitions: int = 1
    partitions: list[np.ndarray] | None = None
    virtual_factors: list[Factor] | None = None
    dp: DpConfig | None = None
    ledger: PrivacyLedger = field(default_factory=PrivacyLedger)
    stream_ids: list[int] = field(default_factory=list)
    _undo: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.local_partitions < 1:
            raise DomainError("local_partitions must be >= 1")
        if self.ledger.owner is None:
            self.ledger.owner = self.id
        if not self.stream_ids:
            self.stream_ids = [self.id]

    def partition_data(self) -> list[Dataset]:
        if self.partitions is None:
            return [self.shard]
        return [self.shard.subset(idx) for idx in self.partitions]

    def _remember(self, delta, virtual_deltas=None):
        before_v = None if self.virtual_factors is None else [v.lam.copy() for v in self.virtual_factors]
        self._undo = (self.factor.lam.copy(), before_v, delta, virtual_deltas)

    def scale_last_update(self, rho: float):
        """Re-apply the most recent local update scaled by ``rho`` (server damping)."""
        if self._undo is None or rho == 1.0:
            return
        before, before_v, delta, vdeltas = self._undo
        self.factor.lam = before + rho * delta if rho else before.copy()
        if vdeltas is not None:
            for vf, b, dv in zip(self.virtual_factors, before_v, vdeltas):
                vf.lam = b + rho * dv if rho else b.copy()


def cavity(global_lambda, t_m) -> np.ndarray:
    """Global approximation with one site factor divided out."""
    g, t = natural_vector(global_lambda), natural_vector(t_m)
    if g.shape != t.shape:
        raise DimensionMismatch(f"{g.shape} vs {t.shape}")
    return g - t


def _release(c: ClientState, total: np.ndarray, dp_enabled: bool, noise_rng, noise_scale: float, joint: bool):
    if not dp_enabled:
        return total, False
    sigma = c.dp.noise_multiplier * noise_scale
    noised = gaussian_mechanism(total, 2.0 * c.dp.clip_norm, sigma, noise_rng)
    c.ledger.record("update_perturbation", c.dp.noise_multiplier, 1.0, 1, joint=joint)
    return noised, sigma > 0


def client_update_standard(c: ClientState, global_lambda, solver, dp_enabled: bool = False, *, seed: int = 0,
                           round_index: int = 1) -> UpdateMessage:
    """Regular PVI client step; DP-SGD inside the local optimisation when enabled."""
    if len(c.shard) == 0:
        raise DomainError(f"client {c.id} has no data")
    g = natural_vector(global_lambda)
    rng = stream_rng(seed, round_index, _OPT, c.stream_ids[0])
    dp = c.dp if dp_enabled else None
    lam_star = solver.solve(g, cavity(g, c.factor), c.shard, 1.0, 1.0, rng=rng, dp=dp, ledger=c.ledger)
    delta = lam_star - g
    c._remember(delta)
    c.factor.lam = c.factor.lam + delta
    return UpdateMessage(c.id, delta, round_index, noise_applied=dp is not None and c.dp.noise_multiplier > 0)


def client_update_local_avg(c: ClientState, global_lambda, solver, dp_enabled: bool = False, *, seed: int = 0,
                            round_index: int = 1, noise_scale: float = 1.0, joint: bool = False) -> UpdateMessage:
    """Local averaging: one KL-reweighted fit per partition, release the noised mean change.

    Partition ``k`` maximises ``E_q[log p(x_k)] - KL(q || cavity) / N``.  With
    DP each change is clipped to ``C`` and the sum receives noise with std
    ``sigma * noise_scale * 2C`` before division by ``N``.
    """
    g = natural_vector(global_lambda)
    cav = cavity(g, c.factor)
    n_parts = c.local_partitions
    total = np.zeros_like(g)
    for k, part in enumerate(c.partition_data()):
        rng = stream_rng(seed, round_index, _OPT, c.stream_ids[k])
        lam_k = solver.solve(g, cav, part, 1.0 / n_parts, 1.0, rng=rng)
        d_k = lam_k - g
        if dp_enabled:
            d_k = clip_to_ball(d_k, c.dp.clip_norm)
        total = total + d_k
    noise_rng = stream_rng(seed, round_index, _NOISE, c.id)
    total, noised = _release(c, total, dp_enabled, noise_rng, noise_scale, joint)
    delta = total / n_parts
    c._remember(delta)
    c.factor.lam = c.factor.lam + delta
    return UpdateMessage(c.id, delta, round_index, noise_applied=noised)


def client_update_virtual(c: ClientState, global_lambda, solver, dp_enabled: bool = False, *, seed: int = 0,
                          round_index: int = 1, noise_scale: float = 1.0, joint: bool = False) -> UpdateMessage:
    """Virtual PVI clients: a synchronous local PVI step over partitions, release the noised sum.

    Virtual client ``k`` uses the cavity ``global - t_{m,k}``.  Virtual
    factors absorb only their own (clipped) change, so each one depends on its
    own partition and on released values; the client factor absorbs the
    released sum, noise included.
    """
    g = natural_vector(global_lambda)
    if c.virtual_factors is None:
        c.virtual_factors = [Factor.zeros(g.size // 2, owner=c.id, shard_index=k) for k in range(c.local_partitions)]
    deltas = []
    for k, part in enumerate(c.partition_data()):
        rng = stream_rng(seed, round_index, _OPT, c.stream_ids[k])
        lam_k = solver.solve(g, cavity(g, c.virtual_factors[k]), part, 1.0, 1.0, rng=rng)
        d_k = lam_k - g
        if dp_enabled:
            d_k = clip_to_ball(d_k, c.dp.clip_norm)
        deltas.append(d_k)
    total = np.zeros_like(g)
    for d_k in deltas:
        total = total + d_k
    noise_rng = stream_rng(seed, round_index, _NOISE, c.id)
    total, noised = _release(c, total, dp_enabled, noise_rng, noise_scale, joint)
    c._remember(total, deltas)
    c.factor.lam = c.factor.lam + total
    for vf, d_k in zip(c.virtual_factors, deltas):
        vf.lam = vf.lam + d_k
    return UpdateMessage(c.id, total, round_index, noise_applied=noised)


CLIENT_UPDATES = {
    "standard": client_update_standard,
    "dp_opt": client_update_standard,
    "local_avg": client_update_local_avg,
    "virtual": client_update_virtual,
}


def server_round(global_lambda, schedule: Schedule, clients: list[ClientState], aggregator: AggregatorMode,
                 solver, method: str = "standard", *, seed: int = 0, round_index: int = 1):
    """One global update.  Returns ``(new_global, messages)``.

    Sequential schedules visit a single client (round-robin by position);
    synchronous schedules update every client from the same global state and
    sum the changes in client order.  The aggregate change is applied with the
    schedule's damping; a non-normalizable result is retried once with half
    the damping before :class:`NonNormalizableGlobal` is raised.
    """
    if method not in CLIENT_UPDATES:
        raise ConfigError(f"unknown method {method!r}")
    if aggregator.trusted and schedule.kind != "synchronous":
        raise ConfigError("a trusted aggregator requires the synchronous schedule")
    g = natural_vector(global_lambda).copy()
    if schedule.kind == "sequential":
        chosen = [clients[(round_index - 1) % len(clients)]]
    else:
        chosen = list(clients)
    update = CLIENT_UPDATES[method]
    dp_enabled = method != "standard"
    kwargs = {"seed": seed, "round_index": round_index}
    if method in ("local_avg", "virtual"):
        kwargs["noise_scale"] = 1.0 / math.sqrt(len(clients)) if aggregator.trusted else 1.0
        kwargs["joint"] = aggregator.trusted
    messages = []
    try:
        for c in chosen:
            messages.append(update(c, g, solver, dp_enabled, **kwargs))
    except Exception:
        for c in chosen[: len(messages)]:
            c.scale_last_update(0.0)
        raise
    total = np.zeros_like(g)
    for msg in messages:
        total = total + msg.delta_lambda

    rho = schedule.damping
    for attempt in range(2):
        new_global = g + total if rho == 1.0 else g + rho * total
        if solver.is_normalizable(new_global):
            for c in chosen:
                c.scale_last_update(rho)
            return new_global, messages
        rho = rho / 2.0
    for c in chosen:
        c.scale_last_update(0.0)
    raise NonNormalizableGlobal(f"global approximation left the family in round {round_index}")


# --------------------------------------------------------------------------
# traces


@dataclass
class RoundRecord:
    round: int
    accuracy: float | None
    mean_loglik: float | None
    cumulative_communications: int
    epsilons: list | None
    lambda_checksum: str

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "epsilons": self.epsilons,
            "accuracy": self.accuracy,
            "mean_loglik": self.mean_loglik,
            "cumulative_communications": self.cumulative_communications,
            "lambda_checksum": self.lambda_checksum,
        }


@dataclass
class ExperimentTrace:
    method: str
    records: list[RoundRecord] = field(default_factory=list)
    final_lambda: np.ndarray | None = None
    lambda_history: list[np.ndarray] = field(default_factory=list)
    ledgers: list[PrivacyLedger] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    clients: list[ClientState] = field(default_factory=list, repr=False)

    @property
    def communications(self) -> int:
        return self.records[-1].cumulative_communications if self.records else 0

    @property
    def final_q(self) -> MeanFieldGaussian:
        return MeanFieldGaussian.from_lambda(self.final_lambda)

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]


def _record(trace, round_index, lam, comms, epsilons, model, heldout, seed, n_mc, keep_history):
    acc = ll = None
    if heldout is not None and len(heldout):
        rng = stream_rng(seed, round_index, _EVAL, 0)
        acc, ll = evaluate_model(lam, heldout, model, n_mc=n_mc, rng=rng)
    trace.records.append(RoundRecord(round_index, acc, ll, comms, epsilons, lambda_checksum(lam)))
    if keep_history:
        trace.lambda_history.append(np.array(lam, copy=True))


# --------------------------------------------------------------------------
# DP planning


def planned_visits(schedule: Schedule, n_clients: int, client_index: int) -> int:
    if schedule.kind == "synchronous":
        return schedule.global_updates
    s = schedule.global_updates
    return s // n_clients + (1 if client_index < s % n_clients else 0)


def plan_client_dp(method: str, dp: DpConfig, schedule: Schedule, shards, lot_size,
                   local_steps: int) -> list[DpConfig]:
    """Per-client DP configuration with the noise multiplier resolved.

    With an explicit ``noise_multiplier`` it is used as given.  Otherwise the
    multiplier is calibrated to ``target_epsilon`` for each client's planned
    number of mechanism invocations over the whole run.
    """
    m = len(shards)
    kind = "dp_sgd" if method == "dp_opt" else "update_perturbation"
    out = []
    for j, shard in enumerate(shards):
        visits = planned_visits(schedule, m, j)
        if method == "dp_opt":
            steps, q = visits * local_steps, lot_size(len(shard)) / len(shard)
        else:
            steps, q = visits, 1.0
        if dp.target_epsilon is None or steps == 0:
            out.append(replace(dp, subsample_fraction=q, mechanism_kind=kind))
            continue
        sigma = calibrate_sigma(dp.target_epsilon, dp.target_delta, q, steps)
        out.append(replace(dp, noise_multiplier=sigma, subsample_fraction=q, mechanism_kind=kind))
    return out


# --------------------------------------------------------------------------
# drivers


@dataclass
class RunConfig:
    """Everything a simulation needs besides the data."""

    model: ModelSpec
    method: str = "standard"
    schedule: Schedule = Schedule()
    aggregator: AggregatorMode = AggregatorMode()
    opt: OptimizerConfig = OptimizerConfig()
    dp: DpConfig | None = None
    local_partitions: int | list[int] = 1
    seed: int = 0
    n_mc_eval: int = 100
    eval_every: int = 1
    keep_history: bool = False


def make_clients(shards: list[Dataset], d: int, local_partitions=1, seed: int = 0, dps=None) -> list[ClientState]:
    """Client states with zero factors and local partitions drawn from ``seed``."""
    from .data import partition_local

    parts = local_partitions if isinstance(local_partitions, (list, tuple)) else [local_partitions] * len(shards)
    if len(parts) != len(shards):
        raise ConfigError("one partition count per client is required")
    clients, next_stream = [], 0
    for j, (shard, n_parts) in enumerate(zip(shards, parts)):
        idx = partition_local(np.arange(len(shard)), n_parts, seed=(seed, j)) if n_parts > 1 else None
        stream_ids = list(range(next_stream, next_stream + n_parts))
        next_stream += n_parts
        clients.append(ClientState(
            id=j, shard=shard, factor=Factor.zeros(d, owner=j), local_partitions=n_parts,
            partitions=idx, dp=None if dps is None else dps[j], stream_ids=stream_ids,
        ))
    return clients


def _epsilons(ledgers, delta, dp_active):
    if not dp_active:
        return None
    return [led.epsilon(delta) for led in ledgers]


def run_pvi(config: RunConfig, shards: list[Dataset], heldout: Dataset | None = None, solver=None,
            prior=None) -> ExperimentTrace:
    """Run ``S`` global updates of (DP-)PVI and record per-round metrics."""
    if config.method not in METHODS:
        raise ConfigError(f"unknown PVI method {config.method!r}")
    dp_active = config.method != "standard"
    if dp_active and config.dp is None:
        raise ConfigError(f"method {config.method!r} needs a DP configuration")
    if config.aggregator.trusted and config.method not in ("local_avg", "virtual"):
        raise ConfigError("the trusted aggregator applies to local_avg and virtual only")
    model = config.model
    solver = solver or VISolver(model, config.opt)
    prior = prior_lambda(model.param_dim) if prior is None else np.asarray(prior, dtype=np.float64)
    d = prior.size // 2

    dps = None
    if dp_active:
        dps = plan_client_dp(config.method, config.dp, config.schedule, shards, solver.lot_size,
                             config.opt.local_steps)
    clients = make_clients(shards, d, config.local_partitions if config.method in ("local_avg", "virtual") else 1,
                           config.seed, dps)
    if config.method == "virtual":
        for c in clients:
            c.virtual_factors = [Factor.zeros(d, owner=c.id, shard_index=k) for k in range(c.local_partitions)]

    trace = ExperimentTrace(method=config.method, clients=clients, ledgers=[c.ledger for c in clients])
    trace.metadata.update({
        "schedule": config.schedule.kind, "aggregator": config.aggregator.kind, "damping": config.schedule.damping,
        "noise_multipliers": None if dps is None else [x.noise_multiplier for x in dps],
        "subsampling": SUBSAMPLING_LABEL if config.method == "dp_opt" else None,
    })
    delta = config.dp.target_delta if config.dp else 1e-5
    g = prior.copy()
    comms = 0
    _record(trace, 0, g, comms, _epsilons(trace.ledgers, delta, dp_active), model, heldout, config.seed,
            config.n_mc_eval, config.keep_history)
    for s in range(1, config.schedule.global_updates + 1):
        g, messages = server_round(g, config.schedule, clients, config.aggregator, solver, config.method,
                                   seed=config.seed, round_index=s)
        comms += 2 * len(messages)
        if s % config.eval_every == 0 or s == config.schedule.global_updates:
            _record(trace, s, g, comms, _epsilons(trace.ledgers, delta, dp_active), model, heldout, config.seed,
                    config.n_mc_eval, config.keep_history)
    trace.final_lambda = g
    return trace


def _dp_for_pooled(dp: DpConfig | None, q: float, steps: int) -> DpConfig | None:
    if dp is None:
        return None
    if dp.target_epsilon is None:
        return replace(dp, subsample_fraction=q)
    sigma = calibrate_sigma(dp.target_epsilon, dp.target_delta, q, steps)
    return replace(dp, noise_multiplier=sigma, subsample_fraction=q)


def run_global_vi(config: RunConfig, shards: list[Dataset], heldout: Dataset | None = None, solver=None,
                  trajectory: list | None = None) -> ExperimentTrace:
    """Centralised (DP-)VI on pooled data behind a trusted aggregator.

    ``config.opt.local_steps`` is the total number of optimisation steps and
    ``config.eval_every`` counts steps between records.  Every step costs
    ``2 M`` messages (model out, gradient back, for each of ``M`` clients).
    """
    model = config.model
    solver = solver or VISolver(model, config.opt)
    prior = prior_lambda(model.param_dim)
    pooled = Dataset.concat(shards)
    m = len(shards)
    steps = config.opt.local_steps
    q = solver.lot_size(len(pooled)) / len(pooled)
    dp = _dp_for_pooled(config.dp, q, steps)
    ledger = PrivacyLedger(owner="pooled")
    trace = ExperimentTrace(method="global_vi", ledgers=[ledger])
    trace.metadata.update({"noise_multipliers": None if dp is None else [dp.noise_multiplier],
                           "subsampling": SUBSAMPLING_LABEL if dp is not None else None})
    delta = dp.target_delta if dp else 1e-5
    _record(trace, 0, prior, 0, _epsilons([ledger], delta, dp is not None), model, heldout, config.seed,
            config.n_mc_eval, config.keep_history)
    d = model.param_dim

    def to_lambda(params):
        var = np.exp(params[d:])
        return np.concatenate([params[:d] / var, -0.5 / var])

    def on_step(step, params):
        if trajectory is not None:
            trajectory.append(params.copy())
        if step % config.eval_every == 0 and step != steps:
            eps = None if dp is None else [_partial_eps(dp, q, step, delta)]
            _record(trace, step, to_lambda(params), 2 * step * m, eps, model, heldout, config.seed,
                    config.n_mc_eval, config.keep_history)

    rng = stream_rng(config.seed, 1, _OPT, 0)
    lam = solver.solve(prior, prior, pooled, 1.0, 1.0, rng=rng, dp=dp, ledger=ledger, callback=on_step)
    _record(trace, steps, lam, 2 * steps * m, _epsilons([ledger], delta, dp is not None), model, heldout,
            config.seed, config.n_mc_eval, config.keep_history)
    trace.final_lambda = lam
    return trace


def _partial_eps(dp: DpConfig, q: float, steps: int, delta: float) -> float:
    led = PrivacyLedger()
    led.record("dp_sgd", dp.noise_multiplier, q, steps)
    return led.epsilon(delta)


def run_bcm(variant: str, config: RunConfig, shards: list[Dataset], heldout: Dataset | None = None,
            solver=None) -> ExperimentTrace:
    """Bayesian committee machine baseline: one DP-VI fit per client, one upload each.

    ``same``: every client uses the full prior and the server subtracts the
    ``M - 1`` surplus priors.  ``split``: every client uses the prior with
    natural parameters divided by ``M`` and the server sums the local fits.
    """
    if variant not in ("same", "split"):
        raise ConfigError(f"unknown BCM variant {variant!r}")
    model = config.model
    solver = solver or VISolver(model, config.opt)
    prior = prior_lambda(model.param_dim)
    m = len(shards)
    local_prior = prior if variant == "same" else prior / m
    steps = config.opt.local_steps
    ledgers, fits = [], []
    noise = []
    for j, shard in enumerate(shards):
        q = solver.lot_size(len(shard)) / len(shard)
        dp = _dp_for_pooled(config.dp, q, steps)
        noise.append(None if dp is None else dp.noise_multiplier)
        led = PrivacyLedger(owner=j)
        rng = stream_rng(config.seed, 1, _OPT, j)
        fits.append(solver.solve(local_prior, local_prior, shard, 1.0, 1.0, rng=rng, dp=dp, ledger=led))
        ledgers.append(led)
    combined = np.zeros_like(prior)
    for lam in fits:
        combined = combined + lam
    if variant == "same":
        combined = combined - (m - 1) * prior
    if not solver.is_normalizable(combined):
        raise NonNormalizableGlobal("combined committee posterior is not normalizable")
    trace = ExperimentTrace(method=f"bcm_{variant}", ledgers=ledgers)
    trace.metadata.update({"noise_multipliers": noise if config.dp else None,
                           "subsampling": SUBSAMPLING_LABEL if config.dp else None})
    delta = config.dp.target_delta if config.dp else 1e-5
    _record(trace, 0, prior, 0, _epsilons(ledgers, delta, False), model, heldout, config.seed, config.n_mc_eval,
            config.keep_history)
    _record(trace, 1, combined, 2 * m, _epsilons(ledgers, delta, config.dp is not None), model, heldout,
            config.seed, config.n_mc_eval, config.keep_history)
    trace.final_lambda = combined
    return trace
