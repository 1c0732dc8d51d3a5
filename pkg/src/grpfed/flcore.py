"""Federated round orchestration: server aggregation and client training.

One round: select a client subset, run each client's update independently on
copies of the global model, then aggregate the returned parameters with
loss-powered weights. The power q adapts each round to the dispersion of
client losses, so rounds where clients disagree push weight toward the
strugglers.

Client updates never touch shared state; all mutation of the server and the
client registry happens in `run_round` after every client has succeeded, so
a failed client aborts the round with everything still at its round-start
values. Updates for distinct clients may therefore run concurrently as long
as the commit stays single-threaded; this module runs them sequentially.
"""

from __future__ import annotations

import logging
import math
import pickle
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nncore as nn
from .datagen import ClientDataset
from .errors import ConfigError, NumericalError, RoundAbort
from .seeds import TAG_BATCH, TAG_DISC_INIT, TAG_INIT, TAG_SELECT, rng_for

log = logging.getLogger(__name__)

KIND_GRPFED = "grpfed"
KIND_FEDAVG = "fedavg"
KIND_QFFL = "qffl"
KIND_LOCAL = "local"
STRATEGY_KINDS = (KIND_GRPFED, KIND_FEDAVG, KIND_QFFL, KIND_LOCAL)

# Strategies that train per-client personalized models (vs. global-only ones,
# whose "local model" at evaluation time is the global model itself).
PERSONALIZED_KINDS = (KIND_GRPFED, KIND_LOCAL)

LOSS_FLOOR = 1e-12  # aggregation clamps non-positive losses here


@dataclass
class ModelConfig:
    """Network dimensions shared by every model in a run."""

    input_dim: int
    num_classes: int
    feature_dim: int = 32
    extractor_hidden: int = 64
    classifier_hidden: int = 32
    disc_hidden: int = 32

    def extractor_dims(self) -> list[int]:
        return [self.input_dim, self.extractor_hidden, self.extractor_hidden, self.feature_dim]

    def classifier_dims(self) -> list[int]:
        return [self.feature_dim, self.classifier_hidden, self.num_classes]

    def discriminator_dims(self) -> list[int]:
        return [self.feature_dim, self.disc_hidden, 1]


@dataclass
class StrategyConfig:
    """Training strategy and its hyperparameters."""

    kind: str = KIND_GRPFED
    rounds: int = 100
    local_epochs: int = 5
    batch_size: int = 64
    client_fraction: float = 0.5
    lr: float = 5e-3
    momentum: float = 0.9
    q0: float = 10.0
    q_lr: float = 0.5
    beta: float = 0.5
    disc_enabled: bool = True
    seed: int = 0

    def resolved(self) -> "StrategyConfig":
        """Validate and normalize: qffl pins q_lr to 0 by definition."""
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds, local_epochs and batch_size must be >= 1")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError("client_fraction must lie in (0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.q0 < 0.0 or self.q_lr < 0.0:
            raise ConfigError("q0 and q_lr must be >= 0")
        if self.lr < 0.0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("need lr >= 0 and momentum in [0, 1)")
        out = replace(self)
        if self.kind == KIND_QFFL:
            out = replace(out, q_lr=0.0)
        return out


@dataclass
class ServerState:
    """Global model plus the adaptive-power bookkeeping."""

    theta_f: nn.ModelParams
    theta_c: nn.ModelParams
    q: float
    prev_loss_std: float | None = None
    round_idx: int = 0


@dataclass
class ClientState:
    """One client's persistent models and optimizer buffers.

    `theta_c_local` exists only under the local-only strategy, where each
    client trains a private classifier; every other strategy shares the
    server's classifier.
    """

    client_id: int
    theta_f_local: nn.ModelParams
    theta_d: nn.ModelParams
    opt_local: nn.OptimizerState
    opt_disc: nn.OptimizerState
    theta_c_local: nn.ModelParams | None = None
    opt_c_local: nn.OptimizerState | None = None
    last_global_loss: float | None = None


@dataclass
class RoundReport:
    """What happened in one round, for curves and summaries.

    `lambdas` and `q` are None for strategies without them (no aggregation
    under local-only; no q machinery under plain averaging).
    """

    round_idx: int
    selected: list[int]
    losses: dict[int, float]
    mean_loss: float
    max_loss: float
    lambdas: dict[int, float] | None = None
    q: float | None = None
    aux_losses: dict[str, float] = field(default_factory=dict)


@dataclass
class ClientUpdateResult:
    theta_f: nn.ModelParams | None  # trained global-extractor copy (None for local-only)
    theta_c: nn.ModelParams | None
    loss: float  # final-epoch mean training loss of the reported objective
    state: ClientState
    epoch_losses: list[float]
    aux: dict[str, float] = field(default_factory=dict)


def init_federation(
    model_cfg: ModelConfig, cfg: StrategyConfig, num_clients: int
) -> tuple[ServerState, dict[int, ClientState]]:
    """Seeded initial server and client states.

    Local extractors start as copies of the initial global extractor (so the
    discriminator sees near-identical feature sources at round 0);
    discriminators are drawn independently per client.
    """
    rng = rng_for(cfg.seed, TAG_INIT)
    theta_f = nn.init_mlp(model_cfg.extractor_dims(), nn.ROLE_EXTRACTOR, rng)
    theta_c = nn.init_mlp(model_cfg.classifier_dims(), nn.ROLE_CLASSIFIER, rng)
    server = ServerState(theta_f=theta_f, theta_c=theta_c, q=cfg.q0)

    clients: dict[int, ClientState] = {}
    for m in range(num_clients):
        theta_f_local = theta_f.copy()
        theta_d = nn.init_mlp(
            model_cfg.discriminator_dims(),
            nn.ROLE_DISCRIMINATOR,
            rng_for(cfg.seed, TAG_DISC_INIT, m),
        )
        state = ClientState(
            client_id=m,
            theta_f_local=theta_f_local,
            theta_d=theta_d,
            opt_local=nn.OptimizerState.for_params(theta_f_local, cfg.lr, cfg.momentum),
            opt_disc=nn.OptimizerState.for_params(theta_d, cfg.lr, cfg.momentum),
        )
        if cfg.kind == KIND_LOCAL:
            state.theta_c_local = theta_c.copy()
            state.opt_c_local = nn.OptimizerState.for_params(
                state.theta_c_local, cfg.lr, cfg.momentum
            )
        clients[m] = state
    return server, clients


def select_clients(num_clients: int, fraction: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of ceil(fraction * M) clients, sorted."""
    k = math.ceil(fraction * num_clients)
    if not 1 <= k <= num_clients:
        raise ConfigError(f"cannot select {k} of {num_clients} clients")
    return sorted(rng.choice(num_clients, size=k, replace=False).tolist())


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def client_update(
    state: ClientState,
    data: ClientDataset,
    theta_f_global: nn.ModelParams,
    theta_c_global: nn.ModelParams,
    cfg: StrategyConfig,
    round_idx: int,
) -> ClientUpdateResult:
    """Run one client's local training for the round.

    Under grpfed each batch goes through three phases, in order:
      1. a step on the client's copies of the global extractor + classifier
         (plain classification loss);
      2. a step on the personalized extractor only, on
         beta * local classification loss + (1 - beta) * regularizer, with
         the round-start classifier and the discriminator both frozen;
      3. a discriminator step, with global features taken from the
         round-start global extractor and local features from the
         personalized extractor as just updated.

    fedavg/qffl run phase 1 only; local-only instead trains the client's
    private extractor + classifier pair and reports that loss.

    Inputs are never mutated; the returned state replaces the old one only
    when the caller commits the round.
    """
    rng = rng_for(cfg.seed, TAG_BATCH, round_idx, state.client_id)
    x_all, y_all = data.train_x, data.train_y
    n = len(y_all)

    if cfg.kind == KIND_LOCAL:
        return _local_only_update(state, x_all, y_all, cfg, rng)

    theta_f = theta_f_global.copy()
    theta_c = theta_c_global.copy()
    opt_f = nn.OptimizerState.for_params(theta_f, cfg.lr, cfg.momentum)
    opt_c = nn.OptimizerState.for_params(theta_c, cfg.lr, cfg.momentum)

    personalize = cfg.kind == KIND_GRPFED
    theta_fl = state.theta_f_local.copy()
    theta_d = state.theta_d.copy()
    opt_fl = state.opt_local.copy()
    opt_d = state.opt_disc.copy()

    epoch_losses: list[float] = []
    aux_sums: dict[str, float] = {}
    for _ in range(cfg.local_epochs):
        g_sum = 0.0
        aux_sums = {"local": 0.0, "reg": 0.0, "disc": 0.0}
        for idx in _batches(n, cfg.batch_size, rng):
            x, y = x_all[idx], y_all[idx]

            # Phase 1: global-model step.
            f, cf = nn.forward(theta_f, x)
            logits, cc = nn.forward(theta_c, f)
            g_loss, d_logits = nn.cross_entropy(logits, y)
            if not np.isfinite(g_loss):
                raise NumericalError(
                    f"client {state.client_id}: non-finite global loss at round {round_idx}"
                )
            g_c, d_f = nn.backward(theta_c, cc, d_logits)
            g_f, _ = nn.backward(theta_f, cf, d_f)
            nn.sgd_step(theta_f, g_f, opt_f)
            nn.sgd_step(theta_c, g_c, opt_c)
            g_sum += g_loss * len(y)

            if personalize:
                # Phase 2: personalized-extractor step; classifier (round-start
                # snapshot) and discriminator receive no update.
                fl, cfl = nn.forward(theta_fl, x)
                logits_l, ccl = nn.forward(theta_c_global, fl)
                l_loss, d_logits_l = nn.cross_entropy(logits_l, y)
                _, d_fl_cls = nn.backward(theta_c_global, ccl, d_logits_l)
                if cfg.disc_enabled:
                    probs_l, dcache = nn.discriminate_with_cache(theta_d, fl)
                    r_loss, d_probs = nn.reg_loss(probs_l)
                    _, d_fl_reg = nn.disc_backward(theta_d, dcache, d_probs)
                    d_fl = cfg.beta * d_fl_cls + (1.0 - cfg.beta) * d_fl_reg
                else:
                    r_loss = 0.0
                    d_fl = cfg.beta * d_fl_cls
                if not np.isfinite(l_loss) or not np.isfinite(r_loss):
                    raise NumericalError(
                        f"client {state.client_id}: non-finite local loss at round {round_idx}"
                    )
                g_fl, _ = nn.backward(theta_fl, cfl, d_fl)
                nn.sgd_step(theta_fl, g_fl, opt_fl)
                aux_sums["local"] += l_loss * len(y)
                aux_sums["reg"] += r_loss * len(y)

                # Phase 3: discriminator step on round-start global features
                # vs. current local features (both feature sources frozen).
                if cfg.disc_enabled:
                    f_g = nn.forward(theta_f_global, x)[0]
                    f_l = nn.forward(theta_fl, x)[0]
                    p_g, cache_g = nn.discriminate_with_cache(theta_d, f_g)
                    p_l, cache_l = nn.discriminate_with_cache(theta_d, f_l)
                    d_loss, d_pg, d_pl = nn.disc_loss(p_g, p_l)
                    if not np.isfinite(d_loss):
                        raise NumericalError(
                            f"client {state.client_id}: non-finite discriminator loss "
                            f"at round {round_idx}"
                        )
                    grad_g, _ = nn.disc_backward(theta_d, cache_g, d_pg)
                    grad_l, _ = nn.disc_backward(theta_d, cache_l, d_pl)
                    nn.sgd_step(theta_d, grad_g.add(grad_l), opt_d)
                    aux_sums["disc"] += d_loss * len(y)
        epoch_losses.append(g_sum / n)

    new_state = ClientState(
        client_id=state.client_id,
        theta_f_local=theta_fl if personalize else state.theta_f_local.copy(),
        theta_d=theta_d if personalize else state.theta_d.copy(),
        opt_local=opt_fl if personalize else state.opt_local.copy(),
        opt_disc=opt_d if personalize else state.opt_disc.copy(),
        last_global_loss=epoch_losses[-1],
    )
    aux = {}
    if personalize:
        aux = {
            "local": aux_sums["local"] / n,
            "reg": aux_sums["reg"] / n,
            "disc": aux_sums["disc"] / n,
        }
    return ClientUpdateResult(
        theta_f=theta_f,
        theta_c=theta_c,
        loss=epoch_losses[-1],
        state=new_state,
        epoch_losses=epoch_losses,
        aux=aux,
    )


def _local_only_update(
    state: ClientState,
    x_all: np.ndarray,
    y_all: np.ndarray,
    cfg: StrategyConfig,
    rng: np.random.Generator,
) -> ClientUpdateResult:
    theta_fl = state.theta_f_local.copy()
    theta_cl = state.theta_c_local.copy()  # type: ignore[union-attr]
    opt_fl = state.opt_local.copy()
    opt_cl = state.opt_c_local.copy()  # type: ignore[union-attr]
    n = len(y_all)
    epoch_losses = []
    for _ in range(cfg.local_epochs):
        total = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            x, y = x_all[idx], y_all[idx]
            f, cf = nn.forward(theta_fl, x)
            logits, cc = nn.forward(theta_cl, f)
            loss, d_logits = nn.cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise NumericalError(f"client {state.client_id}: non-finite local loss")
            g_c, d_f = nn.backward(theta_cl, cc, d_logits)
            g_f, _ = nn.backward(theta_fl, cf, d_f)
            nn.sgd_step(theta_fl, g_f, opt_fl)
            nn.sgd_step(theta_cl, g_c, opt_cl)
            total += loss * len(y)
        epoch_losses.append(total / n)
    new_state = ClientState(
        client_id=state.client_id,
        theta_f_local=theta_fl,
        theta_d=state.theta_d.copy(),
        opt_local=opt_fl,
        opt_disc=state.opt_disc.copy(),
        theta_c_local=theta_cl,
        opt_c_local=opt_cl,
        last_global_loss=epoch_losses[-1],
    )
    return ClientUpdateResult(
        theta_f=None,
        theta_c=None,
        loss=epoch_losses[-1],
        state=new_state,
        epoch_losses=epoch_losses,
    )


def adapt_q(q: float, sigma_prev: float | None, sigma_new: float, q_lr: float) -> float:
    """One adaptive-power update from consecutive loss dispersions.

    q' = q + q_lr * (sigma_new - sigma_prev) / ((sigma_new + sigma_prev) / 2),
    floored at 0. The first round (no previous dispersion) and a fully fair
    round pair (both dispersions zero) leave q unchanged.
    """
    if sigma_prev is None:
        return q
    half_sum = (sigma_new + sigma_prev) / 2.0
    if half_sum == 0.0:
        return q
    q_new = q + q_lr * (sigma_new - sigma_prev) / half_sum
    if q_new < 0.0:
        log.warning("adaptive power went negative (%.4f); flooring at 0", q_new)
        return 0.0
    return q_new


def _weighted_sum(params_list: list[nn.ModelParams], lam: np.ndarray) -> nn.ModelParams:
    # Accumulate in client-index order so the reduction is deterministic.
    out = params_list[0].copy()
    for arrs in (out.weights, out.biases):
        for a in arrs:
            a *= lam[0]
    for weight, params in zip(lam[1:], params_list[1:]):
        for acc, arr in zip(out.weights, params.weights):
            acc += weight * arr
        for acc, arr in zip(out.biases, params.biases):
            acc += weight * arr
    return out


def aggregate(
    client_params: list[tuple[nn.ModelParams, nn.ModelParams]],
    losses: list[float],
    q: float,
) -> tuple[nn.ModelParams, nn.ModelParams, np.ndarray]:
    """Loss-powered aggregation of (extractor, classifier) pairs.

    lambda_i = losses_i^q / sum_j losses_j^q, computed in log space so large
    q cannot overflow; q = 0 short-circuits to exactly uniform weights.
    """
    if not client_params:
        raise ConfigError("aggregate needs at least one client")
    arr = np.asarray(losses, dtype=float)
    if (arr <= 0.0).any():
        log.warning("non-positive client losses %s clamped to %g", arr[arr <= 0.0], LOSS_FLOOR)
        arr = np.maximum(arr, LOSS_FLOOR)
    k = len(arr)
    if q == 0.0:
        lam = np.full(k, 1.0 / k)
    else:
        logw = q * np.log(arr)
        logw -= logw.max()
        w = np.exp(logw)
        lam = w / w.sum()
    theta_f = _weighted_sum([p[0] for p in client_params], lam)
    theta_c = _weighted_sum([p[1] for p in client_params], lam)
    return theta_f, theta_c, lam


def run_round(
    server: ServerState,
    clients: dict[int, ClientState],
    datasets: dict[int, ClientDataset],
    cfg: StrategyConfig,
) -> RoundReport:
    """Execute one federated round, mutating server and clients on success.

    Any client failure aborts the round before anything is committed, so the
    caller observes round-start state on error.
    """
    round_idx = server.round_idx
    rng = rng_for(cfg.seed, TAG_SELECT, round_idx)
    selected = select_clients(len(clients), cfg.client_fraction, rng)

    results: dict[int, ClientUpdateResult] = {}
    try:
        for m in selected:
            results[m] = client_update(
                clients[m], datasets[m], server.theta_f, server.theta_c, cfg, round_idx
            )
    except NumericalError as exc:
        raise RoundAbort(f"round {round_idx} aborted: {exc}") from exc

    losses = [results[m].loss for m in selected]
    mean_loss = float(np.mean(losses))
    max_loss = float(np.max(losses))
    lambdas = None
    q_report = None

    if cfg.kind in (KIND_GRPFED, KIND_QFFL):
        sigma_new = float(np.std(losses))
        q_new = adapt_q(server.q, server.prev_loss_std, sigma_new, cfg.q_lr)
        theta_f, theta_c, lam = aggregate(
            [(results[m].theta_f, results[m].theta_c) for m in selected], losses, q_new
        )
        server.theta_f, server.theta_c = theta_f, theta_c
        server.q = q_new
        server.prev_loss_std = sigma_new
        lambdas = {m: float(l) for m, l in zip(selected, lam)}
        q_report = q_new
    elif cfg.kind == KIND_FEDAVG:
        theta_f, theta_c, lam = aggregate(
            [(results[m].theta_f, results[m].theta_c) for m in selected], losses, 0.0
        )
        server.theta_f, server.theta_c = theta_f, theta_c
        lambdas = {m: float(l) for m, l in zip(selected, lam)}
    # local-only: the server model is never touched.

    for m in selected:
        clients[m] = results[m].state
    server.round_idx = round_idx + 1

    aux: dict[str, float] = {}
    if cfg.kind == KIND_GRPFED:
        aux = {
            "loss_global_sum": float(np.sum(losses)),
            "loss_local_mean": float(np.mean([results[m].aux["local"] for m in selected])),
            "loss_reg_mean": float(np.mean([results[m].aux["reg"] for m in selected])),
            "loss_disc_mean": float(np.mean([results[m].aux["disc"] for m in selected])),
        }
        # Combined training loss across the round, reported for curves only.
        aux["loss_total"] = float(
            np.sum(losses)
            + sum(
                cfg.beta * results[m].aux["local"] + (1.0 - cfg.beta) * results[m].aux["reg"]
                for m in selected
            )
            + sum(results[m].aux["disc"] for m in selected)
        )

    return RoundReport(
        round_idx=round_idx,
        selected=selected,
        losses={m: results[m].loss for m in selected},
        mean_loss=mean_loss,
        max_loss=max_loss,
        lambdas=lambdas,
        q=q_report,
        aux_losses=aux,
    )


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def predict(extractor: nn.ModelParams, classifier: nn.ModelParams, x: np.ndarray) -> np.ndarray:
    """Predicted labels for a feature matrix; ties break to the lowest class."""
    logits = nn.forward_classify(classifier, nn.forward_features(extractor, x))
    return np.argmax(logits, axis=1)


def local_model_for(
    server: ServerState, state: ClientState, personalized: bool
) -> tuple[nn.ModelParams, nn.ModelParams]:
    """The (extractor, classifier) pair acting as a client's local model."""
    if not personalized:
        return server.theta_f, server.theta_c
    classifier = state.theta_c_local if state.theta_c_local is not None else server.theta_c
    return state.theta_f_local, classifier


def infer(
    x: np.ndarray,
    owner: int | None,
    server: ServerState,
    clients: dict[int, ClientState],
    personalized: bool = True,
) -> np.ndarray:
    """Route examples through the owner's local model, or the global one.

    `x` is a (n, d) matrix; returns predicted labels. Unknown owner ids are a
    configuration error.
    """
    if owner is None:
        return predict(server.theta_f, server.theta_c, x)
    if owner not in clients:
        raise ConfigError(f"unknown client id {owner}")
    extractor, classifier = local_model_for(server, clients[owner], personalized)
    return predict(extractor, classifier, x)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    server: ServerState,
    clients: dict[int, ClientState],
    cfg: StrategyConfig,
) -> None:
    """Dump everything needed for a bit-exact resume.

    All randomness is derived from (seed, round, client), so the config and
    round index stand in for live RNG streams.
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "server": server,
        "clients": clients,
        "config": cfg,
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh)


def load_checkpoint(
    path: str | Path,
) -> tuple[ServerState, dict[int, ClientState], StrategyConfig]:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')!r}")
    return payload["server"], payload["clients"], payload["config"]
