"""Federated training loop: client-side embedding updates, uniform client
sampling, optional Gaussian noise on uploads, and data-size weighted
averaging.

The aggregation path only ever sees ``(client_id, ModelParams, n_k)``
tuples; watermark keys and trigger sets live inside ``ClientState`` and
are never passed to the server-side functions.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, Shard
from .errors import ConfigError, StateError
from .nn import Network, SgdMomentum, accuracy, rng_for, softmax
from .watermark import WatermarkKey, bce_reg, hinge_reg, keygen, verify_black, verify_white

TRAINABLE_ROLES = ("kernel", "scale", "bias")


@dataclass
class WatermarkSpec:
    """Per-client embedding assignment."""
    mode: str = "scale"          # scale | kernel
    n_bits: int = 8
    n_triggers: int = 0
    loss: str = "hinge"          # hinge | bce
    alpha: float = 0.0           # trigger loss weight
    beta: float = 0.0            # feature regularizer weight
    trigger_kind: str = "pattern"


@dataclass
class ClientState:
    client_id: int
    shard: Shard
    data: Dataset
    net: Network
    key: Optional[WatermarkKey] = None
    alpha: float = 0.0
    beta: float = 0.0
    loss_kind: str = "hinge"

    @property
    def n_samples(self):
        return self.data.n


@dataclass
class FedConfig:
    n_clients: int = 8
    fraction: float = 1.0
    rounds: int = 60
    local_epochs: int = 2
    batch: int = 16
    backdoor_batch: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.99
    dp_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("fraction must be in (0, 1]")
        if self.n_clients < 1 or math.ceil(self.fraction * self.n_clients) < 1:
            raise ConfigError("need at least one client per round")
        for name in ("lr", "momentum", "lr_decay", "dp_sigma"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.dp_sigma < 0:
            raise ConfigError("dp_sigma must be >= 0")


@dataclass
class RoundLog:
    round_index: int
    selected: tuple
    accuracy: Optional[float]
    loss_main: dict = field(default_factory=dict)
    loss_trigger: dict = field(default_factory=dict)
    loss_feature: dict = field(default_factory=dict)
    eta: dict = field(default_factory=dict)
    trigger_error: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# client side

def _reg_for(loss_kind):
    if loss_kind == "hinge":
        return hinge_reg
    if loss_kind == "bce":
        return bce_reg
    raise ConfigError(f"unknown feature loss {loss_kind!r}")


def client_update(state, global_params, cfg, round_index=0):
    """Local embedding update: minibatch momentum SGD on

        L = L_main + alpha * L_trigger + beta * R_feature

    starting from the distributed global parameters.  Trigger samples
    extend each clean batch (batch poisoning).  Returns the updated local
    parameters and the mean loss decomposition.
    """
    if state.beta > 0 and state.key is None:
        raise ConfigError(f"client {state.client_id}: beta > 0 but no watermark key")
    if state.alpha > 0 and (state.key is None or state.key.triggers is None):
        raise ConfigError(f"client {state.client_id}: alpha > 0 but no trigger set")
    net = state.net
    net.set_params(global_params)
    losses = {"main": [], "trigger": [], "feature": []}
    if cfg.local_epochs == 0:
        return net.get_params(), {k: 0.0 for k in losses}

    reg = _reg_for(state.loss_kind)
    opt = SgdMomentum(net.params, cfg.momentum)
    lr = cfg.lr * cfg.lr_decay ** round_index
    use_triggers = state.alpha > 0
    if use_triggers:
        trig_rng = rng_for(cfg.seed, "trigger-batches", round_index, state.client_id)
    for epoch in range(cfg.local_epochs):
        # shuffle stream is shared across clients so that identical shards
        # under identical configs produce identical updates
        order = rng_for(cfg.seed, "batches", round_index, epoch).permutation(state.data.n)
        for start in range(0, state.data.n, cfg.batch):
            idx = order[start:start + cfg.batch]
            xb = state.data.inputs[idx]
            yb = state.data.labels[idx]
            n_clean = len(idx)
            n_trig = 0
            if use_triggers:
                trig = state.key.triggers
                pick = trig_rng.integers(0, trig.size, size=cfg.backdoor_batch)
                xb = np.concatenate([xb, trig.samples[pick]])
                yb = np.concatenate([yb, trig.target_labels[pick]])
                n_trig = cfg.backdoor_batch

            logits = net.forward(xb, train=True)
            z = logits - logits.max(axis=1, keepdims=True)
            logp_all = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            logp = logp_all[np.arange(len(yb)), yb]
            probs = softmax(logits)
            onehot = np.zeros_like(probs)
            onehot[np.arange(len(yb)), yb] = 1.0
            dlogits = probs - onehot
            loss_main = -logp[:n_clean].mean()
            dlogits[:n_clean] /= n_clean
            loss_trig = 0.0
            if n_trig:
                loss_trig = -logp[n_clean:].mean()
                dlogits[n_clean:] *= state.alpha / n_trig
            grads = net.backward(dlogits)

            loss_feat = 0.0
            if state.beta > 0:
                loss_feat, reg_grads = reg(net.params, state.key)
                grads = grads + state.beta * reg_grads
            opt.step(net.params, grads, lr)
            losses["main"].append(loss_main)
            losses["trigger"].append(loss_trig)
            losses["feature"].append(loss_feat)
    return net.get_params(), {k: float(np.mean(v)) for k, v in losses.items()}


def add_dp_noise(update, sigma, seed):
    """Gaussian noise on the uploaded update's trainable entries.

    Normalization running statistics ride along untouched: they are not
    gradient information, and perturbing them breaks eval-mode forward
    passes."""
    if sigma == 0.0:
        return update
    rng = rng_for(seed, "dp-noise")
    out = update.clone()
    for (idx, role), arr in sorted(out.items()):
        if role in TRAINABLE_ROLES:
            arr += rng.normal(0.0, sigma, size=arr.shape)
    return out


# ---------------------------------------------------------------------------
# server side

def sample_clients(n_clients, fraction, round_index, seed):
    """Uniform sample without replacement of ceil(fraction * K) clients."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must be in (0, 1]")
    m = math.ceil(fraction * n_clients)
    rng = rng_for(seed, "sample", round_index)
    return tuple(sorted(rng.choice(n_clients, size=m, replace=False).tolist()))


def aggregate(updates):
    """Data-size weighted average over the participating set, reduced in
    ascending client id order."""
    if not updates:
        raise StateError("nothing to aggregate")
    updates = sorted(updates, key=lambda u: u[0])
    total = sum(n_k for _, _, n_k in updates)
    keys = updates[0][1].entries.keys()
    for _, params, _ in updates:
        if params.entries.keys() != keys:
            raise StateError("update key sets differ")
    acc = updates[0][1] * (updates[0][2] / total)
    for _, params, n_k in updates[1:]:
        acc = acc + params * (n_k / total)
    return acc


# ---------------------------------------------------------------------------
# orchestration

def setup_clients(ds, shards, net, specs, seed, vanilla=None):
    """Build per-client state; clients listed in `specs` get keys."""
    clients = []
    for shard in shards:
        spec = specs.get(shard.client_id)
        key = None
        alpha = beta = 0.0
        loss_kind = "hinge"
        if spec is not None and (spec.alpha > 0 or spec.beta > 0):
            key = keygen(net, shard.client_id, spec.n_bits, spec.n_triggers,
                         spec.mode, seed, dataset=ds, trigger_kind=spec.trigger_kind,
                         vanilla=vanilla)
            alpha, beta, loss_kind = spec.alpha, spec.beta, spec.loss
        clients.append(ClientState(shard.client_id, shard, ds.subset(shard.indices),
                                   net.clone(), key, alpha, beta, loss_kind))
    return clients


def run_federation(cfg, clients, net, eval_data=None):
    """Round loop: distribute -> sampled client updates -> optional DP noise
    -> aggregate.  Returns the final global parameters and per-round logs.

    Per-round telemetry records each key-holding client's own white/black
    verification of the fresh global model (a client-side check; the
    aggregation path never reads key material).
    """
    global_params = net.get_params()
    logs = []
    by_id = {c.client_id: c for c in clients}
    for r in range(cfg.rounds):
        selected = sample_clients(cfg.n_clients, cfg.fraction, r, cfg.seed)
        updates = []
        log = RoundLog(r, selected, None)
        for cid in selected:
            state = by_id[cid]
            local, losses = client_update(state, global_params, cfg, r)
            if cfg.dp_sigma > 0:
                local = add_dp_noise(local, cfg.dp_sigma, (cfg.seed, r, cid))
            updates.append((cid, local, state.n_samples))
            log.loss_main[cid] = losses["main"]
            log.loss_trigger[cid] = losses["trigger"]
            log.loss_feature[cid] = losses["feature"]
        global_params = aggregate(updates)

        net.set_params(global_params)
        if eval_data is not None:
            log.accuracy = accuracy(net, eval_data[0], eval_data[1])
        for state in clients:
            if state.key is None:
                continue
            if state.beta > 0:
                log.eta[state.client_id] = verify_white(
                    global_params, state.key).detection_rate
            if state.alpha > 0 and state.key.triggers is not None:
                log.trigger_error[state.client_id] = verify_black(
                    net, state.key.triggers).trigger_error
        logs.append(log)
    net.set_params(global_params)
    return global_params, logs


# ---------------------------------------------------------------------------
# round log serialization

def round_log_columns(n_clients):
    cols = ["round", "selected", "accuracy"]
    for k in range(n_clients):
        cols += [f"main_{k}", f"trigger_{k}", f"feature_{k}", f"eta_{k}", f"trigerr_{k}"]
    return cols


def _cell(value):
    return "" if value is None else repr(value)


def round_logs_to_csv(logs, path, n_clients):
    """Fixed column order: round, selected (ids joined by ';'), accuracy,
    then (main, trigger, feature, eta, trigerr) per client id."""
    lines = [",".join(round_log_columns(n_clients))]
    for log in logs:
        row = [str(log.round_index), ";".join(str(c) for c in log.selected),
               _cell(log.accuracy)]
        for k in range(n_clients):
            row += [_cell(log.loss_main.get(k)), _cell(log.loss_trigger.get(k)),
                    _cell(log.loss_feature.get(k)), _cell(log.eta.get(k)),
                    _cell(log.trigger_error.get(k))]
        lines.append(",".join(row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
