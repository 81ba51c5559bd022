"""Client/server state machines for every protocol variant."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from enum import Enum

import numpy as np

from fclsim.contrastive import (
    FeaturePool,
    LossConfig,
    MemoryBank,
    aggregate_banks,
    bank_wire_bytes,
    byol_loss_batch,
    contrastive_loss_batch,
    remote_positives,
    sample_negatives,
)
from fclsim.data import DataConfig, Volume, augment, generate_cohort, sample_partition_pair, sample_slice
from fclsim.encoder import (
    FeatureVector,
    OnlineNetwork,
    ParamVector,
    ema_update,
    encode,
    flatten_grads,
    init_encoder,
    init_predictor,
    param_l1_distance,
    predict,
    watch_params,
)
from fclsim.numerics import GradTape
from fclsim.protocol.ledger import SCALAR_BYTES, CommLedger
from fclsim.protocol.sync import aggregate_params, calibrate_alpha, client_distance, predict_distance, ptnu


class Variant(str, Enum):
    FEDMOCO = "fedmoco"
    FCL = "fcl"
    FEDBYOL = "fedbyol"
    FCLOPT = "fclopt"
    FCLOPT_PTNU = "fclopt-ptnu"
    FCLOPT_PTNU_DP = "fclopt-ptnu-dp"

    @property
    def moco_family(self) -> bool:
        return self in (Variant.FEDMOCO, Variant.FCL)


# Family defaults.  The BYOL family's 0.5 collapses the 32-d MLP at this scale,
# so its rate is lowered and the predictor steps faster than the encoder.
MOCO_LR = 0.05
BYOL_LR = 0.1
MOCO_BATCH = 8  # one partition pair per partition and step
BYOL_BATCH = 2


@dataclass(frozen=True)
class ProtocolConfig:
    variant: str = "fcl"
    rounds: int = 30
    local_epochs: int = 1
    batch_size: int | None = None  # None picks the family default
    lr: float | None = None
    m: float = 0.99
    m_d: float = 0.995
    calibration_period: int = 10
    participation: float = 1.0
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    predictor_lr_scale: float = 10.0
    workers: int = 1

    @property
    def kind(self) -> Variant:
        return Variant(self.variant)

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return MOCO_LR if self.kind.moco_family else BYOL_LR

    @property
    def batch(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return MOCO_BATCH if self.kind.moco_family else BYOL_BATCH

    def validate(self) -> None:
        try:
            Variant(self.variant)
        except ValueError:
            raise ValueError(
                f"protocol.variant must be one of {[v.value for v in Variant]}, got {self.variant!r}"
            ) from None
        for name in ("m", "m_d"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"protocol.{name} must be in (0,1), got {getattr(self, name)}")
        for name in ("rounds", "local_epochs", "batch_size", "calibration_period", "workers"):
            if getattr(self, name) is not None and getattr(self, name) < 1:
                raise ValueError(f"protocol.{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError(f"protocol.participation must be in (0,1], got {self.participation}")
        if self.lr is not None and not self.lr > 0:
            raise ValueError(f"protocol.lr must be > 0, got {self.lr}")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ValueError("protocol.sgd_momentum must be in [0,1)")
        if self.weight_decay < 0:
            raise ValueError("protocol.weight_decay must be >= 0")
        if not self.predictor_lr_scale > 0:
            raise ValueError("protocol.predictor_lr_scale must be > 0")

    def lr_at(self, round_idx: int) -> float:
        """Cosine-decayed learning rate for 1-based ``round_idx``."""
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (round_idx - 1) / self.rounds))


@dataclass
class ClientState:
    id: int
    volumes: list[Volume]
    n_c: int
    rng: np.random.Generator
    S: int
    online: OnlineNetwork | None = None
    # momentum encoder for the MoCo family, target encoder for the BYOL family
    target: ParamVector | None = None
    local_bank: MemoryBank | None = None


@dataclass
class ServerState:
    global_online: OnlineNetwork
    global_target: ParamVector | None = None
    alpha: float = 1.0
    round: int = 0
    d_exact: float = 0.0


@dataclass
class RoundResult:
    round: int
    variant: str
    loss_mean: float
    bytes: int
    participants: list[int]
    d_exact: float | None = None
    d_pred: float | None = None
    alpha: float | None = None
    dp_mean: float | None = None
    calibration_dp: float | None = None
    alpha_next: float | None = None
    target_spread: list[float] = field(default_factory=list)
    client_losses: dict[int, list[float]] = field(default_factory=dict)


ROUND_COLUMNS = ("round", "variant", "loss_mean", "d_exact", "d_pred", "alpha", "total_bytes")


def _sgd(params: np.ndarray, grad: np.ndarray, buf: np.ndarray | None, lr: float, cfg: ProtocolConfig):
    g = grad + cfg.weight_decay * params
    if cfg.sgd_momentum > 0:
        buf = g if buf is None else cfg.sgd_momentum * buf + g
        g = buf
    return params - lr * g, buf


def _batches_per_epoch(n_c: int, batch_size: int) -> int:
    return max(1, math.ceil(n_c / batch_size))


def _bank_features(encoder: ParamVector, samples, views: np.ndarray) -> list[FeatureVector]:
    emb = encode(encoder, views).data
    return [FeatureVector(e, s.client_id, s.volume_id, s.partition) for e, s in zip(emb, samples)]


def _fill_bank(client: ClientState, K: int) -> None:
    """Seed an empty bank with momentum features of random local slices."""
    samples = []
    for _ in range(K):
        vol = client.volumes[int(client.rng.integers(len(client.volumes)))]
        samples.append(sample_slice(vol, int(client.rng.integers(client.S)), client.S, client.rng))
    views = np.stack([augment(s.image, client.rng)[0] for s in samples])
    client.local_bank.extend(_bank_features(client.target, samples, views))


# ---------------------------------------------------------------- MoCo family


def moco_client_train(
    client: ClientState,
    main: ParamVector,
    momentum: ParamVector,
    remote: FeaturePool,
    cfg: ProtocolConfig,
    loss_cfg: LossConfig,
    lr: float,
    use_gsm: bool,
):
    """Local epochs of multi-positive contrastive training; returns (main, momentum, losses)."""
    theta, xi, buf = main, momentum, None
    pairs_per_partition = max(1, cfg.batch // (2 * client.S))
    steps = _batches_per_epoch(client.n_c, cfg.batch) * cfg.local_epochs
    losses = []
    for _ in range(steps):
        samples = []
        for s in range(client.S):
            for _ in range(pairs_per_partition):
                samples.extend(sample_partition_pair(client.volumes, s, client.rng, client.S))
        views = [augment(x.image, client.rng) for x in samples]
        q_views = np.stack([v[0] for v in views])
        k_views = np.stack([v[1] for v in views])

        keys = encode(xi, k_views).data
        pool = aggregate_banks(client.local_bank.to_pool(), [remote])
        K_eff = min(loss_cfg.K, len(pool))
        positives, negatives, remotes = [], [], []
        for i, x in enumerate(samples):
            pair = i - (i % 2)
            positives.append(keys[pair : pair + 2])
            neg = sample_negatives(pool, K_eff, client.rng)
            negatives.append(neg.embeddings)
            if use_gsm:
                remotes.append(remote_positives(x.partition, neg).embeddings)

        tape = GradTape()
        weights = watch_params(tape, theta)
        q = encode(weights, q_views)
        loss = contrastive_loss_batch(q, positives, negatives, loss_cfg, remote=remotes if use_gsm else None)
        grad = flatten_grads(tape.gradient(loss, weights))
        new_vals, buf = _sgd(theta.values, grad, buf, lr, cfg)
        theta = theta.with_values(new_vals)
        xi = ema_update(xi, theta, cfg.m)
        client.local_bank.extend(
            FeatureVector(k, x.client_id, x.volume_id, x.partition) for k, x in zip(keys, samples)
        )
        losses.append(float(loss.data))
    return theta, xi, losses


def fcl_round(
    clients: list[ClientState],
    server: ServerState,
    cfg: ProtocolConfig,
    loss_cfg: LossConfig,
    ledger: CommLedger,
    participants: list[int] | None = None,
) -> RoundResult:
    kind = cfg.kind
    if not kind.moco_family:
        raise ValueError(f"fcl_round does not run {kind.value}")
    server.round += 1
    r = server.round
    part = sorted(participants if participants is not None else range(len(clients)))
    main, momentum = server.global_online.encoder, server.global_target
    before = len(ledger.entries)

    for c in part:
        ledger.record(r, c, "down", "online_net", main.n_bytes)
        ledger.record(r, c, "down", "target_net", momentum.n_bytes)
        client = clients[c]
        client.online = OnlineNetwork(main)
        client.target = momentum
        if client.local_bank is None:
            client.local_bank = MemoryBank(loss_cfg.K)
        if len(client.local_bank) == 0:
            _fill_bank(client, loss_cfg.K)

    pools = {c: clients[c].local_bank.to_pool() for c in part}
    if kind is Variant.FCL:
        d_feat = main.layout[-1][1][0]
        for c in part:
            ledger.record(r, c, "up", "features", bank_wire_bytes(len(clients[c].local_bank), d_feat))
        for c in part:
            for o in part:
                if o != c:
                    ledger.record(r, c, "down", "features", bank_wire_bytes(len(clients[o].local_bank), d_feat))

    def work(c):
        remote = FeaturePool.concat([pools[o] for o in part if o != c]) if kind is Variant.FCL else FeaturePool.empty(0)
        return moco_client_train(
            clients[c], main, momentum, remote, cfg, loss_cfg, cfg.lr_at(r), use_gsm=kind is Variant.FCL
        )

    outs = _map_clients(work, part, cfg.workers)

    online_models, momentum_models, client_losses = [], [], {}
    for c, (theta, xi, losses) in zip(part, outs):
        clients[c].online, clients[c].target = OnlineNetwork(theta), xi
        ledger.record(r, c, "up", "online_net", theta.n_bytes)
        ledger.record(r, c, "up", "target_net", xi.n_bytes)
        online_models.append((theta, clients[c].n_c))
        momentum_models.append((xi, clients[c].n_c))
        client_losses[c] = losses
    server.global_online = OnlineNetwork(aggregate_params(online_models))
    server.global_target = aggregate_params(momentum_models)
    d = param_l1_distance(server.global_online.encoder, server.global_target)
    server.d_exact = d
    return RoundResult(
        round=r,
        variant=kind.value,
        loss_mean=_mean_loss(client_losses),
        bytes=sum(e.bytes for e in ledger.entries[before:]),
        participants=part,
        d_exact=d,
        client_losses=client_losses,
    )


# ---------------------------------------------------------------- BYOL family


def fclopt_client_train(
    client: ClientState,
    global_online: OnlineNetwork,
    target_init: ParamVector,
    cfg: ProtocolConfig,
    lr: float,
):
    """Local BYOL epochs; the target follows the online encoder by EMA after every step.

    Returns ``(online, target, losses)``.
    """
    enc, pred, xi = global_online.encoder, global_online.predictor, target_init
    n_enc = len(enc)
    buf = None
    steps = _batches_per_epoch(client.n_c, cfg.batch) * cfg.local_epochs
    losses = []
    for _ in range(steps):
        views = []
        for _ in range(cfg.batch):
            vol = client.volumes[int(client.rng.integers(len(client.volumes)))]
            z = int(client.rng.integers(vol.depth))
            views.append(augment(vol.voxels[z], client.rng))
        t = np.stack([v[0] for v in views])
        t_prime = np.stack([v[1] for v in views])
        z_target = encode(xi, t_prime).data

        tape = GradTape()
        w_enc = watch_params(tape, enc)
        w_pred = watch_params(tape, pred)
        z = predict(w_pred, encode(w_enc, t))
        loss = byol_loss_batch(z, z_target)
        grad = flatten_grads(tape.gradient(loss, w_enc + w_pred))
        params = np.concatenate([enc.values, pred.values])
        step_lr = np.full(params.size, lr)
        step_lr[n_enc:] *= cfg.predictor_lr_scale
        params, buf = _sgd(params, grad, buf, step_lr, cfg)
        enc = enc.with_values(params[:n_enc])
        pred = pred.with_values(params[n_enc:])
        xi = ema_update(xi, enc, cfg.m)
        losses.append(float(loss.data))
    return OnlineNetwork(enc, pred), xi, losses


def fclopt_round(
    clients: list[ClientState],
    server: ServerState,
    cfg: ProtocolConfig,
    ledger: CommLedger,
    participants: list[int] | None = None,
) -> RoundResult:
    kind = cfg.kind
    if kind.moco_family:
        raise ValueError(f"fclopt_round does not run {kind.value}")
    server.round += 1
    r = server.round
    part = sorted(participants if participants is not None else range(len(clients)))
    F = server.global_online
    before = len(ledger.entries)
    result = RoundResult(round=r, variant=kind.value, loss_mean=0.0, bytes=0, participants=part)

    for c in part:
        ledger.record(r, c, "down", "online_net", F.encoder.n_bytes)
        ledger.record(r, c, "down", "predictor", F.predictor.n_bytes)
        if clients[c].target is None:
            # bootstrap: the first local target is a copy of the online encoder
            clients[c].target = F.encoder.copy()

    if kind is Variant.FCLOPT:
        for c in part:
            ledger.record(r, c, "down", "target_net", server.global_target.n_bytes)
        starts = {c: server.global_target for c in part}
    elif kind is Variant.FEDBYOL:
        starts = {c: clients[c].target for c in part}
    else:
        if kind is Variant.FCLOPT_PTNU:
            d_target = server.d_exact
        else:
            dp = []
            for c in part:
                dp.append(client_distance(F.encoder, clients[c].target))
                ledger.record(r, c, "up", "scalar", SCALAR_BYTES)
            DP, d_target = predict_distance(dp, server.alpha)
            result.dp_mean, result.alpha = DP, server.alpha
        result.d_pred = d_target
        starts = {}
        for c in part:
            ledger.record(r, c, "down", "scalar", SCALAR_BYTES)
            starts[c] = ptnu(F.encoder, clients[c].target, d_target, cfg.m_d)
        result.target_spread = [param_l1_distance(F.encoder, starts[c]) for c in part]

    lr = cfg.lr_at(r)
    outs = _map_clients(lambda c: fclopt_client_train(clients[c], F, starts[c], cfg, lr), part, cfg.workers)

    calibrating = kind is Variant.FCLOPT_PTNU_DP and r % cfg.calibration_period == 0
    upload_target = kind in (Variant.FCLOPT, Variant.FCLOPT_PTNU) or calibrating
    enc_models, pred_models, target_models = [], [], []
    for c, (online, xi, losses) in zip(part, outs):
        clients[c].online, clients[c].target = online, xi
        ledger.record(r, c, "up", "online_net", online.encoder.n_bytes)
        ledger.record(r, c, "up", "predictor", online.predictor.n_bytes)
        if upload_target:
            ledger.record(r, c, "up", "target_net", xi.n_bytes)
        enc_models.append((online.encoder, clients[c].n_c))
        pred_models.append((online.predictor, clients[c].n_c))
        target_models.append((xi, clients[c].n_c))
        result.client_losses[c] = losses

    server.global_online = OnlineNetwork(aggregate_params(enc_models), aggregate_params(pred_models))
    if upload_target:
        server.global_target = aggregate_params(target_models)
        d = param_l1_distance(server.global_online.encoder, server.global_target)
        server.d_exact = d
        result.d_exact = d
        if calibrating:
            cal_dp = float(np.mean([client_distance(server.global_online.encoder, xi) for xi, _ in target_models]))
            server.alpha = calibrate_alpha(d, cal_dp, server.alpha)
            result.calibration_dp, result.alpha_next = cal_dp, server.alpha

    result.loss_mean = _mean_loss(result.client_losses)
    result.bytes = sum(e.bytes for e in ledger.entries[before:])
    return result


# ---------------------------------------------------------------- driver


def _mean_loss(client_losses: dict[int, list[float]]) -> float:
    allv = [v for c in sorted(client_losses) for v in client_losses[c]]
    return float(np.mean(allv)) if allv else float("nan")


def _map_clients(fn, part: list[int], workers: int) -> list:
    if workers <= 1 or len(part) <= 1:
        return [fn(c) for c in part]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, part))


@dataclass
class FederationResult:
    rounds: list[RoundResult]
    online: OnlineNetwork
    target: ParamVector | None
    ledger: CommLedger
    initial_encoder: ParamVector
    cohort: list[list[Volume]]


def init_models(data_cfg: DataConfig, seed: int) -> tuple[OnlineNetwork, np.random.SeedSequence]:
    ss = np.random.SeedSequence(seed)
    model_ss, rest = ss.spawn(2)
    rng = np.random.default_rng(model_ss)
    enc = init_encoder(rng, data_cfg.H * data_cfg.W)
    pred = init_predictor(rng)
    return OnlineNetwork(enc, pred), rest


def run_federation(
    cfg: ProtocolConfig,
    data_cfg: DataConfig = DataConfig(),
    seed: int = 0,
    loss_cfg: LossConfig = LossConfig(),
    cohort: list[list[Volume]] | None = None,
    callback=None,
) -> FederationResult:
    """Run ``cfg.rounds`` rounds of ``cfg.variant`` from scratch.

    The same ``seed`` always gives the same initial models, client streams and
    participant draws, so variants compared under one seed start identically.
    """
    cfg.validate()
    loss_cfg.validate()
    cohort = generate_cohort(data_cfg) if cohort is None else cohort
    online, rest = init_models(data_cfg, seed)
    server_ss, *client_ss = rest.spawn(1 + len(cohort))
    server_rng = np.random.default_rng(server_ss)
    clients = [
        ClientState(c, vols, sum(v.depth for v in vols), np.random.default_rng(client_ss[c]), data_cfg.S)
        for c, vols in enumerate(cohort)
    ]
    kind = cfg.kind
    server = ServerState(
        global_online=online if not kind.moco_family else OnlineNetwork(online.encoder),
        global_target=online.encoder.copy() if kind is not Variant.FEDBYOL else None,
    )
    ledger = CommLedger()
    results = []
    n_active = max(1, round(cfg.participation * len(clients)))
    for _ in range(cfg.rounds):
        if n_active >= len(clients):
            part = list(range(len(clients)))
        else:
            part = sorted(int(i) for i in server_rng.choice(len(clients), size=n_active, replace=False))
        if kind.moco_family:
            res = fcl_round(clients, server, cfg, loss_cfg, ledger, part)
        else:
            res = fclopt_round(clients, server, cfg, ledger, part)
        results.append(res)
        if callback is not None:
            callback(res)
    return FederationResult(results, server.global_online, server.global_target, ledger, online.encoder, cohort)


def round_rows(results: list[RoundResult]) -> list[tuple]:
    def fmt(x):
        return "" if x is None else repr(float(x))

    return [
        (r.round, r.variant, fmt(r.loss_mean), fmt(r.d_exact), fmt(r.d_pred), fmt(r.alpha), r.bytes)
        for r in results
    ]


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
