"""Federated-learning orchestration: clients, FedAvg server, threat hooks.

The server is honest-but-curious: it follows the protocol but records the
victim client's weight update every round for later inversion. Aggregation
is sample-count-weighted FedAvg. The global model advances to the weighted
mean of the clients' after-states, which equals adding the fedavg delta in
exact arithmetic and keeps single-client federation bitwise-identical to a
centralized run.
"""

import time
from collections import OrderedDict
from dataclasses import dataclass, field

import torch

from .data import DatasetSplit, batch_iter
from .defense import DefenseConfig, make_strategy
from .models import (SHARED_GROUPS, ArchitectureConfig, DefenderModel,
                     ModelParameters, NoiseSpec, build_defender,
                     shared_parameters)
from .rng import derive_seed, generator


@dataclass
class FederationConfig:
    num_clients: int = 4
    rounds: int = 1
    local_epochs: int = 1
    batch_size: int = 128
    partition: str = "iid_shards"
    victim_id: int = 0
    seed: int = 0
    # Round whose victim update the attacker inverts (1-indexed; None
    # disables the restricted protocol). In that round the victim trains on
    # only its first attacked_victim_batch images for attacked_round_epochs
    # epochs, so the captured update reflects one small batch.
    attack_round: int = 1
    attacked_round_epochs: int = 5
    attacked_victim_batch: int = 8
    # Parameter groups transmitted to the server. Default withholds the
    # decoder and noise groups; override for ablations that share them.
    shared_groups: list = None

    def __post_init__(self):
        if self.num_clients < 1 or self.rounds < 1:
            raise ValueError("num_clients and rounds must be >= 1")
        if not 0 <= self.victim_id < self.num_clients:
            raise ValueError("victim_id must be in [0, num_clients)")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.shared_groups is None:
            self.shared_groups = list(SHARED_GROUPS)
        self.shared_groups = list(self.shared_groups)
        if self.attack_round is not None and not 1 <= self.attack_round <= self.rounds:
            raise ValueError("attack_round must be in [1, rounds] or None")
        if self.partition not in ("iid_shards", "explicit"):
            raise ValueError(f"unknown partition scheme {self.partition!r}")


@dataclass
class WeightUpdate:
    """What the server observes from one client in one round."""

    deltas: OrderedDict  # name -> w_after - w_before, shared group only
    round: int
    client_id: int
    local_epochs: int
    batch_size: int
    client_lr: float


@dataclass
class TrainingLog:
    """Per-round record. Timestamps are kept out of the CSV so repeated
    runs reproduce it bitwise; they go to the runner's plain-text log."""

    rows: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)

    def append(self, round_idx, global_acc, client_losses, seed):
        self.rows.append({
            "round": round_idx,
            "global_acc": global_acc,
            "client_losses": list(client_losses),
            "seed": seed,
        })
        self.timestamps.append(time.time())

    def to_csv(self, path):
        n_clients = max((len(r["client_losses"]) for r in self.rows), default=0)
        header = ["round", "global_acc"] + [f"client{j}_loss" for j in range(n_clients)]
        with open(path, "w") as f:
            f.write(",".join(header) + "\n")
            for r in self.rows:
                cells = [str(r["round"]),
                         "" if r["global_acc"] is None else repr(r["global_acc"])]
                cells += [repr(x) for x in r["client_losses"]]
                cells += [""] * (n_clients - len(r["client_losses"]))
                f.write(",".join(cells) + "\n")


def partition_data(split: DatasetSplit, num_clients: int,
                   scheme: str = "iid_shards", seed: int = 0,
                   explicit: list = None) -> list:
    """Disjoint cover of the split across clients.

    iid_shards shuffles then deals near-equal shares (sizes differ by at
    most 1). explicit takes user index lists, validated to be a partition.
    """
    n = len(split)
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if n < num_clients:
        raise ValueError(f"cannot split {n} samples across {num_clients} clients")
    if scheme == "explicit":
        if explicit is None or len(explicit) != num_clients:
            raise ValueError("explicit scheme needs one index list per client")
        seen = []
        for idx in explicit:
            if len(idx) == 0:
                raise ValueError("empty client share")
            seen.extend(int(i) for i in idx)
        if sorted(seen) != list(range(n)):
            raise ValueError("explicit indices must partition the split")
        return [split.subset(idx) for idx in explicit]
    if scheme != "iid_shards":
        raise ValueError(f"unknown partition scheme {scheme!r}")
    if num_clients == 1:
        return [split]
    perm = torch.randperm(n, generator=generator(derive_seed("partition", seed)))
    base, rem = divmod(n, num_clients)
    shards = []
    start = 0
    for i in range(num_clients):
        size = base + (1 if i < rem else 0)
        shards.append(split.subset(perm[start:start + size]))
        start += size
    return shards


@dataclass
class RoundResult:
    update: WeightUpdate
    shared_after: ModelParameters
    num_samples: int
    mean_loss: float


class Client:
    """One participant: a model, a defense strategy and a data shard.

    Optimizer state and the non-shared parameter groups persist across
    rounds; only the shared groups are overwritten by the server.
    """

    def __init__(self, client_id: int, shard: DatasetSplit, model: DefenderModel,
                 strategy, batch_size: int, seed: int,
                 shared_groups=SHARED_GROUPS):
        self.client_id = client_id
        self.shard = shard
        self.model = model
        self.strategy = strategy
        self.batch_size = batch_size
        self.seed = seed
        self.shared_groups = tuple(shared_groups)

    def local_round(self, global_shared: ModelParameters, local_epochs: int,
                    round_idx: int, restrict_n: int = None) -> RoundResult:
        if global_shared is not None:
            global_shared.load_into(self.model)
        before = shared_parameters(ModelParameters.from_module(self.model),
                                   self.shared_groups)
        data = self.shard
        if restrict_n is not None:
            data = data.subset(torch.arange(min(restrict_n, len(data))))
        bs = min(self.batch_size, len(data))
        losses = []
        for epoch in range(local_epochs):
            order_seed = derive_seed("client-batches", self.seed, round_idx)
            for images, labels in batch_iter(data, bs, order_seed, epoch=epoch):
                lv = self.strategy.step(images, labels)
                losses.append(float(lv.value))
        after = shared_parameters(ModelParameters.from_module(self.model),
                                  self.shared_groups)
        deltas = OrderedDict(
            (n, after[n] - before[n]) for n in after.tensors
        )
        update = WeightUpdate(
            deltas=deltas,
            round=round_idx,
            client_id=self.client_id,
            local_epochs=local_epochs,
            batch_size=bs,
            client_lr=self.strategy.lr,
        )
        mean_loss = sum(losses) / len(losses) if losses else 0.0
        return RoundResult(update, after, len(data), mean_loss)


def fedavg(updates: list, weights: list) -> ModelParameters:
    """Sample-count-weighted elementwise mean of update deltas."""
    if not updates:
        raise ValueError("fedavg needs at least one update")
    if len(updates) != len(weights):
        raise ValueError("one weight per update required")
    names = list(updates[0].deltas.keys())
    name_set = set(names)
    for u in updates[1:]:
        if set(u.deltas.keys()) != name_set:
            raise ValueError("updates have mismatched parameter names")
    total = float(sum(weights))
    if total <= 0:
        raise ValueError("weights must sum to a positive value")
    out = OrderedDict()
    for n in names:
        acc = None
        for u, w in zip(updates, weights):
            term = u.deltas[n].double() * float(w)
            acc = term if acc is None else acc + term
        out[n] = (acc / total).to(updates[0].deltas[n].dtype)
    return ModelParameters(out)


def weighted_mean_params(params_list: list, weights: list) -> ModelParameters:
    """Weighted mean of parameter maps (float64 accumulation).

    Exact for a single input, so one-client federation reproduces the
    client's own state bitwise. Non-float tensors take the first value.
    """
    if not params_list:
        raise ValueError("empty parameter list")
    names = list(params_list[0].tensors.keys())
    total = float(sum(weights))
    out = OrderedDict()
    for n in names:
        first = params_list[0][n]
        if not torch.is_floating_point(first):
            out[n] = first.clone()
            continue
        acc = None
        for p, w in zip(params_list, weights):
            term = p[n].double() * float(w)
            acc = term if acc is None else acc + term
        out[n] = (acc / total).to(first.dtype)
    return ModelParameters(out)


@dataclass
class FederationResult:
    global_model: DefenderModel
    global_shared: ModelParameters
    clients: list
    victim_updates: list  # one WeightUpdate per round
    attack_round_start: ModelParameters  # shared params the attacked round began from
    victim_batch: tuple  # (images, labels) the victim trained on that round
    log: TrainingLog


def _fresh_noise(noise: NoiseSpec) -> NoiseSpec:
    spec = NoiseSpec.from_snapshot(noise.snapshot())
    for p in spec.parameters():
        p.requires_grad_(False)
    return spec


def run_federation(fed: FederationConfig, defense: DefenseConfig,
                   arch: ArchitectureConfig, datasets: dict,
                   noise: NoiseSpec = None, eval_every: int = 0,
                   eval_limit: int = 256) -> FederationResult:
    """Execute the configured rounds; capture the victim's update each round."""
    from .metrics import accuracy

    train = datasets["train"]
    test = datasets.get("test")
    shards = partition_data(train, fed.num_clients, fed.partition,
                            seed=derive_seed("partition", fed.seed))
    base_noise = noise if noise is not None else NoiseSpec(
        "fixed", mu0=defense.mu0, sigma0=defense.sigma0
    )
    _, init_params = build_defender(
        arch, derive_seed("model-init", fed.seed), noise=_fresh_noise(base_noise)
    )
    clients = []
    for i in range(fed.num_clients):
        model = DefenderModel(arch, noise=_fresh_noise(base_noise))
        init_params.load_into(model)
        strategy = make_strategy(model, defense,
                                 seed=derive_seed("client", fed.seed, i))
        clients.append(Client(i, shards[i], model, strategy, fed.batch_size,
                              seed=derive_seed("client-data", fed.seed, i),
                              shared_groups=fed.shared_groups))

    global_shared = shared_parameters(init_params, fed.shared_groups)
    victim_updates = []
    attack_round_start = None
    victim_batch = None
    log = TrainingLog()

    for round_idx in range(1, fed.rounds + 1):
        attacked = fed.attack_round is not None and round_idx == fed.attack_round
        if attacked:
            attack_round_start = global_shared.clone()
        results = []
        for client in clients:
            if attacked and client.client_id == fed.victim_id:
                restrict = fed.attacked_victim_batch
                epochs = fed.attacked_round_epochs
            else:
                restrict = None
                epochs = fed.local_epochs
            results.append(client.local_round(global_shared, epochs, round_idx,
                                              restrict_n=restrict))
        victim_res = results[fed.victim_id]
        victim_updates.append(victim_res.update)
        if attacked:
            b = victim_res.num_samples
            shard = clients[fed.victim_id].shard
            victim_batch = (shard.images[:b].clone(), shard.labels[:b].clone())
        global_shared = weighted_mean_params(
            [r.shared_after for r in results],
            [r.num_samples for r in results],
        )
        global_acc = None
        if eval_every and test is not None and (
            round_idx % eval_every == 0 or round_idx == fed.rounds
        ):
            eval_model = DefenderModel(arch, noise=_fresh_noise(base_noise))
            init_params.load_into(eval_model)
            global_shared.load_into(eval_model)
            global_acc = accuracy(
                eval_model, test, noise_mode=defense.eval_noise_mode(),
                seed=derive_seed("round-eval", fed.seed, round_idx),
                limit=eval_limit,
            )
        log.append(round_idx, global_acc, [r.mean_loss for r in results], fed.seed)

    global_model = DefenderModel(arch, noise=_fresh_noise(base_noise))
    init_params.load_into(global_model)
    global_shared.load_into(global_model)
    return FederationResult(global_model, global_shared, clients, victim_updates,
                            attack_round_start, victim_batch, log)


def centralized_training(arch: ArchitectureConfig, defense: DefenseConfig,
                         split: DatasetSplit, rounds: int, local_epochs: int,
                         batch_size: int, seed: int,
                         noise: NoiseSpec = None) -> DefenderModel:
    """Single-model reference loop with the same seed schedule as a
    one-client federation (used to check that the two match bitwise)."""
    base_noise = noise if noise is not None else NoiseSpec("fixed")
    _, init_params = build_defender(
        arch, derive_seed("model-init", seed), noise=_fresh_noise(base_noise)
    )
    model = DefenderModel(arch, noise=_fresh_noise(base_noise))
    init_params.load_into(model)
    strategy = make_strategy(model, defense, seed=derive_seed("client", seed, 0))
    client = Client(0, split, model, strategy, batch_size,
                    seed=derive_seed("client-data", seed, 0))
    for round_idx in range(1, rounds + 1):
        client.local_round(None, local_epochs, round_idx)
    return model
