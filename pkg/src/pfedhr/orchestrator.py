"""Federated protocol driver: sampling, local KD training, server reassembly,
the large-N pre-averaging variant and the two baselines."""

from __future__ import annotations

import csv
import dataclasses
import enum
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import archzoo
from .data import LabeledDataset, PartitionPlan, Scheme, partition
from .errors import ClassCountMismatch, ConfigInvalid
from .matching import SELF, MatchResult, match_clients
from .nncore import (
    SGD,
    Model,
    Provenance,
    SGDConfig,
    accuracy,
    backward,
    compute_loss,
    forward,
    iterate_minibatches,
    predict_logits,
)
from .reassembly import distance_matrix, dump_blueprint, group_layers, probe_batch, search_candidates
from .stitching import finetune, layer_store, stitch

log = logging.getLogger(__name__)

PREAVERAGE_AUTO_THRESHOLD = 8


class Mode(str, enum.Enum):
    PFEDHR = "PFEDHR"
    LOCAL_ONLY = "LOCAL_ONLY"
    FEDAVG_PER_STRUCTURE = "FEDAVG_PER_STRUCTURE"


@dataclass
class FedConfig:
    num_clients: int = 12
    active_per_round: int = 4
    rounds: int = 20
    clusters: int = 4
    local_epochs: int = 10
    finetune_epochs: int = 3
    # Weight of the distillation term. No reference value exists; 1.0 by default.
    kd_lambda: float = 1.0
    labeled_public: bool = True
    stitch_depth: int = 1
    max_candidates: int = 32
    seed: int = 0
    mode: Mode = Mode.PFEDHR
    large_n_preaverage: bool | None = None  # None: on when active_per_round > 8
    public_fraction: float = 0.10
    scheme: Scheme = Scheme.TWO_CLASS_NONIID
    templates: tuple[str, ...] = archzoo.TEMPLATE_IDS
    # optimiser settings (no reference values; chosen defaults)
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    finetune_lr: float | None = None  # server-side finetuning; None reuses lr

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.scheme = Scheme(self.scheme)
        self.templates = tuple(self.templates)

    @property
    def sgd(self) -> SGDConfig:
        return SGDConfig(self.lr, self.momentum, self.batch_size)

    @property
    def finetune_sgd(self) -> SGDConfig:
        lr = self.lr if self.finetune_lr is None else self.finetune_lr
        return SGDConfig(lr, self.momentum, self.batch_size)

    @property
    def preaverage(self) -> bool:
        if self.large_n_preaverage is None:
            return self.active_per_round > PREAVERAGE_AUTO_THRESHOLD
        return bool(self.large_n_preaverage)

    def validate(self) -> "FedConfig":
        checks = [
            ("num_clients", self.num_clients >= 1, "must be >= 1"),
            ("active_per_round", 1 <= self.active_per_round <= self.num_clients, "must satisfy 1 <= B <= N"),
            ("rounds", self.rounds >= 0, "must be >= 0"),
            ("clusters", self.clusters >= 1, "must be >= 1"),
            ("local_epochs", self.local_epochs >= 0, "must be >= 0"),
            ("finetune_epochs", self.finetune_epochs >= 0, "must be >= 0"),
            ("kd_lambda", self.kd_lambda >= 0, "must be >= 0"),
            ("stitch_depth", self.stitch_depth in (1, 2, 3), "must be 1, 2 or 3"),
            ("max_candidates", self.max_candidates >= 1, "must be >= 1"),
            ("public_fraction", 0.0 <= self.public_fraction <= 0.5, "must lie in [0, 0.5]"),
            ("lr", self.lr > 0, "must be > 0"),
            ("finetune_lr", self.finetune_lr is None or self.finetune_lr > 0, "must be > 0"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("templates", len(self.templates) >= 1, "needs at least one template"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigInvalid(name, msg)
        for t in self.templates:
            if t not in archzoo.TEMPLATE_IDS:
                raise ConfigInvalid("templates", f"unknown template {t!r}")
        if self.num_clients < len(self.templates):
            raise ConfigInvalid("num_clients", "must be >= number of templates")
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["mode"] = self.mode.value
        out["scheme"] = self.scheme.value
        out["templates"] = list(self.templates)
        return out


@dataclass
class ClientState:
    client_id: int
    template: str
    model: Model
    train: LabeledDataset
    test: LabeledDataset
    personalized: Model | None = None
    last_loss: float = float("nan")


@dataclass
class RoundReport:
    round: int
    mode: str
    accuracies: list[float]
    train_losses: dict[int, float]
    selected: list[int]
    matches: list[MatchResult] = field(default_factory=list)
    num_candidates: int = 0
    candidate_dumps: list[str] = field(default_factory=list)
    wall_ms: float = 0.0

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std_acc(self) -> float:
        return float(np.std(self.accuracies))

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "mode": self.mode,
            "mean_acc": self.mean_acc,
            "std_acc": self.std_acc,
            "accuracies": self.accuracies,
            "selected": self.selected,
            "train_losses": {str(k): v for k, v in self.train_losses.items()},
            "num_candidates": self.num_candidates,
            "matches": [
                {
                    "round": self.round,
                    "client_id": m.client_id,
                    "candidate_index": "SELF" if m.is_self else m.candidate_index,
                    "similarity": m.similarity,
                    "candidate_structure_dump": "" if m.is_self else self.candidate_dumps[m.candidate_index],
                }
                for m in self.matches
            ],
            "wall_ms": self.wall_ms,
        }


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- client ---------------------------------------------------------------------


def client_update(client: ClientState, personalized: Model | None, config: FedConfig,
                  rng: np.random.Generator) -> ClientState:
    """Local epochs of CE + kd_lambda * KL(teacher || local) on the client's data.

    The personalized model is a frozen teacher evaluated in eval mode; with no
    teacher or ``kd_lambda == 0`` this is plain cross-entropy training.
    """
    teacher = personalized if config.kd_lambda > 0 else None
    if teacher is not None and teacher.num_classes != client.model.num_classes:
        raise ClassCountMismatch(
            f"teacher has {teacher.num_classes} classes, client {client.client_id} has {client.model.num_classes}"
        )
    model = client.model.train()
    opt = SGD(config.sgd)
    x_all, y_all = client.train.features, client.train.labels
    epoch_loss = float("nan")
    for _ in range(config.local_epochs):
        losses = []
        for idx in iterate_minibatches(len(y_all), config.batch_size, rng):
            x = x_all[idx]
            logits = forward(model, x, rng)
            loss = compute_loss("CROSS_ENTROPY", logits, y_all[idx])
            if teacher is not None:
                loss = loss + compute_loss("KL_DIVERGENCE", logits, predict_logits(teacher, x)).scaled(config.kd_lambda)
            backward(model, loss.grad)
            opt.step(model)
            losses.append(loss.value)
        epoch_loss = float(np.mean(losses))
    model.eval()
    client.last_loss = epoch_loss
    return client


# -- server ---------------------------------------------------------------------


def preaverage_same_structure(uploads) -> list[tuple[int, Model]]:
    """Unweighted parameter mean per template; one model per distinct template.

    Group ids follow sorted template names; averaged layers carry AVERAGED
    provenance with the group id in place of a client id.
    """
    by_template: dict[str, list[Model]] = {}
    for _, model in uploads:
        by_template.setdefault(model.template, []).append(model)
    out = []
    for gid, name in enumerate(sorted(by_template, key=str)):
        models = by_template[name]
        avg = models[0].clone()
        for b_idx, block in enumerate(avg.blocks()):
            for store in ("params", "buffers"):
                target = getattr(block, store)
                for key in target:
                    stacked = np.stack([getattr(m.blocks()[b_idx], store)[key] for m in models])
                    target[key] = stacked.mean(axis=0).astype(target[key].dtype)
            block.provenance = Provenance("averaged", gid, b_idx)
        out.append((gid, avg))
    return out


@dataclass
class ServerTrace:
    personalized: dict[int, Model]
    matches: list[MatchResult]
    candidate_dumps: list[str]
    num_layers: int = 0
    clusters: int = 0


def server_update(uploads, public: LabeledDataset, config: FedConfig, seed: int = 0) -> ServerTrace:
    """decompose -> (pre-average) -> group -> search -> stitch -> finetune -> match.

    Returns one personalized model per upload; a client whose match is SELF
    gets a frozen copy of its own upload.
    """
    uploads = list(uploads)
    sources = preaverage_same_structure(uploads) if config.preaverage else uploads
    probe = probe_batch(public.features, seed)
    refs, dist = distance_matrix(sources, probe)
    k = min(config.clusters, len(refs))
    clustering = group_layers(refs, dist, k, seed)
    blueprints = search_candidates(clustering, max_candidates=config.max_candidates)
    store = layer_store(sources)
    num_classes = uploads[0][1].num_classes
    input_spec = uploads[0][1].input_spec
    labeled = config.labeled_public and public.labeled
    candidates = []
    for i, bp in enumerate(blueprints):
        model = stitch(bp, store, num_classes, input_spec, config.stitch_depth, _seed(seed, 1, i))
        candidates.append(finetune(model, public, config.finetune_epochs, labeled, _seed(seed, 2, i), config.finetune_sgd))
    copies = [
        (cid, finetune(m, public, config.finetune_epochs, labeled, _seed(seed, 3, cid), config.finetune_sgd))
        for cid, m in uploads
    ]
    matches = match_clients(copies, candidates, public.features)
    personalized = {}
    for (cid, model), match in zip(uploads, matches):
        personalized[cid] = model.clone().eval() if match.candidate_index == SELF else candidates[match.candidate_index]
    dumps = [dump_blueprint(bp) for bp in blueprints]
    return ServerTrace(personalized, matches, dumps, len(refs), k)


def fedavg(models: list[Model], weights) -> Model:
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()
    out = models[0].clone()
    for b_idx, block in enumerate(out.blocks()):
        for store in ("params", "buffers"):
            target = getattr(block, store)
            for key in target:
                acc = sum(w * getattr(m.blocks()[b_idx], store)[key].astype(np.float64) for w, m in zip(weights, models))
                target[key] = acc.astype(target[key].dtype)
    return out


# -- experiment -------------------------------------------------------------------


@dataclass
class Federation:
    config: FedConfig
    clients: list[ClientState]
    public: LabeledDataset
    plan: PartitionPlan
    globals: dict[str, Model] = field(default_factory=dict)


def setup(config: FedConfig, dataset: LabeledDataset, public: LabeledDataset | None = None) -> Federation:
    """Partition data, assign templates and build fresh client models.

    ``public`` replaces the carved-out public split (cross-dataset runs).
    """
    config.validate()
    plan = partition(dataset, config.num_clients, config.scheme, config.public_fraction, config.seed)
    if public is None:
        public = dataset.subset(plan.public)
    if not config.labeled_public:
        public = public.unlabeled()
    temps = archzoo.templates_for(dataset.input_spec, dataset.num_classes, config.templates)
    assignment = archzoo.assign_templates(config.num_clients, temps, config.seed)
    clients = []
    for cid in range(config.num_clients):
        t = assignment[cid]
        model = archzoo.instantiate(t, _seed(config.seed, 100, cid), dataset.input_spec)
        clients.append(ClientState(cid, t.id, model, dataset.subset(plan.train[cid]), dataset.subset(plan.test[cid])))
    fed = Federation(config, clients, public, plan)
    if config.mode is Mode.FEDAVG_PER_STRUCTURE:
        for gid, t in enumerate(temps):
            fed.globals[t.id] = archzoo.instantiate(t, _seed(config.seed, 200, gid), dataset.input_spec)
    return fed


def evaluate(fed: Federation) -> list[float]:
    out = []
    for c in fed.clients:
        model = fed.globals[c.template] if fed.config.mode is Mode.FEDAVG_PER_STRUCTURE else c.model
        out.append(accuracy(model, c.test.features, c.test.labels))
    return out


def run_round(fed: Federation, t: int) -> RoundReport:
    config = fed.config
    start = time.perf_counter()
    rng = np.random.default_rng(_seed(config.seed, t, 1))
    selected = sorted(int(c) for c in rng.choice(config.num_clients, config.active_per_round, replace=False))
    report = RoundReport(t, config.mode.value, [], {}, selected)

    for cid in selected:
        client = fed.clients[cid]
        crng = np.random.default_rng(_seed(config.seed, t, cid, 2))
        if config.mode is Mode.FEDAVG_PER_STRUCTURE:
            client.model = fed.globals[client.template].clone()
            client_update(client, None, config, crng)
        elif config.mode is Mode.LOCAL_ONLY:
            client_update(client, None, config, crng)
        else:
            client_update(client, client.personalized, config, crng)
        report.train_losses[cid] = client.last_loss

    if config.mode is Mode.FEDAVG_PER_STRUCTURE:
        for name in sorted({fed.clients[c].template for c in selected}):
            members = [fed.clients[c] for c in selected if fed.clients[c].template == name]
            fed.globals[name] = fedavg([m.model for m in members], [len(m.train) for m in members])
    elif config.mode is Mode.PFEDHR:
        uploads = [(cid, fed.clients[cid].model) for cid in selected]
        trace = server_update(uploads, fed.public, config, _seed(config.seed, t, 3))
        for cid, model in trace.personalized.items():
            fed.clients[cid].personalized = model
        report.matches = trace.matches
        report.candidate_dumps = trace.candidate_dumps
        report.num_candidates = len(trace.candidate_dumps)

    report.accuracies = evaluate(fed)
    report.wall_ms = (time.perf_counter() - start) * 1000.0
    log.info("round %d %s mean_acc=%.4f M=%d", t, config.mode.value, report.mean_acc, report.num_candidates)
    return report


def run_experiment(config: FedConfig, dataset: LabeledDataset, public: LabeledDataset | None = None,
                   federation_out: list | None = None) -> list[RoundReport]:
    """Run ``config.rounds`` rounds; the final federation is appended to
    ``federation_out`` when given (for inspection in tests)."""
    fed = setup(config, dataset, public)
    reports = [run_round(fed, t) for t in range(config.rounds)]
    if federation_out is not None:
        federation_out.append(fed)
    return reports


SUMMARY_FIELDS = ("round", "mode", "mean_acc", "std_acc", "M")


def write_reports(reports: list[RoundReport], out_dir) -> None:
    """rounds.jsonl (full per-round records) and summary.csv (deterministic columns)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "rounds.jsonl", "a") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_json()) + "\n")
    write_summary(reports, out_dir / "summary.csv")


def write_summary(reports: list[RoundReport], path, extra: dict | None = None) -> None:
    extra = extra or {}
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(list(extra) + list(SUMMARY_FIELDS))
        for r in reports:
            writer.writerow(list(extra.values()) + [r.round, r.mode, f"{r.mean_acc:.6f}", f"{r.std_acc:.6f}", r.num_candidates])
