"""
Federated protocol engine.

Server loop (broadcast w^g, local training on every client, size-weighted
averaging), the Barlow Twins model-contrastive local objective and the baseline
objectives (local-only, FedAvg, FedProx).
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from core.autodiff import CompGraph, Node, backward, evaluate, sgd_step
from core.models import FL_SEGMENTS, ModelSpec, TinyNet, init_weights, transplant_encoder
from core.ssl_pretrain import ce_term
from core.synthdata import CenterDataset, augment_dataset, batch_slices, dihedral, N_AUGMENT_VARIANTS
from core.tensor import ParamSet, Tensor
from core.types import (Algorithm, ClientError, ConfigError, ContractError, StructuralError,
                        ValidationError, ViewMode)
from utils.seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)

CORR_EPS = 1e-12

RoundEvaluator = Callable[[int, ParamSet], Dict[str, float]]


# =============================================================================
# CONFIGURATION AND STATE
# =============================================================================

@dataclass
class FLConfig:
    """
    Federated training settings. Defaults follow the desk-scale experiment.

    Attributes:
        rounds: Communication rounds T
        local_epochs: Local epochs E per round
        lr: SGD learning rate
        mu: Weight of the contrastive term
        lam: Off-diagonal (redundancy) weight inside the contrastive term
        batch: Local batch size
        algorithm: Local objective / aggregation variant
        rho: FedProx proximal coefficient
        ssl_init: Optional checkpoint whose encoder initializes the global model
        seed: Seed for init and every client stream
        bt_centered: Subtract column means before the cross-correlation
        bt_views: Inputs of the contrastive branch
        eval_every: Evaluate the deployed models every n rounds (0 = never)
        workers: Client threads per round
        progress: Show a progress bar over rounds
    """
    rounds: int = 300
    local_epochs: int = 1
    lr: float = 0.001
    mu: float = 0.01
    lam: float = 0.005
    batch: int = 4
    algorithm: Algorithm = Algorithm.FL_BT
    rho: float = 0.01
    ssl_init: Optional[str] = None
    seed: int = 0
    bt_centered: bool = False
    bt_views: ViewMode = ViewMode.SAME
    eval_every: int = 0
    workers: int = 1
    progress: bool = False

    def validate(self, prefix: str = "fl") -> List[ValidationError]:
        errors = []

        def need(ok: bool, name: str, message: str):
            if not ok:
                errors.append(ValidationError("error", message, f"{prefix}.{name}"))

        need(self.rounds >= 0, "rounds", "must be >= 0")
        need(self.local_epochs >= 0, "local_epochs", "must be >= 0")
        need(self.lr > 0, "lr", "must be > 0")
        need(self.mu >= 0, "mu", "must be >= 0")
        need(self.lam >= 0, "lam", "must be >= 0")
        need(self.rho >= 0, "rho", "must be >= 0")
        need(self.batch >= 1, "batch", "must be >= 1")
        need(self.eval_every >= 0, "eval_every", "must be >= 0")
        need(self.workers >= 1, "workers", "must be >= 1")
        if self.algorithm is Algorithm.FL_BT and self.mu > 0:
            need(self.batch >= 2, "batch", "the contrastive term needs batches of at least 2 samples")
        return errors

    def require_valid(self) -> None:
        errors = [e for e in self.validate() if e.severity == "error"]
        if errors:
            raise ConfigError("; ".join(str(e) for e in errors))

    def to_json(self) -> Dict:
        data = asdict(self)
        data["algorithm"] = self.algorithm.value
        data["bt_views"] = self.bt_views.value
        return data

    @classmethod
    def from_json(cls, data: Dict) -> "FLConfig":
        data = dict(data)
        if "algorithm" in data:
            data["algorithm"] = Algorithm(data["algorithm"])
        if "bt_views" in data:
            data["bt_views"] = ViewMode(data["bt_views"])
        return cls(**data)


@dataclass
class ClientState:
    """
    One center as seen by the federation engine.

    Attributes:
        center_id: Center identifier
        train: Training partition, augmented when built by make_client
        n_original: Training samples before augmentation (aggregation weight m_i)
        eval_set: Optional held-out data for per-round evaluation
        weights: Current local model (kept between rounds only by local_only)
    """
    center_id: int
    train: CenterDataset
    n_original: int
    eval_set: Optional[CenterDataset] = None
    weights: Optional[ParamSet] = None


def make_client(train: CenterDataset, eval_set: Optional[CenterDataset] = None,
                augment: bool = True) -> ClientState:
    data = augment_dataset(train) if augment else train
    return ClientState(train.center_id, data, len(train), eval_set)


@dataclass(frozen=True)
class LossBreakdown:
    l_sup: float
    l_flbt: float
    l_prox: float
    l_total: float


@dataclass(frozen=True)
class LocalUpdate:
    center_id: int
    weights: ParamSet
    n_samples: int
    losses: LossBreakdown


@dataclass
class RunHistory:
    """Per-round records: client loss means, checksum of w^g, optional evaluation."""
    records: List[Dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def checksums(self) -> List[str]:
        return [r["checksum"] for r in self.records]

    def to_records(self) -> List[Dict]:
        return list(self.records)


@dataclass
class FederationResult:
    global_weights: ParamSet
    client_weights: Dict[int, ParamSet]
    history: RunHistory


# =============================================================================
# BARLOW TWINS TERMS
# =============================================================================

def cross_corr_node(graph: CompGraph, z_local: Node, z_glob: Node, centered: bool = False) -> Node:
    """
    C[i, j] = sum_b zl[b, i] zg[b, j] / (||zl[:, i]|| ||zg[:, j]|| + eps).

    Raises:
        StructuralError: Input shapes differ
        ContractError: Fewer than two rows
    """
    if z_local.shape != z_glob.shape or len(z_local.shape) != 2:
        raise StructuralError(f"cross-correlation needs equal (b, d) inputs, got {z_local.shape} and {z_glob.shape}")
    if z_local.shape[0] < 2:
        raise ContractError(f"cross-correlation over a batch of {z_local.shape[0]} is vacuous; need b >= 2")
    if centered:
        z_local, z_glob = graph.center_cols(z_local), graph.center_cols(z_glob)
    num = graph.matmul(graph.transpose(z_local), z_glob)
    den = graph.add_scalar(graph.outer(graph.col_norm(z_local), graph.col_norm(z_glob)), CORR_EPS)
    return graph.div(num, den)


def bt_term(graph: CompGraph, corr: Node, lam: float) -> Node:
    """sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2"""
    d = corr.shape[0]
    invariance = graph.sum(graph.square(graph.add_scalar(graph.scale(graph.diag(corr), -1.0), 1.0)))
    off_mask = graph.const(1.0 - np.eye(d), name="off_diagonal")
    redundancy = graph.sum(graph.square(graph.mul(corr, off_mask)))
    return graph.add(invariance, graph.scale(redundancy, lam))


def cross_correlation(z_local: Tensor, z_glob: Tensor, centered: bool = False) -> Tensor:
    graph = CompGraph()
    return evaluate(graph, cross_corr_node(graph, graph.const(z_local), graph.const(z_glob), centered))


def bt_loss(corr: Tensor, lam: float) -> float:
    graph = CompGraph()
    return evaluate(graph, bt_term(graph, graph.const(corr), lam)).item()


def sup_loss(logits: Tensor, labels: Sequence[int]) -> float:
    """Cross-entropy of class logits, through the same kernel as the center-classification loss."""
    graph = CompGraph()
    return evaluate(graph, ce_term(graph, graph.log_softmax(graph.const(logits)), labels)).item()


# =============================================================================
# LOCAL OBJECTIVES
# =============================================================================

def _supervised(graph: CompGraph, net: TinyNet, nodes: Dict[str, Node], x: Node,
                labels: np.ndarray) -> Node:
    logits = net.classify(graph, net.encode(graph, x, nodes), nodes)
    return ce_term(graph, graph.log_softmax(logits), labels)


def local_objective(net: TinyNet, w_local: ParamSet, w_glob: ParamSet, images: np.ndarray,
                    labels: np.ndarray, mu: float, lam: float, centered: bool = False,
                    views: Optional[Tuple[int, int]] = None) -> Tuple[LossBreakdown, ParamSet]:
    """
    FL-BT local loss l_sup + mu * L_BT and its gradient w.r.t. the local weights.

    The global model enters as constants, so no gradient reaches it. With
    views=(a, b) the local model sees dihedral variant a of the batch and the
    global model variant b in the contrastive branch; otherwise both see the batch
    itself. The contrastive branch is left out of the graph entirely when mu == 0.

    Raises:
        ContractError: mu > 0 with fewer than two samples
    """
    if mu > 0 and len(images) < 2:
        raise ContractError(f"contrastive term needs a batch of >= 2 samples, got {len(images)}")
    graph = CompGraph()
    nodes = net.bind(graph, w_local)
    x = graph.const(images, name="x")
    l_sup = _supervised(graph, net, nodes, x, labels)
    if mu <= 0:
        grads = backward(graph, l_sup)
        value = graph.value(l_sup).item()
        return LossBreakdown(value, 0.0, 0.0, value), grads

    frozen = net.bind(graph, w_glob, trainable=False)
    if views is None:
        x_local = x_glob = x
    else:
        x_local = graph.const(dihedral(images, views[0]), name="view_a")
        x_glob = graph.const(dihedral(images, views[1]), name="view_b")
    z_local = net.project(graph, net.encode(graph, x_local, nodes), nodes)
    z_glob = net.project(graph, net.encode(graph, x_glob, frozen), frozen)
    l_bt = bt_term(graph, cross_corr_node(graph, z_local, z_glob, centered), lam)
    total = graph.add(l_sup, graph.scale(l_bt, mu))
    grads = backward(graph, total)
    return (LossBreakdown(graph.value(l_sup).item(), graph.value(l_bt).item(), 0.0,
                          graph.value(total).item()), grads)


def baseline_objective(kind: Algorithm, net: TinyNet, w_local: ParamSet, w_glob: ParamSet,
                       images: np.ndarray, labels: np.ndarray, rho: float = 0.0) -> Tuple[LossBreakdown, ParamSet]:
    """
    local_only / fedavg: supervised loss only. fedprox: plus (rho / 2) ||w_local - w_glob||^2,
    left out of the graph when rho == 0.
    """
    if kind is Algorithm.FL_BT:
        raise ContractError("fl_bt uses local_objective, not a baseline objective")
    graph = CompGraph()
    nodes = net.bind(graph, w_local)
    l_sup = _supervised(graph, net, nodes, graph.const(images, name="x"), labels)
    if kind is not Algorithm.FEDPROX or rho == 0:
        grads = backward(graph, l_sup)
        value = graph.value(l_sup).item()
        return LossBreakdown(value, 0.0, 0.0, value), grads

    w_local.require_compatible(w_glob, "proximal term")
    prox = None
    for name, leaf in nodes.items():
        sq = graph.sum(graph.square(graph.sub(leaf, graph.const(w_glob[name], name=f"const:{name}"))))
        prox = sq if prox is None else graph.add(prox, sq)
    total = graph.add(l_sup, graph.scale(prox, rho / 2.0))
    grads = backward(graph, total)
    return (LossBreakdown(graph.value(l_sup).item(), 0.0, graph.value(prox).item(),
                          graph.value(total).item()), grads)


# =============================================================================
# CLIENT AND SERVER
# =============================================================================

def party_local_training(client: ClientState, w_glob: ParamSet, cfg: FLConfig, spec: ModelSpec,
                         round_index: int) -> LocalUpdate:
    """
    Start from w_glob and run E epochs of seeded-order SGD on the client's data.

    The batch order of epoch e in round r comes from the stream
    (seed, "client", center_id, r, e), so results do not depend on scheduling.

    Raises:
        ContractError: The client has no training data
    """
    n = len(client.train)
    if n == 0:
        raise ContractError(f"client {client.center_id} has an empty training set")
    net = TinyNet(spec)
    w_local = w_glob
    totals = np.zeros(4)
    steps = 0
    for epoch in range(cfg.local_epochs):
        rng = rng_for(cfg.seed, "client", client.center_id, round_index, epoch)
        order = rng.permutation(n)
        for piece in batch_slices(n, cfg.batch):
            idx = order[piece]
            images, labels = client.train.images[idx], client.train.labels[idx]
            if cfg.algorithm is Algorithm.FL_BT:
                views = None
                if cfg.bt_views is ViewMode.AUGMENTED:
                    views = tuple(int(v) for v in rng.integers(0, N_AUGMENT_VARIANTS, size=2))
                losses, grads = local_objective(net, w_local, w_glob, images, labels, cfg.mu, cfg.lam,
                                                cfg.bt_centered, views)
            else:
                losses, grads = baseline_objective(cfg.algorithm, net, w_local, w_glob, images, labels, cfg.rho)
            w_local = sgd_step(w_local, grads, cfg.lr)
            totals += (losses.l_sup, losses.l_flbt, losses.l_prox, losses.l_total)
            steps += 1
    means = totals / steps if steps else totals
    return LocalUpdate(client.center_id, w_local, client.n_original, LossBreakdown(*(float(v) for v in means)))


def aggregate(weights: Sequence[ParamSet], sizes: Sequence[int]) -> ParamSet:
    """
    FedAvg: sum_i (m_i / M) w_i, accumulated in list order.

    Raises:
        StructuralError: Empty list or incompatible ParamSets
        ContractError: A size is not positive
    """
    if not weights:
        raise StructuralError("cannot aggregate an empty list of models")
    if len(weights) != len(sizes):
        raise StructuralError(f"{len(weights)} models but {len(sizes)} sizes")
    if any(m <= 0 for m in sizes):
        raise ContractError(f"client sizes must be positive, got {list(sizes)}")
    total = float(sum(sizes))
    return ParamSet.weighted_average(weights, [m / total for m in sizes])


def initial_global_model(spec: ModelSpec, cfg: FLConfig, ssl_weights: Optional[ParamSet] = None) -> ParamSet:
    """Fresh FL model; when SSL weights are given (or cfg.ssl_init names a checkpoint) its encoder is transplanted."""
    weights = init_weights(spec, derive_seed(cfg.seed, "init"), FL_SEGMENTS)
    if ssl_weights is None and cfg.ssl_init:
        ssl_weights = ParamSet.load(Path(cfg.ssl_init))
    if ssl_weights is not None:
        weights = transplant_encoder(ssl_weights, weights)
    return weights


def run_federation(spec: ModelSpec, clients: Sequence[ClientState], cfg: FLConfig,
                   ssl_weights: Optional[ParamSet] = None,
                   evaluator: Optional[RoundEvaluator] = None) -> FederationResult:
    """
    Run T communication rounds.

    Every round broadcasts w^g, trains all clients (concurrently when
    cfg.workers > 1) and averages their models with weights m_i / M in client
    order. local_only skips the server: each client keeps its own model and w^g
    stays the initial model. A failing client aborts the round with a
    ClientError carrying its center id.

    Args:
        spec: Model architecture
        clients: One state per center, in the order used for aggregation
        cfg: Federation settings
        ssl_weights: Pretrained weights whose encoder initializes w^g
        evaluator: Called as evaluator(center_id, weights) on eval rounds

    Returns:
        FederationResult with w^g, each center's deployed model and the history
    """
    cfg.require_valid()
    if not clients:
        raise ContractError("federation needs at least one client")
    w_glob = initial_global_model(spec, cfg, ssl_weights)
    local_models = {c.center_id: w_glob for c in clients}
    history = RunHistory()
    separate = cfg.algorithm is Algorithm.LOCAL_ONLY
    logger.info("federation: %s, %d clients, T=%d, E=%d, checksum %s", cfg.algorithm.value, len(clients),
                cfg.rounds, cfg.local_epochs, w_glob.checksum()[:12])

    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for round_index in tqdm(range(cfg.rounds), desc=cfg.algorithm.value, disable=not cfg.progress):
            started = time.perf_counter()
            starts = [local_models[c.center_id] if separate else w_glob for c in clients]
            updates = _run_round(clients, starts, cfg, spec, round_index, executor)
            if separate:
                for update in updates:
                    local_models[update.center_id] = update.weights
            else:
                w_glob = aggregate([u.weights for u in updates], [u.n_samples for u in updates])
                local_models = {c.center_id: w_glob for c in clients}

            record = {
                "round": round_index + 1,
                "checksum": w_glob.checksum(),
                "clients": [dict(center_id=u.center_id, checksum=u.weights.checksum(), **asdict(u.losses))
                            for u in updates],
            }
            if evaluator is not None and cfg.eval_every and (round_index + 1) % cfg.eval_every == 0:
                record["eval"] = {str(c.center_id): evaluator(c.center_id, local_models[c.center_id])
                                  for c in clients}
            history.records.append(record)
            logger.info("round %d/%d  l_total=%.5f checksum %s (%.2fs)", round_index + 1, cfg.rounds,
                        float(np.mean([u.losses.l_total for u in updates])), record["checksum"][:12],
                        time.perf_counter() - started)
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    return FederationResult(w_glob, local_models, history)


def _run_round(clients: Sequence[ClientState], starts: Sequence[ParamSet], cfg: FLConfig, spec: ModelSpec,
               round_index: int, executor: Optional[ThreadPoolExecutor]) -> List[LocalUpdate]:
    if executor is None:
        updates = []
        for client, start in zip(clients, starts):
            try:
                updates.append(party_local_training(client, start, cfg, spec, round_index))
            except Exception as exc:
                raise ClientError(client.center_id, exc) from exc
        return updates

    futures = [executor.submit(party_local_training, client, start, cfg, spec, round_index)
               for client, start in zip(clients, starts)]
    updates = []
    for client, future in zip(clients, futures):
        try:
            updates.append(future.result())
        except Exception as exc:
            for pending in futures:
                pending.cancel()
            raise ClientError(client.center_id, exc) from exc
    return updates
