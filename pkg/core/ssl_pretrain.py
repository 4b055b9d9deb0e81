"""
Multi-task self-supervised pretraining on pooled pseudo images.

One shared encoder feeds a source-center classification branch (cross-entropy)
and a restoration head that undoes patch swaps (mean squared error). The two
losses are added without weights.
"""
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.autodiff import CompGraph, Node, backward, evaluate, sgd_step
from core.models import SSL_SEGMENTS, ModelSpec, TinyNet, init_weights
from core.synthdata import PseudoSample, batch_slices, corrupt
from core.tensor import ParamSet, Tensor
from core.types import ContractError, Pretext
from utils.seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-9


# =============================================================================
# LOSS BUILDERS
# =============================================================================

def ce_term(graph: CompGraph, log_probs: Node, labels: Sequence[int]) -> Node:
    """-(1/N) sum_i log P[i, y_i]; labels outside [0, M) raise ContractError."""
    return graph.nll(log_probs, labels)


def mse_term(graph: CompGraph, restored: Node, targets: Node) -> Node:
    """(1/N) sum_i ||restored_i - target_i||^2, the squared norm summing over every pixel."""
    diff = graph.sub(restored, targets)
    return graph.scale(graph.sum(graph.square(diff)), 1.0 / restored.shape[0])


def ce_loss(log_probs: Tensor, labels: Sequence[int]) -> float:
    """
    Cross-entropy of a batch of log-probability rows.

    Raises:
        ContractError: A row does not exponentiate to a distribution, or a label is out of range
    """
    rows = np.exp(log_probs.array).sum(axis=1) if len(log_probs.shape) == 2 else None
    if rows is None or np.any(np.abs(rows - 1.0) > ROW_SUM_TOLERANCE):
        raise ContractError("ce_loss needs rows of log-probabilities that sum to 1")
    graph = CompGraph()
    return evaluate(graph, ce_term(graph, graph.const(log_probs), labels)).item()


def mse_loss(restored: Tensor, targets: Tensor) -> float:
    graph = CompGraph()
    return evaluate(graph, mse_term(graph, graph.const(restored), graph.const(targets))).item()


def ssl_loss(ce: float, mse: float) -> float:
    return ce + mse


# =============================================================================
# REPORT
# =============================================================================

@dataclass(frozen=True)
class SSLRecord:
    """
    One pretraining epoch.

    l_ssl is always l_ce + l_mse, whichever pretext was optimized; objective names
    the optimized one.
    """
    epoch: int
    l_ce: float
    l_mse: float
    l_ssl: float
    holdout_acc: Optional[float]
    objective: str


@dataclass
class SSLReport:
    pretext: Pretext
    records: List[SSLRecord] = field(default_factory=list)

    def to_records(self) -> List[Dict]:
        return [asdict(r) for r in self.records]


# =============================================================================
# TRAINING
# =============================================================================

@dataclass(frozen=True)
class _PooledSet:
    images: np.ndarray
    centers: np.ndarray
    uid: np.ndarray  # canonical sample index, keys the corruption stream


def _canonical_pool(pseudo_sets: Sequence[Sequence[PseudoSample]]) -> Dict[int, List[np.ndarray]]:
    by_center: Dict[int, List[np.ndarray]] = {}
    for pseudo in pseudo_sets:
        for sample in pseudo:
            by_center.setdefault(sample.center_id, []).append(sample.image.array)
    for cid, images in by_center.items():
        images.sort(key=lambda a: hashlib.sha1(a.tobytes()).digest())
    return dict(sorted(by_center.items()))


def _split_holdout(pool: Dict[int, List[np.ndarray]], holdout: float,
                   seed: int) -> Tuple[_PooledSet, _PooledSet]:
    center_index = {cid: i for i, cid in enumerate(pool)}
    train, test = ([], [], []), ([], [], [])
    uid = 0
    for cid, images in pool.items():
        n = len(images)
        n_hold = int(round(holdout * n))
        if holdout > 0 and n >= 2:
            n_hold = min(max(n_hold, 1), n - 1)
        order = rng_for(seed, "ssl-holdout", cid).permutation(n)
        held = set(order[:n_hold].tolist())
        for i, image in enumerate(images):
            target = test if i in held else train
            target[0].append(image)
            target[1].append(center_index[cid])
            target[2].append(uid + i)
        uid += n

    def pack(parts) -> _PooledSet:
        images, centers, uids = parts
        if not images:
            return _PooledSet(np.zeros((0,)), np.zeros((0,), dtype=np.int64), np.zeros((0,), dtype=np.int64))
        return _PooledSet(np.stack(images), np.asarray(centers, dtype=np.int64), np.asarray(uids, dtype=np.int64))

    return pack(train), pack(test)


def _corrupt_batch(images: np.ndarray, uids: np.ndarray, grid: int, k_swaps: int,
                   seed: int, *tags) -> np.ndarray:
    return np.stack([
        corrupt(Tensor.wrap(image), grid, k_swaps, derive_seed(seed, *tags, int(uid))).array
        for image, uid in zip(images, uids)
    ])


def pretrain(pseudo_sets: Sequence[Sequence[PseudoSample]], spec: ModelSpec, epochs: int, lr: float,
             batch: int, seed: int, grid: int = 4, k_swaps: int = 4,
             pretext: Pretext = Pretext.BOTH, holdout: float = 0.2) -> Tuple[ParamSet, SSLReport]:
    """
    Pretrain encoder and SSL heads on the pooled pseudo images of all centers.

    Samples are pooled in a canonical order (center id, then image digest) so the
    result does not depend on how the input lists are ordered. Each epoch visits
    the training pool in a seeded order; every batch is corrupted by patch swaps
    and the corrupted images feed both heads.

    Args:
        pseudo_sets: Pseudo samples, typically one list per center
        spec: Model architecture; n_centers must equal the number of centers
        epochs: Passes over the training pool (0 returns the initial weights)
        lr: SGD learning rate
        batch: Batch size
        seed: Seed for init, holdout split, shuffling and corruption
        grid, k_swaps: Patch-swap corruption parameters
        pretext: Which loss drives the updates
        holdout: Per-center fraction held out for the center-classification accuracy

    Returns:
        (weights with all segments, per-epoch report)

    Raises:
        ContractError: Fewer than two centers, or center count differs from spec.n_centers
    """
    pool = _canonical_pool(pseudo_sets)
    if len(pool) < 2:
        raise ContractError(f"source-center classification is degenerate with {len(pool)} center(s); "
                            "pretraining needs at least 2")
    if len(pool) != spec.n_centers:
        raise ContractError(f"pseudo data covers {len(pool)} centers but the model has {spec.n_centers} outputs")
    if epochs < 0:
        raise ContractError(f"epochs must be >= 0, got {epochs}")
    if not 0.0 <= holdout < 1.0:
        raise ContractError(f"holdout fraction must lie in [0, 1), got {holdout}")

    weights = init_weights(spec, seed)
    report = SSLReport(pretext)
    if epochs == 0:
        return weights, report

    train, test = _split_holdout(pool, holdout, seed)
    net = TinyNet(spec)
    trainable = weights.subset(s.value for s in SSL_SEGMENTS)
    test_inputs = (_corrupt_batch(test.images, test.uid, grid, k_swaps, seed, "ssl-holdout-corrupt")
                   if test.images.size else None)
    logger.info("pretraining on %d pseudo images from %d centers (%d held out), pretext=%s",
                len(train.centers), len(pool), len(test.centers), pretext.value)

    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        order = rng_for(seed, "ssl-epoch", epoch).permutation(len(train.centers))
        ce_values, mse_values = [], []
        for piece in batch_slices(len(order), batch):
            idx = order[piece]
            targets = train.images[idx]
            corrupted = _corrupt_batch(targets, train.uid[idx], grid, k_swaps, seed, "ssl-corrupt", epoch)

            graph = CompGraph()
            nodes = net.bind(graph, trainable)
            rep = net.encode(graph, graph.const(corrupted, name="corrupted"), nodes)
            l_ce = ce_term(graph, graph.log_softmax(net.center_classify(graph, rep, nodes)), train.centers[idx])
            l_mse = mse_term(graph, net.restore(graph, rep, nodes), graph.const(targets, name="targets"))
            if pretext is Pretext.CE:
                objective = l_ce
            elif pretext is Pretext.MSE:
                objective = l_mse
            else:
                objective = graph.add(l_ce, l_mse)

            grads = backward(graph, objective)
            ce_values.append(graph.value(l_ce).item())
            mse_values.append(graph.value(l_mse).item())
            trainable = sgd_step(trainable, grads, lr)

        l_ce_mean = float(np.mean(ce_values))
        l_mse_mean = float(np.mean(mse_values))
        acc = _center_accuracy(net, trainable, test_inputs, test.centers)
        report.records.append(SSLRecord(epoch, l_ce_mean, l_mse_mean, ssl_loss(l_ce_mean, l_mse_mean),
                                        acc, pretext.value))
        logger.info("ssl epoch %d/%d  l_ce=%.5f l_mse=%.5f holdout_acc=%s (%.2fs)", epoch, epochs,
                    l_ce_mean, l_mse_mean, "n/a" if acc is None else f"{acc:.4f}",
                    time.perf_counter() - started)

    return weights.replace(trainable), report


def _center_accuracy(net: TinyNet, weights: ParamSet, inputs: Optional[np.ndarray],
                     centers: np.ndarray) -> Optional[float]:
    if inputs is None:
        return None
    graph = CompGraph()
    nodes = net.bind(graph, weights, trainable=False)
    logits = net.center_classify(graph, net.encode(graph, graph.const(inputs), nodes), nodes)
    predicted = np.argmax(evaluate(graph, logits).array, axis=1)
    return float(np.mean(predicted == centers))
