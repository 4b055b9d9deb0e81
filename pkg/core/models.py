"""
Tiny networks built as CompGraph fragments over ParamSets.

One ParamSet ("model weights") carries up to five disjoint segments, each a
stack of dense layers named '<segment>.<layer>.weight' / '.bias':

    encoder      flatten + MLP with ReLU          input -> repr_dim
    projector    2-layer MLP (ReLU in between)     repr_dim -> proj_dim
    head         linear supervised output layer   repr_dim -> n_classes
    ssl_center   linear source-center branch      repr_dim -> n_centers
    ssl_restore  linear restoration head          repr_dim -> C*H*W (reshaped)
"""
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Tuple

import numpy as np

from core.autodiff import CompGraph, Node, evaluate
from core.tensor import ParamSet, Tensor
from core.types import ContractError, Segment, StructuralError
from utils.seeding import rng_for

ALL_SEGMENTS: Tuple[Segment, ...] = tuple(Segment)
FL_SEGMENTS: Tuple[Segment, ...] = (Segment.ENCODER, Segment.PROJECTOR, Segment.HEAD)
SSL_SEGMENTS: Tuple[Segment, ...] = (Segment.ENCODER, Segment.SSL_CENTER, Segment.SSL_RESTORE)


@dataclass(frozen=True)
class ModelSpec:
    """
    Architecture of the tiny networks.

    Attributes:
        input_dims: (channels, height, width) of input images
        encoder_widths: Hidden widths of the encoder MLP
        repr_dim: Encoder output width
        proj_hidden: Hidden width of the projector
        proj_dim: Projector output width (fixed for a federation run)
        n_classes: Supervised class count
        n_centers: Center count for the source-center branch
    """
    input_dims: Tuple[int, int, int] = (3, 16, 16)
    encoder_widths: Tuple[int, ...] = (64, 32)
    repr_dim: int = 32
    proj_hidden: int = 32
    proj_dim: int = 16
    n_classes: int = 4
    n_centers: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "encoder_widths", tuple(int(d) for d in self.encoder_widths))
        if len(self.input_dims) != 3:
            raise ContractError(f"input_dims must be (C, H, W), got {self.input_dims}")
        dims = list(self.input_dims) + list(self.encoder_widths) + [
            self.repr_dim, self.proj_hidden, self.proj_dim, self.n_classes, self.n_centers]
        if any(d < 1 for d in dims):
            raise ContractError(f"all model dimensions must be >= 1: {self}")

    @property
    def input_size(self) -> int:
        c, h, w = self.input_dims
        return c * h * w

    def layers(self, segment: Segment) -> List[Tuple[str, int, int]]:
        """(entry prefix, fan_in, fan_out) for every dense layer of a segment, in order."""
        if segment is Segment.ENCODER:
            chain = [self.input_size] + list(self.encoder_widths) + [self.repr_dim]
        elif segment is Segment.PROJECTOR:
            chain = [self.repr_dim, self.proj_hidden, self.proj_dim]
        elif segment is Segment.HEAD:
            chain = [self.repr_dim, self.n_classes]
        elif segment is Segment.SSL_CENTER:
            chain = [self.repr_dim, self.n_centers]
        else:
            chain = [self.repr_dim, self.input_size]
        return [(f"{segment.value}.{i}", chain[i], chain[i + 1]) for i in range(len(chain) - 1)]

    def to_json(self) -> Dict:
        data = asdict(self)
        data["input_dims"] = list(self.input_dims)
        data["encoder_widths"] = list(self.encoder_widths)
        return data

    @classmethod
    def from_json(cls, data: Dict) -> "ModelSpec":
        return cls(**data)


# =============================================================================
# INITIALIZATION AND SEGMENT SURGERY
# =============================================================================

def init_weights(spec: ModelSpec, seed: int, segments: Iterable[Segment] = ALL_SEGMENTS) -> ParamSet:
    """
    Glorot-uniform weights and zero biases.

    Each layer draws from its own stream keyed by (seed, layer name), so a layer's
    values do not depend on which other segments are requested: the encoder of an
    SSL model and of an FL model built from the same (spec, seed) coincide.
    """
    entries = []
    wanted = set(segments)
    for segment in ALL_SEGMENTS:
        if segment not in wanted:
            continue
        for prefix, fan_in, fan_out in spec.layers(segment):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            rng = rng_for(seed, "init", prefix)
            entries.append((f"{prefix}.weight", Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))))
            entries.append((f"{prefix}.bias", Tensor.zeros((fan_out,))))
    return ParamSet(entries)


def segment_of(weights: ParamSet, segment: Segment) -> ParamSet:
    return weights.subset([segment.value])


def transplant_encoder(source: ParamSet, target: ParamSet) -> ParamSet:
    """
    Copy the encoder segment of source into target.

    Raises:
        StructuralError: The encoders are not shape-compatible
    """
    src = segment_of(source, Segment.ENCODER)
    dst = segment_of(target, Segment.ENCODER)
    if not src:
        raise StructuralError("source weights carry no encoder segment")
    dst.require_compatible(src, "encoder transplant")
    return target.replace(src)


# =============================================================================
# GRAPH BUILDERS
# =============================================================================

class TinyNet:
    """Builds forward paths of the tiny networks into a CompGraph."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec

    def bind(self, graph: CompGraph, weights: ParamSet, trainable: bool = True) -> Dict[str, Node]:
        """
        Add one leaf per weight entry.

        Trainable weights become named parameters (they receive gradients);
        otherwise they are constants, e.g. the frozen global model.
        """
        if trainable:
            return {name: graph.param(name, t) for name, t in weights.items()}
        return {name: graph.const(t, name=f"const:{name}") for name, t in weights.items()}

    def _dense(self, graph: CompGraph, x: Node, nodes: Dict[str, Node], prefix: str) -> Node:
        try:
            w, b = nodes[f"{prefix}.weight"], nodes[f"{prefix}.bias"]
        except KeyError:
            raise StructuralError(f"weights have no layer '{prefix}'") from None
        return graph.bias_add(graph.matmul(x, w), b)

    def encode(self, graph: CompGraph, x: Node, nodes: Dict[str, Node]) -> Node:
        if tuple(x.shape[1:]) != self.spec.input_dims:
            raise StructuralError(f"encoder expects images {self.spec.input_dims}, got batch {x.shape}")
        h = graph.reshape(x, (x.shape[0], self.spec.input_size))
        for prefix, _, _ in self.spec.layers(Segment.ENCODER):
            h = graph.relu(self._dense(graph, h, nodes, prefix))
        return h

    def project(self, graph: CompGraph, rep: Node, nodes: Dict[str, Node]) -> Node:
        first, second = self.spec.layers(Segment.PROJECTOR)
        h = graph.relu(self._dense(graph, rep, nodes, first[0]))
        return self._dense(graph, h, nodes, second[0])

    def classify(self, graph: CompGraph, rep: Node, nodes: Dict[str, Node]) -> Node:
        return self._dense(graph, rep, nodes, "head.0")

    def center_classify(self, graph: CompGraph, rep: Node, nodes: Dict[str, Node]) -> Node:
        return self._dense(graph, rep, nodes, "ssl_center.0")

    def restore(self, graph: CompGraph, rep: Node, nodes: Dict[str, Node]) -> Node:
        flat = self._dense(graph, rep, nodes, "ssl_restore.0")
        return graph.reshape(flat, (rep.shape[0],) + self.spec.input_dims)


# =============================================================================
# VALUE-LEVEL FORWARD PATHS
# =============================================================================

def _run(spec: ModelSpec, x: Tensor, weights: ParamSet, path: str) -> Tensor:
    net = TinyNet(spec)
    graph = CompGraph()
    nodes = net.bind(graph, weights, trainable=False)
    out = getattr(net, path)(graph, graph.const(x), nodes)
    return evaluate(graph, out)


def encode(x: Tensor, weights: ParamSet, spec: ModelSpec) -> Tensor:
    """Representations (batch, repr_dim) of an image batch (batch, C, H, W)."""
    return _run(spec, x, weights, "encode")


def project(rep: Tensor, weights: ParamSet, spec: ModelSpec) -> Tensor:
    return _run(spec, rep, weights, "project")


def classify(rep: Tensor, weights: ParamSet, spec: ModelSpec) -> Tensor:
    return _run(spec, rep, weights, "classify")


def center_classify(rep: Tensor, weights: ParamSet, spec: ModelSpec) -> Tensor:
    return _run(spec, rep, weights, "center_classify")


def restore(rep: Tensor, weights: ParamSet, spec: ModelSpec) -> Tensor:
    return _run(spec, rep, weights, "restore")


def class_probabilities(images: np.ndarray, weights: ParamSet, spec: ModelSpec,
                        chunk: int = 256) -> np.ndarray:
    """
    Softmax class scores for an image stack, evaluated in chunks.

    Returns:
        Array (n, n_classes) whose rows sum to one
    """
    out = []
    for start in range(0, len(images), chunk):
        batch = Tensor(images[start:start + chunk])
        logits = classify(encode(batch, weights, spec), weights, spec).array
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        out.append(shifted / shifted.sum(axis=1, keepdims=True))
    if not out:
        return np.zeros((0, spec.n_classes))
    return np.concatenate(out, axis=0)
