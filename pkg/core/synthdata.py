"""
Synthetic multi-center image data.

Class structure (texture frequency plus "nuclei" blobs) is shared by every center;
centers differ only through an affine stain map and their noise level. Also holds
the pseudo-image generator, the patch-swap corruption, the dihedral augmentation
and the stratified k-fold splitter.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from core.tensor import Tensor
from core.types import ContractError, DataError
from utils.seeding import rng_for

logger = logging.getLogger(__name__)

PSEUDO_STD_FLOOR = 1e-3
PSEUDO_MAX_RESAMPLES = 100
N_AUGMENT_VARIANTS = 8


# =============================================================================
# SPECS AND SAMPLES
# =============================================================================

@dataclass(frozen=True)
class ClassPrototype:
    """
    Structural parameters of one tissue class.

    Attributes:
        frequency: (fy, fx) whole cycles of the background texture across the image
        phase: Texture phase in radians
        blobs: (cy, cx, radius, amplitude) per blob, in pixel units
    """
    frequency: Tuple[int, int]
    phase: float
    blobs: Tuple[Tuple[float, float, float, float], ...]

    def render(self, height: int, width: int) -> np.ndarray:
        """Unstained (3, H, W) structure image, roughly within [0, 1]."""
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        fy, fx = self.frequency
        texture = 0.5 + 0.2 * np.sin(2.0 * np.pi * (fy * yy / height + fx * xx / width) + self.phase)
        nuclei = np.zeros((height, width))
        for cy, cx, radius, amplitude in self.blobs:
            nuclei += amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2))
        return np.stack([texture + nuclei, 1.0 - texture, 0.5 * texture + 0.5 * nuclei])

    def to_json(self) -> dict:
        return {"frequency": list(self.frequency), "phase": self.phase,
                "blobs": [list(b) for b in self.blobs]}

    @classmethod
    def from_json(cls, data: dict) -> "ClassPrototype":
        return cls(tuple(int(f) for f in data["frequency"]), float(data["phase"]),
                   tuple(tuple(float(v) for v in b) for b in data["blobs"]))


def default_prototypes(n_classes: int, image_size: int, seed: int) -> List[ClassPrototype]:
    """
    One prototype per class; class k carries k + 1 blobs (normal tissue has the fewest).
    """
    rng = rng_for(seed, "prototypes")
    margin = max(1.0, image_size / 8.0)
    out = []
    for k in range(n_classes):
        fy, fx = (int(v) for v in rng.integers(1, 4, size=2))
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        blobs = []
        for _ in range(k + 1):
            cy, cx = rng.uniform(margin, image_size - margin, size=2)
            radius = rng.uniform(image_size / 10.0, image_size / 5.0)
            blobs.append((float(cy), float(cx), float(radius), 0.35))
        out.append(ClassPrototype((fy, fx), phase, tuple(blobs)))
    return out


@dataclass(frozen=True)
class CenterSpec:
    """
    Generation parameters of one simulated center.

    Attributes:
        center_id: Non-negative center identifier
        n_per_class: Samples generated per class
        class_prototypes: Shared class structures (index = class label)
        stain_matrix: 3x3 affine color map applied per pixel
        stain_offset: Color offset added after the matrix
        sigma: Std of the Gaussian noise added before staining
        image_size: Height and width of the square images
    """
    center_id: int
    n_per_class: int
    class_prototypes: Tuple[ClassPrototype, ...]
    stain_matrix: Tuple[Tuple[float, float, float], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    stain_offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    sigma: float = 0.05
    image_size: int = 16

    @property
    def n_classes(self) -> int:
        return len(self.class_prototypes)

    def stain(self, structure: np.ndarray) -> np.ndarray:
        matrix = np.asarray(self.stain_matrix, dtype=np.float64)
        offset = np.asarray(self.stain_offset, dtype=np.float64)
        return np.einsum("ij,...jhw->...ihw", matrix, structure) + offset[:, None, None]


@dataclass(frozen=True)
class PseudoSample:
    image: Tensor
    center_id: int


@dataclass(frozen=True)
class CenterDataset:
    """
    Labelled images of one center.

    Attributes:
        center_id: Owning center
        images: Read-only array (n, 3, H, W) in [0, 1]
        labels: Read-only int64 array (n,)
        n_classes: Size of the label space (some classes may be absent in a subset)
    """
    center_id: int
    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4 or images.shape[0] != labels.shape[0]:
            raise ContractError(f"center {self.center_id}: {images.shape} images for {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ContractError(f"center {self.center_id}: labels outside [0, {self.n_classes})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_dims(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> "CenterDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return CenterDataset(self.center_id, self.images[idx], self.labels[idx], self.n_classes)

    def class_counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.n_classes).tolist()


# =============================================================================
# GENERATION
# =============================================================================

def generate_center_dataset(spec: CenterSpec, seed: int) -> CenterDataset:
    """
    n_per_class images per class, class-major order.

    image = clamp(stain(structure + N(0, sigma)), 0, 1)
    """
    if spec.n_per_class < 1 or spec.n_classes < 1:
        raise ContractError(f"center {spec.center_id}: needs at least one class and one sample per class")
    rng = np.random.default_rng(seed)
    size = spec.image_size
    images, labels = [], []
    for label, proto in enumerate(spec.class_prototypes):
        structure = proto.render(size, size)
        noise = rng.normal(0.0, spec.sigma, size=(spec.n_per_class, 3, size, size))
        images.append(np.clip(spec.stain(structure[None] + noise), 0.0, 1.0))
        labels.extend([label] * spec.n_per_class)
    dataset = CenterDataset(spec.center_id, np.concatenate(images), np.asarray(labels), spec.n_classes)
    logger.debug("center %d: generated %d samples", spec.center_id, len(dataset))
    return dataset


def generate_pseudo_images(dataset: CenterDataset, n: int, seed: int) -> List[PseudoSample]:
    """
    Sample n pseudo images from a diagonal Gaussian fitted to the pooled center images.

    Draws that reproduce a real image bit-for-bit are redrawn.

    Raises:
        ContractError: n <= 0 or empty dataset
        DataError: A draw kept colliding with real images
    """
    if n <= 0:
        raise ContractError(f"pseudo image count must be positive, got {n}")
    if len(dataset) == 0:
        raise ContractError(f"center {dataset.center_id}: cannot fit a generator to an empty dataset")
    mean = dataset.images.mean(axis=0)
    std = np.maximum(dataset.images.std(axis=0), PSEUDO_STD_FLOOR)
    real = {image.tobytes() for image in dataset.images}
    rng = np.random.default_rng(seed)

    def draw(count: int) -> np.ndarray:
        return np.clip(mean + std * rng.standard_normal((count,) + mean.shape), 0.0, 1.0)

    images = draw(n)
    for i in range(n):
        attempts = 0
        while images[i].tobytes() in real:
            attempts += 1
            if attempts > PSEUDO_MAX_RESAMPLES:
                raise DataError(f"center {dataset.center_id}: pseudo image {i} collides with real data "
                                f"after {PSEUDO_MAX_RESAMPLES} redraws")
            images[i] = draw(1)[0]
    return [PseudoSample(Tensor(image), dataset.center_id) for image in images]


# =============================================================================
# CORRUPTION AND AUGMENTATION
# =============================================================================

def corrupt(image: Tensor, grid: int, k_swaps: int, seed: int) -> Tensor:
    """
    Swap k_swaps disjoint pairs of patches on a grid x grid tiling.

    Raises:
        ContractError: H or W not divisible by grid, negative k_swaps, or
            more swaps than disjoint patch pairs
    """
    if len(image.shape) != 3:
        raise ContractError(f"corrupt expects a (C, H, W) image, got {image.shape}")
    _, height, width = image.shape
    if grid < 1 or height % grid or width % grid:
        raise ContractError(f"image {height}x{width} is not divisible into a {grid}x{grid} grid")
    if k_swaps < 0:
        raise ContractError(f"k_swaps must be >= 0, got {k_swaps}")
    if 2 * k_swaps > grid * grid:
        raise ContractError(f"{k_swaps} disjoint swaps need {2 * k_swaps} patches, grid has {grid * grid}")
    if k_swaps == 0:
        return image
    ph, pw = height // grid, width // grid
    order = np.random.default_rng(seed).permutation(grid * grid)[:2 * k_swaps]
    out = image.array.copy()
    src = image.array
    for a, b in zip(order[0::2], order[1::2]):
        ay, ax = divmod(int(a), grid)
        by, bx = divmod(int(b), grid)
        out[:, ay * ph:(ay + 1) * ph, ax * pw:(ax + 1) * pw] = src[:, by * ph:(by + 1) * ph, bx * pw:(bx + 1) * pw]
        out[:, by * ph:(by + 1) * ph, bx * pw:(bx + 1) * pw] = src[:, ay * ph:(ay + 1) * ph, ax * pw:(ax + 1) * pw]
    return Tensor.wrap(out)


def dihedral(array: np.ndarray, variant: int) -> np.ndarray:
    """
    Variant v of a (..., C, H, W) array: rotate by 90*(v % 4) degrees, then flip horizontally when v >= 4.
    """
    out = np.rot90(array, k=variant % 4, axes=(-2, -1))
    if variant >= 4:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def augment(image: Tensor) -> List[Tensor]:
    """
    The 8 dihedral variants: rotations 0/90/180/270, then the same four flipped.
    """
    if len(image.shape) != 3 or image.shape[1] != image.shape[2]:
        raise ContractError(f"augment needs a square (C, H, W) image, got {image.shape}")
    return [image] + [Tensor.wrap(dihedral(image.array, v)) for v in range(1, N_AUGMENT_VARIANTS)]


def augment_dataset(dataset: CenterDataset) -> CenterDataset:
    """Every sample followed by its 7 other variants (sample order kept)."""
    if len(dataset) == 0:
        return dataset
    stacked = np.stack([dihedral(dataset.images, v) for v in range(N_AUGMENT_VARIANTS)], axis=1)
    images = stacked.reshape((-1,) + dataset.image_dims)
    labels = np.repeat(dataset.labels, N_AUGMENT_VARIANTS)
    return CenterDataset(dataset.center_id, images, labels, dataset.n_classes)


# =============================================================================
# CROSS-VALIDATION SPLITS
# =============================================================================

@dataclass(frozen=True)
class FoldSplit:
    train: np.ndarray
    test: np.ndarray


def kfold_split(dataset: CenterDataset, k: int, seed: int) -> List[FoldSplit]:
    """
    Stratified k-fold partition.

    Each class is shuffled and dealt round-robin onto the folds; the dealing
    position carries over between classes so total fold sizes also differ by <= 1.

    Raises:
        ContractError: k < 2 or some class has fewer than k samples
    """
    if k < 2:
        raise ContractError(f"k-fold needs k >= 2, got {k}")
    counts = dataset.class_counts()
    small = [c for c, n in enumerate(counts) if n < k]
    if small:
        raise ContractError(f"center {dataset.center_id}: classes {small} have fewer than {k} samples")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(dataset), dtype=np.int64)
    dealt = 0
    for label in range(dataset.n_classes):
        members = rng.permutation(np.flatnonzero(dataset.labels == label))
        fold_of[members] = (dealt + np.arange(members.size)) % k
        dealt += members.size
    return [FoldSplit(np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)) for f in range(k)]


def batch_slices(n: int, batch: int) -> List[slice]:
    """
    Consecutive batches over n items; a trailing batch of one item is merged into its predecessor.
    """
    if batch < 1:
        raise ContractError(f"batch size must be >= 1, got {batch}")
    bounds = list(range(0, n, batch)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
