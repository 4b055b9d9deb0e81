"""
Synthetic data tests:
- Center generation: counts, determinism, stain separation, value range
- Pseudo images: counts, leakage, moment matching, contracts
- Patch-swap corruption and dihedral augmentation
- Stratified k-fold splits and batch slicing
"""

import numpy as np
import pytest

from core.synthdata import (CenterDataset, CenterSpec, augment, augment_dataset, batch_slices, corrupt,
                            default_prototypes, generate_center_dataset, generate_pseudo_images, kfold_split)
from core.tensor import Tensor
from core.types import ContractError

IDENTITY = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


def _center(center_id=0, n_per_class=25, sigma=0.05, matrix=IDENTITY, offset=(0.0, 0.0, 0.0), size=16):
    protos = tuple(default_prototypes(4, size, seed=1))
    return CenterSpec(center_id, n_per_class, protos, matrix, offset, sigma, size)


# ---------------------------------------------------------------------------
# Center datasets
# ---------------------------------------------------------------------------

def test_generate_counts_and_balance():
    ds = generate_center_dataset(_center(), seed=0)
    assert len(ds) == 100
    assert ds.class_counts() == [25, 25, 25, 25]
    assert ds.image_dims == (3, 16, 16)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_generation_is_deterministic_per_seed():
    a = generate_center_dataset(_center(), seed=4)
    b = generate_center_dataset(_center(), seed=4)
    c = generate_center_dataset(_center(), seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.tobytes() != c.images.tobytes()


def test_zero_noise_identity_stain_gives_identical_class_members():
    ds = generate_center_dataset(_center(n_per_class=5, sigma=0.0), seed=0)
    for label in range(4):
        members = ds.images[ds.labels == label]
        assert all(np.array_equal(members[0], m) for m in members[1:])


def test_stain_shift_separates_channel_means():
    a = generate_center_dataset(_center(0, offset=(0.0, 0.0, 0.0)), seed=0)
    b = generate_center_dataset(_center(1, matrix=((0.7, 0.1, 0.0), (0.0, 0.8, 0.0), (0.1, 0.0, 0.6)),
                                        offset=(0.15, -0.1, 0.2)), seed=1)
    mean_a = a.images.mean(axis=(2, 3))
    mean_b = b.images.mean(axis=(2, 3))
    spread = np.maximum(mean_a.std(axis=0), mean_b.std(axis=0))
    gap = np.abs(mean_a.mean(axis=0) - mean_b.mean(axis=0))
    assert np.any(gap > 3 * spread), f"channel mean gaps {gap} vs within-center spreads {spread}"


def test_dataset_arrays_are_read_only():
    ds = generate_center_dataset(_center(n_per_class=2), seed=0)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1.0


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(ContractError):
        CenterDataset(0, np.zeros((2, 3, 4, 4)), np.array([0, 2]), n_classes=2)


# ---------------------------------------------------------------------------
# Pseudo images
# ---------------------------------------------------------------------------

def test_pseudo_count_and_center_id():
    ds = generate_center_dataset(_center(center_id=2), seed=0)
    pseudo = generate_pseudo_images(ds, 1000, seed=9)
    assert len(pseudo) == 1000
    assert {p.center_id for p in pseudo} == {2}
    assert pseudo[0].image.shape == (3, 16, 16)


def test_pseudo_images_never_copy_real_ones():
    ds = generate_center_dataset(_center(n_per_class=3), seed=0)
    real = {img.tobytes() for img in ds.images}
    pseudo = generate_pseudo_images(ds, 200, seed=1)
    assert not any(p.image.array.tobytes() in real for p in pseudo)


def test_single_image_center_still_yields_distinct_pseudo_image():
    ds = generate_center_dataset(_center(n_per_class=1), seed=0).subset([0])
    pseudo = generate_pseudo_images(ds, 1, seed=0)
    assert len(pseudo) == 1
    assert not np.array_equal(pseudo[0].image.array, ds.images[0])


def test_pseudo_channel_means_follow_the_center():
    ds = generate_center_dataset(_center(), seed=0)
    pseudo = np.stack([p.image.array for p in generate_pseudo_images(ds, 1000, seed=3)])
    real_means = ds.images.mean(axis=(0, 2, 3))
    pseudo_means = pseudo.mean(axis=(0, 2, 3))
    assert np.all(np.abs(real_means - pseudo_means) < 0.05)


def test_pseudo_generation_is_deterministic():
    ds = generate_center_dataset(_center(n_per_class=3), seed=0)
    a = generate_pseudo_images(ds, 20, seed=5)
    b = generate_pseudo_images(ds, 20, seed=5)
    assert all(x.image.bit_equal(y.image) for x, y in zip(a, b))


def test_pseudo_contracts():
    ds = generate_center_dataset(_center(n_per_class=2), seed=0)
    with pytest.raises(ContractError):
        generate_pseudo_images(ds, 0, seed=0)
    with pytest.raises(ContractError):
        generate_pseudo_images(ds.subset([]), 5, seed=0)


# ---------------------------------------------------------------------------
# Corruption
# ---------------------------------------------------------------------------

def _random_image(seed=0, size=16):
    return Tensor(np.random.default_rng(seed).uniform(size=(3, size, size)))


def test_corrupt_without_swaps_is_identity():
    image = _random_image()
    assert corrupt(image, grid=4, k_swaps=0, seed=1).bit_equal(image)


def test_corrupt_preserves_pixel_multiset_and_changes_image():
    image = _random_image()
    out = corrupt(image, grid=4, k_swaps=4, seed=1)
    assert not out.bit_equal(image)
    assert np.array_equal(np.sort(out.array.reshape(-1)), np.sort(image.array.reshape(-1)))
    for c in range(3):
        assert np.array_equal(np.sort(out.array[c].reshape(-1)), np.sort(image.array[c].reshape(-1)))


def test_corrupt_moves_whole_patches():
    image = _random_image()
    out = corrupt(image, grid=4, k_swaps=1, seed=2).array
    src_patches = {image.array[:, y:y + 4, x:x + 4].tobytes() for y in range(0, 16, 4) for x in range(0, 16, 4)}
    out_patches = {out[:, y:y + 4, x:x + 4].tobytes() for y in range(0, 16, 4) for x in range(0, 16, 4)}
    assert src_patches == out_patches
    changed = sum(not np.array_equal(out[:, y:y + 4, x:x + 4], image.array[:, y:y + 4, x:x + 4])
                  for y in range(0, 16, 4) for x in range(0, 16, 4))
    assert changed == 2


def test_corrupt_is_deterministic_per_seed():
    image = _random_image()
    assert corrupt(image, 4, 4, seed=7).bit_equal(corrupt(image, 4, 4, seed=7))


@pytest.mark.parametrize("grid,k_swaps", [(5, 1), (4, -1), (4, 9), (2, 3)])
def test_corrupt_contracts(grid, k_swaps):
    with pytest.raises(ContractError):
        corrupt(_random_image(), grid=grid, k_swaps=k_swaps, seed=0)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def test_augment_gives_eight_variants_starting_with_the_input():
    image = _random_image()
    variants = augment(image)
    assert len(variants) == 8
    assert variants[0].bit_equal(image)
    assert len({v.array.tobytes() for v in variants}) == 8
    for v in variants:
        assert np.array_equal(np.sort(v.array.reshape(-1)), np.sort(image.array.reshape(-1)))


def test_augment_rotations_compose():
    variants = augment(_random_image())
    assert np.array_equal(np.rot90(variants[1].array, axes=(1, 2)), variants[2].array)
    assert np.array_equal(np.flip(variants[0].array, axis=-1), variants[4].array)


def test_augment_needs_square_images():
    with pytest.raises(ContractError):
        augment(Tensor(np.ones((3, 4, 6))))


def test_augment_dataset_expands_every_sample():
    ds = generate_center_dataset(_center(n_per_class=2, size=8), seed=0)
    big = augment_dataset(ds)
    assert len(big) == 8 * len(ds)
    assert np.array_equal(big.labels, np.repeat(ds.labels, 8))
    assert np.array_equal(big.images[8], ds.images[1])


# ---------------------------------------------------------------------------
# Splits and batches
# ---------------------------------------------------------------------------

def test_kfold_partitions_and_stratifies():
    ds = generate_center_dataset(_center(n_per_class=25, size=8), seed=0)
    folds = kfold_split(ds, 5, seed=3)
    assert len(folds) == 5
    tests = np.concatenate([f.test for f in folds])
    assert sorted(tests.tolist()) == list(range(100))
    for f in folds:
        assert len(f.test) == 20
        assert sorted(np.concatenate([f.train, f.test]).tolist()) == list(range(100))
        assert ds.subset(f.test).class_counts() == [5, 5, 5, 5]


def test_kfold_uneven_classes_stay_within_one():
    ds = generate_center_dataset(_center(n_per_class=7, size=8), seed=0)
    folds = kfold_split(ds, 3, seed=1)
    for label in range(4):
        counts = [int(np.sum(ds.labels[f.test] == label)) for f in folds]
        assert max(counts) - min(counts) <= 1
    sizes = [len(f.test) for f in folds]
    assert max(sizes) - min(sizes) <= 1


def test_kfold_is_deterministic():
    ds = generate_center_dataset(_center(n_per_class=5, size=8), seed=0)
    a, b = kfold_split(ds, 5, seed=2), kfold_split(ds, 5, seed=2)
    assert all(np.array_equal(x.test, y.test) for x, y in zip(a, b))


def test_kfold_contracts():
    ds = generate_center_dataset(_center(n_per_class=3, size=8), seed=0)
    with pytest.raises(ContractError):
        kfold_split(ds, 1, seed=0)
    with pytest.raises(ContractError):
        kfold_split(ds, 4, seed=0)


@pytest.mark.parametrize("n,batch,expected", [
    (8, 4, [(0, 4), (4, 8)]),
    (9, 4, [(0, 4), (4, 9)]),
    (10, 4, [(0, 4), (4, 8), (8, 10)]),
    (1, 4, [(0, 1)]),
    (0, 4, []),
])
def test_batch_slices(n, batch, expected):
    assert [(s.start, s.stop) for s in batch_slices(n, batch)] == expected


def test_batch_slices_needs_positive_batch():
    with pytest.raises(ContractError):
        batch_slices(5, 0)
