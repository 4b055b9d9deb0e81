"""
Dataset archive codec.

Layout: magic, u16 version, u32 n_samples, three u32 image dims, u32 n_classes,
then per sample u32 center_id, i32 label (-1 for pseudo images) and the
little-endian float64 pixels of the image.
"""
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from core.synthdata import CenterDataset, PseudoSample
from core.tensor import Tensor
from core.types import DataError

ARCHIVE_MAGIC = b"SSLFLDS\x00"
ARCHIVE_VERSION = 1
PSEUDO_LABEL = -1

_HEADER = struct.Struct("<HIIIII")
_RECORD = struct.Struct("<Ii")


@dataclass(frozen=True)
class Archive:
    center_ids: np.ndarray
    labels: np.ndarray
    images: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def encode_archive(center_ids: Sequence[int], labels: Sequence[int], images: np.ndarray, n_classes: int) -> bytes:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] != len(labels) or len(labels) != len(center_ids):
        raise DataError(f"archive needs matching counts, got {images.shape} images, "
                        f"{len(labels)} labels, {len(center_ids)} center ids")
    _, c, h, w = images.shape
    parts = [ARCHIVE_MAGIC, _HEADER.pack(ARCHIVE_VERSION, len(labels), c, h, w, n_classes)]
    for cid, label, image in zip(center_ids, labels, images):
        parts.append(_RECORD.pack(int(cid), int(label)))
        parts.append(image.astype("<f8").tobytes())
    return b"".join(parts)


def decode_archive(blob: bytes) -> Archive:
    if blob[:len(ARCHIVE_MAGIC)] != ARCHIVE_MAGIC:
        raise DataError("not a dataset archive (bad magic)")
    offset = len(ARCHIVE_MAGIC)
    try:
        version, n, c, h, w, n_classes = _HEADER.unpack_from(blob, offset)
    except struct.error as exc:
        raise DataError(f"truncated archive header: {exc}") from exc
    if version != ARCHIVE_VERSION:
        raise DataError(f"unsupported archive version {version}")
    offset += _HEADER.size
    pixels = c * h * w
    expected = offset + n * (_RECORD.size + 8 * pixels)
    if len(blob) != expected:
        raise DataError(f"archive size {len(blob)} does not match header (expected {expected} bytes)")
    center_ids = np.empty(n, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    images = np.empty((n, c, h, w), dtype=np.float64)
    for i in range(n):
        center_ids[i], labels[i] = _RECORD.unpack_from(blob, offset)
        offset += _RECORD.size
        images[i] = np.frombuffer(blob, dtype="<f8", count=pixels, offset=offset).reshape(c, h, w)
        offset += 8 * pixels
    return Archive(center_ids, labels, images, n_classes)


def write_archive(path: Union[str, Path], blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)


def read_archive(path: Union[str, Path]) -> Archive:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset archive not found: {path}")
    return decode_archive(path.read_bytes())


# -----------------------------------------------------------------------------
# Dataset adapters
# -----------------------------------------------------------------------------

def dataset_to_bytes(dataset: CenterDataset) -> bytes:
    return encode_archive([dataset.center_id] * len(dataset), dataset.labels, dataset.images, dataset.n_classes)


def dataset_from_archive(archive: Archive) -> CenterDataset:
    ids = set(archive.center_ids.tolist())
    if len(ids) != 1:
        raise DataError(f"a center archive must hold exactly one center, found {sorted(ids)}")
    if np.any(archive.labels < 0):
        raise DataError("center archive contains unlabelled (pseudo) samples")
    return CenterDataset(ids.pop(), archive.images, archive.labels, archive.n_classes)


def pseudo_to_bytes(samples: Sequence[PseudoSample], n_classes: int) -> bytes:
    if not samples:
        raise DataError("refusing to write an empty pseudo archive")
    images = np.stack([s.image.array for s in samples])
    return encode_archive([s.center_id for s in samples], [PSEUDO_LABEL] * len(samples), images, n_classes)


def pseudo_from_archive(archive: Archive) -> List[PseudoSample]:
    if np.any(archive.labels != PSEUDO_LABEL):
        raise DataError("pseudo archive contains labelled samples")
    return [PseudoSample(Tensor(image), int(cid)) for cid, image in zip(archive.center_ids, archive.images)]
