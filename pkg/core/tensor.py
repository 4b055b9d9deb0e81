"""
Tensor and ParamSet value types plus the ParamSet checkpoint codec.

Both types are immutable: the backing numpy arrays are marked read-only and every
operation returns a new value, so they can be handed between client threads freely.
"""
import hashlib
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Sequence, Tuple, Union

import numpy as np

from core.types import ContractError, DataError, StructuralError

ArrayLike = Union[np.ndarray, float, int, Sequence]

CHECKPOINT_MAGIC = b"SSLFLPS\x00"
CHECKPOINT_VERSION = 1


class Tensor:
    """
    Shape-tagged float64 array.

    Attributes:
        shape: Tuple of positive dimensions (empty tuple for scalars)
        data: Flat row-major view of the values
    """

    __slots__ = ("_array",)

    def __init__(self, data: ArrayLike, shape: Sequence[int] = None):
        array = np.array(data, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(d) for d in shape)
            if int(np.prod(shape, dtype=np.int64)) != array.size:
                raise StructuralError(f"cannot view {array.size} values as shape {shape}")
            array = array.reshape(shape)
        if any(d <= 0 for d in array.shape):
            raise StructuralError(f"tensor dimensions must be positive: {array.shape}")
        array.setflags(write=False)
        self._array = array

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Adopt an array produced inside the library without copying when it is already float64."""
        tensor = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        if not array.flags.c_contiguous or (array.flags.writeable and array.base is not None):
            array = array.copy()
        array.setflags(write=False)
        tensor._array = array
        return tensor

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls.wrap(np.zeros(tuple(shape), dtype=np.float64))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._array.shape

    @property
    def data(self) -> np.ndarray:
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def size(self) -> int:
        return self._array.size

    def item(self) -> float:
        if self._array.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._array.reshape(-1)[0])

    def bit_equal(self, other: "Tensor") -> bool:
        """True when shapes match and every float has the same bit pattern."""
        return self.shape == other.shape and self._array.tobytes() == other._array.tobytes()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class ParamSet(Mapping):
    """
    Ordered, immutable mapping from entry name to Tensor.

    Two ParamSets are shape-compatible when they hold the same names in the same
    order with identical shapes; linear combinations require compatibility.
    """

    def __init__(self, entries: Union[Mapping, Iterable[Tuple[str, Tensor]]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries: Dict[str, Tensor] = {}
        for name, value in items:
            if name in self._entries:
                raise StructuralError(f"duplicate entry name '{name}'")
            self._entries[name] = value if isinstance(value, Tensor) else Tensor(value)

    # -------------------------------------------------------------------------
    # Mapping protocol
    # -------------------------------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} entries)"

    def names(self) -> List[str]:
        return list(self._entries)

    def shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(name, t.shape) for name, t in self._entries.items()]

    # -------------------------------------------------------------------------
    # Compatibility and algebra
    # -------------------------------------------------------------------------

    def is_compatible(self, other: "ParamSet") -> bool:
        return self.shapes() == other.shapes()

    def require_compatible(self, other: "ParamSet", context: str = "ParamSet") -> None:
        """Raise StructuralError naming the first mismatching entry."""
        mine, theirs = self.shapes(), other.shapes()
        if mine == theirs:
            return
        for (n1, s1), (n2, s2) in zip(mine, theirs):
            if n1 != n2 or s1 != s2:
                raise StructuralError(f"{context}: entry '{n1}' {s1} does not match '{n2}' {s2}")
        raise StructuralError(f"{context}: entry counts differ ({len(mine)} vs {len(theirs)})")

    @staticmethod
    def linear_combination(sets: Sequence["ParamSet"], coeffs: Sequence[float]) -> "ParamSet":
        """
        Compute sum_k coeffs[k] * sets[k] entry by entry.

        Accumulation runs in list order starting from the first weighted term, so the
        result is independent of thread scheduling and a single set with coefficient
        1.0 comes back bit-identical.
        """
        if not sets:
            raise StructuralError("linear combination of an empty list")
        if len(sets) != len(coeffs):
            raise StructuralError(f"{len(sets)} ParamSets but {len(coeffs)} coefficients")
        first = sets[0]
        for other in sets[1:]:
            first.require_compatible(other, "linear combination")
        out = []
        for name in first:
            acc = coeffs[0] * first[name].array
            for ps, c in zip(sets[1:], coeffs[1:]):
                acc = acc + c * ps[name].array
            out.append((name, Tensor.wrap(acc)))
        return ParamSet(out)

    @staticmethod
    def weighted_average(sets: Sequence["ParamSet"], alphas: Sequence[float]) -> "ParamSet":
        """
        Convex combination sum_k alphas[k] * sets[k] with sum(alphas) == 1.

        Evaluated as w_0 + sum_{k>0} alphas[k] * (w_k - w_0), which equals the plain
        weighted sum when the weights sum to one and returns w_0 bit-for-bit whenever
        all inputs are identical.
        """
        if not sets:
            raise StructuralError("weighted average of an empty list")
        if len(sets) != len(alphas):
            raise StructuralError(f"{len(sets)} ParamSets but {len(alphas)} weights")
        if abs(sum(alphas) - 1.0) > 1e-9:
            raise ContractError(f"averaging weights must sum to 1, got {sum(alphas)!r}")
        anchor = sets[0]
        for other in sets[1:]:
            anchor.require_compatible(other, "weighted average")
        out = []
        for name in anchor:
            base = anchor[name].array
            acc = base
            for ps, a in zip(sets[1:], alphas[1:]):
                acc = acc + a * (ps[name].array - base)
            out.append((name, Tensor.wrap(acc) if acc is not base else anchor[name]))
        return ParamSet(out)

    def zeros_like(self) -> "ParamSet":
        return ParamSet((name, Tensor.zeros(t.shape)) for name, t in self._entries.items())

    def subset(self, prefixes: Iterable[str]) -> "ParamSet":
        """Entries whose name starts with '<prefix>.' for any given prefix, original order kept."""
        heads = tuple(f"{p}." for p in prefixes)
        return ParamSet((n, t) for n, t in self._entries.items() if n.startswith(heads))

    def replace(self, other: "ParamSet") -> "ParamSet":
        """Copy of self with every entry of other overwritten; names and shapes must already exist."""
        for name, t in other.items():
            if name not in self._entries:
                raise StructuralError(f"cannot replace unknown entry '{name}'")
            if self._entries[name].shape != t.shape:
                raise StructuralError(
                    f"entry '{name}' has shape {self._entries[name].shape}, replacement has {t.shape}")
        return ParamSet((n, other[n] if n in other else t) for n, t in self._entries.items())

    def bit_equal(self, other: "ParamSet") -> bool:
        return self.is_compatible(other) and all(self[n].bit_equal(other[n]) for n in self)

    def checksum(self) -> str:
        """SHA-256 over names, shapes and raw float bytes."""
        digest = hashlib.sha256()
        for name, t in self._entries.items():
            digest.update(name.encode("utf-8"))
            digest.update(repr(t.shape).encode("ascii"))
            digest.update(t.array.astype("<f8").tobytes())
        return digest.hexdigest()

    # =========================================================================
    # CHECKPOINT CODEC
    # =========================================================================

    def to_bytes(self) -> bytes:
        """
        Serialize to the checkpoint format.

        Layout: magic, u16 version, u32 entry count, then per entry u16 name length,
        UTF-8 name, u8 rank, u32 dims, little-endian float64 payload.
        """
        parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(self))]
        for name, t in self._entries.items():
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<B", len(t.shape)))
            parts.append(struct.pack(f"<{len(t.shape)}I", *t.shape))
            parts.append(t.array.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamSet":
        if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise DataError("not a ParamSet checkpoint (bad magic)")
        offset = len(CHECKPOINT_MAGIC)
        try:
            version, count = struct.unpack_from("<HI", blob, offset)
            if version != CHECKPOINT_VERSION:
                raise DataError(f"unsupported checkpoint version {version}")
            offset += struct.calcsize("<HI")
            entries = []
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", blob, offset)
                offset += 2
                name = blob[offset:offset + name_len].decode("utf-8")
                offset += name_len
                (rank,) = struct.unpack_from("<B", blob, offset)
                offset += 1
                dims = struct.unpack_from(f"<{rank}I", blob, offset)
                offset += 4 * rank
                n_values = int(np.prod(dims, dtype=np.int64))
                payload = np.frombuffer(blob, dtype="<f8", count=n_values, offset=offset)
                offset += 8 * n_values
                entries.append((name, Tensor(payload.astype(np.float64), shape=dims)))
        except struct.error as exc:
            raise DataError(f"truncated checkpoint: {exc}") from exc
        except ValueError as exc:
            raise DataError(f"corrupt checkpoint: {exc}") from exc
        if offset != len(blob):
            raise DataError(f"checkpoint has {len(blob) - offset} trailing bytes")
        return cls(entries)

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ParamSet":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())
