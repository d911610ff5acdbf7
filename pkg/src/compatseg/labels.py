"""Tri-state partial multi-label annotations.

Every pixel carries one state per class: POSITIVE (certainly a member),
NEGATIVE (certainly not a member) or UNKNOWN (membership missing).  Rows are
stored pixel-major, i.e. a field of ``height x width`` pixels and ``m`` classes
is an array of shape ``(height * width, m)``.

Class indices are zero-based; by convention the background is the last class
(``m - 1``) and is treated like any other class.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable

import numpy as np


class State(IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    UNKNOWN = 2


class LabelError(ValueError):
    """Raised for malformed or inconsistent annotations."""


@dataclass(frozen=True)
class ClassSet:
    """A subset of the ``m`` class indices ``{0, ..., m-1}``."""

    members: frozenset[int]
    m: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", frozenset(int(c) for c in self.members))
        if self.m < 1:
            raise LabelError(f"class count must be positive, got {self.m}")
        bad = sorted(c for c in self.members if not 0 <= c < self.m)
        if bad:
            raise LabelError(f"class indices {bad} outside [0, {self.m})")

    @classmethod
    def of(cls, members: Iterable[int], m: int) -> "ClassSet":
        return cls(frozenset(members), m)

    @classmethod
    def full(cls, m: int) -> "ClassSet":
        return cls(frozenset(range(m)), m)

    def complement(self) -> "ClassSet":
        return ClassSet(frozenset(range(self.m)) - self.members, self.m)

    def indices(self) -> np.ndarray:
        return np.array(sorted(self.members), dtype=np.intp)

    def mask(self) -> np.ndarray:
        out = np.zeros(self.m, dtype=bool)
        out[self.indices()] = True
        return out

    def __contains__(self, item: object) -> bool:
        return item in self.members

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(sorted(self.members))


@dataclass(frozen=True, eq=False)
class LabelField:
    """Partial annotation of one 2-D image.

    ``states`` is a read-only ``uint8`` array of shape ``(V, m)`` holding
    :class:`State` codes; ``known_classes`` is the set of annotated classes.
    """

    height: int
    width: int
    states: np.ndarray
    known_classes: ClassSet

    def __post_init__(self) -> None:
        states = np.array(self.states, dtype=np.uint8, copy=True)
        v = self.height * self.width
        if states.ndim != 2 or states.shape[0] != v:
            raise LabelError(f"states must have shape ({v}, m), got {states.shape}")
        if states.shape[1] != self.known_classes.m:
            raise LabelError("states column count disagrees with known_classes.m")
        if np.any(states > State.UNKNOWN):
            raise LabelError("state codes must be 0, 1 or 2")
        pos = states == State.POSITIVE
        unk = states == State.UNKNOWN
        n_pos = pos.sum(axis=1)
        if np.any(n_pos > 1):
            raise LabelError("a pixel has more than one positive class")
        determined = n_pos == 1
        if np.any(states[determined] == State.UNKNOWN):
            raise LabelError("a pixel with a positive class has unknown entries")
        if np.any(unk[:, self.known_classes.mask()]):
            raise LabelError("unknown entries found in an annotated class column")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def m(self) -> int:
        return self.known_classes.m

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    @property
    def is_fully_determined(self) -> bool:
        return not np.any(self.states == State.UNKNOWN)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelField):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and self.known_classes == other.known_classes
            and np.array_equal(self.states, other.states)
        )

    def __hash__(self) -> int:
        return hash((self.height, self.width, self.known_classes, self.states.tobytes()))

    def class_map(self) -> np.ndarray:
        """Per-pixel class index; ``-1`` where no class is positive."""
        pos = self.states == State.POSITIVE
        out = np.argmax(pos, axis=1).astype(np.intp)
        out[~pos.any(axis=1)] = -1
        return out

    def to_bytes(self) -> bytes:
        header = struct.pack("<III", self.height, self.width, self.m)
        return header + self.states.tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "LabelField":
        """Inverse of :meth:`to_bytes`.

        The layout carries no explicit class set; a column is taken as
        annotated iff it holds no unknown entry.
        """
        field_, rest = read_label_field(data)
        if rest:
            raise LabelError(f"{len(rest)} trailing bytes after label field")
        return field_


HEADER_SIZE = 12


def read_label_field(data: bytes) -> tuple[LabelField, bytes]:
    if len(data) < HEADER_SIZE:
        raise LabelError("truncated label header")
    height, width, m = struct.unpack_from("<III", data, 0)
    n = height * width * m
    body = data[HEADER_SIZE : HEADER_SIZE + n]
    if len(body) != n:
        raise LabelError("truncated label body")
    states = np.frombuffer(body, dtype=np.uint8).reshape(height * width, m)
    known = ClassSet.of(np.flatnonzero(~(states == State.UNKNOWN).any(axis=0)), m)
    return LabelField(height, width, states, known), data[HEADER_SIZE + n :]


def encode_full(class_map: np.ndarray, m: int) -> LabelField:
    """One-hot ground truth from a ``(height, width)`` map of class indices."""
    class_map = np.asarray(class_map)
    if class_map.ndim != 2:
        raise LabelError("class_map must be 2-D")
    if not np.issubdtype(class_map.dtype, np.integer):
        raise LabelError("class_map must hold integer class indices")
    if class_map.size and (class_map.min() < 0 or class_map.max() >= m):
        raise LabelError(f"class index outside [0, {m})")
    h, w = class_map.shape
    states = np.zeros((h * w, m), dtype=np.uint8)
    states[np.arange(h * w), class_map.ravel()] = State.POSITIVE
    return LabelField(h, w, states, ClassSet.full(m))


def is_ground_truth(label: LabelField) -> bool:
    return len(label.known_classes) == label.m and bool(
        np.all((label.states == State.POSITIVE).sum(axis=1) == 1)
    )


def restrict(gt: LabelField, keep: ClassSet | Iterable[int]) -> LabelField:
    """Keep only the annotation of the classes in ``keep``.

    Pixels whose true class is kept stay one-hot.  Every other pixel becomes
    NEGATIVE on the kept columns and UNKNOWN on the rest.  Keeping ``m - 1``
    classes returns the ground truth itself.
    """
    if not is_ground_truth(gt):
        raise LabelError("restrict expects a fully annotated one-hot field")
    if not isinstance(keep, ClassSet):
        keep = ClassSet.of(keep, gt.m)
    if keep.m != gt.m:
        raise LabelError("keep refers to a different class count")
    if not keep.members:
        raise LabelError("keep must not be empty")
    cls = gt.class_map()
    kept_pixel = keep.mask()[cls]
    states = np.where(keep.mask()[None, :], State.NEGATIVE, State.UNKNOWN).astype(np.uint8)
    states = np.repeat(states, gt.num_pixels, axis=0)
    states[kept_pixel] = gt.states[kept_pixel]
    label = LabelField(gt.height, gt.width, states, keep)
    # with one class left out, exclusion determines it: this is full annotation
    return complete(label) if len(keep) == gt.m - 1 else label


def complete(label: LabelField) -> LabelField:
    """Resolve pixels whose only remaining candidate class is forced.

    A pixel with no positive entry and exactly one unknown entry must belong
    to that class.  With ``m - 1`` classes kept this recovers the ground truth.
    """
    states = label.states.copy()
    unk = states == State.UNKNOWN
    forced = (unk.sum(axis=1) == 1) & ~(states == State.POSITIVE).any(axis=1)
    states[forced] = np.where(unk[forced], State.POSITIVE, State.NEGATIVE)
    unresolved = (states == State.UNKNOWN).any(axis=0)
    known = ClassSet.of(np.flatnonzero(~unresolved), label.m)
    return LabelField(label.height, label.width, states, known)


def default_p(label: LabelField) -> float:
    """Uniform mass over the unannotated classes, so unlabeled rows sum to 1."""
    n_unknown = label.m - len(label.known_classes)
    return 1.0 / max(n_unknown, 2)


def numeric_encoding(label: LabelField, p_value: float | None = None) -> np.ndarray:
    """Map POSITIVE -> 1, NEGATIVE -> 0, UNKNOWN -> ``p_value``."""
    if p_value is None:
        p_value = default_p(label)
    if not 0.0 < p_value < 1.0:
        raise LabelError(f"p_value must lie in (0, 1), got {p_value}")
    out = np.zeros(label.states.shape, dtype=np.float64)
    out[label.states == State.POSITIVE] = 1.0
    out[label.states == State.UNKNOWN] = p_value
    return out


def masks(label: LabelField) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean ``(V, m)`` indicator maps ``(positive, negative, unknown)``."""
    s = label.states
    return s == State.POSITIVE, s == State.NEGATIVE, s == State.UNKNOWN
