"""Synthetic multi-structure segmentation tasks and the partial-annotation protocol.

Each image holds a ring around an inner ellipse plus a disjoint blob, echoing
the LV / MYO / RV layout of short-axis cardiac slices; extra classes add more
disjoint blobs.  The last class is background.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .conditional import ConditionalLabelStack
from .labels import ClassSet, LabelField, encode_full, read_label_field, restrict


class GenerationError(RuntimeError):
    """The geometry sampler could not place every structure."""


class DonorError(LookupError):
    """Some class has no annotated conditional image to draw from."""


@dataclass(frozen=True)
class TaskSpec:
    height: int = 32
    width: int = 32
    m: int = 4
    noise_sigma: float = 0.15
    blur_sigma: float = 1.0
    inner_radius: tuple[float, float] = (3.0, 5.5)
    ring_width: tuple[float, float] = (1.5, 3.0)
    blob_radius: tuple[float, float] = (2.5, 4.5)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.m < 3:
            raise ValueError("a partial-annotation task needs m >= 3")
        if self.height % 4 or self.width % 4:
            raise ValueError("height and width must be divisible by 4")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise and blur widths must be non-negative")

    def intensities(self) -> np.ndarray:
        """Per-class base intensity, consecutive levels ``max(2 sigma, 0.4)`` apart.

        Background 0, ring 1 step, blobs 2..m-2 steps, inner ellipse brightest.
        """
        gap = max(2.0 * self.noise_sigma, 0.4)
        levels = np.zeros(self.m)
        levels[1] = gap
        for cls in range(2, self.m - 1):
            levels[cls] = gap * cls
        levels[0] = gap * (self.m - 1)
        return levels


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # (H, W) float64
    gt: LabelField

    def class_map(self) -> np.ndarray:
        return self.gt.class_map().reshape(self.gt.height, self.gt.width)


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _draw_geometry(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, m = spec.height, spec.width, spec.m
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    bg = m - 1
    for _ in range(100):
        cmap = np.full((h, w), bg, dtype=np.intp)
        cy = h / 2 + rng.uniform(-h / 10, h / 10)
        cx = w / 2 + rng.uniform(0, w / 8)
        ry, rx = rng.uniform(*spec.inner_radius, size=2)
        t = rng.uniform(*spec.ring_width)
        theta = rng.uniform(0, np.pi)
        outer = _ellipse(yy, xx, cy, cx, ry + t, rx + t, theta)
        inner = _ellipse(yy, xx, cy, cx, ry, rx, theta)
        occupied = outer.copy()
        cmap[outer] = 1
        cmap[inner] = 0
        ok = True
        for cls in range(2, m - 1):
            placed = False
            for _ in range(20):
                br, bc = rng.uniform(*spec.blob_radius, size=2)
                if cls == 2:
                    # hug the ring on its left, like a right ventricle
                    by = cy + rng.uniform(-2.0, 2.0)
                    bx = cx - (max(ry, rx) + t + bc + rng.uniform(0.5, 2.0))
                else:
                    by, bx = rng.uniform(br + 1, h - br - 1), rng.uniform(bc + 1, w - bc - 1)
                blob = _ellipse(yy, xx, by, bx, br, bc, rng.uniform(0, np.pi))
                grown = blob | np.roll(blob, 1, 0) | np.roll(blob, -1, 0) | np.roll(blob, 1, 1) | np.roll(blob, -1, 1)
                if blob.sum() >= 4 and not (grown & occupied).any():
                    cmap[blob] = cls
                    occupied |= blob
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok and all((cmap == k).any() for k in range(m)):
            return cmap
    raise GenerationError("could not place all structures after 100 attempts")


def _render(cmap: np.ndarray, spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    img = spec.intensities()[cmap]
    if spec.blur_sigma > 0:
        img = gaussian_filter(img, spec.blur_sigma, mode="nearest")
    return img + rng.normal(0.0, spec.noise_sigma, size=img.shape)


def generate(spec: TaskSpec, n: int, offset: int = 0) -> list[Sample]:
    """``n`` samples; sample ``i`` depends only on ``(spec.seed, offset + i)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    out = []
    for i in range(offset, offset + n):
        rng = np.random.default_rng([spec.seed, i])
        cmap = _draw_geometry(spec, rng)
        out.append(Sample(_render(cmap, spec, rng), encode_full(cmap, spec.m)))
    return out


@dataclass(frozen=True, eq=False)
class PartialSample:
    sample: Sample
    label: LabelField

    @property
    def image(self) -> np.ndarray:
        return self.sample.image

    @property
    def kept(self) -> ClassSet:
        return self.label.known_classes


def balanced_assignment(n: int, m: int, q: int, rng: np.random.Generator) -> list[frozenset[int]]:
    """``n`` q-subsets of ``range(m)`` in which every class appears floor/ceil(n*q/m) times."""
    counts = np.zeros(m, dtype=int)
    out = []
    for _ in range(n):
        tiebreak = rng.permutation(m)
        order = sorted(range(m), key=lambda c: (counts[c], tiebreak[c]))
        pick = frozenset(order[:q])
        for c in pick:
            counts[c] += 1
        out.append(pick)
    perm = rng.permutation(n)
    return [out[k] for k in perm]


def partialize(samples: Sequence[Sample], q: int, seed: int) -> list[PartialSample]:
    """Keep ``q`` randomly chosen classes per image, balanced across classes."""
    if not samples:
        return []
    m = samples[0].gt.m
    if not 1 <= q <= m - 1:
        raise ValueError(f"q must lie in [1, {m - 1}], got {q}")
    rng = np.random.default_rng([seed, 0x9A57])
    kept = balanced_assignment(len(samples), m, q, rng)
    return [PartialSample(s, restrict(s.gt, ClassSet(k, m))) for s, k in zip(samples, kept)]


def donors_by_class(pool: Sequence[PartialSample], m: int) -> list[list[int]]:
    return [[i for i, ps in enumerate(pool) if j in ps.kept] for j in range(m)]


def _bundle(pool: Sequence[PartialSample], chosen: Sequence[int]) -> tuple[np.ndarray, np.ndarray, list[int]]:
    images = np.stack([pool[i].image for i in chosen])
    stack = ConditionalLabelStack.from_donors([pool[i].label for i in chosen])
    h, w = images.shape[1:]
    return images, stack.maps.reshape(len(chosen), h, w).astype(np.float64), list(chosen)


def sample_conditionals(pool: Sequence[PartialSample], target: int | None,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Draw one donor per class uniformly among the pool images annotating it.

    ``target`` (a pool index, or ``None`` for an outside image) is never drawn.
    Returns ``(images (m,H,W), masks (m,H,W), donor indices)``.
    """
    m = pool[0].label.m
    chosen = []
    for j, cands in enumerate(donors_by_class(pool, m)):
        cands = [i for i in cands if i != target]
        if not cands:
            raise DonorError(f"no annotated donor for class {j}")
        chosen.append(cands[int(rng.integers(len(cands)))])
    return _bundle(pool, chosen)


def fixed_conditionals(pool: Sequence[PartialSample], target: int | None = None):
    """Deterministic variant of :func:`sample_conditionals`: lowest-index donor per class."""
    m = pool[0].label.m
    chosen = []
    for j, cands in enumerate(donors_by_class(pool, m)):
        cands = [i for i in cands if i != target]
        if not cands:
            raise DonorError(f"no annotated donor for class {j}")
        chosen.append(cands[0])
    return _bundle(pool, chosen)


# dataset files ----------------------------------------------------------------

DATA_MAGIC = b"CSDS"


def dump_split(path: str | Path, items: Sequence[PartialSample], ids: Sequence[int]) -> None:
    """One binary file per split plus a ``.index`` text file of ids and kept classes.

    Record layout: ``id, height, width`` (u32 LE), the image as float64 LE, the
    ground-truth field, then the partial field.
    """
    path = Path(path)
    chunks = [DATA_MAGIC, struct.pack("<BI", 1, len(items))]
    lines = ["id,kept"]
    for sid, item in zip(ids, items):
        h, w = item.image.shape
        chunks.append(struct.pack("<III", sid, h, w))
        chunks.append(np.ascontiguousarray(item.image, dtype="<f8").tobytes())
        chunks.append(item.sample.gt.to_bytes())
        chunks.append(item.label.to_bytes())
        lines.append(f"{sid},{' '.join(str(c) for c in item.kept)}")
    path.write_bytes(b"".join(chunks))
    index_path(path).write_text("\n".join(lines) + "\n")


def index_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".index")


def load_split(path: str | Path) -> list[tuple[int, PartialSample]]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != DATA_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    _, count = struct.unpack_from("<BI", data, 4)
    kept_by_id: dict[int, frozenset[int]] = {}
    if index_path(path).exists():
        for line in index_path(path).read_text().splitlines()[1:]:
            sid, _, kept = line.partition(",")
            kept_by_id[int(sid)] = frozenset(int(c) for c in kept.split())
    rest = data[9:]
    out = []
    for _ in range(count):
        sid, h, w = struct.unpack_from("<III", rest, 0)
        rest = rest[12:]
        img = np.frombuffer(rest[: 8 * h * w], dtype="<f8").reshape(h, w).astype(np.float64)
        rest = rest[8 * h * w :]
        gt, rest = read_label_field(rest)
        label, rest = read_label_field(rest)
        if sid in kept_by_id:
            label = LabelField(h, w, label.states, ClassSet(kept_by_id[sid], label.m))
        out.append((sid, PartialSample(Sample(img, gt), label)))
    if rest:
        raise ValueError(f"{path}: trailing bytes")
    return out
