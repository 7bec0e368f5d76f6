"""Tri-state labels, schemas, and assembly of datasets into a union schema."""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..autodiff import ContractError


class LabelState(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    UNKNOWN = -1

    @property
    def char(self) -> str:
        return {0: "N", 1: "P", -1: "U"}[int(self)]

    @classmethod
    def from_char(cls, c: str) -> "LabelState":
        try:
            return {"N": cls.NEGATIVE, "P": cls.POSITIVE, "U": cls.UNKNOWN}[c]
        except KeyError:
            raise ContractError(f"unknown label state character {c!r}") from None


NEG, POS, UNK = int(LabelState.NEGATIVE), int(LabelState.POSITIVE), int(LabelState.UNKNOWN)


@dataclass(frozen=True)
class LabelSchema:
    classes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(str(c) for c in self.classes))
        if len(set(self.classes)) != len(self.classes):
            raise ContractError(f"schema has duplicate class names: {list(self.classes)}")

    @classmethod
    def canonical(cls, names: Iterable[str]) -> "LabelSchema":
        return cls(tuple(sorted({str(n) for n in names})))

    @property
    def n(self) -> int:
        return len(self.classes)

    def __len__(self) -> int:
        return len(self.classes)

    def __iter__(self):
        return iter(self.classes)

    def __contains__(self, name) -> bool:
        return str(name) in self.classes

    def index(self, name) -> int:
        try:
            return self.classes.index(str(name))
        except ValueError:
            raise ContractError(f"class {name!r} is not in schema {list(self.classes)}") from None

    def indices(self, names: Iterable[str]) -> list[int]:
        return [self.index(n) for n in names]


DIGITS = LabelSchema(tuple(str(d) for d in range(10)))


@dataclass(frozen=True)
class PartialLabelVector:
    states: tuple[LabelState, ...]

    @classmethod
    def from_codes(cls, codes) -> "PartialLabelVector":
        return cls(tuple(LabelState(int(c)) for c in codes))

    @classmethod
    def from_string(cls, s: str) -> "PartialLabelVector":
        return cls(tuple(LabelState.from_char(c) for c in s))

    def to_string(self) -> str:
        return "".join(s.char for s in self.states)

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    labels: PartialLabelVector


def states_to_strings(states: np.ndarray) -> list[str]:
    table = np.array(["U", "N", "P"])
    return ["".join(row) for row in table[states.astype(np.int64) + 1]]


def strings_to_states(rows: Sequence[str], n: int) -> np.ndarray:
    out = np.empty((len(rows), n), dtype=np.int8)
    for i, row in enumerate(rows):
        if len(row) != n:
            raise ContractError(f"label string {row!r} has length {len(row)}, schema has {n}")
        out[i] = [int(LabelState.from_char(c)) for c in row]
    return out


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class _Labeled:
    """Shared storage: images (N, H, W) in [0, 1] and int8 states (N, n)."""

    schema: LabelSchema
    images: np.ndarray
    states: np.ndarray

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:])

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], PartialLabelVector.from_codes(self.states[i]))

    def unknown_count(self) -> int:
        return int(np.count_nonzero(self.states == UNK))

    def known_mask(self) -> np.ndarray:
        return self.states != UNK

    def targets(self) -> np.ndarray:
        return (self.states == POS).astype(np.float64)


@dataclass(frozen=True, eq=False)
class SourceDataset(_Labeled):
    name: str
    schema: LabelSchema
    images: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 3:
            raise ContractError(f"images must be (N, H, W), got shape {images.shape}")
        states = np.asarray(self.states, dtype=np.int8)
        if images.shape[0] == 0:
            states = states.reshape(0, self.schema.n)
        if states.shape != (images.shape[0], self.schema.n):
            raise ContractError(
                f"states shape {states.shape} does not match {images.shape[0]} samples "
                f"x {self.schema.n} classes")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ContractError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "images", _frozen(images, np.float64))
        object.__setattr__(self, "states", _frozen(states, np.int8))

    def take(self, indices, name: str | None = None) -> "SourceDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return SourceDataset(name or self.name, self.schema, self.images[idx], self.states[idx])

    def renamed(self, name: str) -> "SourceDataset":
        return SourceDataset(name, self.schema, self.images, self.states)


def make_partial(d: SourceDataset, keep_classes: Iterable[str], name: str | None = None
                 ) -> SourceDataset:
    """Restrict ``d`` to ``keep_classes``; every image is kept.

    Images of classes that are dropped stay in the dataset as all-Negative
    rows, since they are true negatives for every kept class.
    """
    keep = {str(c) for c in keep_classes}
    if not keep:
        raise ContractError("make_partial: keep_classes is empty")
    missing = keep - set(d.schema.classes)
    if missing:
        raise ContractError(f"make_partial: {sorted(missing)} not in schema {list(d.schema)}")
    schema = LabelSchema.canonical(keep)
    return SourceDataset(name or d.name, schema, d.images, d.states[:, d.schema.indices(schema)])


@dataclass(frozen=True)
class SourceInfo:
    name: str
    schema: LabelSchema
    count: int


@dataclass(frozen=True, eq=False)
class AssembledDataset(_Labeled):
    union_schema: LabelSchema
    images: np.ndarray
    states: np.ndarray
    provenance: tuple[str, ...]
    source_index: np.ndarray
    sources: tuple[SourceInfo, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "images", _frozen(self.images, np.float64))
        object.__setattr__(self, "states", _frozen(self.states, np.int8))
        object.__setattr__(self, "source_index", _frozen(self.source_index, np.int64))
        object.__setattr__(self, "provenance", tuple(self.provenance))
        n = len(self.images)
        if self.states.shape != (n, self.union_schema.n):
            raise ContractError(f"states shape {self.states.shape} vs {n} x {self.union_schema.n}")
        if len(self.provenance) != n or len(self.source_index) != n:
            raise ContractError("provenance must have one entry per sample")

    @property
    def schema(self) -> LabelSchema:
        return self.union_schema

    def restrict(self, classes: Iterable[str]) -> np.ndarray:
        """States on ``classes`` (in the given order) for every sample."""
        return self.states[:, self.union_schema.indices(list(classes))]

    def restricted(self, classes: Iterable[str]) -> "AssembledDataset":
        schema = LabelSchema.canonical(classes)
        return AssembledDataset(schema, self.images, self.restrict(schema), self.provenance,
                                self.source_index, tuple(
                                    SourceInfo(s.name, LabelSchema.canonical(
                                        set(s.schema) & set(schema)), s.count)
                                    for s in self.sources))

    def take(self, indices) -> "AssembledDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return AssembledDataset(self.union_schema, self.images[idx], self.states[idx],
                                tuple(self.provenance[i] for i in idx), self.source_index[idx],
                                self.sources)

    def source_names(self) -> list[str]:
        return [s.name for s in self.sources]


def assemble(sources: Sequence[SourceDataset]) -> AssembledDataset:
    """Merge sources under the lexicographic union of their schemas.

    States a source never annotated become Unknown; sample order is the
    concatenation of ``sources`` in argument order.
    """
    sources = list(sources)
    if not sources:
        raise ContractError("assemble: need at least one source")
    names = [s.name for s in sources]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ContractError(f"assemble: duplicate dataset names {dupes}")
    shapes = {s.image_shape for s in sources if len(s)}
    if len(shapes) > 1:
        raise ContractError(f"assemble: sources disagree on image shape {sorted(shapes)}")
    union = LabelSchema.canonical(c for s in sources for c in s.schema)
    images, states, provenance, source_index = [], [], [], []
    for s in sources:
        block = np.full((len(s), union.n), UNK, dtype=np.int8)
        block[:, union.indices(s.schema)] = s.states
        images.append(s.images)
        states.append(block)
        provenance.extend([s.name] * len(s))
        source_index.append(np.arange(len(s)))
    shape = next(iter(shapes)) if shapes else (28, 28)
    return AssembledDataset(
        union,
        np.concatenate(images) if images else np.zeros((0, *shape)),
        np.concatenate(states),
        tuple(provenance),
        np.concatenate(source_index),
        tuple(SourceInfo(s.name, s.schema, len(s)) for s in sources),
    )


def as_assembled(d: SourceDataset | AssembledDataset) -> AssembledDataset:
    return d if isinstance(d, AssembledDataset) else assemble([d])


def content_hash(d: SourceDataset | AssembledDataset) -> str:
    """Git-style blob SHA-1 over schema, label states and pixel bytes."""
    header = json.dumps(list(d.schema.classes)).encode()
    payload = header + b"\0" + np.ascontiguousarray(d.states).tobytes() + \
        np.ascontiguousarray(d.images).tobytes()
    h = hashlib.sha1(f"blob {len(payload)}\0".encode())
    h.update(payload)
    return h.hexdigest()


# ------------------------------------------------------------------ manifest


def manifest_dict(d: AssembledDataset, image_files: dict[str, str] | None = None) -> dict:
    image_files = image_files or {}
    sources = []
    for s in d.sources:
        entry = {"name": s.name, "schema": list(s.schema.classes), "count": s.count}
        if s.name in image_files:
            entry["images"] = image_files[s.name]
        sources.append(entry)
    strings = states_to_strings(d.states)
    return {
        "union_schema": list(d.union_schema.classes),
        "sources": sources,
        "samples": [
            {"source": src, "index": int(idx), "label_states": st}
            for src, idx, st in zip(d.provenance, d.source_index, strings)
        ],
    }


def write_manifest(d: AssembledDataset, path: str | Path, image_files: dict[str, str]) -> None:
    Path(path).write_text(json.dumps(manifest_dict(d, image_files), indent=1) + "\n")


def read_manifest(path: str | Path) -> AssembledDataset:
    """Load a manifest; image files are resolved relative to its directory."""
    from .idx import read_idx_images

    path = Path(path)
    doc = json.loads(path.read_text())
    union = LabelSchema(tuple(doc["union_schema"]))
    pixels = {}
    infos = []
    for src in doc["sources"]:
        infos.append(SourceInfo(src["name"], LabelSchema(tuple(src["schema"])), int(src["count"])))
        if "images" in src:
            pixels[src["name"]] = read_idx_images(path.parent / src["images"])
    samples = doc["samples"]
    missing = sorted({s["source"] for s in samples} - set(pixels))
    if missing:
        raise ContractError(f"manifest {path}: no image file for sources {missing}")
    shape = next(iter(pixels.values())).shape[1:] if pixels else (28, 28)
    images = np.zeros((len(samples), *shape))
    for i, s in enumerate(samples):
        images[i] = pixels[s["source"]][int(s["index"])]
    states = strings_to_states([s["label_states"] for s in samples], union.n)
    return AssembledDataset(union, images, states, tuple(s["source"] for s in samples),
                            np.array([int(s["index"]) for s in samples], dtype=np.int64),
                            tuple(infos))
