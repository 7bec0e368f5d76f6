"""Shared feature extractor plus the task-encoding adapter.

Class ``c`` is answered as ``sigmoid(w_c . f(x))`` where the classifier
vector ``w_c = A q_c + b`` is generated from row ``c`` of the learnable
encoding ``q`` (initialized to the identity).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .data.labels import LabelSchema


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 784
    hidden_dim: int = 256
    feature_dim: int = 64


@dataclass
class FeatureExtractor:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @property
    def feature_dim(self) -> int:
        return self.W2.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]


@dataclass
class TaskEncoding:
    q: Tensor

    @property
    def n(self) -> int:
        return self.q.shape[0]


@dataclass
class AdapterWeights:
    A: Tensor  # (m, n)
    b: Tensor  # (m,)


@dataclass
class ModelState:
    extractor: FeatureExtractor
    encoding: TaskEncoding
    adapter: AdapterWeights
    schema: LabelSchema
    seed: int = 0
    config: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        n = self.schema.n
        if self.encoding.q.shape != (n, n):
            raise ContractError(f"encoding is {self.encoding.q.shape}, schema has {n} classes")

    PARAM_ORDER = ("W1", "b1", "W2", "b2", "A", "b", "q")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        e, a = self.extractor, self.adapter
        return list(zip(self.PARAM_ORDER, (e.W1, e.b1, e.W2, e.b2, a.A, a.b, self.encoding.q)))

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def snapshot(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters()]

    def restore(self, snapshot: list[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), snapshot):
            p.values[...] = v

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_model(schema: LabelSchema, config: ModelConfig | None = None, seed: int = 0) -> ModelState:
    config = config or ModelConfig()
    rng = np.random.default_rng([seed, 0xADA])
    d, h, m, n = config.input_dim, config.hidden_dim, config.feature_dim, schema.n
    extractor = FeatureExtractor(
        W1=_uniform(rng, d, (d, h)), b1=Tensor(np.zeros(h), requires_grad=True),
        W2=_uniform(rng, h, (h, m)), b2=Tensor(np.zeros(m), requires_grad=True),
    )
    adapter = AdapterWeights(A=_uniform(rng, n, (m, n)), b=Tensor(np.zeros(m), requires_grad=True))
    encoding = TaskEncoding(Tensor(np.eye(n), requires_grad=True))
    return ModelState(extractor, encoding, adapter, schema, seed, config)


def extract_features(extractor: FeatureExtractor, batch) -> Tensor:
    batch = ad.as_tensor(batch)
    if batch.values.ndim != 2 or batch.shape[1] != extractor.input_dim:
        raise ContractError(
            f"extract_features: expected (N, {extractor.input_dim}) input, got {batch.shape}")
    hidden = ad.relu(ad.matmul(batch, extractor.W1) + extractor.b1)
    return ad.relu(ad.matmul(hidden, extractor.W2) + extractor.b2)


def class_weights(encoding: TaskEncoding, adapter: AdapterWeights, rows=None) -> Tensor:
    """Generated classifier vectors, one row per class (or per ``rows``)."""
    q = encoding.q if rows is None else ad.gather_rows(encoding.q, rows)
    if q.shape[1] != adapter.A.shape[1]:
        raise ContractError(f"encoding width {q.shape[1]} vs adapter input {adapter.A.shape[1]}")
    return ad.matmul(q, adapter.A, transpose_b=True, fixed_order=True) + adapter.b


def adapter_answer(encoding: TaskEncoding, features: Tensor, adapter: AdapterWeights) -> Tensor:
    """(N, n) probabilities, one column per class question."""
    weights = class_weights(encoding, adapter)
    if features.shape[1] != weights.shape[1]:
        raise ContractError(f"features have width {features.shape[1]}, adapter emits "
                            f"{weights.shape[1]}")
    return ad.sigmoid(ad.matmul(features, weights, transpose_b=True, fixed_order=True))


def answer(state: ModelState, batch) -> Tensor:
    if state.encoding.n != state.schema.n:
        raise ContractError(f"encoding has {state.encoding.n} rows, schema {state.schema.n}")
    return adapter_answer(state.encoding, extract_features(state.extractor, batch), state.adapter)


def query_class(state: ModelState, batch, class_index: int) -> Tensor:
    """Answer the single question "is class ``class_index`` present?"."""
    if not 0 <= class_index < state.schema.n:
        raise ContractError(f"class index {class_index} out of range 0..{state.schema.n - 1}")
    features = extract_features(state.extractor, batch)
    w = class_weights(state.encoding, state.adapter, rows=[class_index])
    probs = ad.sigmoid(ad.matmul(features, w, transpose_b=True, fixed_order=True))
    return ad.masked_select(probs, np.ones(probs.shape, dtype=bool))


def predict(state: ModelState, images: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Answers for (N, H, W) or (N, H*W) images without recording a tape."""
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    out = np.empty((len(flat), state.schema.n))
    with ad.no_grad():
        for s in range(0, len(flat), chunk):
            out[s:s + chunk] = answer(state, flat[s:s + chunk]).values
    return out


def features_of(state: ModelState, images: np.ndarray, chunk: int = 1024) -> np.ndarray:
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    out = np.empty((len(flat), state.extractor.feature_dim))
    with ad.no_grad():
        for s in range(0, len(flat), chunk):
            out[s:s + chunk] = extract_features(state.extractor, flat[s:s + chunk]).values
    return out


# ---------------------------------------------------------------- checkpoint
#
# File layout: b"PLCK" | uint32 LE header length | UTF-8 JSON header |
# float64 LE parameters concatenated in PARAM_ORDER, each row-major.

MAGIC = b"PLCK"


def save_checkpoint(state: ModelState, path) -> None:
    header = {
        "schema": list(state.schema.classes),
        "dims": {"input": state.config.input_dim, "hidden": state.config.hidden_dim,
                 "features": state.config.feature_dim, "classes": state.schema.n},
        "seed": state.seed,
        "order": list(ModelState.PARAM_ORDER),
        "shapes": [list(p.shape) for p in state.parameters()],
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(p.values.astype("<f8").tobytes() for p in state.parameters())
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(head)) + head + blob)


def load_checkpoint(path) -> ModelState:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    (size,) = struct.unpack("<I", buf[4:8])
    header = json.loads(buf[8:8 + size])
    dims = header["dims"]
    config = ModelConfig(dims["input"], dims["hidden"], dims["features"])
    state = init_model(LabelSchema(tuple(header["schema"])), config, header["seed"])
    blob = np.frombuffer(buf, dtype="<f8", offset=8 + size)
    expected = sum(p.size for p in state.parameters())
    if blob.size != expected:
        raise ContractError(f"{path}: {blob.size} parameters stored, {expected} expected")
    offset = 0
    for p in state.parameters():
        p.values[...] = blob[offset:offset + p.size].reshape(p.shape)
        offset += p.size
    return state
