"""Shared state types, encodings, random streams and the DRL1 checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LIFT_LOGIT = 10.0
MAGIC = b"DRL1"
FORMAT_VERSION = 1


class ContractError(ValueError):
    """A precondition or invariant of an operation was violated."""


class UsageError(ValueError):
    """Bad user input: unknown names, malformed configs, impossible requests."""


class TrainingError(RuntimeError):
    """Training produced non-finite values or otherwise cannot continue."""


class ModelDivergenceError(TrainingError):
    pass


class ResourceError(RuntimeError):
    """A computation would exceed a configured size guard."""


@dataclass(frozen=True)
class StateSchema:
    n_continuous: int
    categorical_cards: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "categorical_cards", tuple(int(c) for c in self.categorical_cards))
        if self.n_continuous < 0:
            raise ContractError("n_continuous must be non-negative")
        if any(c < 2 for c in self.categorical_cards):
            raise ContractError(f"categorical cardinalities must be >= 2, got {self.categorical_cards}")

    @property
    def encoded_size(self) -> int:
        return self.n_continuous + sum(self.categorical_cards)

    @property
    def n_slots(self) -> int:
        return len(self.categorical_cards)

    def slot_bounds(self) -> list[tuple[int, int]]:
        """(start, stop) of every categorical block inside an encoded vector."""
        bounds = []
        start = self.n_continuous
        for card in self.categorical_cards:
            bounds.append((start, start + card))
            start += card
        return bounds

    def to_dict(self) -> dict:
        return {"n_continuous": self.n_continuous, "categorical_cards": list(self.categorical_cards)}

    @classmethod
    def from_dict(cls, d: dict) -> "StateSchema":
        return cls(int(d["n_continuous"]), tuple(d["categorical_cards"]))


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64).reshape(-1)
    out.flags.writeable = False
    return out


class MixedState:
    """Immutable state value: a continuous feature vector plus categorical indices.

    ``categorical`` is a tuple of ``(cardinality, index)`` pairs, one per slot.
    """

    __slots__ = ("continuous", "categorical")

    def __init__(self, continuous: Iterable[float], categorical: Iterable[tuple[int, int]] = ()):
        cont = _frozen(list(continuous) if not isinstance(continuous, np.ndarray) else continuous)
        if not np.all(np.isfinite(cont)):
            raise ContractError("continuous state features must be finite")
        cats = tuple((int(c), int(i)) for c, i in categorical)
        for card, idx in cats:
            if not 0 <= idx < card:
                raise ContractError(f"categorical index {idx} outside cardinality {card}")
        object.__setattr__(self, "continuous", cont)
        object.__setattr__(self, "categorical", cats)

    def __setattr__(self, name, value):
        raise AttributeError("MixedState is immutable")

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for _, i in self.categorical)

    @property
    def schema(self) -> StateSchema:
        return StateSchema(len(self.continuous), tuple(c for c, _ in self.categorical))

    def __eq__(self, other):
        if not isinstance(other, MixedState):
            return NotImplemented
        return self.categorical == other.categorical and np.array_equal(self.continuous, other.continuous)

    def __hash__(self):
        return hash((self.continuous.tobytes(), self.categorical))

    def __repr__(self):
        return f"MixedState(continuous={self.continuous.tolist()}, categorical={list(self.categorical)})"


class StateDistribution:
    """Predicted state: continuous means and one logit vector per categorical slot.

    Internally stored as one flat vector laid out exactly like ``encode``'s output,
    with logits in place of one-hot blocks.
    """

    __slots__ = ("schema", "flat")

    def __init__(self, schema: StateSchema, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if flat.shape[0] != schema.encoded_size:
            raise ContractError(f"distribution length {flat.shape[0]} != schema size {schema.encoded_size}")
        flat = flat.copy()
        flat.flags.writeable = False
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "flat", flat)

    def __setattr__(self, name, value):
        raise AttributeError("StateDistribution is immutable")

    @classmethod
    def from_parts(cls, schema: StateSchema, continuous_mean, categorical_logits) -> "StateDistribution":
        parts = [np.asarray(continuous_mean, dtype=np.float64).reshape(-1)]
        parts += [np.asarray(l, dtype=np.float64).reshape(-1) for l in categorical_logits]
        return cls(schema, np.concatenate(parts) if parts else np.zeros(0))

    @property
    def continuous_mean(self) -> np.ndarray:
        return self.flat[: self.schema.n_continuous]

    @property
    def categorical_logits(self) -> list[np.ndarray]:
        return [self.flat[a:b] for a, b in self.schema.slot_bounds()]

    def probabilities(self) -> list[np.ndarray]:
        return [softmax(l) for l in self.categorical_logits]

    def __repr__(self):
        return f"StateDistribution(continuous_mean={self.continuous_mean.tolist()}, logits={[l.tolist() for l in self.categorical_logits]})"


def check_state(state: MixedState, schema: StateSchema) -> MixedState:
    """Raise ContractError unless ``state`` conforms to ``schema``."""
    if len(state.continuous) != schema.n_continuous:
        raise ContractError(f"expected {schema.n_continuous} continuous features, got {len(state.continuous)}")
    cards = tuple(c for c, _ in state.categorical)
    if cards != schema.categorical_cards:
        raise ContractError(f"categorical schema {cards} != {schema.categorical_cards}")
    return state


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def encode(state: MixedState, schema: StateSchema) -> np.ndarray:
    """Raw continuous features followed by one one-hot block per categorical slot."""
    check_state(state, schema)
    out = np.zeros(schema.encoded_size)
    n = schema.n_continuous
    out[:n] = state.continuous
    for (start, _), (_, idx) in zip(schema.slot_bounds(), state.categorical):
        out[start + idx] = 1.0
    return out


def encode_many(states: Sequence[MixedState], schema: StateSchema) -> np.ndarray:
    out = np.zeros((len(states), schema.encoded_size))
    n = schema.n_continuous
    bounds = schema.slot_bounds()
    for row, s in enumerate(states):
        out[row, :n] = s.continuous
        for (start, _), (_, idx) in zip(bounds, s.categorical):
            out[row, start + idx] = 1.0
    return out


def decode_hard(dist: StateDistribution) -> MixedState:
    """Collapse a distribution to a concrete state; argmax ties go to the lowest index."""
    if not np.all(np.isfinite(dist.flat)):
        raise ContractError("non-finite values in state distribution")
    cats = [(b - a, int(np.argmax(dist.flat[a:b]))) for a, b in dist.schema.slot_bounds()]
    return MixedState(dist.continuous_mean, cats)


def lift(state: MixedState, schema: StateSchema | None = None) -> StateDistribution:
    """Embed a concrete state as a degenerate distribution (+L on the true class, -L elsewhere)."""
    schema = schema or state.schema
    check_state(state, schema)
    return StateDistribution(schema, lift_flat(encode(state, schema), schema))


def lift_flat(encoded: np.ndarray, schema: StateSchema) -> np.ndarray:
    """Vectorised lift over encoded rows (``[..., encoded_size]``)."""
    out = np.array(encoded, dtype=np.float64, copy=True)
    n = schema.n_continuous
    out[..., n:] = LIFT_LOGIT * (2.0 * out[..., n:] - 1.0)
    return out


def soft_encode(flat: np.ndarray, schema: StateSchema) -> np.ndarray:
    """Encode a distribution vector with softmax probabilities in place of one-hots."""
    out = np.array(flat, dtype=np.float64, copy=True)
    for a, b in schema.slot_bounds():
        out[..., a:b] = softmax(out[..., a:b])
    return out


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent, platform-stable generator for a (seed, stream id) pair."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


# --- DRL1 tagged binary format -------------------------------------------------

def save_arrays(path, arrays: dict[str, np.ndarray], header: dict | None = None) -> None:
    """Write named arrays as magic + JSON header + raw little-endian payload."""
    entries = []
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            data = arr.astype("<f8")
        elif arr.dtype.kind in "iub":
            data = arr.astype("<i8")
        else:
            raise ContractError(f"unsupported dtype {arr.dtype} for {name}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": data.dtype.str})
        payload.append(np.ascontiguousarray(data).tobytes())
    head = json.dumps({"meta": header or {}, "entries": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        for chunk in payload:
            fh.write(chunk)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: not a DRL1 file")
    version, head_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported format version {version}")
    head = json.loads(raw[12 : 12 + head_len].decode("utf-8"))
    offset = 12 + head_len
    arrays = {}
    for e in head["entries"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        nbytes = count * dt.itemsize
        if offset + nbytes > len(raw):
            raise ContractError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype=dt).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float64 if dt.kind == "f" else np.int64)
        offset += nbytes
    if offset != len(raw):
        raise ContractError(f"{path}: trailing or missing bytes")
    return head["meta"], arrays


def save_state(path, state: MixedState) -> None:
    schema = state.schema
    save_arrays(
        path,
        {"continuous": state.continuous, "categorical": np.array(state.indices, dtype=np.int64)},
        {"kind": "MixedState", "schema": schema.to_dict()},
    )


def load_state(path) -> MixedState:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "MixedState":
        raise ContractError(f"{path}: not a MixedState record")
    schema = StateSchema.from_dict(meta["schema"])
    cats = zip(schema.categorical_cards, arrays["categorical"].tolist())
    return check_state(MixedState(arrays["continuous"], cats), schema)
