"""Model zoo: a small CNN and an MLP with seeded init, layer metadata, and checkpoint I/O.

Both architectures are expressed entirely in engine primitives so every
forward pass is differentiable.  Layer names are unique and ordered
front-to-back; several unlearning methods rely on that ordering to freeze,
reinitialize, or perturb specific layers.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor
from .errors import (
    CorruptChecksum,
    InvalidDescriptor,
    IoError,
    KOutOfRange,
    ShapeMismatch,
    VersionMismatch,
)
from .rng import RngStream, stream

CHECKPOINT_MAGIC = b"MUCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Shape-level description of a network; the single source of parameter layout."""

    kind: str
    input_shape: tuple
    class_count: int
    conv_channels: tuple = (8, 16)
    hidden_widths: tuple = ()
    kernel_size: int = 3
    padding: int = 1
    pool: int = 2

    def __post_init__(self):
        if self.kind not in ("small_cnn", "mlp"):
            raise InvalidDescriptor(f"unknown architecture kind {self.kind!r}")
        if self.class_count < 2:
            raise InvalidDescriptor(f"class_count must be >= 2, got {self.class_count}")
        shape = tuple(int(d) for d in self.input_shape)
        if not shape or any(d < 1 for d in shape):
            raise InvalidDescriptor(f"bad input_shape {self.input_shape}")
        object.__setattr__(self, "input_shape", shape)
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.kind == "small_cnn":
            if len(shape) != 3:
                raise InvalidDescriptor(f"small_cnn needs [C, H, W] input, got {shape}")
            if len(self.conv_channels) < 2:
                raise InvalidDescriptor("small_cnn requires at least 2 conv layers")
            if any(c < 1 for c in self.conv_channels) or self.kernel_size < 1 or self.pool < 1:
                raise InvalidDescriptor("conv channels, kernel and pool must be positive")
            if self.padding < 0:
                raise InvalidDescriptor("padding must be nonnegative")
            if self._conv_trace()[-1][1] < 1:
                raise InvalidDescriptor(f"input {shape} too small for the conv stack")
        if any(w < 1 for w in self.hidden_widths):
            raise InvalidDescriptor("hidden widths must be positive")

    def _conv_trace(self):
        """Spatial size after each conv+pool stage: list of (channels, side)."""
        _, h, _ = self.input_shape
        side = h
        out = []
        for c in self.conv_channels:
            side = side + 2 * self.padding - self.kernel_size + 1
            side = side // self.pool
            out.append((c, side))
        return out

    def layer_specs(self) -> list:
        """Ordered (name, kind, weight_shape, bias_shape, fan_in) tuples."""
        specs = []
        if self.kind == "small_cnn":
            cin = self.input_shape[0]
            for i, cout in enumerate(self.conv_channels):
                k = self.kernel_size
                specs.append((f"conv{i + 1}", "conv", (cout, cin, k, k), (cout,), cin * k * k))
                cin = cout
            _, side = self._conv_trace()[-1]
            width = cin * side * side
        else:
            width = 1
            for d in self.input_shape:
                width *= d
        sizes = list(self.hidden_widths) + [self.class_count]
        for i, out_w in enumerate(sizes):
            specs.append((f"fc{i + 1}", "linear", (width, out_w), (out_w,), width))
            width = out_w
        return specs

    def layer_names(self) -> list:
        return [s[0] for s in self.layer_specs()]

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "conv_channels": list(self.conv_channels),
            "hidden_widths": list(self.hidden_widths),
            "kernel_size": self.kernel_size,
            "padding": self.padding,
            "pool": self.pool,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ArchitectureDescriptor":
        return ArchitectureDescriptor(
            kind=d["kind"],
            input_shape=tuple(d["input_shape"]),
            class_count=int(d["class_count"]),
            conv_channels=tuple(d.get("conv_channels", ())),
            hidden_widths=tuple(d.get("hidden_widths", ())),
            kernel_size=int(d.get("kernel_size", 3)),
            padding=int(d.get("padding", 1)),
            pool=int(d.get("pool", 2)),
        )


def small_cnn_descriptor(input_shape, class_count, conv_channels=(8, 16), hidden_widths=(), padding=1) -> ArchitectureDescriptor:
    return ArchitectureDescriptor(
        kind="small_cnn",
        input_shape=tuple(input_shape),
        class_count=class_count,
        conv_channels=tuple(conv_channels),
        hidden_widths=tuple(hidden_widths),
        padding=padding,
    )


def mlp_descriptor(input_shape, class_count, hidden_widths=(64,)) -> ArchitectureDescriptor:
    return ArchitectureDescriptor(
        kind="mlp",
        input_shape=tuple(input_shape),
        class_count=class_count,
        conv_channels=(),
        hidden_widths=tuple(hidden_widths),
    )


@dataclass
class Model:
    descriptor: ArchitectureDescriptor
    params: dict
    init_seed: int
    provenance: dict = field(default_factory=dict)

    def layer_names(self) -> list:
        return list(self.params.keys())

    def param_tensors(self, layers=None) -> list:
        names = self.layer_names() if layers is None else list(layers)
        out = []
        for name in names:
            out.append(self.params[name]["w"])
            out.append(self.params[name]["b"])
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.param_tensors())


def fresh_layer_values(descriptor: ArchitectureDescriptor, name: str, rng: RngStream):
    """Kaiming-uniform weight draw and zero bias for one named layer."""
    for lname, _, wshape, bshape, fan_in in descriptor.layer_specs():
        if lname == name:
            bound = math.sqrt(6.0 / fan_in)
            gen = rng.child("w").generator()
            w = gen.uniform(-bound, bound, size=wshape)
            return w, np.zeros(bshape)
    raise InvalidDescriptor(f"no layer named {name!r}")


def init_model(descriptor: ArchitectureDescriptor, seed: int) -> Model:
    """Deterministic Kaiming-uniform initialization, one stream per layer."""
    params = {}
    for name, _, _, _, _ in descriptor.layer_specs():
        w, b = fresh_layer_values(descriptor, name, stream(int(seed), "init", name))
        params[name] = {"w": Tensor(w, requires_grad=True), "b": Tensor(b, requires_grad=True)}
    return Model(descriptor=descriptor, params=params, init_seed=int(seed))


def clone_model(model: Model) -> Model:
    params = {
        name: {
            "w": Tensor(p["w"].data.copy(), requires_grad=True),
            "b": Tensor(p["b"].data.copy(), requires_grad=True),
        }
        for name, p in model.params.items()
    }
    return Model(model.descriptor, params, model.init_seed, dict(model.provenance))


def _forward_to_embedding(model: Model, x: Tensor):
    """Run all layers except the final classifier; returns the penultimate activation."""
    d = model.descriptor
    h = x
    names = model.layer_names()
    if d.kind == "small_cnn":
        conv_names = [n for n in names if n.startswith("conv")]
        for name in conv_names:
            p = model.params[name]
            h = engine.relu(engine.conv2d(h, p["w"], p["b"], stride=1, padding=d.padding))
            if d.pool > 1:  # a 1x1 window is the identity; skip the op
                h = engine.maxpool(h, size=d.pool)
        h = engine.flatten(h)
    else:
        h = engine.flatten(h)
    fc_names = [n for n in names if n.startswith("fc")]
    for name in fc_names[:-1]:
        p = model.params[name]
        h = engine.relu(engine.add(engine.matmul(h, p["w"]), p["b"]))
    return h, fc_names[-1]


def forward(model: Model, batch) -> Tensor:
    """Differentiable forward pass producing [B, C] logits."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = (x.data.shape[0],) + model.descriptor.input_shape
    if x.data.shape != expected:
        raise ShapeMismatch(f"forward: batch {x.data.shape}, expected {expected}")
    h, head = _forward_to_embedding(model, x)
    p = model.params[head]
    return engine.add(engine.matmul(h, p["w"]), p["b"])


def forward_embedding(model: Model, batch) -> Tensor:
    """Penultimate-layer features, used by embedding-separation objectives."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    h, _ = _forward_to_embedding(model, x)
    return h


def predict(model: Model, batch) -> np.ndarray:
    """Logits as a plain array; argmax (lowest index on ties) is the prediction."""
    with engine.no_grad():
        return forward(model, batch).data


def predict_labels(model: Model, batch) -> np.ndarray:
    return predict(model, batch).argmax(axis=1)


def layer_partition(model: Model, k: int):
    """Split layer names into (frozen front, trainable last k)."""
    names = model.layer_names()
    if not 1 <= k <= len(names):
        raise KOutOfRange(f"k={k} outside [1, {len(names)}]")
    return names[:-k], names[-k:]


def flatten_params(model: Model) -> np.ndarray:
    return np.concatenate([t.data.reshape(-1) for t in model.param_tensors()])


def set_flat_params(model: Model, vec: np.ndarray):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != model.param_count():
        raise ShapeMismatch(f"parameter vector size {vec.size} != {model.param_count()}")
    offset = 0
    for t in model.param_tensors():
        n = t.data.size
        t.data = vec[offset : offset + n].reshape(t.data.shape).copy()
        offset += n


def save_checkpoint(model: Model, path) -> str:
    """Write the binary checkpoint; returns its content hash (hex)."""
    header = {
        "descriptor": model.descriptor.to_json_dict(),
        "init_seed": model.init_seed,
        "provenance": model.provenance,
        "layers": model.layer_names(),
    }
    desc = json.dumps(header, sort_keys=True).encode("utf-8")
    body = flatten_params(model).astype("<f8").tobytes()
    blob = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + struct.pack("<I", len(desc)) + desc + body
    checksum = hashlib.blake2b(blob, digest_size=8).digest()
    try:
        with open(path, "wb") as fh:
            fh.write(blob + checksum)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return hashlib.sha256(blob + checksum).hexdigest()


def checkpoint_hash(path) -> str:
    try:
        with open(path, "rb") as fh:
            return hashlib.sha256(fh.read()).hexdigest()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Model:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 + 8:
        raise CorruptChecksum(f"checkpoint {path} too short")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise IoError(f"checkpoint {path} has bad magic {raw[:4]!r}")
    body, checksum = raw[:-8], raw[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != checksum:
        raise CorruptChecksum(f"checkpoint {path} failed checksum")
    (version,) = struct.unpack("<I", body[4:8])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (desc_len,) = struct.unpack("<I", body[8:12])
    try:
        header = json.loads(body[12 : 12 + desc_len].decode("utf-8"))
        descriptor = ArchitectureDescriptor.from_json_dict(header["descriptor"])
    except (ValueError, KeyError, InvalidDescriptor) as exc:
        raise IoError(f"checkpoint {path} has malformed header: {exc}") from exc
    model = Model(descriptor, {}, int(header["init_seed"]), dict(header.get("provenance", {})))
    model.params = {
        name: {"w": Tensor(np.zeros(wshape), requires_grad=True), "b": Tensor(np.zeros(bshape), requires_grad=True)}
        for name, _, wshape, bshape, _ in descriptor.layer_specs()
    }
    vec = np.frombuffer(body[12 + desc_len :], dtype="<f8")
    if vec.size != model.param_count():
        raise CorruptChecksum(f"checkpoint {path} parameter block has {vec.size} values, expected {model.param_count()}")
    set_flat_params(model, np.asarray(vec))
    return model
