"""U-Net feature extractors and their checkpoint format.

Four independent networks are used, one per role: template and source images
for the rotation-scale stage and for the translation stage. Each maps a
single-channel image to a positive single-channel map of the same size.

Checkpoint layout (all integers u32 little-endian)::

    b"DPCN-CKPT" | version | len | descriptor (UTF-8 JSON)
    repeated: len | name (UTF-8) | rank | extents... | float32 LE values
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from dpcreg import diffcore as dc
from dpcreg.diffcore import Tensor

ROLES = ("template_rot", "source_rot", "template_trans", "source_trans")
HEADS = ("sigmoid", "softplus", "relu")
MAGIC = b"DPCN-CKPT"
VERSION = 1
# desk-scale extractors trained on heterogeneous 128x128 pairs
PRETRAINED = Path(__file__).parent / "data" / "desk_heterogeneous.dpcn"


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint."""


@dataclass(frozen=True)
class Topology:
    depth: int = 3
    channels: int = 8
    size: int = 128
    head: str = "sigmoid"

    def __post_init__(self):
        if self.depth < 1 or self.channels < 1:
            raise ValueError(f"depth and channels must be >= 1, got {self.depth}, {self.channels}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.size % (2 ** self.depth):
            raise ValueError(f"size {self.size} not divisible by 2**depth")

    def widths(self):
        return [self.channels * 2 ** k for k in range(self.depth)]

    def layer_shapes(self):
        """Ordered (name, kernel shape) of every conv layer."""
        w = self.widths()
        shapes = []
        cin = 1
        for k in range(self.depth):
            shapes.append((f"enc{k}", (w[k], cin, 3, 3)))
            cin = w[k]
        for k in reversed(range(self.depth)):
            shapes.append((f"dec{k}", (w[k], cin + w[k], 3, 3)))
            cin = w[k]
        shapes.append(("head", (1, cin, 1, 1)))
        return shapes


def param_count(top: Topology):
    """Closed-form parameter count of the U-Net.

    Encoder level k maps c_{k-1} -> c_k channels (c_{-1} = 1); decoder level
    k maps c_{k+1} + c_k -> c_k, with the deepest level taking c_{D-1} + c_{D-1};
    the head is a 1x1 conv to one channel. Every conv has a bias.
    """
    c = top.widths()
    d = top.depth
    enc = sum(9 * (1 if k == 0 else c[k - 1]) * c[k] + c[k] for k in range(d))
    dec = sum(9 * ((c[k + 1] if k + 1 < d else c[k]) + c[k]) * c[k] + c[k] for k in range(d))
    return enc + dec + c[0] + 1


class FeatureExtractor:
    """One U-Net: D conv+ReLU+pool blocks, D upsample+concat+conv+ReLU blocks, 1x1 head."""

    def __init__(self, topology: Topology, params: dict, role: str):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.topology = topology
        self.params = params
        self.role = role

    @classmethod
    def init(cls, topology: Topology, seed=0, role="template_rot", dtype=np.float32):
        """Fan-in scaled uniform initialization; zero biases."""
        rng = np.random.default_rng([seed, ROLES.index(role)])
        params = {}
        for name, shape in topology.layer_shapes():
            fan_in = shape[1] * shape[2] * shape[3]
            gain = 3.0 if name == "head" else 6.0
            bound = math.sqrt(gain / fan_in)
            params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=True)
        return cls(topology, params, role)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return FeatureExtractor(self.topology, params, self.role)

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def _conv(self, x, name, padding):
        return dc.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], padding=padding)

    def forward(self, image):
        """Map (H, W) or (B, H, W) images to same-shaped positive features."""
        image = dc._wrap(image)
        n = self.topology.size
        if image.shape[-2:] != (n, n):
            raise ValueError(f"extractor expects {n}x{n} input, got {image.shape[-2:]}")
        single = image.ndim == 2
        if image.dtype != self.dtype:
            image = Tensor(image.data.astype(self.dtype)) if not image.requires_grad else image
        x = dc.reshape(image, (1 if single else image.shape[0], 1, n, n))
        skips = []
        for k in range(self.topology.depth):
            x = dc.relu(self._conv(x, f"enc{k}", 1))
            skips.append(x)
            x = dc.avgpool2x(x)
        for k in reversed(range(self.topology.depth)):
            x = dc.upsample2x(x)
            skip = skips.pop()
            if x.shape[-2:] != skip.shape[-2:] or x.shape[0] != skip.shape[0]:
                raise AssertionError(f"skip mismatch at level {k}: {x.shape} vs {skip.shape}")
            x = dc.relu(self._conv(dc.concat([x, skip], axis=1), f"dec{k}", 1))
        x = self._conv(x, "head", 0)
        head = {"sigmoid": dc.sigmoid, "softplus": dc.softplus, "relu": dc.relu}[self.topology.head]
        out = head(x)
        return dc.reshape(out, (n, n) if single else (image.shape[0], n, n))

    __call__ = forward


class ExtractorSet:
    """The four role-specific extractors plus training metadata."""

    def __init__(self, extractors: dict, step=0, config_hash=""):
        missing = [r for r in ROLES if r not in extractors]
        if missing:
            raise ValueError(f"missing extractors for roles {missing}")
        self.extractors = extractors
        self.step = int(step)
        self.config_hash = str(config_hash)

    @classmethod
    def init(cls, topology: Topology, seed=0, dtype=np.float32):
        return cls({r: FeatureExtractor.init(topology, seed, r, dtype) for r in ROLES})

    @property
    def topology(self):
        return self.extractors[ROLES[0]].topology

    def __getitem__(self, role):
        return self.extractors[role]

    def apply(self, role, image):
        return self.extractors[role].forward(image)

    def parameters(self, roles=ROLES):
        return [p for r in roles for p in self.extractors[r].parameters()]

    def astype(self, dtype):
        return ExtractorSet({r: e.astype(dtype) for r, e in self.extractors.items()}, self.step, self.config_hash)

    # -- persistence ------------------------------------------------------------

    def to_bytes(self):
        desc = dict(asdict(self.topology), roles=list(ROLES), step=self.step, config_hash=self.config_hash)
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        _write_str(buf, json.dumps(desc, sort_keys=True))
        for role in ROLES:
            for name, t in self.extractors[role].params.items():
                _write_str(buf, f"{role}/{name}")
                data = np.ascontiguousarray(t.data, dtype="<f4")
                buf.write(struct.pack("<I", data.ndim))
                buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
                buf.write(data.tobytes())
        return buf.getvalue()

    def save(self, path):
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)

    @classmethod
    def from_bytes(cls, raw, expected: Topology = None, dtype=np.float32):
        reader = _Reader(raw)
        if reader.take(len(MAGIC)) != MAGIC:
            raise CheckpointError("not a checkpoint: bad magic")
        version = reader.u32()
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        try:
            desc = json.loads(reader.string())
            top = Topology(desc["depth"], desc["channels"], desc["size"], desc["head"])
        except (KeyError, ValueError, TypeError) as exc:
            raise CheckpointError(f"bad topology descriptor: {exc}") from exc
        if expected is not None and top != expected:
            raise CheckpointError(f"topology mismatch: checkpoint has {top}, expected {expected}")
        shapes = dict(top.layer_shapes())
        want = {f"{r}/{layer}.{kind}": (shape if kind == "weight" else (shape[0],))
                for r in ROLES for layer, shape in shapes.items() for kind in ("weight", "bias")}
        found = {}
        while not reader.done():
            name = reader.string()
            rank = reader.u32()
            dims = tuple(reader.u32() for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            values = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
            if name not in want:
                raise CheckpointError(f"unexpected record {name!r}")
            if dims != want[name]:
                raise CheckpointError(f"record {name!r} has shape {dims}, topology needs {want[name]}")
            found[name] = values
        missing = sorted(set(want) - set(found))
        if missing:
            raise CheckpointError(f"checkpoint lacks {len(missing)} record(s), e.g. {missing[0]!r}")
        extractors = {}
        for role in ROLES:
            params = {}
            for layer, _ in top.layer_shapes():
                for kind in ("weight", "bias"):
                    arr = found[f"{role}/{layer}.{kind}"].astype(dtype)
                    params[f"{layer}.{kind}"] = Tensor(arr, requires_grad=True)
            extractors[role] = FeatureExtractor(top, params, role)
        return cls(extractors, desc.get("step", 0), desc.get("config_hash", ""))

    @classmethod
    def load(cls, path, expected: Topology = None, dtype=np.float32):
        with open(path, "rb") as fh:
            raw = fh.read()
        return cls.from_bytes(raw, expected, dtype)

    @classmethod
    def pretrained(cls, dtype=np.float64):
        """The shipped desk-scale extractors (see ``PRETRAINED``)."""
        if not PRETRAINED.exists():
            raise CheckpointError(f"no shipped checkpoint at {PRETRAINED}")
        return cls.load(PRETRAINED, dtype=dtype)


def _write_str(buf, s):
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


class _Reader:
    def __init__(self, raw):
        self.raw = memoryview(raw)
        self.pos = 0

    def done(self):
        return self.pos >= len(self.raw)

    def take(self, k):
        if self.pos + k > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: needed {k} bytes at offset {self.pos}, "
                                  f"only {len(self.raw) - self.pos} left")
        out = bytes(self.raw[self.pos:self.pos + k])
        self.pos += k
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def string(self):
        b = self.take(self.u32())
        try:
            return b.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"bad string at offset {self.pos - len(b)}") from exc
