"""Model assembly: graph-convolutional regressor and CNN reference model.

Both models share the two-layer 1D-conv front end that turns each
station's waveform into a flat feature vector, plus the optional
coordinate-metadata concatenation.  They differ in how cross-station
information flows: the graph model propagates features through two
graph-convolution layers; the reference model mixes the node axis with
one wide convolution spanning all stations.  Both end in a dense trunk
and five linear regression heads (one per intensity measure), each
emitting one value per station.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import CheckpointFormatError, ConstructionError, ShapeError
from .geo import PropagationMatrix
from .layers import Conv1DLayer, DenseLayer, GCNLayer, append_metadata, node_feature_reshape

IM_NAMES = ("pga", "pgv", "sa03", "sa1", "sa3")

_DTYPES = {"f32": np.float32, "f64": np.float64}

CHECKPOINT_MAGIC = b"TSRG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the shared architecture.

    conv_* tuples describe the per-node feature extractor in order;
    gcn_* the graph layers (ignored by the CNN reference model).
    """

    input_seconds: int = 10
    sample_rate_hz: int = 100
    channels: int = 3
    conv_filters: tuple[int, ...] = (32, 64)
    conv_kernels: tuple[int, ...] = (125, 125)
    conv_strides: tuple[int, ...] = (2, 2)
    conv_activation: str = "relu"
    gcn_filters: tuple[int, ...] = (64, 64)
    gcn_activations: tuple[str, ...] = ("relu", "tanh")
    dense_width: int = 128
    use_metadata: bool = True
    propagation: str = "renormalized"
    l2_coeff: float = 1e-4
    dtype: str = "f32"
    init_seed: int = 0

    @property
    def input_length(self) -> int:
        return self.input_seconds * self.sample_rate_hz

    @property
    def np_dtype(self):
        try:
            return _DTYPES[self.dtype]
        except KeyError:
            raise ConstructionError(f"unknown dtype {self.dtype!r}") from None

    def conv_chain(self) -> list[int]:
        """Sequence lengths [T, T1, T2, ...] through the conv stack."""
        if not (len(self.conv_filters) == len(self.conv_kernels) == len(self.conv_strides)):
            raise ConstructionError("conv spec tuples must have equal length")
        lengths = [self.input_length]
        t = self.input_length
        for i, (k, s) in enumerate(zip(self.conv_kernels, self.conv_strides)):
            if k > t or s < 1:
                raise ConstructionError(
                    f"conv{i + 1}: kernel {k} / stride {s} impossible on length {t}")
            t = (t - k) // s + 1
            if t < 1:
                raise ConstructionError(f"conv{i + 1}: output length {t} < 1")
            lengths.append(t)
        return lengths

    def flat_feature_width(self) -> int:
        """Per-node feature width after the conv stack and reshape."""
        return self.conv_chain()[-1] * self.conv_filters[-1]

    def node_feature_width(self) -> int:
        return self.flat_feature_width() + (2 if self.use_metadata else 0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("conv_filters", "conv_kernels", "conv_strides", "gcn_filters", "gcn_activations"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class Model:
    """Layer stack with a named-parameter registry and five regression heads."""

    def __init__(self, kind: str, cfg: ModelConfig, n_nodes: int):
        if kind not in ("tiser", "cnn"):
            raise ConstructionError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.cfg = cfg
        self.n_nodes = int(n_nodes)
        self.head_names = IM_NAMES
        dtype = cfg.np_dtype
        rng = np.random.default_rng(cfg.init_seed)

        cfg.conv_chain()  # validates the temporal chain up front
        self.convs: list[Conv1DLayer] = []
        c_in = cfg.channels
        for i, (f, k, s) in enumerate(zip(cfg.conv_filters, cfg.conv_kernels, cfg.conv_strides)):
            self.convs.append(Conv1DLayer(k, c_in, f, s, cfg.conv_activation, rng,
                                          dtype=dtype, name=f"conv{i + 1}"))
            c_in = f

        width = cfg.node_feature_width()
        if kind == "tiser":
            if len(cfg.gcn_filters) != len(cfg.gcn_activations):
                raise ConstructionError("gcn spec tuples must have equal length")
            self.gcns: list[GCNLayer] = []
            f_in = width
            for i, (f, act) in enumerate(zip(cfg.gcn_filters, cfg.gcn_activations)):
                self.gcns.append(GCNLayer(f_in, f, act, rng, dtype=dtype, name=f"gcn{i + 1}"))
                f_in = f
            trunk_in = self.n_nodes * f_in
            self.cross = None
        else:
            # one conv spanning the whole node axis gathers cross-station information
            self.gcns = []
            self.cross = Conv1DLayer(self.n_nodes, width, 64, 1, cfg.conv_activation, rng,
                                     dtype=dtype, name="cross")
            trunk_in = 64

        self.dense = DenseLayer(trunk_in, cfg.dense_width, "relu", rng, dtype=dtype, name="dense")
        self.heads = [
            DenseLayer(cfg.dense_width, self.n_nodes, "linear", rng, dtype=dtype, name=f"head_{nm}")
            for nm in IM_NAMES
        ]

    # -- parameters ---------------------------------------------------------

    def _layers(self):
        layers = list(self.convs)
        layers.extend(self.gcns)
        if self.cross is not None:
            layers.append(self.cross)
        layers.append(self.dense)
        layers.extend(self.heads)
        return layers

    def params(self) -> list[ad.Tensor]:
        return [p for layer in self._layers() for p in layer.params()]

    def l2_params(self) -> list[ad.Tensor]:
        return [p for layer in self._layers() for p in layer.l2_params()]

    def named_params(self) -> dict[str, ad.Tensor]:
        return {p.name: p for p in self.params()}

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    # -- forward ------------------------------------------------------------

    def _prop_array(self, prop) -> np.ndarray:
        m = prop.M if isinstance(prop, PropagationMatrix) else np.asarray(prop)
        if m.shape != (self.n_nodes, self.n_nodes):
            raise ShapeError(f"propagation matrix {m.shape} does not match n_nodes={self.n_nodes}")
        return m.astype(self.cfg.np_dtype)

    def forward(self, prop, x: np.ndarray, z: np.ndarray) -> ad.Tensor:
        """Batched forward pass: x (B, N, T, C), z (N, 2) -> Tensor (B, 5, N)."""
        cfg = self.cfg
        x = np.asarray(x, dtype=cfg.np_dtype)
        if x.ndim != 4 or x.shape[1] != self.n_nodes or x.shape[2] != cfg.input_length \
                or x.shape[3] != cfg.channels:
            raise ShapeError(
                f"input {x.shape} does not match (B, {self.n_nodes}, "
                f"{cfg.input_length}, {cfg.channels})")
        b = x.shape[0]

        h = ad.Tensor(x)
        for conv in self.convs:
            h = conv.apply(h)
        h = node_feature_reshape(h)
        h = append_metadata(h, z, enabled=cfg.use_metadata)

        if self.kind == "tiser":
            m = self._prop_array(prop)
            for gcn in self.gcns:
                h = gcn.apply(m, h)
            h = ad.reshape(h, (b, h.shape[-2] * h.shape[-1]))
        else:
            h = self.cross.apply(h)          # (B, 1, 64)
            h = ad.reshape(h, (b, h.shape[-1]))

        h = self.dense.apply(h)
        outs = [head.apply(h) for head in self.heads]   # each (B, N)
        stacked = ad.concat_last(outs)                   # (B, 5N)
        return ad.reshape(stacked, (b, len(IM_NAMES), self.n_nodes))

    def predict(self, prop, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Single-event forward: x (N, T, C) -> (5, N) log10-domain predictions."""
        x = np.asarray(x)
        if x.ndim != 3:
            raise ShapeError(f"predict expects (N, T, C), got {x.shape}")
        return self.forward(prop, x[None], z).data[0]


def build_tiser_gcn(cfg: ModelConfig, n_nodes: int) -> Model:
    """Graph-convolutional regressor: conv x2 -> reshape -> (+meta) -> GCN stack
    -> flatten -> dense -> five linear heads of size n_nodes."""
    return Model("tiser", cfg, n_nodes)


def build_cnn_baseline(cfg: ModelConfig, n_nodes: int) -> Model:
    """Reference model with identical per-node front end; cross-station
    information is gathered by one conv spanning the node axis."""
    return Model("cnn", cfg, n_nodes)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, meta JSON, then raw little-endian f64
# parameter payloads in registry order.

def save_checkpoint(model: Model, path) -> None:
    params = model.params()
    meta = {
        "kind": model.kind,
        "n_nodes": model.n_nodes,
        "cfg": model.cfg.to_dict(),
        "params": [{"name": p.name, "shape": list(p.shape)} for p in params],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(
            f"bad magic at offset 0: expected {CHECKPOINT_MAGIC!r}, got {raw[:4]!r}")
    off = 4
    version, = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    blob_len, = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        meta = json.loads(raw[off:off + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt metadata blob at offset {off}: {exc}") from None
    off += blob_len

    cfg = ModelConfig.from_dict(meta["cfg"])
    model = Model(meta["kind"], cfg, meta["n_nodes"])
    registry = model.named_params()
    for entry in meta["params"]:
        if off + 4 > len(raw):
            raise CheckpointFormatError(f"truncated checkpoint at offset {off}")
        name_len, = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        ndim, = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        end = off + 8 * count
        if end > len(raw):
            raise CheckpointFormatError(f"truncated parameter payload at offset {off}")
        values = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape)
        off = end
        if name != entry["name"] or list(shape) != entry["shape"]:
            raise CheckpointFormatError(f"parameter record mismatch for {entry['name']!r}")
        if name not in registry or registry[name].shape != tuple(shape):
            raise CheckpointFormatError(f"parameter {name!r} does not fit the rebuilt model")
        registry[name].data = values.astype(cfg.np_dtype)
    if off != len(raw):
        raise CheckpointFormatError(f"{len(raw) - off} trailing bytes after offset {off}")
    return model
