"""Model assembly: parameter init, spec-driven forward/backward, checkpoints.

Activation placement follows the layer chain literally: every convolution
and fully-connected layer is followed by an ELU except the output layer,
which stays linear.  SE blocks and pooling carry no extra activation.

Checkpoint container (``<stem>.ckpt``), all integers little-endian:

* bytes 0-5   magic ``EMCK1\\n``
* bytes 6-13  uint64 header length ``H``
* ``H`` bytes of UTF-8 JSON: spec text, init seed, ordered tensor manifest
  (name, shape, byte offset into the payload), optional Adam hyperparameters
* payload: every manifest tensor as float64 little-endian, row-major; when
  Adam state is present its ``m`` then ``v`` tensors follow in the same
  order, then one float64 step counter
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers
from .errors import MetadataError, ShapeError
from .netspec import (
    Conv,
    Dense,
    Dropout,
    NetworkSpec,
    Output,
    Pool,
    SqueezeExcite,
    parse_netspec,
    serialize,
)
from .optim import AdamState

CHECKPOINT_MAGIC = b"EMCK1\n"


@dataclass
class ModelParams:
    """Named parameter tensors for one NetworkSpec, plus the init seed."""

    spec: NetworkSpec
    tensors: dict[str, np.ndarray]
    seed: int

    def astype(self, dtype):
        return ModelParams(
            spec=self.spec,
            tensors={k: v.astype(dtype) for k, v in self.tensors.items()},
            seed=self.seed,
        )


def _walk_shapes(spec):
    """Yield (index, layer, input shape) tracking the spatial/flat transition."""
    shape = spec.input_dims
    flat = False
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Dense, Output)) and not flat:
            shape = (int(np.prod(shape)),)
            flat = True
        yield i, layer, shape
        if isinstance(layer, Conv):
            from .netspec import _conv_dim

            shape = (*(_conv_dim(d, layer.k, layer.s, layer.p) for d in shape[:3]), layer.f)
        elif isinstance(layer, Pool):
            from .netspec import _pool_dim

            shape = (*(_pool_dim(d, layer.w, layer.stride) for d in shape[:3]), shape[3])
        elif isinstance(layer, (Dense, Output)):
            shape = (layer.units,)


def init_params(spec: NetworkSpec, seed: int, dtype=np.float64) -> ModelParams:
    """Scaled-uniform fan-in init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).

    Biases start at zero.  Draw order equals layer order, so a seed pins
    every tensor bitwise.
    """
    rng = np.random.default_rng(seed)
    tensors = {}

    def uniform(shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    for i, layer, shape in _walk_shapes(spec):
        if isinstance(layer, Conv):
            cin = shape[3]
            tensors[f"{i}.conv.w"] = uniform(
                (layer.k, layer.k, layer.k, cin, layer.f), layer.k**3 * cin
            )
            tensors[f"{i}.conv.b"] = np.zeros(layer.f, dtype=dtype)
        elif isinstance(layer, SqueezeExcite):
            c = shape[3]
            cr = c // layer.r
            tensors[f"{i}.se.w1"] = uniform((c, cr), c)
            tensors[f"{i}.se.w2"] = uniform((cr, c), cr)
        elif isinstance(layer, (Dense, Output)):
            kind = "fc" if isinstance(layer, Dense) else "out"
            fan_in = shape[0]
            tensors[f"{i}.{kind}.w"] = uniform((fan_in, layer.units), fan_in)
            tensors[f"{i}.{kind}.b"] = np.zeros(layer.units, dtype=dtype)
    return ModelParams(spec=spec, tensors=tensors, seed=seed)


def forward(params: ModelParams, x, training=False, rng=None):
    """Run the chain on batch ``x`` (N + input dims); returns (pred, caches)."""
    spec = params.spec
    if tuple(x.shape[1:]) != tuple(spec.input_dims):
        raise ShapeError(
            f"batch shape {x.shape[1:]} != spec input dims {spec.input_dims}"
        )
    t = params.tensors
    caches = []
    flat = False
    for i, layer in enumerate(spec.layers):
        try:
            if isinstance(layer, (Dense, Output)) and not flat:
                x, c = layers.flatten(x)
                caches.append(("flatten", c))
                flat = True
            if isinstance(layer, Conv):
                x, c = layers.conv3d(
                    x, t[f"{i}.conv.w"], t[f"{i}.conv.b"], stride=layer.s,
                    padding=layer.p,
                )
                caches.append((f"{i}.conv", c))
                x, c = layers.elu(x)
                caches.append(("elu", c))
            elif isinstance(layer, SqueezeExcite):
                x, c = layers.se_block(x, t[f"{i}.se.w1"], t[f"{i}.se.w2"])
                caches.append((f"{i}.se", c))
            elif isinstance(layer, Pool):
                x, c = layers.maxpool3d(x, layer.w, layer.stride)
                caches.append(("pool", c))
            elif isinstance(layer, Dense):
                x, c = layers.dense(x, t[f"{i}.fc.w"], t[f"{i}.fc.b"])
                caches.append((f"{i}.fc", c))
                x, c = layers.elu(x)
                caches.append(("elu", c))
            elif isinstance(layer, Dropout):
                x, c = layers.dropout(x, layer.rate, training, rng=rng)
                caches.append(("dropout", c))
            elif isinstance(layer, Output):
                x, c = layers.dense(x, t[f"{i}.out.w"], t[f"{i}.out.b"])
                caches.append((f"{i}.out", c))
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({type(layer).__name__}): {e}") from e
    return x, caches


def backward(params: ModelParams, caches, dpred):
    """Gradients for every parameter tensor given d(loss)/d(predictions)."""
    grads = {}
    dy = dpred
    for pos in range(len(caches) - 1, -1, -1):
        kind, cache = caches[pos]
        if kind == "flatten":
            dy = layers.flatten_backward(cache, dy)
        elif kind == "elu":
            dy = layers.elu_backward(cache, dy)
        elif kind == "pool":
            dy = layers.maxpool3d_backward(cache, dy)
        elif kind == "dropout":
            dy = layers.dropout_backward(cache, dy)
        elif kind.endswith(".conv"):
            dy, dw, db = layers.conv3d_backward(cache, dy, need_dx=pos > 0)
            grads[f"{kind}.w"] = dw
            grads[f"{kind}.b"] = db
        elif kind.endswith(".se"):
            dy, dw1, dw2 = layers.se_block_backward(cache, dy)
            grads[f"{kind}.w1"] = dw1
            grads[f"{kind}.w2"] = dw2
        elif kind.endswith(".fc") or kind.endswith(".out"):
            dy, dw, db = layers.dense_backward(cache, dy)
            grads[f"{kind}.w"] = dw
            grads[f"{kind}.b"] = db
        else:  # pragma: no cover
            raise ShapeError(f"unknown cache kind {kind}")
    return grads


def predict(params: ModelParams, x):
    return forward(params, x, training=False)[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, adam: AdamState | None = None):
    names = sorted(params.tensors)
    manifest = []
    offset = 0
    blobs = []

    def put(arr):
        nonlocal offset
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        blobs.append(blob)
        start = offset
        offset += len(blob)
        return start

    for name in names:
        arr = params.tensors[name]
        manifest.append(
            {"name": name, "shape": list(arr.shape), "offset": put(arr)}
        )
    header = {
        "spec": serialize(params.spec),
        "seed": params.seed,
        "tensors": manifest,
        "adam": None,
    }
    if adam is not None:
        header["adam"] = {
            "t": adam.t,
            "alpha": adam.alpha,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "m_offset": offset,
        }
        for name in names:
            put(adam.m[name])
        header["adam"]["v_offset"] = offset
        for name in names:
            put(adam.v[name])
    hjson = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Returns (ModelParams, AdamState | None)."""
    blob = Path(path).read_bytes()
    if blob[:6] != CHECKPOINT_MAGIC:
        raise MetadataError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[6:14])
    header = json.loads(blob[14 : 14 + hlen].decode())
    payload = blob[14 + hlen :]
    spec = parse_netspec(header["spec"])

    def take(offset, shape):
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
        return arr.reshape(shape).copy() if shape else arr.copy()

    tensors = {}
    for entry in header["tensors"]:
        tensors[entry["name"]] = take(entry["offset"], tuple(entry["shape"]))
    params = ModelParams(spec=spec, tensors=tensors, seed=header["seed"])
    adam = None
    if header.get("adam"):
        a = header["adam"]
        names = sorted(tensors)
        m, v = {}, {}
        off = a["m_offset"]
        for name in names:
            m[name] = take(off, tensors[name].shape)
            off += tensors[name].nbytes // tensors[name].itemsize * 8
        off = a["v_offset"]
        for name in names:
            v[name] = take(off, tensors[name].shape)
            off += tensors[name].nbytes // tensors[name].itemsize * 8
        adam = AdamState(
            m=m, v=v, t=a["t"], alpha=a["alpha"], beta1=a["beta1"],
            beta2=a["beta2"], eps=a["eps"],
        )
    return params, adam
