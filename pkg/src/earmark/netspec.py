"""Textual network-architecture description language.

A spec is a whitespace-separated sequence of layer tokens, one per layer::

    I(32,32,16,1) C(f=8,k=3,s=1,p=same) SE(r=4) P(2) FC(128) D(0.2) O(21)

Vocabulary: ``I`` input, ``C`` 3-D convolution, ``SE`` squeeze-and-excitation
block, ``P`` max pooling, ``FC`` fully-connected, ``D`` dropout, ``O`` linear
output.  Parameters may be positional or ``key=value``; elided parameters take
the documented defaults (k=3, s=1, p=same, r=4, pool stride = window).
``#`` starts a comment running to end of line.

Only linear chains are supported.  Flattening is implicit before the first
``FC`` (or before ``O`` when there is no ``FC``).  All diagnostics carry a
1-based line:column position.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .errors import NetspecError

PADDING_MODES = ("same", "valid")


@dataclass(frozen=True)
class Conv:
    f: int
    k: int = 3
    s: int = 1
    p: str = "same"


@dataclass(frozen=True)
class SqueezeExcite:
    r: int = 4


@dataclass(frozen=True)
class Pool:
    w: int = 2
    s: int | None = None  # None means stride = window

    @property
    def stride(self) -> int:
        return self.w if self.s is None else self.s


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class Output:
    units: int


LAYER_KINDS = {
    "C": Conv,
    "SE": SqueezeExcite,
    "P": Pool,
    "FC": Dense,
    "D": Dropout,
    "O": Output,
}


@dataclass(frozen=True)
class NetworkSpec:
    """Validated linear layer chain with its input dims (W, H, D, channels)."""

    input_dims: tuple[int, int, int, int]
    layers: tuple = field(default_factory=tuple)

    @property
    def output_units(self) -> int:
        return self.layers[-1].units


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[A-Za-z]+(?:\([^()]*\))?")


def _strip_comments(text):
    return "\n".join(line.split("#", 1)[0] for line in text.split("\n"))


def _tokenize(text):
    """Yield (name, argstring, line, col) for every layer token."""
    stripped = _strip_comments(text)
    line_starts = [0]
    for m in re.finditer("\n", stripped):
        line_starts.append(m.end())

    def pos(offset):
        line = 0
        for i, start in enumerate(line_starts):
            if start <= offset:
                line = i
        return line + 1, offset - line_starts[line] + 1

    tokens = []
    for m in re.finditer(r"\S+", stripped):
        chunk, offset = m.group(0), m.start()
        tm = _TOKEN_RE.fullmatch(chunk)
        if tm is None:
            raise NetspecError(f"unrecognized token '{chunk}'", *pos(offset))
        name = chunk.split("(", 1)[0]
        args = chunk[len(name) :]
        if args:
            args = args[1:-1]  # strip parens
        else:
            args = None
        tokens.append((name, args, *pos(offset)))
    return tokens


_PARAM_ORDER = {
    "I": ("w", "h", "d", "c"),
    "C": ("f", "k", "s", "p"),
    "SE": ("r",),
    "P": ("w", "s"),
    "FC": ("units",),
    "D": ("rate",),
    "O": ("units",),
}
_PARAM_REQUIRED = {
    "I": ("w", "h", "d", "c"),
    "C": ("f",),
    "SE": (),
    "P": (),
    "FC": ("units",),
    "D": ("rate",),
    "O": ("units",),
}
_INT_PARAMS = {"w", "h", "d", "c", "f", "k", "s", "r", "units"}


def _parse_args(name, argstr, line, col):
    """Resolve positional/keyword args into a parameter dict."""
    order = _PARAM_ORDER[name]
    params = {}
    if argstr is not None and argstr.strip():
        parts = [p.strip() for p in argstr.split(",")]
        seen_kw = False
        for i, part in enumerate(parts):
            if not part:
                raise NetspecError(f"empty parameter in {name}(...)", line, col)
            if "=" in part:
                key, _, val = part.partition("=")
                key = key.strip()
                val = val.strip()
                seen_kw = True
            else:
                if seen_kw:
                    raise NetspecError(
                        f"positional parameter after keyword in {name}(...)",
                        line,
                        col,
                    )
                if i >= len(order):
                    raise NetspecError(
                        f"{name} takes at most {len(order)} parameters", line, col
                    )
                key, val = order[i], part
            if key not in order:
                raise NetspecError(f"unknown parameter '{key}' for {name}", line, col)
            if key in params:
                raise NetspecError(f"duplicate parameter '{key}' for {name}", line, col)
            params[key] = val
    for req in _PARAM_REQUIRED[name]:
        if req not in params:
            raise NetspecError(f"{name} requires parameter '{req}'", line, col)
    # type conversion
    out = {}
    for key, val in params.items():
        if key == "p":
            if val not in PADDING_MODES:
                raise NetspecError(
                    f"padding must be one of {PADDING_MODES}, got '{val}'", line, col
                )
            out[key] = val
        elif key == "rate":
            try:
                rate = float(val)
            except ValueError:
                raise NetspecError(f"bad dropout rate '{val}'", line, col)
            if not (0.0 <= rate < 1.0):
                raise NetspecError(f"dropout rate must be in [0, 1), got {rate}", line, col)
            out[key] = rate
        elif key in _INT_PARAMS:
            try:
                iv = int(val)
            except ValueError:
                raise NetspecError(f"parameter '{key}' must be an integer, got '{val}'", line, col)
            if iv <= 0:
                raise NetspecError(f"parameter '{key}' must be positive, got {iv}", line, col)
            out[key] = iv
        else:  # pragma: no cover - the tables above are exhaustive
            raise NetspecError(f"unhandled parameter '{key}'", line, col)
    return out


# ---------------------------------------------------------------------------
# Shape arithmetic
# ---------------------------------------------------------------------------

def _conv_dim(dim, k, s, p):
    if p == "same":
        return -(-dim // s)  # ceil
    return (dim - k) // s + 1


def _pool_dim(dim, w, s):
    return (dim - w) // s + 1


def same_padding(dim, k, s):
    """(low, high) zero padding; the extra column goes on the high side."""
    out = -(-dim // s)
    total = max(0, (out - 1) * s + k - dim)
    low = total // 2
    return low, total - low


def infer_shapes(spec: NetworkSpec):
    """Per-layer output shapes, starting with the input row.

    Returns a list of (label, shape) where shape is (W, H, D, C) while the
    chain is spatial and (units,) after flattening.
    """
    rows = [("I", spec.input_dims)]
    shape = spec.input_dims
    flat = False
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            spatial = tuple(
                _conv_dim(d, layer.k, layer.s, layer.p) for d in shape[:3]
            )
            shape = (*spatial, layer.f)
            label = "C"
        elif isinstance(layer, SqueezeExcite):
            label = "SE"
        elif isinstance(layer, Pool):
            spatial = tuple(_pool_dim(d, layer.w, layer.stride) for d in shape[:3])
            shape = (*spatial, shape[3])
            label = "P"
        elif isinstance(layer, Dense):
            if not flat:
                shape = (int(math.prod(shape)),)
                flat = True
            shape = (layer.units,)
            label = "FC"
        elif isinstance(layer, Dropout):
            label = "D"
        elif isinstance(layer, Output):
            if not flat:
                shape = (int(math.prod(shape)),)
                flat = True
            shape = (layer.units,)
            label = "O"
        else:  # pragma: no cover
            raise TypeError(f"unknown layer {layer!r}")
        if any(d <= 0 for d in shape):
            raise NetspecError(
                f"layer {idx} ({label}) produces nonpositive shape {shape}", 1, 1
            )
        rows.append((label, shape))
    return rows


def flatten_size(spec: NetworkSpec) -> int:
    """Number of features entering the dense stage."""
    shape = spec.input_dims
    for layer in spec.layers:
        if isinstance(layer, Conv):
            shape = (
                *(_conv_dim(d, layer.k, layer.s, layer.p) for d in shape[:3]),
                layer.f,
            )
        elif isinstance(layer, Pool):
            shape = (*(_pool_dim(d, layer.w, layer.stride) for d in shape[:3]), shape[3])
        elif isinstance(layer, (Dense, Output)):
            break
    return int(math.prod(shape))


# ---------------------------------------------------------------------------
# Parser / serializer
# ---------------------------------------------------------------------------

def parse_netspec(text: str) -> NetworkSpec:
    """Parse and fully validate a network description.

    Raises :class:`NetspecError` with a 1-based line:column position on the
    first offending token.
    """
    tokens = _tokenize(text)
    if not tokens:
        raise NetspecError("empty network description", 1, 1)
    name, args, line, col = tokens[0]
    if name != "I":
        raise NetspecError(f"network must start with I(...), got '{name}'", line, col)
    p = _parse_args("I", args, line, col)
    input_dims = (p["w"], p["h"], p["d"], p["c"])

    layers = []
    positions = []
    for name, args, line, col in tokens[1:]:
        if name == "I":
            raise NetspecError("only one input layer allowed", line, col)
        if name not in LAYER_KINDS:
            raise NetspecError(f"unknown layer '{name}'", line, col)
        params = _parse_args(name, args, line, col)
        if name == "P" and "s" not in params:
            params["s"] = params.get("w", 2)  # canonical: stride always explicit
        layers.append(LAYER_KINDS[name](**params))
        positions.append((line, col))

    spec = NetworkSpec(input_dims=input_dims, layers=tuple(layers))
    _validate(spec, positions, tokens[0][2:])
    return spec


def _validate(spec, positions, input_pos):
    layers = spec.layers
    out_indices = [i for i, l in enumerate(layers) if isinstance(l, Output)]
    if not out_indices:
        line, col = positions[-1] if positions else input_pos
        raise NetspecError("network must end with an output layer", line, col)
    if len(out_indices) > 1:
        line, col = positions[out_indices[1]]
        raise NetspecError("only one output layer allowed", line, col)
    if out_indices[0] != len(layers) - 1:
        line, col = positions[out_indices[0]]
        raise NetspecError("output must be the final layer", line, col)

    seen_conv = False
    flat = False
    shape = spec.input_dims
    for i, layer in enumerate(layers):
        line, col = positions[i]
        if isinstance(layer, (Conv, SqueezeExcite, Pool)) and flat:
            raise NetspecError(
                f"{type(layer).__name__} not allowed after the dense stage", line, col
            )
        if isinstance(layer, Conv):
            if layer.p == "valid" and layer.k > min(shape[:3]):
                raise NetspecError(
                    f"kernel {layer.k} exceeds spatial dims {shape[:3]} with valid padding",
                    line,
                    col,
                )
            shape = (
                *(_conv_dim(d, layer.k, layer.s, layer.p) for d in shape[:3]),
                layer.f,
            )
            seen_conv = True
        elif isinstance(layer, SqueezeExcite):
            if not seen_conv:
                raise NetspecError(
                    "SE block requires a preceding convolution", line, col
                )
            if shape[3] % layer.r != 0:
                raise NetspecError(
                    f"SE ratio {layer.r} does not divide {shape[3]} channels",
                    line,
                    col,
                )
        elif isinstance(layer, Pool):
            if layer.w > min(shape[:3]):
                raise NetspecError(
                    f"pool window {layer.w} exceeds spatial dims {shape[:3]}", line, col
                )
            shape = (*(_pool_dim(d, layer.w, layer.stride) for d in shape[:3]), shape[3])
        elif isinstance(layer, (Dense, Output)):
            flat = True
            shape = (layer.units,)
        if any(d <= 0 for d in (shape if flat else shape)):
            raise NetspecError(
                f"layer {i} produces nonpositive shape {shape}", line, col
            )


def _fmt_rate(rate: float) -> str:
    return repr(float(rate))


def serialize(spec: NetworkSpec) -> str:
    """Canonical one-line text; all parameters explicit.

    ``parse_netspec(serialize(s)) == s`` for every valid spec.
    """
    parts = ["I({},{},{},{})".format(*spec.input_dims)]
    for layer in spec.layers:
        if isinstance(layer, Conv):
            parts.append(f"C(f={layer.f},k={layer.k},s={layer.s},p={layer.p})")
        elif isinstance(layer, SqueezeExcite):
            parts.append(f"SE(r={layer.r})")
        elif isinstance(layer, Pool):
            parts.append(f"P(w={layer.w},s={layer.stride})")
        elif isinstance(layer, Dense):
            parts.append(f"FC({layer.units})")
        elif isinstance(layer, Dropout):
            parts.append(f"D({_fmt_rate(layer.rate)})")
        elif isinstance(layer, Output):
            parts.append(f"O({layer.units})")
    return " ".join(parts)


def format_shape_table(spec: NetworkSpec) -> str:
    """Human-readable shape table for CLI output."""
    rows = infer_shapes(spec)
    lines = [f"{'layer':<8}{'output shape'}"]
    for label, shape in rows:
        lines.append(f"{label:<8}{'x'.join(str(d) for d in shape)}")
    return "\n".join(lines)


def default_netspec(input_dims, outputs: int = 21, dropout: float = 0.2) -> NetworkSpec:
    """Reference architecture scaled to the input size.

    Conv/SE/pool blocks with filter counts 8*2^i are stacked while every
    spatial dimension stays >= 4 before pooling, up to four blocks, followed
    by FC(256), dropout (default 0.2) and the linear output.
    """
    w, h, d, c = input_dims
    layers = []
    spatial = (w, h, d)
    for i in range(4):
        if min(spatial) < 4:
            break
        layers.extend([Conv(f=8 * 2**i), SqueezeExcite(r=4), Pool(w=2)])
        spatial = tuple(s // 2 for s in spatial)
    layers.extend([Dense(units=256), Dropout(rate=dropout), Output(units=outputs)])
    spec = NetworkSpec(input_dims=tuple(input_dims), layers=tuple(layers))
    # canonical round-trip keeps construction honest against the grammar
    return parse_netspec(serialize(spec))
