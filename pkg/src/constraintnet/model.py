"""ConstraintNet assembly: trunk layers, the g(s) representation and the guard.

``f(x, s) = guard(trunk(x, g(s)), s)``; the output lies in ``C(s)`` for every
parameter set because the guard is the last operation.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Parameter, Tensor
from .constraints import ConstraintClass, constraint_from_dict

FORMAT_VERSION = 1

__all__ = [
    "FORMAT_VERSION",
    "ModelFormatError",
    "ModelVersionError",
    "ModelValidationError",
    "Dense",
    "Conv",
    "TrunkConfig",
    "GRepr",
    "ConstraintNetModel",
    "default_scale",
    "build_dense_model",
    "save",
    "load",
]


class ModelFormatError(ValueError):
    """Model file could not be parsed; the message names the field path."""


class ModelVersionError(ModelFormatError):
    pass


class ModelValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int
    activation: str = "relu"
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    activation: str = "relu"
    kind: str = field(default="conv", init=False)


_ACTIVATIONS = ("relu", "linear")


def _layer_from_dict(d: dict, path: str):
    d = dict(d)
    kind = d.pop("kind", None)
    try:
        if kind == "dense":
            return Dense(int(d["n_in"]), int(d["n_out"]), str(d.get("activation", "relu")))
        if kind == "conv":
            return Conv(
                int(d["in_channels"]),
                int(d["out_channels"]),
                int(d["kernel"]),
                int(d.get("stride", 1)),
                str(d.get("activation", "relu")),
            )
    except KeyError as exc:
        raise ModelFormatError(f"{path}: missing field {exc}") from None
    raise ModelFormatError(f"{path}.kind: unknown layer kind {kind!r}")


@dataclass
class TrunkConfig:
    """Layer stack of the trunk; ``input_scale`` multiplies ``x`` elementwise."""

    input_shape: tuple[int, ...]
    layers: list
    input_scale: list[float] | None = None

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "input_scale": None if self.input_scale is None else [float(v) for v in self.input_scale],
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict, path: str = "trunk") -> "TrunkConfig":
        try:
            layers = [_layer_from_dict(l, f"{path}.layers[{i}]") for i, l in enumerate(d["layers"])]
            return cls(tuple(int(v) for v in d["input_shape"]), layers, d.get("input_scale"))
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"{path}: malformed trunk ({exc!r})") from None


@dataclass
class GRepr:
    """How ``s`` enters the trunk.

    ``vector_concat`` appends ``scale * s`` to the flat input of layer
    ``insertion_layer``; ``channel_broadcast`` appends ``s_dim`` constant
    channels to a ``C x H x W`` input.
    """

    scale: list[float]
    insertion_layer: int
    mode: str = "vector_concat"
    height: int | None = None
    width: int | None = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "insertion_layer": self.insertion_layer,
            "scale": [float(v) for v in self.scale],
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict, path: str = "g_repr") -> "GRepr":
        try:
            return cls(
                scale=[float(v) for v in d["scale"]],
                insertion_layer=int(d["insertion_layer"]),
                mode=str(d["mode"]),
                height=d.get("height"),
                width=d.get("width"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"{path}: malformed g representation ({exc!r})") from None

    def represent(self, s, spatial: tuple[int, int] | None = None) -> np.ndarray:
        """Rescaled representation of ``s`` (a batch ``(B, d)`` or a vector)."""
        s = np.asarray(s, dtype=np.float64)
        lam = np.asarray(self.scale)
        if s.shape[-1] != lam.shape[0]:
            raise DimensionError(f"g(s): s has length {s.shape[-1]}, expected {lam.shape[0]}")
        g = s * lam
        if self.mode == "vector_concat":
            return g
        if self.mode != "channel_broadcast":
            raise ModelValidationError(f"unknown g mode {self.mode!r}")
        h, w = spatial if spatial is not None else (self.height, self.width)
        if h is None or w is None:
            raise ModelValidationError("channel_broadcast needs spatial dims")
        return np.broadcast_to(g[..., None, None], g.shape + (h, w)).copy()


def default_scale(constraint: ConstraintClass) -> list[float]:
    """lambda_c = 1 / (nominal range width of s_c)."""
    return [1.0 / e.width if e.width > 0 else 1.0 for e in constraint.s_schema]


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ConstraintNetModel:
    """Trunk + g(s) + guard. Parameters live in ``self.parameters`` by name."""

    def __init__(
        self,
        trunk: TrunkConfig,
        g_repr: GRepr,
        constraint: ConstraintClass,
        parameters: dict[str, np.ndarray] | None = None,
        seed: int = 0,
        metadata: dict | None = None,
    ):
        self.trunk = trunk
        self.g_repr = g_repr
        self.constraint = constraint
        self.metadata = dict(metadata or {})
        self.metadata.setdefault("seed", seed)
        self._shapes = self._validate()
        if parameters is None:
            parameters = self._init_parameters(np.random.default_rng(seed))
        self.parameters: dict[str, Parameter] = {}
        for name, shape in self._param_shapes().items():
            if name not in parameters:
                raise ModelValidationError(f"missing parameter {name!r}")
            value = np.asarray(parameters[name], dtype=np.float64)
            if value.shape != shape:
                raise ModelValidationError(f"parameter {name!r}: shape {value.shape} != expected {shape}")
            self.parameters[name] = Parameter(value.copy(), name=name)

    # -- structure ---------------------------------------------------------

    def _validate(self) -> list[tuple[int, ...]]:
        """Walk the layers, checking dimensions; returns per-layer input shapes."""
        layers = self.trunk.layers
        if not layers:
            raise ModelValidationError("trunk needs at least one layer")
        g = self.g_repr
        if len(g.scale) != self.constraint.s_dim:
            raise ModelValidationError(
                f"g_repr.scale has length {len(g.scale)} but constraint s_dim is {self.constraint.s_dim}"
            )
        if not 0 <= g.insertion_layer < len(layers):
            raise ModelValidationError(f"insertion_layer {g.insertion_layer} outside [0, {len(layers)})")
        if self.trunk.input_scale is not None and len(self.trunk.input_scale) != int(
            np.prod(self.trunk.input_shape)
        ):
            raise ModelValidationError("input_scale length must match the flat input size")
        shape = tuple(self.trunk.input_shape)
        shapes = []
        for i, layer in enumerate(layers):
            if i == g.insertion_layer:
                if g.mode == "vector_concat":
                    shape = (int(np.prod(shape)) + self.constraint.s_dim,)
                elif g.mode == "channel_broadcast":
                    if len(shape) != 3:
                        raise ModelValidationError(
                            f"channel_broadcast needs a C x H x W input at layer {i}, got {shape}"
                        )
                    if (g.height, g.width) not in ((None, None), shape[1:]):
                        raise ModelValidationError(
                            f"g_repr spatial dims {(g.height, g.width)} != layer input {shape[1:]}"
                        )
                    shape = (shape[0] + self.constraint.s_dim,) + shape[1:]
                else:
                    raise ModelValidationError(f"unknown g mode {g.mode!r}")
            shapes.append(shape)
            if layer.activation not in _ACTIVATIONS:
                raise ModelValidationError(f"layer {i}: unknown activation {layer.activation!r}")
            if isinstance(layer, Dense):
                flat = int(np.prod(shape))
                if layer.n_in != flat:
                    raise ModelValidationError(f"layer {i}: dense n_in {layer.n_in} != incoming width {flat}")
                shape = (layer.n_out,)
            else:
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ModelValidationError(f"layer {i}: conv expects {layer.in_channels} channels, got {shape}")
                c, h, w = shape
                if layer.kernel > h or layer.kernel > w:
                    raise ModelValidationError(f"layer {i}: kernel {layer.kernel} larger than input {shape}")
                shape = (
                    layer.out_channels,
                    (h - layer.kernel) // layer.stride + 1,
                    (w - layer.kernel) // layer.stride + 1,
                )
        last = layers[-1]
        if not isinstance(last, Dense) or last.activation != "linear":
            raise ModelValidationError("final trunk layer must be dense with linear activation")
        if last.n_out != self.constraint.z_dim:
            raise ModelValidationError(
                f"final layer width {last.n_out} != guard z_dim {self.constraint.z_dim}"
            )
        return shapes

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for i, layer in enumerate(self.trunk.layers):
            if isinstance(layer, Dense):
                out[f"layer{i}.weight"] = (layer.n_in, layer.n_out)
                out[f"layer{i}.bias"] = (layer.n_out,)
            else:
                out[f"layer{i}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                out[f"layer{i}.bias"] = (layer.out_channels,)
        return out

    def _init_parameters(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.trunk.layers):
            if isinstance(layer, Dense):
                w = _glorot(rng, (layer.n_in, layer.n_out), layer.n_in, layer.n_out)
                params[f"layer{i}.bias"] = np.zeros(layer.n_out)
            else:
                k2 = layer.kernel * layer.kernel
                w = _glorot(
                    rng,
                    (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
                    layer.in_channels * k2,
                    layer.out_channels * k2,
                )
                params[f"layer{i}.bias"] = np.zeros(layer.out_channels)
            params[f"layer{i}.weight"] = w
        return params

    def weights(self) -> list[Parameter]:
        """Parameters subject to weight decay (biases excluded)."""
        return [p for n, p in self.parameters.items() if n.endswith(".weight")]

    def parameter_list(self) -> list[Parameter]:
        return list(self.parameters.values())

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.parameters.items()}

    def copy(self) -> "ConstraintNetModel":
        return ConstraintNetModel(
            self.trunk, self.g_repr, self.constraint, self.state(), metadata=dict(self.metadata)
        )

    # -- forward -----------------------------------------------------------

    def _prepare(self, x, s):
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        in_shape = tuple(self.trunk.input_shape)
        single = x.shape == in_shape
        if single:
            x = x[None]
        if x.shape[1:] != in_shape:
            raise DimensionError(f"x has shape {x.shape}, expected (..., {in_shape})")
        if s.ndim == 1:
            s = s[None]
        if s.shape[-1] != self.constraint.s_dim:
            raise DimensionError(f"s has length {s.shape[-1]}, expected {self.constraint.s_dim}")
        if s.shape[0] != x.shape[0]:
            if s.shape[0] != 1:
                raise DimensionError(f"batch mismatch: x {x.shape[0]} vs s {s.shape[0]}")
            s = np.repeat(s, x.shape[0], axis=0)
        return x, s, single

    def intermediate(self, x, s) -> Tensor:
        """z = trunk(x, g(s)) for a batch."""
        x, s, _ = self._prepare(x, s)
        b = x.shape[0]
        h: Tensor = Tensor(x)
        if self.trunk.input_scale is not None:
            h = ad.mul(h, np.asarray(self.trunk.input_scale).reshape(self.trunk.input_shape))
        for i, layer in enumerate(self.trunk.layers):
            if i == self.g_repr.insertion_layer:
                if self.g_repr.mode == "vector_concat":
                    if h.ndim > 2:
                        h = ad.reshape(h, (b, -1))
                    h = ad.concat([h, self.g_repr.represent(s)], axis=1)
                else:
                    g = self.g_repr.represent(s, spatial=h.shape[2:4])
                    h = ad.concat([h, g], axis=1)
            w = self.parameters[f"layer{i}.weight"]
            bias = self.parameters[f"layer{i}.bias"]
            if isinstance(layer, Dense):
                if h.ndim > 2:
                    h = ad.reshape(h, (b, -1))
                h = ad.add(ad.matmul(h, w), bias)
            else:
                h = ad.conv2d(h, w, layer.stride)
                h = ad.add(h, ad.reshape(bias, (1, -1, 1, 1)))
            if layer.activation == "relu":
                h = ad.relu(h)
        return h

    def forward(self, x, s) -> Tensor:
        """Constrained output; batch in, batch out (single sample in, vector out)."""
        x, s, single = self._prepare(x, s)
        z = self.intermediate(x, s)
        y = self.constraint.guard(z, s)
        return ad.reshape(y, (self.constraint.out_dim,)) if single else y

    __call__ = forward

    def predict(self, x, s) -> np.ndarray:
        return self.forward(x, s).data

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "trunk": self.trunk.to_dict(),
            "g_repr": self.g_repr.to_dict(),
            "constraint": self.constraint.to_dict(),
            "parameters": {
                n: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
                for n, p in self.parameters.items()
            },
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintNetModel":
        if not isinstance(d, dict):
            raise ModelFormatError("<root>: expected a JSON object")
        for key in ("format_version", "trunk", "g_repr", "constraint", "parameters"):
            if key not in d:
                raise ModelFormatError(f"{key}: missing field")
        if d["format_version"] != FORMAT_VERSION:
            raise ModelVersionError(
                f"format_version: file has {d['format_version']!r}, this library reads {FORMAT_VERSION}"
            )
        trunk = TrunkConfig.from_dict(d["trunk"])
        g_repr = GRepr.from_dict(d["g_repr"])
        try:
            constraint = constraint_from_dict(d["constraint"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(str(exc)) from None
        params = {}
        for name, entry in d["parameters"].items():
            path = f"parameters.{name}"
            try:
                shape = tuple(int(v) for v in entry["shape"])
                params[name] = np.array(entry["data"], dtype=np.float64).reshape(shape)
            except (KeyError, TypeError, ValueError) as exc:
                raise ModelFormatError(f"{path}: {exc}") from None
        return cls(trunk, g_repr, constraint, params, metadata=d.get("metadata"))


def build_dense_model(
    constraint: ConstraintClass,
    input_shape: Sequence[int],
    hidden: Sequence[int] = (128, 64),
    insertion_layer: int | None = None,
    scale: Sequence[float] | None = None,
    input_scale: Sequence[float] | None = None,
    seed: int = 0,
    metadata: dict | None = None,
) -> ConstraintNetModel:
    """Dense ReLU trunk ending in a linear layer of width ``constraint.z_dim``.

    ``insertion_layer`` defaults to the last layer, i.e. g(s) is appended to
    the output of the penultimate layer.
    """
    n_layers = len(hidden) + 1
    if insertion_layer is None:
        insertion_layer = n_layers - 1
    widths = [int(np.prod(input_shape))] + list(hidden) + [constraint.z_dim]
    layers = []
    for i in range(n_layers):
        n_in = widths[i] + (constraint.s_dim if i == insertion_layer else 0)
        act = "linear" if i == n_layers - 1 else "relu"
        layers.append(Dense(n_in, widths[i + 1], act))
    trunk = TrunkConfig(tuple(input_shape), layers, None if input_scale is None else list(input_scale))
    g = GRepr(list(scale) if scale is not None else default_scale(constraint), insertion_layer)
    return ConstraintNetModel(trunk, g, constraint, seed=seed, metadata=metadata)


def _atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(model: ConstraintNetModel, path) -> None:
    _atomic_write_text(path, json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n")


def load(path) -> ConstraintNetModel:
    with open(path) as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"<root>: not valid JSON ({exc})") from None
    return ConstraintNetModel.from_dict(d)
