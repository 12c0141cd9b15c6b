"""Network specifications and the line-based network spec file format.

A spec file holds one or more networks. Each network starts with a header line
followed by one line per layer.

    net roi 128x128
    layer maxpool k=8 stride=8
    layer conv in=2 out=32 k=3 pad=1 stride=1
    layer batchnorm out=32
    layer maxpool k=2 stride=2
    layer relu_rnn in=2048 units=256
    layer output in=256 units=3

An optional `attention N=12 sigma=2.0 theta=6 scale=16` line configures ROI generation.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

from trip_attention.core import custom_errors
from trip_attention.core.attention import KernelGridConfig

KINDS = ("conv", "maxpool", "batchnorm", "relu_rnn", "fully_connected", "output")
WEIGHT_KINDS = ("conv", "relu_rnn", "fully_connected", "output")
ROLES = {"roi": "roi_prediction", "classifier": "classification"}
ROI_OUTPUTS = 3
INPUT_CHANNELS = 2

_KEYS = {"in": "in_channels", "out": "out_channels", "k": "kernel", "pad": "padding", "stride": "stride", "units": "units"}


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.

    Parameters
    ----------
    kind (str) : one of conv, maxpool, batchnorm, relu_rnn, fully_connected, output
    in_channels (int, default=None) : input channels, or input features for relu_rnn, fully_connected and output
    out_channels (int, default=None) : output channels of conv and batchnorm
    kernel (int, default=None) : kernel size of conv and maxpool
    padding (int, default=0) : zero padding of conv
    stride (int, default=None) : stride of conv (default 1) and maxpool (default kernel)
    units (int, default=None) : neurons of relu_rnn, fully_connected and output
    in_shape (tuple, default=()) : resolved input shape, (C, H, W) or (F,)
    out_shape (tuple, default=()) : resolved output shape
    relu_after (bool, default=False) : ReLU is applied to this layer's output
    """

    kind: str
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    padding: int = 0
    stride: Optional[int] = None
    units: Optional[int] = None
    in_shape: Tuple[int, ...] = ()
    out_shape: Tuple[int, ...] = ()
    relu_after: bool = False

    @property
    def has_weights(self) -> bool:
        """Layer carries a quantizable weight tensor."""
        return self.kind in WEIGHT_KINDS

    def weight_shape(self) -> Tuple[int, ...]:
        """Shape of the weight tensor, empty for layers without weights."""
        if self.kind == "conv":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if self.kind == "relu_rnn":
            return (self.units, self.in_channels + self.units)
        if self.kind in ("fully_connected", "output"):
            return (self.units, self.in_channels)
        return ()


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer stack with input geometry.

    Parameters
    ----------
    role (str) : roi_prediction or classification
    width (int) : input width A
    height (int) : input height B
    layers (tuple) : resolved LayerSpec sequence
    """

    role: str
    width: int
    height: int
    layers: Tuple[LayerSpec, ...] = field(default_factory=tuple)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        """Input tensor shape (2, height, width)."""
        return (INPUT_CHANNELS, self.height, self.width)

    @property
    def num_outputs(self) -> int:
        """Units of the final output layer."""
        return self.layers[-1].units

    def weight_layers(self) -> Tuple[int, ...]:
        """Indices of layers carrying quantizable weights."""
        return tuple(i for i, layer in enumerate(self.layers) if layer.has_weights)

    def relu_layers(self) -> Tuple[int, ...]:
        """Indices of layers whose outputs are ReLU activations."""
        return tuple(
            i for i, layer in enumerate(self.layers) if layer.relu_after or layer.kind == "relu_rnn"
        )


@dataclass(frozen=True)
class SpecFile:
    """Parsed contents of a network spec file.

    Parameters
    ----------
    networks (dict) : NetworkSpec keyed by role
    grid (KernelGridConfig) : ROI generation grid
    scale (float, default=None) : decode distance scale S, None for A / 8
    """

    networks: Dict[str, NetworkSpec]
    grid: KernelGridConfig = KernelGridConfig()
    scale: Optional[float] = None


def _parse_fields(tokens, line_number: int) -> Dict[str, str]:
    """Split key=value tokens."""
    values = {}
    for token in tokens:
        if "=" not in token:
            raise custom_errors.SpecSyntaxError(f"line {line_number}: expected key=value, got '{token}'")
        key, value = token.split("=", 1)
        values[key] = value

    return values


def _parse_layer(tokens, line_number: int) -> LayerSpec:
    """Parse the tokens after 'layer'."""
    if not tokens or tokens[0] not in KINDS:
        raise custom_errors.SpecSyntaxError(
            f"line {line_number}: layer kind must be one of {KINDS}"
        )
    kind = tokens[0]
    kwargs = {}
    for key, value in _parse_fields(tokens[1:], line_number).items():
        if key not in _KEYS:
            raise custom_errors.SpecSyntaxError(f"line {line_number}: unknown layer field '{key}'")
        try:
            kwargs[_KEYS[key]] = int(value)
        except ValueError:
            raise custom_errors.SpecSyntaxError(f"line {line_number}: '{key}' must be an integer, got '{value}'")

    return LayerSpec(kind=kind, **kwargs)


def resolve_network(role: str, width: int, height: int, layers) -> NetworkSpec:
    """Chain shapes through a layer stack and mark ReLU placement.

    ReLU follows the last BatchNorm or MaxPool of each convolutional block and every
    fully connected hidden layer; relu_rnn carries its own ReLU.

    Parameters
    ----------
    role (str) : roi_prediction or classification
    width (int) : input width
    height (int) : input height
    layers (list) : unresolved LayerSpec sequence

    Returns
    -------
    spec (NetworkSpec) : layers with in_shape, out_shape and relu_after set
    """
    if not layers:
        raise custom_errors.ConfigInvalid(f"network '{role}' has no layers")

    shape = (INPUT_CHANNELS, height, width)
    resolved = []
    in_conv_block = False
    for index, layer in enumerate(layers):
        where = f"network '{role}' layer {index} ({layer.kind})"
        if layer.kind == "conv":
            if len(shape) != 3 or layer.in_channels != shape[0]:
                raise custom_errors.ConfigInvalid(f"{where}: in={layer.in_channels} does not match input {shape}")
            if not layer.out_channels or not layer.kernel:
                raise custom_errors.ConfigInvalid(f"{where}: out and k are required")
            stride = layer.stride or 1
            out_h = (shape[1] + 2 * layer.padding - layer.kernel) // stride + 1
            out_w = (shape[2] + 2 * layer.padding - layer.kernel) // stride + 1
            out = (layer.out_channels, out_h, out_w)
            layer = replace(layer, stride=stride)
            in_conv_block = True
        elif layer.kind == "maxpool":
            if len(shape) != 3 or not layer.kernel:
                raise custom_errors.ConfigInvalid(f"{where}: requires k and a spatial input, got {shape}")
            stride = layer.stride or layer.kernel
            out_h = (shape[1] - layer.kernel) // stride + 1
            out_w = (shape[2] - layer.kernel) // stride + 1
            out = (shape[0], out_h, out_w)
            layer = replace(layer, stride=stride, out_channels=shape[0])
        elif layer.kind == "batchnorm":
            if len(shape) != 3 or (layer.out_channels is not None and layer.out_channels != shape[0]):
                raise custom_errors.ConfigInvalid(f"{where}: channels do not match input {shape}")
            out = shape
            layer = replace(layer, out_channels=shape[0])
        else:
            features = 1
            for s in shape:
                features *= s
            if layer.in_channels is not None and layer.in_channels != features:
                raise custom_errors.ConfigInvalid(f"{where}: in={layer.in_channels} does not match {features} input features")
            if not layer.units:
                raise custom_errors.ConfigInvalid(f"{where}: units is required")
            out = (layer.units,)
            layer = replace(layer, in_channels=features)
            in_conv_block = False

        if min(out) < 1:
            raise custom_errors.ConfigInvalid(f"{where}: output shape {out} is empty")

        relu_after = layer.kind == "fully_connected"
        if layer.kind in ("conv", "batchnorm", "maxpool") and in_conv_block:
            following = layers[index + 1].kind if index + 1 < len(layers) else None
            relu_after = following not in ("batchnorm", "maxpool")
        if layer.kind in ("relu_rnn", "fully_connected", "output"):
            in_conv_block = False

        resolved.append(replace(layer, in_shape=shape, out_shape=out, relu_after=relu_after))
        shape = out

    if resolved[-1].kind != "output":
        raise custom_errors.ConfigInvalid(f"network '{role}' must end with an output layer")
    if role == "roi_prediction" and resolved[-1].units != ROI_OUTPUTS:
        raise custom_errors.ConfigInvalid(
            f"ROI prediction network must end in {ROI_OUTPUTS} units, got {resolved[-1].units}"
        )

    return NetworkSpec(role=role, width=width, height=height, layers=tuple(resolved))


def parse_spec_file(text: str) -> SpecFile:
    """Parse a network spec file.

    Parameters
    ----------
    text (str) : file contents

    Returns
    -------
    spec_file (SpecFile) : resolved networks keyed by role and ROI generation settings

    Examples
    --------
    >>> spec = parse_spec_file("net classifier 4x4\\nlayer output in=32 units=10")
    >>> spec.networks["classification"].num_outputs
    10
    """
    pending = []
    grid = KernelGridConfig()
    scale = None
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "net":
            if len(tokens) != 3 or tokens[1] not in ROLES:
                raise custom_errors.SpecSyntaxError(
                    f"line {line_number}: expected 'net roi|classifier AxB'"
                )
            try:
                width, height = (int(v) for v in tokens[2].lower().split("x"))
            except ValueError:
                raise custom_errors.SpecSyntaxError(f"line {line_number}: invalid geometry '{tokens[2]}'")
            pending.append((ROLES[tokens[1]], width, height, []))
        elif tokens[0] == "layer":
            if not pending:
                raise custom_errors.SpecSyntaxError(f"line {line_number}: layer before any 'net' header")
            pending[-1][3].append(_parse_layer(tokens[1:], line_number))
        elif tokens[0] == "attention":
            values = _parse_fields(tokens[1:], line_number)
            try:
                grid = KernelGridConfig(
                    N=int(values.pop("N", grid.N)),
                    sigma=float(values.pop("sigma", grid.sigma)),
                    theta=float(values.pop("theta", grid.theta)),
                )
                scale = float(values.pop("scale")) if "scale" in values else scale
            except ValueError as err:
                raise custom_errors.SpecSyntaxError(f"line {line_number}: {err}")
            if values:
                raise custom_errors.SpecSyntaxError(f"line {line_number}: unknown attention fields {sorted(values)}")
        else:
            raise custom_errors.SpecSyntaxError(f"line {line_number}: unknown statement '{tokens[0]}'")

    networks = {}
    for role, width, height, layers in pending:
        if role in networks:
            raise custom_errors.SpecSyntaxError(f"network '{role}' defined more than once")
        networks[role] = resolve_network(role, width, height, layers)
    if not networks:
        raise custom_errors.SpecSyntaxError("spec file defines no networks")

    return SpecFile(networks=networks, grid=grid, scale=scale)


def format_network_spec(spec: NetworkSpec) -> str:
    """Format a network as spec file lines."""
    role = {v: k for k, v in ROLES.items()}[spec.role]
    lines = [f"net {role} {spec.width}x{spec.height}"]
    for layer in spec.layers:
        if layer.kind == "conv":
            fields = f"in={layer.in_channels} out={layer.out_channels} k={layer.kernel} pad={layer.padding} stride={layer.stride}"
        elif layer.kind == "maxpool":
            fields = f"k={layer.kernel} stride={layer.stride}"
        elif layer.kind == "batchnorm":
            fields = f"out={layer.out_channels}"
        else:
            fields = f"in={layer.in_channels} units={layer.units}"
        lines.append(f"layer {layer.kind} {fields}")

    return "\n".join(lines) + "\n"


def param_count(spec: NetworkSpec) -> int:
    """Number of trainable parameters, BatchNorm counted as scale and shift."""
    total = 0
    for layer in spec.layers:
        if layer.has_weights:
            size = 1
            for s in layer.weight_shape():
                size *= s
            total += size + layer.weight_shape()[0]
        elif layer.kind == "batchnorm":
            total += 2 * layer.out_channels

    return total


def dense_macs(spec: NetworkSpec) -> int:
    """Multiply-accumulates of one dense forward pass for a single timebin."""
    total = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            c, h, w = layer.out_shape
            total += c * h * w * layer.in_channels * layer.kernel * layer.kernel
        elif layer.kind == "relu_rnn":
            total += layer.units * (layer.in_channels + layer.units)
        elif layer.kind in ("fully_connected", "output"):
            total += layer.units * layer.in_channels

    return total
