"""Declarative segmenter and adversary networks.

A NetSpec is an ordered list of layers; two-branch adversaries carry the
image branch nested inside a ``concat_branches`` layer, so the main list
always describes the label path. The shipped architectures keep the
structural choices that matter: the segmenter grows its field of view with
doubling dilations instead of extra pooling, and the adversary variants
trade field-of-view (34 vs 18 label-map pixels) and capacity against each
other. The adversary ends in a 1-channel sigmoid probability grid by
default; a 2-way softmax head is available as an option.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .tensor import ShapeError, Tensor, concat_channels, tensor_from_bytes, tensor_to_bytes


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | relu | maxpool2 | channel_softmax | sigmoid | concat_branches
    in_ch: int = 0
    out_ch: int = 0
    k: int = 0
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    branch: tuple = field(default_factory=tuple)  # image-branch layers, concat only


def conv(in_ch, out_ch, k, stride=1, dilation=1, padding=0) -> LayerSpec:
    return LayerSpec("conv", in_ch, out_ch, k, stride, dilation, padding)


def same_conv(in_ch, out_ch, k, dilation=1) -> LayerSpec:
    """Stride-1 conv padded so output extents equal input extents."""
    return conv(in_ch, out_ch, k, 1, dilation, dilation * (k - 1) // 2)


@dataclass(frozen=True)
class NetSpec:
    role: str  # "segmenter" | "adversary"
    layers: tuple
    in_channels: int
    out_channels: int
    image_channels: int = 0  # nonzero only for two-branch adversaries

    def __post_init__(self):
        _check_channel_chain(self)


def _check_channel_chain(spec: "NetSpec") -> None:
    c = spec.in_channels
    for lay in spec.layers:
        if lay.kind == "conv":
            if lay.in_ch != c:
                raise ShapeError(
                    f"{spec.role}: conv expects {lay.in_ch} channels, gets {c}")
            c = lay.out_ch
        elif lay.kind == "concat_branches":
            if spec.image_channels <= 0:
                raise ShapeError("concat_branches in a single-input spec")
            bc = spec.image_channels
            for bl in lay.branch:
                if bl.kind == "conv":
                    if bl.in_ch != bc:
                        raise ShapeError(
                            f"{spec.role}: branch conv expects {bl.in_ch}, gets {bc}")
                    bc = bl.out_ch
            c = c + bc
    if c != spec.out_channels:
        raise ShapeError(
            f"{spec.role}: chain ends with {c} channels, spec says {spec.out_channels}")


def build_segmenter(num_classes: int, channels_base: int = 16,
                    n_context_layers: int = 4) -> NetSpec:
    """Small front end (two 3x3 convs + one pool, stride 2) followed by a
    context stack of 3x3 convs with doubling dilations, then a 1x1 head and
    per-pixel softmax. All convs are 'same'-padded so the only resolution
    change is the pool."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    b = channels_base
    spec_layers = [
        same_conv(3, b, 3), LayerSpec("relu"),
        same_conv(b, b, 3), LayerSpec("relu"),
        LayerSpec("maxpool2"),
    ]
    for i in range(n_context_layers):
        spec_layers += [same_conv(b, b, 3, dilation=2 ** i), LayerSpec("relu")]
    spec_layers += [conv(b, num_classes, 1), LayerSpec("channel_softmax")]
    return NetSpec("segmenter", tuple(spec_layers), 3, num_classes)


def build_adversary(in_channels: int, fov: str = "large", capacity: str = "full",
                    two_branch: bool = False, head: str = "sigmoid") -> NetSpec:
    """Adversary over label maps (optionally plus an image branch).

    large: six same-padded 3x3 convs with two interleaved pools, 3x3 head
           (34x34 field of view in label-map units).
    small: alternating 3x3 / 1x1 convs in the same pool pattern, 1x1 head
           (18x18 field of view).
    ``capacity="light"`` halves every channel width. ``two_branch`` adds an
    image branch whose channel count at the merge equals the label branch's.
    """
    if fov not in ("large", "small"):
        raise ValueError("fov must be 'large' or 'small'")
    if capacity not in ("full", "light"):
        raise ValueError("capacity must be 'full' or 'light'")
    if head not in ("sigmoid", "softmax2"):
        raise ValueError("head must be 'sigmoid' or 'softmax2'")
    widths = [12, 16, 16, 32, 32, 64]
    if capacity == "light":
        widths = [max(1, w // 2) for w in widths]
    w0, w1, w2, w3, w4, w5 = widths

    spec_layers: list[LayerSpec] = [same_conv(in_channels, w0, 3), LayerSpec("relu")]
    trunk_in = w0
    if two_branch:
        branch = (same_conv(3, w0, 3), LayerSpec("relu"))
        spec_layers.append(LayerSpec("concat_branches", branch=branch))
        trunk_in = 2 * w0

    if fov == "large":
        spec_layers += [
            same_conv(trunk_in, w1, 3), LayerSpec("relu"),
            same_conv(w1, w2, 3), LayerSpec("relu"),
            LayerSpec("maxpool2"),
            same_conv(w2, w3, 3), LayerSpec("relu"),
            same_conv(w3, w4, 3), LayerSpec("relu"),
            LayerSpec("maxpool2"),
            same_conv(w4, w5, 3), LayerSpec("relu"),
        ]
        head_k = 3
    else:
        spec_layers += [
            conv(trunk_in, w1, 1), LayerSpec("relu"),
            LayerSpec("maxpool2"),
            same_conv(w1, w3, 3), LayerSpec("relu"),
            conv(w3, w4, 1), LayerSpec("relu"),
            LayerSpec("maxpool2"),
            same_conv(w4, w5, 3), LayerSpec("relu"),
        ]
        head_k = 1

    if head == "sigmoid":
        spec_layers += [same_conv(w5, 1, head_k), LayerSpec("sigmoid")]
        out_ch = 1
    else:
        spec_layers += [same_conv(w5, 2, head_k), LayerSpec("channel_softmax")]
        out_ch = 2
    return NetSpec("adversary", tuple(spec_layers), in_channels, out_ch,
                   image_channels=3 if two_branch else 0)


# ---------------------------------------------------------------------------
# receptive-field arithmetic
#
# Walking the label path we maintain, per axis, the affine window map
# output index o -> input pixels [jump*o + lo, jump*o + hi] (before image
# clipping). Activations and the branch merge are neutral.

_GEOM_NEUTRAL = ("relu", "sigmoid", "channel_softmax", "concat_branches")


def _layer_geometry(lay: LayerSpec) -> tuple[int, int, int]:
    """(kernel, stride, dilation) for geometry purposes."""
    if lay.kind == "conv":
        return lay.k, lay.stride, lay.dilation
    if lay.kind == "maxpool2":
        return 2, 2, 1
    raise ValueError(f"unsupported layer kind {lay.kind!r}")


def rf_geometry(spec: NetSpec) -> tuple[int, int, int]:
    """(jump, lo, hi): output index o sees input pixels [jump*o+lo, jump*o+hi].

    Both axes are identical because every shipped layer is square.
    """
    jump, lo, hi = 1, 0, 0
    for lay in spec.layers:
        if lay.kind in _GEOM_NEUTRAL:
            continue
        k, s, d = _layer_geometry(lay)
        pad = lay.padding if lay.kind == "conv" else 0
        lo, hi = lo - jump * pad, hi + jump * (d * (k - 1) - pad)
        jump *= s
    return jump, lo, hi


def receptive_field(spec: NetSpec) -> tuple[int, int, int]:
    """(rf_h, rf_w, total_stride) of the label path."""
    jump, lo, hi = rf_geometry(spec)
    rf = hi - lo + 1
    return rf, rf, jump


def affected_outputs(spec: NetSpec, pixel: int, out_extent: int) -> tuple[int, int]:
    """Inclusive output-index range [a, b] whose window covers an input
    pixel along one axis; the analytic prediction the perturbation oracle
    checks against."""
    jump, lo, hi = rf_geometry(spec)
    first = -(-(pixel - hi) // jump)  # ceil div
    last = (pixel - lo) // jump
    return max(first, 0), min(last, out_extent - 1)


# ---------------------------------------------------------------------------
# parameters and forward


def init_params(spec: NetSpec, seed: int) -> dict:
    """Fan-balanced uniform kernels (+-sqrt(6/(fan_in+fan_out))), zero
    biases; fully determined by the seed. Keys follow walk order: trunk
    layer i -> 'L{i}', image-branch layer j -> 'B{j}'."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def add_conv(name, lay):
        fan_in = lay.in_ch * lay.k * lay.k
        fan_out = lay.out_ch * lay.k * lay.k
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        kern = rng.uniform(-bound, bound, size=(lay.out_ch, lay.in_ch, lay.k, lay.k))
        params[f"{name}.kernel"] = Tensor(kern, requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(lay.out_ch), requires_grad=True)

    for i, lay in enumerate(spec.layers):
        if lay.kind == "conv":
            add_conv(f"L{i}", lay)
        elif lay.kind == "concat_branches":
            for j, bl in enumerate(lay.branch):
                if bl.kind == "conv":
                    add_conv(f"B{j}", bl)
    return params


def param_count(spec: NetSpec) -> int:
    total = 0
    convs = [lay for lay in spec.layers if lay.kind == "conv"]
    for lay in spec.layers:
        if lay.kind == "concat_branches":
            convs += [bl for bl in lay.branch if bl.kind == "conv"]
    for lay in convs:
        total += lay.out_ch * lay.in_ch * lay.k * lay.k + lay.out_ch
    return total


def _apply(lay: LayerSpec, x: Tensor, params: dict, name: str) -> Tensor:
    if lay.kind == "conv":
        p = L.ConvParams(params[f"{name}.kernel"], params[f"{name}.bias"],
                         lay.stride, lay.dilation, lay.padding)
        return L.conv2d(x, p)
    if lay.kind == "relu":
        return L.relu(x)
    if lay.kind == "maxpool2":
        return L.maxpool2(x)
    if lay.kind == "sigmoid":
        return L.sigmoid(x)
    if lay.kind == "channel_softmax":
        return L.channel_softmax(x)
    raise ValueError(f"unknown layer kind {lay.kind!r}")


def forward(spec: NetSpec, params: dict, inputs, trace: list | None = None) -> Tensor:
    """Run the network. Single-input specs take one tensor; two-branch
    adversaries take (label_input, image_input). When ``trace`` is given,
    (layer, layer_input) pairs are appended to it for diagnostics."""
    if spec.image_channels:
        if not isinstance(inputs, (tuple, list)) or len(inputs) != 2:
            raise ShapeError("two-branch network needs (label_input, image_input)")
        x, image = inputs
    else:
        x, image = inputs, None
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"{spec.role} expects (N, {spec.in_channels}, H, W), got {x.shape}")

    for i, lay in enumerate(spec.layers):
        if lay.kind == "concat_branches":
            b = image
            if b.ndim != 4 or b.shape[1] != spec.image_channels:
                raise ShapeError(f"image branch expects {spec.image_channels} channels")
            for j, bl in enumerate(lay.branch):
                if trace is not None:
                    trace.append((bl, b))
                b = _apply(bl, b, params, f"B{j}")
            x = concat_channels([x, b])
        else:
            if trace is not None:
                trace.append((lay, x))
            x = _apply(lay, x, params, f"L{i}")
    return x


def zero_grads(params: dict) -> None:
    for t in params.values():
        t.zero_grad()


def set_requires_grad(params: dict, flag: bool) -> None:
    for t in params.values():
        t.requires_grad = flag


# ---------------------------------------------------------------------------
# persistence: a text index in front of concatenated "ADVT" tensor blobs,
# and the NetSpec as key-value lines (one layer per line).


def save_params(params: dict, path) -> None:
    blobs = [(name, tensor_to_bytes(t)) for name, t in params.items()]
    head = [b"ADVSEG-PARAMS 1", str(len(blobs)).encode()]
    off = 0
    for name, blob in blobs:
        head.append(f"{name} {off} {len(blob)}".encode())
        off += len(blob)
    with open(path, "wb") as fh:
        fh.write(b"\n".join(head) + b"\n")
        for _, blob in blobs:
            fh.write(blob)


def load_params(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"ADVSEG-PARAMS 1\n"):
        raise ValueError("bad checkpoint header")
    pos = len(b"ADVSEG-PARAMS 1\n")
    end = raw.index(b"\n", pos)
    count = int(raw[pos:end])
    pos = end + 1
    index = []
    for _ in range(count):
        end = raw.index(b"\n", pos)
        name, off, length = raw[pos:end].decode().rsplit(" ", 2)
        index.append((name, int(off), int(length)))
        pos = end + 1
    params = {}
    for name, off, length in index:
        t = tensor_from_bytes(raw[pos + off: pos + off + length])
        t.requires_grad = True
        params[name] = t
    return params


_LAYER_FIELDS = ("in_ch", "out_ch", "k", "stride", "dilation", "padding")


def _layer_line(prefix: str, lay: LayerSpec) -> str:
    if lay.kind == "conv":
        geom = " ".join(f"{f}={getattr(lay, f)}" for f in _LAYER_FIELDS)
        return f"{prefix} = conv {geom}"
    return f"{prefix} = {lay.kind}"


def spec_to_text(spec: NetSpec) -> str:
    lines = [
        f"role = {spec.role}",
        f"in_channels = {spec.in_channels}",
        f"out_channels = {spec.out_channels}",
        f"image_channels = {spec.image_channels}",
    ]
    for lay in spec.layers:
        if lay.kind == "concat_branches":
            for bl in lay.branch:
                lines.append(_layer_line("branch_layer", bl))
            lines.append("layer = concat_branches")
        else:
            lines.append(_layer_line("layer", lay))
    return "\n".join(lines) + "\n"


def _parse_layer(body: str) -> LayerSpec:
    parts = body.split()
    if parts[0] != "conv":
        return LayerSpec(parts[0])
    kw = dict(p.split("=") for p in parts[1:])
    return LayerSpec("conv", **{f: int(kw[f]) for f in _LAYER_FIELDS})


def spec_from_text(text: str) -> NetSpec:
    meta = {}
    layer_list: list[LayerSpec] = []
    pending_branch: list[LayerSpec] = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "layer":
            if value == "concat_branches":
                layer_list.append(LayerSpec("concat_branches",
                                            branch=tuple(pending_branch)))
                pending_branch = []
            else:
                layer_list.append(_parse_layer(value))
        elif key == "branch_layer":
            pending_branch.append(_parse_layer(value))
        else:
            meta[key] = value
    return NetSpec(meta["role"], tuple(layer_list), int(meta["in_channels"]),
                   int(meta["out_channels"]), int(meta["image_channels"]))


def save_spec(spec: NetSpec, path) -> None:
    with open(path, "w") as fh:
        fh.write(spec_to_text(spec))


def load_spec(path) -> NetSpec:
    with open(path) as fh:
        return spec_from_text(fh.read())
