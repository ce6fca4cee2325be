"""Sequential network description, parameter state and the forward/backward driver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import ShapeError

KINDS = (
    "conv3x3",
    "relu",
    "batchnorm",
    "fullyconnected",
    "meanpool2",
    "residual_begin",
    "residual_end",
    "concat_external",
)
PARAM_NAMES = {
    "conv3x3": ("w", "b"),
    "fullyconnected": ("w", "b"),
    "batchnorm": ("gamma", "beta"),
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["in"], d["out"])


def conv(cin: int, cout: int) -> LayerSpec:
    return LayerSpec("conv3x3", cin, cout)


def fc(cin: int, cout: int) -> LayerSpec:
    return LayerSpec("fullyconnected", cin, cout)


def bn(c: int) -> LayerSpec:
    return LayerSpec("batchnorm", c, c)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def pool() -> LayerSpec:
    return LayerSpec("meanpool2")


def residual_begin() -> LayerSpec:
    return LayerSpec("residual_begin")


def residual_end() -> LayerSpec:
    return LayerSpec("residual_end")


def concat_external(cin: int, t: int) -> LayerSpec:
    return LayerSpec("concat_external", cin, cin + t)


@dataclass
class NetState:
    params: list[dict]
    buffers: list[dict]
    m: list[dict]
    v: list[dict]
    step: int = 0

    def param_arrays(self):
        for layer in self.params:
            for name in sorted(layer):
                yield layer[name]


@dataclass
class Tape:
    records: list = field(default_factory=list)
    fused: set = field(default_factory=set)
    external_kind: str | None = None


def validate(spec, in_channels: int | None = None) -> None:
    """Check channel bookkeeping along the chain and residual nesting."""
    channels = in_channels
    stack = []
    for i, layer in enumerate(spec):
        k = layer.kind
        if k in ("conv3x3", "batchnorm", "concat_external"):
            if channels is not None and layer.in_channels != channels:
                raise ShapeError(f"layer {i} ({k}) expects {layer.in_channels} channels, chain has {channels}")
            channels = layer.out_channels
        elif k == "fullyconnected":
            channels = layer.out_channels
        elif k == "residual_begin":
            stack.append(channels)
        elif k == "residual_end":
            if not stack:
                raise ShapeError(f"layer {i}: residual_end without residual_begin")
            start = stack.pop()
            if start is not None and start != channels:
                raise ShapeError(f"layer {i}: residual join changes channel count")
    if stack:
        raise ShapeError("unclosed residual_begin")


def param_shapes(layer: LayerSpec) -> dict:
    if layer.kind == "conv3x3":
        return {"w": (3, 3, layer.in_channels, layer.out_channels), "b": (layer.out_channels,)}
    if layer.kind == "fullyconnected":
        return {"w": (layer.in_channels, layer.out_channels), "b": (layer.out_channels,)}
    if layer.kind == "batchnorm":
        return {"gamma": (layer.in_channels,), "beta": (layer.in_channels,)}
    return {}


def buffer_shapes(layer: LayerSpec) -> dict:
    if layer.kind == "batchnorm":
        return {"running_mean": (layer.in_channels,), "running_var": (layer.in_channels,)}
    return {}


def param_count(spec) -> int:
    return sum(int(np.prod(s)) for layer in spec for s in param_shapes(layer).values())


def init_state(spec, rng: np.random.Generator) -> NetState:
    """He-normal weights, zero biases, unit batchnorm scale."""
    validate(spec)
    params, buffers = [], []
    for layer in spec:
        shapes = param_shapes(layer)
        p = {}
        if layer.kind == "conv3x3":
            fan_in = 9 * layer.in_channels
            p["w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shapes["w"])
            p["b"] = np.zeros(shapes["b"])
        elif layer.kind == "fullyconnected":
            p["w"] = rng.normal(0.0, np.sqrt(2.0 / layer.in_channels), shapes["w"])
            p["b"] = np.zeros(shapes["b"])
        elif layer.kind == "batchnorm":
            p["gamma"] = np.ones(shapes["gamma"])
            p["beta"] = np.zeros(shapes["beta"])
        params.append(p)
        buffers.append(
            {"running_mean": np.zeros(layer.in_channels), "running_var": np.ones(layer.in_channels)}
            if layer.kind == "batchnorm"
            else {}
        )
    m = [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
    v = [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
    return NetState(params, buffers, m, v, 0)


def _external_channels(external) -> int:
    return external.shape[-1]


def forward_with_tape(spec, state: NetState, x, external=None, *, train=False, update_stats=False):
    """Run the chain, recording what :func:`backward` needs.

    ``external`` is either a 2-D ``(batch, t)`` array of coefficients, which is
    stretched implicitly, or explicit ``(batch, h, w, t)`` degradation maps.
    A ``concat_external`` immediately followed by a convolution is fused when
    coefficients are given, so the constant maps are never materialised.
    With ``update_stats`` batchnorm running statistics in ``state`` are updated.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"network input must be NHWC, got {x.shape}")
    has_concat = any(layer.kind == "concat_external" for layer in spec)
    if has_concat != (external is not None):
        raise ShapeError("external maps must be given exactly when the spec has concat_external")
    tape = Tape()
    if external is not None:
        external = np.asarray(external, dtype=np.float64)
        if external.shape[0] != x.shape[0]:
            raise ShapeError("external batch size differs from input batch size")
        tape.external_kind = "coeffs" if external.ndim == 2 else "maps"
    skips = []
    i = 0
    while i < len(spec):
        layer = spec[i]
        k = layer.kind
        p = state.params[i]
        if k == "conv3x3":
            x, cache = ops.conv3x3_forward(x, p["w"], p["b"])
        elif k == "relu":
            x, cache = ops.relu_forward(x)
        elif k == "batchnorm":
            buf = state.buffers[i]
            x, cache, stats = ops.batchnorm_forward(
                x, p["gamma"], p["beta"], buf["running_mean"], buf["running_var"], train
            )
            if update_stats and stats is not None:
                buf["running_mean"] = ops.update_running(buf["running_mean"], stats[0])
                buf["running_var"] = ops.update_running(buf["running_var"], stats[1])
        elif k == "fullyconnected":
            x, cache = ops.fc_forward(x, p["w"], p["b"])
        elif k == "meanpool2":
            x, cache = ops.meanpool2_forward(x)
        elif k == "residual_begin":
            skips.append(x)
            cache = None
        elif k == "residual_end":
            skip = skips.pop()
            if skip.shape != x.shape:
                raise ShapeError(f"residual join: branch {x.shape} vs skip {skip.shape}")
            x = x + skip
            cache = None
        elif k == "concat_external":
            t = _external_channels(external)
            if layer.out_channels - layer.in_channels != t or x.shape[3] != layer.in_channels:
                raise ShapeError(
                    f"concat expects {layer.in_channels}+{layer.out_channels - layer.in_channels} channels, "
                    f"got {x.shape[3]}+{t}"
                )
            nxt = spec[i + 1] if i + 1 < len(spec) else None
            if external.ndim == 2 and nxt is not None and nxt.kind == "conv3x3":
                w = state.params[i + 1]["w"]
                cin = layer.in_channels
                y, c_img = ops.conv3x3_forward(x, w[:, :, :cin], state.params[i + 1]["b"])
                y_ext, c_ext = ops.const_conv3x3_forward(external, w[:, :, cin:], x.shape[1], x.shape[2])
                tape.records.append(None)
                tape.records.append((c_img, c_ext))
                tape.fused.add(i + 1)
                x = y + y_ext
                i += 2
                continue
            maps = external
            if maps.ndim == 2:
                maps = np.broadcast_to(maps[:, None, None, :], x.shape[:3] + (t,))
            if maps.shape[:3] != x.shape[:3]:
                raise ShapeError(f"degradation maps {maps.shape} do not match activation {x.shape}")
            x = np.concatenate([x, maps], axis=3)
            cache = layer.in_channels
        tape.records.append(cache)
        i += 1
    if skips:
        raise ShapeError("unclosed residual_begin")
    return x, tape


def forward(spec, state: NetState, x, external=None, *, train=False, update_stats=False):
    return forward_with_tape(spec, state, x, external, train=train, update_stats=update_stats)[0]


def backward(spec, state: NetState, tape: Tape, dy):
    """Gradients for every parameter, the input, and the external maps/coefficients."""
    grads = [{} for _ in spec]
    pending = []
    dext = None
    i = len(spec) - 1
    while i >= 0:
        layer = spec[i]
        k = layer.kind
        cache = tape.records[i]
        if i in tape.fused:
            c_img, c_ext = cache
            dx, dw_img, db = ops.conv3x3_backward(dy, c_img)
            dc, dw_ext = ops.const_conv3x3_backward(dy, c_ext)
            grads[i] = {"w": np.concatenate([dw_img, dw_ext], axis=2), "b": db}
            dext = dc
            dy = dx
            i -= 2
            continue
        if k == "conv3x3":
            dy, dw, db = ops.conv3x3_backward(dy, cache)
            grads[i] = {"w": dw, "b": db}
        elif k == "relu":
            dy = ops.relu_backward(dy, cache)
        elif k == "batchnorm":
            dy, dg, dbeta = ops.batchnorm_backward(dy, cache)
            grads[i] = {"gamma": dg, "beta": dbeta}
        elif k == "fullyconnected":
            dy, dw, db = ops.fc_backward(dy, cache)
            grads[i] = {"w": dw, "b": db}
        elif k == "meanpool2":
            dy = ops.meanpool2_backward(dy, cache)
        elif k == "residual_end":
            pending.append(dy)
        elif k == "residual_begin":
            dy = dy + pending.pop()
        elif k == "concat_external":
            cin = cache
            dmaps = dy[..., cin:]
            dext = dmaps.sum(axis=(1, 2)) if tape.external_kind == "coeffs" else dmaps
            dy = dy[..., :cin]
        i -= 1
    return grads, dy, dext
