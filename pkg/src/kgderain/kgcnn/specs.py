"""Layer lists for the parameter net and the derain net."""

from __future__ import annotations

from ..nn import net as L

PATCH = 64
DEFAULT_DEPTH = 26
DEFAULT_FILTERS = 36


def param_net_spec() -> list:
    """Four conv+ReLU+pool stages then two fully-connected layers: 64x64x3 -> 2."""
    spec = []
    cin = 3
    for cout in (16, 32, 64, 64):
        spec += [L.conv(cin, cout), L.relu(), L.pool()]
        cin = cout
    side = PATCH // 16
    spec += [L.fc(64 * side * side, 64), L.relu(), L.fc(64, 2)]
    return spec


def derain_blocks(depth: int) -> tuple[int, int]:
    """Split ``depth`` into (two-layer residual blocks, plain layers left over)."""
    if depth < 3:
        raise ValueError(f"derain depth must be >= 3 (got {depth})")
    return divmod(depth - 3, 2)


def derain_net_spec(t: int, depth: int = DEFAULT_DEPTH, filters: int = DEFAULT_FILTERS, guided: bool = True) -> list:
    """Residual streak regressor with ``depth`` 3x3 convolutions.

    Layout: conv(3->F)+ReLU, [concat t maps], conv(->F)+BN+ReLU, one more
    conv+BN+ReLU when ``depth`` is even, ``(depth-3)//2`` two-layer identity
    blocks, conv(F->3). Without guidance the concat is dropped and the second
    conv sees only F channels.
    """
    blocks, extra = derain_blocks(depth)
    f = filters
    spec = [L.conv(3, f), L.relu()]
    if guided:
        if t < 1:
            raise ValueError("guided derain net needs t >= 1")
        spec += [L.concat_external(f, t), L.conv(f + t, f)]
    else:
        spec += [L.conv(f, f)]
    spec += [L.bn(f), L.relu()]
    spec += [L.conv(f, f), L.bn(f), L.relu()] * extra
    for _ in range(blocks):
        spec += [L.residual_begin()]
        spec += [L.conv(f, f), L.bn(f), L.relu()] * 2
        spec += [L.residual_end()]
    spec += [L.conv(f, 3)]
    return spec


def conv_depth(spec) -> int:
    return sum(layer.kind == "conv3x3" for layer in spec)
