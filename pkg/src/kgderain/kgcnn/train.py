"""Training loops for the parameter net and the derain net."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import nn
from ..seeding import stream
from .data import PatchDataset
from .specs import DEFAULT_DEPTH, DEFAULT_FILTERS, derain_net_spec, param_net_spec

log = logging.getLogger(__name__)

MODES = ("full", "zero_kernel", "derain_only")

# He-normal everywhere except the derain net's last conv, which starts this
# much smaller so the initial streak guess is near zero rather than noise
# several times larger than the streaks themselves.
OUTPUT_INIT_SCALE = 0.01


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.01
    seed: int = 0
    patches: int = 500
    mode: str = "full"
    depth: int = DEFAULT_DEPTH
    filters: int = DEFAULT_FILTERS
    rerain: bool = False  # resample the rain on the same crops every epoch

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 0 or self.batch_size < 2 or self.patches < 0 or self.filters < 1:
            raise ValueError("epochs/patches must be >= 0, batch size >= 2, filters >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainedNet:
    spec: list
    state: nn.NetState
    meta: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return self.meta.get("losses", [])

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.spec, self.state, self.meta)

    @classmethod
    def load(cls, path) -> "TrainedNet":
        spec, state, meta = nn.load_checkpoint(path)
        return cls(spec, state, meta)


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    chunks = [order[i : i + size] for i in range(0, n, size)]
    # Batchnorm cannot train on a single sample; fold a trailing singleton in.
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def _fit(spec, state, arrays, cfg: TrainConfig, name: str, refresh=None):
    """Minibatch Adam on ``arrays = (inputs, targets, externals)``.

    ``refresh(epoch)``, when given, supplies new arrays before every epoch
    after the first.
    """
    inputs, targets, externals = arrays
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    if n < 2:
        raise ValueError("need at least two training samples")

    def batch_loss(idx, update):
        ext = None if externals is None else externals[idx]
        y, tape = nn.forward_with_tape(spec, state, inputs[idx], ext, train=True, update_stats=update)
        loss, dy = nn.frobenius_loss(y, targets[idx])
        return loss, tape, dy

    def check(loss, epoch):
        if not math.isfinite(loss):
            raise DivergenceError(f"{name}: loss became non-finite at epoch {epoch}")

    total = 0.0
    for idx in _batches(n, cfg.batch_size, None):
        loss, _, _ = batch_loss(idx, False)
        total += loss * len(idx)
    history = [total / n]
    check(history[0], 0)
    log.info("%s: initial loss %.6g", name, history[0])
    shuffle = stream(cfg.seed, "shuffle")
    for epoch in range(1, cfg.epochs + 1):
        if refresh is not None and epoch > 1:
            inputs, targets, externals = refresh(epoch)
        total = 0.0
        for idx in _batches(n, cfg.batch_size, shuffle):
            loss, tape, dy = batch_loss(idx, True)
            check(loss, epoch)
            grads, _, _ = nn.backward(spec, state, tape, dy)
            nn.adam_step(state, grads, cfg.lr)
            total += loss * len(idx)
        history.append(total / n)
        check(history[-1], epoch)
        log.info("%s: epoch %d/%d loss %.6g", name, epoch, cfg.epochs, history[-1])
    return history


def _refresher(dataset: PatchDataset, cfg: TrainConfig, pca, arrays, needs_pca: bool = False):
    if not cfg.rerain:
        return None
    if needs_pca and pca is None:
        raise ValueError("re-raining a guided dataset needs the PCA basis")

    def refresh(epoch):
        return arrays(dataset.rerained(stream(cfg.seed, "rerain", epoch), pca))

    return refresh


def train_param_net(dataset: PatchDataset, cfg: TrainConfig) -> TrainedNet:
    """Regress normalised (theta, length) from texture patches."""
    spec = param_net_spec()
    state = nn.init_state(spec, stream(cfg.seed, "init", 0))

    def arrays(ds):
        return ds.textures, ds.labels[:, None, None, :], None

    refresh = _refresher(dataset, cfg, None, arrays)
    losses = _fit(spec, state, arrays(dataset), cfg, "param-net", refresh)
    return TrainedNet(spec, state, {"net": "param", "config": asdict(cfg), "losses": losses})


def init_derain_state(spec, seed: int) -> nn.NetState:
    state = nn.init_state(spec, stream(seed, "init", 1))
    last = max(i for i, layer in enumerate(spec) if layer.kind == "conv3x3")
    for value in state.params[last].values():
        value *= OUTPUT_INIT_SCALE
    return state


def train_derain_net(dataset: PatchDataset, cfg: TrainConfig, pca=None) -> TrainedNet:
    """Regress streak patches from texture patches, guided by ground-truth kernels.

    ``zero_kernel`` trains the guided architecture on all-zero maps;
    ``derain_only`` trains an architecture with no map input at all. ``pca``
    is only needed to re-rain a guided dataset.
    """
    t = dataset.coeffs.shape[1]
    guided = cfg.mode != "derain_only"
    spec = derain_net_spec(t, cfg.depth, cfg.filters, guided=guided)
    state = init_derain_state(spec, cfg.seed)

    def arrays(ds):
        if cfg.mode == "full":
            ext = ds.coeffs
        elif cfg.mode == "zero_kernel":
            ext = np.zeros((len(ds), t))
        else:
            ext = None
        return ds.textures, ds.streaks, ext

    full = cfg.mode == "full"
    refresh = _refresher(dataset, cfg, pca if full else None, arrays, needs_pca=full)
    losses = _fit(spec, state, arrays(dataset), cfg, f"derain-net[{cfg.mode}]", refresh)
    return TrainedNet(
        spec, state, {"net": "derain", "mode": cfg.mode, "t": t, "config": asdict(cfg), "losses": losses}
    )
