"""Command-line entry point: ``kgderain <subcommand> [options]``.

Exit status is 0 on success, 1 for usage errors and 2 when the operation
itself fails. Diagnostics go to standard error; the log level comes from the
``KGDERAIN_LOG`` environment variable (default ``INFO``).

Every subcommand also accepts ``--config FILE``: UTF-8 ``key = value`` lines
with ``#`` comments, where keys are option names (``--foo-bar`` is
``foo_bar`` or ``foo-bar``). Flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import imgcore, kernelspace, metrics, rainsim
from .decompose import GuidedFilterConfig, split_texture, texture_for_display
from .kgcnn import data, pipeline, train
from .seeding import stream

log = logging.getLogger("kgderain")

LOG_ENV = "KGDERAIN_LOG"
MODE_NAMES = {"full": "full", "zero-kernel": "zero_kernel", "derain-only": "derain_only"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------- config file


def read_config(path) -> dict[str, str]:
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _config_defaults(parser: argparse.ArgumentParser, values: dict[str, str]) -> dict:
    actions = {a.dest: a for a in parser._actions if a.option_strings and a.dest not in ("help", "config")}
    out = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for {parser.prog}")
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} needs a boolean, got {raw!r}")
            out[key] = raw.lower() in ("true", "1", "yes")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (TypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {sorted(action.choices)}")
        out[key] = value
    return out


# ---------------------------------------------------------------- subcommands


def _png_names(directory) -> list[Path]:
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG files in {directory}")
    return paths


def _rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img


def cmd_simulate(args) -> None:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for i, path in enumerate(_png_names(args.input)):
        params = rainsim.sample_rain_params(stream(args.seed, "params", i))
        sample = rainsim.synthesize_rainy(_rgb(imgcore.load_png(path)), params)
        imgcore.save_png(sample.rainy, out / f"{path.stem}_rainy.png")
        imgcore.save_png(sample.streaks, out / f"{path.stem}_streaks.png")
        (out / f"{path.stem}.txt").write_text(params.to_text(), encoding="utf-8")
        log.info("%s: theta=%.3f length=%.3f", path.name, params.theta, params.length)


def cmd_decompose(args) -> None:
    src = Path(args.image)
    out = Path(args.output) if args.output else src.parent
    out.mkdir(parents=True, exist_ok=True)
    structure, texture = split_texture(imgcore.load_png(src), GuidedFilterConfig(args.radius, args.epsilon))
    imgcore.save_png(structure, out / f"{src.stem}_structure.png")
    imgcore.save_png(texture_for_display(texture), out / f"{src.stem}_texture.png")


def cmd_fit_pca(args) -> None:
    family = kernelspace.sample_kernel_family(args.theta_steps, args.length_steps, args.size)
    basis = kernelspace.fit_pca(family, args.energy, args.max_dim)
    kernelspace.save_basis(basis, args.out)
    log.info("basis: %d kernels, t=%d, energy kept %.6f", len(family), basis.t, basis.energy_kept)
    print(basis.t)


def _train_config(args, mode: str) -> train.TrainConfig:
    return train.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
        patches=args.patches,
        mode=mode,
        depth=args.depth,
        filters=args.filters,
        rerain=args.rerain,
    )


def _dataset(args, pca):
    return data.build_training_set(args.data, args.patches, stream(args.seed, "crop"), pca)


def cmd_train(args) -> None:
    mode = MODE_NAMES[args.mode]
    cfg = _train_config(args, mode)
    if args.net == "param":
        net = train.train_param_net(_dataset(args, None), cfg)
    else:
        if args.pca is None:
            raise UsageError("training the derain net needs --pca")
        pca = kernelspace.load_basis(args.pca)
        net = train.train_derain_net(_dataset(args, pca), cfg, pca)
    net.save(args.out)
    log.info("%s net: loss %.6g -> %.6g, saved to %s", args.net, net.losses[0], net.losses[-1], args.out)


def _load_nets(args):
    derain_net = train.TrainedNet.load(args.derain)
    param_net = train.TrainedNet.load(args.param) if args.param else None
    pca = kernelspace.load_basis(args.pca) if args.pca else None
    return param_net, derain_net, pca


def cmd_derain(args) -> None:
    param_net, derain_net, pca = _load_nets(args)
    mode = MODE_NAMES[args.mode] if args.mode else derain_net.meta.get("mode", "full")
    rainy = _rgb(imgcore.load_png(args.input))
    derained, streaks = pipeline.derain_image(rainy, param_net, derain_net, pca, mode)
    imgcore.save_png(derained, args.output)
    if args.dump_streaks:
        imgcore.save_png(streaks, args.dump_streaks)


def _write_table(rows, header, out):
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
    finally:
        if out:
            fh.close()


def cmd_eval(args) -> None:
    reference = Path(args.reference)
    rows, reports = [], []
    for path in _png_names(args.derained):
        ref = reference / path.name
        if not ref.is_file():
            raise FileNotFoundError(f"no reference image {ref} for {path.name}")
        report = metrics.evaluate_protocol(path, ref)
        reports.append(report)
        rows.append([path.name] + report.row())
    rows.append(["average"] + metrics.average(reports).row())
    _write_table(rows, ["image"] + metrics.MetricReport.header(), args.out)


def heldout_pairs(clean_dir, seed: int):
    """``(name, clean, rainy)`` per clean PNG, rain drawn from the held-out stream."""
    pairs = []
    for i, path in enumerate(_png_names(clean_dir)):
        clean = _rgb(imgcore.load_png(path))
        params = rainsim.sample_rain_params(stream(seed, "heldout", i))
        pairs.append((path.name, clean, rainsim.synthesize_rainy(clean, params).rainy))
    return pairs


def cmd_ablate(args) -> None:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pca = kernelspace.load_basis(args.pca)
    dataset = _dataset(args, pca)
    if args.param:
        param_net = train.TrainedNet.load(args.param)
    else:
        param_net = train.train_param_net(dataset, _train_config(args, "full"))
        param_net.save(out / "param.kgcn")
    pairs = heldout_pairs(args.heldout, args.seed)
    rows = [["rainy"] + metrics.average(metrics.evaluate(r, c) for _, c, r in pairs).row()]

    def score(name, net, mode):
        reports = [
            metrics.evaluate(pipeline.derain_image(r, param_net, net, pca, mode)[0], c) for _, c, r in pairs
        ]
        rows.append([name] + metrics.average(reports).row())
        log.info("%s: held-out PSNR %.3f dB", name, rows[-1][1])

    for mode in train.MODES:
        net = train.train_derain_net(dataset, _train_config(args, mode), pca)
        net.save(out / f"derain_{mode}.kgcn")
        score(mode, net, mode)
        if mode == "full":
            # The trained full model with its kernel input zeroed at inference.
            score("full_zero_maps", net, "zero_kernel")
    _write_table(rows, ["model"] + metrics.MetricReport.header(), out / "ablation.csv")


# ---------------------------------------------------------------- parser


def _training_flags(p: argparse.ArgumentParser) -> None:
    defaults = train.TrainConfig()
    p.add_argument("--data", required=True, help="directory of clean PNG images")
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--batch", type=int, default=defaults.batch_size)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--patches", type=int, default=defaults.patches, help="synthetic training patches")
    p.add_argument("--depth", type=int, default=defaults.depth, help="derain net convolution count")
    p.add_argument("--filters", type=int, default=defaults.filters, help="derain net width")
    p.add_argument("--rerain", action="store_true", help="resample the rain on the same crops every epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgderain", description="Kernel-guided single-image rain streak removal.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file with defaults for this command's options")
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "Add synthetic rain to every PNG of a directory.")
    p.add_argument("--input", required=True, help="directory of clean PNGs")
    p.add_argument("--output", required=True, help="directory for rainy/streak PNGs and parameter sidecars")
    p.add_argument("--seed", type=int, default=0)

    p = add("decompose", cmd_decompose, "Split a PNG into structure and texture layers.")
    p.add_argument("image")
    p.add_argument("--output", help="output directory (default: next to the input)")
    p.add_argument("--radius", type=int, default=GuidedFilterConfig.radius)
    p.add_argument("--epsilon", type=float, default=GuidedFilterConfig.epsilon)

    p = add("fit-pca", cmd_fit_pca, "Fit the kernel basis and write it to a file.")
    p.add_argument("--out", required=True)
    p.add_argument("--theta-steps", type=int, default=91)
    p.add_argument("--length-steps", type=int, default=16)
    p.add_argument("--size", type=int, default=rainsim.KERNEL_SIZE)
    p.add_argument("--energy", type=float, default=0.99)
    p.add_argument("--max-dim", type=int, default=kernelspace.MAX_DIM)

    p = add("train", cmd_train, "Train the parameter net or the derain net on synthetic patches.")
    _training_flags(p)
    p.add_argument("--net", choices=("param", "derain"), default="derain")
    p.add_argument("--mode", choices=tuple(MODE_NAMES), default="full")
    p.add_argument("--pca", help="kernel basis file (derain net)")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = add("derain", cmd_derain, "Remove rain from one PNG.")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--param", help="parameter net checkpoint (full mode)")
    p.add_argument("--derain", required=True, help="derain net checkpoint")
    p.add_argument("--pca", help="kernel basis file")
    p.add_argument("--mode", choices=tuple(MODE_NAMES), help="default: the mode the net was trained in")
    p.add_argument("--dump-streaks", help="also write the predicted streak layer here")

    p = add("eval", cmd_eval, "Score derained PNGs against same-named references (CSV).")
    p.add_argument("--derained", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", help="CSV path (default: standard output)")

    p = add("ablate", cmd_ablate, "Train full, zero-kernel and derain-only nets on one dataset and compare.")
    _training_flags(p)
    p.add_argument("--pca", required=True)
    p.add_argument("--heldout", required=True, help="directory of clean PNGs for evaluation")
    p.add_argument("--param", help="reuse this parameter net instead of training one")
    p.add_argument("--out-dir", required=True)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    if known.config and rest and rest[0] in choices:
        sub = choices[rest[0]]
        values = _config_defaults(sub, read_config(known.config))
        for action in sub._actions:
            if action.dest in values:
                action.required = False
        sub.set_defaults(**values)
    return parser.parse_args(argv)


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("kgderain")
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level, logging.INFO))
    root.propagate = False


def main(argv=None) -> int:
    _setup_logging()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        log.info("config: %s", resolved)
        args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one exit status
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
