"""Command-line entry point.

Every option may also come from a TOML file passed with ``--config``:
top-level keys apply to all subcommands, a table named after the subcommand
(e.g. ``[train]``) overrides them, and command-line flags override both.
Keys use the flag name with dashes or underscores (``flip_prob`` or
``flip-prob``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluate, geometry, kernels, net, raster, synthetic

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("bsnseg")


class CliError(Exception):
    """A user-facing error; the message names the offending flag or file."""


# -- argument definitions -----------------------------------------------------

# dest -> (flag, type, default, help); shared between parser and TOML merge
TRAIN_OPTIONS = {
    "lr": ("--lr", float, 2.5e-4, "SGD learning rate"),
    "momentum": ("--momentum", float, 0.0, "SGD momentum"),
    "iterations": ("--iterations", int, 1000, "total training iterations"),
    "phase1_iterations": ("--phase1-iterations", int, None,
                          "iterations before the attribute head joins (default: half)"),
    "crop": ("--crop", int, 400, "square crop size"),
    "flip_prob": ("--flip-prob", float, 0.5, "horizontal flip probability"),
    "loss": ("--loss", str, "combined", "ik | gk | combined | baseline"),
    "width": ("--width", float, 10.0, "boundary band width in pixels"),
    "norm": ("--norm", str, "max", "soft-label normalisation: max | sum"),
    "gk_mode": ("--gk-mode", str, "literal", "global kernel mode: literal | intent"),
    "a": ("--a", float, 0.9, "global kernel lower weight"),
    "b": ("--b", float, 1.0, "global kernel upper weight"),
    "lam": ("--lam", float, 1.0, "attribute loss weight"),
}


class _Parser(argparse.ArgumentParser):
    """Argument errors become a single diagnostic line instead of usage plus message."""

    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def _add(p: argparse.ArgumentParser, dest: str, flag: str, type_, default, help_: str, **kw):
    p.add_argument(flag, dest=dest, type=type_, default=argparse.SUPPRESS,
                   help=f"{help_} (default: {default})", **kw)
    p.set_defaults(**{f"_default_{dest}": default})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bsnseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="TOML configuration file")
        _add(p, "seed", "--seed", int, 0, "random seed")
        return p

    p = command("contour", "extract the mask contour as a PNG mask")
    _add(p, "mask", "--mask", Path, None, "input mask PNG")
    _add(p, "out", "--out", Path, None, "output contour PNG")
    _add(p, "distance", "--distance", Path, None, "optional BSNT distance field output")

    p = command("indiv-kernel", "soft-label kernel for one mask")
    _add(p, "mask", "--mask", Path, None, "input mask PNG")
    for dest in ("width", "norm"):
        _add(p, dest, *TRAIN_OPTIONS[dest])
    _add(p, "out", "--out", Path, None, "output BSNT (3 channels: fg, boundary, bg)")
    _add(p, "png", "--png", Path, None, "optional PNG of the boundary channel")

    p = command("mean-mask", "average of a directory of masks")
    _add(p, "masks", "--masks", Path, None, "directory of mask PNGs")
    _add(p, "out", "--out", Path, None, "output BSNT")
    _add(p, "png", "--png", Path, None, "optional PNG visualisation")

    p = command("global-kernel", "position-prior loss weights")
    _add(p, "masks", "--masks", Path, None, "directory of mask PNGs")
    _add(p, "mean_mask", "--mean-mask", Path, None, "precomputed mean mask BSNT")
    _add(p, "a", *TRAIN_OPTIONS["a"])
    _add(p, "b", *TRAIN_OPTIONS["b"])
    _add(p, "mode", "--mode", str, "literal", "literal | intent")
    _add(p, "out", "--out", Path, None, "output BSNT")
    _add(p, "png", "--png", Path, None, "optional PNG visualisation")

    p = command("train", "train the toy network")
    _add(p, "images", "--images", Path, None, "directory of RGB PNGs")
    _add(p, "masks", "--masks", Path, None, "directory of mask PNGs (same file names)")
    _add(p, "attrs", "--attrs", Path, None, "CSV of name,label with label long|short")
    _add(p, "synthetic", "--synthetic", int, None, "train on N synthetic portraits instead")
    _add(p, "size", "--size", int, 64, "synthetic image size")
    for dest, spec in TRAIN_OPTIONS.items():
        _add(p, dest, *spec)
    _add(p, "out", "--out", Path, None, "output directory")

    p = command("eval", "mean IoU and boundary-band IoU report")
    _add(p, "pred", "--pred", Path, None, "directory of predicted mask PNGs")
    _add(p, "gt", "--gt", Path, None, "directory of ground-truth mask PNGs")
    _add(p, "checkpoint", "--checkpoint", Path, None,
         "predict from a training output directory instead of --pred")
    _add(p, "images", "--images", Path, None, "RGB PNGs to predict on (with --checkpoint)")
    _add(p, "band_width", "--band-width", float, 5.0, "band half-width for boundary IoU")
    _add(p, "class_mean", "--class-mean", int, 0, "1 = average fg and bg IoU")
    _add(p, "out", "--out", Path, None, "output CSV")

    p = command("trimap", "fg/unknown/bg trimap from a mask")
    _add(p, "mask", "--mask", Path, None, "input mask PNG")
    _add(p, "width", "--width", float, 10.0, "unknown band width in pixels")
    _add(p, "out", "--out", Path, None, "output trimap PNG")

    p = command("gradcheck", "finite-difference check of the analytic gradients")
    _add(p, "loss", "--loss", str, "combined", "ik | gk | combined | baseline")
    _add(p, "size", "--size", int, 6, "input side length (<= 8)")
    _add(p, "width", "--width", float, 2.0, "band width for the soft labels")
    _add(p, "norm", "--norm", str, "max", "max | sum")
    _add(p, "tol", "--tol", float, 1e-4, "pass threshold")
    _add(p, "out", "--out", Path, None, "optional CSV of per-parameter errors")
    return parser


PATH_KEYS = frozenset(("mask", "masks", "out", "images", "gt", "pred", "png", "attrs",
                       "checkpoint", "distance", "mean_mask"))


def _norm_key(key: str) -> str:
    return key.replace("-", "_")


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < TOML (top level, then [command] table) < flags."""
    ns = vars(args)
    opts = {k[len("_default_"):]: v for k, v in ns.items() if k.startswith("_default_")}
    config = ns.get("config")
    if config is not None:
        try:
            data = tomllib.loads(Path(config).read_text())
        except FileNotFoundError:
            raise CliError(f"--config: no such file {config}")
        except tomllib.TOMLDecodeError as exc:
            raise CliError(f"--config {config}: {exc}")
        shared = {_norm_key(k): v for k, v in data.items() if not isinstance(v, dict)}
        own = {_norm_key(k): v for k, v in data.get(args.command, {}).items()}
        for key in own:
            if key not in opts:
                raise CliError(f"--config {config}: unknown key {key!r} in [{args.command}]")
        # top-level keys are shared, so ones this subcommand lacks are skipped
        for key, value in {**shared, **own}.items():
            if key not in opts:
                continue
            opts[key] = Path(value) if key in PATH_KEYS else value
    for key, value in ns.items():
        if key in opts and not key.startswith("_"):
            opts[key] = value
    return opts


def _require(opts, *keys):
    for key in keys:
        if opts.get(key) is None:
            raise CliError(f"--{key.replace('_', '-')} is required")


def _check(cond: bool, flag: str, msg: str):
    if not cond:
        raise CliError(f"--{flag}: {msg}")


def _mask_files(directory: Path, flag: str) -> list[Path]:
    if not directory.is_dir():
        raise CliError(f"--{flag}: not a directory: {directory}")
    files = sorted(directory.glob("*.png"))
    if not files:
        raise CliError(f"--{flag}: no PNG files in {directory}")
    return files


def _load_mask(path: Path, flag: str) -> np.ndarray:
    try:
        return raster.load_mask(path)
    except (FileNotFoundError, raster.FormatError) as exc:
        raise CliError(f"--{flag}: {exc}")


# -- subcommands --------------------------------------------------------------


def cmd_contour(o):
    _require(o, "mask", "out")
    mask = _load_mask(o["mask"], "mask")
    contour = geometry.extract_contour(mask)
    raster.save_mask(contour.to_mask(), o["out"])
    if o["distance"] is not None:
        if contour.empty:
            raise CliError(f"--mask {o['mask']}: no contour, cannot write --distance")
        raster.write_tensor(geometry.distance_transform(contour), o["distance"])
    print(f"{len(contour)} contour pixels")


def cmd_indiv_kernel(o):
    _require(o, "mask", "out")
    _check(o["width"] >= 0, "width", "must be >= 0")
    _check(o["norm"] in kernels.NORM_MODES, "norm", f"must be one of {kernels.NORM_MODES}")
    mask = _load_mask(o["mask"], "mask")
    k = kernels.individual_kernel(mask, o["width"], o["norm"])
    raster.write_tensor(k, o["out"])
    if o["png"] is not None:
        raster.field_to_png(k[kernels.BDRY], o["png"])


def _mean_mask_from_dir(directory: Path) -> np.ndarray:
    masks = [_load_mask(f, "masks") for f in _mask_files(directory, "masks")]
    shapes = {m.shape for m in masks}
    if len(shapes) > 1:
        raise CliError(f"--masks {directory}: masks have differing sizes {sorted(shapes)}")
    return kernels.compute_mean_mask(masks)


def cmd_mean_mask(o):
    _require(o, "masks", "out")
    mm = _mean_mask_from_dir(o["masks"])
    raster.write_tensor(mm, o["out"])
    if o["png"] is not None:
        raster.field_to_png(mm, o["png"])


def cmd_global_kernel(o):
    _require(o, "out")
    _check(o["a"] >= 0, "a", "must be >= 0")
    _check(o["b"] >= o["a"], "b", "must be >= --a")
    _check(o["mode"] in kernels.GLOBAL_MODES, "mode", f"must be one of {kernels.GLOBAL_MODES}")
    if o["mean_mask"] is not None:
        try:
            mm = raster.read_tensor(o["mean_mask"])[0].astype(np.float64)
        except (OSError, raster.FormatError) as exc:
            raise CliError(f"--mean-mask: {exc}")
    elif o["masks"] is not None:
        mm = _mean_mask_from_dir(o["masks"])
    else:
        raise CliError("--masks or --mean-mask is required")
    g = kernels.global_kernel(mm, o["a"], o["b"], o["mode"])
    raster.write_tensor(g, o["out"])
    if o["png"] is not None:
        raster.field_to_png(g, o["png"])


def _parse_attr(value: str, path: Path) -> int:
    v = value.strip().lower()
    if v in ("long", "0"):
        return synthetic.LONG_HAIR
    if v in ("short", "1"):
        return synthetic.SHORT_HAIR
    raise CliError(f"--attrs {path}: bad label {value!r} (expected long or short)")


def _load_dataset(o) -> list:
    if o["synthetic"] is not None:
        _check(o["synthetic"] >= 1, "synthetic", "must be >= 1")
        _check(o["size"] >= 3, "size", "must be >= 3")
        samples, _ = synthetic.portrait_suite(o["synthetic"], o["size"], o["seed"])
        return samples
    _require(o, "images", "masks")
    attrs = {}
    if o["attrs"] is not None:
        try:
            with open(o["attrs"], newline="") as fh:
                for row in csv.reader(fh):
                    if row and row[0] != "name":
                        attrs[row[0]] = _parse_attr(row[1], o["attrs"])
        except FileNotFoundError:
            raise CliError(f"--attrs: no such file {o['attrs']}")
    samples = []
    for mpath in _mask_files(o["masks"], "masks"):
        ipath = o["images"] / mpath.name
        if not ipath.is_file():
            raise CliError(f"--images: missing {ipath} for mask {mpath}")
        try:
            image = raster.load_rgb(ipath)
        except raster.FormatError as exc:
            raise CliError(f"--images: {exc}")
        samples.append(net.Sample(image, _load_mask(mpath, "masks"),
                                  attrs.get(mpath.stem, attrs.get(mpath.name))))
    return samples


def _train_config(o) -> net.TrainConfig:
    _check(o["lr"] > 0, "lr", "must be > 0")
    _check(0 <= o["momentum"] < 1, "momentum", "must be in [0, 1)")
    _check(o["iterations"] >= 1, "iterations", "must be >= 1")
    _check(o["phase1_iterations"] is None or 0 <= o["phase1_iterations"] <= o["iterations"],
           "phase1-iterations", "must lie in [0, --iterations]")
    _check(0 <= o["flip_prob"] <= 1, "flip-prob", "must be in [0, 1]")
    _check(o["loss"] in net.LOSS_MODES, "loss", f"must be one of {net.LOSS_MODES}")
    _check(o["width"] >= 0, "width", "must be >= 0")
    _check(o["norm"] in kernels.NORM_MODES, "norm", f"must be one of {kernels.NORM_MODES}")
    _check(o["gk_mode"] in kernels.GLOBAL_MODES, "gk-mode",
           f"must be one of {kernels.GLOBAL_MODES}")
    _check(o["a"] >= 0, "a", "must be >= 0")
    _check(o["b"] >= o["a"], "b", "must be >= --a")
    return net.TrainConfig(**{k: o[k] for k in TRAIN_OPTIONS}, seed=o["seed"])


def cmd_train(o):
    _require(o, "out")
    config = _train_config(o)
    samples = _load_dataset(o)
    h, w = samples[0].mask.shape
    _check(1 <= config.crop <= min(h, w), "crop", f"must be in [1, {min(h, w)}] for {h}x{w} images")
    mean_mask = kernels.compute_mean_mask([s.mask for s in samples])
    trained, rows = net.train(samples, config, mean_mask)
    out = Path(o["out"])
    net.save_checkpoint(trained, out / "checkpoint")
    raster.write_tensor(mean_mask, out / "mean_mask.bsnt")
    net.write_loss_log(rows, out / "loss.csv")
    preds = [net.predict_mask(trained, geometry.assemble_input(s.image, mean_mask))
             for s in samples]
    train_iou = evaluate.mean_iou(zip(preds, (s.mask for s in samples)))
    print(f"final loss {rows[-1].total:.6f}  training mean IoU {train_iou:.4f}")


def cmd_eval(o):
    _require(o, "gt", "out")
    _check(o["band_width"] >= 1, "band-width", "must be >= 1")
    gt_files = _mask_files(o["gt"], "gt")
    if o["checkpoint"] is not None:
        _require(o, "images")
        ckpt = Path(o["checkpoint"])
        try:
            model = net.load_checkpoint(ckpt / "checkpoint")
            mean_mask = raster.read_tensor(ckpt / "mean_mask.bsnt")[0].astype(np.float64)
        except (OSError, raster.FormatError) as exc:
            raise CliError(f"--checkpoint: {exc}")

        def predicted(name):
            image = raster.load_rgb(o["images"] / name)
            return net.predict_mask(model, geometry.assemble_input(image, mean_mask))
    else:
        _require(o, "pred")

        def predicted(name):
            return _load_mask(o["pred"] / name, "pred")

    triples = []
    for gpath in gt_files:
        gt = _load_mask(gpath, "gt")
        try:
            pred = predicted(gpath.name)
        except FileNotFoundError as exc:
            raise CliError(f"--pred/--images: {exc}")
        if pred.shape != gt.shape:
            raise CliError(f"--gt {gpath}: size {gt.shape} differs from prediction {pred.shape}")
        triples.append((gpath.stem, pred, gt))
    rows = [(name, evaluate.iou(p, g, bool(o["class_mean"])),
             evaluate.boundary_band_iou(p, g, o["band_width"])) for name, p, g in triples]
    evaluate.write_report(rows, o["out"])
    print(f"mean IoU {np.mean([r[1] for r in rows]):.4f}  "
          f"mean band IoU {np.mean([r[2] for r in rows]):.4f}  ({len(rows)} images)")


def cmd_trimap(o):
    _require(o, "mask", "out")
    _check(o["width"] >= 0, "width", "must be >= 0")
    evaluate.save_trimap(evaluate.make_trimap(_load_mask(o["mask"], "mask"), o["width"]), o["out"])


def cmd_gradcheck(o):
    _check(o["loss"] in net.LOSS_MODES, "loss", f"must be one of {net.LOSS_MODES}")
    _check(2 <= o["size"] <= 8, "size", "must be in [2, 8]")
    _check(o["norm"] in kernels.NORM_MODES, "norm", f"must be one of {kernels.NORM_MODES}")
    rng = np.random.default_rng(o["seed"])
    size = o["size"]
    model = net.init_net(rng, dtype=np.float64)
    mask = rng.random((size, size)) < 0.5
    x = geometry.assemble_input(rng.random((3, size, size)), rng.random((size, size)),
                                dtype=np.float64)
    attr = int(rng.integers(2))
    report = net.gradient_check(model, x, mask, attr, o["loss"], width=o["width"], norm=o["norm"])
    if o["out"] is not None:
        with open(o["out"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("tensor", "max_rel_error"))
            w.writerow(("logits", repr(report.logit_error)))
            for name, err in report.param_errors.items():
                w.writerow((name, repr(err)))
    print(f"max relative error {report.max_error:.3e}")
    return 0 if report.max_error < o["tol"] else 1


COMMANDS = {
    "contour": cmd_contour,
    "indiv-kernel": cmd_indiv_kernel,
    "mean-mask": cmd_mean_mask,
    "global-kernel": cmd_global_kernel,
    "train": cmd_train,
    "eval": cmd_eval,
    "trimap": cmd_trimap,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        opts = resolve(args)
        status = COMMANDS[args.command](opts)
    except CliError as exc:
        print(f"bsnseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"bsnseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
