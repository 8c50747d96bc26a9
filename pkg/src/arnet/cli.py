"""Command-line driver: ``arnet {train,infer,eval,synth,selfcheck}``.

Options may also come from a flat ``key = value`` file passed with
``--config``; explicit command-line flags take precedence over it.
Exit codes: 0 success, 1 usage/config error, 2 partial data failure,
3 selfcheck failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SELFCHECK = 0, 1, 2, 3
ABLATIONS = ("no_fap", "no_hga", "no_re", "no_be", "no_mse", "no_ciim", "se_instead_of_fap")
DESK = {"size": 64, "batch": 2}
FULL = {"size": 416, "batch": 8}

log = logging.getLogger("arnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _coerce(value, like):
    if isinstance(value, str) and like is not None and not isinstance(like, str):
        if isinstance(like, bool):
            return value.lower() in ("1", "true", "yes", "on")
        return type(like)(value)
    return value


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags (flags use SUPPRESS so only given ones appear)."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            if k not in cfg:
                raise UsageError(f"{args.config}: unknown key {k!r}")
            try:
                cfg[k] = _coerce(v, defaults[k])
            except ValueError as exc:
                raise UsageError(f"{args.config}: bad value for {k}: {v!r}") from exc
    if getattr(args, "desk", False) or cfg.get("desk") is True:
        for k, v in DESK.items():
            cfg[k] = v
    for k, v in vars(args).items():
        if k in cfg and k not in ("config",):
            cfg[k] = v
    return cfg


def config_hash(cfg: dict) -> str:
    text = ";".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def make_run_dir(root, cfg: dict) -> Path:
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    base = Path(root) / f"{stamp}-{config_hash(cfg)}"
    run, k = base, 1
    while run.exists():
        run = base.with_name(f"{base.name}.{k}")
        k += 1
    run.mkdir(parents=True)
    return run


def write_manifest(run: Path, command: str, cfg: dict):
    lines = [f"command = {command}", f"code_version = {__version__}"]
    lines += [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    (run / "manifest.txt").write_text("\n".join(lines) + "\n")


def _ablation_flags(p):
    g = p.add_argument_group("architecture")
    for name in ABLATIONS:
        g.add_argument("--" + name.replace("_", "-"), dest=name, action="store_true", default=argparse.SUPPRESS)
    g.add_argument("--hga-mode", dest="hga_mode", choices=("elementwise", "dot_attention"), default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = _Parser(prog="arnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"arnet {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    t.add_argument("--config", help="key = value file (flags override it)")
    t.add_argument("--data", default=S, help="dataset root with image/ and mask/")
    t.add_argument("--desk", action="store_true", default=S, help="desk defaults: size 64, batch 2")
    t.add_argument("--size", type=int, default=S)
    t.add_argument("--lr", type=float, default=S)
    t.add_argument("--batch", type=int, default=S)
    t.add_argument("--epochs", type=int, default=S)
    t.add_argument("--decay-epochs", dest="decay_epochs", type=int, default=S)
    t.add_argument("--seed", type=int, default=S)
    t.add_argument("--max-steps", dest="max_steps", type=int, default=S)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=S)
    t.add_argument("--float32", dest="float32", action="store_true", default=S)
    t.add_argument("--runs-dir", dest="runs_dir", default=S)
    _ablation_flags(t)

    i = sub.add_parser("infer", parents=[common], help="write predicted masks for images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("images", nargs="+", help="image files or directories")
    i.add_argument("--out", help="output directory (default: a new run directory)")
    i.add_argument("--size", type=int, help="network input size (default: training size from the checkpoint)")
    i.add_argument("--dump-priors", dest="dump_priors", action="store_true", help="also write boundary and region maps")
    i.add_argument("--runs-dir", dest="runs_dir", default="runs")

    e = sub.add_parser("eval", parents=[common], help="score prediction masks against ground truth")
    e.add_argument("pred_dir")
    e.add_argument("gt_dir")
    e.add_argument("--dataset", help="name shown in the table (default: gt directory name)")
    e.add_argument("--e-variant", dest="e_variant", choices=("mean", "max", "adaptive"), default="mean")
    e.add_argument("--n-thresholds", dest="n_thresholds", type=int, default=256)
    e.add_argument("--s-alpha", dest="s_alpha", type=float, default=0.5)
    e.add_argument("--binarize-at", dest="binarize_at", type=float, default=0.5)
    e.add_argument("--csv", help="CSV path (default: <run dir>/metrics.csv)")
    e.add_argument("--runs-dir", dest="runs_dir", default="runs")

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic low-contrast dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--delta", type=float, default=0.08)
    s.add_argument("--grain", type=int, default=3)
    s.add_argument("--shape", choices=("ellipse", "blob"), default="ellipse")
    s.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("selfcheck", parents=[common], help="run gradient, shape, sobel and metric suites")
    c.add_argument("--quick", action="store_true", help="skip the full-network and large-size checks")
    c.add_argument("--inject-fault", dest="inject_fault", choices=("sobel",), help=argparse.SUPPRESS)
    return p


# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = dict(data=None, size=FULL["size"], lr=5e-5, batch=FULL["batch"], epochs=150, decay_epochs=100,
                      seed=0, max_steps=0, checkpoint_every=0, float32=False, runs_dir="runs", desk=False,
                      hga_mode="elementwise", **{a: False for a in ABLATIONS})


def cmd_train(args) -> int:
    from .data import Dataset, DatasetError
    from .network import ModelConfig
    from .train import TrainConfig, train

    cfg = resolve(args, TRAIN_DEFAULTS)
    if not cfg["data"]:
        raise UsageError("train: --data is required (flag or config file)")
    try:
        tcfg = TrainConfig(lr=cfg["lr"], batch=cfg["batch"], epochs=cfg["epochs"], decay_epochs=cfg["decay_epochs"],
                           seed=cfg["seed"], size=cfg["size"], max_steps=cfg["max_steps"] or None,
                           checkpoint_every=cfg["checkpoint_every"], dtype="float32" if cfg["float32"] else "float64")
        mcfg = ModelConfig(hga_mode=cfg["hga_mode"], **{a: bool(cfg[a]) for a in ABLATIONS})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg["size"] % 32 or cfg["size"] < 32:
        raise UsageError(f"--size must be a positive multiple of 32, got {cfg['size']}")
    try:
        ds = Dataset(cfg["data"], size=cfg["size"])
    except (DatasetError, OSError) as exc:
        print(f"arnet train: {exc}", file=sys.stderr)
        return EXIT_DATA
    cfg_for_hash = {k: v for k, v in cfg.items() if k != "runs_dir"}
    run = make_run_dir(cfg["runs_dir"], cfg_for_hash)
    write_manifest(run, "train", cfg)

    def report(row):
        epoch, step, total, *_ = row
        log.info("epoch %d step %d loss %.6f", epoch, step, total)

    res = train(ds, tcfg, mcfg, run, on_step=report, extra_manifest={"data": cfg["data"]})
    print(f"run directory: {run}")
    if res.rows:
        print(f"steps: {len(res.rows)}  initial loss: {res.losses[0]:.6f}  final loss: {res.losses[-1]:.6f}")
    else:
        print("no training steps; checkpoint holds the initialization")
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .data import list_images, load_image, save_mask
    from .serialize import FormatError
    from .tensor import resize_array
    from .train import load_model, predict

    try:
        model, manifest = load_model(args.checkpoint)
    except (OSError, FormatError, KeyError) as exc:
        print(f"arnet infer: cannot load checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return EXIT_DATA
    trained = manifest.get("train.size", "None")
    size = args.size or (int(trained) if trained != "None" else FULL["size"])
    if size % 32 or size < 32:
        raise UsageError(f"--size must be a positive multiple of 32, got {size}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = make_run_dir(args.runs_dir, {"checkpoint": args.checkpoint, "size": size})
    write_manifest(out, "infer", {"checkpoint": args.checkpoint, "size": size, "dump_priors": args.dump_priors,
                                  "config_hash": manifest.get("config_hash", "")})
    failures = 0
    paths = list_images(args.images)
    for path in paths:
        try:
            img = load_image(path)
            h, w = img.shape[1:]
            x = np.stack([resize_array(c, (size, size)) for c in img])[None]
            maps = predict(model, x)
            for key, arr in maps.items():
                if key != "mask" and not args.dump_priors:
                    continue
                a = np.clip(resize_array(arr[0, 0], (h, w)), 0, 1)
                if key == "mask":
                    save_mask(out / f"{path.stem}.pgm", a)
                else:
                    # priors go to a subdirectory so the mask folder stays evaluable
                    (out / "priors").mkdir(exist_ok=True)
                    save_mask(out / "priors" / f"{path.stem}_{key}.pgm", a)
        except Exception as exc:  # per-file: report and continue
            failures += 1
            print(f"arnet infer: {path}: {exc}", file=sys.stderr)
    print(f"wrote {len(paths) - failures} prediction(s) to {out}")
    return EXIT_DATA if failures else EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import MetricConfig, NoPairsError, evaluate_dir

    try:
        mcfg = MetricConfig(s_alpha=args.s_alpha, e_variant=args.e_variant, n_thresholds=args.n_thresholds,
                            binarize_at=args.binarize_at)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for d in (args.pred_dir, args.gt_dir):
        if not Path(d).is_dir():
            print(f"arnet eval: not a directory: {d}", file=sys.stderr)
            return EXIT_DATA
    try:
        report = evaluate_dir(args.pred_dir, args.gt_dir, mcfg, args.dataset)
    except NoPairsError as exc:
        print(f"arnet eval: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.csv:
        csv_path = Path(args.csv)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
    else:
        run = make_run_dir(args.runs_dir, {"pred": args.pred_dir, "gt": args.gt_dir, **asdict(mcfg)})
        write_manifest(run, "eval", {"pred_dir": args.pred_dir, "gt_dir": args.gt_dir, **asdict(mcfg)})
        csv_path = run / "metrics.csv"
        (run / "table.txt").write_text(report.table() + "\n")
    report.write_csv(csv_path)
    print(report.table())
    print(f"per-image CSV: {csv_path}")
    for err in report.errors:
        print(f"arnet eval: {err}", file=sys.stderr)
    return EXIT_DATA if report.errors else EXIT_OK


def cmd_synth(args) -> int:
    from .data import SynthConfig, synthesize

    try:
        cfg = SynthConfig(count=args.count, size=args.size, delta=args.delta, grain=args.grain,
                          shape=args.shape, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    stems = synthesize(cfg, args.out)
    print(f"wrote {len(stems)} samples to {args.out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from . import selfcheck

    ok = selfcheck.run(full=not args.quick, fault=args.inject_fault)
    return EXIT_OK if ok else EXIT_SELFCHECK


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "synth": cmd_synth, "selfcheck": cmd_selfcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"arnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
