"""``liseg`` command line: synth, train, eval, verify, reproduce.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification failure.
"""
from __future__ import annotations

import argparse
import contextlib
import errno
import json
import logging
import os
import sys

from .config import ConfigError, Option, optional, parse_bool, resolve, tuple_of, write_resolved

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
log = logging.getLogger("liseg")

MODALITY_ALIASES = {"bright": "GED4-like", "ged4": "GED4-like", "GED4-like": "GED4-like",
                    "dark": "T2-like", "t2": "T2-like", "T2-like": "T2-like"}


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- options

SYNTH_OPTIONS = [
    Option("out", str, "data", "output directory"),
    Option("seed", int, 0, "dataset seed"),
    Option("labeled", int, 3, "labeled bright training cases"),
    Option("unlabeled_bright", int, 22, "unlabeled bright training cases"),
    Option("unlabeled_dark", int, 11, "unlabeled dark training cases"),
    Option("val", int, 10, "bright validation cases"),
    Option("test", int, 10, "bright test cases"),
    Option("val_dark", int, 0, "dark validation cases"),
    Option("test_dark", int, 0, "dark test cases"),
    Option("grid", tuple_of(int, 3), (32, 32, 32), "phantom grid D,H,W"),
    Option("spacing", tuple_of(float, 3), (1.0, 1.0, 1.0), "voxel spacing in mm"),
    Option("semi_axes", tuple_of(float, 2), (6.0, 11.0), "liver semi-axis range in mm (all axes)"),
    Option("liver_intensity", tuple_of(float, 2), (0.6, 1.0), "liver intensity range"),
    Option("background_intensity", tuple_of(float, 2), (0.0, 0.2), "background intensity range"),
    Option("lesion_count", tuple_of(int, 2), (0, 3), "lesions per phantom (inclusive range)"),
    Option("lesion_contrast", float, 0.6, "fraction of the liver/background gap removed in lesions"),
    Option("distractor_count", tuple_of(int, 2), (0, 2), "bright non-liver blobs per phantom"),
    Option("distractor_intensity", float, 0.9, "distractor intensity relative to the liver"),
    Option("noise_sigma", float, 0.1, "additive Gaussian noise"),
    Option("blur_sigma", float, 0.7, "Gaussian blur in voxels"),
]

TRAIN_OPTIONS = [
    Option("manifest", str, None, "dataset manifest.json"),
    Option("run_dir", str, "run", "run directory"),
    Option("mode", str, "cps", "training mode", ("cps", "supervised")),
    Option("scale", str, "toy", "network scale", ("toy", "S")),
    Option("seed", int, 0, "master seed"),
    Option("lr", float, 1e-3, "Adam learning rate"),
    Option("batch_size", int, 4, "patches per step (half labeled)"),
    Option("epochs", int, 36, "number of epochs"),
    Option("steps_per_epoch", int, 250, "optimizer steps per epoch"),
    Option("lambda_max", float, 1.0, "final CPS weight"),
    Option("lambda_rampup_epochs", optional(float), None, "ramp length (default 20%% of epochs)"),
    Option("patch", tuple_of(int, 3), (32, 32, 32), "training patch size"),
    Option("labeled_cps", parse_bool, True, "apply the cross term to labeled patches too"),
    Option("foreground_prob", float, 0.5, "probability of a foreground-centred patch"),
    Option("mirror", parse_bool, True, "random axis flips"),
    Option("spatial", parse_bool, True, "random rotation/scaling"),
    Option("unlabeled_modalities", optional(tuple_of(str)), None, "restrict unlabeled pool by modality"),
    Option("unlabeled_manifest", optional(str), None, "separate manifest for the unlabeled pool"),
    Option("validate", parse_bool, True, "evaluate the val split after every epoch"),
    Option("ensemble", parse_bool, False, "validate the two-network mean softmax"),
    Option("stop_after_epochs", optional(int), None, "stop early after this many epochs (resumable)"),
]

EVAL_OPTIONS = [
    Option("checkpoint", tuple_of(str), None, "checkpoint path(s); several form a mean-softmax ensemble"),
    Option("manifest", str, None, "dataset manifest.json"),
    Option("split", str, "test", "split to evaluate", ("train", "val", "test")),
    Option("modality", optional(str), None, "restrict to GED4-like (bright) or T2-like (dark) cases"),
    Option("run_dir", str, "eval", "output directory"),
    Option("patch", tuple_of(int, 3), (32, 32, 32), "sliding-window patch"),
    Option("hd95", parse_bool, False, "report HD95 instead of the full Hausdorff distance"),
    Option("mirror", parse_bool, False, "test-time mirroring"),
    Option("csv", parse_bool, False, "also write a CSV"),
]

REPRODUCE_OPTIONS = [
    Option("run_dir", str, "reproduce", "working directory"),
    Option("seeds", tuple_of(int), (0, 1, 2), "seeds"),
    Option("steps", int, 0, "training steps per run (0: experiment default)"),
]

COMMAND_OPTIONS = {"synth": SYNTH_OPTIONS, "train": TRAIN_OPTIONS, "eval": EVAL_OPTIONS, "reproduce": REPRODUCE_OPTIONS}


def _add_options(sub, options, positional=()):
    for opt in options:
        if opt.key in positional:
            continue
        flag = "--" + opt.key.replace("_", "-")
        kw = {"dest": opt.key, "default": None, "help": opt.help}
        if opt.choices:
            kw["choices"] = opt.choices
        if opt.parse is parse_bool:
            sub.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif opt.key == "checkpoint":
            sub.add_argument(flag, action="append", **kw)
        else:
            sub.add_argument(flag, type=str, **kw)
    sub.add_argument("--config", help="key = value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="liseg", description="Semi-supervised liver segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_options(subs.add_parser("synth", help="generate a phantom dataset"), SYNTH_OPTIONS)
    train = subs.add_parser("train", help="train supervised or CPS models")
    _add_options(train, TRAIN_OPTIONS)
    train.add_argument("--resume", action="store_true", help="continue from the run's last checkpoint")
    _add_options(subs.add_parser("eval", help="evaluate checkpoints on a manifest split"), EVAL_OPTIONS)
    verify = subs.add_parser("verify", help="run self-checks")
    verify.add_argument("suites", nargs="*", default=["all"], choices=["all", "gradcheck", "params", "metrics"])
    rep = subs.add_parser("reproduce", help="run a bundled experiment")
    rep.add_argument("experiment", choices=["label-efficiency", "overfit"])
    _add_options(rep, REPRODUCE_OPTIONS)
    return parser


def _resolved(args, base_path=None) -> dict:
    options = COMMAND_OPTIONS[args.command]
    flags = {o.key: getattr(args, o.key, None) for o in options}
    if "checkpoint" in flags and flags["checkpoint"] is not None:
        flags["checkpoint"] = tuple(flags["checkpoint"])
    try:
        return resolve(options, args.command, args.config, flags, base_path=base_path)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None


# ---------------------------------------------------------------- run directory lock


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError as exc:
        return exc.errno == errno.EPERM
    return True


@contextlib.contextmanager
def run_lock(run_dir):
    """Exclusive per-run-directory lock; a stale lock from a dead process is taken over."""
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, ".lock")
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                with open(path) as fh:
                    pid = int(fh.read().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _pid_alive(pid):
                raise RuntimeFailure(f"{run_dir} is locked by running process {pid}") from None
            os.unlink(path)
    else:
        raise RuntimeFailure(f"could not acquire {path}")
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(path)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .data import PhantomSpec, build_manifest

    cfg = _resolved(args)
    try:
        spec = PhantomSpec(
            grid=cfg["grid"], spacing=cfg["spacing"], semi_axes_range=(tuple(cfg["semi_axes"]),) * 3,
            liver_intensity=cfg["liver_intensity"], background_intensity=cfg["background_intensity"],
            lesion_count=cfg["lesion_count"], lesion_contrast=cfg["lesion_contrast"],
            distractor_count=cfg["distractor_count"], distractor_intensity=cfg["distractor_intensity"],
            noise_sigma=cfg["noise_sigma"], blur_sigma=cfg["blur_sigma"],
        )
        counts = {k: cfg[k] for k in ("labeled", "unlabeled_bright", "unlabeled_dark", "val", "test", "val_dark", "test_dark")}
        if any(v < 0 for v in counts.values()):
            raise ValueError(f"case counts must be non-negative: {counts}")
    except ValueError as exc:
        raise UsageError(f"invalid phantom spec: {exc}") from None
    with run_lock(cfg["out"]):
        write_resolved(os.path.join(cfg["out"], "config.resolved"), "synth", cfg, SYNTH_OPTIONS)
        manifest = build_manifest(cfg["out"], counts, {"bright": spec}, seed=cfg["seed"])
    print(f"wrote {len(manifest.cases)} cases to {os.path.join(cfg['out'], 'manifest.json')} (sha256 {manifest.digest()[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, TrainingDiverged, train_loop

    run_dir = args.run_dir or os.environ.get("LISEG_RUN_DIR") or "run"
    base = os.path.join(run_dir, "config.resolved") if args.resume and not args.config else None
    if base and not os.path.exists(base):
        base = None
    cfg = _resolved(args, base_path=base)
    if not cfg["manifest"]:
        raise UsageError("train needs --manifest (or manifest = ... in the config)")
    try:
        tc = TrainConfig(
            lr=cfg["lr"], batch_size=cfg["batch_size"], max_epochs=cfg["epochs"], steps_per_epoch=cfg["steps_per_epoch"],
            lambda_max=cfg["lambda_max"], lambda_rampup_epochs=cfg["lambda_rampup_epochs"], patch=cfg["patch"],
            seed=cfg["seed"], mode=cfg["mode"], scale=cfg["scale"], labeled_cps=cfg["labeled_cps"],
            foreground_prob=cfg["foreground_prob"], mirror=cfg["mirror"], spatial=cfg["spatial"],
            unlabeled_modalities=cfg["unlabeled_modalities"], validate=cfg["validate"], ensemble=cfg["ensemble"],
            manifest=cfg["manifest"], unlabeled_manifest=cfg["unlabeled_manifest"],
            stop_after_epochs=cfg["stop_after_epochs"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with run_lock(cfg["run_dir"]):
        write_resolved(os.path.join(cfg["run_dir"], "config.resolved"), "train", cfg, TRAIN_OPTIONS)
        try:
            result = train_loop(tc, cfg["run_dir"], resume=args.resume)
        except TrainingDiverged as exc:
            raise RuntimeFailure(f"training diverged: {exc}") from None
    state = result.state
    print(f"trained to epoch {state.epoch}/{tc.max_epochs}, step {state.step}; loss log {result.loss_log}")
    if result.val_reports:
        last = result.val_reports[-1]
        hd = "n/a" if last["mean_hd"] is None else f"{last['mean_hd']:.3f} mm"
        print(f"final validation: DSC {last['mean_dsc']:.4f}  HD {hd}")
    elif tc.validate:
        print("no validation cases in the manifest; skipped validation")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import Manifest
    from .metrics import evaluate_dataset

    cfg = _resolved(args)
    if not cfg["checkpoint"]:
        raise UsageError("eval needs --checkpoint")
    if not cfg["manifest"]:
        raise UsageError("eval needs --manifest")
    modality = cfg["modality"]
    if modality is not None:
        if modality not in MODALITY_ALIASES:
            raise UsageError(f"unknown modality {modality!r}; use one of {sorted(MODALITY_ALIASES)}")
        modality = MODALITY_ALIASES[modality]
    missing = [c for c in cfg["checkpoint"] if not os.path.exists(c)]
    if missing:
        raise RuntimeFailure(f"missing checkpoint(s): {', '.join(missing)}")
    nets = [load_checkpoint(c) for c in cfg["checkpoint"]]
    manifest = Manifest.load(cfg["manifest"])
    with run_lock(cfg["run_dir"]):
        write_resolved(os.path.join(cfg["run_dir"], "config.resolved"), "eval", cfg, EVAL_OPTIONS)
        report = evaluate_dataset(nets, manifest, cfg["split"], modality, cfg["patch"],
                                  95 if cfg["hd95"] else None, cfg["mirror"],
                                  {"checkpoints": [os.path.abspath(c) for c in cfg["checkpoint"]]})
        reports = os.path.join(cfg["run_dir"], "reports")
        os.makedirs(reports, exist_ok=True)
        stem = cfg["split"] + ("" if modality is None else f"_{modality}")
        report.save(os.path.join(reports, f"{stem}.json"))
        if cfg["csv"]:
            report.save_csv(os.path.join(reports, f"{stem}.csv"))
    print("| method | DSC | HD |")
    print("|---|---|---|")
    print(report.table_row(os.path.basename(cfg["checkpoint"][0]) if len(nets) == 1 else f"ensemble of {len(nets)}"))
    print(f"report: {os.path.join(reports, stem + '.json')}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES

    names = list(SUITES) if "all" in args.suites else list(dict.fromkeys(args.suites))
    failed = []
    for name in names:
        res = SUITES[name]()
        print(f"== {name} ({res.seconds:.1f}s): {'PASS' if res.passed else 'FAIL'}")
        print(res.text)
        failed += [f"{name}: {c.name} ({c.detail})" for c in res.failures]
    if failed:
        print("failed checks:\n  " + "\n  ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_reproduce(args) -> int:
    from . import experiments

    cfg = _resolved(args)
    with run_lock(cfg["run_dir"]):
        write_resolved(os.path.join(cfg["run_dir"], "config.resolved"), "reproduce", cfg, REPRODUCE_OPTIONS)
        kw = {"steps": cfg["steps"]} if cfg["steps"] else {}
        if args.experiment == "label-efficiency":
            res = experiments.label_efficiency(cfg["run_dir"], seeds=cfg["seeds"], **kw)
        else:
            res = experiments.overfit(seed=cfg["seeds"][0], **kw)
        with open(os.path.join(cfg["run_dir"], f"{args.experiment}.json"), "w") as fh:
            json.dump(res, fh, indent=2)
    print(experiments.summarize(args.experiment, res))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify, "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"liseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeFailure, OSError, ValueError) as exc:
        print(f"liseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print(f"liseg {args.command}: interrupted", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
