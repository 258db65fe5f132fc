"""Command-line interface: ``dmelab <command> [flags]``.

Every flag can also come from a JSON object given with ``--options FILE``
(keys are flag names with dashes or underscores); flags on the command line
win. Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import load_manifest, load_splits, split_by_patient, write_splits
from .evaluation import ScoredCases
from .experiments import (
    EXPERIMENT_IDS,
    ExperimentConfig,
    RunRecord,
    TrainedModel,
    compare_hashes,
    config_hash,
    derive_seed,
    emit_report,
    evaluate_scores,
    evaluate_secondary,
    fit,
    load_eye_data,
    run_suite,
    sha256_file,
    sweep_crop,
    sweep_fraction,
    sweep_threshold,
    verify_suite,
    _augment_from_dict,
)
from .imageops import AugmentConfig, CropSpec
from .model import NetworkConfig, TrainConfig, load_checkpoint, save_checkpoint
from .synthgen import SynthConfig, generate_dataset

logger = logging.getLogger("dmelab")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _floats(value):
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    try:
        return [float(v) for v in str(value).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from None


def _words(value):
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _read_json(path) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return data


def _net(path) -> NetworkConfig:
    return NetworkConfig.from_dict(_read_json(path)) if path else NetworkConfig()


def _train_cfg(path) -> TrainConfig:
    return TrainConfig.from_dict(_read_json(path)) if path else TrainConfig()


def _augment(path):
    if path == "none":
        return None
    return _augment_from_dict(_read_json(path)) if path else AugmentConfig()


def _data_flags(p, ckpt=False, splits=True):
    p.add_argument("--manifest", required=True, help="manifest CSV")
    if splits:
        p.add_argument("--splits", required=True, help="patient split CSV")
    if ckpt:
        p.add_argument("--ckpt", required=True, help="checkpoint written by `train`")
    p.add_argument("--rule", choices=("cpt", "cst"), default="cpt", help="thickness field for the ci-DME label")
    p.add_argument("--cut", type=float, default=None, help="ci-DME threshold in micrometers (default 250 cpt / 300 cst)")


def _stats_flags(p):
    p.add_argument("--replicates", type=int, default=2000, help="bootstrap replicates")
    p.add_argument("--permutations", type=int, default=2000, help="permutation-test draws")


def _train_flags(p):
    p.add_argument("--net", help="NetworkConfig JSON")
    p.add_argument("--train", help="TrainConfig JSON")
    p.add_argument("--augment", help="AugmentConfig JSON, or 'none' to disable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dmelab", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--options", help="JSON file with flag values (flags win)")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = command("generate", "write a synthetic dataset")
    p.add_argument("--config", help="SynthConfig JSON (defaults when omitted)")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--secondary", action="store_true", help="use the CST-labelled low-prevalence variant")
    p.add_argument("--out", required=True)

    p = command("split", "patient-level train/tune/validation split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fractions", type=_floats, default=[0.8, 0.0, 0.2])
    p.add_argument("--out", required=True)

    p = command("train", "train a model and write a checkpoint")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = command("evaluate", "score a split and compare against graders")
    _data_flags(p, ckpt=True)
    _stats_flags(p)
    p.add_argument("--split", default="validation")
    p.add_argument("--graders", type=_words, default=["all"])
    p.add_argument("--match", choices=("sensitivity", "specificity"), default="sensitivity")
    p.add_argument("--out", required=True, help="report directory")

    p = command("sweep-fraction", "AUC versus nested fractions of training patients")
    _data_flags(p)
    _train_flags(p)
    _stats_flags(p)
    p.add_argument("--fractions", type=_floats, default=[0.125, 0.25, 0.5, 1.0])
    p.add_argument("--out", required=True)

    p = command("sweep-crop", "AUC versus fovea/disc-centred crop radius")
    _data_flags(p)
    _train_flags(p)
    _stats_flags(p)
    p.add_argument("--centers", type=_words, default=["fovea", "disc"])
    p.add_argument("--radii", type=_floats, default=[0.05, 0.125, 0.25, 0.5, 1.0, 2.5])
    p.add_argument("--mask-eval-only", action="store_true", help="train on full images, mask only validation")
    p.add_argument("--out", required=True)

    p = command("sweep-threshold", "ROC/AUC of fixed scores at several thickness cut-offs")
    _data_flags(p, ckpt=True)
    _stats_flags(p)
    p.add_argument("--split", default="validation")
    p.add_argument("--thresholds", type=_floats, default=[250.0, 280.0, 300.0, 320.0])
    p.add_argument("--out", required=True)

    p = command("eval-secondary", "score a secondary dataset without retraining")
    _data_flags(p, ckpt=True, splits=False)
    _stats_flags(p)
    p.set_defaults(rule="cst")
    p.add_argument("--graders", type=_words, default=["all"])
    p.add_argument("--match", choices=("sensitivity", "specificity"), default="sensitivity")
    p.add_argument("--reference-prevalence", type=float, default=None)
    p.add_argument("--out", required=True)

    p = command("run", "run the experiment suite from an ExperimentConfig")
    p.add_argument("--config", help="ExperimentConfig JSON (desk-scale defaults when omitted)")
    p.add_argument("--experiments", type=_words, default=None, help=f"subset of {','.join(EXPERIMENT_IDS)}")
    p.add_argument("--out", required=True)

    p = command("verify", "re-derive a report and compare file hashes")
    p.add_argument("--report", required=True)
    return parser


def _prescan(argv) -> tuple:
    """The subcommand and the ``--options`` path, found before full parsing."""
    command, options = None, None
    for i, tok in enumerate(argv):
        if command is None and tok in COMMANDS:
            command = tok
        elif tok == "--options" and i + 1 < len(argv):
            options = argv[i + 1]
        elif tok.startswith("--options="):
            options = tok.split("=", 1)[1]
    return command, options


def _apply_options(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse ``argv`` with values from the ``--options`` JSON file installed as defaults."""
    argv = list(sys.argv[1:] if argv is None else argv)
    command, path = _prescan(argv)
    if command is not None and path is not None:
        subparser = parser._subparsers._group_actions[0].choices[command]
        actions = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, value in _read_json(path).items():
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("options", "help"):
                raise ValidationError(f"--options: unknown key {key!r} for {command}")
            action = actions[dest]
            if action.type is not None and value is not None:
                try:
                    value = action.type(value)
                except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                    raise ValidationError(f"--options: bad value for {key!r}: {exc}") from None
            if action.choices is not None and value not in action.choices:
                raise ValidationError(f"--options: {key!r} must be one of {list(action.choices)}")
            defaults[dest] = value
            action.required = False
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _abs(path):
    return None if path is None or path == "none" else str(Path(path).resolve())


def _cut(args):
    return args.cut if args.cut is not None else (250.0 if args.rule == "cpt" else 300.0)


def _load_split_data(args, split, size):
    manifest = load_manifest(args.manifest)
    splits = load_splits(args.splits)
    missing = sorted(set(manifest.patient_ids) - set(splits.assignment))
    if missing:
        raise ValueError(f"patients missing from {args.splits}: {missing[:5]}")
    return load_eye_data(splits.records(manifest, split), size, args.rule, _cut(args))


def _model(path) -> TrainedModel:
    net, result, _ = load_checkpoint(path)
    return TrainedModel(net, result, Path(path))


def _inputs(args, *names) -> dict:
    """Resolved options plus hashes of the files they name; the provenance and config-hash basis."""
    opts = {k: v for k, v in vars(args).items() if k not in ("options", "out", "command", "log_level")}
    for name in names:
        if opts.get(name) not in (None, "none"):
            opts[name] = _abs(opts[name])
            opts[f"{name}_sha256"] = sha256_file(opts[name])
    return opts


def _finish(records, args, opts):
    chash = config_hash(opts)
    for r in records:
        r.config_hash, r.seed = chash, args.seed
    provenance = {"kind": "cli", "command": args.command, "options": opts}
    emit_report(records, args.out, opts, provenance)


def _graders(args):
    return None if args.graders == ["all"] else args.graders


def cmd_generate(args):
    cfg = SynthConfig.from_dict(_read_json(args.config)) if args.config else SynthConfig(seed=args.seed)
    if args.secondary:
        cfg = cfg.secondary()
    manifest = generate_dataset(cfg, args.patients, args.out)
    print(f"wrote {len(manifest)} images to {args.out}")


def cmd_split(args):
    if len(args.fractions) != 3:
        raise ValueError("--fractions needs three values (train, tune, validation)")
    splits = split_by_patient(load_manifest(args.manifest), args.fractions, args.seed)
    write_splits(splits, args.out)
    print(" ".join(f"{s}={len(splits.patients(s))}" for s in ("train", "tune", "validation")))


def cmd_train(args):
    net, tcfg = _net(args.net), _train_cfg(args.train)
    if "seed" not in _read_json(args.train):
        tcfg = replace(tcfg, seed=args.seed)
    data = _load_split_data(args, "train", net.input_size)
    model = fit(net, tcfg, _augment(args.augment), data, tcfg.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, net, model.result, tcfg)
    print(f"trained {tcfg.total_steps} steps on {len(data)} images -> {args.out}")


def cmd_evaluate(args):
    opts = _inputs(args, "ckpt", "manifest", "splits")
    model = _model(args.ckpt)
    data = _load_split_data(args, args.split, model.net.input_size)
    scores = model.scores(data.images)
    results, tables = evaluate_scores(data, scores, args.match, args.replicates, args.permutations,
                                      derive_seed(args.seed, "evaluate"), _graders(args))
    results["checkpoint_sha256"] = opts["ckpt_sha256"]
    _finish([RunRecord("evaluate", "", args.seed, results, tables)], args, opts)
    print(json.dumps({h: v["value"] if isinstance(v, dict) else v for h, v in results["heads"].items()}))


def _sweep_config(args, **kw) -> ExperimentConfig:
    net, tcfg = _net(args.net), _train_cfg(args.train)
    return ExperimentConfig(sweep_net=net, sweep_train=tcfg, augment=_augment(args.augment),
                            replicates=args.replicates, permutations=args.permutations, seed=args.seed, **kw)


def cmd_sweep_fraction(args):
    opts = _inputs(args, "manifest", "splits", "net", "train", "augment")
    cfg = _sweep_config(args, fractions=tuple(args.fractions), experiments=("sweep_fraction",))
    size = cfg.sweep_net.input_size
    rec = sweep_fraction(cfg, _load_split_data(args, "train", size), _load_split_data(args, "validation", size))
    _finish([rec], args, opts)
    for p in rec.results["points"]:
        print(p["fraction"], p["heads"]["cidme"])


def cmd_sweep_crop(args):
    opts = _inputs(args, "manifest", "splits", "net", "train", "augment")
    cfg = _sweep_config(args, crop_centers=tuple(args.centers), crop_radii=tuple(args.radii),
                        crop_mask_training=not args.mask_eval_only, experiments=("sweep_crop",))
    size = cfg.sweep_net.input_size
    rec = sweep_crop(cfg, _load_split_data(args, "train", size), _load_split_data(args, "validation", size),
                     [CropSpec(c, r) for c in args.centers for r in args.radii])
    _finish([rec], args, opts)


def cmd_sweep_threshold(args):
    opts = _inputs(args, "ckpt", "manifest", "splits")
    model = _model(args.ckpt)
    data = _load_split_data(args, args.split, model.net.input_size)
    scores = model.scores(data.images)[:, 0]
    cases = ScoredCases(data.patient_id, data.image_id, scores, data.labels[:, 0].astype(np.int8), data.thickness)
    rec = sweep_threshold(cases, args.thresholds, opts["ckpt_sha256"], args.replicates,
                          derive_seed(args.seed, "sweep_threshold"))
    _finish([rec], args, opts)


def cmd_eval_secondary(args):
    opts = _inputs(args, "ckpt", "manifest")
    model = _model(args.ckpt)
    data = load_eye_data(load_manifest(args.manifest), model.net.input_size, args.rule, _cut(args))
    rec = evaluate_secondary(model, data, args.match, args.replicates, args.permutations,
                             derive_seed(args.seed, "eval_secondary"), args.reference_prevalence)
    _finish([rec], args, opts)
    print(rec.results["prevalence_note"])


def cmd_run(args):
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    cfg = replace(cfg, seed=args.seed) if args.seed else cfg
    if args.experiments:
        cfg = replace(cfg, experiments=tuple(args.experiments))
    run_suite(cfg, args.out)
    print(f"report written to {args.out}")


def cmd_verify(args):
    report = Path(args.report)
    provenance = json.loads((report / "provenance.json").read_text())
    if provenance.get("kind") == "suite":
        result = verify_suite(report)
    elif provenance.get("kind") == "cli":
        expected = json.loads((report / "hashes.json").read_text())
        tmp = Path(tempfile.mkdtemp(prefix="dmelab-verify-"))
        try:
            argv = [provenance["command"]]
            opts = {k: v for k, v in provenance["options"].items() if not k.endswith("_sha256")}
            (tmp / "options.json").write_text(json.dumps(opts))
            argv += ["--options", str(tmp / "options.json"), "--out", str(tmp / "report")]
            args2 = _apply_options(build_parser(), argv)
            for k in provenance["options"]:
                if k.endswith("_sha256") and sha256_file(opts[k[:-7]]) != provenance["options"][k]:
                    raise RuntimeError(f"input {opts[k[:-7]]} changed since the report was written")
            COMMANDS[args2.command](args2)
            actual = json.loads((tmp / "report" / "hashes.json").read_text())
        finally:
            shutil.rmtree(tmp, ignore_errors=True)
        result = compare_hashes(expected, actual)
    else:
        raise ValueError(f"{report}/provenance.json has unknown kind {provenance.get('kind')!r}")
    if not result.ok:
        print(f"MISMATCH in {len(result.mismatches)} of {result.checked} files: {', '.join(result.mismatches)}")
        raise RuntimeError("report is not reproducible")
    print(f"verified {result.checked} files")


COMMANDS = {
    "generate": cmd_generate,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep-fraction": cmd_sweep_fraction,
    "sweep-crop": cmd_sweep_crop,
    "sweep-threshold": cmd_sweep_threshold,
    "eval-secondary": cmd_eval_secondary,
    "run": cmd_run,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    try:
        args = _apply_options(build_parser(), argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValidationError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
