"""Command-line front end.

Subcommands: train-classifier, train-madry, train-purifier, attack, evaluate,
sweep, report.  Configuration comes from ``--config FILE`` plus ``--set
key=value`` overrides.  Exit codes: 0 success, 2 bad configuration, 3 I/O.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .attacks import AttackConfig, run_attack
from .config import RunConfig, documented_keys, parse_assignments, parse_config
from .data import Dataset, load_cifar10_binary, load_idx, synth_blobs
from .errors import AidpError, ConfigError, FormatError, ParseError
from .evaluation import CSV_COLUMNS, EvalReport, evaluate, measure_timing, read_report, report_csv, write_report
from .models import (
    ClassifierSpec,
    DiscriminatorSpec,
    build_classifier,
    build_discriminator,
    load_model,
    save_model,
)
from .purifier import PurifyConfig
from .training import AVmixupConfig, TrainConfig, TrainLog, train_discriminator, train_madry, train_natural

logger = logging.getLogger("aidp")

EXIT_CONFIG = 2
EXIT_IO = 3


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------


def _seeds(seed: int) -> Dict[str, int]:
    ss = np.random.SeedSequence(seed).generate_state(6)
    names = ("train_data", "test_data", "init", "shuffle", "attack", "disc")
    return {n: int(v) for n, v in zip(names, ss)}


def load_datasets(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    seeds = _seeds(cfg["seed"])
    src = cfg["data.source"]
    if src == "synth":
        size, classes = cfg["data.size"], cfg["data.classes"]
        train = synth_blobs(seeds["train_data"], cfg["data.train_size"], size, classes, split="train")
        test = synth_blobs(seeds["test_data"], cfg["data.test_size"], size, classes, split="test")
        return train, test
    if src == "idx":
        paths = [cfg[k] for k in ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels")]
        if not all(paths):
            raise ConfigError("data.source=idx needs data.train_images/labels and data.test_images/labels")
        train = load_idx(paths[0], paths[1], split="train")
        test = load_idx(paths[2], paths[3], split="test")
    else:
        if not cfg["data.cifar_train"] or not cfg["data.cifar_test"]:
            raise ConfigError("data.source=cifar10 needs data.cifar_train and data.cifar_test")
        train = load_cifar10_binary(cfg["data.cifar_train"], "train")
        test = load_cifar10_binary(cfg["data.cifar_test"], "test")
    return train.head(cfg["data.train_size"]), test.head(cfg["data.test_size"])


def classifier_spec(cfg: RunConfig, dataset: Dataset) -> ClassifierSpec:
    return ClassifierSpec(
        input_shape=dataset.images.shape[1:],
        widths=cfg["model.widths"],
        num_classes=dataset.num_classes,
        tap_low=cfg["model.tap_low"],
        tap_high=cfg["model.tap_high"],
    )


def attack_config(cfg: RunConfig, kind: str) -> AttackConfig:
    iterations = {"fgsm": 1, "cw_l2": cfg["attack.cw_steps"], "deepfool": cfg["attack.deepfool_iterations"]}
    return AttackConfig(
        kind=kind,
        epsilon=cfg["attack.epsilon"],
        step_size=cfg["attack.step"],
        iterations=iterations.get(kind, cfg["attack.iterations"]),
        random_start=cfg["attack.random_start"],
        mim_decay=cfg["attack.mim_decay"],
        aux_target=cfg["attack.aux_target"],
        cw_constant=cfg["attack.cw_constant"],
        cw_lr=cfg["attack.cw_lr"],
        cw_kappa=cfg["attack.cw_kappa"],
        deepfool_overshoot=cfg["attack.deepfool_overshoot"],
        deepfool_candidates=cfg["attack.deepfool_candidates"],
        seed=_seeds(cfg["seed"])["attack"],
    ).validate()


def purify_config(cfg: RunConfig) -> PurifyConfig:
    return PurifyConfig(
        cfg["purify.epsilon"], cfg["purify.alpha"], cfg["purify.iterations"], cfg["purify.use_logit"]
    ).validate()


def avmixup_config(cfg: RunConfig) -> AVmixupConfig:
    kind = cfg["avmixup.attack"]
    attack = AttackConfig(
        kind=kind,
        epsilon=cfg["avmixup.epsilon"],
        step_size=cfg["avmixup.step"],
        iterations=cfg["avmixup.iterations"],
        seed=_seeds(cfg["seed"])["disc"],
    )
    return AVmixupConfig(
        gamma=cfg["avmixup.gamma"],
        train_attack=attack,
        augmentation=cfg["avmixup.augmentation"],
        target_mode=cfg["avmixup.target_mode"],
        taps_used=cfg["avmixup.taps_used"],
    ).validate()


def _train_cfg(cfg: RunConfig, prefix: str, seed_name: str) -> TrainConfig:
    return TrainConfig(
        lr=cfg[f"{prefix}.lr"],
        momentum=cfg.values.get(f"{prefix}.momentum", cfg["train.momentum"]),
        weight_decay=cfg.values.get(f"{prefix}.weight_decay", cfg["train.weight_decay"]),
        epochs=cfg[f"{prefix}.epochs"],
        batch_size=cfg[f"{prefix}.batch_size"],
        seed=_seeds(cfg["seed"])[seed_name],
    ).validate()


def _load(path: str, kind: str):
    return load_model(path, expect=kind)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train_classifier(cfg: RunConfig, args) -> None:
    train, _ = load_datasets(cfg)
    model = build_classifier(classifier_spec(cfg, train), _seeds(cfg["seed"])["init"])
    model, log = train_natural(model, train, _train_cfg(cfg, "train", "shuffle"))
    save_model(model, args.out)
    if args.log:
        log.write(args.log)


def cmd_train_madry(cfg: RunConfig, args) -> None:
    train, _ = load_datasets(cfg)
    if args.init:
        model = _load(args.init, "classifier")
    else:
        model = build_classifier(classifier_spec(cfg, train), _seeds(cfg["seed"])["init"])
    attack = AttackConfig(
        kind="pgd",
        epsilon=cfg["madry.epsilon"],
        step_size=cfg["madry.step"],
        iterations=cfg["madry.iterations"],
        seed=_seeds(cfg["seed"])["attack"],
    )
    model, log = train_madry(model, train, _train_cfg(cfg, "madry", "shuffle"), attack, cfg["madry.ramp_steps"])
    save_model(model, args.out)
    if args.log:
        log.write(args.log)


def cmd_train_purifier(cfg: RunConfig, args) -> None:
    train, _ = load_datasets(cfg)
    classifier = _load(args.classifier, "classifier")
    dspec = DiscriminatorSpec.for_classifier(
        classifier.spec,
        branch_widths=cfg["disc.branch_widths"],
        trunk_widths=cfg["disc.trunk_widths"],
        taps=cfg["avmixup.taps_used"],
    )
    disc = build_discriminator(dspec, _seeds(cfg["seed"])["init"])
    disc, log = train_discriminator(classifier, disc, train, _train_cfg(cfg, "disc", "disc"), avmixup_config(cfg))
    save_model(disc, args.out)
    if args.log:
        log.write(args.log)


def cmd_attack(cfg: RunConfig, args) -> None:
    _, test = load_datasets(cfg)
    classifier = _load(args.classifier, "classifier")
    disc = _load(args.discriminator, "discriminator") if args.discriminator else None
    acfg = attack_config(cfg, args.kind)
    if args.kind == "aux_aware_pgd":
        lams = cfg["attack.lambdas"]
        acfg = acfg.replace(lam=lams[0] if lams else 0.0)
    x_adv = run_attack(classifier, test.images, test.labels, acfg, disc)
    np.savez(args.out, x_adv=x_adv, labels=test.labels, x=test.images)


def _model_ids(args) -> Dict[str, Optional[str]]:
    return {
        "classifier": args.classifier,
        "discriminator": getattr(args, "discriminator", None),
        "surrogate": getattr(args, "surrogate", None),
    }


def run_evaluation(cfg: RunConfig, args) -> EvalReport:
    _, test = load_datasets(cfg)
    classifier = _load(args.classifier, "classifier")
    disc = _load(args.discriminator, "discriminator") if args.discriminator else None
    surrogate = _load(args.surrogate, "classifier") if getattr(args, "surrogate", None) else None
    pcfg = purify_config(cfg)
    purifier = (disc, pcfg) if disc is not None else None
    attacks = [attack_config(cfg, k) for k in cfg["attack.kinds"]]
    report = evaluate(
        classifier,
        test,
        attacks,
        purifier,
        lambdas=cfg["attack.lambdas"] if disc is not None else (),
        model_ids=_model_ids(args),
        # worker count is left out so reports match byte for byte across --workers
        config={k: v for k, v in cfg.echo().items() if k != "eval.workers"},
        workers=cfg["eval.workers"],
        batch_size=cfg["eval.batch_size"],
        surrogate=surrogate,
    )
    report.seeds = {"seed": cfg["seed"], **_seeds(cfg["seed"])}
    if cfg["eval.timing"] and disc is not None:
        report.timing["purification_seconds_per_image"] = measure_timing(
            classifier, disc, test.images, pcfg, cfg["eval.timing_repeats"]
        )
    if getattr(args, "train_log", None):
        report.timing["training_minutes"] = TrainLog.read(args.train_log).minutes
    return report


def cmd_evaluate(cfg: RunConfig, args) -> None:
    report = run_evaluation(cfg, args)
    write_report(report, args.out, "json")
    if args.csv:
        write_report(report, args.csv, "csv")


def cmd_sweep(cfg: RunConfig, args) -> None:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values needs at least one value")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([args.axis] + CSV_COLUMNS)
    for i, value in enumerate(values):
        point = cfg.with_overrides(**{args.axis.replace(".", "__"): value})
        report = run_evaluation(point, args)
        write_report(report, out_dir / f"report_{i:02d}.json", "json")
        for row in report.attacks:
            c = row.config
            w.writerow([value, row.attack, c.get("epsilon"), c.get("step_size"), c.get("iterations"), row.accuracy, row.n])
    (out_dir / "sweep.csv").write_text(buf.getvalue())


def cmd_report(cfg: RunConfig, args) -> None:
    report = read_report(args.input)
    if args.format == "csv":
        sys.stdout.write(report_csv(report))
        return
    print(f"dataset: {report.dataset}")
    print(f"clean accuracy: {report.clean_accuracy:.4f} (n={report.clean_n})")
    for row in report.attacks:
        flag = "" if row.in_worst else "  [not in worst]"
        print(f"{row.attack:<28} {row.accuracy:.4f}  ({row.correct}/{row.n}){flag}")
    if any(r.in_worst for r in report.attacks):
        print(f"worst: {report.worst_accuracy:.4f}")


COMMANDS = {
    "train-classifier": cmd_train_classifier,
    "train-madry": cmd_train_madry,
    "train-purifier": cmd_train_purifier,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aidp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--workers", type=int, help="shorthand for --set eval.workers=N")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-classifier", parents=[common], help="natural training")
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = sub.add_parser("train-madry", parents=[common], help="PGD adversarial training")
    p.add_argument("--init", help="classifier file to start from")
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = sub.add_parser("train-purifier", parents=[common], help="AVmixup discriminator training")
    p.add_argument("--classifier", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = sub.add_parser("attack", parents=[common], help="write adversarial test examples to .npz")
    p.add_argument("--classifier", required=True)
    p.add_argument("--discriminator")
    p.add_argument("--kind", default="pgd", choices=["fgsm", "pgd", "mim", "deepfool", "cw_l2", "aux_aware_pgd"])
    p.add_argument("--out", required=True)

    for name in ("evaluate", "sweep"):
        p = sub.add_parser(name, parents=[common], help="robust accuracy report" if name == "evaluate" else "one report per axis value")
        p.add_argument("--classifier", required=True)
        p.add_argument("--discriminator")
        p.add_argument("--surrogate", help="craft attacks on this classifier instead (transfer setting)")
        p.add_argument("--train-log", help="training log whose duration goes into the report")
        if name == "evaluate":
            p.add_argument("--out", required=True)
            p.add_argument("--csv")
        else:
            p.add_argument("--axis", required=True, help="config key to vary, e.g. purify.epsilon")
            p.add_argument("--values", required=True, help="comma-separated values")
            p.add_argument("--out-dir", required=True)

    p = sub.add_parser("report", parents=[common], help="print a json report")
    p.add_argument("input")
    p.add_argument("--format", choices=["text", "csv"], default="text")

    sub.add_parser("keys", help="list every config key with its default")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "keys":
        print("\n".join(documented_keys()))
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        flags = parse_assignments(args.set)
        if args.seed is not None:
            flags["seed"] = str(args.seed)
        if args.workers is not None:
            flags["eval.workers"] = str(args.workers)
        if args.config:
            try:
                text = Path(args.config).read_text(encoding="utf-8")
            except OSError as exc:
                print(f"aidp: cannot read config: {exc}", file=sys.stderr)
                return EXIT_IO
        else:
            text = ""
        cfg = parse_config(text, flags)
        COMMANDS[args.command](cfg, args)
    except ParseError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"aidp: config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"aidp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"aidp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AidpError as exc:
        print(f"aidp: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
