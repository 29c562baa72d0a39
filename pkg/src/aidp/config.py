"""Flat ``key=value`` run configuration with presets.

Precedence, lowest first: built-in defaults, ``AIDP_SEED`` (seed only),
the preset named in the file or flags, file values, command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Tuple

from .errors import ParseError


def parse_number(text: str) -> float:
    """Decimal or ``p/q`` fraction; fractions are divided exactly then rounded once."""
    s = text.strip()
    try:
        if "/" in s:
            num, den = s.split("/")
            frac = Fraction(Fraction(num.strip()), Fraction(den.strip()))
            return float(frac)
        return float(s)
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"not a number or fraction: {text!r}") from None


def _bool(text: str) -> bool:
    s = text.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text: str) -> int:
    return int(text.strip())


def _list(conv: Callable[[str], Any]) -> Callable[[str], Tuple]:
    def parse(text: str) -> Tuple:
        s = text.strip()
        return tuple(conv(p) for p in s.split(",")) if s else ()

    return parse


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        s = text.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s

    return parse


def _str(text: str) -> str:
    return text.strip()


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    doc: str


SCHEMA: Dict[str, Key] = {
    "preset": Key(_choice("toy", "svhn-paper", "cifar10-paper"), "toy", "hyperparameter bundle applied under file values"),
    "seed": Key(_int, "0", "master seed for data, initialisation, shuffling and attacks"),
    # data
    "data.source": Key(_choice("synth", "idx", "cifar10"), "synth", "synthetic blobs, IDX (MNIST) files, or CIFAR-10 binary batches"),
    "data.train_size": Key(_int, "4000", "training examples (synth) or cap on loaded examples"),
    "data.test_size": Key(_int, "1000", "held-out examples (synth) or cap on loaded examples"),
    "data.size": Key(_int, "32", "synthetic image side length"),
    "data.classes": Key(_int, "4", "synthetic class count"),
    "data.train_images": Key(_str, "", "IDX training images path"),
    "data.train_labels": Key(_str, "", "IDX training labels path"),
    "data.test_images": Key(_str, "", "IDX test images path"),
    "data.test_labels": Key(_str, "", "IDX test labels path"),
    "data.cifar_train": Key(_list(_str), "", "comma-separated CIFAR-10 training batch files"),
    "data.cifar_test": Key(_list(_str), "", "comma-separated CIFAR-10 test batch files"),
    # classifier
    "model.widths": Key(_list(_int), "16,32,64", "channels per stride-2 conv block"),
    "model.tap_low": Key(_int, "0", "block index feeding the low tap"),
    "model.tap_high": Key(_int, "2", "block index feeding the high tap"),
    "train.lr": Key(parse_number, "0.05", "natural training learning rate"),
    "train.momentum": Key(parse_number, "0.9", "natural training momentum"),
    "train.weight_decay": Key(parse_number, "2e-4", "natural training weight decay"),
    "train.epochs": Key(_int, "4", "natural training epochs"),
    "train.batch_size": Key(_int, "64", "natural training batch size"),
    "madry.lr": Key(parse_number, "0.01", "adversarial training learning rate"),
    "madry.epochs": Key(_int, "3", "adversarial training epochs"),
    "madry.batch_size": Key(_int, "64", "adversarial training batch size"),
    "madry.epsilon": Key(parse_number, "12/255", "training PGD radius"),
    "madry.step": Key(parse_number, "3/255", "training PGD step"),
    "madry.iterations": Key(_int, "5", "training PGD iterations"),
    "madry.ramp_steps": Key(_int, "63", "steps over which the training radius ramps up linearly (63 is one epoch of 4000 at batch 64)"),
    # discriminator
    "disc.branch_widths": Key(_list(_int), "64,64", "hidden widths of each tap branch"),
    "disc.trunk_widths": Key(_list(_int), "64,32", "hidden widths after concatenation"),
    "disc.lr": Key(parse_number, "0.01", "discriminator learning rate"),
    "disc.momentum": Key(parse_number, "0.9", "discriminator momentum"),
    "disc.weight_decay": Key(parse_number, "2e-4", "discriminator weight decay"),
    "disc.epochs": Key(_int, "1", "discriminator epochs"),
    "disc.batch_size": Key(_int, "64", "discriminator batch size"),
    "avmixup.gamma": Key(parse_number, "2", "adversarial vertex scaling factor"),
    "avmixup.augmentation": Key(_choice("none", "av", "mixup", "avmixup"), "avmixup", "training augmentation mode"),
    "avmixup.target_mode": Key(_choice("clean_vs_adv", "contrastive"), "clean_vs_adv", "training targets"),
    "avmixup.taps_used": Key(_choice("both", "low_only", "high_only"), "both", "taps fed to the discriminator"),
    "avmixup.attack": Key(_choice("pgd", "cw_l2", "deepfool", "fgsm", "mim"), "pgd", "attack generating training perturbations"),
    "avmixup.epsilon": Key(parse_number, "12/255", "training attack radius"),
    "avmixup.step": Key(parse_number, "2/255", "training attack step"),
    "avmixup.iterations": Key(_int, "10", "training attack iterations"),
    # evaluation attacks
    "attack.kinds": Key(_list(_choice("fgsm", "pgd", "mim", "deepfool", "cw_l2")), "pgd,mim,fgsm", "evaluation attack suite"),
    "attack.epsilon": Key(parse_number, "12/255", "attack L-infinity radius"),
    "attack.step": Key(parse_number, "2/255", "attack step size"),
    "attack.iterations": Key(_int, "40", "PGD/MIM iterations"),
    "attack.random_start": Key(_bool, "true", "uniform random start for PGD"),
    "attack.mim_decay": Key(parse_number, "1.0", "MIM momentum factor"),
    "attack.cw_constant": Key(parse_number, "1.0", "C&W penalty constant"),
    "attack.cw_lr": Key(parse_number, "0.01", "C&W gradient descent rate"),
    "attack.cw_kappa": Key(parse_number, "0", "C&W confidence margin"),
    "attack.cw_steps": Key(_int, "100", "C&W steps"),
    "attack.deepfool_overshoot": Key(parse_number, "0.02", "DeepFool overshoot"),
    "attack.deepfool_iterations": Key(_int, "50", "DeepFool iterations"),
    "attack.deepfool_candidates": Key(_int, "3", "DeepFool competing classes"),
    "attack.lambdas": Key(_list(parse_number), "", "aux-aware PGD trade-offs, one extra row each"),
    "attack.aux_target": Key(parse_number, "0", "discriminator target the aux-aware attack pushes toward"),
    # purification
    "purify.epsilon": Key(parse_number, "12/255", "purification radius"),
    "purify.alpha": Key(parse_number, "3/255", "purification step"),
    "purify.iterations": Key(_int, "10", "purification iterations"),
    "purify.use_logit": Key(_bool, "false", "descend the pre-sigmoid logit instead of the probability"),
    # evaluation
    "eval.batch_size": Key(_int, "250", "evaluation batch size"),
    "eval.workers": Key(_int, "1", "evaluation worker threads"),
    "eval.timing": Key(_bool, "false", "measure per-image purification time"),
    "eval.timing_repeats": Key(_int, "100", "timed single-image purifications"),
}

PRESETS: Dict[str, Dict[str, str]] = {
    "toy": {},
    "svhn-paper": {
        "attack.epsilon": "12/255",
        "attack.step": "2/255",
        "purify.epsilon": "12/255",
        "purify.alpha": "3/255",
        "purify.iterations": "10",
        "avmixup.gamma": "2",
        "avmixup.epsilon": "12/255",
        "avmixup.step": "2/255",
        "disc.branch_widths": "1024,1024,1024",
        "disc.trunk_widths": "1024,512",
    },
    "cifar10-paper": {
        "attack.epsilon": "8/255",
        "attack.step": "1/255",
        "purify.epsilon": "8/255",
        "purify.alpha": "2/255",
        "purify.iterations": "10",
        "avmixup.gamma": "1.5",
        "avmixup.epsilon": "8/255",
        "avmixup.step": "1/255",
        "madry.epsilon": "8/255",
        "madry.step": "2/255",
        "disc.branch_widths": "1024,1024",
        "disc.trunk_widths": "1024,512",
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]
    text: Mapping[str, str] = field(compare=False, default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def echo(self) -> Dict[str, str]:
        """Canonical text of every resolved key; ``from_echo`` inverts it."""
        return {k: _fmt(self.values[k]) for k in sorted(self.values)}

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.echo().items())

    @classmethod
    def from_echo(cls, echo: Mapping[str, str]) -> "RunConfig":
        return resolve({}, dict(echo))

    def with_overrides(self, **kv: str) -> "RunConfig":
        return resolve(self.echo(), {k.replace("__", "."): v for k, v in kv.items()})


def parse_lines(text: str) -> Dict[str, Tuple[str, int]]:
    """Raw ``key -> (value, line)``; rejects malformed lines and duplicates."""
    out: Dict[str, Tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw.strip()!r}", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno)
        if key in out:
            raise ParseError(f"duplicate key {key!r} (first set on line {out[key][1]})", lineno, key)
        out[key] = (value, lineno)
    return out


def _convert(key: str, text: str, line: Optional[int] = None) -> Any:
    if key not in SCHEMA:
        raise ParseError(f"unknown key {key!r}", line, key)
    try:
        return SCHEMA[key].parse(text)
    except ValueError as exc:
        raise ParseError(f"bad value for {key!r}: {exc}", line, key) from None


def resolve(file_values: Mapping[str, Any], flags: Mapping[str, str], env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Merge defaults, env seed, preset, file values and flags into a typed config."""
    lines: Dict[str, Optional[int]] = {}
    file_text: Dict[str, str] = {}
    for k, v in file_values.items():
        if isinstance(v, tuple):
            file_text[k], lines[k] = v
        else:
            file_text[k], lines[k] = v, None
    for k in list(file_text) + list(flags):
        if k not in SCHEMA:
            raise ParseError(f"unknown key {k!r}", lines.get(k), k)

    merged = {k: key.default for k, key in SCHEMA.items()}
    env = os.environ if env is None else env
    if "AIDP_SEED" in env:
        merged["seed"] = env["AIDP_SEED"]
    preset = flags.get("preset", file_text.get("preset", merged["preset"]))
    preset = _convert("preset", preset, lines.get("preset"))
    merged.update(PRESETS[preset])
    merged.update(file_text)
    merged.update(flags)
    values = {k: _convert(k, v, lines.get(k) if k not in flags else None) for k, v in merged.items()}
    return RunConfig(values, merged)


def parse_config(source: str = "", flags: Optional[Mapping[str, str]] = None, env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Parse config text (or a path to it) and apply flag overrides.

    Example:
        >>> parse_config("attack.epsilon=8/255")["attack.epsilon"]
        0.03137254901960784
    """
    text = source
    if source and "\n" not in source and "=" not in source and os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    return resolve(parse_lines(text), dict(flags or {}), env)


def parse_assignments(items: Iterable[str]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise ParseError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def documented_keys() -> List[str]:
    return [f"{k} (default {v.default!r}): {v.doc}" for k, v in SCHEMA.items()]
