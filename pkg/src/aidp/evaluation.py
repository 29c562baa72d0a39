"""Robust accuracy with and without purification, detector AUC, transfer attacks,
timing, and the JSON/CSV report format."""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from . import __version__
from . import tensor as T
from .attacks import AttackConfig, run_attack
from .data import Dataset, minibatches
from .errors import ConfigError, ContractError, FormatError
from .models import ClassifierModel, DiscriminatorModel, discriminate
from .purifier import PurifyConfig, purify

REPORT_VERSION = 1
CSV_COLUMNS = ["attack", "epsilon", "step", "iters", "accuracy", "n"]

Purifier = Tuple[DiscriminatorModel, PurifyConfig]


@dataclass
class AttackRow:
    attack: str
    config: Dict[str, Any]
    accuracy: float
    correct: int
    n: int
    in_worst: bool = True


@dataclass
class EvalReport:
    dataset: str
    models: Dict[str, Optional[str]]
    clean_accuracy: float
    clean_n: int
    attacks: List[AttackRow] = field(default_factory=list)
    timing: Dict[str, Optional[float]] = field(default_factory=dict)
    seeds: Dict[str, int] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    tool_version: str = __version__
    version: int = REPORT_VERSION

    @property
    def worst_accuracy(self) -> float:
        return worst_case_accuracy([r.accuracy for r in self.attacks if r.in_worst])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "dataset": self.dataset,
            "models": self.models,
            "clean_accuracy": self.clean_accuracy,
            "clean_n": self.clean_n,
            "attacks": [asdict(r) for r in self.attacks],
            "worst_accuracy": self.worst_accuracy if any(r.in_worst for r in self.attacks) else None,
            "timing": self.timing,
            "seeds": self.seeds,
            "config": self.config,
            "tool_version": self.tool_version,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "EvalReport":
        if d.get("version") != REPORT_VERSION:
            raise FormatError(f"unsupported report version {d.get('version')!r}")
        try:
            report = cls(
                dataset=d["dataset"],
                models=d["models"],
                clean_accuracy=d["clean_accuracy"],
                clean_n=d["clean_n"],
                attacks=[AttackRow(**r) for r in d["attacks"]],
                timing=d["timing"],
                seeds=d["seeds"],
                config=d.get("config", {}),
                tool_version=d.get("tool_version", __version__),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed report: {exc}") from None
        stored = d.get("worst_accuracy")
        if stored is not None and stored != report.worst_accuracy:
            raise FormatError(f"stored worst_accuracy {stored} disagrees with rows ({report.worst_accuracy})")
        return report


def worst_case_accuracy(rows: Sequence[float]) -> float:
    """Minimum over per-attack accuracies."""
    rows = list(rows)
    if not rows:
        raise ContractError("worst-case accuracy needs at least one attack row")
    return min(rows)


def _batch_correct(
    classifier: ClassifierModel,
    x: np.ndarray,
    y: np.ndarray,
    attack: Optional[AttackConfig],
    purifier: Optional[Purifier],
    attack_model: Optional[ClassifierModel],
    attack_discriminator: Optional[DiscriminatorModel],
) -> int:
    if attack is not None:
        x = run_attack(attack_model or classifier, x, y, attack, attack_discriminator)
    if purifier is not None:
        x = purify(classifier, purifier[0], x, purifier[1])
    return int((classifier(T.constant(x)).data.argmax(axis=1) == y).sum())


def correct_count(
    classifier: ClassifierModel,
    dataset: Dataset,
    attack: Optional[AttackConfig] = None,
    purifier: Optional[Purifier] = None,
    batch_size: int = 250,
    workers: int = 1,
    attack_model: Optional[ClassifierModel] = None,
    attack_discriminator: Optional[DiscriminatorModel] = None,
) -> Tuple[int, int]:
    """(correct, n) over the dataset; batch ``b`` attacks with seed ``attack.seed ^ b``."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    if attack is not None and attack.kind == "aux_aware_pgd" and attack_discriminator is None:
        if purifier is None:
            raise ConfigError("aux_aware_pgd needs the purifier's discriminator")
        attack_discriminator = purifier[0]
    batches = minibatches(len(dataset), batch_size)

    def job(b: int) -> int:
        idx = batches[b]
        cfg = attack.replace(seed=attack.seed ^ b) if attack is not None else None
        return _batch_correct(
            classifier, dataset.images[idx], dataset.labels[idx], cfg, purifier, attack_model, attack_discriminator
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            counts = list(pool.map(job, range(len(batches))))
    else:
        counts = [job(b) for b in range(len(batches))]
    return int(sum(counts)), len(dataset)


def robust_accuracy(
    classifier: ClassifierModel,
    attack: Optional[AttackConfig],
    dataset: Dataset,
    purifier: Optional[Purifier] = None,
    **kw,
) -> float:
    """Top-1 accuracy on adversarial examples crafted against the classifier, optionally purified first."""
    correct, n = correct_count(classifier, dataset, attack, purifier, **kw)
    return correct / n


def black_box_eval(
    surrogate: ClassifierModel,
    target: ClassifierModel,
    attack: AttackConfig,
    dataset: Dataset,
    purifier: Optional[Purifier] = None,
    **kw,
) -> float:
    """Transfer attack: examples crafted on ``surrogate``, scored on ``target``."""
    correct, n = correct_count(target, dataset, attack, purifier, attack_model=surrogate, **kw)
    return correct / n


def scores(classifier: ClassifierModel, discriminator: DiscriminatorModel, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        _, h_low, h_high = classifier.forward(T.constant(x[i : i + batch_size]))
        out.append(discriminate(discriminator, h_low, h_high).data)
    return np.concatenate(out) if out else np.zeros(0)


def auc(negative: np.ndarray, positive: np.ndarray) -> float:
    """Probability that a positive outscores a negative, ties counted half."""
    negative, positive = np.asarray(negative, float), np.asarray(positive, float)
    if negative.size == 0 or positive.size == 0:
        raise ContractError("AUC needs non-empty score sets")
    ranks = rankdata(np.concatenate([negative, positive]))
    n_pos, n_neg = positive.size, negative.size
    u = ranks[n_neg:].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def detector_auc(
    discriminator: DiscriminatorModel, classifier: ClassifierModel, clean: np.ndarray, adversarial: np.ndarray
) -> float:
    """AUC of discriminator scores with adversarial inputs as the positive class."""
    if len(clean) == 0 or len(adversarial) == 0:
        raise ContractError("detector AUC needs non-empty clean and adversarial sets")
    return auc(scores(classifier, discriminator, clean), scores(classifier, discriminator, adversarial))


def measure_timing(
    classifier: ClassifierModel,
    discriminator: DiscriminatorModel,
    images: np.ndarray,
    cfg: PurifyConfig,
    repeats: int = 100,
    warmup: int = 10,
) -> float:
    """Median wall-clock seconds to purify one image (batch size one)."""
    times = []
    for i in range(warmup + repeats):
        x = images[i % len(images)][None]
        t0 = time.perf_counter()
        purify(classifier, discriminator, x, cfg)
        if i >= warmup:
            times.append(time.perf_counter() - t0)
    return float(statistics.median(times))


def training_minutes(log_path) -> float:
    """Wall-clock duration recorded in a training log, in minutes."""
    from .training import TrainLog

    return TrainLog.read(log_path).minutes


# ---------------------------------------------------------------------------
# report IO
# ---------------------------------------------------------------------------


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in report.attacks:
        cfg = row.config
        w.writerow([row.attack, cfg.get("epsilon"), cfg.get("step_size"), cfg.get("iterations"), row.accuracy, row.n])
    return buf.getvalue()


def write_report(report: EvalReport, path, fmt: Optional[str] = None) -> None:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "json")
    if fmt == "json":
        path.write_text(report_json(report))
    elif fmt == "csv":
        path.write_text(report_csv(report))
    else:
        raise ConfigError(f"unknown report format {fmt!r}")


def read_report(path) -> EvalReport:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"report is not valid JSON: {exc.msg}", exc.pos) from None
    return EvalReport.from_dict(d)


def evaluate(
    classifier: ClassifierModel,
    dataset: Dataset,
    attacks: Sequence[AttackConfig],
    purifier: Optional[Purifier] = None,
    lambdas: Sequence[float] = (),
    model_ids: Optional[Dict[str, Optional[str]]] = None,
    config: Optional[Dict[str, Any]] = None,
    workers: int = 1,
    batch_size: int = 250,
    surrogate: Optional[ClassifierModel] = None,
) -> EvalReport:
    """Clean accuracy plus one row per attack, and one aux-aware row per lambda.

    Aux-aware rows need a purifier and are kept out of the worst-case figure.
    With a ``surrogate`` every attack is crafted on it (transfer setting).
    """
    kw = dict(batch_size=batch_size, workers=workers)
    clean_correct, n = correct_count(classifier, dataset, None, purifier, **kw)
    rows = []
    for cfg in attacks:
        correct, n_att = correct_count(classifier, dataset, cfg, purifier, attack_model=surrogate, **kw)
        rows.append(AttackRow(cfg.kind, asdict(cfg), correct / n_att, correct, n_att))
    if lambdas and purifier is None:
        raise ConfigError("aux-aware rows need a discriminator")
    base = next((a for a in attacks if a.kind == "pgd"), AttackConfig())
    for lam in lambdas:
        cfg = base.replace(kind="aux_aware_pgd", lam=float(lam))
        correct, n_att = correct_count(classifier, dataset, cfg, purifier, **kw)
        rows.append(AttackRow(f"aux_aware_pgd(lam={lam:g})", asdict(cfg), correct / n_att, correct, n_att, False))
    seeds = {a.kind: a.seed for a in attacks}
    return EvalReport(
        dataset=dataset.name,
        models=model_ids or {"classifier": None, "discriminator": None, "surrogate": None},
        clean_accuracy=clean_correct / n,
        clean_n=n,
        attacks=rows,
        seeds=seeds,
        config=config or {},
        timing={},
    )
