"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary.  Criteria 5 to 9 share one cached pipeline per seed (natural
classifier, Madry classifier, discriminators, adversarial batches) so the
expensive artifacts are built once.
"""

import time
from fractions import Fraction
from functools import cached_property
from statistics import median

import numpy as np
import pytest

from aidp import tensor as T
from aidp.attacks import KINDS, AttackConfig, run_attack
from aidp.cli import main
from aidp.data import synth_blobs
from aidp.evaluation import auc, measure_timing, scores, worst_case_accuracy
from aidp.models import ClassifierModel, ClassifierSpec, DiscriminatorSpec, build_classifier, build_discriminator, discriminate
from aidp.purifier import PurifyConfig, purification_path, purify
from aidp.tensor import finite_difference_gradient
from aidp.training import AVmixupConfig, TrainConfig, avmixup_sample, train_discriminator, train_madry, train_natural

SEEDS = (0, 1, 2)
SUITE = ("pgd", "mim", "fgsm")
MODES = ("none", "av", "mixup", "avmixup")
LAMBDAS = (0.0, 0.1, 1.0, 10.0)
PURIFY = PurifyConfig.preset("toy")


def norm_rel_err(a, b):
    """max|a - b| / max(max|a|, max|b|), zero when both vanish."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    return 0.0 if scale == 0 else float(np.max(np.abs(a - b)) / scale)


# ---------------------------------------------------------------------------
# shared pipeline
# ---------------------------------------------------------------------------


class Pipeline:
    """Toy-scale reproduction for one seed: data, classifiers, discriminators, attacks."""

    def __init__(self, seed: int):
        self.seed = seed
        self._adv = {}
        self._disc = {}

    @cached_property
    def train(self):
        return synth_blobs(self.seed, 4000, split="train")

    @cached_property
    def test(self):
        return synth_blobs(self.seed + 100, 1000, split="test")

    @cached_property
    def natural(self) -> ClassifierModel:
        init = build_classifier(ClassifierSpec(), self.seed)
        model, _ = train_natural(init, self.train, TrainConfig(lr=0.05, epochs=4, seed=self.seed))
        return model

    @cached_property
    def madry(self) -> ClassifierModel:
        start = ClassifierModel(self.natural.spec, {k: v.copy() for k, v in self.natural.params.items()})
        attack = AttackConfig(kind="pgd", epsilon=12 / 255, step_size=3 / 255, iterations=5, seed=self.seed)
        model, _ = train_madry(start, self.train, TrainConfig(lr=0.01, epochs=3, seed=self.seed), attack, ramp_steps=63)
        return model

    def classifier(self, which: str) -> ClassifierModel:
        return self.natural if which == "natural" else self.madry

    def adv(self, which: str, kind: str, lam: float = 0.0) -> np.ndarray:
        key = (which, kind, lam)
        if key not in self._adv:
            cfg = AttackConfig.preset("pgd" if kind == "aux_aware_pgd" else kind, "toy", seed=self.seed)
            cfg = cfg.replace(kind=kind, lam=lam)
            disc = self.disc(which, "avmixup") if kind == "aux_aware_pgd" else None
            self._adv[key] = run_attack(self.classifier(which), self.test.images, self.test.labels, cfg, disc)
        return self._adv[key]

    def disc(self, which: str, mode: str):
        key = (which, mode)
        if key not in self._disc:
            c = self.classifier(which)
            d0 = build_discriminator(DiscriminatorSpec.for_classifier(c.spec), self.seed)
            avcfg = AVmixupConfig(
                augmentation=mode,
                train_attack=AttackConfig(kind="pgd", epsilon=12 / 255, step_size=2 / 255, iterations=10, seed=self.seed),
            )
            self._disc[key], _ = train_discriminator(c, d0, self.train, TrainConfig(seed=self.seed), avcfg)
        return self._disc[key]

    def accuracy(self, which: str, x: np.ndarray) -> float:
        return float((self.classifier(which).predict(x) == self.test.labels).mean())

    def purified_accuracy(self, which: str, mode: str, x: np.ndarray) -> float:
        c = self.classifier(which)
        return self.accuracy(which, purify(c, self.disc(which, mode), x, PURIFY))

    def worst(self, which: str, mode=None) -> float:
        rows = []
        for kind in SUITE:
            x = self.adv(which, kind)
            rows.append(self.accuracy(which, x) if mode is None else self.purified_accuracy(which, mode, x))
        return worst_case_accuracy(rows)


@pytest.fixture(scope="module")
def pipelines():
    return {s: Pipeline(s) for s in SEEDS}


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def _primitive_cases(rng):
    """(name, scalar function of one array, input array) covering every primitive."""
    x4 = rng.standard_normal((2, 3, 5, 5))
    w4 = rng.standard_normal((4, 3, 3, 3))
    b4 = rng.standard_normal(4)
    x2 = rng.standard_normal((3, 4))
    w2 = rng.standard_normal((2, 4))
    b2 = rng.standard_normal(2)
    other = rng.standard_normal((3, 4))
    labels = rng.integers(0, 4, 3)
    soft = rng.uniform(0, 1, 3)
    kinks = x2.copy()
    for p in (-0.5, 0.0, 0.5):
        close = np.abs(kinks - p) < 1e-3
        kinks[close] = p + np.where(kinks[close] >= p, 2e-3, -2e-3)
    probe4 = rng.standard_normal((2, 4, 3, 3))
    probe2 = rng.standard_normal((3, 2))
    probe = rng.standard_normal((3, 4))
    probe_gap = rng.standard_normal((2, 3))
    c = T.constant

    def dot(t, p):
        return T.tsum(T.mul(t, c(p)))

    return [
        ("conv2d.x", lambda t: dot(T.conv2d(t, c(w4), c(b4), 2, 1), probe4), x4),
        ("conv2d.w", lambda t: dot(T.conv2d(c(x4), t, c(b4), 2, 1), probe4), w4),
        ("conv2d.b", lambda t: dot(T.conv2d(c(x4), c(w4), t, 2, 1), probe4), b4),
        ("affine.x", lambda t: dot(T.affine(t, c(w2), c(b2)), probe2), x2),
        ("affine.w", lambda t: dot(T.affine(c(x2), t, c(b2)), probe2), w2),
        ("affine.b", lambda t: dot(T.affine(c(x2), c(w2), t), probe2), b2),
        ("relu", lambda t: dot(T.relu(t), probe), kinks),
        ("clamp", lambda t: dot(T.clamp(t, -0.5, 0.5), probe), kinks),
        ("sigmoid", lambda t: dot(T.sigmoid(t), probe), x2),
        ("gap", lambda t: dot(T.global_average_pool(t), probe_gap), x4),
        ("add", lambda t: dot(T.add(t, c(other)), probe), x2),
        ("sub", lambda t: dot(T.sub(c(other), t), probe), x2),
        ("scale", lambda t: dot(T.scale(t, -1.7), probe), x2),
        ("mul", lambda t: dot(T.mul(t, c(other)), probe), x2),
        ("concat", lambda t: dot(T.concat([t, c(other)], axis=1), np.concatenate([probe, probe], 1)), x2),
        ("softmax_ce", lambda t: T.softmax_cross_entropy(t, labels), x2),
        ("bce", lambda t: T.bce_with_logits(t, soft), x2[:, 0].copy()),
    ]


def test_criterion_01_gradient_correctness(record):
    start = time.perf_counter()
    spec = ClassifierSpec(input_shape=(1, 8, 8), widths=(4, 6, 8), num_classes=3)
    worst = {}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for name, fn, x in _primitive_cases(rng):
            _, g = T.grad_of(fn, x)
            fd = finite_difference_gradient(lambda v: fn(T.constant(v)).item(), x, 1e-5)
            worst[name] = max(worst.get(name, 0.0), norm_rel_err(g, fd))
        c = build_classifier(spec, seed)
        d = build_discriminator(DiscriminatorSpec.for_classifier(spec, branch_widths=(8, 8), trunk_widths=(8, 4)), seed)
        x = rng.uniform(0, 1, (2, 1, 8, 8))
        y = rng.integers(0, 3, 2)

        def end_to_end(t):
            logits, lo, hi = c.forward(t)
            ld = T.bce_with_logits(d.logit(lo, hi), np.array([0.0, 1.0]))
            return T.add(T.sub(T.softmax_cross_entropy(logits, y), T.scale(ld, 0.5)), T.tsum(discriminate(d, lo, hi)))

        _, g = T.grad_of(end_to_end, x)
        fd = finite_difference_gradient(lambda v: end_to_end(T.constant(v)).item(), x, 1e-5)
        worst["classifier+discriminator"] = max(worst.get("classifier+discriminator", 0.0), norm_rel_err(g, fd))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and elapsed < 60
    record(1, ok, f"max rel err {worst[top]:.2e} ({top}) over 20 seeds, {len(worst)} checks each, {elapsed:.1f}s")
    assert ok, worst


def test_criterion_02_containment(record):
    start = time.perf_counter()
    spec = ClassifierSpec(input_shape=(1, 6, 6), widths=(3, 4, 5), num_classes=3)
    c = build_classifier(spec, 0)
    d = build_discriminator(DiscriminatorSpec.for_classifier(spec, branch_widths=(4,), trunk_widths=(4,)), 0)
    rng = np.random.default_rng(2024)
    kinds = KINDS + ("purify",)
    violations, calls = 0, 0
    for i in range(10_000):
        kind = kinds[i % len(kinds)]
        x = rng.uniform(0, 1, (2, 1, 6, 6))
        if rng.random() < 0.3:
            x = np.round(x)
        eps = float(rng.choice([0.0, rng.uniform(0, 0.5)]))
        step = float(rng.uniform(0, 0.2))
        iters = int(rng.integers(0, 4))
        if kind == "purify":
            out = purify(c, d, x, PurifyConfig(eps, step, iters, bool(rng.random() < 0.5)))
        else:
            cfg = AttackConfig(
                kind=kind,
                epsilon=eps,
                step_size=step,
                iterations=iters,
                random_start=bool(rng.random() < 0.5),
                lam=float(rng.uniform(0, 10)),
                cw_constant=float(rng.uniform(0, 50)),
                cw_lr=float(rng.uniform(0, 0.5)),
                deepfool_overshoot=float(rng.uniform(0, 0.5)),
                deepfool_candidates=int(rng.integers(1, 3)),
                seed=i,
            )
            out = run_attack(c, x, rng.integers(0, 3, 2), cfg, d)
        calls += 1
        if np.max(np.abs(out - x)) > eps + 1e-12 or out.min() < 0 or out.max() > 1:
            violations += 1
    elapsed = time.perf_counter() - start
    ok = violations == 0 and calls == 10_000 and elapsed < 120
    record(2, ok, f"{violations} violations in {calls} calls over {len(kinds)} operations, {elapsed:.1f}s")
    assert ok


def test_criterion_03_avmixup_algebra(record):
    rng = np.random.default_rng(3)
    n = 10_000
    x = rng.uniform(0, 1, n)
    delta = rng.uniform(-12 / 255, 12 / 255, n)
    gamma = rng.uniform(1, 3, n)
    u = rng.uniform(0, 1, n)
    u[:10] = 0.0
    u[10:20] = 1.0
    x_hat, t_hat = avmixup_sample(x, delta, gamma, u)
    offset = (1 - u) * (gamma * delta)
    # one rounding in the sum and one in the difference, each within the larger operand's spacing
    ulp = np.spacing(np.maximum(np.abs(x), np.abs(x_hat)))
    algebra_ok = np.all(np.abs((x_hat - x) - offset) <= ulp)
    # exact rational oracle on a sample, with slack for the three roundings inside the offset
    oracle_ok = all(
        abs(Fraction(x_hat[i]) - (Fraction(x[i]) + (1 - Fraction(u[i])) * Fraction(gamma[i]) * Fraction(delta[i])))
        <= Fraction(np.spacing(abs(x_hat[i]))) + 4 * Fraction(np.spacing(abs(offset[i])))
        for i in range(0, n, 50)
    )
    target_ok = np.array_equal(t_hat, 1 - u)
    ends_ok = np.array_equal(x_hat[10:20], x[10:20]) and np.array_equal(x_hat[:10], x[:10] + gamma[:10] * delta[:10])
    ends_ok = ends_ok and np.all(t_hat[:10] == 1.0) and np.all(t_hat[10:20] == 0.0)
    ok = bool(algebra_ok and oracle_ok and target_ok and ends_ok)
    record(3, ok, f"{n} draws: offset within 1 ulp={bool(algebra_ok)}, targets exact={target_ok}, endpoints exact={bool(ends_ok)}")
    assert ok


def test_criterion_04_purification_degeneracies(record):
    spec = ClassifierSpec(input_shape=(1, 8, 8), widths=(4, 6, 8), num_classes=3)
    identity_ok, zero_ok, step_ok, checked = True, True, True, 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        c = build_classifier(spec, seed)
        d = build_discriminator(DiscriminatorSpec.for_classifier(spec, branch_widths=(8,), trunk_widths=(8,)), seed)
        x = rng.uniform(0, 1, (16, 1, 8, 8))
        eps, alpha = float(rng.uniform(0, 0.2)), float(rng.uniform(0.001, 0.05))
        identity_ok &= np.array_equal(purify(c, d, x, PurifyConfig(eps, alpha, 0)), x)
        prev = x
        for stepped, x_pur in purification_path(c, d, x, PurifyConfig(eps, alpha, 8)):
            s = np.round((prev - stepped) / alpha)
            step_ok &= set(np.unique(s)) <= {-1.0, 0.0, 1.0} and np.array_equal(stepped, prev - alpha * s)
            prev = x_pur
            checked += stepped.size
        d.params["out.weight"][:] = 0.0
        zero_ok &= np.array_equal(purify(c, d, x, PurifyConfig(eps, alpha, 8)), x)
    ok = bool(identity_ok and zero_ok and step_ok)
    record(4, ok, f"N=0 identity={bool(identity_ok)}, zero-gradient identity={bool(zero_ok)}, step in {{-a,0,a}} on {checked} coordinates={bool(step_ok)}")
    assert ok


def test_criterion_05_natural_vulnerability(pipelines, record):
    start = time.perf_counter()
    clean = [pipelines[s].accuracy("natural", pipelines[s].test.images) for s in SEEDS]
    robust = [pipelines[s].accuracy("natural", pipelines[s].adv("natural", "pgd")) for s in SEEDS]
    elapsed = time.perf_counter() - start
    ok = median(clean) >= 0.95 and median(robust) <= 0.10 and elapsed < 600
    record(5, ok, f"clean {clean}, PGD-40 at 12/255 {robust}, median {median(robust):.3f}, {elapsed:.0f}s")
    assert ok


def test_criterion_06_detector_auc(pipelines, record):
    start = time.perf_counter()
    aucs = []
    for s in SEEDS:
        p = pipelines[s]
        d = p.disc("natural", "avmixup")
        aucs.append(auc(scores(p.natural, d, p.test.images), scores(p.natural, d, p.adv("natural", "pgd"))))
    elapsed = time.perf_counter() - start
    ok = median(aucs) >= 0.85 and elapsed < 600
    record(6, ok, f"AUC {[round(a, 3) for a in aucs]}, median {median(aucs):.3f}, {elapsed:.0f}s")
    assert ok


def test_criterion_07_addon_boost(pipelines, record):
    start = time.perf_counter()
    before = [pipelines[s].worst("madry") for s in SEEDS]
    after = [pipelines[s].worst("madry", "avmixup") for s in SEEDS]
    gains = [a - b for a, b in zip(after, before)]
    elapsed = time.perf_counter() - start
    ok = median(gains) > 0 and median(after) > median(before) and elapsed < 1200
    record(7, ok, f"worst Madry {before} -> +purifier {after}, median gain {median(gains):+.3f}, {elapsed:.0f}s")
    assert ok


def test_criterion_08_ablation_order(pipelines, record):
    start = time.perf_counter()
    table = {m: [pipelines[s].worst("madry", m) for s in SEEDS] for m in MODES}
    medians = {m: median(v) for m, v in table.items()}
    diffs = [a - b for a, b in zip(table["avmixup"], table["none"])]
    elapsed = time.perf_counter() - start
    # paired over seeds: both discriminators sit on the same classifier and test set
    ok = median(diffs) >= 0
    order = ", ".join(f"{m} {medians[m]:.3f}" for m in MODES)
    record(8, ok, f"avmixup-none per seed {[round(d, 3) for d in diffs]} median {median(diffs):+.3f}; median worst: {order}, {elapsed:.0f}s")
    assert ok


def test_criterion_09_aux_aware(pipelines, record):
    start = time.perf_counter()
    lines, ok = [], True
    for lam in LAMBDAS:
        before, after = [], []
        for s in SEEDS:
            p = pipelines[s]
            x = p.adv("madry", "aux_aware_pgd", lam)
            before.append(p.accuracy("madry", x))
            after.append(p.purified_accuracy("madry", "avmixup", x))
        gains = [a - b for a, b in zip(after, before)]
        # same pairing as the add-on criterion: median over seeds of the per-seed improvement
        ok &= median(gains) >= 0
        lines.append(
            f"lam={lam:g}: gains {[round(g, 3) for g in gains]} median {median(gains):+.3f}"
            f" (median acc {median(before):.3f}->{median(after):.3f})"
        )
    elapsed = time.perf_counter() - start
    record(9, ok, f"{'; '.join(lines)}, {elapsed:.0f}s")
    assert ok


def test_criterion_10_worst_case_oracle(record):
    value = worst_case_accuracy([38.17, 59.08, 28.34, 22.63])
    ok = value == 22.63
    record(10, ok, f"worst of (38.17, 59.08, 28.34, 22.63) = {value}")
    assert ok


PIPELINE_SETTINGS = [
    "data.train_size=400",
    "data.test_size=60",
    "data.size=16",
    "model.widths=8,12,16",
    "train.epochs=2",
    "madry.epochs=1",
    "madry.iterations=2",
    "madry.ramp_steps=4",
    "avmixup.iterations=3",
    "disc.branch_widths=16",
    "disc.trunk_widths=16",
    "attack.iterations=5",
    "attack.lambdas=0,1",
    "eval.batch_size=16",
    "purify.iterations=3",
]


def _run_pipeline(root, workers: int, monkeypatch):
    # identical command lines: every run works in its own directory with the same relative paths
    root.mkdir()
    monkeypatch.chdir(root)
    sets = []
    for s in PIPELINE_SETTINGS + [f"eval.workers={workers}"]:
        sets += ["--set", s]
    seed = ["--seed", "11"]
    steps = [
        ["train-classifier", "--out", "natural.aidp"],
        ["train-madry", "--init", "natural.aidp", "--out", "madry.aidp"],
        ["train-purifier", "--classifier", "madry.aidp", "--out", "disc.aidp"],
        ["evaluate", "--classifier", "madry.aidp", "--discriminator", "disc.aidp", "--out", "report.json", "--csv", "report.csv"],
    ]
    for step in steps:
        assert main(step + seed + sets) == 0, step
    return {p.name: p.read_bytes() for p in sorted(root.iterdir())}


def test_criterion_11_determinism(tmp_path, monkeypatch, record):
    start = time.perf_counter()
    first = _run_pipeline(tmp_path / "a", 1, monkeypatch)
    second = _run_pipeline(tmp_path / "b", 1, monkeypatch)
    threaded = _run_pipeline(tmp_path / "c", 3, monkeypatch)
    same = first == second == threaded
    differ = sorted(k for k in first if not first[k] == second.get(k) == threaded.get(k))
    elapsed = time.perf_counter() - start
    record(11, same, f"{len(first)} artifacts byte-identical across two runs and --workers 1/3: {same} {differ or ''}, {elapsed:.0f}s")
    assert same


def test_criterion_12_timing_linearity(pipelines, record):
    p = pipelines[0]
    c, d = p.madry, p.disc("madry", "avmixup")
    images = p.test.images[:20]
    # alternate the two settings in rounds so slow drift in machine load hits both alike
    ten, twenty = [], []
    for _ in range(5):
        ten.append(measure_timing(c, d, images, PURIFY, repeats=20, warmup=2))
        twenty.append(measure_timing(c, d, images, PurifyConfig(PURIFY.epsilon, PURIFY.alpha, 20), repeats=20, warmup=2))
    ten, twenty = median(ten), median(twenty)
    ratio = twenty / ten
    ok = 1.8 <= ratio <= 2.2
    record(12, ok, f"N=10 {ten * 1e3:.2f} ms/image, N=20 {twenty * 1e3:.2f} ms/image, ratio {ratio:.3f}")
    assert ok
