import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aidp import tensor as T
from aidp.attacks import clip_to_ball
from aidp.errors import ConfigError
from aidp.models import ClassifierSpec, DiscriminatorSpec, build_classifier, build_discriminator
from aidp.purifier import PurifyConfig, purification_path, purify, score_gradient

SMALL = ClassifierSpec(input_shape=(1, 8, 8), widths=(4, 6, 8), num_classes=3)


def small_pair(seed=0):
    c = build_classifier(SMALL, seed)
    d = build_discriminator(DiscriminatorSpec.for_classifier(SMALL, branch_widths=(8,), trunk_widths=(8,)), seed)
    return c, d


class PassThrough:
    """Classifier stand-in whose taps are the input itself."""

    def forward(self, xt):
        return xt, xt, xt


class ThreeX:
    """Discriminator stand-in with logit 3x on a single feature."""

    def logit(self, h_low, h_high):
        return T.affine(h_low, T.constant(np.array([[3.0]])), T.constant(np.zeros(1)))


def test_zero_iterations_is_identity():
    c, d = small_pair()
    x = np.random.default_rng(0).uniform(size=(4, 1, 8, 8))
    np.testing.assert_array_equal(purify(c, d, x, PurifyConfig(iterations=0)), x)


def test_zero_final_layer_is_identity():
    c, d = small_pair(1)
    d.params["out.weight"][:] = 0.0
    x = np.random.default_rng(1).uniform(size=(4, 1, 8, 8))
    np.testing.assert_array_equal(purify(c, d, x, PurifyConfig()), x)


@pytest.mark.parametrize(
    "x0,n,expected",
    [
        (0.5, 3, 0.47),  # three unclipped steps of -0.01
        (0.5, 10, 0.45),  # stopped by the ball at x - eps
        (0.02, 10, 0.0),  # stopped by the unit box
    ],
)
def test_one_dimensional_surrogate(x0, n, expected):
    cfg = PurifyConfig(epsilon=0.05, alpha=0.01, iterations=n)
    out = purify(PassThrough(), ThreeX(), np.array([[x0]]), cfg)
    assert out[0, 0] == pytest.approx(expected, abs=1e-12)


def test_surrogate_gradient_matches_finite_differences():
    x = np.array([[0.3]])
    _, g = score_gradient(PassThrough(), ThreeX(), x)
    fd = T.finite_difference_gradient(lambda v: float(1 / (1 + np.exp(-3 * v[0, 0]))), x)
    assert g[0, 0] == pytest.approx(fd[0, 0], rel=1e-8)
    _, gz = score_gradient(PassThrough(), ThreeX(), x, use_logit=True)
    assert gz[0, 0] == pytest.approx(3.0, abs=1e-12)


def test_pre_clip_movement_is_plus_minus_alpha_or_zero():
    c, d = small_pair(2)
    x = np.random.default_rng(2).uniform(size=(6, 1, 8, 8))
    cfg = PurifyConfig(epsilon=0.1, alpha=0.02, iterations=6)
    prev = x
    for stepped, x_pur in purification_path(c, d, x, cfg):
        s = np.round((prev - stepped) / cfg.alpha)
        assert set(np.unique(s)) <= {-1.0, 0.0, 1.0}
        np.testing.assert_array_equal(stepped, prev - cfg.alpha * s)
        prev = x_pur


def test_clip_lines_are_idempotent():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(50,))
    v = x + rng.uniform(-0.3, 0.3, size=50)
    once = np.clip(clip_to_ball(v, x, 0.1), 0, 1)
    twice = np.clip(clip_to_ball(once, x, 0.1), 0, 1)
    np.testing.assert_array_equal(once, twice)


def test_purify_is_deterministic():
    c, d = small_pair(4)
    x = np.random.default_rng(4).uniform(size=(3, 1, 8, 8))
    np.testing.assert_array_equal(purify(c, d, x, PurifyConfig()), purify(c, d, x, PurifyConfig()))


def test_presets_and_validation():
    assert PurifyConfig.preset("svhn-paper") == PurifyConfig(12 / 255, 3 / 255, 10)
    assert PurifyConfig.preset("cifar10-paper") == PurifyConfig(8 / 255, 2 / 255, 10)
    assert PurifyConfig.preset("cifar100-paper") == PurifyConfig(16 / 255, 2 / 255, 20)
    with pytest.raises(ConfigError):
        PurifyConfig(alpha=-1).validate()


_C, _D = small_pair(9)


@settings(max_examples=30, deadline=None)
@given(eps=st.floats(0, 0.3), alpha=st.floats(0, 0.1), n=st.integers(0, 5), seed=st.integers(0, 2**16), logit=st.booleans())
def test_containment(eps, alpha, n, seed, logit):
    x = np.random.default_rng(seed).uniform(size=(2, 1, 8, 8))
    out = purify(_C, _D, x, PurifyConfig(eps, alpha, n, logit))
    assert np.max(np.abs(out - x)) <= eps + 1e-12
    assert out.min() >= 0 and out.max() <= 1
