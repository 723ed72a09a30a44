import math

import numpy as np
import pytest

from curridet.augment import AugConfig
from curridet.schedules import (
    PolicyBundle,
    Schedule,
    covariance_diagnostic,
    default_bundle,
    eval_schedule,
    sample_unlabelled,
    snapshot,
)


class TestEvalSchedule:
    def test_cosine_momentum_endpoints(self):
        s = Schedule("cosine", 0.998, 0.9998)
        assert eval_schedule(s, 0, 1000) == pytest.approx(0.998, abs=1e-12)
        assert eval_schedule(s, 1000, 1000) == pytest.approx(0.9998, abs=1e-12)

    def test_cosine_midpoint(self):
        s = Schedule("cosine", 0.998, 0.9998)
        assert eval_schedule(s, 500, 1000) == pytest.approx(0.9989, abs=1e-12)

    def test_linear_midpoint(self):
        s = Schedule("linear", 0.1, 1.0)
        assert eval_schedule(s, 50, 100) == pytest.approx(0.55, abs=1e-12)

    def test_arctan_midpoint(self):
        s = Schedule("arctan", 0.1, 0.6, steepness=5.0)
        expected = 0.1 + 0.5 * math.atan(2.5) / math.atan(5.0)
        assert eval_schedule(s, 50, 100) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.5333, abs=5e-4)

    def test_warmup_cooldown(self):
        s = Schedule("linear-warmup-cooldown", 0.0, 1.0, warmup_frac=0.25, cooldown_frac=0.25)
        assert eval_schedule(s, 0, 100) == 0.0
        assert eval_schedule(s, 24, 100) == 0.0
        assert eval_schedule(s, 75, 100) == 1.0
        assert eval_schedule(s, 100, 100) == 1.0
        assert eval_schedule(s, 50, 100) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize(
        "s",
        [
            Schedule("constant", 0.3, 0.3),
            Schedule("linear", 0.1, 1.0),
            Schedule("cosine", 0.998, 0.9998),
            Schedule("arctan", 0.1, 0.6, steepness=5.0),
        ],
    )
    def test_endpoints_exact(self, s):
        assert eval_schedule(s, 0, 777) == pytest.approx(s.v_start, abs=1e-12)
        end = s.v_start if s.shape == "constant" else s.v_end
        assert eval_schedule(s, 777, 777) == pytest.approx(end, abs=1e-12)

    @pytest.mark.parametrize(
        "s",
        [
            Schedule("linear", 0.1, 1.0),
            Schedule("cosine", 0.998, 0.9998),
            Schedule("arctan", 0.1, 0.6, steepness=5.0),
            Schedule("linear-warmup-cooldown", 0.0, 1.0, warmup_frac=0.2, cooldown_frac=0.2),
        ],
    )
    def test_monotone_on_dense_grid(self, s):
        vals = [eval_schedule(s, t, 1000) for t in range(1001)]
        assert all(b - a >= -1e-12 for a, b in zip(vals, vals[1:]))

    def test_zero_total_rejected(self):
        with pytest.raises(ValueError):
            eval_schedule(Schedule.constant(1.0), 0, 0)

    def test_bad_shape_rejected(self):
        with pytest.raises(ValueError):
            Schedule("quadratic", 0, 1)


class TestSnapshot:
    def test_default_bundle_start(self):
        snap = snapshot(default_bundle(), 0, 1000)
        assert snap.pi_t == 0.0  # warmup
        assert snap.alpha_t == pytest.approx(0.1)
        assert snap.sigma_t == pytest.approx(0.1)
        assert snap.m_t == pytest.approx(0.998)

    def test_default_bundle_end(self):
        snap = snapshot(default_bundle(), 1000, 1000)
        assert snap.pi_t == 1.0
        assert snap.alpha_t == pytest.approx(1.0)
        assert snap.sigma_t == pytest.approx(0.6)
        assert snap.m_t == pytest.approx(0.9998)

    def test_constant_bundle_time_invariant(self):
        b = PolicyBundle(
            pi=Schedule.constant(0.5),
            alpha=Schedule.constant(0.3),
            sigma=Schedule.constant(0.4),
            momentum=Schedule.constant(0.999),
            aug=AugConfig(),
        )
        snaps = [snapshot(b, t, 100) for t in (0, 37, 100)]
        assert all(s == snaps[0] for s in snaps)


class TestSampleUnlabelled:
    def test_extremes(self):
        rng = np.random.default_rng(0)
        assert sample_unlabelled([1, 2, 3], 0.0, rng) == []
        assert sample_unlabelled([1, 2, 3], 1.0, rng) == [1, 2, 3]

    def test_binomial_mean(self):
        rng = np.random.default_rng(7)
        total = sum(len(sample_unlabelled(list(range(8)), 0.5, rng)) for _ in range(10_000))
        mean = total / 10_000
        # binomial(8, .5): se of the mean over 10k trials ~ 0.014
        assert abs(mean - 4.0) < 0.1

    def test_determinism(self):
        a = sample_unlabelled(list(range(20)), 0.3, np.random.default_rng(5))
        b = sample_unlabelled(list(range(20)), 0.3, np.random.default_rng(5))
        assert a == b


class TestCovarianceDiagnostic:
    def test_constant_probs(self):
        assert covariance_diagnostic([1.0, 5.0, 2.0], [0.3, 0.3, 0.3]) == 0.0

    def test_direct_value(self):
        assert covariance_diagnostic([1, 2, 3], [1, 2, 3]) == pytest.approx(2 / 3)

    def test_antimonotone_negative(self):
        assert covariance_diagnostic([3, 2, 1], [0.1, 0.5, 0.9]) < 0

    def test_permutation_invariant(self):
        losses, probs = [1.0, 4.0, 2.0, 8.0], [0.2, 0.3, 0.9, 0.1]
        v = covariance_diagnostic(losses, probs)
        perm = [2, 0, 3, 1]
        assert covariance_diagnostic(
            [losses[i] for i in perm], [probs[i] for i in perm]
        ) == pytest.approx(v)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            covariance_diagnostic([1.0], [0.5])
