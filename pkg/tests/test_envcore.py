import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefcal.envcore import (
    Environment,
    PolicyParams,
    implicit_reward,
    implicit_rewards,
    log_partition,
    normalize_rewards,
    optimal_policy,
    optimal_policy_params,
    preference_score,
    softmax,
)
from prefcal.errors import InvalidEnvironmentError, InvalidInputError, InvalidParameterError

from conftest import make_env, make_policy

finite = st.floats(-50, 50, allow_nan=False)


def policy_with_probs(env, rows):
    return PolicyParams.from_rows([np.log(r) for r in rows])


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)

    def test_ratio_two_to_one(self):
        np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)

    def test_three_logits(self):
        np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), [0.090031, 0.244728, 0.665241], atol=1e-6)

    @pytest.mark.parametrize("bad", [[0.0, math.nan], [math.inf, 0.0], [-math.inf, 1.0]])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(InvalidInputError):
            softmax(bad)

    def test_large_logits_do_not_overflow(self):
        p = softmax([1000.0, 999.0])
        np.testing.assert_allclose(p, [1 / (1 + math.exp(-1)), 1 / (1 + math.e)], rtol=1e-12)

    @given(st.lists(finite, min_size=1, max_size=10), st.floats(-100, 100))
    def test_shift_invariance(self, v, c):
        np.testing.assert_allclose(softmax(np.array(v) + c), softmax(v), atol=1e-12)

    @given(st.lists(finite, min_size=1, max_size=10))
    def test_is_distribution(self, v):
        p = softmax(v)
        assert abs(p.sum() - 1.0) < 1e-12 and np.all(p >= 0)


class TestEnvironment:
    def test_ref_is_softmax_of_logits(self):
        env = Environment.from_rows([[0.0, 0.0, 0.0]], [[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(env.ref_probs(0), softmax([1.0, 2.0, 3.0]), atol=1e-15)

    def test_ragged_response_counts(self):
        env = Environment.from_rows([[0.0, 1.0], [1.0, 2.0, 3.0, 4.0]])
        assert env.sizes == (2, 4) or list(env.sizes) == [2, 4]
        assert env.n_entries == 6
        np.testing.assert_allclose(env.rewards(1), [1, 2, 3, 4])

    def test_reference_support_floor(self):
        with pytest.raises(InvalidEnvironmentError):
            Environment.from_rows([[0.0, 0.0]], [[0.0, -40.0]])

    def test_non_finite_reward_rejected(self):
        with pytest.raises((InvalidEnvironmentError, InvalidInputError)):
            Environment.from_rows([[0.0, math.nan]])

    def test_json_roundtrip_and_fingerprint(self, rng, tmp_path):
        env = make_env(rng)
        path = tmp_path / "env.json"
        path.write_text(env.to_json())
        back = Environment.load(path)
        assert back.to_json() == env.to_json()
        assert back.fingerprint == env.fingerprint
        doc = env.to_dict()
        assert set(doc) == {"prompts", "responses", "reward", "ref_logits"}

    def test_fingerprint_sensitive_to_rewards(self, rng):
        env = make_env(rng)
        other = env.with_rewards(env.reward + 1e-9)
        assert other.fingerprint != env.fingerprint

    def test_index_out_of_range(self, two_arm):
        with pytest.raises(InvalidInputError):
            two_arm.index(0, 2)
        with pytest.raises(InvalidInputError):
            two_arm.index(1, 0)


class TestImplicitReward:
    def setup_method(self):
        self.env = Environment.from_rows([[0.0, 0.0]], [[math.log(0.4), math.log(0.6)]])

    def test_identity_policy_is_zero(self):
        pol = PolicyParams.from_ref(self.env)
        assert implicit_reward(pol, self.env, 0, 0) == 0.0
        assert implicit_reward(pol, self.env, 0, 1) == 0.0

    def test_ln2(self):
        pol = policy_with_probs(self.env, [[0.8, 0.2]])
        assert implicit_reward(pol, self.env, 0, 0) == pytest.approx(0.693147, abs=1e-6)

    def test_minus_ln2(self):
        pol = policy_with_probs(self.env, [[0.7, 0.3]])
        assert implicit_reward(pol, self.env, 0, 1) == pytest.approx(-0.693147, abs=1e-6)

    def test_out_of_range(self):
        pol = PolicyParams.zeros(self.env)
        with pytest.raises(InvalidInputError):
            implicit_reward(pol, self.env, 0, 5)

    def test_antisymmetric_under_swap(self, rng):
        env = make_env(rng)
        pol = make_policy(env, rng)
        swapped = Environment(env.sizes, env.reward, pol.logits)
        as_policy = PolicyParams(env.ref_logits, pol.sizes)
        np.testing.assert_array_equal(implicit_rewards(as_policy, swapped), -implicit_rewards(pol, env))


class TestPreferenceScore:
    def test_identity_policy(self, rng):
        env = make_env(rng)
        pol = PolicyParams.from_ref(env)
        assert preference_score(pol, env, 0, 0, 1) == pytest.approx(0.0, abs=1e-15)

    def test_difference(self):
        env = Environment.from_rows([[0.0, 0.0, 0.0]])
        lp = np.log(1 / 3) + np.array([0.7, -0.2, 0.0])
        lp = lp - np.log(np.exp(lp).sum())  # implicit rewards shift together; the difference is 0.9
        pol = PolicyParams.from_rows([lp])
        assert preference_score(pol, env, 0, 0, 1) == pytest.approx(0.9, abs=1e-12)

    def test_same_response_rejected(self, two_arm):
        with pytest.raises(InvalidInputError):
            preference_score(PolicyParams.zeros(two_arm), two_arm, 0, 1, 1)

    def test_matches_raw_log_probabilities(self, rng):
        env = make_env(rng, prompts=(2, 2))
        pol = make_policy(env, rng)
        x = 1
        logits = np.asarray(pol.rows()[x])
        ref_logits = np.asarray(env.ref_logits[env.offsets[x] : env.offsets[x] + env.sizes[x]])
        lp = logits - math.log(sum(math.exp(v) for v in logits))
        lr = ref_logits - math.log(sum(math.exp(v) for v in ref_logits))
        expected = (lp[0] - lr[0]) - (lp[1] - lr[1])
        assert preference_score(pol, env, x, 0, 1) == pytest.approx(expected, abs=1e-12)


class TestOptimalPolicy:
    def test_constant_reward_gives_reference(self):
        env = Environment.from_rows([[3.0, 3.0, 3.0]], [[0.1, -0.4, 0.9]])
        np.testing.assert_allclose(optimal_policy(env, 0.3, 0), env.ref_probs(0), atol=1e-15)

    def test_two_arm(self, two_arm):
        np.testing.assert_allclose(optimal_policy(two_arm, 1.0, 0), [0.731059, 0.268941], atol=1e-6)

    def test_large_beta(self, rng):
        env = make_env(rng)
        for x in range(env.n_prompts):
            tv = 0.5 * np.abs(optimal_policy(env, 1e6, x) - env.ref_probs(x)).sum()
            assert tv < 1e-5

    def test_bad_beta(self, two_arm):
        for beta in (0.0, -1.0, math.nan):
            with pytest.raises(InvalidParameterError):
                optimal_policy(two_arm, beta, 0)

    def test_small_beta_no_overflow(self):
        env = Environment.from_rows([[1.0, -1.0, 0.5]])
        p = optimal_policy(env, 1e-3, 0)
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)

    @given(st.integers(0, 2**32 - 1), st.floats(1e-2, 1.0))
    @settings(max_examples=50)
    def test_normalized_and_positive(self, seed, beta):
        env = make_env(np.random.default_rng(seed))
        for x in range(env.n_prompts):
            p = optimal_policy(env, beta, x)
            assert abs(p.sum() - 1.0) < 1e-12 and np.all(p > 0)

    @given(st.integers(0, 2**32 - 1), st.floats(1e-2, 1.0), st.floats(-5, 5))
    @settings(max_examples=50)
    def test_reward_shift(self, seed, beta, c):
        env = make_env(np.random.default_rng(seed))
        shifted = env.with_rewards(env.reward + c)
        for x in range(env.n_prompts):
            np.testing.assert_allclose(optimal_policy(shifted, beta, x), optimal_policy(env, beta, x), atol=1e-10)
            assert log_partition(shifted, beta, x) - log_partition(env, beta, x) == pytest.approx(c / beta, abs=1e-10)


class TestLogPartition:
    def test_zero_reward(self):
        env = Environment.from_rows([[0.0, 0.0, 0.0]], [[0.3, 0.1, -2.0]])
        assert log_partition(env, 0.5, 0) == pytest.approx(0.0, abs=1e-15)

    def test_two_arm(self, two_arm):
        assert log_partition(two_arm, 1.0, 0) == pytest.approx(0.620115, abs=1e-6)
        assert log_partition(two_arm, 1.0, 0) == pytest.approx(math.log(0.5 * (math.e + 1)), abs=1e-15)

    def test_constant_reward(self):
        env = Environment.from_rows([[2.0, 2.0]], [[0.0, 1.0]])
        assert log_partition(env, 0.25, 0) == pytest.approx(8.0, abs=1e-12)

    def test_bad_beta(self, two_arm):
        with pytest.raises(InvalidParameterError):
            log_partition(two_arm, 0.0, 0)

    def test_normalize_rewards_zeroes_partition(self, rng):
        env = normalize_rewards(make_env(rng), 0.2)
        for x in range(env.n_prompts):
            assert abs(log_partition(env, 0.2, x)) < 1e-12

    def test_optimal_policy_params(self, rng):
        env = make_env(rng)
        pol = optimal_policy_params(env, 0.5)
        for x in range(env.n_prompts):
            np.testing.assert_allclose(pol.probs(x), optimal_policy(env, 0.5, x), atol=1e-14)
