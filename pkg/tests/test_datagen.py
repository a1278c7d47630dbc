import numpy as np
import pytest

from dfwhittle.core import RmabError, RmabInstance, ladder_reward, make_rng, validate_instance
from dfwhittle.datagen import (DatasetSpec, FeatureNetwork, dataset_hash, dominance_holds, generate_dataset,
                               generate_features, generate_kernels, read_dataset, rollout_behavior, simplex_rows,
                               write_dataset)


class TestSpec:
    def test_defaults(self):
        s = DatasetSpec()
        assert (s.arms, s.states, s.budget, s.horizon, s.gamma, s.trajectories, s.feature_dim) == \
            (100, 2, 20, 10, 0.99, 10, 16)

    @pytest.mark.parametrize("kw", [dict(arms=0), dict(budget=200), dict(states=1), dict(gamma=1.0),
                                    dict(observability="noisy"), dict(states=3, observability="collapsing")])
    def test_invalid(self, kw):
        with pytest.raises(RmabError):
            DatasetSpec(**kw)

    def test_json_round_trip(self):
        s = DatasetSpec(3, 5, 3, 2, 4, 0.9, 2, 6, 7)
        assert DatasetSpec.from_json(s.to_json()) == s


class TestKernels:
    def test_simplex_rows(self):
        rows = simplex_rows(make_rng(0), (1000,), 4)
        np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(rows >= 0)
        np.testing.assert_allclose(rows.mean(axis=0), 0.25, atol=0.03)

    def test_two_state_dominance(self):
        k = generate_kernels(DatasetSpec(arms=200), make_rng(1))
        assert np.all(k[:, :, 1, 1] > k[:, :, 0, 1] + 1e-3)

    def test_five_state_sweep(self):
        spec = DatasetSpec(arms=1000, states=5, budget=1)
        k = generate_kernels(spec, make_rng(2))
        r = ladder_reward(5)
        assert np.all((k[:, :, 1] - k[:, :, 0]) @ r > 1e-3)
        assert np.all(dominance_holds(k, r))

    def test_seeded(self):
        spec = DatasetSpec(arms=10, budget=1)
        np.testing.assert_array_equal(generate_kernels(spec, make_rng(3)), generate_kernels(spec, make_rng(3)))

    def test_exhausted_rejection(self):
        # a constant reward makes the dominance margin unattainable
        with pytest.raises(RmabError, match="rejection exhausted"):
            generate_kernels(DatasetSpec(arms=1, budget=1), make_rng(4), reward=np.ones(2))


class TestFeatures:
    def test_identical_kernels(self):
        k = generate_kernels(DatasetSpec(arms=1, budget=1), make_rng(5))
        f = generate_features(np.concatenate([k, k]), 16, make_rng(6))
        np.testing.assert_array_equal(f[0], f[1])

    def test_zero_network_gives_bias(self):
        net = FeatureNetwork(8, 4, make_rng(7))
        net.layers = [(np.zeros_like(w), b if j == 2 else np.zeros_like(b)) for j, (w, b) in enumerate(net.layers)]
        out = net(np.random.default_rng(0).uniform(size=(3, 2, 2, 2)))
        np.testing.assert_array_equal(out, np.tile(net.layers[2][1], (3, 1)))

    def test_shape(self):
        k = generate_kernels(DatasetSpec(arms=4, budget=1, states=3), make_rng(8))
        assert generate_features(k, 16, make_rng(9)).shape == (4, 16)


class TestRollout:
    def inst(self, n=4, k=1, horizon=10):
        arms = generate_kernels(DatasetSpec(arms=n, budget=k), make_rng(10))
        return RmabInstance(arms, ladder_reward(2), k, horizon, 0.9)

    def test_all_pulled(self):
        trajs = rollout_behavior(self.inst(3, 3), 2, make_rng(11))
        for t in trajs:
            np.testing.assert_array_equal(t.actions, 1)
            np.testing.assert_array_equal(t.behavior_probs, 1.0)

    def test_exactly_k_per_step(self):
        for t in rollout_behavior(self.inst(6, 2), 5, make_rng(12)):
            np.testing.assert_array_equal(t.actions.sum(axis=1), 2)
            np.testing.assert_allclose(t.behavior_probs, np.where(t.actions == 1, 1 / 3, 2 / 3), atol=1e-15)

    def test_pull_counts_concentrate(self):
        trajs = rollout_behavior(self.inst(4, 1, 100), 100, make_rng(13))
        counts = sum(t.actions.sum(axis=0) for t in trajs)
        assert np.all(np.abs(counts - 2500) <= 150)

    def test_deterministic_kernels_follow_actions(self):
        arms = np.zeros((2, 2, 2, 2))
        arms[:, :, 0, 0] = 1.0
        arms[:, :, 1, 1] = 1.0
        inst = RmabInstance(arms, ladder_reward(2), 1, 6, 0.9)
        for t in rollout_behavior(inst, 3, make_rng(14)):
            np.testing.assert_array_equal(t.states[1:], t.actions[:-1])

    def test_rewards_match_states(self):
        inst = self.inst()
        for t in rollout_behavior(inst, 2, make_rng(15)):
            np.testing.assert_array_equal(t.rewards, inst.reward[t.states])


class TestDataset:
    def test_instances_valid(self):
        for item in generate_dataset(DatasetSpec(3, 6, 3, 2, 4, 0.9, 2, 5, 1)):
            assert validate_instance(item.instance) == []
            assert np.all(dominance_holds(item.instance.arms, item.instance.reward))
            assert item.features.shape == (6, 5)
            assert len(item.trajectories) == 2

    def test_write_read_hash(self, tmp_path):
        spec = DatasetSpec(2, 4, 2, 1, 3, 0.9, 2, 4, 3)
        h1 = write_dataset(tmp_path / "a", spec, generate_dataset(spec))
        h2 = write_dataset(tmp_path / "b", spec, generate_dataset(spec))
        assert h1 == h2 == dataset_hash(tmp_path / "a")
        feat = tmp_path / "a" / "features_0.json"
        feat.write_bytes(feat.read_bytes() + b"\n")
        assert dataset_hash(tmp_path / "a") != h2
        back_spec, back = read_dataset(tmp_path / "b")
        assert back_spec == spec
        fresh = generate_dataset(spec)
        np.testing.assert_array_equal(back[1].trajectories[0].states, fresh[1].trajectories[0].states)

    def test_collapsing_observations(self, tmp_path):
        spec = DatasetSpec(1, 3, 2, 1, 4, 0.9, 2, 4, 0, "collapsing")
        data = generate_dataset(spec)
        assert data[0].observations.shape == (2, 4, 3)
        write_dataset(tmp_path, spec, data)
        assert (tmp_path / "observations_0.json").exists()
        np.testing.assert_array_equal(read_dataset(tmp_path)[1][0].observations, data[0].observations)
