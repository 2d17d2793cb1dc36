import math

import numpy as np
import pytest

from tnt.distributions import Vocab, project_out_negatives, softmax
from tnt.errors import InfeasibleConstraint, SpaceTooLarge
from tnt.model import TabularModel
from tnt.oracles import (
    RewardSpec,
    atom_total_variation,
    brute_force_projection,
    conditioned_distribution,
    exhaustive_sequence_distribution,
    tiny_task,
    tiny_update_dataset,
    token_level_optimum,
    token_rl_equivalence_check,
    tilted_distribution,
)


class TestBruteForceProjection:
    def test_empty_negatives_returns_grid_point_near_p(self):
        p = np.array([0.5, 0.3, 0.2])
        np.testing.assert_allclose(brute_force_projection(p, set(), 200), p, atol=1 / 200)

    def test_symmetric_case(self):
        np.testing.assert_allclose(brute_force_projection(np.full(3, 1 / 3), {1}, 200), [0.5, 0, 0.5], atol=1 / 200)

    def test_random_agreement(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            V = int(rng.integers(3, 6))
            p = rng.dirichlet(np.ones(V))
            neg = set(rng.choice(V, size=int(rng.integers(1, V)), replace=False).tolist())
            np.testing.assert_allclose(brute_force_projection(p, neg, 100), project_out_negatives(p, neg),
                                       atol=1 / 100)

    def test_infeasible(self):
        with pytest.raises(InfeasibleConstraint):
            brute_force_projection(np.array([0.5, 0.5, 0.0]), {0, 1})

    def test_limits(self):
        with pytest.raises(ValueError):
            brute_force_projection(np.full(6, 1 / 6), set())


def one_hot_eos_model():
    v = Vocab(size=2, eos=0)
    m = TabularModel(v, 0)
    return TabularModel.from_conditionals(v, 0, {m.context_key((1,), []): [1.0, 0.0]})


class TestEnumeration:
    def test_one_hot_eos(self):
        d = exhaustive_sequence_distribution(one_hot_eos_model(), (1,), 3)
        assert d.terminated == {(0,): 1.0}
        assert d.unterminated_mass == 0.0

    def test_uniform_two_tokens(self):
        d = exhaustive_sequence_distribution(TabularModel(Vocab(size=2, eos=0), 1), (1,), 2)
        assert d.terminated == {(0,): 0.5, (1, 0): 0.25}
        assert d.unterminated == {(1, 1): 0.25}

    @pytest.mark.parametrize("seed", range(5))
    def test_mass_partition(self, seed):
        task = tiny_task(seed)
        d = exhaustive_sequence_distribution(task.original, task.inputs[0], task.max_len)
        assert d.total_mass + d.unterminated_mass == pytest.approx(1.0, abs=1e-9)

    def test_space_too_large(self):
        with pytest.raises(SpaceTooLarge):
            exhaustive_sequence_distribution(TabularModel(Vocab(size=40, eos=0), 1), (1,), 5)

    def test_token_optimum_differs_from_sequence_conditioning_by_little(self):
        task = tiny_task(0)
        opt = token_level_optimum(task)
        for inp in task.inputs:
            target = conditioned_distribution(exhaustive_sequence_distribution(task.original, inp, task.max_len),
                                              task.is_clean)
            got = exhaustive_sequence_distribution(opt, inp, task.max_len).atoms()
            assert atom_total_variation(got, target) < 0.02

    def test_update_dataset_covers_every_atom(self):
        task = tiny_task(0, vocab_size=4, max_len=2, n_inputs=1)
        data = tiny_update_dataset(task)
        # [EOS], three [t, EOS], nine truncated [t, u]
        assert len(data) == 13
        assert all(len(s.annotations) == len(s.output) for s in data)


def _table_model(rng, V, max_len, inputs):
    m0 = TabularModel(Vocab(size=V, eos=0), max_len)
    conds = {}
    for inp in inputs:
        stack = [()]
        while stack:
            prefix = stack.pop()
            if len(prefix) == max_len:
                continue
            conds[m0.context_key(inp, list(prefix))] = softmax(rng.normal(size=V))
            stack.extend(prefix + (t,) for t in range(1, V))
    return TabularModel.from_conditionals(m0.vocab, max_len, conds)


class TestRewardTilt:
    def test_zero_reward_is_original(self):
        task = tiny_task(1)
        d = exhaustive_sequence_distribution(task.original, task.inputs[0], task.max_len)
        tilt, log_z = tilted_distribution(d, RewardSpec(0.5, {}))
        assert log_z == pytest.approx(0.0, abs=1e-12)
        assert atom_total_variation(tilt, d.atoms()) < 1e-12

    def test_small_beta_approaches_conditioning(self):
        task = tiny_task(2)
        d = exhaustive_sequence_distribution(task.original, task.inputs[0], task.max_len)
        bad = RewardSpec(0.01, lambda prefix: -1.0 if prefix[-1] in task.negative_ids else 0.0)
        tilt, _ = tilted_distribution(d, bad)
        assert atom_total_variation(tilt, conditioned_distribution(d, task.is_clean)) < 0.01


class TestEquivalence:
    def test_zero_reward_reduces_to_kl(self):
        rng = np.random.default_rng(0)
        pt, po = (_table_model(rng, 3, 3, [(1,)]) for _ in range(2))
        res = token_rl_equivalence_check(pt, po, RewardSpec(0.5, {}), (1,), 3)
        assert res.log_z == pytest.approx(0.0, abs=1e-12)
        assert res.difference < 1e-10
        assert res.lhs == pytest.approx(res.kl, abs=1e-10)
        assert res.kl > 0

    def test_optimum_has_zero_kl(self):
        rng = np.random.default_rng(1)
        po = _table_model(rng, 3, 3, [(1,)])
        rewards = RewardSpec(0.5, {(1,): 0.3, (2, 1): -0.7, (1, 2, 0): 1.1})
        # p_theta(x_t | prefix) is the tilt mass of all completions through prefix + x_t
        dist = exhaustive_sequence_distribution(po, (1,), 3)
        tilt, log_z = tilted_distribution(dist, rewards)
        conds = {}
        for prefix_len in range(3):
            prefixes = {seq[:prefix_len] for seq in tilt if len(seq) > prefix_len and 0 not in seq[:prefix_len]}
            for prefix in prefixes:
                row = np.zeros(3)
                for seq, m in tilt.items():
                    if len(seq) > prefix_len and seq[:prefix_len] == prefix and seq[prefix_len] != "<trunc>":
                        row[seq[prefix_len]] += m
                conds[po.context_key((1,), list(prefix))] = row / row.sum()
        pt = TabularModel.from_conditionals(po.vocab, 3, conds)
        res = token_rl_equivalence_check(pt, po, rewards, (1,), 3)
        assert res.kl == pytest.approx(0.0, abs=1e-9)
        assert res.lhs == pytest.approx(-res.log_z, abs=1e-9)
        assert res.difference < 1e-10

    def test_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            pt, po = (_table_model(rng, 3, 3, [(2,)]) for _ in range(2))
            table = {}
            rewards = RewardSpec(0.5, lambda pr: table.setdefault(pr, float(rng.normal())))
            assert token_rl_equivalence_check(pt, po, rewards, (2,), 3).difference < 1e-8

    def test_beta_must_be_positive(self):
        with pytest.raises(ValueError):
            RewardSpec(0.0, {})


def test_tiny_task_inputs_override():
    a = tiny_task(3)
    b = tiny_task(3, inputs=[(1, 2)])
    assert b.inputs == [(1, 2)]
    assert a.negative_ids == b.negative_ids == frozenset({5})
    assert math.isclose(float(softmax(a.original.table[0]).sum()), 1.0)
