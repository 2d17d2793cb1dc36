import numpy as np
import pytest

from tnt.distributions import Vocab, softmax
from tnt.errors import NonFiniteLoss, TokenOutOfRange
from tnt.model import TabularModel, TinyNeuralModel, gradients, load_model, trailing_windows
from tnt.objective import AnnotatedSequence, ObjectiveConfig, TokenAnnotation
from tnt.verify import gradient_relative_error

V4 = Vocab(size=4, eos=0)


def neural(seed=0, V=8, k=2):
    return TinyNeuralModel(Vocab(size=V, eos=0), k, dim=4, hidden=6, seed=seed, init_scale=0.5)


def test_trailing_windows_pad_with_sentinel():
    got = trailing_windows([5, 6, 7], 2, sentinel=9)
    np.testing.assert_array_equal(got, [[9, 9], [9, 5], [5, 6]])


class TestTabular:
    def test_zero_table_is_uniform(self):
        m = TabularModel(V4, 2)
        np.testing.assert_array_equal(m.forward_all((1, 2), (3, 1, 0)), np.full((3, 4), 0.25))

    def test_large_score_dominates(self):
        m = TabularModel(V4, 1)
        key = m.context_key((1,), [])
        table = np.zeros((1, 4))
        table[0, 2] = 10.0
        m = TabularModel(V4, 1, [key], table)
        probs = m.forward_all((1,), (2, 0))
        assert probs[0, 2] > 0.999
        np.testing.assert_allclose(probs[0, 2], np.exp(10) / (np.exp(10) + 3), rtol=1e-15)
        np.testing.assert_array_equal(probs[1], np.full(4, 0.25))

    def test_from_conditionals_realizes_targets(self):
        rng = np.random.default_rng(0)
        m0 = TabularModel(V4, 1)
        conds = {}
        for prefix in ([], [1], [2], [3]):
            p = rng.dirichlet(np.ones(4))
            p[rng.integers(4)] = 0.0
            conds[m0.context_key((1, 2), prefix)] = p / p.sum()
        m = TabularModel.from_conditionals(V4, 1, conds)
        for key, row in zip(m.keys, m.table):
            np.testing.assert_allclose(softmax(row), conds[key], atol=1e-9)
            assert np.all(softmax(row)[conds[key] == 0] == 0.0)

    def test_fkl_gradient_on_one_context(self):
        rng = np.random.default_rng(3)
        m = TabularModel(V4, 1).prepare([((1,), (2, 3, 0))])
        m = m.with_parameters(rng.normal(size=m.parameters.size))
        batch = m.encode([((1,), (2,))])
        target = np.array([0.1, 0.2, 0.3, 0.4])

        def closure(scores):
            p = softmax(scores)
            return float(-(target * np.log(p)).sum()), p - target

        _, grad = gradients(m, batch, closure)
        grad = grad.reshape(m.table.shape)
        row = m.index[m.context_key((1,), [])]
        np.testing.assert_allclose(grad[row], softmax(m.table[row]) - target, atol=1e-15)
        assert np.all(np.delete(grad, row, axis=0) == 0)

    def test_prepare_keeps_conditionals(self):
        m = TabularModel(V4, 2)
        before = m.forward_all((1,), (2, 3, 0))
        after = m.prepare([((1,), (2, 3, 0))]).forward_all((1,), (2, 3, 0))
        np.testing.assert_array_equal(before, after)


class TestNeural:
    def test_distributions_normalized(self):
        probs = neural().forward_all((1, 2, 3), (4, 5, 0))
        assert probs.shape == (3, 8)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_deterministic(self):
        a = neural(1).forward_all((1, 2), (3, 0))
        b = neural(1).forward_all((1, 2), (3, 0))
        np.testing.assert_array_equal(a, b)

    def test_default_size_is_small(self):
        assert TinyNeuralModel(Vocab(size=64, eos=0), 2, dim=32, hidden=64).n_parameters() < 10 ** 6

    def test_constant_loss_has_zero_gradient(self):
        m = neural()
        batch = m.encode([((1, 2), (3, 0))])
        loss, grad = gradients(m, batch, lambda s: (1.5, np.zeros_like(s)))
        assert loss == 1.5
        assert np.all(grad == 0)

    def test_non_finite_loss(self):
        m = neural()
        batch = m.encode([((1,), (0,))])
        with pytest.raises(NonFiniteLoss):
            gradients(m, batch, lambda s: (float("nan"), np.zeros_like(s)))

    @pytest.mark.parametrize("method", ["TN-FF", "TN-RR", "TN-R+LL", "NL+LL", "UL+LL", "LL"])
    def test_finite_differences(self, method):
        m, o = neural(1), neural(2)
        seqs = [AnnotatedSequence((1, 2), (3, 4, 0), (TokenAnnotation(1, frozenset({4})),)),
                AnnotatedSequence((5,), (6, 0), ())]
        err = gradient_relative_error(m, o, seqs, ObjectiveConfig(method, alpha=2.0, logit_penalty_coeff=1e-2))
        assert err < 1e-6


class TestDecoding:
    def test_one_hot_eos(self):
        m = TabularModel(V4, 0)
        key = m.context_key((1,), [])
        m = TabularModel.from_conditionals(V4, 0, {key: [1.0, 0, 0, 0]})
        assert m.greedy_decode((1,), 5) == [0]

    def test_uniform_ties_pick_lowest_id(self):
        assert TabularModel(V4, 1).greedy_decode((2,), 5) == [0]

    def test_length_bound_and_single_eos(self):
        m = neural(4)
        for inp in [(1,), (2, 3), (4, 5, 6)]:
            out = m.greedy_decode(inp, 6)
            assert 1 <= len(out) <= 6
            assert 0 not in out[:-1]

    def test_batch_matches_single(self):
        m = neural(5)
        inputs = [(1,), (2, 3), (7, 7, 1)]
        assert m.greedy_decode_batch(inputs, 6) == [m.greedy_decode(i, 6) for i in inputs]

    def test_out_of_range(self):
        with pytest.raises(TokenOutOfRange):
            neural().greedy_decode((99,), 3)
        with pytest.raises(TokenOutOfRange):
            neural().forward_all((1,), (42,))


@pytest.mark.parametrize("factory", [
    lambda: neural(7),
    lambda: TabularModel(V4, 2).prepare([((1, 3), (2, 3, 0))]).with_parameters(np.arange(12.0) / 7),
])
def test_checkpoint_round_trip(tmp_path, factory):
    m = factory()
    path = tmp_path / "m.json"
    m.save(path)
    loaded = load_model(path)
    assert loaded.param_hash() == m.param_hash()
    np.testing.assert_array_equal(loaded.forward_all((1, 3), (2, 3, 0)), m.forward_all((1, 3), (2, 3, 0)))


def test_tabular_learns_entity_copy():
    from tnt.objective import ObjectiveConfig
    from tnt.synthdata import TaskSpec, generate_corpus
    from tnt.trainer import TrainConfig, train

    spec = TaskSpec(kind="entity-copy", n_unwanted=10, corruption_rate=0.0, sizes=(80, 10, 10))
    pairs = generate_corpus(spec)["train"].pairs
    data = [AnnotatedSequence(i, o, ()) for i, o in pairs]
    cfg = TrainConfig(steps=300, eval_every=100, learning_rate=0.1,
                      objective=ObjectiveConfig("LL", logit_penalty_coeff=0.0))
    # a lookup table has nothing to generalize with, so select on the training inputs themselves
    model, _ = train(TabularModel(spec.vocab, 2), data, data, cfg)
    with_entities = [(i, o) for i, o in pairs if set(i) & set(spec.unwanted_ids)]
    assert len(with_entities) > 50
    for inp, out in with_entities:
        gen = model.greedy_decode(inp, spec.decode_max_len)
        assert tuple(gen) == out
        assert set(inp) & set(spec.unwanted_ids) <= set(gen)
