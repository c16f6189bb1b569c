import numpy as np
import pytest

from boxrec.autodiff import Graph, Tensor, finite_difference_check
from boxrec.checkpoint import load_checkpoint
from boxrec.datasets import SplitDataset, Vocab
from boxrec.encoder import EncoderConfig, init_params
from boxrec.errors import DataError, InvalidArgumentError, NumericFaultError
from boxrec.geometry import BoxSet, DistanceParams, Hypercuboid
from boxrec.synthetic import generate_box_world, world_split
from boxrec.training import (
    Adagrad,
    NegativeSampler,
    TrainConfig,
    adagrad_step,
    batch_loss,
    fit,
    hinge,
    hinge_loss,
    make_instances,
    sample_negatives,
)


def toy_split(seqs, n_items=None):
    n_items = n_items or max(max(s) for s in seqs)
    users = Vocab([f"u{k}" for k in range(len(seqs))])
    train = {k + 1: list(s) for k, s in enumerate(seqs)}
    empty = {k + 1: [] for k in range(len(seqs))}
    return SplitDataset(users, Vocab([f"i{k}" for k in range(1, n_items + 1)]), train, empty, dict(empty))


class TestInstances:
    def test_first_full_window(self):
        split = toy_split([[1, 2, 3, 4, 5, 6, 7, 8]])
        inst = make_instances(split, L=5, T=3)
        full = [k for k, w in enumerate(inst.windows) if 0 not in w]
        first = full[0]
        np.testing.assert_array_equal(inst.windows[first], [1, 2, 3, 4, 5])
        np.testing.assert_array_equal(inst.targets[first], [6, 7, 8])

    def test_left_padding_and_clipping(self):
        inst = make_instances(toy_split([[1, 2, 3, 4, 5, 6]]), L=5, T=3)
        np.testing.assert_array_equal(inst.windows[0], [0, 0, 0, 0, 1])
        np.testing.assert_array_equal(inst.targets[0], [2, 3, 4])
        np.testing.assert_array_equal(inst.targets[-1], [6, 0, 0])
        assert inst.target_mask[:, 0].all()

    @pytest.mark.parametrize("n", range(2, 21))
    def test_count_is_n_minus_one(self, n):
        # enumeration oracle: positions t with at least one following item
        expected = sum(1 for t in range(n) if t + 1 < n)
        inst = make_instances(toy_split([list(range(1, n + 1))]), L=5, T=3)
        assert len(inst) == expected == n - 1

    def test_single_item_user_contributes_nothing(self):
        assert len(make_instances(toy_split([[1]], n_items=3), 5, 3)) == 0


class TestNegatives:
    def test_last_free_item(self):
        split = toy_split([[1, 2, 3, 4]], n_items=5)
        draws = sample_negatives(split, 1, 50, np.random.default_rng(0))
        assert set(draws.tolist()) == {5}

    def test_exhausted(self):
        split = toy_split([[1, 2, 3]], n_items=3)
        with pytest.raises(DataError):
            sample_negatives(split, 1, 1, np.random.default_rng(0))

    def test_never_positive(self):
        split = toy_split([[1, 3, 5, 7, 9], [2, 4]], n_items=10)
        sampler = NegativeSampler(split)
        draws = sampler.sample(1, 5000, np.random.default_rng(1))
        assert not set(draws.tolist()) & {1, 3, 5, 7, 9}

    def test_uniform_chi_square(self):
        split = toy_split([[1, 2, 3]], n_items=20)
        draws = sample_negatives(split, 1, 100_000, np.random.default_rng(2))
        counts = np.bincount(draws, minlength=21)[4:]
        expected = 100_000 / 17
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        # 16 degrees of freedom: mean 16, sd sqrt(32); 3 sd bound
        assert chi2 < 16 + 3 * np.sqrt(32)
        assert np.all(np.abs(counts - expected) < 3 * np.sqrt(expected))

    def test_seeded(self):
        split = toy_split([[1, 2]], n_items=30)
        a = sample_negatives(split, 1, 10, np.random.default_rng(5))
        b = sample_negatives(split, 1, 10, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)


class TestHinge:
    def box(self):
        return BoxSet("single", [Hypercuboid([0.0, 0.0], [1.0, 1.0])])

    def test_satisfied(self):
        g = Graph()
        assert hinge(g, np.array([0.2]), np.array([1.0]), 0.5).value[0] == 0.0

    def test_violated(self):
        assert hinge(Graph(), np.array([1.0]), np.array([1.0]), 0.5).value[0] == 0.5

    def test_closed_form(self):
        params = DistanceParams(gamma=0.0)
        pos, neg = np.array([0.5, 0.5]), np.array([2.0, 0.0])  # distances 0 and 1
        assert hinge_loss(self.box(), pos, neg, params, 0.5) == 0.0
        assert hinge_loss(self.box(), neg, neg, params, 0.5) == 0.5

    def test_mask_zeroes_padded_targets(self):
        terms = hinge(Graph(), np.array([[1.0, 1.0]]), np.array([[0.0, 0.0]]), 0.5,
                      mask=np.array([[True, False]]))
        np.testing.assert_array_equal(terms.value, [[1.5, 0.0]])

    def test_gradient_only_through_violations(self):
        pos = Tensor(np.array([1.0, 0.1]), requires_grad=True, name="pos")
        neg = Tensor(np.array([1.2, 2.0]), requires_grad=True, name="neg")
        g = Graph()
        grads = g.backward(g.reduce_sum(hinge(g, pos, neg, 0.5)))
        np.testing.assert_array_equal(grads[pos], [1.0, 0.0])
        np.testing.assert_array_equal(grads[neg], [-1.0, 0.0])
        report = finite_difference_check(
            lambda g: g.reduce_sum(hinge(g, pos, neg, 0.5)), {"pos": pos, "neg": neg})
        assert report.passed


class TestAdagrad:
    def param(self, value, name="w"):
        return {name: Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)}

    def test_first_step(self):
        params = self.param([1.0])
        opt = Adagrad(params, lr=0.05, l2=0.0)
        opt.step({"w": np.array([2.0])})
        assert opt.accumulators["w"][0] == 4.0
        step = 0.05 * 2 / (2 + 1e-8)
        assert params["w"].value[0] == pytest.approx(1.0 - step, abs=1e-15)

    def test_zero_gradient(self):
        params = self.param([1.0, -2.0])
        opt = Adagrad(params, lr=0.05, l2=0.0)
        opt.step({"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"].value, [1.0, -2.0])
        np.testing.assert_array_equal(opt.accumulators["w"], 0.0)

    def test_steps_shrink(self):
        params = self.param([0.0])
        opt = Adagrad(params, lr=0.1)
        opt.step({"w": np.array([1.0])})
        first = -params["w"].value[0]
        opt.step({"w": np.array([1.0])})
        second = -params["w"].value[0] - first
        assert 0 < second < first

    def test_l2_added_before_accumulation(self):
        params = self.param([2.0], "center_w")
        opt = Adagrad(params, lr=0.1, l2=0.25)
        opt.step({"center_w": np.array([0.0])})
        assert opt.accumulators["center_w"][0] == 1.0  # (2 * 0.25 * 2)^2
        other = self.param([2.0], "attn_w")
        opt = Adagrad(other, lr=0.1, l2=0.25)
        opt.step({"attn_w": np.array([0.0])})
        assert other["attn_w"].value[0] == 2.0

    def test_sparse_rows(self):
        params = self.param(np.ones((5, 2)), "item_embeddings")
        opt = Adagrad(params, lr=0.1, l2=0.1)
        opt.step({"item_embeddings": np.ones((5, 2))}, touched_rows=np.array([0, 3, 3, 1]))
        changed = np.flatnonzero((params["item_embeddings"].value != 1).any(axis=1))
        np.testing.assert_array_equal(changed, [1, 3])

    def test_non_finite(self):
        params = self.param([1.0])
        with pytest.raises(NumericFaultError):
            Adagrad(params).step({"w": np.array([np.nan])})

    def test_functional_wrapper(self):
        params = self.param([1.0])
        state = Adagrad(params, lr=0.0)
        adagrad_step(params, {"w": np.array([1.0])}, state, lr=0.5)
        assert params["w"].value[0] == pytest.approx(0.5)

    def test_accumulators_monotone(self):
        rng = np.random.default_rng(0)
        params = self.param(rng.normal(size=4))
        opt = Adagrad(params, lr=0.1, l2=0.01)
        prev = opt.accumulators["w"].copy()
        for _ in range(10):
            opt.step({"w": rng.normal(size=4)})
            assert np.all(opt.accumulators["w"] >= prev)
            prev = opt.accumulators["w"].copy()


def test_batch_gradient_is_order_invariant():
    cfg = EncoderConfig(d=4, L=3, N=2)
    params = init_params(cfg, 8, np.random.default_rng(0), dtype=np.float64)
    windows = np.array([[0, 1, 2], [3, 4, 5], [0, 0, 6]])
    targets = np.array([[3, 4], [6, 0], [7, 8]])
    negatives = np.array([[5, 6], [1, 2], [2, 3]])
    perm = np.array([2, 0, 1])

    def grads(order):
        g = Graph()
        loss, *_ = batch_loss(g, params, cfg, windows[order], targets[order], negatives[order], 0.5)
        return g.backward(loss, wrt=params)

    a, b = grads(np.arange(3)), grads(perm)
    for t in params.values():
        np.testing.assert_allclose(a[t], b[t], rtol=1e-12, atol=1e-14)


def test_sparse_update_touches_batch_rows_only():
    split = toy_split([[1, 2, 3, 4]], n_items=40)
    cfg = EncoderConfig(d=4, L=3, N=2)
    before = init_params(cfg, 40, np.random.default_rng([0, 0]))
    res = fit(split, cfg, TrainConfig(T=2, epochs=1, batch_size=100, l2=0.1, seed=0))
    rng = np.random.default_rng([0, 1])
    negs = NegativeSampler(split).sample_for(make_instances(split, 3, 2), 1, rng)
    touched = {1, 2, 3, 4} | set(negs.ravel().tolist())
    changed = np.flatnonzero((res.params["item_embeddings"].value != before["item_embeddings"].value).any(axis=1))
    assert set(changed.tolist()) <= touched and 0 not in changed
    assert {1, 2, 3, 4} <= set(changed.tolist())


@pytest.fixture(scope="module")
def small_world():
    return world_split(generate_box_world(20, 120, 3, 1, 0.05, seed=1))


class TestFit:
    def cfgs(self, **kw):
        return EncoderConfig(d=8, L=5, N=4), TrainConfig(**{"T": 2, "epochs": 5, "batch_size": 32,
                                                              "learning_rate": 0.1, "l2": 1e-3, **kw})

    def test_outputs_and_determinism(self, small_world, tmp_path):
        mc, tc = self.cfgs(epochs=2)
        a = fit(small_world, mc, tc, out_dir=tmp_path / "a")
        b = fit(small_world, mc, tc, out_dir=tmp_path / "b")
        for name in ("checkpoint_epoch_001.bin", "checkpoint_epoch_002.bin", "model.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert a.losses == b.losses
        trace = (tmp_path / "a" / "loss_trace.tsv").read_text().splitlines()
        assert [line.split("\t")[0] for line in trace] == ["1", "2"]
        cfg_text = (tmp_path / "a" / "train.cfg").read_text()
        assert "seed=0" in cfg_text.splitlines() and "gamma=0.5" in cfg_text.splitlines()
        header, _ = load_checkpoint(tmp_path / "a" / "model.bin")
        assert header["n_items"] == small_world.n_items

    def test_zero_learning_rate(self, small_world):
        mc, tc = self.cfgs(learning_rate=0.0, epochs=3, resample_negatives=False)
        start = init_params(mc, small_world.n_items, np.random.default_rng([0, 0]))
        res = fit(small_world, mc, tc)
        for name, t in start.items():
            assert res.params[name].value.tobytes() == t.value.tobytes()
        assert res.losses[0] == res.losses[1] == res.losses[2]

    def test_loss_mostly_decreasing(self, small_world):
        mc, tc = self.cfgs(epochs=5)
        losses = fit(small_world, mc, tc).losses
        assert sum(b <= a for a, b in zip(losses, losses[1:])) >= 4
        assert all(loss >= 0 for loss in losses)

    def test_loss_halves_on_box_world(self):
        split = world_split(generate_box_world(30, 300, 4, 1, 0.05, seed=3))
        mc = EncoderConfig(d=16, L=5, N=10, gamma=0.1)
        res = fit(split, mc, TrainConfig(T=2, epochs=15, batch_size=32, learning_rate=0.1, l2=1e-2))
        assert res.losses[-1] < 0.5 * res.losses[0]

    def test_empty_training_set(self):
        with pytest.raises(DataError):
            fit(toy_split([[1], [2]], n_items=5), EncoderConfig(d=4), TrainConfig())

    def test_bad_config(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(margin=0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(learning_rate=-1)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_fault_has_context(self, small_world):
        mc, tc = self.cfgs(epochs=1)
        params = init_params(mc, small_world.n_items, np.random.default_rng(0))
        params["center_w"].value[:] = 3e38
        with pytest.raises(NumericFaultError, match="epoch 1"):
            fit(small_world, mc, tc, params=params)
