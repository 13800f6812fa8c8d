import csv
import math

import numpy as np
import pytest

from trinas import tensor as T
from trinas.opspace import COMPONENTS, ConfigurationError, SearchSpace, appendix_subspace
from trinas.optim import SGD, Adam
from trinas.search import SearchConfig, alternating_step, detection_loss, expected_flops, run_search, uniform_cost
from trinas.supernet import Supernet, SupernetConfig, load_checkpoint
from trinas.toytask import DataError, DatasetSpec, generate
from trinas.training import NumericalError, SplitViolation

CFG32 = SupernetConfig.desk(image_size=32)


def spaces_of(*names):
    return {c: SearchSpace.from_names(list(names), c) for c in COMPONENTS}


@pytest.fixture(scope="module")
def tiny_data():
    return generate(DatasetSpec(seed=0, n_weight=16, n_arch=16, n_test=8, image_size=32))


def batches(data, size=8):
    return next(data.weight.batches(size, 0, 0)), next(data.arch.batches(size, 0, 0))


# -- loss ----------------------------------------------------------------------------
def test_perfect_prediction_loss(f64):
    labels = np.array([0, 3, 1])
    logits = np.zeros((3, 4))
    logits[np.arange(3), labels] = 20.0
    boxes = np.random.default_rng(0).uniform(0.2, 0.8, size=(3, 4))
    assert detection_loss(T.Tensor(logits), T.Tensor(boxes), labels, boxes).item() < 1e-3


def test_uniform_logits_loss(f64):
    boxes = np.full((5, 4), 0.5)
    loss = detection_loss(T.Tensor(np.zeros((5, 4))), T.Tensor(boxes), np.arange(5) % 4, boxes)
    assert loss.item() == pytest.approx(math.log(4), rel=1e-12)


def test_box_off_by_two(f64):
    labels = np.array([2, 1])
    logits = np.zeros((2, 4))
    logits[np.arange(2), labels] = 40.0
    boxes = np.full((2, 4), 0.25)
    loss = detection_loss(T.Tensor(logits), T.Tensor(boxes + 2.0), labels, boxes)
    assert loss.item() == pytest.approx(6.0, abs=1e-12)


def test_label_out_of_range():
    with pytest.raises(DataError):
        detection_loss(T.Tensor(np.zeros((2, 4))), T.Tensor(np.zeros((2, 4))), [0, 4], np.zeros((2, 4)))


# -- config ----------------------------------------------------------------------------
@pytest.mark.parametrize("kw", [{"lam": -1.0}, {"epochs": 0}, {"split_fraction": 1.0},
                                {"arch_warmup_epochs": 5, "epochs": 4}, {"flops_scale": 0.0}])
def test_bad_search_config(kw):
    with pytest.raises(ConfigurationError):
        SearchConfig(**kw)


def test_default_warmup_is_a_quarter():
    assert SearchConfig(epochs=20).warmup == 5
    assert SearchConfig(epochs=20, arch_warmup_epochs=0).warmup == 0


# -- alternating step --------------------------------------------------------------------
class Spy:
    """Wraps an optimizer and snapshots a parameter group at every step."""

    def __init__(self, inner, watch):
        self.inner, self.watch, self.snapshots = inner, watch, []

    def step(self):
        before = [p.data.copy() for p in self.watch()]
        self.inner.step()
        self.snapshots.append((before, [p.data.copy() for p in self.watch()]))


def test_phases_touch_only_their_parameters(tiny_data):
    net = Supernet(CFG32, {c: appendix_subspace(c) for c in COMPONENTS}, seed=0)
    cfg = SearchConfig(lam=0.01)
    arch0 = [a.data.copy() for a in net.arch.tensors()]
    w0 = [p.data.copy() for p in net.weight_parameters()]
    sgd = Spy(SGD(net.weight_parameters(), 0.04), net.arch.tensors)
    adam = Spy(Adam(net.arch.tensors(), 0.01), net.weight_parameters)
    b_w, b_a = batches(tiny_data)
    alternating_step(net, b_w, b_a, cfg, sgd, adam)
    # arch untouched by the weight phase, weights untouched by the arch phase
    for before, after in sgd.snapshots + adam.snapshots:
        assert all(np.array_equal(x, y) for x, y in zip(before, after))
    assert any(not np.array_equal(a, b.data) for a, b in zip(arch0, net.arch.tensors()))
    assert any(not np.array_equal(a, b.data) for a, b in zip(w0, net.weight_parameters()))


def test_wrong_split_is_rejected(tiny_data):
    net = Supernet(CFG32, spaces_of("conv_k3_d1"), seed=0)
    b_w, b_a = batches(tiny_data)
    sgd, adam = SGD(net.weight_parameters(), 0.01), Adam(net.arch.tensors(), 0.01)
    with pytest.raises(SplitViolation):
        alternating_step(net, b_a, b_a, SearchConfig(), sgd, adam)
    with pytest.raises(SplitViolation):
        alternating_step(net, b_w, b_w, SearchConfig(), sgd, adam)


def test_identical_candidates_give_zero_arch_gradient(tiny_data):
    net = Supernet(CFG32, spaces_of("conv_k3_d1", "conv_k5_d1"), seed=0)
    for comp in COMPONENTS:
        for layer in net.layers(comp):
            for p in layer.parameters():
                p.data[...] = 0.0
    _, b_a = batches(tiny_data)
    for a in net.arch.tensors():
        a.grad = None
    net.loss(b_a).backward()
    assert all(np.all(a.grad == 0.0) for a in net.arch.tensors())


def test_large_lambda_step_lowers_expected_cost(tiny_data):
    net = Supernet(CFG32, {c: appendix_subspace(c) for c in COMPONENTS}, seed=1)
    tables = net.cost_tables()
    before = expected_flops(net.arch.numpy(), tables)
    cfg = SearchConfig(lam=1e3, flops_scale=1e6, clip=None)
    b_w, b_a = batches(tiny_data)
    alternating_step(net, b_w, b_a, cfg, SGD(net.weight_parameters(), 0.0), Adam(net.arch.tensors(), 1e-3), tables)
    assert expected_flops(net.arch.numpy(), tables) < before


def test_step_is_bit_reproducible(tiny_data):
    outs = []
    for _ in range(2):
        net = Supernet(CFG32, {c: appendix_subspace(c) for c in COMPONENTS}, seed=2)
        b_w, b_a = batches(tiny_data)
        alternating_step(net, b_w, b_a, SearchConfig(), SGD(net.weight_parameters(), 0.04),
                         Adam(net.arch.tensors(), 4e-4))
        outs.append([p.data.copy() for p in net.weight_parameters() + net.arch.tensors()])
    assert all(np.array_equal(a, b) for a, b in zip(*outs))


def test_uniform_cost_is_mean_per_layer():
    net = Supernet(CFG32, {c: appendix_subspace(c) for c in COMPONENTS}, seed=0)
    tables = net.cost_tables()
    zeros = {c: np.zeros(tables[c].shape) for c in COMPONENTS}
    assert expected_flops(zeros, tables) == pytest.approx(uniform_cost(net, tables), rel=1e-12)
    scaled = net.expected_cost(tables=tables, scale=uniform_cost(net, tables)).item()
    assert scaled == pytest.approx(1.0, rel=1e-6)


# -- full runs -----------------------------------------------------------------------------
def test_run_search_outputs(tmp_path, tiny_data):
    net = Supernet(CFG32, {c: appendix_subspace(c) for c in COMPONENTS}, seed=0)
    cfg = SearchConfig(epochs=3, arch_warmup_epochs=1, batch_size=8, arch_lr=0.01)
    res = run_search(net, tiny_data, cfg, out_dir=tmp_path)
    assert len(res.train_loss) == len(res.val_loss) == len(res.expected_flops) == 3
    with open(tmp_path / "search_trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "expected_flops"] and len(rows) == 3
    for e in range(3):
        saved, meta = load_checkpoint(tmp_path / "checkpoints" / f"epoch_{e:03d}.npz")
        assert meta["extra"]["epoch"] == e
        assert expected_flops(saved.arch.numpy(), saved.cost_tables()) == pytest.approx(res.expected_flops[e],
                                                                                         rel=1e-12)
    assert res.audit.cross_samples() == {"arch_in_weight": 0, "weight_in_arch": 0}
    assert res.audit.counts[("weight", "weight")] == 3 * 16
    assert res.audit.counts[("arch", "arch")] == 2 * 16  # the first epoch is weight-only warmup


def test_single_op_spaces_keep_arch_at_init(tiny_data):
    net = Supernet(CFG32, spaces_of("sep_k3_d1"), seed=0)
    res = run_search(net, tiny_data, SearchConfig(epochs=2, arch_warmup_epochs=0, batch_size=8, arch_lr=0.1))
    assert all(np.all(m == 0.0) for m in res.arch.values())
    assert res.train_loss[1] < res.train_loss[0]


def test_nan_aborts_with_dump(tmp_path, tiny_data):
    net = Supernet(CFG32, spaces_of("conv_k3_d1"), seed=0)
    real = net.loss
    calls = {"n": 0}

    def flaky(batch, arch=None):
        calls["n"] += 1
        loss = real(batch, arch)
        return T.mul(loss, float("nan")) if calls["n"] == 3 else loss

    net.loss = flaky
    with pytest.raises(NumericalError):
        run_search(net, tiny_data, SearchConfig(epochs=2, arch_warmup_epochs=0, batch_size=8), out_dir=tmp_path)
    dump = (tmp_path / "nan_dump.json").read_text()
    assert '"step": 1' in dump and "weight_batch_ids" in dump
