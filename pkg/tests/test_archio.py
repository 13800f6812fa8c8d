import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trinas import tensor as T
from trinas.archio import (Architecture, DecodeError, FormatError, TrainBudget, decode, decoded_flops, instantiate,
                           parse, parse_spaces, random_architecture, random_baseline, retrain_and_eval, serialize,
                           serialize_spaces, train_net, evaluate_net)
from trinas.opspace import COMPONENTS, ConfigurationError, SearchSpace, appendix_subspace, full_catalogue
from trinas.supernet import Supernet, SupernetConfig
from trinas.toytask import DatasetSpec, generate

CFG = SupernetConfig.desk(image_size=32)


def appendix_spaces():
    return {c: appendix_subspace(c) for c in COMPONENTS}


def saturate(net, rng):
    picks = {}
    for c in COMPONENTS:
        m = net.arch[c]
        j = rng.integers(0, m.shape[1], size=m.shape[0])
        m.data[:] = -20.0
        m.data[np.arange(m.shape[0]), j] = 20.0
        picks[c] = [net.spaces[c].names[k] for k in j]
    return picks


@pytest.fixture(scope="module")
def saturated():
    net = Supernet(CFG, appendix_spaces(), seed=4)
    picks = saturate(net, np.random.default_rng(1))
    return net, picks


# -- decode -------------------------------------------------------------------------------
def test_decode_saturated(saturated):
    net, picks = saturated
    arch = decode(net.arch, net.spaces, CFG)
    assert {c: list(arch.ops(c)) for c in COMPONENTS} == picks


def _mats(rows):
    return {c: np.asarray(rows[c], dtype=float) for c in COMPONENTS}


def _space3():
    return {c: SearchSpace.from_names(["conv_k3_d1", "sep_k3_d1", "ir_k3_d1_e3"], c) for c in COMPONENTS}


def _cfg_tiny():
    return SupernetConfig.desk(image_size=32, stage_depths=(1, 1, 1, 1), head_blocks=1)


def test_decode_row_argmax():
    rows = {"backbone": [[0.1, 0.9, 0.3]] * 4, "neck": [[0.1, 0.9, 0.3]] * 8, "head": [[0.1, 0.9, 0.3]]}
    arch = decode(_mats(rows), _space3(), _cfg_tiny())
    assert set(arch.backbone) == set(arch.neck) == set(arch.head) == {"sep_k3_d1"}


def test_decode_full_tie_and_shift_invariance():
    zeros = {"backbone": np.zeros((4, 3)), "neck": np.zeros((8, 3)), "head": np.zeros((1, 3))}
    base = decode(zeros, _space3(), _cfg_tiny())
    assert set(base.backbone + base.neck + base.head) == {"conv_k3_d1"}
    for shift in (1e-9, 0.5, 3.0, 1e6):
        assert decode({c: m + shift for c, m in zeros.items()}, _space3(), _cfg_tiny()) == base


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), transform=st.sampled_from(["exp", "cube", "affine", "tanh"]))
def test_decode_invariant_to_monotone_transforms(seed, transform):
    r = np.random.default_rng(seed)
    mats = {"backbone": r.normal(size=(4, 3)), "neck": r.normal(size=(8, 3)), "head": r.normal(size=(1, 3))}
    f = {"exp": np.exp, "cube": lambda z: z ** 3, "affine": lambda z: 2.5 * z - 7.0, "tanh": np.tanh}[transform]
    assert decode({c: f(m) for c, m in mats.items()}, _space3(), _cfg_tiny()) == decode(mats, _space3(), _cfg_tiny())


def test_decode_rejects_nan():
    mats = {"backbone": np.zeros((4, 3)), "neck": np.zeros((8, 3)), "head": np.zeros((1, 3))}
    mats["neck"][2, 1] = np.nan
    with pytest.raises(DecodeError, match="neck"):
        decode(mats, _space3(), _cfg_tiny())


# -- text formats --------------------------------------------------------------------------
def test_architecture_round_trip(saturated):
    net, _ = saturated
    text = serialize(decode(net.arch, net.spaces, CFG, seed=4, source="ab" * 32))
    assert serialize(parse(text)) == text
    assert text.startswith("trinas-architecture 1\nfingerprint: ")
    assert "neck/7: " in text and text.endswith("\n") and not text.endswith("\n\n")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_architectures_round_trip(seed):
    spaces = {c: full_catalogue().restrict(c) for c in COMPONENTS}
    arch = random_architecture(spaces, CFG, np.random.default_rng(seed), seed)
    assert parse(serialize(arch)) == arch
    assert serialize(parse(serialize(arch))) == serialize(arch)


def test_appendix_spaces_round_trip():
    text = serialize_spaces(appendix_spaces())
    assert serialize_spaces(parse_spaces(text)) == text
    assert len(text.splitlines()[1].split(" ")) == 1 + 7  # duplicated backbone entry kept once
    assert parse_spaces(text)["head"].names == appendix_subspace("head").names


@pytest.mark.parametrize("mutate,line", [
    (lambda t: t.replace("trinas-architecture 1", "trinas-architecture 9"), 1),
    (lambda t: t.replace("seed: 0", "sead: 0"), 5),
    (lambda t: t.replace("neck/3:", "neck/4:"), 15),
    (lambda t: t.replace("head/0: ", "head/0: conv_k9_d1\nX"), 20),
    (lambda t: t[:-1], 23),
])
def test_parse_errors_name_the_line(mutate, line):
    arch = random_architecture(appendix_spaces(), CFG, np.random.default_rng(0))
    text = serialize(arch)
    with pytest.raises(FormatError) as exc:
        parse(mutate(text))
    assert exc.value.line_no == line


def test_spaces_parse_rejects_duplicates():
    text = "trinas-subspaces 1\nbackbone: ir_k3_d1_e3 ir_k3_d1_e3\nneck: sep_k3_d1\nhead: conv_k3_d1\n"
    with pytest.raises(FormatError, match="duplicate"):
        parse_spaces(text)


# -- instantiate ---------------------------------------------------------------------------
def test_inherited_detector_matches_supernet(saturated):
    net, _ = saturated
    arch = decode(net.arch, net.spaces, CFG)
    det = instantiate(arch, CFG, inherit_from=net)
    x = np.random.default_rng(2).normal(size=(3, 3, 32, 32)).astype(np.float32)
    with T.no_grad():
        for a, b in zip(net(x), det(x)):
            assert a.shape == b.shape
            assert np.max(np.abs(a.data - b.data)) < 1e-5
    assert det.num_parameters() < net.num_parameters()


def test_decoded_flops_is_table_lookup(saturated):
    net, _ = saturated
    arch = decode(net.arch, net.spaces, CFG)
    assert arch.flops(CFG) == decoded_flops(arch, net.cost_tables(), net.spaces)
    assert instantiate(arch, CFG).flops() == arch.flops(CFG)
    assert [row[0] for row in arch.table(CFG)][:2] == ["backbone.s1.b0", "backbone.s2.b0"]
    assert arch.backbone_layers()[2] == ("backbone.s3.b0", arch.backbone[2], 2)


def test_fingerprint_mismatch():
    arch = random_architecture(appendix_spaces(), CFG, np.random.default_rng(0))
    with pytest.raises(ConfigurationError, match="fingerprint"):
        instantiate(arch, SupernetConfig.desk(image_size=64))


def test_fresh_weights_differ_from_supernet(saturated):
    net, _ = saturated
    det = instantiate(decode(net.arch, net.spaces, CFG), CFG)
    assert not np.array_equal(det.stem.weight.data, net.stem.weight.data)


# -- retraining ----------------------------------------------------------------------------
def test_separable_task_has_a_trivial_reference():
    """Per-channel means of the rectangle already separate the classes."""
    data = generate(DatasetSpec(seed=0, n_weight=64, n_arch=64, n_test=64, image_size=32, variant="separable"))
    feats = lambda s: s.images.reshape(len(s), 3, -1).max(axis=2)
    pool = data.train_pool()
    centroids = np.stack([feats(pool)[pool.labels == k].mean(axis=0) for k in range(4)])
    pred = np.argmin(((feats(data.test)[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == data.test.labels) == 1.0


def test_hand_wired_architecture_solves_separable_variant():
    data = generate(DatasetSpec(seed=0, n_weight=256, n_arch=256, n_test=256, image_size=32, variant="separable"))
    op = "conv_k3_d1"
    arch = Architecture([op] * 5, [op] * 8, [op] * 4, CFG.stage_depths, CFG.head_fc_dim, CFG.fingerprint())
    metrics = retrain_and_eval(arch, CFG, data, TrainBudget(epochs=6))
    assert metrics["accuracy"] >= 0.99


def test_retraining_is_deterministic():
    data = generate(DatasetSpec(seed=1, n_weight=32, n_arch=32, n_test=32, image_size=32))
    arch = random_architecture(appendix_spaces(), CFG, np.random.default_rng(3))
    runs = [retrain_and_eval(arch, CFG, data, TrainBudget(epochs=1, batch_size=16)) for _ in range(2)]
    assert runs[0] == runs[1]


def test_random_baseline_reports_the_mean():
    data = generate(DatasetSpec(seed=1, n_weight=16, n_arch=16, n_test=16, image_size=32))
    runs, mean = random_baseline(appendix_spaces(), CFG, data, TrainBudget(epochs=1, batch_size=16), count=2)
    assert len(runs) == 2
    assert mean["loss"] == pytest.approx((runs[0]["loss"] + runs[1]["loss"]) / 2)


def test_training_lowers_the_loss():
    data = generate(DatasetSpec(seed=2, n_weight=64, n_arch=64, n_test=64, image_size=32))
    det = instantiate(random_architecture(appendix_spaces(), CFG, np.random.default_rng(5)), CFG)
    before = evaluate_net(det, data.train_pool())["loss"]
    history = train_net(det, data.train_pool(), TrainBudget(epochs=3, batch_size=16))
    assert history[-1] < before
