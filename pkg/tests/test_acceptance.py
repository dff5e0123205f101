"""Acceptance criteria 1-8, each at its stated tolerance.

Every test tags itself with its criterion number; ``conftest.py`` prints the
PASS/FAIL summary at the end of the run.
"""
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rootconv import ops
from rootconv.analysis import (SampleMatrix, block_mask, dependency_mask, noise_block_statistics, zca_matrix,
                               zca_whiten)
from rootconv.arch import make_arch, make_googlenet, make_nin, make_resnet50, make_schedule, make_tiny_convnet
from rootconv.bench import bench_gemm
from rootconv.cost import compare, net_cost
from rootconv.data import find_cifar10, load_cifar10, make_synthetic
from rootconv.model import Network
from rootconv.tensor import elementwise, gemm, gemm_batched
from rootconv.trainer import TrainConfig, init_params, train

from oracles import denman_beavers_inv_sqrt, direct_conv, embed_dense, naive_pool, numerical_grad, rel_err
from test_arch import GOOGLENET_TABLE, NIN_LAYERS, NIN_TABLE, RESNET_TABLE, _stage_of
from test_ops import _make, conv_configs
from test_trainer import TOY, network_gradient_check


@pytest.fixture
def criterion(record_property):
    def tag(n, check):
        record_property("criterion", str(n))
        record_property("check", check)
    return tag


# ---------------------------------------------------------------- 1. cost model

def _reductions(arch, variant):
    t0 = time.perf_counter()
    rep = compare(net_cost(make_arch(arch)), net_cost(make_arch(arch, variant)))
    elapsed = time.perf_counter() - t0
    return 1 - rep.flops_ratio, 1 - rep.params_ratio, elapsed


# (arch, variant, quantity, target reduction)
COST_CLAIMS = [
    ("nin", "root-8", "flops", 0.54),
    ("nin", "root-8", "params", 0.67),
    ("resnet50", "root-16", "flops", 0.37),
    ("resnet50", "root-16", "params", 0.27),
    ("resnet50", "root-64", "flops", 0.45),
    ("resnet50", "root-64", "params", 0.40),
    ("resnet200", "root-32", "flops", 0.25),
    ("resnet200", "root-32", "params", 0.44),
    ("googlenet", "root-16", "flops", 0.44),
    ("googlenet", "root-16", "params", 0.07),
]


@pytest.mark.parametrize("arch,variant,quantity,target", COST_CLAIMS,
                         ids=[f"{a}-{v}-{q}" for a, v, q, _ in COST_CLAIMS])
def test_1_cost_reduction(criterion, arch, variant, quantity, target):
    criterion(1, f"{arch} {variant} {quantity}")
    flops, params, elapsed = _reductions(arch, variant)
    got = flops if quantity == "flops" else params
    assert elapsed < 1.0
    assert abs(got - target) <= 0.03, f"{quantity} reduction {got:.1%}, expected {target:.0%} +/- 3pp"


# ---------------------------------------------------------------- 2. kernels

@settings(max_examples=200, deadline=None)
@given(conv_configs(grouped=False))
def _dense_conv_property(cfg):
    x, w = _make(cfg, np.float32)
    got = ops.conv_grouped_forward(x, w, cfg[6], cfg[7])
    assert np.max(np.abs(got - direct_conv(x, w.filters, w.bias, cfg[6], cfg[7]))) <= 1e-5


@settings(max_examples=200, deadline=None)
@given(conv_configs(grouped=True))
def _grouped_conv_property(cfg):
    x, w = _make(cfg, np.float32)
    got = ops.conv_grouped_forward(x, w, cfg[6], cfg[7])
    want = direct_conv(x, embed_dense(w.filters, cfg[8]), w.bias, cfg[6], cfg[7])
    assert np.max(np.abs(got - want)) <= 1e-5


def test_2_conv_forward_oracles(criterion):
    criterion(2, "forward vs 7-loop and embedding oracles, 200+200 configs")
    _dense_conv_property()
    _grouped_conv_property()


@settings(max_examples=30, deadline=None)
@given(conv_configs())
def _conv_backward_property(cfg):
    x, w = _make(cfg)
    s, p = cfg[6], cfg[7]
    r = np.random.default_rng(cfg[-1]).standard_normal(ops.conv_grouped_forward(x, w, s, p).shape)
    f = lambda: float(np.sum(ops.conv_grouped_forward(x, w, s, p) * r))
    gx, gw, gb = ops.conv_grouped_backward(x, w, r, s, p)
    assert rel_err(gx, numerical_grad(f, x)) <= 1e-3
    assert rel_err(gw, numerical_grad(f, w.filters)) <= 1e-3
    if w.bias is not None:
        assert rel_err(gb, numerical_grad(f, w.bias)) <= 1e-3


def test_2_backward_finite_differences(criterion):
    criterion(2, "f64 finite differences for every backward op")
    _conv_backward_property()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 6))
    for k, s, p in [(2, 2, 0), (3, 2, 1)]:
        y, idx = ops.max_pool_forward(x, k, s, p)
        np.testing.assert_allclose(y, naive_pool(x, k, s, p, "max"))
        r = rng.standard_normal(y.shape)
        num = numerical_grad(lambda: float(np.sum(ops.max_pool_forward(x, k, s, p)[0] * r)), x)
        assert rel_err(ops.max_pool_backward(r, idx, x.shape, k, s, p), num) <= 1e-3
        r = rng.standard_normal(ops.avg_pool_forward(x, k, s, p).shape)
        num = numerical_grad(lambda: float(np.sum(ops.avg_pool_forward(x, k, s, p) * r)), x)
        assert rel_err(ops.avg_pool_backward(r, x.shape, k, s, p), num) <= 1e-3
    r = rng.standard_normal((2, 3, 1, 1))
    num = numerical_grad(lambda: float(np.sum(ops.global_avg_pool_forward(x) * r)), x)
    assert rel_err(ops.global_avg_pool_backward(r, x.shape), num) <= 1e-3
    # batchnorm in training mode with affine parameters
    bn = ops.BatchNormState.create(3, True, np.float64)
    bn.gamma, bn.beta = rng.standard_normal(3), rng.standard_normal(3)
    r = rng.standard_normal(x.shape)
    fresh = lambda: ops.BatchNormState(bn.running_mean.copy(), bn.running_var.copy(), bn.gamma, bn.beta)
    _, cache = ops.batchnorm_forward(x, fresh(), "train")
    gx, gg, gb = ops.batchnorm_backward(r, cache)
    f = lambda: float(np.sum(ops.batchnorm_forward(x, fresh(), "train")[0] * r))
    assert rel_err(gx, numerical_grad(f, x)) <= 1e-3
    assert rel_err(gg, numerical_grad(f, bn.gamma)) <= 1e-3
    assert rel_err(gb, numerical_grad(f, bn.beta)) <= 1e-3
    # relu, linear and softmax cross-entropy
    r = rng.standard_normal(x.shape)
    relu_in = x + 0.1 * np.sign(x)
    num = numerical_grad(lambda: float(np.sum(elementwise("relu", relu_in) * r)), relu_in)
    assert rel_err(elementwise("relu_grad", relu_in, r), num) <= 1e-3
    wgt, b, labels = rng.standard_normal((4, x[0].size)), rng.standard_normal(4), np.array([1, 3])
    loss = lambda: ops.softmax_cross_entropy(ops.linear_forward(x, wgt, b), labels)[0]
    _, g = ops.softmax_cross_entropy(ops.linear_forward(x, wgt, b), labels)
    gx, gw, gb = ops.linear_backward(x, wgt, g, True)
    for ana, wrt in ((gx, x), (gw, wgt), (gb, b)):
        assert rel_err(ana, numerical_grad(loss, wrt)) <= 1e-3


@pytest.mark.parametrize("arch", list(TOY))
def test_2_network_backward(criterion, arch):
    criterion(2, f"network backward, toy {arch}")
    network_gradient_check(arch)


# ---------------------------------------------------------------- 3. MAC counter

ALL_VARIANTS = {
    "nin": ["baseline", "root-2", "root-4", "root-8", "root-16"],
    "resnet50": list(RESNET_TABLE),
    "resnet200": list(RESNET_TABLE),
    "googlenet": list(GOOGLENET_TABLE),
}


@pytest.mark.parametrize("arch", list(ALL_VARIANTS))
def test_3_mac_counter_matches_cost_model(criterion, arch):
    criterion(3, f"{arch}, every variant, every layer")
    for variant in ALL_VARIANTS[arch]:
        net = make_arch(arch, variant, input_size=32)
        state = init_params(net, 0)
        run = Network(net, state.params, state.buffers)
        run.forward(np.zeros(net.input_shape, np.float32), mode="eval", count=True)
        predicted = {r.name: r.flops for r in net_cost(net).rows}
        assert run.layer_macs, variant
        for name, macs in run.layer_macs.items():
            assert macs == predicted.get(name, 0), f"{variant} {name}: counted {macs}"


# ---------------------------------------------------------------- 4. batched GEMM

@settings(max_examples=150, deadline=None)
@given(batch=st.integers(1, 96), m=st.integers(1, 32), k=st.integers(1, 32), n=st.integers(1, 32),
       seed=st.integers(0, 2**31 - 1))
def _batched_bitwise_property(batch, m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((batch, m, k)).astype(np.float32)
    b = rng.standard_normal((batch, k, n)).astype(np.float32)
    assert gemm_batched(a, b).tobytes() == np.stack([gemm(a[t], b[t]) for t in range(batch)]).tobytes()


def test_4_batched_bitwise_equals_looped(criterion):
    criterion(4, "bitwise equality")
    _batched_bitwise_property()


@pytest.mark.parametrize("size", [8, 16, 32])
def test_4_batched_throughput(criterion, size):
    criterion(4, f"throughput, 64 matrices of {size}x{size}")
    looped, batched = bench_gemm(dims=(size, size, size), batch=64, reps=7)
    assert looped.checksum == batched.checksum
    assert batched.throughput >= looped.throughput, (looped.median, batched.median)


# ---------------------------------------------------------------- 5. ZCA

@pytest.mark.parametrize("c", [8, 16, 32, 64])
def test_5_zca(criterion, c):
    criterion(5, f"{c} channels")
    # random correlated channels: random eigenvectors, eigenvalues log-uniform in [0.1, 10]
    rng = np.random.default_rng(100 + c)
    q, _ = np.linalg.qr(rng.standard_normal((c, c)))
    a = q * np.sqrt(10 ** rng.uniform(-1, 1, c))
    X = SampleMatrix(a @ rng.standard_normal((c, 40 * c)) + rng.standard_normal((c, 1)), "x").center()
    _, Y = zca_whiten(X)
    cov = Y.X @ Y.X.T / (Y.n - 1)
    assert np.linalg.norm(cov - np.eye(c)) <= 1e-3
    C = X.X @ X.X.T / (X.n - 1)
    W = zca_matrix(C)
    assert np.max(np.abs(W - denman_beavers_inv_sqrt(C + 1e-5 * np.eye(c)))) <= 1e-6


# ---------------------------------------------------------------- 6. block structure

DEPENDENCY_NETS = [
    ("tiny root-4", lambda: make_tiny_convnet(groups=4, input_size=8)),
    ("nin root-4", lambda: make_nin("root-4")),
    ("nin root-16", lambda: make_nin("root-16")),
    ("nin tree-4", lambda: make_nin("tree-4")),
    ("resnet50 root-16", lambda: make_resnet50("root-16", input_size=32)),
    ("googlenet root-16", lambda: make_googlenet("root-16", input_size=32)),
]


@pytest.mark.parametrize("label,build", DEPENDENCY_NETS, ids=[d[0] for d in DEPENDENCY_NETS])
def test_6_dependency_masks(criterion, label, build):
    criterion(6, f"dependency masks, {label}")
    net = build()
    state = init_params(net, 0)
    x = np.random.default_rng(0).standard_normal(net.input_shape).astype(np.float32)
    grouped = [l for l in net.convs() if l.groups > 1]
    assert grouped
    for l in grouped:
        mask = dependency_mask(state, l.inputs[0], l.name, x)
        np.testing.assert_array_equal(mask, block_mask(l.out, l.in_channels, l.groups), err_msg=l.name)


@pytest.mark.parametrize("variant", ["root-4", "root-8"])
def test_6_noise_covariance_contrast(criterion, variant):
    criterion(6, f"noise covariance contrast, nin {variant}")
    net = make_nin(variant)
    groups = net.layer("conv3a").groups
    res = noise_block_statistics(init_params(net, 0), "conv2c", "conv3a", groups, n_images=2048)
    assert res["ratio"] < 0.25, res["ratio"]


# ---------------------------------------------------------------- 7. trainability

@pytest.mark.slow
def test_7_cifar_subset_trainability(criterion):
    criterion(7, "quarter-width nin on 500 CIFAR-10 images")
    if find_cifar10() is None:
        pytest.fail("CIFAR-10 binary batches not found; set ROOTCONV_CIFAR_DIR to the extracted "
                    "cifar-10-batches-bin directory")
    data = load_cifar10(split="train").subset(500)
    cfg = TrainConfig(lr_schedule=[(0, 0.05)], epochs=30, batch_size=50, seed=0)
    final = {}
    for variant in ("baseline", "root-4"):
        _, hist = train(make_nin(variant, width=0.25), data, cfg)
        final[variant] = hist[-1].loss
    assert all(v <= 0.5 for v in final.values()), final
    assert abs(final["baseline"] - final["root-4"]) <= 0.15, final


def test_7_separable_synthetic(criterion):
    criterion(7, "separable synthetic")
    data = make_synthetic("separable-2class", seed=0, n=200)
    _, hist = train(make_tiny_convnet(groups=2), data,
                    TrainConfig(lr_schedule=[(0, 0.05)], epochs=20, batch_size=20, seed=0))
    assert hist[-1].train_acc >= 0.99


# ---------------------------------------------------------------- 8. schedules and tables

def test_8_schedule_triples(criterion):
    criterion(8, "topology triples")
    assert "-".join(map(str, make_schedule("root", 8, 3).counts)) == "1-8-4"
    assert "-".join(map(str, make_schedule("column", 4, 3).counts)) == "1-4-4"
    assert "-".join(map(str, make_schedule("tree", 4, 3).counts)) == "1-4-8"


def test_8_table_rows(criterion):
    criterion(8, "nin, resnet-50 and googlenet table rows")
    t0 = time.perf_counter()
    for variant, row in NIN_TABLE.items():
        net = make_nin(variant)
        assert tuple(net.layer(n).groups for n in NIN_LAYERS) == row
    for variant, (conv1, *stages) in RESNET_TABLE.items():
        want = dict(zip(("res2", "res3", "res4", "res5"), stages))
        for l in make_resnet50(variant).convs():
            expect = conv1 if l.name == "conv1" else (want[_stage_of(l.name)] if l.kernel == (3, 3) else 1)
            assert l.groups == expect, (variant, l.name)
    for variant, (conv1, conv2, i3, i4, i5) in GOOGLENET_TABLE.items():
        net = make_googlenet(variant)
        per = {"inception_3": i3, "inception_4": i4, "inception_5": i5}
        assert (net.layer("conv1").groups, net.layer("conv2").groups) == (conv1, conv2)
        for l in net.convs():
            if l.name.startswith("inception"):
                expect = per[_stage_of(l.name)] if l.kernel in ((3, 3), (5, 5)) else 1
                assert l.groups == expect, (variant, l.name)
    assert time.perf_counter() - t0 < 1.0
