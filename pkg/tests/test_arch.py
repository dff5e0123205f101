import json

import pytest
from hypothesis import given, settings, strategies as st

from rootconv.arch import (INPUT, GroupingSchedule, LayerSpec, NetSpec, NetSpecError, TransformError,
                           apply_root_transform, make_arch, make_googlenet, make_nin, make_resnet50,
                           make_resnet200, make_schedule, make_tiny_convnet, parse_variant, structural_diff)
from rootconv.ops import ConfigError

# Group counts per layer, one row per reference variant.
NIN_TABLE = {
    "baseline": (1, 1, 1, 1, 1, 1, 1, 1, 1),
    "root-2": (1, 1, 1, 2, 1, 1, 1, 1, 1),
    "root-4": (1, 1, 1, 4, 1, 1, 2, 1, 1),
    "root-8": (1, 1, 1, 8, 1, 1, 4, 1, 1),
    "root-16": (1, 1, 1, 16, 1, 1, 8, 1, 1),
}
NIN_LAYERS = ("conv1a", "conv1b", "conv1c", "conv2a", "conv2b", "conv2c", "conv3a", "conv3b", "conv3c")

# (conv1, res2 3x3, res3 3x3, res4 3x3, res5 3x3); every 1x1 stays ungrouped
RESNET_TABLE = {
    "baseline": (1, 1, 1, 1, 1),
    "root-2": (1, 2, 1, 1, 1),
    "root-4": (1, 4, 2, 1, 1),
    "root-8": (1, 8, 4, 2, 1),
    "root-16": (1, 16, 8, 4, 2),
    "root-32": (1, 32, 16, 8, 4),
    "root-64": (1, 64, 32, 16, 8),
}

# (conv1, conv2 3x3, incp3 3x3/5x5, incp4 3x3/5x5, incp5 3x3/5x5); 1x1 layers ungrouped
GOOGLENET_TABLE = {
    "baseline": (1, 1, 1, 1, 1),
    "root-2": (1, 2, 1, 1, 1),
    "root-4": (1, 4, 2, 1, 1),
    "root-8": (1, 8, 4, 2, 1),
    "root-16": (1, 16, 8, 4, 2),
}


def _stage_of(name):
    for prefix in ("res2", "res3", "res4", "res5", "inception_3", "inception_4", "inception_5"):
        if name.startswith(prefix):
            return prefix
    return name


def test_named_topology_triples():
    assert make_schedule("root", 8, 3).counts == (1, 8, 4)
    assert make_schedule("column", 4, 3).counts == (1, 4, 4)
    assert make_schedule("tree", 4, 3).counts == (1, 4, 8)


@pytest.mark.parametrize("variant", list(NIN_TABLE))
def test_nin_table(variant):
    net = make_nin(variant)
    assert tuple(net.layer(n).groups for n in NIN_LAYERS) == NIN_TABLE[variant]


@pytest.mark.parametrize("variant", list(RESNET_TABLE))
def test_resnet50_table(variant):
    conv1, *stages = RESNET_TABLE[variant]
    want = dict(zip(("res2", "res3", "res4", "res5"), stages))
    net = make_resnet50(variant)
    assert net.layer("conv1").groups == conv1
    checked = 0
    for l in net.convs():
        if l.name == "conv1":
            continue
        expect = want[_stage_of(l.name)] if l.kernel == (3, 3) else 1
        assert l.groups == expect, l.name
        checked += l.kernel == (3, 3)
    assert checked == 16


@pytest.mark.parametrize("variant", ["root-32", "root-64"])
def test_resnet200_uses_resnet_schedule(variant):
    conv1, *stages = RESNET_TABLE[variant]
    want = dict(zip(("res2", "res3", "res4", "res5"), stages))
    net = make_resnet200(variant)
    spatial = [l for l in net.convs() if l.kernel == (3, 3)]
    assert len(spatial) == 3 + 24 + 36 + 3
    assert all(l.groups == want[_stage_of(l.name)] for l in spatial)
    assert all(l.groups == 1 for l in net.convs() if l.kernel == (1, 1))


@pytest.mark.parametrize("variant", list(GOOGLENET_TABLE))
def test_googlenet_table(variant):
    conv1, conv2, i3, i4, i5 = GOOGLENET_TABLE[variant]
    net = make_googlenet(variant)
    assert net.layer("conv1").groups == conv1
    assert net.layer("conv2_reduce").groups == 1
    assert net.layer("conv2").groups == conv2
    per_stage = {"inception_3": i3, "inception_4": i4, "inception_5": i5}
    modules = set()
    for l in net.convs():
        if l.name.startswith("inception"):
            modules.add(l.name.split("_")[1])
            expect = per_stage[_stage_of(l.name)] if l.kernel in ((3, 3), (5, 5)) else 1
            assert l.groups == expect, l.name
    assert modules == {"3a", "3b", "4a", "4b", "4c", "4d", "4e", "5a", "5b"}


@pytest.mark.parametrize("maker", [make_nin, make_resnet50, make_resnet200, make_googlenet])
@pytest.mark.parametrize("variant", ["root-2", "root-8"])
def test_transform_of_baseline_equals_generated_variant(maker, variant):
    base = maker("baseline")
    got = apply_root_transform(base, variant)
    want = maker(variant)
    assert got.layers == want.layers
    diff = structural_diff(base, got)
    assert diff and all(set(d) == {"groups"} for d in diff.values())


def test_transform_overrides_single_layer():
    net = apply_root_transform(make_googlenet(), "root-4", {"inception_3a_5x5": 1})
    assert net.layer("inception_3a_5x5").groups == 1
    assert net.layer("inception_3a_3x3").groups == 2
    assert net.name.endswith("+overrides")
    with pytest.raises(TransformError):
        apply_root_transform(make_googlenet(), "root-4", {"pool1": 2})


def _chain_of_spatial_convs():
    layers = [
        LayerSpec("c1", "conv", (INPUT,), 8, (3, 3), pad=1, stage="s1"),
        LayerSpec("c2", "conv", ("c1",), 8, (3, 3), pad=1, stage="s2"),
        LayerSpec("c3", "conv", ("c2",), 8, (3, 3), pad=1, stage="s3"),
        LayerSpec("gp", "pool", ("c3",), mode="global"),
        LayerSpec("prob", "softmax", ("gp",)),
    ]
    return NetSpec(tuple(layers), (1, 3, 8, 8))


def test_transform_requires_a_mixing_layer():
    net = _chain_of_spatial_convs()
    with pytest.raises(TransformError, match="c2"):
        apply_root_transform(net, "root-2")
    assert apply_root_transform(net, "baseline").layers == net.validate().layers


def test_transform_rejects_wrong_schedule_length():
    with pytest.raises(TransformError):
        apply_root_transform(make_nin(), GroupingSchedule("root", 4, (1, 4, 2, 1)))


@settings(max_examples=60, deadline=None)
@given(topology=st.sampled_from(["root", "column", "tree"]), log_d=st.integers(1, 6),
       positions=st.integers(2, 9))
def test_schedule_invariants(topology, log_d, positions):
    d = 2 ** log_d
    s = make_schedule(topology, d, positions)
    c = s.counts
    assert len(c) == positions and c[0] == 1 and c[1] == d
    rest = c[1:]
    if topology == "root":
        assert all(b <= a and a % b == 0 for a, b in zip(rest, rest[1:]))
        assert min(rest) >= 1
    elif topology == "column":
        assert set(rest) == {d}
    else:
        assert all(b == 2 * a for a, b in zip(rest, rest[1:]))
    assert GroupingSchedule.from_counts(c).counts == c


def test_schedule_errors():
    for bad in (0, 1, 3, 6):
        with pytest.raises(ValueError):
            make_schedule("root", bad, 3)
    with pytest.raises(ValueError):
        make_schedule("spiral", 4, 3)
    with pytest.raises(ValueError):
        make_schedule("root", 4, 1)
    with pytest.raises(ValueError):
        GroupingSchedule("root", 4, (2, 4, 2))
    with pytest.raises(ValueError):
        GroupingSchedule("root", 4, (1, 2, 4))


def test_parse_variant_forms():
    assert parse_variant("root-8", 3).counts == (1, 8, 4)
    assert parse_variant("orig", 3).counts == (1, 1, 1)
    assert parse_variant(4, 3).counts == (1, 4, 2)
    assert parse_variant([1, 2, 4], 3).topology == "tree"
    with pytest.raises(ValueError):
        parse_variant("root-x", 3)


@pytest.mark.parametrize("arch", ["nin", "resnet50", "resnet200", "googlenet"])
def test_json_round_trip_and_output_shape(arch):
    net = make_arch(arch, "root-4")
    again = NetSpec.from_json(net.to_json())
    assert again == net
    classes = 10 if arch == "nin" else 1000
    assert net.shapes()[net.output] == (1, classes, 1, 1)
    assert json.loads(net.to_json())["layers"][0]["name"]


def test_validation_names_offending_edge():
    d = make_nin().to_dict()
    for l in d["layers"]:
        if l["name"] == "conv2a":
            l["in"] = 77
    with pytest.raises(NetSpecError, match="edge pool1 -> conv2a"):
        NetSpec.from_dict(d).validate()


def test_validation_other_errors():
    net = _chain_of_spatial_convs()
    dup = NetSpec(net.layers + (LayerSpec("c1", "relu", ("c3",)),), net.input_shape)
    with pytest.raises(NetSpecError, match="duplicate"):
        dup.validate()
    missing = NetSpec((LayerSpec("a", "relu", ("nope",)),), (1, 1, 4, 4))
    with pytest.raises(NetSpecError, match="edge nope -> a"):
        missing.validate()
    with pytest.raises(ConfigError):
        LayerSpec("g", "conv", (INPUT,), 6, (3, 3), groups=4)
    with pytest.raises(NetSpecError):
        NetSpec.from_dict({"layers": []})
    with pytest.raises(NetSpecError):
        LayerSpec("p", "pool", (INPUT,), mode="median")


def test_width_scaling_and_tiny_net():
    net = make_nin("root-4", width=0.25)
    assert net.layer("conv1a").out == 48 and net.layer("conv3c").out == 10
    tiny = make_tiny_convnet(groups=2, width=8)
    assert tiny.layer("conv2").groups == 2 and tiny.layer("conv3").kernel == (1, 1)
    assert tiny.shapes()[tiny.output] == (1, 2, 1, 1)


def test_googlenet_batchnorm_has_no_affine():
    net = make_googlenet()
    bns = [l for l in net.layers if l.kind == "batchnorm"]
    assert bns and not any(l.affine for l in bns)
