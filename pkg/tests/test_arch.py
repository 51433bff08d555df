import dataclasses

import numpy as np
import pytest

from dpdnet.analysis import count_network
from dpdnet.arch import (BUILTIN_NAMES, build_network, builtin_spec, emit_spec, network_backward,
                         network_forward, parse_spec, scale_width)
from dpdnet.errors import ParseError, ShapeError, SpecError
from dpdnet.tensor import make_rng


def test_scale_width_rounding():
    assert scale_width(1.25, 16) == 20
    assert scale_width(1.75, 24) == 42
    assert scale_width(2.5, 1) == 3  # 2.5 rounds half up
    assert scale_width(0.01, 16) == 1


def test_dpdnet_widths():
    s = builtin_spec("dpdnet_cifar", 1.0, 5, 10)
    assert s.widths() == [16, 24, 32, 64, 96, 160] and s.stem_channels == 32


def test_dpdnet_double_width():
    s = builtin_spec("dpdnet_cifar", 2.0, 5, 10)
    assert s.widths() == [32, 48, 64, 128, 192, 320]
    assert s.stem_channels == 32
    assert builtin_spec("dpdnet_cifar", 2.0, 5, 10, scale_stem=True).stem_channels == 64


def test_resnet_depths():
    for name in ("resnet50_cifar", "psdnet50_cifar"):
        s = builtin_spec(name)
        assert s.weight_layer_count() == 50
        assert len(s.block_specs()) == 16
    assert builtin_spec("mbv2_20_cifar").weight_layer_count() == 20
    assert builtin_spec("dpdnet_cifar").weight_layer_count() == 20


def test_resnet_stage_strides():
    strides = [b.stride for b in builtin_spec("resnet50_cifar").block_specs()]
    assert [i for i, s in enumerate(strides) if s == 2] == [5, 11]


def test_unknown_builtin():
    with pytest.raises(KeyError):
        builtin_spec("vgg16")


def test_cifar_forward_shape():
    net = build_network(builtin_spec("dpdnet_cifar", 1.0, 1), make_rng(0))
    assert network_forward(net, np.zeros((2, 3, 32, 32))).shape == (2, 10)


def test_wrong_input_size():
    net = build_network(builtin_spec("dpdnet_cifar", 1.0, 1), make_rng(0))
    with pytest.raises(ShapeError):
        network_forward(net, np.zeros((1, 3, 24, 24)))


@pytest.mark.slow
def test_imagenet_forward():
    spec = builtin_spec("dpdnet_imagenet")
    assert (spec.alpha, spec.multiplier, spec.num_classes) == (1.0, 6, 1000)
    net = build_network(spec, make_rng(0))
    x = make_rng(1).uniform(size=(1, 3, 224, 224))
    feats = net.features(x)
    assert feats.shape == (1, 1280, 7, 7)
    assert network_forward(net, x).shape == (1, 1000)


def test_network_backward_names(rng):
    net = build_network(builtin_spec("dpdnet_cifar", 0.25, 1), rng)
    x = rng.standard_normal((2, 3, 32, 32))
    logits = network_forward(net, x, True)
    gx, grads = network_backward(net, np.ones_like(logits))
    assert gx.shape == x.shape
    assert set(grads) == {p.name for p in net.parameters()}


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_emit_parse_round_trip(name):
    spec = builtin_spec(name, 1.0, 6, 10)
    assert parse_spec(emit_spec(spec)) == spec


def test_round_trip_scaled():
    spec = builtin_spec("mbv2_20_cifar", 1.75, 3, 100, scale_stem=True)
    assert parse_spec(emit_spec(spec)) == spec


def test_stride_three_names_the_block():
    text = emit_spec(builtin_spec("dpdnet_cifar", 1.0, 6, 10)).replace(
        "out_channels = 96\nstride = 2", "out_channels = 96\nstride = 3")
    with pytest.raises(ParseError, match="stage 5"):
        parse_spec(text)


def test_builtin_override_changes_one_block():
    base = builtin_spec("dpdnet_cifar", 1.0, 6, 10)
    text = "name = dpdnet_cifar\nalpha = 1\nm = 6\nnum_classes = 10\n\n[stage 5]\nout_channels = 100\n"
    spec = parse_spec(text)
    a, b = base.block_specs(), spec.block_specs()
    diff = [i for i, (x, y) in enumerate(zip(a, b)) if x != y]
    # block 5 changes width; block 6 sees the new input width
    assert b[4].out_channels == 100 and a[4].out_channels == 96
    assert diff == [4, 5] and b[5].in_channels == 100
    assert spec.widths() == [16, 24, 32, 64, 100, 160]


@pytest.mark.parametrize("text,match", [
    ("alpha = 1\nm = 1\n", "num_classes"),
    ("name = dpdnet_cifar\nalpha = 9\nm = 1\nnum_classes = 10\n", "alpha"),
    ("name = dpdnet_cifar\nalpha = 1\nm = 1\nnum_classes = 10\n[stage 1]\nout_channels = 1.5\n",
     "out_channels"),
    ("name = dpdnet_cifar\nalpha = 1\nm = 1\nnum_classes = 10\ncolour = red\n", "colour"),
])
def test_parse_errors(text, match):
    with pytest.raises(ParseError, match=match):
        parse_spec(text)


def test_parse_error_carries_line():
    with pytest.raises(ParseError) as info:
        parse_spec("name = dpdnet_cifar\nalpha = 1\nm = 1\nnum_classes = 10\nbogus = 1\n")
    assert "line 5" in str(info.value)


def test_custom_network_document():
    text = """
name = tiny
alpha = 1
m = 2
num_classes = 3
input_size = 8

[stem]
out_channels = 4

[stage 1]
kind = dpd
out_channels = 4
stride = 2

[head]
pool = global
"""
    spec = parse_spec(text)
    net = build_network(spec, make_rng(0))
    assert network_forward(net, np.zeros((1, 3, 8, 8))).shape == (1, 3)


def test_alpha_monotone():
    prev = 0
    for alpha in (1.0, 1.25, 1.5, 2.0, 3.0):
        params = count_network(builtin_spec("dpdnet_cifar", alpha, 5)).params
        assert params > prev
        prev = params


def test_spec_validation():
    with pytest.raises(SpecError):
        dataclasses.replace(builtin_spec("dpdnet_cifar"), alpha=0)
