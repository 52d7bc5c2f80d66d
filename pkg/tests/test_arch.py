from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from branchconnect import arch, network
from branchconnect.arch import ArchSpecError
from branchconnect.experiments import widen

from conftest import NIN_BASE, TINY_BASE

GOLDEN = Path(__file__).parent / "golden"


def sections_text(spec):
    text = arch.format_branchnet(spec)
    return text[text.index("STEM"):]


def tensor_walk_count(spec):
    """Oracle: instantiate every parameter tensor and add up their sizes."""
    state = network.init_network(spec, 0)
    logits, _ = network.forward(state, np.zeros((1,) + tuple(spec.input_shape)))
    assert logits.shape == (1, spec.num_classes)
    return sum(p.data.size for p in state.params.values())


# ---------------------------------------------------------------- parsing


def test_alexnet_quick_stage_counts():
    base = arch.parse_arch_spec((GOLDEN / "alexnet_quick.arch").read_text())
    assert (base.P_c, base.P_f, base.num_classes) == (3, 2, 100)
    assert base.shapes[-1] == (100,)


def test_vector_input_single_fc():
    base = arch.parse_arch_spec("INPUT: 64\nFC: 10\n")
    assert (base.P_c, base.P_f) == (0, 1)
    assert arch.count_parameters(base) == 650


def test_oversized_kernel_is_a_line_numbered_error():
    with pytest.raises(ArchSpecError, match="line 2"):
        arch.parse_arch_spec("INPUT: 3x4x4\nCONV: 5x5,3,pad=0\nFC: 2\n")


@pytest.mark.parametrize("text,line", [
    ("INPUT: 3x8x8\nCONV: 3x3,4\nBOGUS: 3\nFC: 2\n", 3),
    ("INPUT: 3x8x8\nCONV: 3x3\nFC: 2\n", 2),
    ("INPUT: 3x8x8\nPOOL: 3x3,Median,2\nFC: 2\n", 2),
    ("INPUT: 3x8x8\n# comment\nCONV: axb,4\nFC: 2\n", 3),
])
def test_malformed_lines(text, line):
    with pytest.raises(ArchSpecError, match=f"line {line}"):
        arch.parse_arch_spec(text)


def test_comments_and_blank_lines_ignored():
    text = "# header\n\nINPUT: 3x8x8  # trailing\nCONV: 3x3,4\n\nFC: 2\n"
    assert arch.parse_arch_spec(text).P_c == 1


def test_lrn_is_identity_with_warning(caplog):
    import logging
    caplog.set_level(logging.WARNING, logger="branchconnect")
    base = arch.parse_arch_spec("INPUT: 3x8x8\nCONV: 3x3,4\nLRN\nFC: 2\n")
    assert base.shapes[1] == base.shapes[0]
    assert "LRN" in caplog.text


def test_format_base_round_trip():
    base = arch.parse_arch_spec((GOLDEN / "alexnet_full.arch").read_text())
    again = arch.parse_arch_spec(arch.format_base(base))
    assert [lay.text() for lay in again.layers] == [lay.text() for lay in base.layers]


# ---------------------------------------------------------------- counting


def test_count_examples():
    assert arch.count_parameters(arch.parse_arch_spec("INPUT: 64\nFC: 100\n")) == 6500
    assert arch.count_parameters(arch.parse_arch_spec("INPUT: 3x5x5\nCONV: 3x3,4\nFC: 2\n")) - (4 * 5 * 5 * 2 + 2) == 112


def test_alexnet_counts_match_reported_sizes():
    # 0.15M / 1.20M (AlexNet-Quick) and 0.18M / 0.64M (AlexNet-Full) with M=10
    for name, base_m, bc_m in (("alexnet_quick", 0.15, 1.20), ("alexnet_full", 0.18, 0.64)):
        base = arch.parse_arch_spec((GOLDEN / f"{name}.arch").read_text())
        bc = arch.reshape_to_branchconnect(base, 10, 5)
        assert round(arch.count_parameters(base) / 1e6, 2) == base_m
        assert round(arch.count_parameters(bc) / 1e6, 2) == bc_m


@pytest.mark.parametrize("text,M", [(TINY_BASE, 1), (TINY_BASE, 3), (NIN_BASE, 2)])
def test_count_matches_tensor_walk(text, M):
    spec = arch.reshape_to_branchconnect(arch.parse_arch_spec(text), M, 1)
    b = arch.parameter_breakdown(spec)
    assert b["total"] == b["stem"] + M * b["branch"] + b["head"]
    assert tensor_walk_count(spec) == b["total"]
    assert b["gates"] == spec.num_classes * M


# ---------------------------------------------------------------- reshaping


@pytest.mark.parametrize("name", ["alexnet_quick", "alexnet_full"])
def test_reshape_golden(name):
    base = arch.parse_arch_spec((GOLDEN / f"{name}.arch").read_text())
    spec = arch.reshape_to_branchconnect(base, 10, 1)
    assert sections_text(spec) == (GOLDEN / f"{name}_M10.expected").read_text()


def test_reshape_preserves_layer_list():
    base = arch.parse_arch_spec((GOLDEN / "alexnet_quick.arch").read_text())
    spec = arch.reshape_to_branchconnect(base, 4, 2)
    joined = [lay.text() for lay in spec.stem + spec.branch] + ["FC: 100"]
    assert joined == [lay.text() for lay in base.layers]


def test_reshape_nin_style():
    spec = arch.reshape_to_branchconnect(arch.parse_arch_spec(NIN_BASE), 3, 2)
    assert spec.head_kind == "conv_gates"
    assert [lay.text() for lay in spec.stem] == ["CONV: 3x3,6", "POOL: 3x3,Max,2"]
    assert [lay.text() for lay in spec.branch] == ["CONV: 3x3,6"]
    assert [lay.text() for lay in spec.head] == ["CONV_Gates: 1x1,4", "POOL: global,Ave"]


def test_reshape_degenerate_m1():
    spec = arch.reshape_to_branchconnect(arch.parse_arch_spec(TINY_BASE), 1, 1)
    state = network.init_network(spec, 0)
    assert state.gates.binary.tolist() == [[1.0]] * 4


def test_reshape_errors():
    with pytest.raises(ArchSpecError):
        arch.reshape_to_branchconnect(arch.parse_arch_spec("INPUT: 64\nFC: 10\n"), 2, 1)
    base = arch.parse_arch_spec(TINY_BASE)
    with pytest.raises(ArchSpecError, match="K"):
        arch.reshape_to_branchconnect(base, 2, 3)
    with pytest.raises(ArchSpecError, match="M"):
        arch.reshape_to_branchconnect(base, 0, 1)


def test_sectioned_round_trip():
    spec = arch.reshape_to_branchconnect(arch.parse_arch_spec((GOLDEN / "alexnet_quick.arch").read_text()), 10, 5)
    again = arch.parse_branchnet_spec(arch.format_branchnet(spec))
    assert arch.format_branchnet(again) == arch.format_branchnet(spec)
    assert (again.M, again.K) == (10, 5)


def test_load_branchnet_overrides_m_k(tiny_spec):
    text = arch.format_branchnet(tiny_spec)
    spec = arch.load_branchnet(text, 3, 2)
    assert (spec.M, spec.K) == (3, 2)
    with pytest.raises(ArchSpecError):
        arch.load_branchnet(TINY_BASE)


def test_gates_only_in_head():
    text = "INPUT: 3x8x8\nM: 2\nK: 1\nSTEM\nFC_Gates: 4\nBRANCH\nCONV: 3x3,4\nHEAD\nFC_Gates: 4\n"
    with pytest.raises(ArchSpecError):
        arch.parse_branchnet_spec(text)


# ---------------------------------------------------------------- widening


def test_widen_scales_convs_and_hidden_fc():
    base = arch.parse_arch_spec((GOLDEN / "alexnet_quick.arch").read_text())
    wide = widen(base, 2.0)
    assert [lay.text() for lay in wide.layers] == [
        "CONV: 5x5,64", "POOL: 3x3,Max,2", "CONV: 5x5,64", "POOL: 3x3,Ave,2",
        "CONV: 5x5,128", "POOL: 3x3,Ave,2", "FC: 128", "FC: 100"]
    assert widen(base, 1.0).layers == base.layers


def test_widen_keeps_nin_classifier():
    wide = widen(arch.parse_arch_spec(NIN_BASE), 2.0)
    assert [lay.text() for lay in wide.layers if lay.kind == "conv"] == ["CONV: 3x3,12", "CONV: 3x3,12", "CONV: 1x1,4"]


def test_layer_replace_keeps_text_stable():
    lay = arch.parse_arch_spec("INPUT: 3x8x8\nCONV: 3x3,4,stride=2\nFC: 2\n").layers[0]
    assert replace(lay, filters=8).text() == "CONV: 3x3,8,stride=2"
