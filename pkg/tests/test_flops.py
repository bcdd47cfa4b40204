from fractions import Fraction

import numpy as np
import pytest

from svphw.flops import (
    count_flops,
    count_params,
    dsconv_macs,
    expected_ratio,
    param_breakdown,
    ratio_mismatches,
    standard_conv_macs,
)
from svphw.layers import MnseLayerSpec, StackSpec, encoder_spec
from svphw.model import SVPHW, ModelConfig
from svphw.params import ParameterStore


def test_worked_example():
    assert standard_conv_macs(8, 16, 3, 16, 16) == 294_912
    assert dsconv_macs(8, 16, 3, 16, 16) == 18_432 + 32_768 == 51_200
    report = count_flops(StackSpec("plain", [MnseLayerSpec(8, 16, 3, 1)]), (8, 16, 16))
    conv = report.entries[0]
    assert (conv.macs, conv.standard_macs) == (51_200, 294_912)
    assert conv.ratio == Fraction(25, 144)
    assert conv.params == 72 + 128 + 8 + 16 == 224


def test_one_by_one_is_counterproductive():
    report = count_flops(StackSpec("plain", [MnseLayerSpec(4, 6, 1, 1)]), (4, 5, 5))
    assert report.entries[0].ratio == Fraction(7, 6)


def test_every_default_ratio_matches_closed_form():
    report = count_flops(ModelConfig())
    ratios = report.mnse_ratios()
    assert len(ratios) == 20
    assert ratio_mismatches(report) == []
    for e in report.entries:
        if e.kind == "dsconv":
            assert e.ratio == expected_ratio(e.output_shape[0], e.kernel_size)


def test_totals_are_sums():
    report = count_flops(ModelConfig())
    assert report.total_macs == sum(e.macs for e in report.entries)
    assert report.flops(True) == 2 * report.total_macs
    assert "total_macs = " in report.summary()
    assert report.to_tsv().count("\n") == len(report.entries) + 1


def test_params_match_store_for_default_model():
    model = SVPHW(ModelConfig())
    assert count_flops(model).total_params == count_params(model.params)
    assert sum(param_breakdown(model.params).values()) == count_params(model.params)


def test_count_params_examples():
    assert count_params(ParameterStore()) == 0
    store = ParameterStore()
    store.add("k", np.zeros((16, 8, 3, 3)))
    store.add("b", np.zeros(16))
    assert count_params(store) == 1168


def test_stack_needs_shape():
    spec = encoder_spec(1, 4, 2)
    with pytest.raises(ValueError, match="input shape"):
        count_flops(spec)
    with pytest.raises(ValueError, match="channels"):
        count_flops(spec, (2, 8, 8))
    with pytest.raises(TypeError):
        count_flops(object())
