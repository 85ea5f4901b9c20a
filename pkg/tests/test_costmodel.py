import pytest

from neural_diversity.costmodel import (
    COST_TABLE_HEADER,
    CostConfig,
    OverheadSpec,
    amortized_cost,
    cost_table,
    golden_variants,
    inference_latency_factor,
    variant_cost,
)
from neural_diversity.errors import ConfigError

# reference totals and relative factors of the five variants
GOLDEN = [
    ("Standard", 3.0, 1.000),
    ("ParScale", 4.015, 1.337),
    ("ParScale-BT", 4.155, 1.384),
    ("Indep. LoRA", 4.055, 1.352),
    ("ND-LoRA", 5.655, 1.885),
]


@pytest.mark.parametrize("row, expected", zip(cost_table(golden_variants()), GOLDEN))
def test_golden_table(row, expected):
    name, total, relative = expected
    assert row[0] == name
    assert row[5] == pytest.approx(total, abs=1e-9)
    # totals / 3 round one unit above two of the reference factors
    assert row[6] == pytest.approx(relative, abs=0.001 + 1e-9)
    assert len(row) == len(COST_TABLE_HEADER)


def test_standard_and_nd_lora_breakdown():
    standard, *_, nd_lora = golden_variants()
    assert (standard.forward, standard.backward, standard.total) == (1.0, 2.0, 3.0)
    assert standard.relative == 1.0
    assert nd_lora.backward == pytest.approx(2.0 * 1.3 / 495)
    assert round(nd_lora.relative, 3) == 1.885


def test_forward_units_scale_with_streams():
    assert variant_cost(8, 0.01).forward == 8.0


@pytest.mark.parametrize(
    "lower, higher",
    [
        (variant_cost(2, 0.01), variant_cost(3, 0.01)),
        (variant_cost(4, 0.01, OverheadSpec(bt=0.1)), variant_cost(4, 0.01, OverheadSpec(bt=0.2))),
        (variant_cost(4, 0.01, OverheadSpec(other=0.01)), variant_cost(4, 0.01, OverheadSpec(other=0.05))),
    ],
)
def test_total_is_monotone(lower, higher):
    assert lower.total < higher.total


@pytest.mark.parametrize("args", [(0, 0.5), (2, 0.0), (2, 1.5), (2, 0.5, OverheadSpec(bt=-1.0))])
def test_invalid_variants(args):
    with pytest.raises(ConfigError):
        variant_cost(*args)


@pytest.mark.parametrize(
    "finetune, relative, expected",
    [(0.0, 1.885, 1.0), (20e6, 1.885, 1.0000377), (20e6, 1.0, 1.00002)],
)
def test_amortized_cost(finetune, relative, expected):
    assert amortized_cost(1e12, finetune, relative) == pytest.approx(expected, abs=1e-12)


def test_amortized_cost_rejects_invalid_inputs():
    with pytest.raises(ConfigError):
        amortized_cost(0.0, 1.0, 1.0)


def test_inference_latency():
    assert inference_latency_factor(1) == 1.0
    assert inference_latency_factor(4) == 1.1


def test_configured_variant_matches_nd_lora():
    assert CostConfig().variant().total == pytest.approx(golden_variants()[-1].total)
    assert CostConfig(P=1).variant().total == 3.0
    assert CostConfig(shared_lora=True, bt_mode="none").variant().total == pytest.approx(
        golden_variants()[1].total
    )


def test_invalid_cost_config():
    with pytest.raises(ConfigError):
        CostConfig(bt_mode="huge")
    with pytest.raises(ConfigError):
        CostConfig(trainable_params=1e10)
