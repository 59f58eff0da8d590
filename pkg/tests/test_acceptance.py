"""Multi-seed experiments on the default synthetic benchmark.

These train the desk-scale model for the full schedule several times and take a long
while, so they only run with DKTF_RUN_SLOW=1.
"""

import os
import warnings
from collections.abc import Callable

import numpy as np
import pytest
from scipy.stats import binom

from darkformer import training
from darkformer.config import RunConfig
from darkformer.synth import PairedDataset, make_dataset
from darkformer.types import Domain

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.getenv("DKTF_RUN_SLOW") != "1", reason="set DKTF_RUN_SLOW=1 to run"),
]

SOURCE_ONLY = {"w_tgt_ce": "0", "w_bridge": "0", "w_dtl": "0", "cross_attention": "false"}

# Frozen thresholds, as fractions of top-1 accuracy on the default benchmark.
DARK_GAP = 0.10
ADAPTATION_GAIN = 0.05
AXIS_TOLERANCE = 0.02


@pytest.fixture(scope="module")
def dataset() -> PairedDataset:
    """The default benchmark."""
    return make_dataset(RunConfig().synth_config())


def test_untrained_model_is_at_chance(dataset: PairedDataset) -> None:
    """Test an untrained model scores inside the 99% binomial interval around 1/K."""
    cfg = RunConfig()
    params = training.build_model(cfg)
    for domain in (Domain.Source, Domain.Target):
        result = training.evaluate_split(params, dataset, domain).unwrap()
        low, high = binom.interval(0.99, result.count, 1.0 / cfg.num_classes)
        correct = int(np.trace(result.confusion))
        assert low <= correct <= high, f"{domain}: {correct}/{result.count} outside [{low}, {high}]"


def test_adaptation_closes_the_gap(dataset: PairedDataset, record_property: Callable[[str, object], None]) -> None:
    """Test source-only training leaves a dark gap and the full objective narrows it."""
    source_only, full = training.ablate(dataset, RunConfig(), [SOURCE_ONLY, {}]).unwrap()
    record_property("source_only_source_top1", source_only.source_top1)
    record_property("source_only_target_top1", source_only.target_top1)
    record_property("full_target_top1", full.target_top1)
    assert source_only.target_top1 <= source_only.source_top1 - DARK_GAP
    assert full.target_top1 >= source_only.target_top1 + ADAPTATION_GAIN


def test_space_time_beats_single_axis(dataset: PairedDataset, record_property: Callable[[str, object], None]) -> None:
    """Test joint space and time attention is at least as good as either axis alone."""
    cells = [
        {"attention_mode": mode, "cross_attention": cross}
        for mode in ("S", "T", "S+T")
        for cross in ("true", "false")
    ]
    rows = training.ablate(dataset, RunConfig(), cells).unwrap()
    by_cell = {(row.cell["attention_mode"], row.cell["cross_attention"]): row.target_top1 for row in rows}
    for (mode, cross), top1 in by_cell.items():
        record_property(f"{mode}_cross_{cross}_target_top1", top1)
    for cross in ("true", "false"):
        both = by_cell[("S+T", cross)]
        best_single = max(by_cell[("S", cross)], by_cell[("T", cross)])
        if both < best_single:
            assert both >= best_single - AXIS_TOLERANCE, f"cross={cross}: S+T {both:.3f} vs {best_single:.3f}"
            warnings.warn(f"cross={cross}: S+T {both:.3f} within 2 points below {best_single:.3f}", stacklevel=1)
