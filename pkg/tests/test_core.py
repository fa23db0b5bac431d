import math

import numpy as np
import pytest

from pdilearn.core import Dataset, HyperParams, IntervalRule, Observation, TaskSpec, in_range, validate_dataset
from pdilearn.errors import DimensionMismatch, DoseOutOfRange, EmptyDataset, IndicatorMismatch


def test_single_observation_in_range_is_accepted():
    ds = validate_dataset(Dataset.from_observations([Observation(0.8, 0.5, (0.0,), 0.75, math.inf)]))
    assert ds.r.tolist() == [1]


def test_dose_above_one_rejected():
    with pytest.raises(DoseOutOfRange):
        validate_dataset(Dataset.from_observations([Observation(0.8, 1.2, (0.0,), 0.75, math.inf)]))


def test_supplied_indicator_must_agree():
    obs = Observation(0.7, 0.5, (0.0,), 0.75, math.inf, r=1)
    with pytest.raises(IndicatorMismatch):
        validate_dataset(Dataset.from_observations([obs]))


def test_empty_and_ragged_inputs():
    with pytest.raises(EmptyDataset):
        Dataset.from_observations([])
    with pytest.raises(DimensionMismatch):
        Dataset.from_observations([Observation(0, 0.1, (1.0,)), Observation(0, 0.1, (1.0, 2.0))])


def test_closed_range_membership():
    assert in_range([0.75, 0.7499, 2.0], 0.75, 2.0).tolist() == [1, 0, 1]


def test_subset_and_round_trip_of_rows():
    ds = Dataset([1, 2, 3], [0.1, 0.2, 0.3], np.arange(6.0).reshape(3, 2), -math.inf, 2.5)
    sub = ds.subset([2, 0])
    assert sub.y.tolist() == [3, 1]
    assert sub.observation(0).x == (4.0, 5.0)
    assert ds.indicator.tolist() == [1, 1, 0]


def test_hyperparameter_invariants():
    with pytest.raises(ValueError):
        HyperParams(gamma=0)
    with pytest.raises(ValueError):
        HyperParams(c_loss=2.0, c_cvx=1.0)
    with pytest.raises(ValueError):
        HyperParams(p_init=1.5)
    hp = HyperParams()
    assert hp.resolved_c_cvx(3.0) == 3e4
    assert hp.with_(lam=32.0).lam == 32.0
    with pytest.raises(ValueError):
        TaskSpec(1.0)


def test_interval_rule_shapes():
    with pytest.raises(DimensionMismatch):
        IntervalRule(0.0, np.zeros(2), 1.0, np.zeros(3), np.zeros((2, 1)), 1.0)
    with pytest.raises(ValueError):
        IntervalRule.constant_width(0.0, np.zeros(1), -0.1, np.zeros((1, 1)), 1.0)
