import numpy as np
import pytest

from puyun.data import normalize
from puyun.errors import ConfigError, NumericError
from puyun.formats import read_pygr
from puyun.forecast import cascade_rollout, rollout, save_forecast
from puyun.model import forward, init_parameters


@pytest.fixture(scope="module")
def params(tiny_config):
    return init_parameters(tiny_config, 5, zero_merge=False)


@pytest.fixture(scope="module")
def other(tiny_config):
    return init_parameters(tiny_config, 6, zero_merge=False)


@pytest.fixture
def pair(tiny_data):
    return tiny_data.state(40), tiny_data.state(41)


def test_single_step_equals_forward(params, pair, tiny_config):
    run = rollout(params, pair, 1, tiny_config)
    assert np.array_equal(run.values[0], forward(pair, params, tiny_config))
    assert run.steps[0].time_index == 42


def test_three_steps_manual_chaining(params, pair, tiny_config):
    run = rollout(params, pair, 3, tiny_config)
    a, b = pair[0].values, pair[1].values
    for k in range(3):
        nxt = forward((a, b), params, tiny_config)
        assert np.array_equal(run.values[k], nxt)
        a, b = b, nxt


def test_persistence_chain(pair, tiny_config):
    run = rollout(init_parameters(tiny_config, 0), pair, 4, tiny_config)
    assert all(np.array_equal(v, pair[1].values) for v in run.values)


def test_lead_hours_and_ids(params, pair, tiny_config):
    run = rollout(params, pair, 5, tiny_config)
    assert run.lead_hours == [6, 12, 18, 24, 30]
    assert run.model_ids == ["short"] * 5
    assert [s.time_index for s in run.steps] == [42, 43, 44, 45, 46]


def test_rollout_deterministic(params, pair, tiny_config):
    assert np.array_equal(rollout(params, pair, 4, tiny_config).values,
                          rollout(params, pair, 4, tiny_config).values)


def test_rollout_steps_zero(params, pair, tiny_config):
    with pytest.raises(ConfigError):
        rollout(params, pair, 0, tiny_config)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_rollout_nan_reports_step(params, pair, tiny_config):
    big = dict(params)
    big["merge.bias"] = np.full_like(params["merge.bias"], 1e38)
    with pytest.raises(NumericError, match="rollout step 2"):
        rollout(big, pair, 3, tiny_config)


def test_cascade_prefix_and_switch(params, other, pair, tiny_config):
    short = rollout(params, pair, 6, tiny_config)
    cas = cascade_rollout(params, other, pair, 6, 4, tiny_config)
    assert np.array_equal(cas.values[:4], short.values[:4])
    assert cas.model_ids == ["short"] * 4 + ["medium"] * 2
    med = rollout(other, (short.steps[2], short.steps[3]), 2, tiny_config)
    assert np.array_equal(cas.values[4:], med.values)
    assert [s.time_index for s in cas.steps] == list(range(42, 48))


def test_cascade_same_params_is_plain_rollout(params, pair, tiny_config):
    assert np.array_equal(cascade_rollout(params, params, pair, 6, 3, tiny_config).values,
                          rollout(params, pair, 6, tiny_config).values)


def test_cascade_boundary_and_errors(params, other, pair, tiny_config):
    cas = cascade_rollout(params, other, pair, 5, 4, tiny_config)
    assert cas.model_ids.count("medium") == 1
    for S in (1, 5, 6):
        with pytest.raises(ConfigError):
            cascade_rollout(params, other, pair, 5, S, tiny_config)


def test_save_forecast(params, pair, tiny_config, tiny_data, tmp_path):
    run = cascade_rollout(params, params, pair, 5, 2, tiny_config)
    path = tmp_path / "f.pygr"
    save_forecast(path, run, tiny_config, tiny_data.stats, {"handoff": 2})
    values, names, lats, side = read_pygr(path)
    assert side["init_time"] == 41 and side["lead_hours"] == [6, 12, 18, 24, 30]
    assert side["handoff"] == 2 and side["model_ids"][2] == "medium"
    back = normalize(values, tiny_data.stats)
    np.testing.assert_allclose(back, run.values, atol=1e-4)
