import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcls.config import RunConfig, parse_int_list, parse_str_list
from dcls.exceptions import ConfigError
from dcls.stats import pooled_t_statistic


def test_defaults():
    cfg = RunConfig()
    assert cfg.model.dilated_kernel_size == 23
    assert cfg.optim.lr_scale_positions == 5.0
    assert cfg.run.threads == 1


def test_roundtrip_default():
    cfg = RunConfig()
    assert RunConfig.from_ini(cfg.to_ini()) == cfg


@settings(max_examples=50, deadline=None)
@given(
    lr=st.floats(1e-6, 10, allow_nan=False),
    epochs=st.integers(0, 1000),
    sync=st.booleans(),
    kind=st.sampled_from(["bilinear", "triangle", "gauss"]),
    path=st.text(alphabet="abcxyz/_.-0123", max_size=20),
)
def test_roundtrip_property(lr, epochs, sync, kind, path):
    cfg = RunConfig()
    cfg.optim.lr = lr
    cfg.optim.epochs = epochs
    cfg.model.sync_positions = sync
    cfg.model.kind = kind
    cfg.data.csv_path = path
    back = RunConfig.from_ini(cfg.to_ini())
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_overrides_and_types():
    cfg = RunConfig().apply_overrides(["optim.lr=0.5", "model.sync_positions=yes", "data.n = 12"])
    assert cfg.optim.lr == 0.5 and cfg.model.sync_positions is True and cfg.data.n == 12
    for bad in ["optim.lr", "optim.nope=1", "nosection.lr=1", "data.n=abc", "model.sync_positions=maybe", "lr=1"]:
        with pytest.raises(ConfigError):
            RunConfig().apply_overrides([bad])


def test_unknown_keys_rejected_from_file():
    with pytest.raises(ConfigError):
        RunConfig.from_ini("[model]\nfoo = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.from_ini("[extra]\nfoo = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.from_ini("not ini at all")


def test_digest_ignores_output_location():
    a, b = RunConfig(), RunConfig()
    b.run.out = "elsewhere"
    assert a.digest() == b.digest()
    b.run.seed = 4
    assert a.digest() != b.digest()


def test_copy_is_deep():
    a = RunConfig()
    b = a.copy()
    b.model.kind = "bilinear"
    assert a.model.kind == "gauss"


def test_list_parsers():
    assert parse_int_list("0, 1,2,") == [0, 1, 2]
    assert parse_str_list(" gauss , bilinear") == ["gauss", "bilinear"]


def test_t_statistic():
    assert pooled_t_statistic([1, 2, 3], [2, 3, 4]) == pytest.approx(-1.2247, abs=1e-4)
    assert pooled_t_statistic([1, 2, 3], [2, 3, 4]) == pytest.approx(-math.sqrt(1.5), rel=1e-12)
    assert pooled_t_statistic([0.5, 0.7], [0.5, 0.7]) == 0.0
    assert pooled_t_statistic([1.0, 1.0], [1.0, 1.0]) == 0.0
    assert math.isnan(pooled_t_statistic([1.0], [1.0, 2.0]))
    assert pooled_t_statistic([2.0, 2.0], [1.0, 1.0]) == math.inf
