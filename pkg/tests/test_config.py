import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edpn.config import RunConfig, load_config, parse_config, parse_entries, to_text
from edpn.errors import ConfigError


def test_empty_is_defaults():
    cfg = parse_config("")
    assert cfg.task == "BISR" and cfg.model.K == 4 and cfg.model.scale == 4
    assert cfg.train.patch == 64 and cfg.train.lr0 == 1e-4
    assert cfg.degrade.task == "BISR" and cfg.degrade.scale == 4


def test_values_and_comments():
    text = """
    # experiment
    task = BISR
    model.K = 4          # five replicas
    model.use_psa = false
    train.lambda = 0.0
    degrade.sigma = 1.0, 2.0
    degrade.kind = mixed
    ensemble.self_ensemble = yes
    paths.out = runs/a
    """
    cfg = parse_config(text)
    assert cfg.model.K == 4 and cfg.model.use_psa is False
    assert cfg.train.lam == 0.0 and cfg.train.loss_weights.lam == 0.0
    assert cfg.degrade.sigma == (1.0, 2.0) and cfg.degrade.kind == "mixed"
    assert cfg.ensemble.self_ensemble is True and cfg.paths.out == "runs/a"


def test_later_keys_and_overrides_win():
    cfg = parse_config("model.K = 2\nmodel.K = 3\n", ["model.K=1"])
    assert cfg.model.K == 1


def test_bid_derivations():
    cfg = parse_config("task = BID")
    assert cfg.model.scale == 1 and cfg.model.task == "BID"
    assert cfg.degrade.task == "BID" and cfg.train.patch == 160
    assert parse_config("task = BID\ntrain.patch = 64").train.patch == 64


@pytest.mark.parametrize(
    "text,key,line",
    [
        ("model.K = 4\nmodel.bogus = 1", "model.bogus", 2),
        ("task = BID\nmodel.scale = 4", "model.scale", 2),
        ("\n\nmodel.K = four", "model.K", 3),
        ("train.patch = 30", "train.patch", 1),
        ("model.M = 4\ntrain.patch = 36", "train.patch", 2),
        ("task = XYZ", "task", 1),
        ("train.decay_factor = 1.5", "train.decay_factor", 1),
        ("ensemble.model_paths = a, b\nensemble.model_weights = 0.3, 0.3", "ensemble.model_weights", 2),
        ("model.use_ppt = maybe", "model.use_ppt", 1),
        ("infer.tile = 8\ninfer.overlap = 16", "infer.tile", 1),
    ],
)
def test_errors_name_key_and_line(text, key, line):
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    assert e.value.key == key
    assert e.value.line == line
    assert f"'{key}'" in str(e.value) and f"line {line}" in str(e.value)


def test_malformed_lines():
    with pytest.raises(ConfigError) as e:
        parse_entries("model.K 4")
    assert e.value.line == 1
    with pytest.raises(ConfigError):
        parse_entries(" = 4")
    with pytest.raises(ConfigError) as e:
        parse_config("", ["model.K"])
    assert "--set" in str(e.value)


def test_roundtrip_defaults_and_custom(tmp_path):
    for cfg in (RunConfig().validate(), parse_config("task = BID\nmodel.N = 2\ndegrade.quality = 10\n"
                                                     "ensemble.model_paths = a.edpn, b.edpn\n"
                                                     "ensemble.model_weights = 0.25, 0.75\ntrain.lr0 = 3e-4")):
        text = to_text(cfg)
        assert parse_config(text) == cfg
        p = tmp_path / "c.cfg"
        p.write_text(text)
        assert load_config(str(p)) == cfg


@given(
    task=st.sampled_from(["BISR", "BID"]),
    K=st.integers(0, 6), N=st.integers(1, 4), M=st.integers(1, 3), L=st.integers(1, 3),
    lr=st.floats(1e-6, 1e-2, allow_nan=False), lam=st.floats(0, 1),
    sigma=st.tuples(st.floats(0.1, 1.0), st.floats(1.0, 3.0)),
    q=st.integers(1, 100), seed=st.integers(0, 10**6), se=st.booleans(),
)
@settings(max_examples=40, deadline=None)
def test_roundtrip_property(task, K, N, M, L, lr, lam, sigma, q, seed, se):
    text = (f"task = {task}\nmodel.K = {K}\nmodel.N = {N}\nmodel.M = {M}\nmodel.L = {L}\n"
            f"train.lr0 = {lr!r}\ntrain.lambda = {lam!r}\ntrain.patch = 32\n"
            f"degrade.sigma = {sigma[0]!r}, {sigma[1]!r}\ndegrade.quality = {q}\n"
            f"degrade.seed = {seed}\nensemble.self_ensemble = {se}\n")
    cfg = parse_config(text)
    assert parse_config(to_text(cfg)) == cfg
