import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcdistill import config as cfg


def test_defaults():
    c = cfg.Config()
    assert c.beta == 1.0 and c.gamma == (1.0, 1.0, 1.0, 1.0)
    assert c.detach_u is True
    assert c.caps == (50.0, 70.0, 80.0)


def test_dump_parses_back_to_the_same_config():
    c = cfg.Config(beta=0.7, gamma3=0.0, detach_u=False, caps=(40.0, 80.0), demo_steps=12)
    assert cfg.loads(c.dumps()) == c
    assert cfg.loads(c.dumps()).dumps() == c.dumps()


@settings(max_examples=50, deadline=None)
@given(
    st.floats(1e-3, 1e3),
    st.lists(st.floats(0.0, 10.0), min_size=4, max_size=4),
    st.booleans(),
    st.lists(st.floats(1.0, 200.0), min_size=1, max_size=4),
)
def test_echo_round_trip(beta, gamma, detach, caps):
    c = cfg.Config(beta, *gamma, detach_u=detach, caps=tuple(caps))
    assert cfg.loads(c.dumps()) == c


def test_comments_blank_lines_and_later_keys_win():
    text = "# weights\n\nbeta = 2.0  # scale\ngamma1=0.5\nbeta = 3.0\n"
    c = cfg.loads(text)
    assert c.beta == 3.0 and c.gamma1 == 0.5 and c.gamma2 == 1.0


@pytest.mark.parametrize(
    "text, match",
    [
        ("alpha = 1", "unknown config key"),
        ("beta 1", "expected key = value"),
        ("beta = abc", "bad value"),
        ("detach_u = maybe", "bad value"),
        ("beta = 0", "beta"),
        ("gamma2 = -1", "gamma2"),
        ("caps = 50, -1", "caps"),
        ("demo_height = 40", "multiples of 32"),
        ("demo_steps = 0", "demo_steps"),
    ],
)
def test_rejections(text, match):
    with pytest.raises(cfg.ConfigError, match=match):
        cfg.loads(text)


def test_load_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("gamma4 = 0\ndemo_seed = 3\n")
    c = cfg.load(path)
    assert c.gamma4 == 0.0 and c.demo_seed == 3


def test_train_config_carries_values():
    c = cfg.Config(beta=0.5, gamma2=0.0, demo_steps=7, demo_kd_scale=3.0)
    t = c.train_config(seed=9)
    assert (t.beta, t.steps, t.seed, t.kd_scale) == (0.5, 7, 9, 3.0)
    assert t.gamma.as_tuple() == (1.0, 0.0, 1.0, 1.0)
