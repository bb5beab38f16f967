import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lora2.config import ConfigError, TrainConfig, dump, load, parse, serialize


def test_defaults_follow_protocol():
    c = TrainConfig()
    assert (c.q, c.r_max, c.lambda_r, c.lambda_e, c.lambda_w) == (0.9, 512, 1e-4, 1e-4, 0.0)
    assert (c.learning_rate, c.steps, c.batch_size, c.rank_refresh_interval) == (5e-5, 500, 1, 1)
    assert c.mode == "adaptive" and c.nu_lr == c.learning_rate


def test_round_trip_file(tmp_path):
    c = TrainConfig(mode="fixed_rank(16)", nu_learning_rate=0.05, planted_ranks=(1, 2, 3, 4, 5, 6, 7, 8, 9))
    dump(c, tmp_path / "c.cfg")
    assert load(tmp_path / "c.cfg") == c
    assert c.fixed_rank == 16 and c.is_fixed


@settings(max_examples=100, deadline=None)
@given(
    st.floats(1e-6, 1.0),
    st.floats(0.0, 10.0),
    st.integers(0, 10_000),
    st.sampled_from(["adaptive", "fixed_rank(8)", "fixed_rank(512)"]),
    st.one_of(st.none(), st.floats(1e-6, 1.0)),
    st.booleans(),
)
def test_parse_inverts_serialize(lr, lam, steps, mode, nu_lr, grow):
    c = TrainConfig(learning_rate=lr, lambda_r=lam, steps=steps, mode=mode,
                    nu_learning_rate=nu_lr, grow_b_random=grow)
    assert parse(serialize(c)) == c


def test_comments_and_partial_files():
    c = parse("# toy\nsteps = 10\n\nlambda_r=0.5\n")
    assert c.steps == 10 and c.lambda_r == 0.5 and c.q == 0.9


@pytest.mark.parametrize(
    "text",
    [
        "bogus=1\n",
        "steps=1\nsteps=2\n",
        "steps\n",
        "steps=ten\n",
        "q=1.5\n",
        "mode=sometimes\n",
        "r_init=600\n",
        "lambda_e=-1\n",
        "rank_refresh_interval=0\n",
        "grow_b_random=maybe\n",
    ],
)
def test_invalid_files_raise(text):
    with pytest.raises(ConfigError):
        parse(text)
