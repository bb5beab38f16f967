import logging
import math

import numpy as np
import pytest

from lora2.adapter import FrozenLinear, delta_weight, init_adapter
from lora2.checkpoint import (
    CheckpointError,
    MagicMismatch,
    ShapeMismatch,
    TruncatedCheckpoint,
    VersionMismatch,
    checkpoint_size,
    decode,
    load_checkpoint,
    quantize_payload,
    save_checkpoint,
)
from lora2.checks import random_layer
from lora2.rank import nu_target
from lora2.toy import build_toy_net


def q_layer(seed=0):
    rng = np.random.default_rng(seed)
    layer = init_adapter(FrozenLinear(rng.normal(size=(8, 8)), "q", "self_attn_q"), 2,
                         seed=seed, r_max=8)
    layer.b.value[:, :2] = rng.normal(size=(8, 2))
    return layer


def test_worked_example_is_165_bytes(tmp_path):
    path = tmp_path / "q.alr2"
    assert save_checkpoint([q_layer()], path) == 165 == path.stat().st_size
    raw = path.read_bytes()
    assert raw[:4] == b"ALR2"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 1
    assert int.from_bytes(raw[12:16], "little") == 1 and raw[16:17] == b"q"
    assert [int.from_bytes(raw[17 + 4 * i: 21 + 4 * i], "little") for i in range(3)] == [8, 8, 2]
    assert np.frombuffer(raw[29:37], "<f8")[0] == nu_target(0.9, 2)


def test_empty_model_is_12_bytes(tmp_path):
    assert save_checkpoint([], tmp_path / "e.alr2") == 12
    assert decode((tmp_path / "e.alr2").read_bytes()) == []


def test_size_formula_over_random_models(tmp_path):
    rng = np.random.default_rng(9)
    for i in range(200):
        layers = [random_layer(rng) for _ in range(int(rng.integers(0, 5)))]
        for k, l in enumerate(layers):
            l.base.name = "x" * int(rng.integers(1, 12)) + str(k)
        expected = 12 + sum(24 + len(l.name) + 4 * l.d * (l.base.m + l.base.n) for l in layers)
        path = tmp_path / f"{i}.alr2"
        assert save_checkpoint(layers, path) == expected == checkpoint_size(layers)
        assert path.stat().st_size == expected


def test_round_trip_forward_is_bitwise_at_payload_precision(tmp_path):
    src = build_toy_net(seed=1, r_init=5, r_max=16)
    rng = np.random.default_rng(0)
    for l in src.layers:
        l.b.value[:, : l.d] = rng.normal(size=(l.base.m, l.d))
        l.rank.set_nu(nu_target(0.9, l.d) * 0.97)
    quantize_payload(src)
    save_checkpoint(src, tmp_path / "a.alr2")
    dst = load_checkpoint(tmp_path / "a.alr2", build_toy_net(seed=1, r_init=1, r_max=16))
    x = rng.normal(size=(4, 128))
    c = rng.normal(size=(4, 4, 32))
    assert np.array_equal(src.predict(x, c), dst.predict(x, c))
    assert [l.d for l in dst.layers] == [l.d for l in src.layers]


def test_save_load_save_is_byte_identical(tmp_path):
    src = build_toy_net(seed=2, r_init=3, r_max=8)
    for l in src.layers:
        l.rank.set_nu(0.1234567891234)
        l.rank.d = 3
    save_checkpoint(src, tmp_path / "a.alr2")
    dst = load_checkpoint(tmp_path / "a.alr2", build_toy_net(seed=2, r_init=1, r_max=8))
    save_checkpoint(dst, tmp_path / "b.alr2")
    assert (tmp_path / "a.alr2").read_bytes() == (tmp_path / "b.alr2").read_bytes()


def test_distinct_errors(tmp_path):
    path = tmp_path / "q.alr2"
    save_checkpoint([q_layer()], path)
    raw = path.read_bytes()

    (tmp_path / "magic").write_bytes(b"XLR2" + raw[4:])
    with pytest.raises(MagicMismatch):
        load_checkpoint(tmp_path / "magic", [q_layer()])

    (tmp_path / "ver").write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "ver", [q_layer()])

    (tmp_path / "cut").write_bytes(raw[:-5])
    with pytest.raises(TruncatedCheckpoint):
        load_checkpoint(tmp_path / "cut", [q_layer()])

    other = init_adapter(FrozenLinear(np.zeros((8, 6)), "q", "self_attn_q"), 2, seed=0, r_max=8)
    with pytest.raises(ShapeMismatch):
        load_checkpoint(path, [other])

    renamed = q_layer()
    renamed.base.name = "k"
    with pytest.raises(ShapeMismatch):
        load_checkpoint(path, [renamed])

    (tmp_path / "tail").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "tail", [q_layer()])

    assert len({MagicMismatch, VersionMismatch, TruncatedCheckpoint, ShapeMismatch}) == 4


def test_refuses_non_finite(tmp_path):
    layer = q_layer()
    layer.b.value[0, 0] = math.nan
    with pytest.raises(CheckpointError):
        save_checkpoint([layer], tmp_path / "bad.alr2")
    assert not (tmp_path / "bad.alr2").exists()


def test_stored_rank_wins_with_warning(tmp_path, caplog):
    layer = q_layer()
    layer.rank.set_nu(nu_target(0.9, 5))  # implies 5, stored d stays 2
    save_checkpoint([layer], tmp_path / "q.alr2")
    target = q_layer(seed=1)
    with caplog.at_level(logging.WARNING, logger="lora2.checkpoint"):
        load_checkpoint(tmp_path / "q.alr2", [target])
    assert target.d == 2
    assert "stored rank 2" in caplog.text


def test_loaded_lambda_is_recomputed_from_nu(tmp_path):
    layer = q_layer()
    save_checkpoint([layer], tmp_path / "q.alr2")
    target = load_checkpoint(tmp_path / "q.alr2", [q_layer(seed=3)])[0]
    assert target.rank.nu == layer.rank.nu
    expected = delta_weight(layer).value
    assert np.allclose(delta_weight(target).value, expected, rtol=0, atol=1e-5)
