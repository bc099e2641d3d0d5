import struct

import numpy as np
import pytest

from slothlab.multiexit import (
    CostModel, ExitHead, ModelFormatError, MultiExitNetwork, build_convnet, build_mlp,
    compute_cost_fractions, forward_all_exits, iter_exit_logits, load_model, save_model,
)
from slothlab.tensorcore import Conv2d, Dense, Flatten, ReLU, ShapeError, cross_entropy_grad, forward, init_params


def single_exit_net(rng):
    blocks = [[Conv2d(1, 2, 3), ReLU(), Flatten()]]
    net = MultiExitNetwork((1, 5, 5), blocks, [ExitHead(1, [Dense(18, 3)])], 3)
    init_params(net.blocks[0], rng)
    init_params(net.exits[0].layers, rng)
    return net


def test_single_exit_net_is_a_plain_classifier(rng):
    net = single_exit_net(rng)
    x = rng.random((1, 5, 5))
    logits, _ = forward_all_exits(net, x)
    acts, _ = forward(net.blocks[0] + net.exits[0].layers, x)
    assert len(logits) == 1
    np.testing.assert_array_equal(logits[0], acts[-1])
    assert net.cost_fractions == [1.0]


def test_hand_counted_flops(rng):
    net = single_exit_net(rng)
    # conv: 2*3^2*1*2*3*3, dense: 2*18*3
    assert net.cost_model.block_flops == [324]
    assert net.cost_model.head_flops == [108]


def test_cost_fractions_from_block_flops():
    net = build_mlp((4,), num_classes=2, hidden=(3, 3, 3))
    assert compute_cost_fractions(net, CostModel([100, 100, 200], [0, 0, 0])) == [0.25, 0.5, 1.0]


def test_desk_convnet_cost_fractions():
    fr = build_convnet().cost_fractions
    assert len(fr) == 4 and fr[-1] == 1.0
    assert all(0 < a < b for a, b in zip(fr, fr[1:]))
    np.testing.assert_allclose(fr, [0.060, 0.293, 0.528, 1.0], atol=5e-3)


def test_shape_contract(tiny_net, rng):
    logits, _ = forward_all_exits(tiny_net, rng.random((1, 8, 8)))
    assert len(logits) == tiny_net.K == 4
    assert all(z.shape == (4,) for z in logits)


def test_tampering_a_block_only_moves_later_exits(tiny_net, rng):
    x = rng.random((1, 8, 8))
    before, _ = forward_all_exits(tiny_net, x)
    net = tiny_net.copy()
    net.blocks[2][-2].weight = net.blocks[2][-2].weight + 0.5  # conv of block 3
    after, _ = forward_all_exits(net, x)
    for i in range(2):
        np.testing.assert_array_equal(before[i], after[i])
    for i in range(2, 4):
        assert not np.allclose(before[i], after[i])


def test_incremental_exits_match_the_shared_pass(tiny_net, rng):
    x = rng.random((1, 8, 8))
    full, _ = forward_all_exits(tiny_net, x)
    for a, b in zip(full, iter_exit_logits(tiny_net, x)):
        np.testing.assert_allclose(a, b, atol=1e-14)


def test_exit_gradient_matches_finite_differences(tiny_net, rng):
    x = rng.random((1, 8, 8))
    t = np.full(4, 0.25)

    def loss(v):
        zs, _ = forward_all_exits(tiny_net, v)
        return sum(-(t * (z - z.max() - np.log(np.exp(z - z.max()).sum()))).sum() for z in zs[:3])

    zs, tape = forward_all_exits(tiny_net, x, record=True)
    g = tape.backward([cross_entropy_grad(z, t) for z in zs[:3]] + [None]).input
    fd = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += 1e-5
        xm[i] -= 1e-5
        fd[i] = (loss(xp) - loss(xm)) / 2e-5
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-6


def test_invalid_structures_are_rejected():
    with pytest.raises(ValueError):
        MultiExitNetwork((4,), [[Dense(4, 3)], [Dense(3, 3)]], [ExitHead(2, []), ExitHead(1, [])], 3)
    with pytest.raises(ValueError):
        MultiExitNetwork((4,), [[Dense(4, 3)], [Dense(3, 3)]], [ExitHead(1, [])], 3)
    with pytest.raises(ShapeError):
        MultiExitNetwork((4,), [[Dense(4, 3)]], [ExitHead(1, [Dense(3, 5)])], 3)


def test_wrong_input_shape(tiny_net):
    with pytest.raises(ShapeError):
        forward_all_exits(tiny_net, np.zeros((1, 9, 9)))


# MXNN round trip -----------------------------------------------------------

def test_round_trip(tiny_net, tmp_path, rng):
    path = tmp_path / "m.mxnn"
    save_model(tiny_net, path)
    back = load_model(path)
    assert back == tiny_net
    x = rng.random((5, 1, 8, 8))
    a, _ = forward_all_exits(tiny_net, x, batched=True)
    b, _ = forward_all_exits(back, x, batched=True)
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_bad_magic(tiny_net, tmp_path):
    path = tmp_path / "m.mxnn"
    save_model(tiny_net, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(ModelFormatError, match="bad magic"):
        load_model(path)


def test_future_version(tiny_net, tmp_path):
    path = tmp_path / "m.mxnn"
    save_model(tiny_net, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(ModelFormatError, match="version"):
        load_model(path)


def test_truncated_and_corrupted(tiny_net, tmp_path):
    path = tmp_path / "m.mxnn"
    save_model(tiny_net, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(ModelFormatError, match="truncated"):
        load_model(path)
    flipped = bytearray(blob)
    flipped[-20] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(ModelFormatError, match="checksum"):
        load_model(path)
