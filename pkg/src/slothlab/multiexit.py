"""Multi-exit network container, FLOP accounting and the MXNN model file."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorcore import (
    Conv2d, Dense, Flatten, Layer, MaxPool2d, ReLU, ShapeError, TapeConsumedError,
    as_tensor, chain_shapes, check_finite, init_params, layer_from_spec,
)

MODEL_MAGIC = b"MXNN"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass
class ExitHead:
    attach: int  # 1-based index of the block whose output feeds this head
    layers: list[Layer]


@dataclass
class CostModel:
    block_flops: list[int]
    head_flops: list[int]

    def __post_init__(self):
        if any(int(f) <= 0 for f in self.block_flops):
            raise ValueError("block FLOP counts must be positive")
        if any(int(f) < 0 for f in self.head_flops):
            raise ValueError("head FLOP counts must be non-negative")


class MultiExitNetwork:
    """Ordered blocks with K exit heads; exit K is the original classifier."""

    def __init__(self, input_shape, blocks, exits, num_classes: int, metadata: dict | None = None):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.blocks: list[list[Layer]] = [list(b) for b in blocks]
        self.exits: list[ExitHead] = list(exits)
        self.num_classes = int(num_classes)
        self.metadata = dict(metadata or {})
        self._validate()
        self.cost_model = flop_cost_model(self)
        self.cost_fractions = compute_cost_fractions(self, self.cost_model)

    @property
    def K(self) -> int:
        return len(self.exits)

    def _validate(self) -> None:
        if not self.blocks or not self.exits:
            raise ValueError("network needs at least one block and one exit")
        attach = [e.attach for e in self.exits]
        if any(b <= a for a, b in zip(attach, attach[1:])):
            raise ValueError(f"exit attach points must be strictly increasing, got {attach}")
        if attach[0] < 1 or attach[-1] != len(self.blocks):
            raise ValueError("last exit must attach after the last block")
        shape = self.input_shape
        self.block_shapes = []
        for block in self.blocks:
            shape = chain_shapes(block, shape)[-1]
            self.block_shapes.append(shape)
        for i, head in enumerate(self.exits):
            out = chain_shapes(head.layers, self.block_shapes[head.attach - 1])[-1]
            if out != (self.num_classes,):
                raise ShapeError(f"exit {i + 1} outputs {out}, expected ({self.num_classes},)")

    def parameters(self):
        """Yield (layer, param_name) for every trainable array, trunk first."""
        for block in self.blocks:
            for layer in block:
                for name in layer.param_names:
                    yield layer, name
        for head in self.exits:
            for layer in head.layers:
                for name in layer.param_names:
                    yield layer, name

    def trunk_parameters(self):
        for block in self.blocks:
            for layer in block:
                for name in layer.param_names:
                    yield layer, name

    def head_parameters(self, exits=None):
        for i, head in enumerate(self.exits):
            if exits is not None and i not in exits:
                continue
            for layer in head.layers:
                for name in layer.param_names:
                    yield layer, name

    def flat_params(self) -> np.ndarray:
        return np.concatenate([getattr(l, n).ravel() for l, n in self.parameters()])

    def descriptor(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "blocks": [[l.spec() for l in b] for b in self.blocks],
            "exits": [{"attach": e.attach, "layers": [l.spec() for l in e.layers]} for e in self.exits],
            "metadata": self.metadata,
        }

    def copy(self) -> "MultiExitNetwork":
        net = network_from_descriptor(self.descriptor())
        for (dst, name), (src, _) in zip(net.parameters(), self.parameters()):
            setattr(dst, name, getattr(src, name).copy())
        return net

    def __eq__(self, other):
        if not isinstance(other, MultiExitNetwork):
            return NotImplemented
        return self.descriptor() == other.descriptor() and all(
            np.array_equal(getattr(a, n), getattr(b, n))
            for (a, n), (b, _) in zip(self.parameters(), other.parameters())
        )


def network_from_descriptor(desc: dict) -> MultiExitNetwork:
    blocks = [[layer_from_spec(s) for s in b] for b in desc["blocks"]]
    exits = [ExitHead(int(e["attach"]), [layer_from_spec(s) for s in e["layers"]]) for e in desc["exits"]]
    return MultiExitNetwork(desc["input_shape"], blocks, exits, desc["num_classes"], desc.get("metadata"))


# --------------------------------------------------------------------------
# forward with all exits


@dataclass
class NetGradients:
    input: np.ndarray
    blocks: list[list[dict]]
    exits: list[list[dict]]

    def iter_params(self):
        """Gradients in the same order as MultiExitNetwork.parameters()."""
        for group in (self.blocks, self.exits):
            for layer_grads in group:
                for g in layer_grads:
                    yield from g.values()


@dataclass
class MultiExitTape:
    net: MultiExitNetwork
    block_caches: list
    head_caches: list
    batched: bool
    n: int = 1
    consumed: bool = field(default=False)

    def backward(self, exit_seeds) -> NetGradients:
        """Backpropagate dLoss/dlogits for each exit (None for unused exits)."""
        if self.consumed:
            raise TapeConsumedError("gradient tape already consumed")
        self.consumed = True
        net = self.net
        if len(exit_seeds) != net.K:
            raise ValueError(f"need {net.K} exit seeds, got {len(exit_seeds)}")
        head_grads: list[list[dict]] = []
        into_block: dict[int, np.ndarray] = {}
        for i, head in enumerate(net.exits):
            seed = exit_seeds[i]
            layer_grads = []
            if seed is None:
                head_grads.append([{n: np.zeros_like(getattr(l, n)) for n in l.param_names} for l in head.layers])
                continue
            g = np.asarray(seed, dtype=np.float64)
            if not self.batched:
                g = g[None]
            for layer, cache in zip(reversed(head.layers), reversed(self.head_caches[i])):
                g, pg = layer.backward(cache, g)
                layer_grads.append(pg)
            head_grads.append(layer_grads[::-1])
            j = head.attach - 1
            into_block[j] = into_block[j] + g if j in into_block else g
        block_grads: list[list[dict]] = [None] * len(net.blocks)
        g = None
        for j in range(len(net.blocks) - 1, -1, -1):
            if j in into_block:
                g = into_block[j] if g is None else g + into_block[j]
            block = net.blocks[j]
            if g is None:
                block_grads[j] = [{n: np.zeros_like(getattr(l, n)) for n in l.param_names} for l in block]
                continue
            layer_grads = []
            for layer, cache in zip(reversed(block), reversed(self.block_caches[j])):
                g, pg = layer.backward(cache, g)
                layer_grads.append(pg)
            block_grads[j] = layer_grads[::-1]
        if g is None:
            shape = (self.n,) + net.input_shape if self.batched else net.input_shape
            g_in = np.zeros(shape)
        else:
            g_in = g if self.batched else g[0]
        check_finite(g_in, "input gradient")
        return NetGradients(g_in, block_grads, head_grads)


def forward_all_exits(net: MultiExitNetwork, x, record: bool = False, batched: bool = False,
                      upto: int | None = None):
    """Logits of every exit from one shared trunk pass.

    ``upto`` (1-based) stops after exit ``upto``; later exits are omitted.
    """
    x = as_tensor(x)
    sample_shape = x.shape[1:] if batched else x.shape
    if tuple(sample_shape) != net.input_shape:
        raise ShapeError(f"input shape {tuple(sample_shape)} != {net.input_shape}")
    h = x if batched else x[None]
    n_exits = net.K if upto is None else upto
    last_block = net.exits[n_exits - 1].attach
    block_caches, head_caches, logits = [], [], []
    exit_iter = 0
    for j in range(last_block):
        caches = []
        for layer in net.blocks[j]:
            h, c = layer.forward(h)
            caches.append(c if record else None)
        check_finite(h, f"block {j + 1} output")
        block_caches.append(caches)
        while exit_iter < n_exits and net.exits[exit_iter].attach == j + 1:
            z = h
            hc = []
            for layer in net.exits[exit_iter].layers:
                z, c = layer.forward(z)
                hc.append(c if record else None)
            check_finite(z, f"exit {exit_iter + 1} logits")
            head_caches.append(hc)
            logits.append(z if batched else z[0])
            exit_iter += 1
    tape = None
    if record:
        if upto is not None and upto != net.K:
            raise ValueError("gradients require all exits to be computed")
        tape = MultiExitTape(net, block_caches, head_caches, batched, x.shape[0] if batched else 1)
    return logits, tape


def iter_exit_logits(net: MultiExitNetwork, x):
    """Yield each exit's logits for one sample, running trunk blocks only as needed."""
    x = as_tensor(x)
    if tuple(x.shape) != net.input_shape:
        raise ShapeError(f"input shape {tuple(x.shape)} != {net.input_shape}")
    h = x[None]
    done = 0
    for head in net.exits:
        while done < head.attach:
            for layer in net.blocks[done]:
                h, _ = layer.forward(h)
            check_finite(h, f"block {done + 1} output")
            done += 1
        z = h
        for layer in head.layers:
            z, _ = layer.forward(z)
        yield check_finite(z, "exit logits")[0]


# --------------------------------------------------------------------------
# cost accounting


def layers_flops(layers, in_shape) -> int:
    shapes = chain_shapes(layers, in_shape)
    return sum(layer.flops(s) for layer, s in zip(layers, shapes))


def flop_cost_model(net: MultiExitNetwork) -> CostModel:
    block_in = [net.input_shape] + net.block_shapes[:-1]
    block_flops = [layers_flops(b, s) for b, s in zip(net.blocks, block_in)]
    head_flops = [layers_flops(e.layers, net.block_shapes[e.attach - 1]) for e in net.exits]
    return CostModel(block_flops, head_flops)


def compute_cost_fractions(net: MultiExitNetwork, cost_model: CostModel) -> list[float]:
    """Cumulative trunk+head FLOPs at each exit as a fraction of the full model."""
    if len(cost_model.block_flops) != len(net.blocks) or len(cost_model.head_flops) != net.K:
        raise ValueError("cost model must cover every block and every exit head")
    total = sum(cost_model.block_flops) + cost_model.head_flops[-1]
    fracs = []
    for i, head in enumerate(net.exits):
        spent = sum(cost_model.block_flops[:head.attach]) + cost_model.head_flops[i]
        fracs.append(spent / total)
    fracs[-1] = 1.0
    if any(b <= a for a, b in zip(fracs, fracs[1:])):
        raise ValueError(f"cost fractions not strictly increasing: {fracs}")
    return fracs


# --------------------------------------------------------------------------
# builders


def pooled_head(in_shape, num_classes: int, max_side: int = 4) -> list[Layer]:
    """Max-pool the block activation down to at most max_side x max_side, then one dense layer."""
    layers: list[Layer] = []
    if len(in_shape) == 3:
        side = in_shape[1]
        if side > max_side:
            layers.append(MaxPool2d(side // max_side))
        layers.append(Flatten())
    shape = chain_shapes(layers, in_shape)[-1]
    layers.append(Dense(shape[0], num_classes))
    return layers


def build_convnet(input_shape=(1, 16, 16), num_classes: int = 8, widths=(8, 16, 32),
                  hidden: int = 64, seed: int = 0) -> MultiExitNetwork:
    """VGG-style trunk with one exit per conv block plus the final classifier."""
    c, h, w = input_shape
    blocks: list[list[Layer]] = []
    exits: list[ExitHead] = []
    in_ch, side = c, h
    for i, width in enumerate(widths):
        block: list[Layer] = []
        if i > 0:
            block.append(MaxPool2d(2))
            side //= 2
        block += [Conv2d(in_ch, width, 3, padding=1), ReLU()]
        blocks.append(block)
        exits.append(ExitHead(i + 1, pooled_head((width, side, side), num_classes)))
        in_ch = width
    last = [Conv2d(in_ch, in_ch, 3, padding=1), ReLU(), MaxPool2d(2), Flatten()]
    side //= 2
    blocks.append(last + [Dense(in_ch * side * side, hidden), ReLU()])
    exits.append(ExitHead(len(blocks), [Dense(hidden, num_classes)]))
    net = MultiExitNetwork(input_shape, blocks, exits, num_classes,
                           {"arch": "convnet", "widths": list(widths), "hidden": hidden})
    rng = np.random.default_rng(seed)
    for block in net.blocks:
        init_params(block, rng)
    for head in net.exits:
        init_params(head.layers, rng)
    return net


def build_mlp(input_shape=(1, 16, 16), num_classes: int = 8, hidden=(128, 96, 64),
              seed: int = 0) -> MultiExitNetwork:
    """Fully connected multi-exit model: one exit per hidden layer plus the final one."""
    d = int(np.prod(input_shape))
    blocks: list[list[Layer]] = []
    exits: list[ExitHead] = []
    prev = d
    for i, width in enumerate(hidden):
        block: list[Layer] = [Flatten()] if i == 0 and len(input_shape) > 1 else []
        block += [Dense(prev, width), ReLU()]
        blocks.append(block)
        exits.append(ExitHead(i + 1, [Dense(width, num_classes)]))
        prev = width
    net = MultiExitNetwork(input_shape, blocks, exits, num_classes,
                           {"arch": "mlp", "hidden": list(hidden)})
    rng = np.random.default_rng(seed)
    for block in net.blocks:
        init_params(block, rng)
    for head in net.exits:
        init_params(head.layers, rng)
    return net


# --------------------------------------------------------------------------
# MXNN file format


def save_model(net: MultiExitNetwork, path) -> None:
    desc = json.dumps(net.descriptor(), sort_keys=True).encode("utf-8")
    payload = net.flat_params().astype("<f8").tobytes()
    blob = (MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(desc)) + desc
            + payload + struct.pack("<I", zlib.crc32(payload)))
    Path(path).write_bytes(blob)


def load_model(path) -> MultiExitNetwork:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MODEL_MAGIC:
        raise ModelFormatError("bad magic")
    version, dlen = struct.unpack_from("<II", blob, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    if len(blob) < 12 + dlen:
        raise ModelFormatError("truncated file")
    try:
        desc = json.loads(blob[12:12 + dlen].decode("utf-8"))
        net = network_from_descriptor(desc)
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise ModelFormatError(f"corrupt architecture descriptor: {exc}") from exc
    sizes = [getattr(l, n).size for l, n in net.parameters()]
    plen = 8 * sum(sizes)
    start = 12 + dlen
    if len(blob) != start + plen + 4:
        raise ModelFormatError("truncated file")
    payload = blob[start:start + plen]
    (crc,) = struct.unpack_from("<I", blob, start + plen)
    if zlib.crc32(payload) != crc:
        raise ModelFormatError("checksum failure")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    offset = 0
    for (layer, name), size in zip(net.parameters(), sizes):
        shape = getattr(layer, name).shape
        setattr(layer, name, flat[offset:offset + size].reshape(shape).copy())
        offset += size
    return net
