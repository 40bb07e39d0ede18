"""VGG-family architecture genomes and their instantiation into models.

A genome is addressed by *gene slots*, which is what crossover and mutation
``layer_id`` values index::

    0           head fully-connected gene (hidden width, 0 = direct linear)
    1           head activation gene (inert while the head has no hidden layer)
    2 + 2*i     conv block i
    3 + 2*i     activation of block i

Head slots come first so a slot index means the same gene in genomes of
different depth.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .tensor import (
    ACTIVATIONS, Activation, Conv2d, Flatten, FullyConnected, InputConcat, MaxPool2d, Model, make_activation,
)

CHANNEL_BOUNDS = (4, 512)
CONV_BOUNDS = (1, 4)
BLOCK_BOUNDS = (1, 6)
HIDDEN_BOUNDS = (4, 512)
LR_BOUNDS = (0.0, 1.0)  # open below
WD_BOUNDS = (0.0, 0.1)
INPUT_CHANNELS = 4

HEAD_FC, HEAD_ACT = 0, 1


class GenomeError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


_ids = itertools.count(1)


def fresh_id() -> int:
    """Process-wide id counter. Runs that need reproducible ids pass their own allocator."""
    return next(_ids)


class IdAllocator:
    """Deterministic, monotonically increasing genome ids for one run."""

    def __init__(self, start: int = 1):
        self._it = itertools.count(start)

    def __call__(self) -> int:
        return next(self._it)


@dataclass(frozen=True)
class BlockGene:
    out_channels: int
    num_convs: int = 2
    activation: str = "relu"
    followed_by_pool: bool = True


@dataclass(frozen=True)
class HeadGene:
    hidden: int = 0
    activation: str = "relu"


@dataclass(frozen=True)
class Genome:
    blocks: tuple
    head: HeadGene = HeadGene()
    lr: float = 0.01
    weight_decay: float = 0.0
    multiresolution: bool = False
    id: int = 0
    parent_ids: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "parent_ids", tuple(self.parent_ids))

    @property
    def n_slots(self) -> int:
        return 2 + 2 * len(self.blocks)

    def structure(self) -> tuple:
        """Everything heritable: the genome minus its identity and lineage."""
        return (self.blocks, self.head, self.lr, self.weight_decay, self.multiresolution)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "parent_ids": list(self.parent_ids),
            "blocks": [asdict(b) for b in self.blocks],
            "head": asdict(self.head),
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "multiresolution": self.multiresolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Genome":
        return cls(
            blocks=tuple(BlockGene(**b) for b in d["blocks"]),
            head=HeadGene(**d.get("head", {})),
            lr=float(d["lr"]),
            weight_decay=float(d["weight_decay"]),
            multiresolution=bool(d.get("multiresolution", False)),
            id=int(d.get("id", 0)),
            parent_ids=tuple(d.get("parent_ids", ())),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Genome":
        return cls.from_dict(json.loads(text))


def slot_kind(genome: Genome, layer_id: int) -> str:
    """``"fc"``, ``"activation"`` or ``"conv"`` for a slot index."""
    if not 0 <= layer_id < genome.n_slots:
        raise IndexError(f"layer_id {layer_id} outside [0, {genome.n_slots})")
    if layer_id == HEAD_FC:
        return "fc"
    if layer_id == HEAD_ACT:
        return "activation"
    return "conv" if layer_id % 2 == 0 else "activation"


def block_index(layer_id: int) -> int:
    return (layer_id - 2) // 2


@dataclass(frozen=True)
class SearchSpaceConfig:
    """Bounds for random genomes and mutation. Defaults are desk-scale."""

    n_blocks: tuple = (1, 3)
    channels: tuple = (4, 16)
    num_convs: tuple = (1, 2)
    activations: tuple = ACTIVATIONS
    pool_prob: float = 1.0
    hidden: tuple = (0, 16)  # 0 allowed, otherwise drawn from [max(4, lo), hi]
    hidden_prob: float = 0.3
    lr: tuple = (1e-3, 1e-1)  # log-uniform
    weight_decay: tuple = (0.0, 1e-3)
    multires_prob: float = 0.25

    def __post_init__(self):
        for name in ("n_blocks", "channels", "num_convs", "lr", "weight_decay", "hidden"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"search space {name}: lower bound {lo} > upper bound {hi}")
        if not self.activations or any(a not in ACTIVATIONS for a in self.activations):
            raise ValueError(f"activations must be a non-empty subset of {ACTIVATIONS}")
        if self.lr[0] <= 0:
            raise ValueError("learning-rate lower bound must be positive")


def _log_uniform(rng, lo, hi):
    if lo == hi:
        return float(lo)
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _uniform_or_fixed(rng, lo, hi):
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _bernoulli(rng, p):
    if p <= 0.0:
        return False
    if p >= 1.0:
        return True
    return bool(rng.random() < p)


def random_block(space: SearchSpaceConfig, rng) -> BlockGene:
    return BlockGene(
        out_channels=int(rng.integers(space.channels[0], space.channels[1] + 1)),
        num_convs=int(rng.integers(space.num_convs[0], space.num_convs[1] + 1)),
        activation=str(space.activations[rng.integers(len(space.activations))]),
        followed_by_pool=_bernoulli(rng, space.pool_prob),
    )


def _random_hidden(space, rng):
    lo, hi = space.hidden
    if hi < HIDDEN_BOUNDS[0] or not _bernoulli(rng, space.hidden_prob):
        return 0
    return int(rng.integers(max(lo, HIDDEN_BOUNDS[0]), hi + 1))


def random_genome(space: SearchSpaceConfig, rng, genome_id: int | None = None,
                  input_shape=None) -> Genome:
    """Sample a genome uniformly within ``space``.

    With ``input_shape`` given, draws are repeated until the genome fits the
    input (a deep all-pooling genome can collapse a small tile).
    """
    rng = np.random.default_rng(rng)
    gid = fresh_id() if genome_id is None else genome_id
    for _ in range(100):
        n = int(rng.integers(space.n_blocks[0], space.n_blocks[1] + 1))
        g = Genome(
            blocks=tuple(random_block(space, rng) for _ in range(n)),
            head=HeadGene(_random_hidden(space, rng), str(space.activations[rng.integers(len(space.activations))])),
            lr=_log_uniform(rng, *space.lr),
            weight_decay=_uniform_or_fixed(rng, *space.weight_decay),
            multiresolution=_bernoulli(rng, space.multires_prob),
            id=gid,
        )
        if input_shape is None or not validate(g, input_shape):
            return g
    raise GenomeError([f"search space produced no genome valid for input {input_shape} in 100 draws"])


# ---------------------------------------------------------------------------
# validation and instantiation


def _feature_shapes(genome: Genome, input_shape):
    """Spatial size after each block, or the index of the block that collapses."""
    c, h, w = input_shape
    sizes = []
    for i, b in enumerate(genome.blocks):
        if b.followed_by_pool:
            h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
            if h < 1 or w < 1:
                return sizes, i
        sizes.append((h, w))
    return sizes, None


def validate(genome: Genome, input_shape=(4, 32, 32)) -> list[str]:
    """All invariant violations of ``genome`` for ``input_shape`` (empty list = valid)."""
    v = []
    if not BLOCK_BOUNDS[0] <= len(genome.blocks) <= BLOCK_BOUNDS[1]:
        v.append(f"number of blocks {len(genome.blocks)} outside {list(BLOCK_BOUNDS)}")
    for i, b in enumerate(genome.blocks):
        if not CHANNEL_BOUNDS[0] <= b.out_channels <= CHANNEL_BOUNDS[1]:
            v.append(f"block {i}: out_channels {b.out_channels} outside {list(CHANNEL_BOUNDS)}")
        if not CONV_BOUNDS[0] <= b.num_convs <= CONV_BOUNDS[1]:
            v.append(f"block {i}: num_convs {b.num_convs} outside {list(CONV_BOUNDS)}")
        if b.activation not in ACTIVATIONS:
            v.append(f"block {i}: unknown activation {b.activation!r}")
    hid = genome.head.hidden
    if hid != 0 and not HIDDEN_BOUNDS[0] <= hid <= HIDDEN_BOUNDS[1]:
        v.append(f"head: hidden units {hid} outside {list(HIDDEN_BOUNDS)} (or 0)")
    if genome.head.activation not in ACTIVATIONS:
        v.append(f"head: unknown activation {genome.head.activation!r}")
    if not (LR_BOUNDS[0] < genome.lr <= LR_BOUNDS[1]) or not math.isfinite(genome.lr):
        v.append("learning_rate out of range")
    if not (WD_BOUNDS[0] <= genome.weight_decay <= WD_BOUNDS[1]):
        v.append("weight_decay out of range")
    if len(input_shape) != 3 or input_shape[0] != INPUT_CHANNELS:
        v.append(f"input shape {tuple(input_shape)} is not {INPUT_CHANNELS}xHxW")
    elif genome.blocks:
        _, collapsed = _feature_shapes(genome, input_shape)
        if collapsed is not None:
            v.append(f"block {collapsed}: pooling collapses the feature map below 1x1")
    return v


def build_layers(genome: Genome, input_shape) -> list:
    c_in = input_shape[0]
    layers = []
    pools = 0
    for b in genome.blocks:
        for _ in range(b.num_convs):
            layers.append(Conv2d(c_in, b.out_channels, 3, 1, 1))
            layers.append(make_activation(b.activation))
            c_in = b.out_channels
        if b.followed_by_pool:
            layers.append(MaxPool2d(2, 2))
            pools += 1
            if genome.multiresolution:
                layers.append(InputConcat(input_shape[0], 2 ** pools))
                c_in += input_shape[0]
    sizes, _ = _feature_shapes(genome, input_shape)
    h, w = sizes[-1]
    flat = c_in * h * w
    layers.append(Flatten())
    if genome.head.hidden:
        layers.append(FullyConnected(flat, genome.head.hidden))
        layers.append(make_activation(genome.head.activation))
        flat = genome.head.hidden
    layers.append(FullyConnected(flat, 1))
    return layers


def instantiate(genome: Genome, input_shape=(4, 32, 32)) -> Model:
    """Build the model for ``genome`` with weights seeded from the genome id."""
    input_shape = tuple(input_shape)
    violations = validate(genome, input_shape)
    if violations:
        raise GenomeError(violations)
    return Model.build(build_layers(genome, input_shape), input_shape, rng=genome.id)


def param_count(genome: Genome, input_shape=(4, 32, 32)) -> int:
    """Number of trainable scalars, computed without allocating weights."""
    total = 0
    for layer in build_layers(genome, tuple(input_shape)):
        if isinstance(layer, Conv2d):
            total += layer.out_ch * (layer.in_ch * layer.kernel ** 2 + 1)
        elif isinstance(layer, FullyConnected):
            total += layer.out_dim * (layer.in_dim + 1)
        elif isinstance(layer, Activation) and layer.kind == "prelu":
            total += 1
    return total


def vgg_genome(channels, activation="relu", num_convs=2, **kw) -> Genome:
    """Convenience constructor for a plain VGG-style genome with one block per channel count."""
    blocks = tuple(BlockGene(int(c), num_convs, activation, True) for c in channels)
    return Genome(blocks=blocks, **kw)


def with_lineage(genome: Genome, new_id: int, parents) -> Genome:
    return replace(genome, id=new_id, parent_ids=tuple(parents))


def save_checkpoint(path, model: Model, genome: Genome) -> None:
    """Store trained weights next to the genome that produced them (``.npz``)."""
    arrays = {f"param_{i:03d}": p for i, p in enumerate(model.params)}
    with open(path, "wb") as fh:
        np.savez(fh, genome=np.array(genome.to_json()), input_shape=np.array(model.input_shape), **arrays)


def load_checkpoint(path) -> tuple[Model, Genome]:
    with np.load(path, allow_pickle=False) as z:
        genome = Genome.from_json(str(z["genome"]))
        shape = tuple(int(s) for s in z["input_shape"])
        params = [z[k] for k in sorted(k for k in z.files if k.startswith("param_"))]
    model = Model.build(build_layers(genome, shape), shape, rng=0)
    return model.with_params(params), genome
