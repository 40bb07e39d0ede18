"""Population-based architecture search over genomes.

Each iteration, every member of the current population triggers one
crossover between two random parents (both children join the pool) and one
mutation of itself (the mutant joins the pool). The enlarged pool, parents
included, is then truncated back to ``population_size``, so the best
fitness can never get worse from one iteration to the next.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .genome import (
    CHANNEL_BOUNDS, CONV_BOUNDS, BLOCK_BOUNDS, HEAD_ACT, HEAD_FC, HIDDEN_BOUNDS, Genome, IdAllocator,
    SearchSpaceConfig, block_index, fresh_id, instantiate, param_count, random_block, random_genome,
    slot_kind, validate, with_lineage,
)
from .metrics import predict_wse, rmse
from .preprocess import PreparedSet
from .tensor import NumericalError, TrainConfig, TrainingError, train

MAX_RESAMPLES = 8
DEPTH_STEP = 1  # beta * delta_depth
OPTIMIZER_FACTORS = (0.5, 2.0)
MUTATION_OPS = ("width", "depth", "add_block", "remove_block", "toggle_pool")


# ---------------------------------------------------------------------------
# operators


def generate_layer_id(p1: Genome, p2: Genome, rng) -> int | None:
    """Uniform over the gene slots both genomes share, plus ``None`` (hyperparameters)."""
    n = min(p1.n_slots, p2.n_slots)
    k = int(rng.integers(n + 1))
    return None if k == n else k


def _swap(p1: Genome, p2: Genome, layer_id: int | None) -> tuple[Genome, Genome]:
    if layer_id is None:
        return (replace(p1, lr=p2.lr, weight_decay=p2.weight_decay),
                replace(p2, lr=p1.lr, weight_decay=p1.weight_decay))
    kind = slot_kind(p1, layer_id)
    if layer_id == HEAD_FC:
        return replace(p1, head=p2.head), replace(p2, head=p1.head)
    if layer_id == HEAD_ACT:
        return (replace(p1, head=replace(p1.head, activation=p2.head.activation)),
                replace(p2, head=replace(p2.head, activation=p1.head.activation)))
    i = block_index(layer_id)
    b1, b2 = list(p1.blocks), list(p2.blocks)
    if kind == "conv":
        b1[i], b2[i] = p2.blocks[i], p1.blocks[i]
    else:
        b1[i] = replace(p1.blocks[i], activation=p2.blocks[i].activation)
        b2[i] = replace(p2.blocks[i], activation=p1.blocks[i].activation)
    return replace(p1, blocks=tuple(b1)), replace(p2, blocks=tuple(b2))


def crossover(p1: Genome, p2: Genome, layer_id: int | None, *, input_shape=(4, 32, 32),
              new_id: Callable[[], int] = fresh_id) -> tuple[Genome, Genome]:
    """Swap the gene at ``layer_id`` between two parents.

    An activation slot swaps activations, a conv slot swaps whole blocks,
    the head slot swaps heads, and ``None`` swaps (lr, weight_decay). A child
    that fails validation is replaced by a copy of its own parent.
    """
    if layer_id is not None and not 0 <= layer_id < min(p1.n_slots, p2.n_slots):
        raise IndexError(f"layer_id {layer_id} is not a slot shared by both parents")
    c1, c2 = _swap(p1, p2, layer_id)
    lineage = (p1.id, p2.id)
    if validate(c1, input_shape):
        c1 = p1
    if validate(c2, input_shape):
        c2 = p2
    return with_lineage(c1, new_id(), lineage), with_lineage(c2, new_id(), lineage)


def _change_activation(current: str, choices, rng) -> str | None:
    options = [a for a in choices if a != current]
    if not options:
        return None
    return str(options[rng.integers(len(options))])


def _mutate_once(g: Genome, layer_id, rng, space: SearchSpaceConfig) -> Genome | None:
    if layer_id is None:
        # change_optimizer
        factor = OPTIMIZER_FACTORS[rng.integers(len(OPTIMIZER_FACTORS))]
        if g.weight_decay > 0 and rng.random() < 0.5:
            return replace(g, weight_decay=g.weight_decay * factor)
        return replace(g, lr=g.lr * factor)

    kind = slot_kind(g, layer_id)
    if layer_id == HEAD_ACT:
        act = _change_activation(g.head.activation, space.activations, rng)
        return None if act is None else replace(g, head=replace(g.head, activation=act))
    if layer_id == HEAD_FC:
        lo, hi = max(space.hidden[0], HIDDEN_BOUNDS[0]), min(space.hidden[1], HIDDEN_BOUNDS[1])
        if hi < lo:
            return None
        if g.head.hidden == 0:
            hidden = int(rng.integers(lo, hi + 1))
        elif rng.random() < 0.5:
            hidden = 0
        else:
            hidden = int(round(g.head.hidden * rng.uniform(0.5, 1.5)))
            if not lo <= hidden <= hi or hidden == g.head.hidden:
                return None
        return replace(g, head=replace(g.head, hidden=hidden))

    i = block_index(layer_id)
    block = g.blocks[i]
    if kind == "activation":
        act = _change_activation(block.activation, space.activations, rng)
        return None if act is None else _set_block(g, i, replace(block, activation=act))

    op = MUTATION_OPS[rng.integers(len(MUTATION_OPS))]
    if op == "width":
        lo, hi = max(space.channels[0], CHANNEL_BOUNDS[0]), min(space.channels[1], CHANNEL_BOUNDS[1])
        width = int(np.clip(round(block.out_channels * rng.uniform(0.5, 1.5)), lo, hi))
        if width == block.out_channels:
            return None
        return _set_block(g, i, replace(block, out_channels=width))
    if op == "depth":
        depth = block.num_convs + (DEPTH_STEP if rng.random() < 0.5 else -DEPTH_STEP)
        lo, hi = max(space.num_convs[0], CONV_BOUNDS[0]), min(space.num_convs[1], CONV_BOUNDS[1])
        if not lo <= depth <= hi:
            return None
        return _set_block(g, i, replace(block, num_convs=depth))
    if op == "add_block":
        if len(g.blocks) >= min(space.n_blocks[1], BLOCK_BOUNDS[1]):
            return None
        blocks = list(g.blocks)
        blocks.insert(i + 1, random_block(space, rng))
        return replace(g, blocks=tuple(blocks))
    if op == "remove_block":
        if len(g.blocks) <= max(space.n_blocks[0], BLOCK_BOUNDS[0]):
            return None
        return replace(g, blocks=g.blocks[:i] + g.blocks[i + 1:])
    return _set_block(g, i, replace(block, followed_by_pool=not block.followed_by_pool))


def _set_block(g: Genome, i: int, block) -> Genome:
    return replace(g, blocks=g.blocks[:i] + (block,) + g.blocks[i + 1:])


def mutate(g: Genome, layer_id: int | None, rng, *, space: SearchSpaceConfig | None = None,
           input_shape=(4, 32, 32), new_id: Callable[[], int] = fresh_id) -> Genome:
    """Apply one mutation at ``layer_id`` (``None`` mutates the optimizer settings).

    Invalid or no-op draws are retried up to 8 times; after that the child
    is a plain copy of the parent.
    """
    space = space or SearchSpaceConfig()
    if layer_id is not None and not 0 <= layer_id < g.n_slots:
        raise IndexError(f"layer_id {layer_id} outside [0, {g.n_slots})")
    for _ in range(MAX_RESAMPLES + 1):
        child = _mutate_once(g, layer_id, rng, space)
        if child is not None and not validate(child, input_shape):
            return with_lineage(child, new_id(), (g.id,))
    return with_lineage(g, new_id(), (g.id,))


# ---------------------------------------------------------------------------
# fitness and selection


@dataclass
class FitnessRecord:
    val_error: float
    train_seed: int
    epochs_used: int
    evaluated_at_iteration: int = 0
    n_params: int = 0
    diverged: bool = False
    wall_time: float = 0.0


@dataclass
class Member:
    genome: Genome
    fitness: FitnessRecord | None = None

    def sort_key(self):
        return (self.fitness.val_error, self.fitness.n_params, self.genome.id)


@dataclass
class IterationSummary:
    iteration: int
    best_rmse: float
    mean_rmse: float
    n_evaluated: int
    best_id: int


@dataclass
class Population:
    members: list
    capacity: int
    history: list = field(default_factory=list)

    def __len__(self):
        return len(self.members)

    @property
    def best(self) -> Member:
        return min(self.members, key=Member.sort_key)

    def errors(self) -> list:
        return [m.fitness.val_error for m in self.members]


def derive_seed(base: int, genome_id: int) -> int:
    """Per-genome training seed so fitness depends only on (budget seed, genome id)."""
    return int(np.random.SeedSequence([base, genome_id]).generate_state(1, np.uint64)[0])


def train_genome(g: Genome, train_set: PreparedSet, budget: TrainConfig):
    """Instantiate ``g`` and train it with its own lr/weight decay and a derived seed."""
    model = instantiate(g, train_set.input_shape)
    cfg = replace(budget, learning_rate=g.lr, weight_decay=g.weight_decay, seed=derive_seed(budget.seed, g.id))
    return train(model, train_set, cfg), cfg


def evaluate_fitness(g: Genome, train_set: PreparedSet, val_set: PreparedSet, budget: TrainConfig,
                     iteration: int = 0) -> FitnessRecord:
    """Train ``g`` and score it by validation RMSE (metres). Divergence scores +inf."""
    t0 = time.perf_counter()
    seed = derive_seed(budget.seed, g.id)
    n_params = param_count(g, train_set.input_shape)
    try:
        model, _ = train_genome(g, train_set, budget)
        err = rmse(predict_wse(model, val_set), val_set.wse)
        diverged = not math.isfinite(err)
    except (TrainingError, NumericalError):
        err, diverged = math.inf, True
    if diverged:
        err = math.inf
    return FitnessRecord(err, seed, budget.epochs, iteration, n_params, diverged, time.perf_counter() - t0)


def choose_best_models(pop, k: int) -> Population:
    """Keep the ``k`` lowest-error members, ties broken by parameter count then genome id."""
    members = pop.members if isinstance(pop, Population) else list(pop)
    capacity = pop.capacity if isinstance(pop, Population) else k
    if k > len(members):
        raise ValueError(f"cannot choose {k} members from a pool of {len(members)}")
    if any(m.fitness is None for m in members):
        raise ValueError("all members must be evaluated before selection")
    history = pop.history if isinstance(pop, Population) else []
    return Population(sorted(members, key=Member.sort_key)[:k], capacity, history)


# ---------------------------------------------------------------------------
# main loop


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 16
    iterations: int = 20
    crossover_rate: float = 1.0
    mutation_rate: float = 1.0
    epochs: int = 6
    batch_size: int = 8
    seed: int = 0
    jobs: int = 1
    max_iterations: int = 40
    space: SearchSpaceConfig = SearchSpaceConfig()

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if not 0 <= self.iterations <= self.max_iterations:
            raise ValueError(f"iterations must lie in [0, {self.max_iterations}]")
        if not (0 <= self.crossover_rate <= 1 and 0 <= self.mutation_rate <= 1):
            raise ValueError("crossover/mutation rates must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.jobs < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and jobs >= 1 required")

    def budget(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed)


class ExperimentLog:
    """Append-only NDJSON writer (one record per evaluated genome)."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        self._fh = open(path, "w", encoding="utf-8") if path is not None else None

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _log_record(iteration: int, member: Member) -> dict:
    f = member.fitness
    return {
        "iteration": iteration,
        "genome": member.genome.to_dict(),
        "val_error": None if f.diverged else f.val_error,
        "diverged": f.diverged,
        "train_seed": f.train_seed,
        "epochs": f.epochs_used,
        "n_params": f.n_params,
        "parent_ids": list(member.genome.parent_ids),
        "wall_time": round(f.wall_time, 6),
    }


_WORKER_DATA = None


def _init_worker(train_set, val_set, budget):
    global _WORKER_DATA
    _WORKER_DATA = (train_set, val_set, budget)


def _worker_eval(args):
    g, iteration = args
    train_set, val_set, budget = _WORKER_DATA
    return evaluate_fitness(g, train_set, val_set, budget, iteration)


def _evaluate_all(genomes: Sequence[Genome], train_set, val_set, budget, iteration, executor) -> list:
    genomes = sorted(genomes, key=lambda g: g.id)
    if executor is None:
        records = [evaluate_fitness(g, train_set, val_set, budget, iteration) for g in genomes]
    else:
        records = list(executor.map(_worker_eval, [(g, iteration) for g in genomes]))
    return [Member(g, r) for g, r in zip(genomes, records)]


def _summary(iteration, pop: Population, n_evaluated) -> IterationSummary:
    errs = np.array(pop.errors())
    finite = errs[np.isfinite(errs)]
    best = pop.best
    return IterationSummary(iteration, float(errs.min()), float(finite.mean()) if finite.size else math.inf,
                            n_evaluated, best.genome.id)


def evolve(cfg: EvolutionConfig, train_set: PreparedSet, val_set: PreparedSet,
           log: ExperimentLog | None = None, initial: Sequence[Genome] | None = None,
           progress: Callable[[IterationSummary], None] | None = None) -> Population:
    """Run the search and return the final population sorted by fitness.

    ``population.history[0]`` describes the evaluated initial population and
    ``history[t]`` the population after iteration ``t``.
    """
    log = log if log is not None else ExperimentLog()
    rng = np.random.default_rng(cfg.seed)
    ids = IdAllocator()
    shape = train_set.input_shape
    budget = cfg.budget()
    space = cfg.space

    if initial is None:
        genomes = [random_genome(space, rng, ids(), input_shape=shape) for _ in range(cfg.population_size)]
    else:
        genomes = [with_lineage(g, ids(), g.parent_ids) for g in initial]
        if len(genomes) != cfg.population_size:
            raise ValueError("initial population size does not match population_size")

    executor = None
    if cfg.jobs > 1:
        executor = ProcessPoolExecutor(cfg.jobs, initializer=_init_worker, initargs=(train_set, val_set, budget))
    try:
        members = _evaluate_all(genomes, train_set, val_set, budget, 0, executor)
        for m in members:
            log.write(_log_record(0, m))
        pop = choose_best_models(Population(members, cfg.population_size), cfg.population_size)
        pop.history.append(_summary(0, pop, len(members)))
        if progress:
            progress(pop.history[-1])

        for it in range(1, cfg.iterations + 1):
            current = [m.genome for m in pop.members]
            offspring = []
            for solution in current:
                if cfg.crossover_rate >= 1.0 or rng.random() < cfg.crossover_rate:
                    i, j = rng.choice(len(current), size=2, replace=False)
                    p1, p2 = current[i], current[j]
                    layer_id = generate_layer_id(p1, p2, rng)
                    offspring.extend(crossover(p1, p2, layer_id, input_shape=shape, new_id=ids))
                if cfg.mutation_rate >= 1.0 or rng.random() < cfg.mutation_rate:
                    layer_id = generate_layer_id(solution, solution, rng)
                    offspring.append(mutate(solution, layer_id, rng, space=space, input_shape=shape, new_id=ids))
            new_members = _evaluate_all(offspring, train_set, val_set, budget, it, executor)
            for m in new_members:
                log.write(_log_record(it, m))
            pop = choose_best_models(Population(pop.members + new_members, cfg.population_size, pop.history),
                                     cfg.population_size)
            pop.history.append(_summary(it, pop, len(new_members)))
            if progress:
                progress(pop.history[-1])
    finally:
        if executor is not None:
            executor.shutdown()
    return pop
