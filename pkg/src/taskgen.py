import json
import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import defaults
from .errors import ContractViolationError, DataFormatError

# Configure logging
logger = logging.getLogger(__name__)

LOW, HIGH = defaults.INPUT_DOMAIN

# Stream ids under a dataset seed
TASK_STREAM, INPUT_STREAM, NOISE_STREAM, SELECTION_STREAM, AUX_STREAM = range(5)

# Dataset metadata repeated on every line of a dataset file
DATASET_META_KEYS = ('format', 'version', 'N', 'M', 'seed', 'noise_std')


class TaskKind(str, Enum):
    SINE = 'sine'
    LINE = 'line'
    QUADRATIC = 'quadratic'


PARAM_RANGES: Dict[TaskKind, Dict[str, Tuple[float, float]]] = {
    TaskKind.SINE: {'amplitude': (0.1, 5.0), 'phase': (0.0, math.pi)},
    TaskKind.LINE: {'slope': (-1.0, 1.0)},
    TaskKind.QUADRATIC: {'curvature': (-0.2, 0.2), 'center': (-2.0, 2.0)},
}

KIND_ALIASES = {
    'sine': TaskKind.SINE, 'sines': TaskKind.SINE,
    'line': TaskKind.LINE, 'lines': TaskKind.LINE, 'linear': TaskKind.LINE,
    'quadratic': TaskKind.QUADRATIC, 'quadratics': TaskKind.QUADRATIC,
}


def parse_kind(name: Any) -> TaskKind:
    """Resolve a cluster name, accepting plural forms"""
    if isinstance(name, TaskKind):
        return name
    kind = KIND_ALIASES.get(str(name).strip().lower())
    if kind is None:
        raise ContractViolationError(f"Unknown task cluster '{name}' (expected one of sine, line, quadratic)")
    return kind


def parse_kinds(names: str) -> List[TaskKind]:
    """Comma-separated cluster names"""
    kinds = [parse_kind(part) for part in str(names).split(',') if part.strip()]
    if not kinds:
        raise ContractViolationError("No task cluster given")
    return kinds


@dataclass(frozen=True)
class TaskSpec:
    """One sampled function: cluster kind plus its parameters"""
    kind: TaskKind
    params: Mapping[str, float]

    def __post_init__(self):
        kind = parse_kind(self.kind)
        object.__setattr__(self, 'kind', kind)
        ranges = PARAM_RANGES[kind]
        if set(self.params) != set(ranges):
            raise ContractViolationError(f"{kind.value} task needs params {sorted(ranges)}, got {sorted(self.params)}")
        for name, (low, high) in ranges.items():
            if not low <= self.params[name] <= high:
                raise ContractViolationError(f"{kind.value} param {name}={self.params[name]} outside [{low}, {high}]")
        object.__setattr__(self, 'params', {name: float(self.params[name]) for name in ranges})

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.params.items()))))


@dataclass(frozen=True, eq=False)
class TaskData:
    """Context batch of one task: X is 1 x K, Y has length K"""
    spec: TaskSpec
    X: np.ndarray
    Y: np.ndarray


@dataclass(frozen=True, eq=False)
class Episode:
    """Context plus query batch of one task"""
    spec: TaskSpec
    Xc: np.ndarray
    Yc: np.ndarray
    Xq: np.ndarray
    Yq: np.ndarray


def sample_task(kind: Any, rng: np.random.Generator) -> TaskSpec:
    """Parameters drawn uniformly over the cluster's ranges"""
    kind = parse_kind(kind)
    params = {name: float(rng.uniform(low, high)) for name, (low, high) in PARAM_RANGES[kind].items()}
    return TaskSpec(kind, params)


def eval_task(spec: TaskSpec, X: Any) -> np.ndarray:
    """Noiseless function values at the inputs"""
    x = np.asarray(X, dtype=np.float64).reshape(-1)
    p = spec.params
    if spec.kind == TaskKind.SINE:
        return p['amplitude'] * np.sin(x + p['phase']) + 1.0
    if spec.kind == TaskKind.LINE:
        return p['slope'] * x
    return p['curvature'] * (x - p['center']) ** 2 + 0.5


def sample_inputs(rng: np.random.Generator, count: int) -> np.ndarray:
    return rng.uniform(LOW, HIGH, size=(1, count))


def sample_context(spec: TaskSpec, K: int, rng: np.random.Generator,
                   noise_std: float = defaults.SIGMA_EPS) -> Tuple[np.ndarray, np.ndarray]:
    """K uniform inputs on the domain and noisy observations"""
    if K < 1:
        raise ContractViolationError(f"Context size must be positive, got {K}")
    X = sample_inputs(rng, K)
    Y = eval_task(spec, X) + noise_std * rng.standard_normal(K)
    return X, Y


def cluster_mean_oracle(kind: Any, X: Any, n_mc: int, seed: int) -> np.ndarray:
    """Monte-Carlo estimate of E_p(f)[f(X)] over the cluster"""
    if n_mc < 10_000:
        raise ContractViolationError(f"n_mc must be at least 10000, got {n_mc}")
    rng = np.random.default_rng(seed)
    total = np.zeros(np.asarray(X).size)
    for _ in range(n_mc):
        total += eval_task(sample_task(kind, rng), X)
    return total / n_mc


def auxiliary_fim_inputs(n_tasks: int, n_points: int, seed: int) -> List[np.ndarray]:
    """Artificial finite input set used to sketch the FIM when tasks are unlimited"""
    rng = np.random.default_rng([seed, AUX_STREAM])
    return [sample_inputs(rng, n_points) for _ in range(n_tasks)]


def _rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return rng.bit_generator.state


def _restore(rng: np.random.Generator, state: Dict[str, Any]) -> None:
    rng.bit_generator.state = state


class InfiniteTaskDataset:
    """Unlimited tasks of one cluster with fresh inputs and noise at every draw"""

    def __init__(self, kind: Any, seed: int, noise_std: float = defaults.SIGMA_EPS, cluster_index: int = 0):
        self.kind = parse_kind(kind)
        self.seed = int(seed)
        self.noise_std = noise_std
        self.cluster_index = int(cluster_index)
        # clusters of one run share the seed but never a stream
        self.task_rng = np.random.default_rng([self.seed, TASK_STREAM, self.cluster_index])
        self.input_rng = np.random.default_rng([self.seed, INPUT_STREAM, self.cluster_index])
        self.noise_rng = np.random.default_rng([self.seed, NOISE_STREAM, self.cluster_index])

    @property
    def mode(self) -> str:
        return 'infinite'

    def sample_tasks(self, count: int, K: int) -> List[TaskData]:
        tasks = []
        for _ in range(count):
            spec = sample_task(self.kind, self.task_rng)
            X = sample_inputs(self.input_rng, K)
            Y = eval_task(spec, X) + self.noise_std * self.noise_rng.standard_normal(K)
            tasks.append(TaskData(spec, X, Y))
        return tasks

    def sample_episodes(self, count: int, K: int, L: int) -> List[Episode]:
        """Noisy context and noiseless queries, all inputs uniform on the domain"""
        episodes = []
        for _ in range(count):
            spec = sample_task(self.kind, self.task_rng)
            Xc = sample_inputs(self.input_rng, K)
            Xq = sample_inputs(self.input_rng, L)
            Yc = eval_task(spec, Xc) + self.noise_std * self.noise_rng.standard_normal(K)
            episodes.append(Episode(spec, Xc, Yc, Xq, eval_task(spec, Xq)))
        return episodes

    def fim_inputs(self, param_count: int, n_tasks: int = defaults.FIM_AUX_TASKS,
                   points_cap: int = defaults.FIM_AUX_POINTS_CAP) -> List[np.ndarray]:
        n_points = min(param_count, points_cap)
        if n_points < param_count:
            logger.info(f"FIM auxiliary dataset capped at M={n_points} points per task (P={param_count})")
        return auxiliary_fim_inputs(n_tasks, n_points, self.seed)

    def get_state(self) -> Dict[str, Any]:
        return {'task': _rng_state(self.task_rng), 'input': _rng_state(self.input_rng),
                'noise': _rng_state(self.noise_rng)}

    def set_state(self, state: Dict[str, Any]) -> None:
        _restore(self.task_rng, state['task'])
        _restore(self.input_rng, state['input'])
        _restore(self.noise_rng, state['noise'])


class FiniteTaskDataset:
    """N tasks with M noisy points each, frozen at construction; batches are random subsets"""

    def __init__(self, specs: Sequence[TaskSpec], X: np.ndarray, Y: np.ndarray, seed: int,
                 noise_std: float = defaults.SIGMA_EPS):
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if X.ndim != 2 or X.shape != Y.shape or X.shape[0] != len(specs) or X.shape[0] < 1:
            raise ContractViolationError(f"Finite dataset arrays {X.shape}, {Y.shape} do not match {len(specs)} tasks")
        self.specs = list(specs)
        self.X = X
        self.Y = Y
        self.X.setflags(write=False)
        self.Y.setflags(write=False)
        self.seed = int(seed)
        self.noise_std = noise_std
        self.selection_rng = np.random.default_rng([self.seed, SELECTION_STREAM])

    @classmethod
    def generate(cls, kind: Any, N: int, M: int, seed: int,
                 noise_std: float = defaults.SIGMA_EPS) -> 'FiniteTaskDataset':
        """Draw N tasks and M points per task; the noise is applied once here"""
        if N < 1 or M < 1:
            raise ContractViolationError(f"Finite dataset needs N >= 1 and M >= 1, got N={N}, M={M}")
        task_rng = np.random.default_rng([seed, TASK_STREAM])
        input_rng = np.random.default_rng([seed, INPUT_STREAM])
        noise_rng = np.random.default_rng([seed, NOISE_STREAM])
        specs = [sample_task(kind, task_rng) for _ in range(N)]
        X = input_rng.uniform(LOW, HIGH, size=(N, M))
        Y = np.stack([eval_task(spec, X[i]) for i, spec in enumerate(specs)])
        Y = Y + noise_std * noise_rng.standard_normal((N, M))
        return cls(specs, X, Y, seed, noise_std)

    @property
    def mode(self) -> str:
        return 'finite'

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def M(self) -> int:
        return self.X.shape[1]

    def _pick_tasks(self, count: int) -> np.ndarray:
        return self.selection_rng.choice(self.N, size=count, replace=count > self.N)

    def _pick_points(self, K: int) -> np.ndarray:
        if K > self.M:
            raise ContractViolationError(f"Context size K={K} exceeds the M={self.M} points per task")
        return self.selection_rng.choice(self.M, size=K, replace=False)

    def sample_tasks(self, count: int, K: int) -> List[TaskData]:
        tasks = []
        for index in self._pick_tasks(count):
            points = self._pick_points(K)
            tasks.append(TaskData(self.specs[index], self.X[index, points][None, :], self.Y[index, points].copy()))
        return tasks

    def sample_episodes(self, count: int, K: int, L: int) -> List[Episode]:
        """Context and query subsets both come from the task's frozen pool"""
        episodes = []
        for index in self._pick_tasks(count):
            context = self._pick_points(K)
            query = self._pick_points(L)
            episodes.append(Episode(self.specs[index],
                                    self.X[index, context][None, :], self.Y[index, context].copy(),
                                    self.X[index, query][None, :], self.Y[index, query].copy()))
        return episodes

    def fim_inputs(self, param_count: int, n_tasks: int = defaults.FIM_AUX_TASKS,
                   points_cap: int = defaults.FIM_AUX_POINTS_CAP) -> List[np.ndarray]:
        # every training task's full input pool
        return [self.X[i][None, :] for i in range(self.N)]

    def get_state(self) -> Dict[str, Any]:
        return {'selection': _rng_state(self.selection_rng)}

    def set_state(self, state: Dict[str, Any]) -> None:
        _restore(self.selection_rng, state['selection'])


class TaskSampler:
    """
    Evaluation tasks drawn from per-index streams.

    Task i depends only on (seed, i): its function and query inputs are the same for
    every K, and evaluation order does not matter. Kinds are cycled over the index.
    """

    def __init__(self, kinds: Sequence[Any], seed: int, noise_std: float = defaults.SIGMA_EPS):
        self.kinds = [parse_kind(kind) for kind in kinds]
        if not self.kinds:
            raise ContractViolationError("TaskSampler needs at least one kind")
        self.seed = int(seed)
        self.noise_std = noise_std

    def kind_of(self, index: int) -> TaskKind:
        return self.kinds[index % len(self.kinds)]

    def draw(self, index: int, K: int, n_query: int) -> Episode:
        task_ss, context_ss, query_ss, noise_ss = np.random.SeedSequence([self.seed, index]).spawn(4)
        spec = sample_task(self.kind_of(index), np.random.default_rng(task_ss))
        # the context stream is keyed by K so contexts of different sizes are independent draws
        context_rng = np.random.default_rng([int(context_ss.generate_state(1)[0]), K])
        Xc = sample_inputs(context_rng, K)
        Yc = eval_task(spec, Xc) + self.noise_std * np.random.default_rng(
            [int(noise_ss.generate_state(1)[0]), K]).standard_normal(K)
        Xq = sample_inputs(np.random.default_rng(query_ss), n_query)
        return Episode(spec, Xc, Yc, Xq, eval_task(spec, Xq))


def write_dataset_jsonl(dataset: FiniteTaskDataset, path: str, force: bool = False) -> None:
    """
    Write a finite dataset as line-oriented JSON, one task per line.

    Every record repeats the dataset metadata (format, version, N, M, seed, noise_std) next to
    its index, kind, params and points, so an N-task dataset is exactly N lines.
    """
    if os.path.exists(path) and not force:
        raise FileExistsError(f"Dataset file already exists: {path} (use --force to overwrite)")
    meta = {'format': defaults.DATASET_FORMAT, 'version': defaults.DATASET_VERSION,
            'N': dataset.N, 'M': dataset.M, 'seed': dataset.seed, 'noise_std': dataset.noise_std}
    try:
        with open(path, 'w', encoding='utf-8') as f:
            for index, spec in enumerate(dataset.specs):
                record = dict(meta, index=index, kind=spec.kind.value, params=dict(spec.params),
                              x=[[float(v)] for v in dataset.X[index]],
                              y=[[float(v)] for v in dataset.Y[index]])
                f.write(json.dumps(record) + '\n')
        logger.info(f"Saved dataset with N={dataset.N}, M={dataset.M} to {path}")
    except OSError as e:
        logger.error(f"Error writing dataset to {path}: {str(e)}")
        raise


def read_dataset_jsonl(path: str, seed: Optional[int] = None) -> FiniteTaskDataset:
    """Load a dataset written by write_dataset_jsonl; malformed lines are reported by number"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()
    except OSError as e:
        logger.error(f"Error reading dataset {path}: {str(e)}")
        raise

    meta: Optional[Dict[str, Any]] = None
    specs, xs, ys = [], [], []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            if record.get('format') != defaults.DATASET_FORMAT:
                raise DataFormatError(f"not an {defaults.DATASET_FORMAT} record", path=path, line=number)
            spec = TaskSpec(parse_kind(record['kind']), record['params'])
            x = [float(point[0]) for point in record['x']]
            y = [float(point[0]) for point in record['y']]
            record_meta = {key: record[key] for key in DATASET_META_KEYS}
            position = int(record['index'])
        except (json.JSONDecodeError, KeyError, TypeError, IndexError, ValueError, AttributeError) as e:
            raise DataFormatError(f"malformed task record: {str(e)}", path=path, line=number)
        if meta is None:
            meta = record_meta
        elif record_meta != meta:
            raise DataFormatError("dataset metadata differs from the first record", path=path, line=number)
        if position != len(specs):
            raise DataFormatError(f"task index {position} out of order, expected {len(specs)}",
                                  path=path, line=number)
        if len(x) != len(y) or len(x) != meta['M']:
            raise DataFormatError(f"task holds {len(x)} inputs and {len(y)} targets, expected M={meta['M']}",
                                  path=path, line=number)
        specs.append(spec)
        xs.append(x)
        ys.append(y)

    if not specs:
        raise DataFormatError("dataset has no tasks", path=path, line=max(len(lines), 1))
    if len(specs) != meta['N']:
        raise DataFormatError(f"records announce N={meta['N']} but file holds {len(specs)} tasks",
                              path=path, line=len(lines))
    return FiniteTaskDataset(specs, np.array(xs), np.array(ys),
                             seed=meta['seed'] if seed is None else seed,
                             noise_std=meta['noise_std'])
