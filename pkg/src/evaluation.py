import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from scipy.optimize import linear_sum_assignment  # noqa: E402
from scipy.stats import rankdata  # noqa: E402

from config import defaults  # noqa: E402
from .checkpoint_store import Checkpoint, to_mixture  # noqa: E402
from .diffnet import ParamVector  # noqa: E402
from .errors import CheckpointError, ContractViolationError, UnsupportedMetricError  # noqa: E402
from .gp import PredictiveGaussian, as_targets, prior_predictive  # noqa: E402
from .maml import MamlConfig, theta_from_checkpoint  # noqa: E402
from .maml import predict as maml_predict  # noqa: E402
from .mixture import MixtureModel, mixture_nll  # noqa: E402
from .mixture import predict as mixture_predict  # noqa: E402
from .taskgen import TaskSampler  # noqa: E402

# Configure logging
logger = logging.getLogger(__name__)

# Stable SVG ids and no timestamp, so identical reports render to identical files
plt.rcParams['svg.hashsalt'] = 'unlimitd'

Z_95 = 1.96

CSV_HEADER = ['metric', 'K', 'value', 'ci95', 'model', 'seed']

# record field -> (CSV metric name, CSV ci95 field)
CSV_METRICS = {
    'mean_mse': ('mse', 'ci95_mse'),
    'auc': ('auc', None),
    'mean_posterior_std': ('posterior_std', None),
    'cluster_accuracy': ('cluster_accuracy', None),
}


class Predictor(Protocol):
    """What the evaluation harness needs from a meta-learned model"""
    name: str
    probabilistic: bool

    def predict(self, Xc: Any, Yc: Any, Xq: Any) -> PredictiveGaussian:
        ...

    def nll(self, Xc: Any, Yc: Any) -> float:
        ...

    def prior(self, Xq: Any) -> PredictiveGaussian:
        ...


class UnlimitdPredictor:
    """GP-mixture predictor: cluster inference plus exact posterior"""
    probabilistic = True

    def __init__(self, model: MixtureModel, name: str = 'unlimitd'):
        self.model = model
        self.name = name

    def predict(self, Xc: Any, Yc: Any, Xq: Any) -> PredictiveGaussian:
        with torch.no_grad():
            return mixture_predict(self.model, Xc, Yc, Xq)

    def nll(self, Xc: Any, Yc: Any) -> float:
        with torch.no_grad():
            return float(mixture_nll(self.model, Xc, Yc))

    def prior(self, Xq: Any) -> PredictiveGaussian:
        """Prior predictive at the queries; for mixtures the equal-weight mixture's moments"""
        with torch.no_grad():
            components = [prior_predictive(self.model.cluster_prior(j), Xq) for j in range(self.model.alpha)]
        if len(components) == 1:
            return components[0]
        means = torch.stack([c.mean for c in components])
        second = torch.stack([torch.diagonal(c.cov) + c.mean ** 2 for c in components]).mean(dim=0)
        mean = means.mean(dim=0)
        return PredictiveGaussian(mean, torch.diag(second - mean ** 2))


class MamlPredictor:
    """Point predictor: adapted network outputs with a zero covariance"""
    probabilistic = False

    def __init__(self, theta: ParamVector, config: MamlConfig, name: str = 'maml'):
        self.theta = theta
        self.config = config
        self.name = name

    def predict(self, Xc: Any, Yc: Any, Xq: Any) -> PredictiveGaussian:
        mean = maml_predict(self.theta, Xc, Yc, Xq, self.config)
        return PredictiveGaussian(mean, torch.zeros(mean.shape[0], mean.shape[0], dtype=mean.dtype),
                                  has_covariance=False)

    def nll(self, Xc: Any, Yc: Any) -> float:
        raise UnsupportedMetricError("MAML is not probabilistic: no NLL score for OoD detection")

    def prior(self, Xq: Any) -> PredictiveGaussian:
        raise UnsupportedMetricError("MAML is not probabilistic: no prior predictive")


def predictor_from_checkpoint(checkpoint: Checkpoint, name: Optional[str] = None) -> Predictor:
    if checkpoint.model_kind == 'unlimitd':
        label = name or f"unlimitd-{checkpoint.variant}" + (f"-a{checkpoint.alpha}" if checkpoint.alpha > 1 else '')
        return UnlimitdPredictor(to_mixture(checkpoint), label)
    if checkpoint.model_kind == 'maml':
        theta, config = theta_from_checkpoint(checkpoint)
        return MamlPredictor(theta, config, name or 'maml')
    raise CheckpointError(f"Unknown model kind: {checkpoint.model_kind}")


def ci95(values: Sequence[float]) -> float:
    """1.96 standard errors; a single value has no spread and gives 0"""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ContractViolationError("ci95 of an empty sample")
    if values.size == 1:
        return 0.0
    return float(Z_95 * np.std(values, ddof=1) / math.sqrt(values.size))


def _validate_K_list(K_list: Sequence[int], allow_zero: bool = False) -> List[int]:
    K_list = [int(K) for K in K_list]
    if not K_list:
        raise ContractViolationError("K_list is empty")
    lowest = 0 if allow_zero else 1
    if any(K < lowest for K in K_list):
        raise ContractViolationError(f"K values must be at least {lowest}, got {K_list}")
    if any(b <= a for a, b in zip(K_list, K_list[1:])):
        raise ContractViolationError(f"K values must be strictly increasing, got {K_list}")
    return K_list


def task_mse(model: Predictor, Xc: Any, Yc: Any, Xq: Any, Yq: Any) -> float:
    prediction = model.predict(Xc, Yc, Xq)
    target = as_targets(Yq, prediction.mean.shape[0])
    return float(torch.mean((prediction.mean - target) ** 2))


def mse_eval(model: Predictor, task_sampler: TaskSampler, K_list: Sequence[int], n_tasks: int,
             n_query: int) -> Dict[int, Tuple[float, float]]:
    """
    Mean query MSE and its ci95 over n_tasks tasks for each context size.

    Task i is the same function with the same queries for every K.

    Returns:
        dict: K -> (mean MSE, ci95)
    """
    K_list = _validate_K_list(K_list)
    if n_tasks < 1 or n_query < 1:
        raise ContractViolationError(f"n_tasks and n_query must be positive, got {n_tasks}, {n_query}")
    results = {}
    for K in K_list:
        mses = []
        for index in range(n_tasks):
            episode = task_sampler.draw(index, K, n_query)
            mses.append(task_mse(model, episode.Xc, episode.Yc, episode.Xq, episode.Yq))
        results[K] = (float(np.mean(mses)), ci95(mses))
        logger.info(f"{model.name} K={K}: MSE {results[K][0]:.4f} +/- {results[K][1]:.4f}")
    return results


def auc_mann_whitney(in_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """
    Probability that an OoD score exceeds an in-distribution score, ties counting one half.

    Rank-sum form of the Mann-Whitney statistic with midranks.
    """
    in_scores = np.asarray(in_scores, dtype=np.float64).reshape(-1)
    ood_scores = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    if in_scores.size == 0 or ood_scores.size == 0:
        raise ContractViolationError("AUC needs at least one score on each side")
    if not (np.isfinite(in_scores).all() and np.isfinite(ood_scores).all()):
        raise ContractViolationError("AUC scores must be finite")
    ranks = rankdata(np.concatenate([in_scores, ood_scores]))
    n_ood = ood_scores.size
    u_statistic = ranks[in_scores.size:].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u_statistic / (n_ood * in_scores.size))


def ood_auc(model: Predictor, in_dist_sampler: TaskSampler, ood_sampler: TaskSampler, K: int,
            n_each: int) -> float:
    """AUC-ROC of the context NLL as an OoD score, OoD tasks being the positives"""
    if K < 1 or n_each < 1:
        raise ContractViolationError(f"K and n_each must be positive, got {K}, {n_each}")
    if not model.probabilistic:
        raise UnsupportedMetricError(f"{model.name} has no NLL: OoD detection needs a probabilistic model")
    in_scores = [model.nll(ep.Xc, ep.Yc) for ep in (in_dist_sampler.draw(i, K, 0) for i in range(n_each))]
    ood_scores = [model.nll(ep.Xc, ep.Yc) for ep in (ood_sampler.draw(i, K, 0) for i in range(n_each))]
    auc = auc_mann_whitney(in_scores, ood_scores)
    logger.info(f"{model.name} K={K}: OoD AUC {auc:.4f}")
    return auc


def uncertainty_curve(model: Predictor, sampler: TaskSampler, K_list: Sequence[int], n_tasks: int,
                      n_query: int = 100) -> Dict[int, float]:
    """Mean posterior std over tasks and query points for each K; K = 0 is the prior predictive"""
    if not model.probabilistic:
        raise UnsupportedMetricError(f"{model.name} has no covariance: posterior std is undefined")
    K_list = _validate_K_list(K_list, allow_zero=True)
    curve = {}
    for K in K_list:
        stds = []
        for index in range(n_tasks):
            episode = sampler.draw(index, K, n_query)
            prediction = model.prior(episode.Xq) if K == 0 else model.predict(episode.Xc, episode.Yc, episode.Xq)
            stds.append(float(prediction.std().mean()))
        curve[K] = float(np.mean(stds))
    return curve


def cluster_accuracy(model: Predictor, sampler: TaskSampler, K: int, n_tasks: int) -> float:
    """
    Share of tasks whose inferred cluster matches their kind.

    Clusters are learned without labels, so each cluster is first matched to a kind by the
    one-to-one assignment that maximizes agreement; the score does not depend on cluster order.
    """
    n_kinds = len(sampler.kinds)
    assigned = []
    for index in range(n_tasks):
        episode = sampler.draw(index, K, 1)
        prediction = model.predict(episode.Xc, episode.Yc, episode.Xq)
        if prediction.cluster is None:
            raise UnsupportedMetricError(f"{model.name} does not infer clusters")
        assigned.append(int(prediction.cluster))

    counts = np.zeros((max(assigned) + 1, n_kinds), dtype=np.int64)
    for index, cluster in enumerate(assigned):
        counts[cluster, index % n_kinds] += 1
    rows, cols = linear_sum_assignment(counts, maximize=True)
    mapping = {int(row): int(col) for row, col in zip(rows, cols)}
    logger.debug(f"{model.name}: cluster-to-kind assignment {mapping}")
    return float(counts[rows, cols].sum()) / n_tasks


@dataclass
class EvalRecord:
    K: int
    mean_mse: Optional[float] = None
    ci95_mse: Optional[float] = None
    auc: Optional[float] = None
    mean_posterior_std: Optional[float] = None
    cluster_accuracy: Optional[float] = None


@dataclass
class EvalReport:
    records: List[EvalRecord]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.records:
            raise ContractViolationError("A report needs at least one K")
        _validate_K_list([record.K for record in self.records])
        for record in self.records:
            if record.ci95_mse is not None and record.ci95_mse < 0:
                raise ContractViolationError(f"Negative ci95 at K={record.K}")
            if record.auc is not None and not 0.0 <= record.auc <= 1.0:
                raise ContractViolationError(f"AUC {record.auc} outside [0, 1] at K={record.K}")

    def to_dict(self) -> Dict[str, Any]:
        return {'schema': defaults.REPORT_SCHEMA, 'version': defaults.REPORT_VERSION,
                'metadata': self.metadata, 'records': [asdict(record) for record in self.records]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvalReport':
        if data.get('schema') != defaults.REPORT_SCHEMA:
            raise ContractViolationError(f"Not an {defaults.REPORT_SCHEMA} document")
        return cls([EvalRecord(**record) for record in data['records']], data.get('metadata', {}))


def evaluate(model: Predictor, kinds: Sequence[Any], K_list: Sequence[int], n_tasks: int, n_query: int,
             seed: int, ood_kinds: Optional[Sequence[Any]] = None, n_each: int = 200,
             uncertainty: bool = False, clusters: bool = False,
             metadata: Optional[Dict[str, Any]] = None) -> EvalReport:
    """Run the requested metrics over K_list and assemble the report"""
    K_list = _validate_K_list(K_list)
    sampler = TaskSampler(kinds, seed)
    mse = mse_eval(model, sampler, K_list, n_tasks, n_query)
    records = [EvalRecord(K, mean_mse=mse[K][0], ci95_mse=mse[K][1]) for K in K_list]

    if ood_kinds:
        if not model.probabilistic:
            raise UnsupportedMetricError(f"{model.name} has no NLL: OoD detection needs a probabilistic model")
        # the OoD stream is offset from the in-distribution one so tasks never coincide
        ood_sampler = TaskSampler(ood_kinds, seed + 1)
        for record in records:
            record.auc = ood_auc(model, sampler, ood_sampler, record.K, n_each)
    if uncertainty:
        curve = uncertainty_curve(model, sampler, K_list, n_tasks, n_query)
        for record in records:
            record.mean_posterior_std = curve[record.K]
    if clusters:
        for record in records:
            record.cluster_accuracy = cluster_accuracy(model, sampler, record.K, n_tasks)

    info = {'model': model.name, 'seed': seed, 'kinds': [str(getattr(k, 'value', k)) for k in sampler.kinds],
            'n_tasks': n_tasks, 'n_query': n_query, 'degenerate_ci': n_tasks == 1}
    if ood_kinds:
        info.update({'ood_kinds': [str(getattr(k, 'value', k)) for k in ood_sampler.kinds], 'n_each': n_each})
    info.update(metadata or {})
    return EvalReport(records, info)


def aggregate_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean and ci95 across several trained models (e.g. projection seeds) for every K and metric"""
    if not reports:
        raise ContractViolationError("Nothing to aggregate")
    K_list = [record.K for record in reports[0].records]
    if any([record.K for record in report.records] != K_list for report in reports):
        raise ContractViolationError("Reports cover different K values")

    records = []
    for position, K in enumerate(K_list):
        record = EvalRecord(K)
        for name in ('mean_mse', 'auc', 'mean_posterior_std', 'cluster_accuracy'):
            values = [getattr(report.records[position], name) for report in reports]
            if any(value is None for value in values):
                continue
            setattr(record, name, float(np.mean(values)))
            if name == 'mean_mse':
                record.ci95_mse = ci95(values)
        records.append(record)

    metadata = dict(reports[0].metadata)
    metadata.update({'model': metadata.get('model', 'model') + f"-x{len(reports)}",
                     'aggregated_models': [report.metadata.get('model') for report in reports],
                     'degenerate_ci': len(reports) == 1})
    return EvalReport(records, metadata)


def _plot(report: EvalReport, attribute: str, ylabel: str, path: str) -> None:
    points = [(record.K, getattr(record, attribute)) for record in report.records
              if getattr(record, attribute) is not None]
    if not points:
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    Ks, values = zip(*points)
    ax.plot(Ks, values, marker='o', label=report.metadata.get('model', 'model'))
    if attribute == 'mean_mse':
        errors = [record.ci95_mse or 0.0 for record in report.records if record.mean_mse is not None]
        lower = np.array(values) - np.array(errors)
        upper = np.array(values) + np.array(errors)
        ax.fill_between(Ks, lower, upper, alpha=0.2)
    ax.set_xlabel('K (context points)')
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)


def write_report(report: EvalReport, out_dir: str, stem: str = 'report', plots: bool = False) -> List[str]:
    """
    Write <stem>.csv and <stem>.json, plus SVG line plots when requested

    Args:
        report (EvalReport): Records and metadata
        out_dir (str): Existing or new output directory
        stem (str): Base file name
        plots (bool): Also render <stem>_mse.svg, <stem>_auc.svg and <stem>_std.svg

    Returns:
        list: Paths written
    """
    if not report.records:
        raise ContractViolationError("Refusing to write an empty report")
    written = []
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    try:
        os.makedirs(out_dir, exist_ok=True)
        model = report.metadata.get('model', '')
        seed = report.metadata.get('seed', '')
        with open(csv_path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(CSV_HEADER)
            for record in report.records:
                for attribute, (metric, ci_field) in CSV_METRICS.items():
                    value = getattr(record, attribute)
                    if value is None:
                        continue
                    ci_value = getattr(record, ci_field) if ci_field else None
                    writer.writerow([metric, record.K, repr(value), '' if ci_value is None else repr(ci_value),
                                     model, seed])
        written.append(csv_path)

        with open(json_path, 'w', encoding='utf-8') as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        written.append(json_path)

        if plots:
            for attribute, suffix, ylabel in (('mean_mse', 'mse', 'query MSE'), ('auc', 'auc', 'OoD AUC'),
                                              ('mean_posterior_std', 'std', 'mean posterior std')):
                path = os.path.join(out_dir, f"{stem}_{suffix}.svg")
                if any(getattr(record, attribute) is not None for record in report.records):
                    _plot(report, attribute, ylabel, path)
                    written.append(path)
    except OSError as e:
        logger.error(f"Error writing report to {out_dir}: {str(e)}")
        raise

    logger.info(f"Report written: {', '.join(os.path.basename(path) for path in written)}")
    return written


def read_report_json(path: str) -> EvalReport:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return EvalReport.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Error reading report {path}: {str(e)}")
        raise
