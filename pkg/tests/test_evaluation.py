import itertools
import json
import math

import numpy as np
import pytest
import torch

from src.diffnet import DTYPE, ParamVector
from src.errors import ContractViolationError, UnsupportedMetricError
from src.evaluation import (CSV_HEADER, EvalRecord, EvalReport, MamlPredictor, UnlimitdPredictor, aggregate_reports,
                            auc_mann_whitney, ci95, cluster_accuracy, evaluate, mse_eval, ood_auc,
                            predictor_from_checkpoint, read_report_json, uncertainty_curve, write_report)
from src.gp import GaussianTaskPrior, IdentityCovariance, PredictiveGaussian, prior_predictive
from src.maml import MamlConfig, MamlTrainer
from src.mixture import ClusterParams, MixtureModel
from src.taskgen import InfiniteTaskDataset, TaskSampler
from src.trainer import MetaTrainer, TrainConfig

SIGMA = 0.05


class ZeroPredictor:
    name = 'zero'
    probabilistic = False

    def predict(self, Xc, Yc, Xq):
        K = np.asarray(Xq).shape[1]
        return PredictiveGaussian(torch.zeros(K, dtype=DTYPE), torch.zeros(K, K, dtype=DTYPE), has_covariance=False)

    def nll(self, Xc, Yc):
        raise UnsupportedMetricError("zero predictor")

    def prior(self, Xq):
        raise UnsupportedMetricError("zero predictor")


class LookupPredictor(ZeroPredictor):
    """Knows the true function values at every query set of the sampler"""
    name = 'lookup'

    def __init__(self, sampler, n_tasks, n_query):
        self.table = {}
        for index in range(n_tasks):
            episode = sampler.draw(index, 1, n_query)
            self.table[episode.Xq.tobytes()] = episode.Yq

    def predict(self, Xc, Yc, Xq):
        K = np.asarray(Xq).shape[1]
        mean = torch.as_tensor(self.table[np.asarray(Xq).tobytes()], dtype=DTYPE)
        return PredictiveGaussian(mean, torch.zeros(K, K, dtype=DTYPE), has_covariance=False)


class FirstClusterPredictor(ZeroPredictor):
    name = 'first-cluster'

    def predict(self, Xc, Yc, Xq):
        prediction = super().predict(Xc, Yc, Xq)
        return PredictiveGaussian(prediction.mean, prediction.cov, has_covariance=False, cluster=0)


@pytest.fixture
def identity_predictor(small_theta):
    prior = GaussianTaskPrior(small_theta, torch.zeros(small_theta.spec.param_count, dtype=DTYPE),
                              IdentityCovariance(), SIGMA)
    return UnlimitdPredictor(MixtureModel.from_prior(prior), 'identity-prior'), prior


def test_ci95():
    assert ci95([4.2]) == 0.0
    assert ci95([1.0, 2.0, 3.0]) == pytest.approx(1.96 / math.sqrt(3))
    with pytest.raises(ContractViolationError):
        ci95([])


def test_auc_simple_cases():
    assert auc_mann_whitney([1, 2, 3], [4, 5]) == 1.0
    assert auc_mann_whitney([4, 5], [1, 2, 3]) == 0.0
    assert auc_mann_whitney([2, 2], [2, 2, 2]) == 0.5
    assert auc_mann_whitney([1, 3], [2]) == 0.5
    with pytest.raises(ContractViolationError):
        auc_mann_whitney([], [1.0])
    with pytest.raises(ContractViolationError):
        auc_mann_whitney([np.inf], [1.0])


def test_auc_matches_pairwise_count():
    rng = np.random.default_rng(0)
    for _ in range(100):
        in_scores = rng.integers(0, 6, size=int(rng.integers(1, 12)))
        ood_scores = rng.integers(0, 6, size=int(rng.integers(1, 12)))
        wins = sum(1.0 if o > i else 0.5 if o == i else 0.0 for i, o in itertools.product(in_scores, ood_scores))
        expected = wins / (in_scores.size * ood_scores.size)
        assert auc_mann_whitney(in_scores, ood_scores) == pytest.approx(expected, abs=1e-12)


def test_auc_is_invariant_to_monotone_transforms():
    rng = np.random.default_rng(1)
    in_scores = rng.normal(0, 1, 50)
    ood_scores = rng.normal(0.5, 1, 40)
    assert auc_mann_whitney(np.exp(in_scores), np.exp(ood_scores)) == pytest.approx(
        auc_mann_whitney(in_scores, ood_scores), abs=1e-12)


def test_exact_predictor_has_zero_mse():
    sampler = TaskSampler(['sine'], seed=3)
    results = mse_eval(LookupPredictor(sampler, 20, 15), sampler, [1, 5], n_tasks=20, n_query=15)
    assert results == {1: (0.0, 0.0), 5: (0.0, 0.0)}


def test_zero_predictor_on_lines_matches_function_power():
    sampler = TaskSampler(['line'], seed=0)
    mean, interval = mse_eval(ZeroPredictor(), sampler, [2], n_tasks=300, n_query=50)[2]
    # E[a^2] E[x^2] with a ~ U(-1, 1) and x ~ U(-5, 5)
    assert mean == pytest.approx(25.0 / 9.0, rel=0.2)
    assert 0 < interval < mean


def test_mse_eval_rejects_bad_k_lists():
    sampler = TaskSampler(['sine'], seed=0)
    for K_list in ([], [0, 1], [3, 2]):
        with pytest.raises(ContractViolationError):
            mse_eval(ZeroPredictor(), sampler, K_list, n_tasks=2, n_query=2)


def test_single_task_report_flags_degenerate_interval():
    report = evaluate(ZeroPredictor(), ['sine'], [1, 2], n_tasks=1, n_query=5, seed=0)
    assert [record.ci95_mse for record in report.records] == [0.0, 0.0]
    assert report.metadata['degenerate_ci'] is True
    assert report.metadata['kinds'] == ['sine']


def test_prior_std_at_zero_context(identity_predictor):
    predictor, prior = identity_predictor
    sampler = TaskSampler(['sine'], seed=4)
    curve = uncertainty_curve(predictor, sampler, [0, 5], n_tasks=3, n_query=10)
    expected = np.mean([prior_predictive(prior, sampler.draw(i, 0, 10).Xq).std().mean().item() for i in range(3)])
    assert curve[0] == pytest.approx(expected, rel=1e-12)
    assert curve[0] >= curve[5]


def test_mixture_prior_uses_moment_matching(linear_spec):
    theta0 = ParamVector(torch.zeros(2, dtype=DTYPE), linear_spec)
    clusters = [ClusterParams(torch.tensor([1.0, 0.0], dtype=DTYPE), torch.tensor([0.5, 0.5], dtype=DTYPE)),
                ClusterParams(torch.tensor([-1.0, 0.0], dtype=DTYPE), torch.tensor([1.0, 1.0], dtype=DTYPE))]
    predictor = UnlimitdPredictor(MixtureModel(theta0, torch.eye(2, dtype=DTYPE), clusters, SIGMA))
    x = np.array([[2.0]])
    prior = predictor.prior(x)
    # cluster means +-2, variances 0.25 * 5 and 5, plus noise
    expected_var = 0.5 * (1.25 + 5.0) + SIGMA ** 2 + 4.0
    assert prior.mean.item() == pytest.approx(0.0, abs=1e-12)
    assert prior.variance().item() == pytest.approx(expected_var, rel=1e-12)


def test_ood_auc_with_probabilistic_model(identity_predictor):
    predictor, _ = identity_predictor
    auc = ood_auc(predictor, TaskSampler(['line'], 0), TaskSampler(['sine'], 1), K=3, n_each=10)
    assert 0.0 <= auc <= 1.0


def test_point_predictors_refuse_probabilistic_metrics():
    with pytest.raises(UnsupportedMetricError):
        ood_auc(ZeroPredictor(), TaskSampler(['line'], 0), TaskSampler(['sine'], 1), K=2, n_each=3)
    with pytest.raises(UnsupportedMetricError):
        uncertainty_curve(ZeroPredictor(), TaskSampler(['sine'], 0), [1], n_tasks=2)
    with pytest.raises(UnsupportedMetricError):
        evaluate(ZeroPredictor(), ['sine'], [1], n_tasks=2, n_query=2, seed=0, ood_kinds=['line'])


def test_cluster_accuracy():
    sampler = TaskSampler(['sine', 'line'], seed=0)
    assert cluster_accuracy(FirstClusterPredictor(), sampler, K=2, n_tasks=10) == 0.5
    with pytest.raises(UnsupportedMetricError):
        cluster_accuracy(ZeroPredictor(), sampler, K=2, n_tasks=2)


def slope_and_offset_mixture(spec, reverse=False):
    """One cluster varies the slope of y = w x + b, the other the offset"""
    clusters = [ClusterParams(torch.zeros(2, dtype=DTYPE), torch.tensor([1.0, 0.01], dtype=DTYPE)),
                ClusterParams(torch.zeros(2, dtype=DTYPE), torch.tensor([0.01, 3.0], dtype=DTYPE))]
    if reverse:
        clusters = clusters[::-1]
    return MixtureModel(ParamVector(torch.zeros(2, dtype=DTYPE), spec), torch.eye(2, dtype=DTYPE), clusters, SIGMA)


def test_cluster_accuracy_does_not_depend_on_cluster_order(linear_spec):
    sampler = TaskSampler(['line', 'quadratic'], seed=5)
    in_order = cluster_accuracy(UnlimitdPredictor(slope_and_offset_mixture(linear_spec)), sampler, K=10, n_tasks=40)
    swapped = cluster_accuracy(UnlimitdPredictor(slope_and_offset_mixture(linear_spec, reverse=True)), sampler,
                               K=10, n_tasks=40)
    assert swapped == in_order
    assert in_order >= 0.5


def test_predictors_from_checkpoints():
    unlimitd = MetaTrainer(TrainConfig(variant='i', hidden_widths=(8,)), [InfiniteTaskDataset('sine', 0)])
    predictor = predictor_from_checkpoint(unlimitd.checkpoint())
    assert isinstance(predictor, UnlimitdPredictor) and predictor.name == 'unlimitd-i'

    maml = MamlTrainer(MamlConfig(hidden_widths=(8,)), [InfiniteTaskDataset('sine', 0)])
    predictor = predictor_from_checkpoint(maml.checkpoint())
    assert isinstance(predictor, MamlPredictor) and not predictor.probabilistic
    prediction = predictor.predict(np.array([[0.0, 1.0]]), np.array([0.0, 1.0]), np.array([[2.0, 3.0, 4.0]]))
    assert prediction.mean.shape == (3,) and not prediction.has_covariance
    with pytest.raises(UnsupportedMetricError):
        predictor.nll(np.array([[0.0]]), np.array([0.0]))


def test_report_validation():
    with pytest.raises(ContractViolationError):
        EvalReport([])
    with pytest.raises(ContractViolationError):
        EvalReport([EvalRecord(1, auc=1.5)])
    with pytest.raises(ContractViolationError):
        EvalReport([EvalRecord(2), EvalRecord(1)])


def test_write_report_files(tmp_path):
    report = EvalReport([EvalRecord(1, 2.0, 0.5, auc=0.75), EvalRecord(5, 1.0, 0.25, auc=0.9)],
                        {'model': 'unlimitd-f', 'seed': 7})
    written = write_report(report, str(tmp_path), stem='run', plots=True)
    names = sorted(path.rsplit('/', 1)[-1] for path in written)
    assert names == ['run.csv', 'run.json', 'run_auc.svg', 'run_mse.svg']

    rows = (tmp_path / 'run.csv').read_text().splitlines()
    assert rows[0].split(',') == CSV_HEADER
    assert rows[1] == 'mse,1,2.0,0.5,unlimitd-f,7'
    assert rows[2] == 'auc,1,0.75,,unlimitd-f,7'

    loaded = read_report_json(str(tmp_path / 'run.json'))
    assert loaded.records == report.records
    assert loaded.metadata == report.metadata
    assert json.loads((tmp_path / 'run.json').read_text())['schema'] == 'unlimitd-report'


def test_svg_plots_are_reproducible(tmp_path):
    report = EvalReport([EvalRecord(1, 2.0, 0.5), EvalRecord(2, 1.5, 0.4)], {'model': 'maml', 'seed': 0})
    write_report(report, str(tmp_path / 'a'), plots=True)
    write_report(report, str(tmp_path / 'b'), plots=True)
    assert (tmp_path / 'a' / 'report_mse.svg').read_bytes() == (tmp_path / 'b' / 'report_mse.svg').read_bytes()


def test_aggregate_reports():
    reports = [EvalReport([EvalRecord(1, value, 0.1, auc=auc)], {'model': 'unlimitd-r', 'seed': 0})
               for value, auc in ((1.0, 0.6), (3.0, 0.8))]
    combined = aggregate_reports(reports)
    record = combined.records[0]
    assert record.mean_mse == 2.0
    assert record.ci95_mse == pytest.approx(1.96)
    assert record.auc == pytest.approx(0.7)
    assert record.mean_posterior_std is None
    assert combined.metadata['model'] == 'unlimitd-r-x2'

    with pytest.raises(ContractViolationError):
        aggregate_reports([reports[0], EvalReport([EvalRecord(2, 1.0, 0.1)])])
    with pytest.raises(ContractViolationError):
        aggregate_reports([])
