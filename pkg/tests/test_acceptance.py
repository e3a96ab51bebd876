"""
Desk-scale training runs checked against qualitative targets.

Slow: enable with UNLIMITD_RUN_SLOW=1.
"""
import numpy as np
import pytest
import torch

from src.checkpoint_store import to_mixture
from src.evaluation import (MamlPredictor, UnlimitdPredictor, cluster_accuracy, mse_eval, ood_auc,
                            uncertainty_curve)
from src.gp import prior_predictive
from src.maml import MamlConfig, meta_train, theta_from_checkpoint
from src.mixture import predict
from src.taskgen import InfiniteTaskDataset, TaskSampler
from src.trainer import TrainConfig, train, train_unlimitd_f

pytestmark = pytest.mark.slow

EVAL_SEED = 1000
N_TASKS = 200


@pytest.fixture(scope='module')
def sine_model():
    result = train_unlimitd_f(TrainConfig(variant='f', epochs=4000, seed=0), InfiniteTaskDataset('sine', 0))
    return UnlimitdPredictor(to_mixture(result.checkpoint), 'unlimitd-f')


@pytest.fixture(scope='module')
def maml_model():
    result = meta_train(MamlConfig(epochs=4000, seed=0), [InfiniteTaskDataset('sine', 0)])
    return MamlPredictor(*theta_from_checkpoint(result.checkpoint))


@pytest.fixture(scope='module')
def mixture_model():
    config = TrainConfig(variant='f', alpha=2, epochs=4000, seed=0)
    result = train(config, [InfiniteTaskDataset('sine', 0, cluster_index=0),
                            InfiniteTaskDataset('line', 0, cluster_index=1)])
    return UnlimitdPredictor(to_mixture(result.checkpoint), 'unlimitd-f-a2')


class AlternatingDataset:
    """Single-cluster view of sine and line tasks, half of every batch each"""
    mode = 'infinite'

    def __init__(self, seed):
        self.sines = InfiniteTaskDataset('sine', seed, cluster_index=0)
        self.lines = InfiniteTaskDataset('line', seed, cluster_index=1)

    def sample_tasks(self, count, K):
        half = count // 2
        return self.sines.sample_tasks(count - half, K) + self.lines.sample_tasks(half, K)

    def fim_inputs(self, *args, **kwargs):
        return self.sines.fim_inputs(*args, **kwargs)

    def get_state(self):
        return {'sines': self.sines.get_state(), 'lines': self.lines.get_state()}

    def set_state(self, state):
        self.sines.set_state(state['sines'])
        self.lines.set_state(state['lines'])


@pytest.fixture(scope='module')
def single_gp_on_both():
    result = train(TrainConfig(variant='f', epochs=4000, seed=0), [AlternatingDataset(0)])
    return UnlimitdPredictor(to_mixture(result.checkpoint), 'unlimitd-f-single')


def test_unimodal_fit(sine_model):
    sampler = TaskSampler(['sine'], EVAL_SEED)
    mse = mse_eval(sine_model, sampler, [1, 10], N_TASKS, 100)
    assert mse[10][0] < 0.5
    assert mse[10][0] < mse[1][0]


def test_unimodal_ood_detection(sine_model):
    auc = ood_auc(sine_model, TaskSampler(['sine'], EVAL_SEED), TaskSampler(['line', 'quadratic'], EVAL_SEED + 1),
                  K=10, n_each=N_TASKS)
    assert auc >= 0.95


def test_gp_beats_first_order_maml(sine_model, maml_model):
    sampler = TaskSampler(['sine'], EVAL_SEED)
    gp = mse_eval(sine_model, sampler, [1, 5], N_TASKS, 100)
    maml = mse_eval(maml_model, sampler, [1, 5], N_TASKS, 100)
    for K in (1, 5):
        assert gp[K][0] <= maml[K][0]


def test_uncertainty_shrinks_with_context(sine_model):
    sampler = TaskSampler(['sine'], EVAL_SEED)
    curve = uncertainty_curve(sine_model, sampler, [1, 5, 10], N_TASKS, 100)
    assert curve[1] >= curve[5] >= curve[10]

    below = total = 0
    model = sine_model.model
    for index in range(N_TASKS):
        episode = sampler.draw(index, 10, 0)
        with torch.no_grad():
            posterior = predict(model, episode.Xc, episode.Yc, episode.Xc)
            prior = prior_predictive(model.cluster_prior(0), episode.Xc)
        below += int((posterior.std() < prior.std()).sum())
        total += episode.Xc.shape[1]
    assert below / total >= 0.99


def test_mixture_identifies_clusters(mixture_model):
    accuracy = cluster_accuracy(mixture_model, TaskSampler(['sine', 'line'], EVAL_SEED), K=10, n_tasks=N_TASKS)
    assert accuracy >= 0.95


def test_mixture_beats_single_gp(mixture_model, single_gp_on_both):
    sampler = TaskSampler(['sine', 'line'], EVAL_SEED)
    mixture = mse_eval(mixture_model, sampler, [10], N_TASKS, 100)[10][0]
    single = mse_eval(single_gp_on_both, sampler, [10], N_TASKS, 100)[10][0]
    assert mixture <= single


def test_mixture_ood_detection(mixture_model):
    auc = ood_auc(mixture_model, TaskSampler(['sine', 'line'], EVAL_SEED), TaskSampler(['quadratic'], EVAL_SEED + 1),
                  K=10, n_each=N_TASKS)
    assert auc >= 0.9
    assert np.isfinite(auc)
