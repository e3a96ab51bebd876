import json
import os

import numpy as np
import pytest

from config import defaults
from src.checkpoint_store import (CheckpointStore, checkpoint_from_dict, checkpoint_to_dict, load_checkpoint,
                                  save_checkpoint, to_mixture, verify_checkpoint_integrity, write_trace_csv)
from src.errors import CheckpointError
from src.maml import MamlConfig, MamlTrainer
from src.mixture import mixture_nll
from src.taskgen import InfiniteTaskDataset
from src.trainer import MetaTrainer, TrainConfig


@pytest.fixture
def mixture_checkpoint():
    config = TrainConfig(variant='r', alpha=2, epochs=2, tasks_per_epoch=4, context_size=3, subspace_size=3,
                         hidden_widths=(8,))
    trainer = MetaTrainer(config, [InfiniteTaskDataset('sine', 0, cluster_index=0),
                                   InfiniteTaskDataset('line', 0, cluster_index=1)])
    trainer.run()
    return trainer.checkpoint()


def test_round_trip_preserves_every_array(tmp_path, mixture_checkpoint):
    path = str(tmp_path / 'checkpoint.json')
    save_checkpoint(mixture_checkpoint, path)
    loaded = load_checkpoint(path)
    for name in ('theta0', 'mu', 'Q', 's_vec'):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(mixture_checkpoint, name))
    assert loaded.network == mixture_checkpoint.network
    assert loaded.alpha == 2 and loaded.epoch == 2
    assert loaded.nll_trace == mixture_checkpoint.nll_trace
    np.testing.assert_array_equal(loaded.adam['m']['s'], mixture_checkpoint.adam['m']['s'])


def test_rebuilt_mixture_scores_like_the_original(mixture_checkpoint):
    loaded = checkpoint_from_dict(json.loads(json.dumps(checkpoint_to_dict(mixture_checkpoint))))
    X = np.array([[-1.0, 0.5, 2.0]])
    Y = np.array([0.2, -0.1, 0.4])
    assert mixture_nll(to_mixture(loaded), X, Y).item() == mixture_nll(to_mixture(mixture_checkpoint), X, Y).item()


def test_integrity_check_rejects_broken_documents(mixture_checkpoint):
    good = checkpoint_to_dict(mixture_checkpoint)
    assert verify_checkpoint_integrity(good)
    assert not verify_checkpoint_integrity([])

    for mutate in (lambda d: d.pop('theta0'),
                   lambda d: d.update(version=defaults.CHECKPOINT_VERSION + 1),
                   lambda d: d.update(model_kind='svm'),
                   lambda d: d['theta0'].update(shape=[3]),
                   lambda d: d['s_vec'].update(shape=[2, 4]),
                   lambda d: d.update(network={'layer_widths': []})):
        broken = json.loads(json.dumps(good))
        mutate(broken)
        assert not verify_checkpoint_integrity(broken)
        with pytest.raises(CheckpointError):
            checkpoint_from_dict(broken)


def test_load_reports_non_json_and_missing_files(tmp_path):
    path = tmp_path / 'garbage.json'
    path.write_text('{not json')
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / 'missing.json'))


def test_maml_checkpoint_is_not_a_mixture():
    checkpoint = MamlTrainer(MamlConfig(hidden_widths=(8,)), [InfiniteTaskDataset('sine', 0)]).checkpoint()
    assert checkpoint.phase == 'maml'
    with pytest.raises(CheckpointError):
        to_mixture(checkpoint)


def test_store_layout(tmp_path, mixture_checkpoint):
    store = CheckpointStore(str(tmp_path / 'run'))
    assert store.save_checkpoint(mixture_checkpoint).endswith('checkpoint.json')
    assert os.path.basename(store.save_periodic(mixture_checkpoint)) == 'checkpoint_epoch000002.json'
    trace_path = store.save_trace([(1, 2.5), (2, 0.1)])
    assert open(trace_path).read() == 'epoch,nll\n1,2.5\n2,0.1\n'
    manifest_path = store.save_manifest({'config_hash': 'abc', 'command': 'train'})
    assert json.load(open(manifest_path)) == {'command': 'train', 'config_hash': 'abc'}


def test_trace_csv_keeps_full_precision(tmp_path):
    path = str(tmp_path / 'trace.csv')
    write_trace_csv([(1, 1.0 / 3.0)], path)
    value = float(open(path).read().splitlines()[1].split(',')[1])
    assert value == 1.0 / 3.0
