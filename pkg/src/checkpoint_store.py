import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from config import defaults
from .diffnet import DTYPE, NetworkSpec, ParamVector
from .errors import CheckpointError
from .mixture import ClusterParams, MixtureModel

# Configure logging
logger = logging.getLogger(__name__)

MODEL_KINDS = ('unlimitd', 'maml')

# Training phases recorded in checkpoints
PHASE_IDENTITY = 'identity'
PHASE_PROJECTED = 'projected'
PHASE_MAML = 'maml'
PHASES = (PHASE_IDENTITY, PHASE_PROJECTED, PHASE_MAML)

ARRAY_FIELDS = ('theta0', 'mu', 'Q', 's_vec', 'eigenvalues')


@dataclass(eq=False)
class Checkpoint:
    """Everything needed to use a trained model or resume its training bit-exactly"""
    model_kind: str
    network: NetworkSpec
    theta0: np.ndarray
    sigma_eps: float
    epoch: int
    phase: str
    config: Dict[str, Any] = field(default_factory=dict)
    variant: Optional[str] = None
    mu: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    s_vec: Optional[np.ndarray] = None
    eigenvalues: Optional[np.ndarray] = None
    adam: Optional[Dict[str, Any]] = None
    rng_states: List[Dict[str, Any]] = field(default_factory=list)
    nll_trace: List[Tuple[int, float]] = field(default_factory=list)
    consecutive_failures: int = 0
    fim_points: Optional[int] = None
    data: Dict[str, Any] = field(default_factory=dict)

    @property
    def alpha(self) -> int:
        return 1 if self.mu is None else self.mu.shape[0]

    @property
    def theta(self) -> ParamVector:
        return ParamVector(torch.as_tensor(self.theta0, dtype=DTYPE), self.network)


def _encode_array(value: Optional[np.ndarray]) -> Optional[Dict[str, Any]]:
    if value is None:
        return None
    value = np.asarray(value, dtype=np.float64)
    # repr of a float64 round-trips exactly through JSON
    return {'shape': list(value.shape), 'data': value.reshape(-1).tolist()}


def _decode_array(value: Optional[Dict[str, Any]]) -> Optional[np.ndarray]:
    if value is None:
        return None
    return np.array(value['data'], dtype=np.float64).reshape(value['shape'])


def _encode_adam(adam: Optional[Dict[str, Any]]) -> Optional[Dict[str, Any]]:
    if adam is None:
        return None
    return {'t': adam['t'],
            'm': {name: _encode_array(arr) for name, arr in adam['m'].items()},
            'v': {name: _encode_array(arr) for name, arr in adam['v'].items()}}


def _decode_adam(adam: Optional[Dict[str, Any]]) -> Optional[Dict[str, Any]]:
    if adam is None:
        return None
    return {'t': int(adam['t']),
            'm': {name: _decode_array(arr) for name, arr in adam['m'].items()},
            'v': {name: _decode_array(arr) for name, arr in adam['v'].items()}}


def checkpoint_to_dict(checkpoint: Checkpoint) -> Dict[str, Any]:
    data = {
        'version': defaults.CHECKPOINT_VERSION,
        'model_kind': checkpoint.model_kind,
        'network': checkpoint.network.to_dict(),
        'variant': checkpoint.variant,
        'phase': checkpoint.phase,
        'epoch': checkpoint.epoch,
        'sigma_eps': checkpoint.sigma_eps,
        'config': checkpoint.config,
        'adam': _encode_adam(checkpoint.adam),
        'rng_states': checkpoint.rng_states,
        'nll_trace': [[int(epoch), float(value)] for epoch, value in checkpoint.nll_trace],
        'consecutive_failures': checkpoint.consecutive_failures,
        'fim_points': checkpoint.fim_points,
        'data': checkpoint.data,
    }
    for name in ARRAY_FIELDS:
        data[name] = _encode_array(getattr(checkpoint, name))
    return data


def verify_checkpoint_integrity(data: Any) -> bool:
    """
    Verify the structure of a decoded checkpoint document

    Args:
        data (dict): Parsed JSON content

    Returns:
        bool: True if the checkpoint is usable, False otherwise
    """
    try:
        if not isinstance(data, dict):
            return False
        required_fields = ['version', 'model_kind', 'network', 'phase', 'epoch', 'sigma_eps', 'theta0']
        if not all(name in data for name in required_fields):
            return False
        if data['version'] != defaults.CHECKPOINT_VERSION:
            return False
        if data['model_kind'] not in MODEL_KINDS or data['phase'] not in PHASES:
            return False

        spec = NetworkSpec.from_dict(data['network'])
        P = spec.param_count
        if data['theta0']['shape'] != [P]:
            return False
        if data.get('mu') is not None and (len(data['mu']['shape']) != 2 or data['mu']['shape'][1] != P):
            return False
        if data.get('Q') is not None:
            if data['Q']['shape'][1] != P or data.get('s_vec') is None:
                return False
            if data['s_vec']['shape'] != [data['mu']['shape'][0], data['Q']['shape'][0]]:
                return False
        return True
    except Exception:
        return False


def checkpoint_from_dict(data: Dict[str, Any]) -> Checkpoint:
    if not verify_checkpoint_integrity(data):
        raise CheckpointError("Invalid checkpoint structure")
    return Checkpoint(
        model_kind=data['model_kind'],
        network=NetworkSpec.from_dict(data['network']),
        theta0=_decode_array(data['theta0']),
        sigma_eps=float(data['sigma_eps']),
        epoch=int(data['epoch']),
        phase=data['phase'],
        config=data.get('config') or {},
        variant=data.get('variant'),
        mu=_decode_array(data.get('mu')),
        Q=_decode_array(data.get('Q')),
        s_vec=_decode_array(data.get('s_vec')),
        eigenvalues=_decode_array(data.get('eigenvalues')),
        adam=_decode_adam(data.get('adam')),
        rng_states=data.get('rng_states') or [],
        nll_trace=[(int(epoch), float(value)) for epoch, value in data.get('nll_trace') or []],
        consecutive_failures=int(data.get('consecutive_failures', 0)),
        fim_points=data.get('fim_points'),
        data=data.get('data') or {},
    )


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    """Write the checkpoint as JSON"""
    try:
        data = checkpoint_to_dict(checkpoint)
        if not verify_checkpoint_integrity(data):
            raise CheckpointError("Refusing to save an invalid checkpoint")
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f)
        logger.info(f"Saved {checkpoint.model_kind} checkpoint at epoch {checkpoint.epoch} to {path}")
    except OSError as e:
        logger.error(f"Error saving checkpoint to {path}: {str(e)}")
        raise


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        logger.error(f"Error decoding checkpoint {path}: {str(e)}")
        raise CheckpointError(f"{path}: not a JSON checkpoint ({str(e)})")
    except OSError as e:
        logger.error(f"Error loading checkpoint {path}: {str(e)}")
        raise
    try:
        return checkpoint_from_dict(data)
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {str(e)}")


def to_mixture(checkpoint: Checkpoint) -> MixtureModel:
    """Rebuild the GP mixture described by an UnLiMiTD checkpoint"""
    if checkpoint.model_kind != 'unlimitd':
        raise CheckpointError(f"Checkpoint holds a {checkpoint.model_kind} model, not an UnLiMiTD model")
    if checkpoint.mu is None:
        raise CheckpointError("Checkpoint has no prior mean")
    Q = None if checkpoint.Q is None else torch.as_tensor(checkpoint.Q, dtype=DTYPE)
    clusters = []
    for index in range(checkpoint.alpha):
        s_vec = None if Q is None else torch.as_tensor(checkpoint.s_vec[index], dtype=DTYPE)
        clusters.append(ClusterParams(torch.as_tensor(checkpoint.mu[index], dtype=DTYPE), s_vec))
    return MixtureModel(checkpoint.theta, Q, clusters, checkpoint.sigma_eps)


def write_trace_csv(trace: Sequence[Tuple[int, float]], path: str) -> None:
    """NLL trace as CSV with header epoch,nll"""
    try:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['epoch', 'nll'])
            for epoch, value in trace:
                writer.writerow([epoch, repr(float(value))])
    except OSError as e:
        logger.error(f"Error writing NLL trace to {path}: {str(e)}")
        raise


class CheckpointStore:
    """Manages checkpoints, NLL traces and the run manifest of one output directory"""

    def __init__(self, out_dir: str):
        """Initialize with the output directory, creating it when missing"""
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def save_checkpoint(self, checkpoint: Checkpoint, name: str = 'checkpoint.json') -> str:
        path = self.path(name)
        save_checkpoint(checkpoint, path)
        return path

    def save_periodic(self, checkpoint: Checkpoint) -> str:
        return self.save_checkpoint(checkpoint, f"checkpoint_epoch{checkpoint.epoch:06d}.json")

    def save_trace(self, trace: Sequence[Tuple[int, float]], name: str = 'nll_trace.csv') -> str:
        path = self.path(name)
        write_trace_csv(trace, path)
        return path

    def save_manifest(self, manifest: Dict[str, Any], name: str = defaults.MANIFEST_FILE) -> str:
        """
        Save the resolved run manifest

        Args:
            manifest (dict): config, config_hash, created_at and build_id
            name (str): File name inside the output directory

        Returns:
            str: Path of the written manifest
        """
        path = self.path(name)
        try:
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(manifest, f, indent=2, sort_keys=True)
            logger.debug(f"Saved run manifest to {path}")
            return path
        except OSError as e:
            logger.error(f"Error saving manifest to {path}: {str(e)}")
            raise
