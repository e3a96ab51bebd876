"""
Command-line interface: generate-data, train, eval and predict.

Every command resolves its RunConfig (defaults < --config < --full-scale < flags) and
writes the resolved manifest next to its outputs: manifest.json in output directories,
<stem>.manifest.json beside single output files.
"""
import argparse
import csv
import logging
import os
import re
from typing import Any, Dict, List, Optional, Sequence

import torch

from config import defaults
from .checkpoint_store import Checkpoint, CheckpointStore, load_checkpoint
from .errors import (CheckpointError, ConfigError, ContractViolationError, DataFormatError,
                     NumericalConditioningError, UnsupportedMetricError)
from .evaluation import Predictor, aggregate_reports, evaluate, predictor_from_checkpoint, write_report
from .maml import meta_train
from .run_config import RunConfig, apply_threads, make_manifest, read_manifest, resolve_threads
from .taskgen import (FiniteTaskDataset, InfiniteTaskDataset, parse_kind, parse_kinds,
                      read_dataset_jsonl, write_dataset_jsonl)
from .trainer import Variant, train, train_projection_seeds

# Configure logging
logger = logging.getLogger(__name__)

PROJ_CHECKPOINT_PATTERN = re.compile(r"checkpoint_proj(\d+)\.json")


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _kind_list(text: str) -> List[str]:
    try:
        return [kind.value for kind in parse_kinds(text)]
    except ContractViolationError as e:
        raise argparse.ArgumentTypeError(str(e))


def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='JSON run configuration overriding config/default_run.json')
    common.add_argument('--full-scale', action='store_true', help='Use the full experiment budgets')
    common.add_argument('--threads', type=int, help=f'Worker threads (default: ${defaults.THREADS_ENV_VAR} or all cores)')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', action='store_true', help='Debug logging')
    verbosity.add_argument('--quiet', action='store_true', help='Warnings and errors only')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_arguments()
    parser = argparse.ArgumentParser(prog='unlimitd', description='Meta-learning GP priors over neural network functions')
    commands = parser.add_subparsers(dest='command', required=True)

    generate = commands.add_parser('generate-data', parents=[common], help='Write a finite task dataset')
    generate.add_argument('--cluster', type=str, help='Task cluster: sine, line or quadratic')
    generate.add_argument('--N', type=int, help='Number of tasks')
    generate.add_argument('--M', type=int, help='Points per task')
    generate.add_argument('--seed', type=int, help='Dataset seed')
    generate.add_argument('--noise-std', type=float, help='Observation noise std')
    generate.add_argument('--out', type=str, required=True, help='Output .jsonl path')
    generate.add_argument('--force', action='store_true', help='Overwrite an existing file')
    generate.set_defaults(handler=cmd_generate_data)

    trainp = commands.add_parser('train', parents=[common], help='Meta-train a model')
    trainp.add_argument('--model', choices=['unlimitd', 'maml'], default='unlimitd')
    trainp.add_argument('--variant', type=str.lower, choices=['i', 'r', 'f'], help='Prior covariance variant')
    trainp.add_argument('--alpha', type=int, help='Number of mixture clusters (defaults to the number of --cluster kinds)')
    trainp.add_argument('--cluster', type=_kind_list, help='Comma-separated task clusters, one per mixture component')
    trainp.add_argument('--dataset', type=str, nargs='+', help='Finite dataset file(s) from generate-data, one per cluster')
    trainp.add_argument('--epochs', type=int)
    trainp.add_argument('--s', type=int, help='Subspace size')
    trainp.add_argument('--K', type=int, help='Context points per task')
    trainp.add_argument('--n', type=int, help='Tasks per epoch')
    trainp.add_argument('--lr', type=float, help='Learning rate (meta learning rate for MAML)')
    trainp.add_argument('--seed', type=int)
    trainp.add_argument('--resume', type=str, help='Checkpoint to resume from')
    trainp.add_argument('--checkpoint-every', type=int, help='Save a checkpoint every N epochs')
    trainp.add_argument('--proj-seeds', type=int, help='Train this many variant-R models with different projections')
    trainp.add_argument('--out', type=str, required=True, help='Output directory')
    trainp.set_defaults(handler=cmd_train)

    evalp = commands.add_parser('eval', parents=[common], help='Evaluate trained checkpoints')
    evalp.add_argument('--checkpoint', type=str, nargs='+', required=True,
                       help='Checkpoint(s); several are aggregated into one report. With --proj-seeds, '
                            'the output directory of train --proj-seeds')
    evalp.add_argument('--proj-seeds', type=int,
                       help='Aggregate the first N variant-R projection-seed checkpoints of the --checkpoint directory')
    evalp.add_argument('--cluster', type=_kind_list, help='In-distribution task clusters')
    evalp.add_argument('--ood', type=_kind_list, help='Out-of-distribution clusters for the AUC metric')
    evalp.add_argument('--K-list', type=_int_list, dest='K_list', help='Comma-separated context sizes')
    evalp.add_argument('--uncertainty', action='store_true', help='Mean posterior std per K')
    evalp.add_argument('--plots', action='store_true', help='Also write SVG plots')
    evalp.add_argument('--n-tasks', type=int, dest='n_tasks')
    evalp.add_argument('--n-query', type=int, dest='n_query')
    evalp.add_argument('--n-each', type=int, dest='n_each')
    evalp.add_argument('--seed', type=int)
    evalp.add_argument('--stem', type=str, default='report', help='Report file name stem')
    evalp.add_argument('--out', type=str, required=True, help='Output directory')
    evalp.set_defaults(handler=cmd_eval)

    predictp = commands.add_parser('predict', parents=[common], help='Predict at query inputs from a context')
    predictp.add_argument('--checkpoint', type=str, required=True)
    predictp.add_argument('--context', type=str, required=True, help='CSV with header x,y')
    predictp.add_argument('--queries', type=str, required=True, help='CSV with header x')
    predictp.add_argument('--out', type=str, required=True, help='Output CSV path')
    predictp.set_defaults(handler=cmd_predict)
    return parser


def _resolve(args: argparse.Namespace, overrides: Dict[str, Any]) -> RunConfig:
    return RunConfig.load(args.config, args.full_scale, overrides)


def _save_manifest(out_dir: str, run_config: RunConfig, command: str,
                   name: str = defaults.MANIFEST_FILE) -> Dict[str, Any]:
    manifest = make_manifest(run_config, command)
    CheckpointStore(out_dir).save_manifest(manifest, name)
    return manifest


def _save_file_manifest(out_path: str, run_config: RunConfig, command: str) -> Dict[str, Any]:
    """Manifest of a single output file, saved next to it as <stem>.manifest.json"""
    out_path = os.path.abspath(out_path)
    stem = os.path.splitext(os.path.basename(out_path))[0]
    return _save_manifest(os.path.dirname(out_path), run_config, command, f"{stem}.{defaults.MANIFEST_FILE}")


def cmd_generate_data(args: argparse.Namespace) -> int:
    run_config = _resolve(args, {'data': {'cluster': args.cluster, 'N': args.N, 'M': args.M,
                                          'seed': args.seed, 'noise_std': args.noise_std}})
    data = run_config.data
    dataset = FiniteTaskDataset.generate(parse_kind(data['cluster']), data['N'], data['M'], data['seed'],
                                         data['noise_std'])
    write_dataset_jsonl(dataset, args.out, force=args.force)
    _save_file_manifest(args.out, run_config, 'generate-data')
    print(f"Wrote {args.out}: N={dataset.N} M={dataset.M} seed={dataset.seed}")
    return defaults.EXIT_OK


def _build_datasets(kinds: Sequence[str], dataset_paths: Optional[Sequence[str]], seed: int,
                    noise_std: float) -> List[Any]:
    """One dataset per cluster: finite from files when given, otherwise unlimited"""
    if dataset_paths:
        if len(dataset_paths) != len(kinds):
            raise ConfigError(f"Got {len(dataset_paths)} dataset files for {len(kinds)} clusters")
        return [read_dataset_jsonl(path) for path in dataset_paths]
    return [InfiniteTaskDataset(kind, seed, noise_std, cluster_index=index) for index, kind in enumerate(kinds)]


def _train_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    if args.model == 'maml':
        return {'maml': {'epochs': args.epochs, 'context_size': args.K, 'tasks_per_epoch': args.n,
                         'meta_lr': args.lr, 'seed': args.seed, 'checkpoint_every': args.checkpoint_every}}
    return {'train': {'variant': args.variant, 'epochs': args.epochs, 'subspace_size': args.s,
                      'context_size': args.K, 'tasks_per_epoch': args.n, 'learning_rate': args.lr,
                      'seed': args.seed, 'checkpoint_every': args.checkpoint_every}}


def cmd_train(args: argparse.Namespace) -> int:
    run_config = _resolve(args, _train_overrides(args))
    store = CheckpointStore(args.out)

    resume: Optional[Checkpoint] = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        if resume.model_kind != args.model:
            raise CheckpointError(f"--resume holds a {resume.model_kind} checkpoint but --model is {args.model}")
        kinds = resume.data.get('clusters') or [run_config.data['cluster']]
        dataset_paths = resume.data.get('datasets')
        data_seed = resume.data.get('seed', 0)
        logger.info(f"Resuming from {args.resume}: the checkpoint's training config is used")
    else:
        dataset_paths = args.dataset
        if args.cluster:
            kinds = args.cluster
        elif dataset_paths:
            kinds = [read_dataset_jsonl(path).specs[0].kind.value for path in dataset_paths]
        else:
            kinds = [parse_kind(run_config.data['cluster']).value]
        data_seed = run_config.train['seed'] if args.model == 'unlimitd' else run_config.maml['seed']

    alpha = args.alpha if args.alpha is not None else len(kinds)
    section = run_config.maml if args.model == 'maml' else run_config.train
    section['alpha'] = alpha
    if dataset_paths and args.n is None and resume is None:
        section['tasks_per_epoch'] = run_config.data['finite_tasks_per_epoch']

    # config validation runs before the alpha/cluster check
    config = run_config.maml_config() if args.model == 'maml' else run_config.train_config()
    if alpha != len(kinds):
        raise ConfigError(f"--alpha {alpha} does not match the {len(kinds)} cluster(s) {','.join(kinds)}")

    def make_datasets() -> List[Any]:
        return _build_datasets(kinds, dataset_paths, data_seed, run_config.data['noise_std'])

    data_info = {'clusters': list(kinds), 'datasets': list(dataset_paths) if dataset_paths else None,
                 'seed': data_seed}

    def on_checkpoint(checkpoint: Checkpoint) -> None:
        checkpoint.data = {**checkpoint.data, **data_info}
        store.save_periodic(checkpoint)

    _save_manifest(args.out, run_config, 'train')

    if args.model == 'maml':
        result = meta_train(config, make_datasets(), on_checkpoint, resume)
        result.checkpoint.data = {**result.checkpoint.data, **data_info}
        path = store.save_checkpoint(result.checkpoint)
        store.save_trace(result.loss_trace, 'loss_trace.csv')
        print(f"Saved MAML checkpoint to {path}")
        return defaults.EXIT_OK

    if args.proj_seeds:
        if config.variant != Variant.RANDOM:
            raise ConfigError("--proj-seeds only applies to --variant r")
        seeds = [config.seed + index for index in range(args.proj_seeds)]
        for seed, result in zip(seeds, train_projection_seeds(config, make_datasets, seeds)):
            result.checkpoint.data = {**result.checkpoint.data, **data_info}
            path = store.save_checkpoint(result.checkpoint, f"checkpoint_proj{seed}.json")
            store.save_trace(result.nll_trace, f"nll_trace_proj{seed}.csv")
            print(f"Saved checkpoint for projection seed {seed} to {path}")
        return defaults.EXIT_OK

    result = train(config, make_datasets(), on_checkpoint, resume)
    if result.boundary_checkpoint is not None:
        result.boundary_checkpoint.data = {**result.boundary_checkpoint.data, **data_info}
        store.save_checkpoint(result.boundary_checkpoint, 'boundary_checkpoint.json')
    result.checkpoint.data = {**result.checkpoint.data, **data_info}
    path = store.save_checkpoint(result.checkpoint)
    store.save_trace(result.nll_trace)
    print(f"Saved checkpoint to {path}")
    return defaults.EXIT_OK


def _log_checkpoint_manifest(checkpoint_path: str) -> None:
    manifest_path = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), defaults.MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        return
    try:
        manifest = read_manifest(manifest_path)
        logger.info(f"{checkpoint_path}: trained at {manifest['created_at']} (build {manifest['build_id']})")
    except (OSError, ValueError) as e:
        logger.warning(f"Ignoring unreadable manifest next to {checkpoint_path}: {str(e)}")


def projection_checkpoint_paths(run_dir: str, count: int) -> List[str]:
    """The first count checkpoint_proj<seed>.json files of a train --proj-seeds run, by seed"""
    if count < 1:
        raise ConfigError(f"--proj-seeds must be at least 1, got {count}")
    if not os.path.isdir(run_dir):
        raise ConfigError(f"--proj-seeds expects the train output directory, got {run_dir}")
    found = []
    for name in os.listdir(run_dir):
        match = PROJ_CHECKPOINT_PATTERN.fullmatch(name)
        if match:
            found.append((int(match.group(1)), os.path.join(run_dir, name)))
    if len(found) < count:
        raise ConfigError(f"{run_dir} holds {len(found)} projection-seed checkpoint(s), {count} requested")
    return [path for _, path in sorted(found)[:count]]


def cmd_eval(args: argparse.Namespace) -> int:
    run_config = _resolve(args, {'eval': {'K_list': args.K_list, 'n_tasks': args.n_tasks, 'n_query': args.n_query,
                                          'n_each': args.n_each, 'seed': args.seed, 'ood': args.ood,
                                          'uncertainty': args.uncertainty or None, 'plots': args.plots or None}})
    settings = run_config.eval

    paths = args.checkpoint
    if args.proj_seeds is not None:
        if len(paths) != 1:
            raise ConfigError("--proj-seeds takes a single --checkpoint directory")
        paths = projection_checkpoint_paths(paths[0], args.proj_seeds)
    checkpoints = [load_checkpoint(path) for path in paths]
    for path in paths:
        _log_checkpoint_manifest(path)
    if args.proj_seeds is not None and any(c.variant != Variant.RANDOM.value for c in checkpoints):
        raise ConfigError("--proj-seeds only applies to variant-R checkpoints")
    if len({(c.model_kind, c.network) for c in checkpoints}) > 1:
        raise CheckpointError("Checkpoints to aggregate must hold the same kind of model and network")

    kinds = args.cluster or checkpoints[0].data.get('clusters') or [run_config.data['cluster']]
    predictors: List[Predictor] = []
    for index, checkpoint in enumerate(checkpoints):
        predictor = predictor_from_checkpoint(checkpoint)
        if len(checkpoints) > 1:
            predictor.name = f"{predictor.name}-{index}"
        predictors.append(predictor)
    if settings['uncertainty'] and not predictors[0].probabilistic:
        raise UnsupportedMetricError(f"--uncertainty needs a probabilistic model, {predictors[0].name} is not")

    alpha = checkpoints[0].alpha if checkpoints[0].model_kind == 'unlimitd' else 1
    report_hash = {'config_hash': run_config.hash}
    reports = [evaluate(predictor, kinds, settings['K_list'], settings['n_tasks'], settings['n_query'],
                        settings['seed'], ood_kinds=settings['ood'] or None, n_each=settings['n_each'],
                        uncertainty=settings['uncertainty'], clusters=alpha > 1 and len(kinds) == alpha,
                        metadata=report_hash)
               for predictor in predictors]

    written = []
    if len(reports) > 1:
        for index, report in enumerate(reports):
            written += write_report(report, args.out, f"{args.stem}_model{index}")
        final = aggregate_reports(reports)
    else:
        final = reports[0]
    written += write_report(final, args.out, args.stem, plots=settings['plots'])
    _save_manifest(args.out, run_config, 'eval')
    for path in written:
        print(path)
    return defaults.EXIT_OK


def _column_names(prefix: str, width: int) -> List[str]:
    return [prefix] if width == 1 else [f"{prefix}{i}" for i in range(width)]


def read_columns_csv(path: str, columns: Sequence[str]) -> List[List[float]]:
    """Rows of the named float columns; malformed rows are reported by line number"""
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None:
                raise DataFormatError("missing header", path=path, line=1)
            header = [name.strip() for name in header]
            missing = [name for name in columns if name not in header]
            if missing:
                raise DataFormatError(f"header lacks column(s) {missing}", path=path, line=1)
            positions = [header.index(name) for name in columns]
            rows = []
            for row in reader:
                if not any(cell.strip() for cell in row):
                    continue
                try:
                    rows.append([float(row[position]) for position in positions])
                except (IndexError, ValueError) as e:
                    raise DataFormatError(f"bad row {row}: {str(e)}", path=path, line=reader.line_num)
            return rows
    except OSError as e:
        logger.error(f"Error reading {path}: {str(e)}")
        raise


def cmd_predict(args: argparse.Namespace) -> int:
    run_config = _resolve(args, {})
    checkpoint = load_checkpoint(args.checkpoint)
    predictor = predictor_from_checkpoint(checkpoint)
    n_x, n_y = checkpoint.network.input_dim, checkpoint.network.output_dim
    x_columns, y_columns = _column_names('x', n_x), _column_names('y', n_y)

    context = read_columns_csv(args.context, x_columns + y_columns)
    queries = read_columns_csv(args.queries, x_columns)

    mean_columns = _column_names('mean', n_y)
    std_columns = _column_names('std', n_y) if predictor.probabilistic else []
    with_cluster = checkpoint.model_kind == 'unlimitd' and checkpoint.alpha > 1
    header = x_columns + mean_columns + std_columns + (['cluster'] if with_cluster else [])

    rows = []
    if queries:
        Xq = torch.tensor(queries, dtype=torch.float64).T
        if context:
            table = torch.tensor(context, dtype=torch.float64)
            Xc, Yc = table[:, :n_x].T, table[:, n_x:].T
            prediction = predictor.predict(Xc, Yc, Xq)
        elif predictor.probabilistic:
            prediction = predictor.prior(Xq)
        else:
            raise DataFormatError("empty context: MAML needs context points to adapt", path=args.context, line=2)
        means = prediction.mean.reshape(-1, n_y).tolist()
        stds = prediction.std().reshape(-1, n_y).tolist()
        for point, mean, std in zip(queries, means, stds):
            row = [repr(v) for v in point] + [repr(v) for v in mean]
            if std_columns:
                row += [repr(v) for v in std]
            if with_cluster:
                row.append('' if prediction.cluster is None else prediction.cluster)
            rows.append(row)

    try:
        with open(args.out, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        logger.error(f"Error writing predictions to {args.out}: {str(e)}")
        raise
    _save_file_manifest(args.out, run_config, 'predict')
    print(f"Wrote {len(rows)} predictions to {args.out}")
    return defaults.EXIT_OK


def _configure_verbosity(args: argparse.Namespace) -> None:
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    elif args.quiet:
        logging.getLogger().setLevel(logging.WARNING)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run the command and map failures to exit codes"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return defaults.EXIT_OK if e.code in (0, None) else defaults.EXIT_USAGE

    _configure_verbosity(args)
    try:
        apply_threads(resolve_threads(args.threads))
        return args.handler(args)
    except (ConfigError, ContractViolationError, UnsupportedMetricError, CheckpointError) as e:
        logger.error(f"Error: {str(e)}")
        return defaults.EXIT_USAGE
    except NumericalConditioningError as e:
        logger.error(f"Numerical failure: {str(e)}")
        return defaults.EXIT_NUMERICAL
    except (OSError, DataFormatError) as e:
        logger.error(f"I/O failure: {str(e)}")
        return defaults.EXIT_IO
