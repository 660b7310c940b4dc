# /// script
# requires-python = "==3.12.*"
# dependencies = [
#   "humanize~=4.14.0",
#   "numpy~=2.2.0",
#   "scipy~=1.15.0",
#   "tqdm~=4.67.0",
# ]
# ///


"""
Runs the semantic expression pipeline: topology building, oracle data generation, semantic and
capture model training, code optimization, retargeting, capture, benchmarking and ablations.

Usage:
  uv run ./expression_pipeline.py oracle gen --config oracle.json --out data/
  uv run ./expression_pipeline.py train semantic --config sem.json --data data/ --out models/semantic.bin
  uv run ./expression_pipeline.py synth gen --semantic models/semantic.bin --data data/ --config synth.json --out synth/
  uv run ./expression_pipeline.py train capture --synth synth/ --real realish/ --config cap.json --out models/capture.bin
  uv run ./expression_pipeline.py capture --capture models/capture.bin --semantic models/semantic.bin \\
      --image synth/train/000000.pgm --neutral data/identities/heldout/020/neutral.obj --out mesh.obj
  uv run ./expression_pipeline.py bench --manifest run.json --out report.csv
  uv run ./expression_pipeline.py ablate --suite no-id --out ablations/no-id/

Every subcommand accepts `--seed`, `--threads` (falls back to the EXPRESSION_THREADS env-var, then 1)
and `--progress`, and writes a `run.log.json` next to its output.
Failures print one JSON line `{"error", "message", "command"}` to stderr; exit code 2 for configuration
and usage errors, 1 for runtime errors.
"""

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, NoReturn

import humanize
import numpy as np

import ablations
import capture_model as cm
import semantic_model as sm
import synth_gen as sg
from autodiff import AutodiffError
from bench import BenchError, emit_report, run_manifest
from geometry_core import (
    GeometryError,
    Mesh,
    Topology,
    build_topology_from_files,
    load_mesh,
    load_topology,
    save_mesh,
    save_topology,
)
from strict_config import ConfigError, config_hash, config_to_dict, load_config

log_level_name: str = os.getenv('LOG_LEVEL', 'INFO').upper()
log_level = getattr(
    logging, log_level_name, logging.INFO
)  # maps the string name to the corresponding logging level constant; defaults to INFO
logging.basicConfig(
    level=log_level,
    format='[%(asctime)s] %(levelname)s [%(module)s-%(funcName)s()::%(lineno)d] %(message)s',
    datefmt='%d/%b/%Y %H:%M:%S',
)
log = logging.getLogger(__name__)

THREADS_ENV_VAR: str = 'EXPRESSION_THREADS'
RUN_LOG_NAME: str = 'run.log.json'
VERSIONED_PACKAGES: tuple[str, ...] = ('humanize', 'numpy', 'scipy', 'tqdm')
RUNTIME_ERRORS: tuple[type[Exception], ...] = (
    AutodiffError,
    BenchError,
    cm.CaptureError,
    GeometryError,
    sg.SynthError,
    sm.SemanticModelError,
)


@dataclass
class CommandResult:
    """
    What a subcommand hands back to `main()`: where to put the run log, what to record, what to print.
    """

    log_dir: Path
    config: dict[str, Any]
    seed: int | None
    summary: str
    outputs: list[Path] = field(default_factory=list)


Handler = Callable[[argparse.Namespace, int], CommandResult]


## -- shared helpers ----------------------------------------------------


def resolve_threads(flag_value: int | None) -> int:
    """
    Returns the `--threads` value, else the EXPRESSION_THREADS env-var, else 1.

    Called by `main()`.
    """
    if flag_value is not None:
        threads: int = flag_value
    else:
        raw: str = os.getenv(THREADS_ENV_VAR, '1').strip() or '1'
        try:
            threads = int(raw)
        except ValueError as exc:
            raise ConfigError('invalid_threads', f'{THREADS_ENV_VAR} must be an integer, got ``{raw}``') from exc
    if threads < 1:
        raise ConfigError('invalid_threads', f'thread count must be >= 1, got {threads}')
    return threads


def with_seed[T](config: T, seed: int | None) -> T:
    """
    Applies a `--seed` override to a config dataclass that has a `seed` field.
    """
    if seed is None:
        return config
    return dataclasses.replace(config, seed=seed)  # type: ignore[type-var]


def package_versions() -> dict[str, str]:
    versions: dict[str, str] = {'python': platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = 'unknown'
    return versions


def write_run_log(command: str, argv: list[str], threads: int, result: CommandResult) -> Path:
    """
    Writes `run.log.json` (no timestamps, so reruns are byte-identical).

    Called by `main()`.
    """
    payload: dict[str, Any] = {
        'argv': argv,
        'command': command,
        'config': result.config,
        'config_hash': config_hash(result.config),
        'outputs': [str(p) for p in result.outputs],
        'seed': result.seed,
        'threads': threads,
        'versions': package_versions(),
    }
    result.log_dir.mkdir(parents=True, exist_ok=True)
    path: Path = result.log_dir / RUN_LOG_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return path


def output_size(paths: list[Path]) -> str:
    total: int = 0
    for path in paths:
        if path.is_file():
            total += path.stat().st_size
        elif path.is_dir():
            total += sum(p.stat().st_size for p in path.rglob('*') if p.is_file())
    return humanize.naturalsize(total)


def topology_for_model(model_path: Path, topology_path: Path | None) -> Topology:
    """
    Loads the topology named by `--topology`, else the `topology.json` stored next to the model.
    """
    path: Path = topology_path if topology_path is not None else Path(model_path).parent / 'topology.json'
    if not path.exists():
        raise ConfigError('missing_file', f'no topology at ``{path}``; pass --topology')
    return load_topology(path)


def load_semantic(model_path: Path, topology_path: Path | None) -> sm.SemanticModel:
    return sm.load_semantic_model(model_path, topology_for_model(model_path, topology_path))


def read_code_file(path: Path, model: sm.SemanticModel) -> sm.ExpressionCode:
    """
    Reads a `code.json` written by `optimize-code`.
    """
    data: dict[str, Any] = json.loads(Path(path).read_text(encoding='utf-8'))
    unknown: list[str] = sorted(set(data) - {'code', 'topology_id', 'variant'})
    if unknown:
        raise ConfigError('unknown_config_key', f'{path}: unknown key(s) {unknown}')
    if data.get('topology_id', model.topology.topology_id) != model.topology.topology_id:
        raise sm.SemanticModelError('topology_mismatch', f'{path}: code was optimized on another topology')
    return sm.ExpressionCode(values=np.asarray(data['code'], dtype=np.float64))


def oracle_pools(model: sm.SemanticModel, dataset: sg.OracleDataset, pool: str) -> tuple[np.ndarray, list[int], np.ndarray]:
    """
    Returns (neutral pool, neutral ids, code pool) for capture-set sampling.

    The `train` pool draws neutrals from train and neutral-only identities; `heldout` uses held-out ones only.
    Codes are the encodings of the pool identities' expressive meshes.
    """
    splits: tuple[str, ...] = ('train', 'neutral_only') if pool == 'train' else ('heldout',)
    identities: list[sg.OracleIdentity] = [i for i in dataset.identities if i.split in splits]
    expressive: list[np.ndarray] = [i.expressives for i in identities if i.expressives.shape[0]]
    if not identities or not expressive:
        raise sg.SynthError('empty_pool', f'oracle data has no ``{pool}`` identities with expressions')
    codes: np.ndarray = sm.encode_expression_batch(model, np.concatenate(expressive))
    return np.stack([i.neutral for i in identities]), [i.identity_seed for i in identities], codes


## -- subcommands -------------------------------------------------------


def run_topology_build(args: argparse.Namespace, threads: int) -> CommandResult:
    topology: Topology = build_topology_from_files(args.mesh, args.spiral_len, args.masks)
    out: Path = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_topology(out, topology)
    masks: str | None = str(args.masks) if args.masks else None
    config: dict[str, Any] = {'mesh': str(args.mesh), 'masks': masks, 'spiral_len': args.spiral_len}
    summary: str = f'topology ``{topology.topology_id}``; vertices, {topology.vertex_count}; written to {out}'
    return CommandResult(out.parent, config, None, summary, [out])


def run_oracle_gen(args: argparse.Namespace, threads: int) -> CommandResult:
    config: sg.OracleConfig = with_seed(load_config(sg.OracleConfig, args.config), args.seed)
    family: sg.OracleFamily = sg.build_oracle_family(config.family)
    dataset: sg.OracleDataset = sg.generate_oracle_dataset(
        family,
        config.n_identities,
        config.n_expressions,
        config.seed,
        n_heldout=config.n_heldout,
        n_neutral_only=config.n_neutral_only,
    )
    out: Path = Path(args.out)
    manifest: Path = sg.write_oracle_dataset(out, dataset, config)
    summary: str = f'oracle dataset; identities, {len(dataset.identities)}; manifest at {manifest}'
    return CommandResult(out, config_to_dict(config), config.seed, summary, [out])


def run_train_semantic(args: argparse.Namespace, threads: int) -> CommandResult:
    config: sm.SemanticTrainConfig = with_seed(load_config(sm.SemanticTrainConfig, args.config), args.seed)
    dataset: sg.OracleDataset = sg.load_oracle_dataset(args.data)
    result: sm.SemanticTrainResult = sm.train_semantic(dataset.semantic_dataset(), config, args.progress)
    out: Path = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sm.save_semantic_model(out, result.model, result.adam_state)
    topology_path: Path = out.parent / 'topology.json'
    save_topology(topology_path, result.model.topology)
    curve_path: Path = out.with_suffix('.loss.csv')
    sm.save_loss_curve(curve_path, result.curve)
    final: float = result.curve[-1]['total'] if result.curve else float('nan')
    summary: str = f'semantic model ({config.variant}) written to {out}; final loss, {final:.6g}'
    return CommandResult(out.parent, config_to_dict(config), config.seed, summary, [out, topology_path, curve_path])


def run_optimize_code(args: argparse.Namespace, threads: int) -> CommandResult:
    model: sm.SemanticModel = load_semantic(args.model, args.topology)
    neutral: Mesh = load_mesh(args.neutral, model.topology)
    expressive: Mesh = load_mesh(args.expressive, model.topology)
    code: sm.ExpressionCode = sm.optimize_code(model, neutral, expressive, args.iters, args.lr)
    reconstruction: Mesh = sm.decode_mesh(model, code, neutral)
    error: float = sm.mean_vertex_error(reconstruction, expressive)
    payload: dict[str, Any] = {
        'code': code.values.tolist(),
        'topology_id': model.topology.topology_id,
        'variant': model.config.variant,
    }
    out: Path = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2) + '\n', encoding='utf-8')
    config: dict[str, Any] = {
        'model': str(args.model),
        'neutral': str(args.neutral),
        'expressive': str(args.expressive),
        'iters': args.iters,
        'lr': args.lr,
    }
    summary: str = f'code written to {out}; reconstruction error, {error:.6g} mm'
    return CommandResult(out.parent, config, None, summary, [out])


def run_retarget(args: argparse.Namespace, threads: int) -> CommandResult:
    model: sm.SemanticModel = load_semantic(args.model, args.topology)
    code: sm.ExpressionCode = read_code_file(args.code, model)
    target: Mesh = load_mesh(args.target_neutral, model.topology)
    out: Path = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(out, sm.retarget(model, code, target))
    config: dict[str, Any] = {'model': str(args.model), 'code': str(args.code), 'target_neutral': str(args.target_neutral)}
    return CommandResult(out.parent, config, None, f'retargeted mesh written to {out}', [out])


def run_synth_gen(args: argparse.Namespace, threads: int) -> CommandResult:
    config: sg.SynthConfig = with_seed(load_config(sg.SynthConfig, args.config), args.seed)
    model: sm.SemanticModel = load_semantic(args.semantic, args.topology)
    dataset: sg.OracleDataset = sg.load_oracle_dataset(args.data)
    if dataset.family.topology.topology_id != model.topology.topology_id:
        raise sm.SemanticModelError('topology_mismatch', f'{args.data} and {args.semantic} use different topologies')
    neutrals, neutral_ids, codes = oracle_pools(model, dataset, args.pool)
    samples: list[sg.SynthSample] = sg.sample_synth_capture_set(
        model, neutrals, neutral_ids, codes, config, threads, args.progress
    )
    out: Path = Path(args.out)
    sg.write_capture_set(out, samples, args.split)
    record: dict[str, Any] = {**config_to_dict(config), 'pool': args.pool, 'split': args.split}
    summary: str = f'{len(samples)} ``{config.style}`` samples written to {out}'
    return CommandResult(out, record, config.seed, summary, [out])


def run_train_capture(args: argparse.Namespace, threads: int) -> CommandResult:
    config: cm.CaptureTrainConfig = with_seed(load_config(cm.CaptureTrainConfig, args.config), args.seed)
    synthetic: list[sg.SynthSample] = sg.load_capture_set(args.synth)
    realish: list[sg.SynthSample] = sg.load_capture_set(args.real) if args.real is not None else []
    result: cm.CaptureTrainResult = cm.train_capture(synthetic, realish, config, args.progress)
    out: Path = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cm.save_capture_model(out, result.model, result.adam_state)
    curve_path: Path = out.with_suffix('.loss.csv')
    cm.save_capture_curve(curve_path, result.curve)
    summary: str = f'capture model written to {out}; synthetic, {len(synthetic)}; realish, {len(realish)}'
    return CommandResult(out.parent, config_to_dict(config), config.seed, summary, [out, curve_path])


def run_capture(args: argparse.Namespace, threads: int) -> CommandResult:
    semantic: sm.SemanticModel = load_semantic(args.semantic, args.topology)
    capture: cm.CaptureModel = cm.load_capture_model(args.capture)
    image: np.ndarray = sg.read_pgm(args.image)
    neutral: Mesh = load_mesh(args.neutral, semantic.topology)
    out: Path = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(out, cm.capture(capture, semantic, image, neutral))
    config: dict[str, Any] = {
        'capture': str(args.capture),
        'semantic': str(args.semantic),
        'image': str(args.image),
        'neutral': str(args.neutral),
    }
    return CommandResult(out.parent, config, None, f'captured mesh written to {out}', [out])


def run_bench(args: argparse.Namespace, threads: int) -> CommandResult:
    report = run_manifest(args.manifest, threads)
    out: Path = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    json_path: Path = Path(args.json) if args.json else out.with_suffix('.json')
    emit_report(report, out, json_path)
    summary: str = f'region report written to {out}; overall mean, {report.overall():.6g} mm'
    return CommandResult(out.parent, {'manifest': str(args.manifest)}, None, summary, [out, json_path])


def run_ablate(args: argparse.Namespace, threads: int) -> CommandResult:
    config: ablations.AblationConfig = load_config(ablations.AblationConfig, args.config)
    if args.seed is not None:
        config = dataclasses.replace(
            config,
            oracle=with_seed(config.oracle, args.seed),
            semantic=with_seed(config.semantic, args.seed),
            synth=with_seed(config.synth, args.seed),
            realish=with_seed(config.realish, args.seed + 1),
            capture=with_seed(config.capture, args.seed),
        )
    result: ablations.AblationResult = ablations.run_ablation(args.suite, config, threads, args.progress)
    out: Path = Path(args.out)
    csv_path, json_path = ablations.write_comparison(out, result)
    passed: int = sum(result.checks.values())
    summary: str = f'ablation ``{args.suite}``; checks passed, {passed}/{len(result.checks)}; written to {out}'
    record: dict[str, Any] = {'suite': args.suite, **config_to_dict(config)}
    return CommandResult(out, record, config.semantic.seed, summary, [csv_path, json_path])


## -- argument parsing --------------------------------------------------


class UsageParser(argparse.ArgumentParser):
    """
    Raises a `usage` ConfigError instead of printing usage text and exiting, so bad arguments get the JSON error line.
    """

    def error(self, message: str) -> NoReturn:
        raise ConfigError('usage', f'{self.prog}: {message}')


class CLI:
    """
    Builds the subcommand parser; each leaf parser sets `handler` and `command_name` defaults.
    """

    @staticmethod
    def common_parser() -> argparse.ArgumentParser:
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument('--seed', type=int, default=None, help='overrides the config seed')
        common.add_argument(
            '--threads', type=int, default=None, help=f'parallel workers; falls back to {THREADS_ENV_VAR}, then 1'
        )
        common.add_argument('--progress', action='store_true', help='shows tqdm progress bars')
        return common

    @staticmethod
    def leaf(
        group: Any, common: argparse.ArgumentParser, name: str, full_name: str, handler: Handler, help_text: str
    ) -> argparse.ArgumentParser:
        """
        Adds a runnable subcommand that carries its handler and full command name.
        """
        sub: argparse.ArgumentParser = group.add_parser(name, parents=[common], help=help_text)
        sub.set_defaults(handler=handler, command_name=full_name)
        return sub

    @staticmethod
    def build_parser() -> argparse.ArgumentParser:
        """
        Builds the full parser tree.

        Called by `CLI.parse_args()`.
        """
        common: argparse.ArgumentParser = CLI.common_parser()
        parser = UsageParser(description='Semantic facial expression pipeline.')
        commands = parser.add_subparsers(dest='command', required=True)

        ## topology build
        topology_group = commands.add_parser('topology', help='topology tools').add_subparsers(dest='action', required=True)
        p = CLI.leaf(topology_group, common, 'build', 'topology build', run_topology_build, 'derive edges and spirals')
        p.add_argument('--mesh', type=Path, required=True, help='template OBJ with faces')
        p.add_argument('--spiral-len', type=int, required=True, help='spiral length K')
        p.add_argument('--masks', type=Path, default=None, help='JSON with region masks, eyelid polylines and landmarks')
        p.add_argument('--out', type=Path, required=True, help='topology JSON to write')

        ## oracle gen
        oracle_group = commands.add_parser('oracle', help='oracle data').add_subparsers(dest='action', required=True)
        p = CLI.leaf(oracle_group, common, 'gen', 'oracle gen', run_oracle_gen, 'generate an oracle dataset')
        p.add_argument('--config', type=Path, default=None, help='OracleConfig JSON')
        p.add_argument('--out', type=Path, required=True, help='output directory')

        ## train semantic / train capture
        train_group = commands.add_parser('train', help='model training').add_subparsers(dest='action', required=True)
        p = CLI.leaf(train_group, common, 'semantic', 'train semantic', run_train_semantic, 'train the semantic model')
        p.add_argument('--config', type=Path, default=None, help='SemanticTrainConfig JSON')
        p.add_argument('--data', type=Path, required=True, help='oracle dataset directory')
        p.add_argument('--out', type=Path, required=True, help='model file to write')
        p = CLI.leaf(train_group, common, 'capture', 'train capture', run_train_capture, 'train the capture model')
        p.add_argument('--config', type=Path, default=None, help='CaptureTrainConfig JSON')
        p.add_argument('--synth', type=Path, required=True, help='synthetic capture-set directory')
        p.add_argument('--real', type=Path, default=None, help='realish capture-set directory')
        p.add_argument('--out', type=Path, required=True, help='model file to write')

        ## optimize-code / retarget
        p = CLI.leaf(commands, common, 'optimize-code', 'optimize-code', run_optimize_code, 'fit a code to a mesh pair')
        p.add_argument('--model', type=Path, required=True)
        p.add_argument('--topology', type=Path, default=None)
        p.add_argument('--neutral', type=Path, required=True)
        p.add_argument('--expressive', type=Path, required=True)
        p.add_argument('--iters', type=int, default=200)
        p.add_argument('--lr', type=float, default=1e-2)
        p.add_argument('--out', type=Path, required=True, help='code JSON to write')
        p = CLI.leaf(commands, common, 'retarget', 'retarget', run_retarget, 'decode a code onto a target neutral')
        p.add_argument('--model', type=Path, required=True)
        p.add_argument('--topology', type=Path, default=None)
        p.add_argument('--code', type=Path, required=True)
        p.add_argument('--target-neutral', type=Path, required=True)
        p.add_argument('--out', type=Path, required=True, help='OBJ to write')

        ## synth gen
        synth_group = commands.add_parser('synth', help='capture-set synthesis').add_subparsers(dest='action', required=True)
        p = CLI.leaf(synth_group, common, 'gen', 'synth gen', run_synth_gen, 'render a capture set from decoded meshes')
        p.add_argument('--semantic', type=Path, required=True)
        p.add_argument('--topology', type=Path, default=None)
        p.add_argument('--data', type=Path, required=True, help='oracle dataset providing neutral and code pools')
        p.add_argument('--pool', choices=('train', 'heldout'), default='train')
        p.add_argument('--split', default='train', help='sub-directory name for the samples')
        p.add_argument('--config', type=Path, default=None, help='SynthConfig JSON')
        p.add_argument('--out', type=Path, required=True)

        ## capture / bench / ablate
        p = CLI.leaf(commands, common, 'capture', 'capture', run_capture, 'capture a mesh from one image')
        p.add_argument('--capture', type=Path, required=True)
        p.add_argument('--semantic', type=Path, required=True)
        p.add_argument('--topology', type=Path, default=None)
        p.add_argument('--image', type=Path, required=True, help='8-bit PGM')
        p.add_argument('--neutral', type=Path, required=True)
        p.add_argument('--out', type=Path, required=True, help='OBJ to write')
        p = CLI.leaf(commands, common, 'bench', 'bench', run_bench, 'evaluate a run manifest into a region report')
        p.add_argument('--manifest', type=Path, required=True)
        p.add_argument('--out', type=Path, required=True, help='report CSV to write')
        p.add_argument('--json', type=Path, default=None, help='report JSON (default: next to the CSV)')
        p = CLI.leaf(commands, common, 'ablate', 'ablate', run_ablate, 'run one ablation suite on oracle data')
        p.add_argument('--suite', choices=ablations.SUITES, required=True)
        p.add_argument('--config', type=Path, default=None, help='AblationConfig JSON')
        p.add_argument('--out', type=Path, required=True, help='output directory')
        return parser

    @staticmethod
    def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
        """
        Parses `argv` (or `sys.argv` when None).

        Called by `main()`.
        """
        return CLI.build_parser().parse_args(argv)


## -- entry point -------------------------------------------------------


def report_error(command: str, kind: str, message: str, exit_code: int) -> int:
    """
    Writes the machine-readable error line to stderr and returns the exit code.
    """
    payload: dict[str, str] = {'error': kind, 'message': message, 'command': command}
    print(json.dumps(payload), file=sys.stderr)
    return exit_code


def usage_command(raw_argv: list[str]) -> str:
    """
    Best-effort command name for arguments that failed to parse: the leading non-option words, at most two.
    """
    words: list[str] = []
    for token in raw_argv[:2]:
        if token.startswith('-'):
            break
        words.append(token)
    return ' '.join(words)


def main(argv: list[str] | None = None) -> int:
    """
    Dispatches one subcommand, writes its run log, and maps failures to exit codes.

    Called by dundermain.
    """
    ## parse args ---------------------------------------------------
    raw_argv: list[str] = list(sys.argv[1:] if argv is None else argv)
    try:
        args: argparse.Namespace = CLI.parse_args(raw_argv)
    except ConfigError as exc:
        return report_error(usage_command(raw_argv), exc.kind, str(exc), 2)
    command: str = args.command_name
    started: float = time.monotonic()
    ## run ----------------------------------------------------------
    try:
        threads: int = resolve_threads(args.threads)
        result: CommandResult = args.handler(args, threads)
        run_log: Path = write_run_log(command, raw_argv, threads, result)
    except ConfigError as exc:
        return report_error(command, exc.kind, str(exc), 2)
    except FileNotFoundError as exc:
        return report_error(command, 'missing_file', str(exc), 2)
    except RUNTIME_ERRORS as exc:
        return report_error(command, getattr(exc, 'kind', 'runtime'), str(exc), 1)
    except Exception as exc:
        log.exception(f'unexpected failure in ``{command}``')
        return report_error(command, 'internal', str(exc), 1)
    ## report -------------------------------------------------------
    elapsed: str = humanize.precisedelta(time.monotonic() - started, minimum_unit='seconds', format='%0.1f')
    log.info(f'``{command}`` finished in {elapsed}; outputs, {output_size(result.outputs)}; run log at ``{run_log}``')
    print(result.summary)
    return 0


if __name__ == '__main__':
    sys.exit(main())
