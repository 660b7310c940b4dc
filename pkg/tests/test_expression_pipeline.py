import contextlib
import io
import json
import os
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np

import expression_pipeline
from bench import load_report_json
from geometry_core import MASK_FILE_KEYS, load_mesh, load_topology, make_mesh, save_mesh
from strict_config import ConfigError
from tests.fixtures import TINY_CHANNELS, small_face

ORACLE_CONFIG = {
    'family': {'rows': 9, 'cols': 12, 'spiral_len': 5, 'landmark_grid': 4},
    'n_identities': 2,
    'n_heldout': 2,
    'n_expressions': 1,
    'n_neutral_only': 1,
    'seed': 3,
}
SEMANTIC_CONFIG = {'code_dim': 4, 'spiral_len': 5, 'steps': 1, 'batch': 2, 'log_every': 0, **TINY_CHANNELS}
SYNTH_CONFIG = {'count': 2, 'image_size': 16}
CAPTURE_CONFIG = {
    'image_size': 16,
    'encoder': {'stages': 2, 'channels': [2, 4], 'feature_dim': 8},
    'code_dim': 4,
    'landmark_count': 16,
    'code_blocks': 1,
    'code_groups': 2,
    'classifier_width': 4,
    'classifier_groups': 2,
    'classifier_blocks': 1,
    'steps': 1,
    'batch': 2,
    'log_every': 0,
}


def run_cli(argv: list[str]) -> tuple[int, str, str]:
    """
    Runs main() and returns (exit code, stdout, stderr).
    """
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = expression_pipeline.main(argv)
    return code, out.getvalue(), err.getvalue()


def write_json(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(data), encoding='utf-8')
    return path


class TestResolveThreads(unittest.TestCase):
    """
    Tests resolve_threads().
    """
    def test_flag_wins(self):
        """
        Checks that --threads beats the env-var.
        """
        with mock.patch.dict(os.environ, {expression_pipeline.THREADS_ENV_VAR: '8'}):
            self.assertEqual(expression_pipeline.resolve_threads(3), 3)

    def test_env_var_then_default(self):
        """
        Checks the env-var fallback and the default of 1.
        """
        with mock.patch.dict(os.environ, {expression_pipeline.THREADS_ENV_VAR: '4'}):
            self.assertEqual(expression_pipeline.resolve_threads(None), 4)
        with mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(expression_pipeline.resolve_threads(None), 1)

    def test_invalid_values(self):
        """
        Checks that non-integer and non-positive thread counts are rejected.
        """
        with mock.patch.dict(os.environ, {expression_pipeline.THREADS_ENV_VAR: 'many'}):
            with self.assertRaises(ConfigError) as ctx:
                expression_pipeline.resolve_threads(None)
        self.assertEqual(ctx.exception.kind, 'invalid_threads')
        with self.assertRaises(ConfigError):
            expression_pipeline.resolve_threads(0)


class TestErrors(unittest.TestCase):
    """
    Tests how main() reports failures.
    """
    def test_unknown_config_key(self):
        """
        Checks exit code 2 and the JSON error line for a misspelled config key.
        """
        with tempfile.TemporaryDirectory() as tmp:
            config = write_json(Path(tmp) / 'oracle.json', {'n_identitys': 3})
            code, stdout, stderr = run_cli(['oracle', 'gen', '--config', str(config), '--out', str(Path(tmp) / 'data')])
            self.assertFalse((Path(tmp) / 'data').exists())
        self.assertEqual(code, 2)
        self.assertEqual(stdout, '')
        error = json.loads(stderr.strip().splitlines()[-1])
        self.assertEqual(error['error'], 'unknown_config_key')
        self.assertEqual(error['command'], 'oracle gen')

    def test_missing_file(self):
        """
        Checks exit code 2 for a missing input file.
        """
        with tempfile.TemporaryDirectory() as tmp:
            absent, out = Path(tmp) / 'absent.obj', Path(tmp) / 't.json'
            code, _, stderr = run_cli(['topology', 'build', '--mesh', str(absent), '--spiral-len', '5', '--out', str(out)])
        self.assertEqual(code, 2)
        self.assertEqual(json.loads(stderr.strip().splitlines()[-1])['error'], 'missing_file')

    def test_runtime_error(self):
        """
        Checks exit code 1 and the error kind for a template OBJ without faces.
        """
        topology, template = small_face()
        with tempfile.TemporaryDirectory() as tmp:
            mesh, out = Path(tmp) / 'points.obj', Path(tmp) / 't.json'
            save_mesh(mesh, make_mesh(topology, template), write_faces=False)
            code, _, stderr = run_cli(['topology', 'build', '--mesh', str(mesh), '--spiral-len', '5', '--out', str(out)])
        self.assertEqual(code, 1)
        self.assertEqual(json.loads(stderr.strip().splitlines()[-1])['error'], 'parse_error')

    def test_usage_errors(self):
        """
        Checks that missing flags and unknown subcommands give exit code 2 and a JSON `usage` error line.
        """
        code, stdout, stderr = run_cli(['bench'])
        self.assertEqual(code, 2)
        self.assertEqual(stdout, '')
        error = json.loads(stderr.strip().splitlines()[-1])
        self.assertEqual(error['error'], 'usage')
        self.assertEqual(error['command'], 'bench')
        self.assertIn('--manifest', error['message'])
        code, _, stderr = run_cli(['oracle', 'regen'])
        self.assertEqual(code, 2)
        self.assertEqual(json.loads(stderr.strip().splitlines()[-1])['error'], 'usage')


class TestTopologyBuild(unittest.TestCase):
    """
    Tests the `topology build` subcommand and its run log.
    """
    def test_build_and_rerun(self):
        """
        Checks the written topology, the run log fields and byte-identical reruns.
        """
        topology, template = small_face()
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            save_mesh(root / 'template.obj', make_mesh(topology, template))
            masks = {k: v for k, v in topology.to_json_dict().items() if k in MASK_FILE_KEYS}
            write_json(root / 'masks.json', masks)
            argv = [
                'topology', 'build', '--mesh', str(root / 'template.obj'), '--masks', str(root / 'masks.json'),
                '--spiral-len', '5', '--out', str(root / 'out' / 'topology.json'),
            ]
            code, stdout, _ = run_cli(argv)
            self.assertEqual(code, 0)
            self.assertIn(topology.topology_id, stdout)
            built = load_topology(root / 'out' / 'topology.json')
            first_log = (root / 'out' / 'run.log.json').read_bytes()
            self.assertEqual(run_cli(argv)[0], 0)
            second_log = (root / 'out' / 'run.log.json').read_bytes()
        self.assertEqual(built.topology_id, topology.topology_id)
        self.assertTrue(np.array_equal(built.region_masks['nose'], topology.region_masks['nose']))
        self.assertEqual(first_log, second_log)
        run_log = json.loads(first_log)
        self.assertEqual(
            sorted(run_log), ['argv', 'command', 'config', 'config_hash', 'outputs', 'seed', 'threads', 'versions']
        )
        self.assertEqual(run_log['command'], 'topology build')
        self.assertEqual(run_log['config']['spiral_len'], 5)


class TestPipeline(unittest.TestCase):
    """
    Runs the subcommands in order on tiny settings.
    """
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        write_json(cls.root / 'oracle.json', ORACLE_CONFIG)
        write_json(cls.root / 'semantic.json', SEMANTIC_CONFIG)
        write_json(cls.root / 'synth.json', SYNTH_CONFIG)
        write_json(cls.root / 'realish.json', {**SYNTH_CONFIG, 'style': 'realish'})
        write_json(cls.root / 'capture.json', CAPTURE_CONFIG)
        cls.data = cls.root / 'data'
        cls.model = cls.root / 'models' / 'semantic.bin'
        cls.oracle_result = run_cli(
            ['oracle', 'gen', '--config', str(cls.root / 'oracle.json'), '--out', str(cls.data), '--seed', '9']
        )
        cls.train_result = run_cli(
            [
                'train', 'semantic', '--config', str(cls.root / 'semantic.json'),
                '--data', str(cls.data), '--out', str(cls.model),
            ]
        )

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def heldout(self, index: int, name: str) -> Path:
        return self.data / 'identities' / 'heldout' / f'{index:03}' / name

    def test_oracle_and_training_outputs(self):
        """
        Checks the dataset files (neutral-only pool included), the --seed override and the training outputs.
        """
        self.assertEqual(self.oracle_result[0], 0)
        self.assertEqual(self.train_result[0], 0)
        self.assertEqual(json.loads((self.data / 'run.log.json').read_text(encoding='utf-8'))['seed'], 9)
        self.assertTrue(self.heldout(2, 'expr_000.obj').exists())
        self.assertTrue((self.data / 'identities' / 'neutral_only' / '004' / 'neutral.obj').exists())
        self.assertTrue(self.model.exists())
        self.assertTrue((self.model.parent / 'topology.json').exists())
        curve = (self.model.parent / 'semantic.loss.csv').read_text(encoding='utf-8').splitlines()
        self.assertEqual(len(curve), 2)

    def test_optimize_and_retarget(self):
        """
        Checks that an optimized code decodes onto another neutral with the right vertex count.
        """
        code_path = self.root / 'code' / 'code.json'
        code, _, _ = run_cli(
            [
                'optimize-code', '--model', str(self.model), '--neutral', str(self.heldout(2, 'neutral.obj')),
                '--expressive', str(self.heldout(2, 'expr_000.obj')), '--iters', '2', '--out', str(code_path),
            ]
        )
        self.assertEqual(code, 0)
        payload = json.loads(code_path.read_text(encoding='utf-8'))
        self.assertEqual(len(payload['code']), 4)
        self.assertEqual(payload['variant'], 'full')
        out = self.root / 'retarget' / 'mesh.obj'
        code, _, _ = run_cli(
            [
                'retarget', '--model', str(self.model), '--code', str(code_path),
                '--target-neutral', str(self.heldout(3, 'neutral.obj')), '--out', str(out),
            ]
        )
        self.assertEqual(code, 0)
        topology = load_topology(self.model.parent / 'topology.json')
        self.assertEqual(load_mesh(out, topology).vertices.shape, (108, 3))

    def test_synth_capture_chain(self):
        """
        Checks synth gen in both styles, capture training and single-image capture.
        """
        synth, realish = self.root / 'synth', self.root / 'realish'
        for config, out, pool in (('synth.json', synth, 'train'), ('realish.json', realish, 'heldout')):
            code, _, _ = run_cli(
                [
                    'synth', 'gen', '--semantic', str(self.model), '--data', str(self.data), '--pool', pool,
                    '--config', str(self.root / config), '--out', str(out), '--threads', '2',
                ]
            )
            self.assertEqual(code, 0)
        self.assertEqual(len(list((synth / 'train').glob('*.pgm'))), 2)
        capture_model = self.root / 'models' / 'capture.bin'
        code, _, _ = run_cli(
            [
                'train', 'capture', '--config', str(self.root / 'capture.json'), '--synth', str(synth),
                '--real', str(realish), '--out', str(capture_model),
            ]
        )
        self.assertEqual(code, 0)
        out = self.root / 'captured' / 'mesh.obj'
        code, _, _ = run_cli(
            [
                'capture', '--capture', str(capture_model), '--semantic', str(self.model),
                '--image', str(realish / 'train' / '000000.pgm'), '--neutral', str(self.heldout(2, 'neutral.obj')),
                '--out', str(out),
            ]
        )
        self.assertEqual(code, 0)
        self.assertTrue(out.exists())

    def test_bench_against_a_neutral_baseline(self):
        """
        Checks bench on retargeted predictions and on exact predictions, both against the zero-expression baseline.
        """
        root = self.root / 'bench'
        for folder in ('gt', 'retargeted', 'neutral', 'exact'):
            (root / folder).mkdir(parents=True, exist_ok=True)
        frames = []
        for index in (2, 3):
            name = f'{index:03}.obj'
            shutil.copyfile(self.heldout(index, 'expr_000.obj'), root / 'gt' / name)
            shutil.copyfile(self.heldout(index, 'expr_000.obj'), root / 'exact' / name)
            shutil.copyfile(self.heldout(index, 'neutral.obj'), root / 'neutral' / name)
            code_path = root / f'code_{index:03}.json'
            argv = [
                'optimize-code', '--model', str(self.model), '--neutral', str(self.heldout(index, 'neutral.obj')),
                '--expressive', str(self.heldout(index, 'expr_000.obj')), '--iters', '2', '--out', str(code_path),
            ]
            self.assertEqual(run_cli(argv)[0], 0)
            argv = [
                'retarget', '--model', str(self.model), '--code', str(code_path),
                '--target-neutral', str(self.heldout(index, 'neutral.obj')), '--out', str(root / 'retargeted' / name),
            ]
            self.assertEqual(run_cli(argv)[0], 0)
            frames.append({'gt': name, 'pred': name, 'view': 'frontal'})
        shutil.copyfile(self.model.parent / 'topology.json', root / 'topology.json')
        overall: dict[str, float] = {}
        for pred_dir in ('retargeted', 'neutral', 'exact'):
            manifest = {
                'gt_dir': 'gt', 'pred_dir': pred_dir, 'baseline_dir': 'neutral',
                'masks_path': 'topology.json', 'frames': frames,
            }
            write_json(root / f'{pred_dir}.json', manifest)
            out = root / 'reports' / f'{pred_dir}.csv'
            code, _, _ = run_cli(['bench', '--manifest', str(root / f'{pred_dir}.json'), '--out', str(out)])
            self.assertEqual(code, 0)
            report = load_report_json(out.with_suffix('.json'))
            self.assertTrue(report.metadata['compared_against_baseline'])
            overall[pred_dir] = report.overall()
        self.assertTrue(all(np.isfinite(value) for value in overall.values()))
        self.assertGreater(overall['neutral'], 0.0)
        self.assertLess(overall['exact'], overall['neutral'])

    def test_missing_topology(self):
        """
        Checks that a model without a sibling topology needs --topology.
        """
        lonely = self.root / 'lonely' / 'semantic.bin'
        lonely.parent.mkdir(parents=True, exist_ok=True)
        lonely.write_bytes(self.model.read_bytes())
        code, _, stderr = run_cli(
            [
                'retarget', '--model', str(lonely), '--code', str(self.root / 'none.json'),
                '--target-neutral', str(self.heldout(3, 'neutral.obj')), '--out', str(self.root / 'x.obj'),
            ]
        )
        self.assertEqual(code, 2)
        self.assertEqual(json.loads(stderr.strip().splitlines()[-1])['error'], 'missing_file')


if __name__ == '__main__':
    unittest.main()
