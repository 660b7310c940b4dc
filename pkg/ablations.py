"""
One-shot ablation runs on oracle data.

Suites:
  - `no-id`: full semantic model vs the `no_id_decoder` variant vs delta transfer on paired retargeting,
    plus the linear blendshape baseline on held-out reconstruction and the exact displacement check.
  - `no-delta`: full model vs the same model trained with lambda_delta = 0 (displacement collapse).
  - `no-ld`: capture model with vs without the domain loss, on synthetic and realish held-out sets.
  - `synth-only`: mixed synthetic/realish capture training vs synthetic-only training.

Each suite yields comparison rows (mean metric per variant, Wilcoxon p-value against the reference
variant) and boolean checks for the expected orderings.
"""

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

import capture_model as cm
import semantic_model as sm
import synth_gen as sg
from bench import BenchError, wilcoxon_signed_rank
from geometry_core import make_mesh

log = logging.getLogger(__name__)

SUITES: tuple[str, ...] = ('no-delta', 'no-id', 'no-ld', 'synth-only')
COMPARISON_COLUMNS: tuple[str, ...] = ('suite', 'variant', 'metric', 'mean', 'n', 'p_value')


def _default_realish() -> sg.SynthConfig:
    return sg.SynthConfig(count=1000, style='realish', seed=1)


@dataclass(frozen=True)
class AblationConfig:
    oracle: sg.OracleConfig = field(default_factory=sg.OracleConfig)
    semantic: sm.SemanticTrainConfig = field(default_factory=sm.SemanticTrainConfig)
    synth: sg.SynthConfig = field(default_factory=sg.SynthConfig)
    realish: sg.SynthConfig = field(default_factory=_default_realish)
    capture: cm.CaptureTrainConfig = field(default_factory=cm.CaptureTrainConfig)
    eval_expressions: int = 10
    heldout_capture: int = 200
    exactness_trials: int = 1000
    extra_neutrals: int = 20
    min_displacement_mm: float = 0.5


@dataclass(frozen=True)
class ComparisonRow:
    suite: str
    variant: str
    metric: str
    mean: float
    n: int
    p_value: float | None = None


@dataclass
class AblationResult:
    suite: str
    rows: list[ComparisonRow] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)


def _p_value(a: np.ndarray, b: np.ndarray) -> float | None:
    try:
        return wilcoxon_signed_rank(a, b).p_value
    except BenchError as exc:
        log.debug(f'wilcoxon skipped; ``{exc}``')
        return None


def _rows(suite: str, metric: str, reference: str, values: dict[str, np.ndarray]) -> list[ComparisonRow]:
    """
    Summarizes each variant's per-item values, testing every non-reference variant against the reference.
    """
    rows: list[ComparisonRow] = []
    for variant, array in values.items():
        p_value: float | None = None if variant == reference else _p_value(values[reference], array)
        rows.append(ComparisonRow(suite, variant, metric, float(np.mean(array)), int(array.size), p_value))
    return rows


## -- semantic suites -------------------------------------------------


RetargetPair = tuple[sg.OracleIdentity, int, sg.OracleIdentity]


def _retarget_pairs(dataset: sg.OracleDataset, max_expressions: int) -> list[RetargetPair]:
    """
    Pairs each held-out identity's first expressions with the next held-out identity as target.
    """
    heldout: list[sg.OracleIdentity] = dataset.split('heldout')
    if len(heldout) < 2:
        raise sg.SynthError('too_few_identities', 'retarget evaluation needs at least two held-out identities')
    pairs: list[tuple[sg.OracleIdentity, int, sg.OracleIdentity]] = []
    for i, source in enumerate(heldout):
        target: sg.OracleIdentity = heldout[(i + 1) % len(heldout)]
        for j in range(min(max_expressions, source.expressives.shape[0])):
            pairs.append((source, j, target))
    return pairs


def retarget_metrics(
    model: sm.SemanticModel, dataset: sg.OracleDataset, max_expressions: int
) -> tuple[np.ndarray, np.ndarray]:
    """
    Returns per-pair (retarget error vs paired ground truth, mean retarget displacement norm).
    """
    errors: list[float] = []
    norms: list[float] = []
    for source, j, target in _retarget_pairs(dataset, max_expressions):
        code: np.ndarray = sm.encode_expression_batch(model, source.expressives[j][None])
        displacement: np.ndarray = sm.decode_displacement_batch(model, code, target.neutral[None])[0]
        truth: np.ndarray = dataset.paired_ground_truth(source, j, target)
        errors.append(sm.mean_vertex_error(target.neutral + displacement, truth))
        norms.append(float(np.mean(np.linalg.norm(displacement, axis=-1))))
    return np.array(errors), np.array(norms)


def delta_transfer_errors(dataset: sg.OracleDataset, max_expressions: int) -> np.ndarray:
    topology = dataset.family.topology
    errors: list[float] = []
    for source, j, target in _retarget_pairs(dataset, max_expressions):
        moved = sm.delta_transfer(
            make_mesh(topology, source.expressives[j]),
            make_mesh(topology, source.neutral),
            make_mesh(topology, target.neutral),
        )
        errors.append(sm.mean_vertex_error(moved, dataset.paired_ground_truth(source, j, target)))
    return np.array(errors)


def displacement_independence(model: sm.SemanticModel, dataset: sg.OracleDataset, trials: int, seed: int) -> bool:
    """
    Checks bit-exact equality of decoded displacements across neutrals for random codes.
    """
    rng: np.random.Generator = np.random.default_rng(seed)
    neutrals: np.ndarray = np.stack([identity.neutral for identity in dataset.identities])
    for _ in range(trials):
        code: np.ndarray = rng.normal(0.0, 1.0, size=(1, model.config.code_dim))
        a, b = rng.integers(0, neutrals.shape[0], size=2).tolist()
        first: np.ndarray = sm.decode_displacement_batch(model, code, neutrals[a][None])
        second: np.ndarray = sm.decode_displacement_batch(model, code, neutrals[b][None])
        if not np.array_equal(first, second):
            return False
    return True


def reconstruction_errors(model: sm.SemanticModel, dataset: sg.OracleDataset) -> np.ndarray:
    errors: list[float] = []
    for identity in dataset.split('heldout'):
        for expressive in identity.expressives:
            code: np.ndarray = sm.encode_expression_batch(model, expressive[None])
            displacement: np.ndarray = sm.decode_displacement_batch(model, code, identity.neutral[None])[0]
            errors.append(sm.mean_vertex_error(identity.neutral + displacement, expressive))
    return np.array(errors)


def _numeric_rank(rows: np.ndarray) -> int:
    singular: np.ndarray = np.linalg.svd(rows, compute_uv=False)
    if not singular.size or singular[0] <= 0:
        return 0
    return int(np.sum(singular > singular[0] * 1e-8))


def linear_reconstruction_errors(dataset: sg.OracleDataset, k_exp: int) -> np.ndarray:
    """
    Held-out reconstruction errors of the linear baseline fitted on the training identities.
    """
    topology = dataset.family.topology
    train: list[sg.OracleIdentity] = dataset.split('train')
    neutrals = [make_mesh(topology, identity.neutral) for identity in train]
    pairs = [
        (make_mesh(topology, identity.neutral), make_mesh(topology, expressive))
        for identity in train
        for expressive in identity.expressives
    ]
    neutral_rows: np.ndarray = np.stack([n.vertices.reshape(-1) for n in neutrals])
    displacement_rows: np.ndarray = np.stack([(e.vertices - n.vertices).reshape(-1) for n, e in pairs])
    k_id: int = max(1, min(len(neutrals) - 1, _numeric_rank(neutral_rows - neutral_rows.mean(axis=0))))
    k_exp = min(k_exp, _numeric_rank(displacement_rows))
    basis: sm.LinearBasis = sm.fit_linear_basis(neutrals, pairs, k_id=k_id, k_exp=k_exp)
    errors: list[float] = []
    for identity in dataset.split('heldout'):
        neutral = make_mesh(topology, identity.neutral)
        for expressive in identity.expressives:
            expressive_mesh = make_mesh(topology, expressive)
            errors.append(sm.mean_vertex_error(sm.linear_reconstruct(basis, neutral, expressive_mesh), expressive_mesh))
    return np.array(errors)


def _oracle(config: AblationConfig, extra_neutrals: int = 0) -> sg.OracleDataset:
    family: sg.OracleFamily = sg.build_oracle_family(config.oracle.family)
    return sg.generate_oracle_dataset(
        family,
        config.oracle.n_identities,
        config.oracle.n_expressions,
        config.oracle.seed,
        n_heldout=config.oracle.n_heldout,
        n_neutral_only=config.oracle.n_neutral_only + extra_neutrals,
    )


def run_no_id(config: AblationConfig, progress: bool = False) -> AblationResult:
    dataset: sg.OracleDataset = _oracle(config)
    training: sm.SemanticDataset = dataset.semantic_dataset()
    full: sm.SemanticModel = sm.train_semantic(training, replace(config.semantic, variant='full'), progress).model
    no_id: sm.SemanticModel = sm.train_semantic(training, replace(config.semantic, variant='no_id_decoder'), progress).model
    full_errors, _ = retarget_metrics(full, dataset, config.eval_expressions)
    no_id_errors, _ = retarget_metrics(no_id, dataset, config.eval_expressions)
    delta_errors: np.ndarray = delta_transfer_errors(dataset, config.eval_expressions)
    recon_full: np.ndarray = reconstruction_errors(full, dataset)
    recon_linear: np.ndarray = linear_reconstruction_errors(dataset, config.semantic.code_dim)
    result = AblationResult(suite='no-id')
    result.rows.extend(
        _rows(
            'no-id',
            'retarget_error_mm',
            'full',
            {'full': full_errors, 'no_id_decoder': no_id_errors, 'delta_transfer': delta_errors},
        )
    )
    result.rows.extend(_rows('no-id', 'reconstruction_error_mm', 'full', {'full': recon_full, 'linear': recon_linear}))
    result.checks = {
        'full_beats_no_id_decoder': bool(full_errors.mean() < no_id_errors.mean()),
        'full_beats_delta_transfer': bool(full_errors.mean() < delta_errors.mean()),
        'full_beats_linear_reconstruction': bool(recon_full.mean() < recon_linear.mean()),
        'no_id_displacement_exact': displacement_independence(no_id, dataset, config.exactness_trials, config.semantic.seed),
    }
    return result


def no_delta_checks(full_norms: np.ndarray, collapsed_norms: np.ndarray, floor_mm: float) -> dict[str, bool]:
    """
    The collapse ratio plus the minimum-displacement sanity bound, which the full model should clear and the
    no-delta model should not.
    """
    full_mean: float = float(full_norms.mean())
    collapsed_mean: float = float(collapsed_norms.mean())
    return {
        'no_delta_collapses': collapsed_mean < 0.5 * full_mean,
        'full_passes_min_displacement': full_mean >= floor_mm,
        'no_delta_fails_min_displacement': collapsed_mean < floor_mm,
    }


def run_no_delta(config: AblationConfig, progress: bool = False) -> AblationResult:
    dataset: sg.OracleDataset = _oracle(config, extra_neutrals=config.extra_neutrals)
    training: sm.SemanticDataset = dataset.semantic_dataset()
    full: sm.SemanticModel = sm.train_semantic(training, config.semantic, progress).model
    no_delta_weights: sm.LossWeights = replace(config.semantic.weights, delta=0.0)
    no_delta_config: sm.SemanticTrainConfig = replace(config.semantic, weights=no_delta_weights)
    no_delta: sm.SemanticModel = sm.train_semantic(training, no_delta_config, progress).model
    _, full_norms = retarget_metrics(full, dataset, config.eval_expressions)
    _, collapsed_norms = retarget_metrics(no_delta, dataset, config.eval_expressions)
    result = AblationResult(suite='no-delta')
    norms: dict[str, np.ndarray] = {'full': full_norms, 'no_delta': collapsed_norms}
    result.rows.extend(_rows('no-delta', 'retarget_displacement_mm', 'full', norms))
    result.checks = no_delta_checks(full_norms, collapsed_norms, config.min_displacement_mm)
    return result


## -- capture suites --------------------------------------------------


@dataclass(frozen=True, eq=False)
class CaptureData:
    synthetic: list[sg.SynthSample]
    realish: list[sg.SynthSample]
    heldout_synthetic: list[sg.SynthSample]
    heldout_realish: list[sg.SynthSample]


def build_capture_data(config: AblationConfig, threads: int = 1, progress: bool = False) -> CaptureData:
    """
    Trains the semantic model and renders training and held-out capture sets in both styles.
    """
    dataset: sg.OracleDataset = _oracle(config)
    model: sm.SemanticModel = sm.train_semantic(dataset.semantic_dataset(), config.semantic, progress).model
    pool = [i for i in dataset.identities if i.split in ('train', 'neutral_only')]
    neutrals: np.ndarray = np.stack([i.neutral for i in pool])
    ids: list[int] = [i.identity_seed for i in pool]
    train_expressives: np.ndarray = np.concatenate([i.expressives for i in dataset.split('train')])
    codes: np.ndarray = sm.encode_expression_batch(model, train_expressives)
    heldout: list[sg.OracleIdentity] = dataset.split('heldout')
    heldout_neutrals: np.ndarray = np.stack([i.neutral for i in heldout])
    heldout_ids: list[int] = [i.identity_seed for i in heldout]
    heldout_codes: np.ndarray = sm.encode_expression_batch(model, np.concatenate([i.expressives for i in heldout]))
    eval_count: int = config.heldout_capture
    return CaptureData(
        synthetic=sg.sample_synth_capture_set(model, neutrals, ids, codes, config.synth, threads, progress),
        realish=sg.sample_synth_capture_set(model, neutrals, ids, codes, config.realish, threads, progress),
        heldout_synthetic=sg.sample_synth_capture_set(
            model, heldout_neutrals, heldout_ids, heldout_codes,
            replace(config.synth, count=eval_count, seed=config.synth.seed + 7919), threads,
        ),
        heldout_realish=sg.sample_synth_capture_set(
            model, heldout_neutrals, heldout_ids, heldout_codes,
            replace(config.realish, count=eval_count, seed=config.realish.seed + 7919), threads,
        ),
    )


def heldout_code_errors(model: cm.CaptureModel, samples: list[sg.SynthSample]) -> np.ndarray:
    predicted: np.ndarray = cm.predict_codes(model, np.stack([s.image for s in samples]))
    return cm.code_errors(predicted, np.stack([s.code for s in samples]))


def run_capture_suite(suite: str, config: AblationConfig, threads: int = 1, progress: bool = False) -> AblationResult:
    data: CaptureData = build_capture_data(config, threads, progress)
    full: cm.CaptureModel = cm.train_capture(data.synthetic, data.realish, config.capture, progress).model
    if suite == 'no-ld':
        other_name: str = 'no_ld'
        other_config: cm.CaptureTrainConfig = replace(config.capture, weights=replace(config.capture.weights, domain=0.0))
        other: cm.CaptureModel = cm.train_capture(data.synthetic, data.realish, other_config, progress).model
    else:
        other_name = 'synth_only'
        other = cm.train_capture(data.synthetic, [], replace(config.capture, synthetic_only=True), progress).model
    synthetic_errors: dict[str, np.ndarray] = {
        'full': heldout_code_errors(full, data.heldout_synthetic),
        other_name: heldout_code_errors(other, data.heldout_synthetic),
    }
    realish_errors: dict[str, np.ndarray] = {
        'full': heldout_code_errors(full, data.heldout_realish),
        other_name: heldout_code_errors(other, data.heldout_realish),
    }
    result = AblationResult(suite=suite)
    result.rows.extend(_rows(suite, 'synthetic_code_error', 'full', synthetic_errors))
    result.rows.extend(_rows(suite, 'realish_code_error', 'full', realish_errors))
    realish_win: bool = bool(realish_errors['full'].mean() < realish_errors[other_name].mean())
    if suite == 'no-ld':
        result.checks = {
            'domain_loss_helps_realish': realish_win,
            'no_ld_better_in_domain': bool(synthetic_errors['no_ld'].mean() < synthetic_errors['full'].mean()),
        }
    else:
        result.checks = {'mixed_beats_synth_only_on_realish': realish_win}
    return result


## -- entry points ----------------------------------------------------


def run_ablation(suite: str, config: AblationConfig, threads: int = 1, progress: bool = False) -> AblationResult:
    """
    Dispatches one ablation suite.
    """
    log.info(f'running ablation suite ``{suite}``')
    match suite:
        case 'no-id':
            return run_no_id(config, progress)
        case 'no-delta':
            return run_no_delta(config, progress)
        case 'no-ld' | 'synth-only':
            return run_capture_suite(suite, config, threads, progress)
    raise ValueError(f'unknown ablation suite ``{suite}``; expected one of {SUITES}')


def write_comparison(out_dir: Path, result: AblationResult) -> tuple[Path, Path]:
    """
    Writes `comparison.csv` and `comparison.json`.
    """
    out: Path = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path: Path = out / 'comparison.csv'
    with csv_path.open('w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(COMPARISON_COLUMNS)
        for row in result.rows:
            p_text: str = '' if row.p_value is None else f'{row.p_value:.6g}'
            writer.writerow([row.suite, row.variant, row.metric, f'{row.mean:.9g}', row.n, p_text])
    payload: dict[str, Any] = {
        'suite': result.suite,
        'rows': [row.__dict__ for row in result.rows],
        'checks': result.checks,
    }
    json_path: Path = out / 'comparison.json'
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return csv_path, json_path
