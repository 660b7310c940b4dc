"""
Identity-disentangled expression model.

Two spiral-convolution encoders (expression, identity) and an identity-conditioned decoder that
produces per-vertex displacements on top of a neutral mesh. Includes the five-term training loss,
training loop, code optimization, retargeting, the `no_id_decoder` ablation variant, the
delta-transfer baseline and the linear (PCA) blendshape baseline.

Meshes are millimeters; the network sees vertices centered on the training template and divided
by `input_scale`, and its displacement output is multiplied back by the same scale.
"""

import csv
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import tqdm

import autodiff as ad
from autodiff import AdamConfig, AdamState, Tape, Tensor
from geometry_core import (
    EYELID_RESAMPLE_COUNT,
    Mesh,
    Topology,
    build_spiral_orderings,
    edge_lengths,
    make_mesh,
    polyline_resampling_weights,
    resample_polyline,
)
from strict_config import config_to_dict, parse_strict

log = logging.getLogger(__name__)

VARIANTS: tuple[str, ...] = ('full', 'no_id_decoder')
LOSS_COLUMNS: tuple[str, ...] = ('step', 'L_rec', 'L_cycle', 'L_edge', 'L_eyes', 'L_delta', 'total')


class SemanticModelError(Exception):
    """
    Signals invalid semantic-model input; `kind` is a stable machine-readable label.
    """

    def __init__(self, kind: str, message: str) -> None:
        super().__init__(message)
        self.kind: str = kind


## -- configuration ---------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    cycle: float = 1.0
    delta: float = 0.01
    edge: float = 10000.0
    eyes: float = 0.01

    def __post_init__(self) -> None:
        for name in ('rec', 'cycle', 'delta', 'edge', 'eyes'):
            if getattr(self, name) < 0:
                raise ValueError(f'loss weight ``{name}`` must be >= 0')


@dataclass(frozen=True)
class SemanticModelConfig:
    """
    Architecture settings; channel tuples include the 3-channel vertex input/output ends.
    """

    code_dim: int = 64
    spiral_len: int = 9
    variant: str = 'full'
    pool_stride: int = 1
    encoder_channels: tuple[int, ...] = (3, 32, 32, 32, 64, 64)
    decoder_channels: tuple[int, ...] = (64, 64, 32, 32, 32, 3)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f'variant must be one of {VARIANTS}, got ``{self.variant}``')
        if self.code_dim < 1 or self.spiral_len < 1 or self.pool_stride < 1:
            raise ValueError('code_dim, spiral_len and pool_stride must be >= 1')
        if len(self.encoder_channels) < 2 or self.encoder_channels[0] != 3:
            raise ValueError('encoder_channels must start with 3 and name at least one layer')
        if len(self.decoder_channels) < 2 or self.decoder_channels[-1] != 3:
            raise ValueError('decoder_channels must end with 3 and name at least one layer')

    @property
    def decoder_input_dim(self) -> int:
        return 2 * self.code_dim if self.variant == 'full' else self.code_dim


@dataclass(frozen=True)
class SemanticTrainConfig:
    code_dim: int = 64
    spiral_len: int = 9
    variant: str = 'full'
    pool_stride: int = 1
    encoder_channels: tuple[int, ...] = (3, 32, 32, 32, 64, 64)
    decoder_channels: tuple[int, ...] = (64, 64, 32, 32, 32, 3)
    weights: LossWeights = field(default_factory=LossWeights)
    adam: AdamConfig = field(default_factory=AdamConfig)
    steps: int = 2000
    batch: int = 8
    seed: int = 0
    eye_closed_fraction: float = 0.1
    log_every: int = 100

    def model_config(self) -> SemanticModelConfig:
        return SemanticModelConfig(
            code_dim=self.code_dim,
            spiral_len=self.spiral_len,
            variant=self.variant,
            pool_stride=self.pool_stride,
            encoder_channels=self.encoder_channels,
            decoder_channels=self.decoder_channels,
        )


## -- model -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SemanticModel:
    topology: Topology
    config: SemanticModelConfig
    template: np.ndarray
    input_scale: float
    spirals: np.ndarray
    params: dict[str, np.ndarray]

    @property
    def pooled_count(self) -> int:
        return len(range(0, self.topology.vertex_count, self.config.pool_stride))


@dataclass(frozen=True)
class ExpressionCode:
    values: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise SemanticModelError('non_finite', 'expression code contains NaN or Inf')


def _layer_shapes(config: SemanticModelConfig, vertex_count: int) -> dict[str, tuple[int, ...]]:
    """
    Lists every parameter name with its shape, in a fixed order.

    Called by `init_semantic_model()` and `load_semantic_model()`.
    """
    pooled: int = len(range(0, vertex_count, config.pool_stride))
    shapes: dict[str, tuple[int, ...]] = {}
    encoders: tuple[str, ...] = ('exp', 'id') if config.variant == 'full' else ('exp',)
    for prefix in encoders:
        channels: tuple[int, ...] = config.encoder_channels
        for i, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:], strict=True)):
            shapes[f'{prefix}/spiral{i}/weight'] = (config.spiral_len * c_in, c_out)
            shapes[f'{prefix}/spiral{i}/bias'] = (c_out,)
        shapes[f'{prefix}/linear/weight'] = (pooled * channels[-1], config.code_dim)
        shapes[f'{prefix}/linear/bias'] = (config.code_dim,)
    dec: tuple[int, ...] = config.decoder_channels
    shapes['dec/linear/weight'] = (config.decoder_input_dim, pooled * dec[0])
    shapes['dec/linear/bias'] = (pooled * dec[0],)
    for i, (c_in, c_out) in enumerate(zip(dec[:-1], dec[1:], strict=True)):
        shapes[f'dec/spiral{i}/weight'] = (config.spiral_len * c_in, c_out)
        shapes[f'dec/spiral{i}/bias'] = (c_out,)
    return shapes


def init_semantic_model(
    topology: Topology,
    config: SemanticModelConfig,
    template: np.ndarray | None = None,
    input_scale: float = 1.0,
    seed: int = 0,
) -> SemanticModel:
    """
    Creates a model with fan-in scaled normal weights and zero biases.

    The last decoder layer starts small so a fresh model decodes close to the neutral.
    """
    if input_scale <= 0:
        raise SemanticModelError('invalid_scale', 'input_scale must be positive')
    rng: np.random.Generator = np.random.default_rng(seed)
    shapes: dict[str, tuple[int, ...]] = _layer_shapes(config, topology.vertex_count)
    last_decoder: str = f'dec/spiral{len(config.decoder_channels) - 2}/weight'
    params: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.endswith('/bias'):
            params[name] = np.zeros(shape)
            continue
        std: float = 1.0 / np.sqrt(shape[0])
        if name == last_decoder:
            std *= 0.1
        params[name] = rng.normal(0.0, std, size=shape)
    template_array: np.ndarray = (
        np.zeros((topology.vertex_count, 3)) if template is None else np.asarray(template, dtype=np.float64)
    )
    if template_array.shape != (topology.vertex_count, 3):
        raise SemanticModelError('vertex_count_mismatch', f'template shape {template_array.shape} does not match topology')
    spirals: np.ndarray = build_spiral_orderings(topology.vertex_count, topology.faces, config.spiral_len)
    log.debug(f'initialized semantic model with {sum(p.size for p in params.values())} parameters')
    return SemanticModel(topology, config, template_array, float(input_scale), spirals, params)


def with_params(model: SemanticModel, params: dict[str, np.ndarray]) -> SemanticModel:
    return SemanticModel(model.topology, model.config, model.template, model.input_scale, model.spirals, params)


def parameter_leaves(model: SemanticModel) -> dict[str, Tensor]:
    return {name: ad.parameter(value) for name, value in model.params.items()}


def _constants(model: SemanticModel) -> dict[str, Tensor]:
    return {name: ad.constant(value) for name, value in model.params.items()}


## -- forward pass ----------------------------------------------------


def _spiral_conv(x: Tensor, spirals: np.ndarray, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Gathers each vertex's spiral neighborhood, flattens it, and applies one shared linear layer.
    """
    gathered: Tensor = ad.gather_rows(x, spirals)
    batch, vertices, length, channels = gathered.shape
    flat: Tensor = ad.reshape(gathered, (batch, vertices, length * channels))
    return ad.add(ad.matmul(flat, weight), bias)


def _encoder_forward(model: SemanticModel, params: dict[str, Tensor], prefix: str, inputs: Tensor) -> Tensor:
    """
    Maps normalized vertices (B, V, 3) to codes (B, code_dim).

    Called by the encode helpers and `loss_terms()`.
    """
    h: Tensor = inputs
    for i in range(len(model.config.encoder_channels) - 1):
        h = ad.gelu(_spiral_conv(h, model.spirals, params[f'{prefix}/spiral{i}/weight'], params[f'{prefix}/spiral{i}/bias']))
    if model.config.pool_stride > 1:
        h = ad.gather_rows(h, np.arange(0, model.topology.vertex_count, model.config.pool_stride))
    batch, pooled, channels = h.shape
    h = ad.reshape(h, (batch, pooled * channels))
    return ad.add(ad.matmul(h, params[f'{prefix}/linear/weight']), params[f'{prefix}/linear/bias'])


def _decoder_forward(model: SemanticModel, params: dict[str, Tensor], decoder_input: Tensor) -> Tensor:
    """
    Maps decoder inputs (B, decoder_input_dim) to displacements (B, V, 3) in model units.
    """
    batch: int = decoder_input.shape[0]
    h: Tensor = ad.add(ad.matmul(decoder_input, params['dec/linear/weight']), params['dec/linear/bias'])
    h = ad.reshape(h, (batch, model.pooled_count, model.config.decoder_channels[0]))
    if model.config.pool_stride > 1:
        nearest: np.ndarray = np.arange(model.topology.vertex_count) // model.config.pool_stride
        h = ad.gather_rows(h, nearest)
    layers: int = len(model.config.decoder_channels) - 1
    for i in range(layers):
        h = _spiral_conv(h, model.spirals, params[f'dec/spiral{i}/weight'], params[f'dec/spiral{i}/bias'])
        if i < layers - 1:
            h = ad.gelu(h)
    return h


def _normalize(model: SemanticModel, vertices: np.ndarray) -> np.ndarray:
    return (vertices - model.template) / model.input_scale


def _normalize_tensor(model: SemanticModel, vertices: Tensor) -> Tensor:
    offset: Tensor = ad.constant(np.broadcast_to(-model.template, vertices.shape).copy())
    return ad.scale(ad.add(vertices, offset), 1.0 / model.input_scale)


def _displacement(
    model: SemanticModel, params: dict[str, Tensor], codes: Tensor, identity_codes: Tensor | None
) -> Tensor:
    """
    Returns decoded displacements in millimeters.
    """
    decoder_input: Tensor = codes if identity_codes is None else ad.concat([codes, identity_codes], axis=-1)
    return ad.scale(_decoder_forward(model, params, decoder_input), model.input_scale)


def _as_batch(meshes: Mesh | np.ndarray | Sequence[Mesh], model: SemanticModel) -> np.ndarray:
    """
    Stacks meshes or vertex arrays into (B, V, 3), checking the topology.
    """
    if isinstance(meshes, Mesh):
        meshes = [meshes]
    if isinstance(meshes, np.ndarray):
        array: np.ndarray = meshes if meshes.ndim == 3 else meshes[None]
    else:
        for mesh in meshes:
            if mesh.topology_id != model.topology.topology_id:
                raise SemanticModelError('topology_mismatch', 'mesh topology differs from the model topology')
        array = np.stack([mesh.vertices for mesh in meshes])
    if array.shape[1:] != (model.topology.vertex_count, 3):
        raise SemanticModelError('topology_mismatch', f'vertex array shape {array.shape} does not match the model')
    return np.asarray(array, dtype=np.float64)


def encode_expression_batch(model: SemanticModel, expressives: np.ndarray | Sequence[Mesh]) -> np.ndarray:
    batch: np.ndarray = _as_batch(expressives, model)
    return _encoder_forward(model, _constants(model), 'exp', ad.constant(_normalize(model, batch))).data


def encode_expression(model: SemanticModel, mesh: Mesh) -> ExpressionCode:
    return ExpressionCode(values=encode_expression_batch(model, mesh)[0])


def encode_identity(model: SemanticModel, neutral: Mesh) -> np.ndarray:
    if model.config.variant != 'full':
        raise SemanticModelError('variant_mismatch', 'the no_id_decoder variant has no identity encoder')
    batch: np.ndarray = _as_batch(neutral, model)
    return _encoder_forward(model, _constants(model), 'id', ad.constant(_normalize(model, batch))).data[0]


def decode_displacement_batch(model: SemanticModel, codes: np.ndarray, neutrals: np.ndarray | Sequence[Mesh]) -> np.ndarray:
    """
    Decodes (B, code_dim) codes against (B, V, 3) neutrals into displacement fields.
    """
    neutral_batch: np.ndarray = _as_batch(neutrals, model)
    code_array: np.ndarray = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    if code_array.shape[-1] != model.config.code_dim or code_array.shape[0] != neutral_batch.shape[0]:
        raise SemanticModelError('code_dim_mismatch', f'codes of shape {code_array.shape} do not fit the model')
    params: dict[str, Tensor] = _constants(model)
    identity: Tensor | None = None
    if model.config.variant == 'full':
        identity = _encoder_forward(model, params, 'id', ad.constant(_normalize(model, neutral_batch)))
    return _displacement(model, params, ad.constant(code_array), identity).data


def decode_displacement(model: SemanticModel, z_exp: ExpressionCode, neutral: Mesh) -> np.ndarray:
    return decode_displacement_batch(model, z_exp.values[None], neutral)[0]


def decode_mesh(model: SemanticModel, z_exp: ExpressionCode, neutral: Mesh) -> Mesh:
    """
    Returns neutral + decoded displacement; `full` conditions the decoder on the neutral's identity code.
    """
    return make_mesh(neutral.topology, neutral.vertices + decode_displacement(model, z_exp, neutral))


def retarget(model: SemanticModel, z_exp: ExpressionCode, target_neutral: Mesh) -> Mesh:
    return decode_mesh(model, z_exp, target_neutral)


## -- losses ----------------------------------------------------------


@dataclass(frozen=True)
class LossTerms:
    rec: Tensor
    cycle: Tensor
    edge: Tensor
    eyes: Tensor
    delta: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            'L_rec': float(self.rec.data),
            'L_cycle': float(self.cycle.data),
            'L_edge': float(self.edge.data),
            'L_eyes': float(self.eyes.data),
            'L_delta': float(self.delta.data),
            'total': float(self.total.data),
        }


def eyelid_weight_batches(topology: Topology, neutrals: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """
    Per eye, the (B, 16, n) resampling weights of the upper and lower lids measured on each neutral.

    Resampling weights are frozen from the neutral so the eye term stays a linear map of the output.
    """
    weights: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for eye, (upper, lower) in topology.eyelid_polylines.items():
        upper_w: np.ndarray = np.stack([polyline_resampling_weights(n[upper]) for n in neutrals])
        lower_w: np.ndarray = np.stack([polyline_resampling_weights(n[lower]) for n in neutrals])
        weights[eye] = (upper_w, lower_w)
    return weights


def _lid_gap(vertices: np.ndarray, upper: np.ndarray, lower: np.ndarray) -> float:
    gap: np.ndarray = resample_polyline(vertices[upper]) - resample_polyline(vertices[lower])
    return float(np.mean(np.linalg.norm(gap, axis=-1)))


def closed_eye_mask(topology: Topology, expressives: np.ndarray, neutrals: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    """
    Returns a (B, eyes) boolean mask: an eye is closed when its lid gap is below `fraction` of the neutral gap.
    """
    eyes: list[str] = sorted(topology.eyelid_polylines)
    mask: np.ndarray = np.zeros((expressives.shape[0], len(eyes)), dtype=bool)
    for j, eye in enumerate(eyes):
        upper, lower = topology.eyelid_polylines[eye]
        for b in range(expressives.shape[0]):
            mask[b, j] = _lid_gap(expressives[b], upper, lower) < fraction * _lid_gap(neutrals[b], upper, lower)
    return mask


def _edge_term(topology: Topology, output: Tensor, reference: np.ndarray) -> Tensor:
    edges: np.ndarray = topology.edges
    if edges.shape[0] == 0:
        return ad.constant(0.0)
    lengths: Tensor = ad.norm_rows(ad.sub(ad.gather_rows(output, edges[:, 0]), ad.gather_rows(output, edges[:, 1])))
    target: np.ndarray = np.stack([edge_lengths(r, edges) for r in reference])
    return ad.scale(ad.sum_sq(ad.sub(lengths, ad.constant(target))), 1.0 / target.size)


def _eye_term(
    topology: Topology, output: Tensor, weights: dict[str, tuple[np.ndarray, np.ndarray]], closed: np.ndarray
) -> Tensor:
    total: Tensor = ad.constant(0.0)
    for j, eye in enumerate(sorted(topology.eyelid_polylines)):
        if not closed[:, j].any():
            continue
        upper, lower = topology.eyelid_polylines[eye]
        upper_w, lower_w = weights[eye]
        gap: Tensor = ad.sub(
            ad.linear_map(upper_w, ad.gather_rows(output, upper)),
            ad.linear_map(lower_w, ad.gather_rows(output, lower)),
        )
        gate: np.ndarray = np.repeat(closed[:, j : j + 1].astype(np.float64), EYELID_RESAMPLE_COUNT, axis=1)
        # mean over the closed samples only
        per_closed: float = closed.shape[0] / float(closed[:, j].sum())
        gated_mean: Tensor = ad.scale(ad.mean(ad.mul(ad.norm_rows(gap), ad.constant(gate))), per_closed)
        total = ad.add(total, gated_mean)
    return total


def compute_loss_terms(
    topology: Topology,
    weights: LossWeights,
    expressives: np.ndarray,
    source_neutrals: np.ndarray,
    target_neutrals: np.ndarray,
    reconstruction: Tensor,
    retargeted: Tensor,
    codes: Tensor,
    cycle_codes: Tensor,
    closed: np.ndarray,
) -> LossTerms:
    """
    Combines decoded outputs and codes into the five weighted loss terms.

    Called by `loss_terms()`; also used directly by tests with hand-built outputs.
    """
    batch, vertex_count = expressives.shape[0], expressives.shape[1]
    rec: Tensor = ad.scale(ad.sum_sq(ad.sub(reconstruction, ad.constant(expressives))), 1.0 / (batch * vertex_count))
    cycle: Tensor = ad.scale(ad.sum_sq(ad.sub(cycle_codes, codes)), 1.0 / codes.data.size)
    edge: Tensor = ad.add(
        _edge_term(topology, retargeted, target_neutrals), _edge_term(topology, reconstruction, source_neutrals)
    )
    eyes: Tensor = ad.add(
        _eye_term(topology, reconstruction, eyelid_weight_batches(topology, source_neutrals), closed),
        _eye_term(topology, retargeted, eyelid_weight_batches(topology, target_neutrals), closed),
    )
    transferred: np.ndarray = target_neutrals + (expressives - source_neutrals)
    delta: Tensor = ad.scale(ad.sum_sq(ad.sub(retargeted, ad.constant(transferred))), 1.0 / (batch * vertex_count))
    total: Tensor = ad.scale(rec, weights.rec)
    for term, weight in ((cycle, weights.cycle), (edge, weights.edge), (eyes, weights.eyes), (delta, weights.delta)):
        total = ad.add(total, ad.scale(term, weight))
    return LossTerms(rec=rec, cycle=cycle, edge=edge, eyes=eyes, delta=delta, total=total)


def loss_terms(
    model: SemanticModel,
    expressives: Mesh | np.ndarray,
    source_neutrals: Mesh | np.ndarray,
    target_neutrals: Mesh | np.ndarray,
    weights: LossWeights | None = None,
    params: dict[str, Tensor] | None = None,
    eye_closed_fraction: float = 0.1,
) -> LossTerms:
    """
    Runs the full forward pass (encode, reconstruct, retarget, re-encode) and returns the loss terms.

    Pass `params` as leaf tensors inside an active Tape to get gradients.
    """
    e_s: np.ndarray = _as_batch(expressives, model)
    n_s: np.ndarray = _as_batch(source_neutrals, model)
    n_t: np.ndarray = _as_batch(target_neutrals, model)
    if not e_s.shape[0] == n_s.shape[0] == n_t.shape[0]:
        raise SemanticModelError('batch_mismatch', 'expressive, source and target batches differ in size')
    p: dict[str, Tensor] = params if params is not None else _constants(model)
    codes: Tensor = _encoder_forward(model, p, 'exp', ad.constant(_normalize(model, e_s)))
    id_source: Tensor | None = None
    id_target: Tensor | None = None
    if model.config.variant == 'full':
        id_source = _encoder_forward(model, p, 'id', ad.constant(_normalize(model, n_s)))
        id_target = _encoder_forward(model, p, 'id', ad.constant(_normalize(model, n_t)))
    reconstruction: Tensor = ad.add(ad.constant(n_s), _displacement(model, p, codes, id_source))
    retargeted: Tensor = ad.add(ad.constant(n_t), _displacement(model, p, codes, id_target))
    cycle_codes: Tensor = _encoder_forward(model, p, 'exp', _normalize_tensor(model, retargeted))
    closed: np.ndarray = closed_eye_mask(model.topology, e_s, n_s, eye_closed_fraction)
    return compute_loss_terms(
        model.topology,
        weights or LossWeights(),
        e_s,
        n_s,
        n_t,
        reconstruction,
        retargeted,
        codes,
        cycle_codes,
        closed,
    )


## -- training --------------------------------------------------------


@dataclass(frozen=True)
class SubjectMeshes:
    """
    One subject's neutral plus zero or more expressive meshes, as raw (V, 3) / (K, V, 3) arrays.
    """

    subject_id: str
    neutral: np.ndarray
    expressives: np.ndarray


@dataclass(frozen=True)
class SemanticDataset:
    topology: Topology
    subjects: tuple[SubjectMeshes, ...]

    def expressive_pairs(self) -> list[tuple[int, int]]:
        return [(s, k) for s, subject in enumerate(self.subjects) for k in range(subject.expressives.shape[0])]


@dataclass
class SemanticTrainResult:
    model: SemanticModel
    curve: list[dict[str, float]]
    adam_state: AdamState


def dataset_statistics(dataset: SemanticDataset) -> tuple[np.ndarray, float]:
    """
    Returns the centering template (mean neutral) and the RMS deviation of all meshes from it.
    """
    neutrals: np.ndarray = np.stack([s.neutral for s in dataset.subjects])
    template: np.ndarray = neutrals.mean(axis=0)
    meshes: list[np.ndarray] = [neutrals] + [s.expressives for s in dataset.subjects if s.expressives.size]
    everything: np.ndarray = np.concatenate(meshes, axis=0)
    rms: float = float(np.sqrt(np.mean(np.sum((everything - template) ** 2, axis=-1))))
    return template, max(rms, 1e-6)


def sample_training_batch(
    dataset: SemanticDataset, pairs: list[tuple[int, int]], batch: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Draws (E_s, N_s, N_t) batches; each target neutral comes uniformly from the other subjects.
    """
    picks: np.ndarray = rng.integers(0, len(pairs), size=batch)
    expressives: list[np.ndarray] = []
    sources: list[np.ndarray] = []
    targets: list[np.ndarray] = []
    count: int = len(dataset.subjects)
    for pick in picks.tolist():
        subject_index, expression_index = pairs[pick]
        other: int = int(rng.integers(0, count - 1))
        other = other + 1 if other >= subject_index else other
        subject: SubjectMeshes = dataset.subjects[subject_index]
        expressives.append(subject.expressives[expression_index])
        sources.append(subject.neutral)
        targets.append(dataset.subjects[other].neutral)
    return np.stack(expressives), np.stack(sources), np.stack(targets)


def train_semantic(
    dataset: SemanticDataset,
    config: SemanticTrainConfig,
    progress: bool = False,
) -> SemanticTrainResult:
    """
    Jointly trains both encoders and the decoder with Adam; deterministic given `config.seed`.
    """
    pairs: list[tuple[int, int]] = dataset.expressive_pairs()
    if not pairs:
        raise SemanticModelError('empty_dataset', 'dataset has no expressive meshes')
    if len(dataset.subjects) < 2:
        raise SemanticModelError('single_subject', 'need at least two subjects to sample a distinct target neutral')
    seeds: list[np.random.SeedSequence] = np.random.SeedSequence(config.seed).spawn(2)
    init_seed: int = int(seeds[0].generate_state(1)[0])
    rng: np.random.Generator = np.random.default_rng(seeds[1])
    template, input_scale = dataset_statistics(dataset)
    model: SemanticModel = init_semantic_model(dataset.topology, config.model_config(), template, input_scale, init_seed)
    params: dict[str, Tensor] = parameter_leaves(model)
    state: AdamState = ad.init_adam_state(params, config.adam)
    curve: list[dict[str, float]] = []
    log.info(f'training semantic model; variant, ``{config.variant}``; steps, ``{config.steps}``; pairs, ``{len(pairs)}``')
    for step in tqdm(range(config.steps), desc='Training semantic model', disable=not progress):
        e_s, n_s, n_t = sample_training_batch(dataset, pairs, config.batch, rng)
        with Tape() as tape:
            terms: LossTerms = loss_terms(model, e_s, n_s, n_t, config.weights, params, config.eye_closed_fraction)
        names: list[str] = list(params)
        grads: list[np.ndarray] = ad.backward(tape, terms.total, [params[name] for name in names])
        params, state = ad.adam_step(params, dict(zip(names, grads, strict=True)), state)
        record: dict[str, float] = {'step': float(step), **terms.as_floats()}
        curve.append(record)
        if config.log_every and step % config.log_every == 0:
            log.info(f'step {step}; total, ``{record["total"]:.6g}``; L_rec, ``{record["L_rec"]:.6g}``')
    trained: SemanticModel = with_params(model, {name: tensor.data for name, tensor in params.items()})
    return SemanticTrainResult(model=trained, curve=curve, adam_state=state)


def save_loss_curve(path: Path, curve: list[dict[str, float]]) -> None:
    """
    Writes `step,L_rec,L_cycle,L_edge,L_eyes,L_delta,total` rows.
    """
    with Path(path).open('w', encoding='utf-8', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=list(LOSS_COLUMNS), lineterminator='\n')
        writer.writeheader()
        for record in curve:
            writer.writerow({'step': int(record['step']), **{k: repr(record[k]) for k in LOSS_COLUMNS[1:]}})


## -- code optimization -----------------------------------------------


def _code_loss(
    model: SemanticModel,
    constants: dict[str, Tensor],
    identity: Tensor | None,
    base: np.ndarray,
    target: np.ndarray,
    code: Tensor,
) -> Tensor:
    """
    Mean squared vertex error of `code` decoded onto `base`.

    Called by `optimize_code()`.
    """
    output: Tensor = ad.add(ad.constant(base), _displacement(model, constants, code, identity))
    return ad.scale(ad.sum_sq(ad.sub(output, ad.constant(target))), 1.0 / model.topology.vertex_count)


def optimize_code(
    model: SemanticModel,
    neutral: Mesh,
    expressive: Mesh,
    iters: int = 200,
    lr: float = 1e-2,
) -> ExpressionCode:
    """
    Refines the encoder's code with Adam to minimize reconstruction error; returns the best iterate seen.
    """
    start: ExpressionCode = encode_expression(model, expressive)
    if iters <= 0:
        return start
    target: np.ndarray = _as_batch(expressive, model)
    base: np.ndarray = _as_batch(neutral, model)
    constants: dict[str, Tensor] = _constants(model)
    identity: Tensor | None = None
    if model.config.variant == 'full':
        identity = _encoder_forward(model, constants, 'id', ad.constant(_normalize(model, base)))
    code_params: dict[str, Tensor] = {'z': ad.parameter(start.values[None])}
    state: AdamState = ad.init_adam_state(code_params, AdamConfig(lr=lr))
    best_values: np.ndarray = start.values
    best_loss: float = float('inf')
    for _ in range(iters):
        with Tape() as tape:
            loss: Tensor = _code_loss(model, constants, identity, base, target, code_params['z'])
        if float(loss.data) < best_loss:
            best_loss, best_values = float(loss.data), code_params['z'].data[0].copy()
        (grad,) = ad.backward(tape, loss, [code_params['z']])
        code_params, state = ad.adam_step(code_params, {'z': grad}, state)
    final: Tensor = _code_loss(model, constants, identity, base, target, ad.constant(code_params['z'].data))
    final_loss: float = float(final.data)
    if final_loss < best_loss:
        best_loss, best_values = final_loss, code_params['z'].data[0].copy()
    log.debug(f'optimized code; best L_rec, ``{best_loss:.6g}``')
    return ExpressionCode(values=best_values)


## -- baselines and metrics -------------------------------------------


def delta_transfer(expressive: Mesh, source_neutral: Mesh, target_neutral: Mesh) -> Mesh:
    """
    Copies the raw displacement E_s - N_s onto the target neutral.
    """
    return make_mesh(target_neutral.topology, target_neutral.vertices + (expressive.vertices - source_neutral.vertices))


def mean_vertex_error(a: Mesh | np.ndarray, b: Mesh | np.ndarray) -> float:
    """
    Mean per-vertex Euclidean distance in millimeters.
    """
    va: np.ndarray = a.vertices if isinstance(a, Mesh) else np.asarray(a)
    vb: np.ndarray = b.vertices if isinstance(b, Mesh) else np.asarray(b)
    return float(np.mean(np.linalg.norm(va - vb, axis=-1)))


@dataclass(frozen=True)
class LinearBasis:
    """
    Template plus orthonormal identity and expression bases, each row a flattened (V * 3) field.
    """

    template: np.ndarray
    identity_basis: np.ndarray
    expression_basis: np.ndarray


def _top_directions(samples: np.ndarray, k: int, label: str) -> np.ndarray:
    """
    Returns the top-k right singular vectors of `samples`, sign-fixed so each has a positive largest entry.
    """
    _, singular, vt = np.linalg.svd(samples, full_matrices=False)
    rank: int = int(np.sum(singular > singular[0] * 1e-10)) if singular.size and singular[0] > 0 else 0
    if rank < k:
        raise SemanticModelError('degenerate_covariance', f'{label} samples have rank {rank} < k = {k}')
    directions: np.ndarray = vt[:k]
    signs: np.ndarray = np.sign(directions[np.arange(k), np.argmax(np.abs(directions), axis=1)])
    return directions * signs[:, None]


def fit_linear_basis(
    neutrals: Sequence[Mesh],
    pairs: Sequence[tuple[Mesh, Mesh]],
    k_id: int,
    k_exp: int,
) -> LinearBasis:
    """
    Fits the template (mean neutral), the identity PCA basis and the expression displacement basis.

    Identity directions come from the centered neutrals; expression directions from the uncentered
    (expressive - neutral) displacements, so a zero displacement maps to zero coefficients.
    """
    if k_id < 1 or k_exp < 1:
        raise SemanticModelError('insufficient_samples', 'k_id and k_exp must be >= 1')
    if len(neutrals) < k_id or len(pairs) < k_exp:
        raise SemanticModelError(
            'insufficient_samples', f'need >= {k_id} neutrals and >= {k_exp} pairs, got {len(neutrals)} and {len(pairs)}'
        )
    neutral_rows: np.ndarray = np.stack([n.vertices.reshape(-1) for n in neutrals])
    template: np.ndarray = neutral_rows.mean(axis=0)
    identity_basis: np.ndarray = _top_directions(neutral_rows - template, k_id, 'identity')
    displacements: np.ndarray = np.stack([(e.vertices - n.vertices).reshape(-1) for n, e in pairs])
    expression_basis: np.ndarray = _top_directions(displacements, k_exp, 'expression')
    return LinearBasis(template=template.reshape(-1, 3), identity_basis=identity_basis, expression_basis=expression_basis)


def linear_coefficients(basis: LinearBasis, neutral: Mesh, expressive: Mesh) -> np.ndarray:
    """
    Least-squares expression coefficients for one subject's displacement (orthonormal basis rows).
    """
    return basis.expression_basis @ (expressive.vertices - neutral.vertices).reshape(-1)


def linear_reconstruct(basis: LinearBasis, neutral: Mesh, expressive: Mesh) -> Mesh:
    psi: np.ndarray = linear_coefficients(basis, neutral, expressive)
    return make_mesh(neutral.topology, neutral.vertices + (psi @ basis.expression_basis).reshape(-1, 3))


## -- persistence -----------------------------------------------------


def save_semantic_model(path: Path, model: SemanticModel, adam_state: AdamState | None = None) -> None:
    """
    Writes weights, template, scale and a JSON header into one `SRPK1` file.
    """
    header: dict[str, Any] = {
        'kind': 'semantic_model',
        'topology_id': model.topology.topology_id,
        'config': config_to_dict(model.config),
    }
    arrays: dict[str, np.ndarray] = {
        '__header__': ad.encode_text(json.dumps(header, sort_keys=True)),
        'template': model.template,
        'input_scale': np.array(model.input_scale),
    }
    arrays.update({f'param/{name}': value for name, value in model.params.items()})
    if adam_state is not None:
        arrays.update(adam_state.to_tensors())
    ad.save_tensors(path, arrays)


def load_semantic_model(path: Path, topology: Topology) -> SemanticModel:
    arrays: dict[str, np.ndarray] = ad.load_tensors(path)
    if '__header__' not in arrays:
        raise SemanticModelError('bad_model_file', f'{path}: missing header record')
    header: dict[str, Any] = json.loads(ad.decode_text(arrays['__header__']))
    if header.get('kind') != 'semantic_model':
        raise SemanticModelError('bad_model_file', f'{path}: not a semantic model file')
    if header['topology_id'] != topology.topology_id:
        raise SemanticModelError('topology_mismatch', f'{path}: model was trained on another topology')
    config: SemanticModelConfig = parse_strict(SemanticModelConfig, header['config'], context='model header')
    params: dict[str, np.ndarray] = {k[len('param/') :]: v for k, v in arrays.items() if k.startswith('param/')}
    expected: dict[str, tuple[int, ...]] = _layer_shapes(config, topology.vertex_count)
    if {k: v.shape for k, v in params.items()} != expected:
        raise SemanticModelError('bad_model_file', f'{path}: parameter shapes do not match the header config')
    spirals: np.ndarray = build_spiral_orderings(topology.vertex_count, topology.faces, config.spiral_len)
    ordered: dict[str, np.ndarray] = {name: params[name] for name in expected}
    return SemanticModel(topology, config, arrays['template'], float(arrays['input_scale']), spirals, ordered)
