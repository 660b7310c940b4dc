"""
Image-to-expression capture model.

A small conv encoder produces features phi; three heads read them:
  - the code head (residual linear + group-norm blocks) predicts the expression code,
  - the landmark head (a single linear layer) predicts normalized 2D landmarks,
  - the domain classifier sits behind a gradient-reversal op and predicts realish vs synthetic.

Training mixes synthetic and realish images half and half with geometric and occlusion
augmentation. `capture()` runs the code head and decodes the code with the semantic model.
"""

import csv
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import scipy.ndimage
from tqdm import tqdm

import autodiff as ad
import semantic_model as sm
from autodiff import AdamConfig, AdamState, Tape, Tensor
from geometry_core import Mesh
from strict_config import config_to_dict, parse_strict
from synth_gen import SynthSample

log = logging.getLogger(__name__)

CURVE_COLUMNS: tuple[str, ...] = ('step', 'L_code', 'L_lmks', 'L_d', 'total')
REALISH_LABEL: float = 1.0
SYNTHETIC_LABEL: float = 0.0


class CaptureError(Exception):
    """
    Signals invalid capture-model input; `kind` is a stable machine-readable label.
    """

    def __init__(self, kind: str, message: str) -> None:
        super().__init__(message)
        self.kind: str = kind


## -- configuration ---------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    stages: int = 4
    channels: tuple[int, ...] = (8, 16, 32, 64)
    feature_dim: int = 256

    def __post_init__(self) -> None:
        if self.stages < 1 or len(self.channels) != self.stages:
            raise ValueError('encoder needs one channel count per stage')


@dataclass(frozen=True)
class CaptureLossWeights:
    code: float = 10.0
    lmks: float = 1.0
    domain: float = 0.005
    reversal: float = 1.0

    def __post_init__(self) -> None:
        if min(self.code, self.lmks, self.domain, self.reversal) < 0:
            raise ValueError('capture loss weights must be >= 0')


@dataclass(frozen=True)
class AugmentConfig:
    max_rot_deg: float = 10.0
    max_trans_frac: float = 0.05
    scale_range: tuple[float, ...] = (0.9, 1.1)
    occlusion: bool = True
    max_occluders: int = 2
    max_occluder_frac: float = 0.25

    def __post_init__(self) -> None:
        if len(self.scale_range) != 2 or not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValueError('scale_range must be [low, high] with 0 < low <= high')
        if not 0 <= self.max_occluder_frac <= 1:
            raise ValueError('max_occluder_frac must lie in [0, 1]')


@dataclass(frozen=True)
class CaptureModelConfig:
    image_size: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    code_dim: int = 64
    landmark_count: int = 64
    code_blocks: int = 3
    code_groups: int = 32
    classifier_width: int = 128
    classifier_groups: int = 16
    classifier_blocks: int = 2

    def __post_init__(self) -> None:
        if self.image_size % (2**self.encoder.stages):
            raise ValueError(f'image_size must be divisible by 2 ** {self.encoder.stages}')
        if self.encoder.feature_dim % self.code_groups or self.classifier_width % self.classifier_groups:
            raise ValueError('group counts must divide their layer widths')


@dataclass(frozen=True)
class CaptureTrainConfig:
    """
    Training settings with the network shape at the top level; architecture knobs beyond `encoder` and
    `code_dim` are optional.
    """

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    code_dim: int = 64
    image_size: int = 64
    landmark_count: int = 64
    code_blocks: int = 3
    code_groups: int = 32
    classifier_width: int = 128
    classifier_groups: int = 16
    classifier_blocks: int = 2
    weights: CaptureLossWeights = field(default_factory=CaptureLossWeights)
    adam: AdamConfig = field(default_factory=AdamConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    steps: int = 1500
    batch: int = 16
    seed: int = 0
    synthetic_only: bool = False
    log_every: int = 100

    def __post_init__(self) -> None:
        if self.batch < 2:
            raise ValueError('batch must hold at least one synthetic and one realish image')
        _ = self.model

    @property
    def model(self) -> CaptureModelConfig:
        return CaptureModelConfig(**{f.name: getattr(self, f.name) for f in fields(CaptureModelConfig)})

    @classmethod
    def with_model(cls, model: CaptureModelConfig, **settings: Any) -> 'CaptureTrainConfig':
        """
        Builds a training config around an existing network shape.
        """
        shape: dict[str, Any] = {f.name: getattr(model, f.name) for f in fields(CaptureModelConfig)}
        return cls(**shape, **settings)


## -- model -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CaptureModel:
    config: CaptureModelConfig
    params: dict[str, np.ndarray]


@dataclass(frozen=True)
class CaptureOutputs:
    phi: Tensor
    codes: Tensor
    landmarks: Tensor
    domain_logits: Tensor


def _linear_shapes(shapes: dict[str, tuple[int, ...]], name: str, fan_in: int, fan_out: int) -> None:
    shapes[f'{name}/weight'] = (fan_in, fan_out)
    shapes[f'{name}/bias'] = (fan_out,)


def _block_shapes(shapes: dict[str, tuple[int, ...]], name: str, width: int) -> None:
    _linear_shapes(shapes, name, width, width)
    shapes[f'{name}/gamma'] = (width,)
    shapes[f'{name}/beta'] = (width,)


def _parameter_shapes(config: CaptureModelConfig) -> dict[str, tuple[int, ...]]:
    """
    Lists every parameter name and shape in a fixed order.

    Called by `init_capture_model()` and `load_capture_model()`.
    """
    shapes: dict[str, tuple[int, ...]] = {}
    c_in: int = 1
    for i, c_out in enumerate(config.encoder.channels):
        shapes[f'img/conv{i}/weight'] = (c_out, c_in, 3, 3)
        shapes[f'img/conv{i}/bias'] = (c_out,)
        c_in = c_out
    side: int = config.image_size // (2**config.encoder.stages)
    phi: int = config.encoder.feature_dim
    _linear_shapes(shapes, 'img/linear', c_in * side * side, phi)
    for i in range(config.code_blocks):
        _block_shapes(shapes, f'code/block{i}', phi)
    _linear_shapes(shapes, 'code/out', phi, config.code_dim)
    _linear_shapes(shapes, 'lmks', phi, 2 * config.landmark_count)
    _linear_shapes(shapes, 'dom/in', phi, config.classifier_width)
    shapes['dom/in/gamma'] = (config.classifier_width,)
    shapes['dom/in/beta'] = (config.classifier_width,)
    for i in range(config.classifier_blocks):
        _block_shapes(shapes, f'dom/block{i}', config.classifier_width)
    _linear_shapes(shapes, 'dom/out', config.classifier_width, 1)
    return shapes


def init_capture_model(config: CaptureModelConfig, seed: int = 0) -> CaptureModel:
    rng: np.random.Generator = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _parameter_shapes(config).items():
        if name.endswith('/gamma'):
            params[name] = np.ones(shape)
        elif name.endswith('/bias') or name.endswith('/beta'):
            params[name] = np.zeros(shape)
        else:
            fan_in: int = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
    return CaptureModel(config=config, params=params)


def parameter_leaves(model: CaptureModel) -> dict[str, Tensor]:
    return {name: ad.parameter(value) for name, value in model.params.items()}


def _constants(model: CaptureModel) -> dict[str, Tensor]:
    return {name: ad.constant(value) for name, value in model.params.items()}


def _linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return ad.add(ad.matmul(x, params[f'{name}/weight']), params[f'{name}/bias'])


def _normed(x: Tensor, params: dict[str, Tensor], name: str, groups: int) -> Tensor:
    """
    Group normalization followed by the per-channel affine (gamma, beta).
    """
    return ad.add(ad.mul(ad.group_norm(x, groups), params[f'{name}/gamma']), params[f'{name}/beta'])


def _residual_block(x: Tensor, params: dict[str, Tensor], name: str, groups: int) -> Tensor:
    return ad.add(x, _normed(ad.gelu(_linear(x, params, name)), params, name, groups))


def _prepare_images(model: CaptureModel, images: np.ndarray) -> np.ndarray:
    batch: np.ndarray = np.asarray(images, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    size: int = model.config.image_size
    if batch.shape[1:] != (size, size):
        raise CaptureError('size_mismatch', f'expected {size} x {size} images, got {batch.shape[1:]}')
    return (batch / 255.0)[:, None, :, :]


def forward(
    model: CaptureModel,
    images: np.ndarray,
    params: dict[str, Tensor] | None = None,
    reversal_lambda: float | None = None,
) -> CaptureOutputs:
    """
    Runs encoder and heads on (B, H, W) or (H, W) 0-255 images.

    Landmarks come out as (B, 2 * L) values in normalized [0, 1] image coordinates.
    """
    p: dict[str, Tensor] = params if params is not None else _constants(model)
    cfg: CaptureModelConfig = model.config
    h: Tensor = ad.constant(_prepare_images(model, images))
    for i in range(cfg.encoder.stages):
        h = ad.conv2d(h, p[f'img/conv{i}/weight'], p[f'img/conv{i}/bias'], stride=1, padding=1)
        h = ad.avg_pool2d(ad.gelu(h), 2)
    batch: int = h.shape[0]
    phi: Tensor = ad.gelu(_linear(ad.reshape(h, (batch, -1)), p, 'img/linear'))

    code_h: Tensor = phi
    for i in range(cfg.code_blocks):
        code_h = _residual_block(code_h, p, f'code/block{i}', cfg.code_groups)
    codes: Tensor = _linear(code_h, p, 'code/out')

    landmarks: Tensor = _linear(phi, p, 'lmks')

    lam: float = 1.0 if reversal_lambda is None else reversal_lambda
    dom: Tensor = ad.grad_reversal(phi, lam)
    dom = ad.gelu(_normed(_linear(dom, p, 'dom/in'), p, 'dom/in', cfg.classifier_groups))
    for i in range(cfg.classifier_blocks):
        dom = _residual_block(dom, p, f'dom/block{i}', cfg.classifier_groups)
    logits: Tensor = _linear(dom, p, 'dom/out')
    return CaptureOutputs(phi=phi, codes=codes, landmarks=landmarks, domain_logits=logits)


## -- losses ----------------------------------------------------------


@dataclass(frozen=True)
class CaptureLossTerms:
    code: Tensor
    lmks: Tensor
    domain: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            'L_code': float(self.code.data),
            'L_lmks': float(self.lmks.data),
            'L_d': float(self.domain.data),
            'total': float(self.total.data),
        }


def normalized_landmarks(points: np.ndarray, image_size: int) -> np.ndarray:
    """
    Maps (B, L, 2) pixel landmarks to flattened (B, 2L) coordinates in [0, 1].
    """
    array: np.ndarray = np.asarray(points, dtype=np.float64)
    return (array / float(image_size)).reshape(array.shape[0], -1)


def capture_loss_terms(
    weights: CaptureLossWeights,
    outputs: CaptureOutputs,
    true_codes: np.ndarray,
    synthetic_mask: np.ndarray,
    true_landmarks: np.ndarray,
    domain_labels: np.ndarray,
) -> CaptureLossTerms:
    """
    Code loss over synthetic rows only, landmark loss (per-landmark mean squared distance) and domain BCE.

    `true_landmarks` is (B, 2L) normalized; rows of `true_codes` for non-synthetic samples are ignored.
    """
    mask: np.ndarray = np.asarray(synthetic_mask, dtype=bool)
    synthetic_count: int = int(mask.sum())
    if synthetic_count == 0:
        raise CaptureError('no_synthetic_samples', 'the code loss needs at least one synthetic sample')
    code_dim: int = outputs.codes.shape[1]
    gate: np.ndarray = np.repeat(mask[:, None].astype(np.float64), code_dim, axis=1)
    targets: np.ndarray = np.where(gate > 0, np.asarray(true_codes, dtype=np.float64), 0.0)
    code: Tensor = ad.scale(
        ad.sum_sq(ad.mul(ad.sub(outputs.codes, ad.constant(targets)), ad.constant(gate))),
        1.0 / (synthetic_count * code_dim),
    )
    batch, width = outputs.landmarks.shape
    lmks: Tensor = ad.scale(ad.sum_sq(ad.sub(outputs.landmarks, ad.constant(true_landmarks))), 2.0 / (batch * width))
    labels: np.ndarray = np.asarray(domain_labels, dtype=np.float64).reshape(-1, 1)
    domain: Tensor = ad.bce_with_logits(outputs.domain_logits, labels)
    total: Tensor = ad.add(
        ad.add(ad.scale(code, weights.code), ad.scale(lmks, weights.lmks)), ad.scale(domain, weights.domain)
    )
    return CaptureLossTerms(code=code, lmks=lmks, domain=domain, total=total)


## -- augmentation ----------------------------------------------------


def augment_sample(
    image: np.ndarray, landmarks: np.ndarray, rng: np.random.Generator, config: AugmentConfig
) -> tuple[np.ndarray, np.ndarray]:
    """
    Applies a random similarity transform to image and landmarks together, then paints occluding rectangles.

    Landmarks are pixel (x, y); the returned image is float64 in 0-255.
    """
    pixels: np.ndarray = np.asarray(image, dtype=np.float64)
    height, width = pixels.shape
    angle: float = math.radians(float(rng.uniform(-config.max_rot_deg, config.max_rot_deg)))
    zoom: float = float(rng.uniform(config.scale_range[0], config.scale_range[1]))
    shift: np.ndarray = rng.uniform(-config.max_trans_frac, config.max_trans_frac, size=2) * np.array([height, width])
    rotation: np.ndarray = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    center: np.ndarray = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    inverse: np.ndarray = rotation.T / zoom
    offset: np.ndarray = center - inverse @ (center + shift)
    warped: np.ndarray = scipy.ndimage.affine_transform(pixels, inverse, offset=offset, order=1, mode='constant', cval=0.0)

    points: np.ndarray = np.asarray(landmarks, dtype=np.float64)
    index_space: np.ndarray = np.stack([points[:, 1] - 0.5, points[:, 0] - 0.5], axis=-1)
    moved: np.ndarray = (index_space - center) @ (zoom * rotation).T + center + shift
    new_points: np.ndarray = np.stack([moved[:, 1] + 0.5, moved[:, 0] + 0.5], axis=-1)

    if config.occlusion:
        for _ in range(int(rng.integers(0, config.max_occluders + 1))):
            area: float = float(rng.uniform(0.02, config.max_occluder_frac)) * height * width
            aspect: float = float(rng.uniform(0.5, 2.0))
            box_w: int = int(np.clip(round(math.sqrt(area * aspect)), 1, width))
            box_h: int = int(np.clip(math.floor(area / box_w), 1, height))
            top: int = int(rng.integers(0, height - box_h + 1))
            left: int = int(rng.integers(0, width - box_w + 1))
            warped[top : top + box_h, left : left + box_w] = 0.0
    return warped, new_points


## -- training --------------------------------------------------------


@dataclass
class CaptureTrainResult:
    model: CaptureModel
    curve: list[dict[str, float]]
    adam_state: AdamState


def _assemble_batch(
    samples: Sequence[SynthSample],
    picks: Sequence[int],
    rng: np.random.Generator,
    config: CaptureTrainConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images: list[np.ndarray] = []
    codes: list[np.ndarray] = []
    landmarks: list[np.ndarray] = []
    for index in picks:
        sample: SynthSample = samples[index]
        image, points = augment_sample(sample.image, sample.landmarks.points, rng, config.augment)
        images.append(image)
        codes.append(sample.code)
        landmarks.append(points)
    return np.stack(images), np.stack(codes), np.stack(landmarks)


def train_capture(
    synthetic: Sequence[SynthSample],
    realish: Sequence[SynthSample],
    config: CaptureTrainConfig,
    progress: bool = False,
) -> CaptureTrainResult:
    """
    Minimizes the weighted code + landmark + domain loss on half-synthetic, half-realish batches.

    With `synthetic_only` the realish set is ignored and every batch is synthetic with no domain term.
    """
    if not synthetic:
        raise CaptureError('empty_set', 'the synthetic training set is empty')
    if not realish and not config.synthetic_only:
        raise CaptureError('empty_set', 'the realish training set is empty')
    model_cfg: CaptureModelConfig = config.model
    for sample in synthetic:
        if sample.code.shape != (model_cfg.code_dim,):
            raise CaptureError('code_dim_mismatch', f'sample code has shape {sample.code.shape}')
    seeds: list[np.random.SeedSequence] = np.random.SeedSequence(config.seed).spawn(2)
    model: CaptureModel = init_capture_model(model_cfg, int(seeds[0].generate_state(1)[0]))
    rng: np.random.Generator = np.random.default_rng(seeds[1])
    params: dict[str, Tensor] = parameter_leaves(model)
    state: AdamState = ad.init_adam_state(params, config.adam)
    weights: CaptureLossWeights = config.weights
    if config.synthetic_only:
        weights = CaptureLossWeights(code=weights.code, lmks=weights.lmks, domain=0.0, reversal=weights.reversal)
    synthetic_count: int = config.batch if config.synthetic_only else config.batch // 2
    curve: list[dict[str, float]] = []
    log.info(f'training capture model; steps, ``{config.steps}``; synthetic-only, ``{config.synthetic_only}``')
    for step in tqdm(range(config.steps), desc='Training capture model', disable=not progress):
        syn_images, syn_codes, syn_lmks = _assemble_batch(
            synthetic, rng.integers(0, len(synthetic), size=synthetic_count).tolist(), rng, config
        )
        parts_images: list[np.ndarray] = [syn_images]
        parts_codes: list[np.ndarray] = [syn_codes]
        parts_lmks: list[np.ndarray] = [syn_lmks]
        labels: list[float] = [SYNTHETIC_LABEL] * synthetic_count
        if not config.synthetic_only:
            realish_count: int = config.batch - synthetic_count
            r_images, r_codes, r_lmks = _assemble_batch(
                realish, rng.integers(0, len(realish), size=realish_count).tolist(), rng, config
            )
            parts_images.append(r_images)
            parts_codes.append(r_codes)
            parts_lmks.append(r_lmks)
            labels.extend([REALISH_LABEL] * realish_count)
        mask: np.ndarray = np.array([label == SYNTHETIC_LABEL for label in labels])
        with Tape() as tape:
            outputs: CaptureOutputs = forward(model, np.concatenate(parts_images), params, weights.reversal)
            terms: CaptureLossTerms = capture_loss_terms(
                weights,
                outputs,
                np.concatenate(parts_codes),
                mask,
                normalized_landmarks(np.concatenate(parts_lmks), model_cfg.image_size),
                np.array(labels),
            )
        names: list[str] = list(params)
        grads: list[np.ndarray] = ad.backward(tape, terms.total, [params[name] for name in names])
        params, state = ad.adam_step(params, dict(zip(names, grads, strict=True)), state)
        record: dict[str, float] = {'step': float(step), **terms.as_floats()}
        curve.append(record)
        if config.log_every and step % config.log_every == 0:
            log.info(f'step {step}; total, ``{record["total"]:.6g}``; L_code, ``{record["L_code"]:.6g}``')
    trained = CaptureModel(config=model_cfg, params={name: tensor.data for name, tensor in params.items()})
    return CaptureTrainResult(model=trained, curve=curve, adam_state=state)


def save_capture_curve(path: Path, curve: list[dict[str, float]]) -> None:
    with Path(path).open('w', encoding='utf-8', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=list(CURVE_COLUMNS), lineterminator='\n')
        writer.writeheader()
        for record in curve:
            writer.writerow({'step': int(record['step']), **{k: repr(record[k]) for k in CURVE_COLUMNS[1:]}})


## -- inference -------------------------------------------------------


def predict_codes(model: CaptureModel, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """
    Predicts (N, code_dim) codes in fixed-size chunks.
    """
    batch: np.ndarray = np.asarray(images)
    if batch.ndim == 2:
        batch = batch[None]
    pieces: list[np.ndarray] = [forward(model, batch[i : i + chunk]).codes.data for i in range(0, batch.shape[0], chunk)]
    return np.concatenate(pieces, axis=0) if pieces else np.zeros((0, model.config.code_dim))


def code_errors(predicted: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """
    Per-sample mean squared code error.
    """
    return np.mean((np.asarray(predicted) - np.asarray(truth)) ** 2, axis=-1)


def capture(model: CaptureModel, semantic: sm.SemanticModel, image: np.ndarray, neutral: Mesh) -> Mesh:
    """
    Predicts the expression code from one image and decodes it onto `neutral`.
    """
    if semantic.config.code_dim != model.config.code_dim:
        raise CaptureError('code_dim_mismatch', 'capture and semantic models disagree on code_dim')
    code: np.ndarray = predict_codes(model, image)[0]
    return sm.decode_mesh(semantic, sm.ExpressionCode(values=code), neutral)


## -- persistence -----------------------------------------------------


def save_capture_model(path: Path, model: CaptureModel, adam_state: AdamState | None = None) -> None:
    header: dict[str, Any] = {'kind': 'capture_model', 'config': config_to_dict(model.config)}
    arrays: dict[str, np.ndarray] = {'__header__': ad.encode_text(json.dumps(header, sort_keys=True))}
    arrays.update({f'param/{name}': value for name, value in model.params.items()})
    if adam_state is not None:
        arrays.update(adam_state.to_tensors())
    ad.save_tensors(path, arrays)


def load_capture_model(path: Path) -> CaptureModel:
    arrays: dict[str, np.ndarray] = ad.load_tensors(path)
    if '__header__' not in arrays:
        raise CaptureError('bad_model_file', f'{path}: missing header record')
    header: dict[str, Any] = json.loads(ad.decode_text(arrays['__header__']))
    if header.get('kind') != 'capture_model':
        raise CaptureError('bad_model_file', f'{path}: not a capture model file')
    config: CaptureModelConfig = parse_strict(CaptureModelConfig, header['config'], context='model header')
    expected: dict[str, tuple[int, ...]] = _parameter_shapes(config)
    params: dict[str, np.ndarray] = {k[len('param/') :]: v for k, v in arrays.items() if k.startswith('param/')}
    if {k: v.shape for k, v in params.items()} != expected:
        raise CaptureError('bad_model_file', f'{path}: parameter shapes do not match the header config')
    return CaptureModel(config=config, params={name: params[name] for name in expected})
