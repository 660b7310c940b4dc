"""
Small shared builders for the unit tests: a 9 x 9 face template and tiny model configs.
"""

import numpy as np

import capture_model as cm
import semantic_model as sm
from synth_gen import FamilyConfig, build_template_face

TINY_CHANNELS: dict[str, tuple[int, ...]] = {'encoder_channels': (3, 4, 4), 'decoder_channels': (4, 4, 3)}


def small_face(spiral_len: int = 5):
    """
    Returns (topology, template) for an 81-vertex face with every region, both eyes and 16 landmarks.
    """
    return build_template_face(rows=9, cols=9, spiral_len=spiral_len, landmark_grid=4)


def tiny_family_config() -> FamilyConfig:
    return FamilyConfig(rows=9, cols=9, spiral_len=5, landmark_grid=4)


def tiny_model_config(variant: str = 'full', pool_stride: int = 1) -> sm.SemanticModelConfig:
    return sm.SemanticModelConfig(code_dim=4, spiral_len=5, variant=variant, pool_stride=pool_stride, **TINY_CHANNELS)


def tiny_train_config(**overrides) -> sm.SemanticTrainConfig:
    settings = {'code_dim': 4, 'spiral_len': 5, 'steps': 3, 'batch': 2, 'log_every': 0, **TINY_CHANNELS, **overrides}
    return sm.SemanticTrainConfig(**settings)


def smooth_offsets(template: np.ndarray, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    """
    Low-frequency per-vertex offsets: a random affine field in normalized face coordinates.
    """
    coords = template / np.abs(template).max(axis=0)
    return coords @ rng.normal(0.0, amplitude, size=(3, 3)) + rng.normal(0.0, amplitude, size=3)


def tiny_dataset(subjects: int = 3, expressions: int = 2, seed: int = 0) -> sm.SemanticDataset:
    """
    Subjects whose neutrals and expressions are smooth perturbations of the small template.
    """
    topology, template = small_face()
    rng = np.random.default_rng(seed)
    members = []
    for s in range(subjects):
        neutral = template + smooth_offsets(template, rng, 2.0)
        offsets = [smooth_offsets(template, rng, 1.0) for _ in range(expressions)]
        expressives = neutral + np.stack(offsets) if offsets else np.empty((0, *template.shape))
        members.append(sm.SubjectMeshes(f'subject-{s}', neutral, expressives))
    return sm.SemanticDataset(topology=topology, subjects=tuple(members))


def tiny_capture_config() -> cm.CaptureModelConfig:
    """
    A 16 x 16 capture network matching the small face (16 landmarks) and the tiny code size.
    """
    return cm.CaptureModelConfig(
        image_size=16,
        encoder=cm.EncoderConfig(stages=2, channels=(2, 4), feature_dim=8),
        code_dim=4,
        landmark_count=16,
        code_blocks=1,
        code_groups=2,
        classifier_width=4,
        classifier_groups=2,
        classifier_blocks=1,
    )
