"""
Procedural face data.

- `build_template_face()` makes the grid face template (masks, eyelids, landmarks).
- The oracle family turns identity seeds into neutrals and identity-conditioned expressions, which
  gives paired cross-identity ground truth for retargeting evaluation.
- `sample_synth_capture_set()` decodes sampled codes onto sampled neutrals, renders them with a
  small rasterizer (`synthetic` point splats or `realish` shaded triangles plus noise) and projects
  the landmarks.
- PGM / CSV / JSON writers and readers for all of the above.
"""

import functools
import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import tqdm

import semantic_model as sm
from geometry_core import (
    EYE_NAMES,
    MASK_FILE_KEYS,
    Camera,
    GeometryError,
    LandmarkSet,
    Mesh,
    Topology,
    build_topology,
    camera_from_json,
    load_landmarks_csv,
    load_mesh,
    load_topology,
    look_at_yaw,
    make_mesh,
    project_landmarks,
    project_points,
    save_landmarks_csv,
    save_mesh,
    save_topology,
)
from strict_config import config_to_dict, parse_strict

log = logging.getLogger(__name__)

ARCHETYPE_NAMES: tuple[str, ...] = ('smile', 'jaw_open', 'pucker', 'brow_raise', 'smile_left', 'cheek_puff', 'blink')
FACE_HALF_WIDTH_MM: float = 70.0
FACE_HALF_HEIGHT_MM: float = 90.0
STYLES: tuple[str, ...] = ('synthetic', 'realish')
DECODE_CHUNK: int = 64


class SynthError(Exception):
    """
    Signals invalid data-generation input; `kind` is a stable machine-readable label.
    """

    def __init__(self, kind: str, message: str) -> None:
        super().__init__(message)
        self.kind: str = kind


## -- template ------------------------------------------------------


def _nearest(values: np.ndarray, target: float) -> int:
    return int(np.argmin(np.abs(values - target)))


def build_template_face(
    rows: int = 24, cols: int = 21, spiral_len: int = 9, landmark_grid: int = 8
) -> tuple[Topology, np.ndarray]:
    """
    Builds a face-shaped height-field grid and its Topology.

    Returns (topology, template vertices). The face looks toward -z (toward a camera placed at +z
    distance), rows run top to bottom, and quads split along one diagonal direction so interior
    vertices have valence 6.
    """
    if rows < 6 or cols < 6:
        raise SynthError('invalid_template', 'template grid needs at least 6 x 6 vertices')
    xn: np.ndarray = np.linspace(-1.0, 1.0, cols)
    yn: np.ndarray = np.linspace(1.0, -1.0, rows)
    grid_x, grid_y = np.meshgrid(xn, yn)
    height: np.ndarray = (
        35.0 * (1.0 - 0.5 * grid_x**2 - 0.3 * grid_y**2)
        + 18.0 * np.exp(-(grid_x**2) / (2 * 0.08**2) - (grid_y + 0.1) ** 2 / (2 * 0.2**2))
        + 4.0 * np.exp(-((grid_y - 0.42) ** 2) / (2 * 0.06**2))
    )
    vertices: np.ndarray = np.stack(
        [grid_x * FACE_HALF_WIDTH_MM, grid_y * FACE_HALF_HEIGHT_MM, -height], axis=-1
    ).reshape(-1, 3)

    faces: list[tuple[int, int, int]] = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            v00, v01 = r * cols + c, r * cols + c + 1
            v10, v11 = (r + 1) * cols + c, (r + 1) * cols + c + 1
            faces.append((v00, v10, v11))
            faces.append((v00, v11, v01))

    flat_x: np.ndarray = grid_x.reshape(-1)
    flat_y: np.ndarray = grid_y.reshape(-1)
    abs_x: np.ndarray = np.abs(flat_x)
    lid_row: int = _nearest(yn, 0.3)
    eyelids: dict[str, tuple[list[int], list[int]]] = {}
    eye_columns: dict[str, np.ndarray] = {
        'left': np.flatnonzero((xn >= -0.65) & (xn <= -0.25)),
        'right': np.flatnonzero((xn >= 0.25) & (xn <= 0.65)),
    }
    lid_vertices: set[int] = set()
    for eye in EYE_NAMES:
        columns: np.ndarray = eye_columns[eye]
        if columns.size < 2:
            columns = np.array([_nearest(xn, -0.45 if eye == 'left' else 0.45)] * 2) + np.array([0, 1])
        upper: list[int] = [lid_row * cols + int(c) for c in columns]
        lower: list[int] = [(lid_row + 1) * cols + int(c) for c in columns]
        eyelids[eye] = (upper, lower)
        lid_vertices.update(upper + lower)

    region: dict[str, list[int]] = {name: [] for name in ('cheek', 'forehead', 'mouth', 'nose')}
    for v in range(rows * cols):
        if v in lid_vertices:
            continue
        x, y = flat_x[v], flat_y[v]
        if y > 0.55:
            region['forehead'].append(v)
        elif abs_x[v] < 0.2 and -0.35 < y < 0.15:
            region['nose'].append(v)
        elif abs_x[v] < 0.45 and -0.8 < y < -0.45:
            region['mouth'].append(v)
        elif 0.3 < abs_x[v] < 0.9 and -0.45 < y < 0.1:
            region['cheek'].append(v)

    grid: int = min(landmark_grid, rows, cols)
    landmark_rows: np.ndarray = np.round(np.linspace(1, rows - 2, grid)).astype(int)
    landmark_cols: np.ndarray = np.round(np.linspace(1, cols - 2, grid)).astype(int)
    landmarks: list[int] = [int(r * cols + c) for r in landmark_rows for c in landmark_cols]

    topology: Topology = build_topology(
        vertex_count=rows * cols,
        faces=faces,
        spiral_len=spiral_len,
        region_masks=region,
        eyelid_polylines=eyelids,
        landmark_indices=landmarks,
    )
    log.debug(f'template face; vertices, ``{topology.vertex_count}``; faces, ``{len(faces)}``')
    return topology, vertices


## -- oracle family -------------------------------------------------


@dataclass(frozen=True)
class FamilyConfig:
    rows: int = 24
    cols: int = 21
    spiral_len: int = 9
    landmark_grid: int = 8
    identity_centers: int = 8
    identity_offset_mm: float = 4.0
    identity_radius_mm: float = 35.0
    identity_scale_sigma: float = 0.05
    gain_low: float = 0.6
    gain_high: float = 1.4
    saturation_mm: float = 12.0
    archetypes: tuple[str, ...] = ARCHETYPE_NAMES

    def __post_init__(self) -> None:
        unknown: list[str] = [name for name in self.archetypes if name not in ARCHETYPE_NAMES]
        if unknown:
            raise ValueError(f'unknown archetype(s) {unknown}')
        if not self.archetypes:
            raise ValueError('at least one archetype is required')
        if not 0 < self.gain_low <= 1.0 <= self.gain_high:
            raise ValueError('gain range must bracket 1 and be positive')
        if self.saturation_mm <= 0:
            raise ValueError('saturation_mm must be positive')


@dataclass(frozen=True, eq=False)
class OracleFamily:
    config: FamilyConfig
    topology: Topology
    template: np.ndarray
    archetype_fields: dict[str, np.ndarray]

    @property
    def archetypes(self) -> tuple[str, ...]:
        return self.config.archetypes


def _bump(points: np.ndarray, center: tuple[float, float], sigma: tuple[float, float]) -> np.ndarray:
    xn: np.ndarray = points[:, 0] / FACE_HALF_WIDTH_MM
    yn: np.ndarray = points[:, 1] / FACE_HALF_HEIGHT_MM
    return np.exp(-((xn - center[0]) ** 2) / (2 * sigma[0] ** 2) - (yn - center[1]) ** 2 / (2 * sigma[1] ** 2))


def _archetype_field(name: str, template: np.ndarray) -> np.ndarray:
    """
    Returns a smooth (V, 3) template-space displacement for one archetype; blink is handled per identity.
    """
    xn: np.ndarray = template[:, 0] / FACE_HALF_WIDTH_MM
    yn: np.ndarray = template[:, 1] / FACE_HALF_HEIGHT_MM
    out: np.ndarray = np.zeros_like(template)
    match name:
        case 'smile':
            weight = _bump(template, (-0.4, -0.6), (0.15, 0.12)) + _bump(template, (0.4, -0.6), (0.15, 0.12))
            out[:, 0] = 4.0 * np.sign(xn) * weight
            out[:, 1] = 6.0 * weight
            out[:, 2] = 2.0 * weight
        case 'jaw_open':
            weight = 1.0 / (1.0 + np.exp((yn + 0.55) / 0.05))
            out[:, 1] = -12.0 * weight
            out[:, 2] = 3.0 * weight
        case 'pucker':
            weight = _bump(template, (0.0, -0.62), (0.2, 0.1))
            out[:, 0] = -6.0 * xn * weight
            out[:, 2] = -8.0 * weight
        case 'brow_raise':
            weight = np.exp(-((yn - 0.42) ** 2) / (2 * 0.1**2))
            out[:, 1] = 6.0 * weight
        case 'smile_left':
            weight = _bump(template, (-0.4, -0.6), (0.15, 0.12))
            out[:, 0] = -4.0 * weight
            out[:, 1] = 7.0 * weight
        case 'cheek_puff':
            weight = _bump(template, (-0.55, -0.2), (0.15, 0.15)) + _bump(template, (0.55, -0.2), (0.15, 0.15))
            out[:, 0] = 3.0 * np.sign(xn) * weight
            out[:, 2] = -6.0 * weight
        case 'blink':
            pass
    return out


def build_oracle_family(config: FamilyConfig | None = None) -> OracleFamily:
    cfg: FamilyConfig = config or FamilyConfig()
    topology, template = build_template_face(cfg.rows, cfg.cols, cfg.spiral_len, cfg.landmark_grid)
    fields: dict[str, np.ndarray] = {name: _archetype_field(name, template) for name in cfg.archetypes}
    return OracleFamily(config=cfg, topology=topology, template=template, archetype_fields=fields)


def _identity_rng(identity_seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([identity_seed, stream]))


def _rbf_field(family: OracleFamily, rng: np.random.Generator, channels: int, amplitude: float) -> np.ndarray:
    """
    Sums Gaussian radial bumps centered on random template vertices.
    """
    cfg: FamilyConfig = family.config
    centers: np.ndarray = family.template[rng.integers(0, family.template.shape[0], size=cfg.identity_centers)]
    amplitudes: np.ndarray = rng.normal(0.0, amplitude, size=(cfg.identity_centers, channels))
    squared: np.ndarray = np.sum((family.template[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    basis: np.ndarray = np.exp(-squared / (2.0 * cfg.identity_radius_mm**2))
    return basis @ amplitudes


def identity_neutral(family: OracleFamily, identity_seed: int) -> np.ndarray:
    """
    Deterministic neutral for one identity: per-axis scaling plus smooth radial offsets.
    """
    rng: np.random.Generator = _identity_rng(identity_seed, 0)
    axis_scale: np.ndarray = 1.0 + rng.normal(0.0, family.config.identity_scale_sigma, size=3)
    offsets: np.ndarray = _rbf_field(family, rng, 3, family.config.identity_offset_mm)
    return family.template * axis_scale + offsets


def identity_gain(family: OracleFamily, identity_seed: int) -> np.ndarray:
    """
    Smooth per-vertex expression gain in (gain_low, gain_high) for one identity.
    """
    cfg: FamilyConfig = family.config
    raw: np.ndarray = _rbf_field(family, _identity_rng(identity_seed, 1), 1, 1.5)[:, 0]
    squashed: np.ndarray = np.tanh(raw)
    return np.where(squashed >= 0.0, 1.0 + (cfg.gain_high - 1.0) * squashed, 1.0 + (1.0 - cfg.gain_low) * squashed)


def expression_vertices(family: OracleFamily, identity_seed: int, weights: np.ndarray) -> np.ndarray:
    """
    Applies an archetype blend to one identity.

    The blended field d becomes gain * tanh(d / s) * s (s = saturation), so the same blend moves
    different identities differently. Blink moves each upper lid onto that identity's lower lid.
    """
    blend: np.ndarray = np.asarray(weights, dtype=np.float64)
    if blend.shape != (len(family.archetypes),):
        raise SynthError('invalid_blend', f'expected {len(family.archetypes)} archetype weights, got {blend.shape}')
    neutral: np.ndarray = identity_neutral(family, identity_seed)
    linear: np.ndarray = np.zeros_like(neutral)
    for weight, name in zip(blend.tolist(), family.archetypes, strict=True):
        if name != 'blink':
            linear = linear + weight * family.archetype_fields[name]
    s: float = family.config.saturation_mm
    displacement: np.ndarray = identity_gain(family, identity_seed)[:, None] * np.tanh(linear / s) * s
    if 'blink' in family.archetypes:
        closure: float = float(blend[family.archetypes.index('blink')])
        for upper, lower in family.topology.eyelid_polylines.values():
            displacement[upper] = displacement[upper] + closure * (neutral[lower] - neutral[upper])
    return neutral + displacement


def conditioning_gap(family: OracleFamily, seed_a: int, seed_b: int) -> float:
    """
    Largest relative difference between two identities' displacements over the single archetypes.
    """
    worst: float = 0.0
    for k in range(len(family.archetypes)):
        unit: np.ndarray = np.zeros(len(family.archetypes))
        unit[k] = 1.0
        d_a: np.ndarray = expression_vertices(family, seed_a, unit) - identity_neutral(family, seed_a)
        d_b: np.ndarray = expression_vertices(family, seed_b, unit) - identity_neutral(family, seed_b)
        norm: float = float(np.linalg.norm(d_a))
        if norm > 0:
            worst = max(worst, float(np.linalg.norm(d_b - d_a)) / norm)
    return worst


## -- oracle dataset ------------------------------------------------


@dataclass(frozen=True, eq=False)
class OracleIdentity:
    identity_seed: int
    split: str
    neutral: np.ndarray
    expression_weights: np.ndarray
    expressives: np.ndarray


@dataclass(frozen=True, eq=False)
class OracleDataset:
    family: OracleFamily
    identities: tuple[OracleIdentity, ...]

    def split(self, name: str) -> list[OracleIdentity]:
        return [identity for identity in self.identities if identity.split == name]

    def semantic_dataset(self, splits: Sequence[str] = ('train', 'neutral_only')) -> sm.SemanticDataset:
        subjects: tuple[sm.SubjectMeshes, ...] = tuple(
            sm.SubjectMeshes(f'{identity.split}-{identity.identity_seed}', identity.neutral, identity.expressives)
            for identity in self.identities
            if identity.split in splits
        )
        return sm.SemanticDataset(topology=self.family.topology, subjects=subjects)

    def paired_ground_truth(self, source: OracleIdentity, expression_index: int, target: OracleIdentity) -> np.ndarray:
        """
        Ground-truth mesh of `source`'s expression `expression_index` performed by `target`.
        """
        return expression_vertices(self.family, target.identity_seed, source.expression_weights[expression_index])


def sample_blend(rng: np.random.Generator, archetype_count: int) -> np.ndarray:
    """
    Random blend of one or two archetypes with intensities in [0, 1].
    """
    weights: np.ndarray = np.zeros(archetype_count)
    chosen: np.ndarray = rng.choice(archetype_count, size=min(int(rng.integers(1, 3)), archetype_count), replace=False)
    weights[chosen] = rng.uniform(0.0, 1.0, size=chosen.size)
    return weights


def generate_oracle_dataset(
    family: OracleFamily,
    n_identities: int,
    n_expressions_per_id: int,
    seed: int,
    n_heldout: int = 0,
    n_neutral_only: int = 0,
) -> OracleDataset:
    """
    Generates train / held-out identities with sampled expressions, plus optional neutral-only identities.
    """
    if n_identities < 2:
        raise SynthError('too_few_identities', 'need at least two identities for paired ground truth')
    children: list[np.random.SeedSequence] = np.random.SeedSequence(seed).spawn(n_identities + n_heldout + n_neutral_only)
    splits: list[str] = ['train'] * n_identities + ['heldout'] * n_heldout + ['neutral_only'] * n_neutral_only
    identities: list[OracleIdentity] = []
    for child, split in zip(children, splits, strict=True):
        identity_seed: int = int(child.generate_state(1)[0])
        rng: np.random.Generator = np.random.default_rng(child)
        count: int = 0 if split == 'neutral_only' else n_expressions_per_id
        weights: np.ndarray = np.stack([sample_blend(rng, len(family.archetypes)) for _ in range(count)]) if count else (
            np.zeros((0, len(family.archetypes)))
        )
        neutral: np.ndarray = identity_neutral(family, identity_seed)
        expressives: np.ndarray = (
            np.stack([expression_vertices(family, identity_seed, w) for w in weights])
            if count
            else np.zeros((0, family.topology.vertex_count, 3))
        )
        identities.append(OracleIdentity(identity_seed, split, neutral, weights, expressives))
    first, second = identities[0].identity_seed, identities[1].identity_seed
    gap: float = conditioning_gap(family, first, second)
    if gap <= 0.01:
        raise SynthError('additive_family', f'identity conditioning is nearly additive (gap {gap:.4f})')
    log.info(f'oracle dataset; identities, ``{len(identities)}``; conditioning gap, ``{gap:.3f}``')
    return OracleDataset(family=family, identities=tuple(identities))


@dataclass(frozen=True)
class OracleConfig:
    family: FamilyConfig = field(default_factory=FamilyConfig)
    n_identities: int = 20
    n_heldout: int = 6
    n_expressions: int = 40
    n_neutral_only: int = 20
    seed: int = 0


def write_oracle_dataset(out_dir: Path, dataset: OracleDataset, config: OracleConfig) -> Path:
    """
    Writes template, masks, topology, per-identity OBJs, the pairing table and a manifest; returns the manifest path.
    """
    out: Path = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    topology: Topology = dataset.family.topology
    save_mesh(out / 'template.obj', make_mesh(topology, dataset.family.template))
    save_topology(out / 'topology.json', topology)
    masks: dict[str, Any] = {key: value for key, value in topology.to_json_dict().items() if key in MASK_FILE_KEYS}
    (out / 'masks.json').write_text(json.dumps(masks, sort_keys=True) + '\n', encoding='utf-8')
    entries: list[dict[str, Any]] = []
    pairs: list[dict[str, Any]] = []
    for index, identity in enumerate(dataset.identities):
        folder: Path = out / 'identities' / identity.split / f'{index:03}'
        folder.mkdir(parents=True, exist_ok=True)
        save_mesh(folder / 'neutral.obj', make_mesh(topology, identity.neutral), write_faces=False)
        files: list[str] = []
        for j, vertices in enumerate(identity.expressives):
            name: str = f'expr_{j:03}.obj'
            save_mesh(folder / name, make_mesh(topology, vertices), write_faces=False)
            files.append(str((folder / name).relative_to(out)))
            pairs.append({'identity': index, 'expression': j, 'weights': identity.expression_weights[j].tolist()})
        entries.append(
            {
                'index': index,
                'identity_seed': identity.identity_seed,
                'split': identity.split,
                'neutral': str((folder / 'neutral.obj').relative_to(out)),
                'expressives': files,
            }
        )
    pairing: dict[str, Any] = {'archetypes': list(dataset.family.archetypes), 'pairs': pairs}
    (out / 'pairs.json').write_text(json.dumps(pairing) + '\n', encoding='utf-8')
    manifest: dict[str, Any] = {'config': config_to_dict(config), 'topology': 'topology.json', 'identities': entries}
    manifest_path: Path = out / 'manifest.json'
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return manifest_path


def load_oracle_dataset(data_dir: Path) -> OracleDataset:
    """
    Reads a dataset written by `write_oracle_dataset()`, rebuilding the family from the stored config.
    """
    root: Path = Path(data_dir)
    manifest_path: Path = root / 'manifest.json'
    if not manifest_path.exists():
        raise SynthError('missing_file', f'no manifest.json in {root}')
    manifest: dict[str, Any] = json.loads(manifest_path.read_text(encoding='utf-8'))
    config: OracleConfig = parse_strict(OracleConfig, manifest['config'], context='manifest.config')
    family: OracleFamily = build_oracle_family(config.family)
    stored: Topology = load_topology(root / manifest['topology'])
    if stored.topology_id != family.topology.topology_id:
        raise SynthError('topology_mismatch', f'{root}: stored topology differs from the configured family')
    pairs: dict[tuple[int, int], list[float]] = {
        (p['identity'], p['expression']): p['weights']
        for p in json.loads((root / 'pairs.json').read_text(encoding='utf-8'))['pairs']
    }
    identities: list[OracleIdentity] = []
    archetype_count: int = len(family.archetypes)
    for entry in manifest['identities']:
        neutral: np.ndarray = load_mesh(root / entry['neutral'], family.topology).vertices
        expressives: list[np.ndarray] = [load_mesh(root / rel, family.topology).vertices for rel in entry['expressives']]
        weights: list[list[float]] = [pairs[(entry['index'], j)] for j in range(len(expressives))]
        identities.append(
            OracleIdentity(
                identity_seed=int(entry['identity_seed']),
                split=entry['split'],
                neutral=neutral,
                expression_weights=np.array(weights, dtype=np.float64).reshape(-1, archetype_count),
                expressives=np.array(expressives, dtype=np.float64).reshape(-1, family.topology.vertex_count, 3),
            )
        )
    return OracleDataset(family=family, identities=tuple(identities))


## -- rasterization -------------------------------------------------


def _camera_space(vertices: np.ndarray, camera: Camera) -> np.ndarray:
    return vertices @ camera.rotation.T + camera.translation


def _splat(
    image: np.ndarray, depth_buffer: np.ndarray, px: np.ndarray, py: np.ndarray, depth: np.ndarray, value: np.ndarray
) -> None:
    """
    Writes values into `image` where they are nearest so far (z-buffer), ignoring out-of-bounds pixels.
    """
    height, width = image.shape
    inside: np.ndarray = (px >= 0) & (px < width) & (py >= 0) & (py < height)
    px, py, depth, value = px[inside], py[inside], depth[inside], value[inside]
    np.minimum.at(depth_buffer, (py, px), depth)
    winners: np.ndarray = depth <= depth_buffer[py, px]
    image[py[winners], px[winners]] = value[winners]


def _raster_synthetic(vertices: np.ndarray, camera: Camera) -> np.ndarray:
    """
    Depth-shaded 3 x 3 point splats: nearer vertices are brighter.
    """
    width, height = camera.image_size
    image: np.ndarray = np.zeros((height, width))
    depth_buffer: np.ndarray = np.full((height, width), np.inf)
    uv: np.ndarray = project_points(vertices, camera)
    depth: np.ndarray = _camera_space(vertices, camera)[:, 2]
    span: float = float(depth.max() - depth.min())
    shade: np.ndarray = 80.0 + 175.0 * (1.0 - (depth - depth.min()) / (span if span > 0 else 1.0))
    base_x: np.ndarray = np.floor(uv[:, 0]).astype(np.int64)
    base_y: np.ndarray = np.floor(uv[:, 1]).astype(np.int64)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            _splat(image, depth_buffer, base_x + dx, base_y + dy, depth, shade)
    return image


def _raster_realish(
    vertices: np.ndarray, faces: np.ndarray, camera: Camera, rng: np.random.Generator, noise_sigma: float
) -> np.ndarray:
    """
    Flat-shaded Lambertian triangles under a random light, plus Gaussian noise on covered pixels.
    """
    width, height = camera.image_size
    image: np.ndarray = np.zeros((height, width))
    depth_buffer: np.ndarray = np.full((height, width), np.inf)
    cam: np.ndarray = _camera_space(vertices, camera)
    uv: np.ndarray = project_points(vertices, camera)
    tri_uv: np.ndarray = uv[faces]
    tri_cam: np.ndarray = cam[faces]
    normals: np.ndarray = np.cross(tri_cam[:, 1] - tri_cam[:, 0], tri_cam[:, 2] - tri_cam[:, 0])
    normals /= np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), 1e-12)
    normals *= np.where(normals[:, 2:3] > 0, -1.0, 1.0)
    light: np.ndarray = np.array([rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7), -1.0])
    light /= np.linalg.norm(light)
    face_shade: np.ndarray = 255.0 * (0.15 + 0.85 * np.clip(normals @ light, 0.0, 1.0))

    low: np.ndarray = np.floor(tri_uv.min(axis=1)).astype(np.int64)
    high: np.ndarray = np.floor(tri_uv.max(axis=1)).astype(np.int64)
    extent: int = int(min(max(int((high - low).max()) + 1, 1), max(width, height)))
    offsets: np.ndarray = np.arange(extent)
    ox, oy = np.meshgrid(offsets, offsets)
    px: np.ndarray = low[:, 0:1] + ox.reshape(1, -1)
    py: np.ndarray = low[:, 1:2] + oy.reshape(1, -1)
    cx: np.ndarray = px + 0.5
    cy: np.ndarray = py + 0.5
    a, b, c = tri_uv[:, 0], tri_uv[:, 1], tri_uv[:, 2]
    area: np.ndarray = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    valid: np.ndarray = np.abs(area) > 1e-12
    safe_area: np.ndarray = np.where(valid, area, 1.0)[:, None]
    w0: np.ndarray = ((b[:, 0:1] - cx) * (c[:, 1:2] - cy) - (b[:, 1:2] - cy) * (c[:, 0:1] - cx)) / safe_area
    w1: np.ndarray = ((c[:, 0:1] - cx) * (a[:, 1:2] - cy) - (c[:, 1:2] - cy) * (a[:, 0:1] - cx)) / safe_area
    w2: np.ndarray = 1.0 - w0 - w1
    covered: np.ndarray = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & valid[:, None]
    depth: np.ndarray = w0 * tri_cam[:, 0, 2:3] + w1 * tri_cam[:, 1, 2:3] + w2 * tri_cam[:, 2, 2:3]
    value: np.ndarray = np.broadcast_to(face_shade[:, None], covered.shape)
    _splat(image, depth_buffer, px[covered], py[covered], depth[covered], value[covered])
    foreground: np.ndarray = np.isfinite(depth_buffer)
    image[foreground] += rng.normal(0.0, noise_sigma, size=int(foreground.sum()))
    image[foreground] = np.maximum(image[foreground], 1.0)
    return image


def rasterize(
    mesh: Mesh,
    camera: Camera,
    style: str = 'synthetic',
    noise_seed: int | np.random.SeedSequence = 0,
    noise_sigma: float = 8.0,
) -> np.ndarray:
    """
    Renders an (H, W) uint8 image; pixels no surface covers stay 0.
    """
    if style not in STYLES:
        raise SynthError('invalid_style', f'style must be one of {STYLES}, got ``{style}``')
    try:
        if style == 'synthetic':
            image: np.ndarray = _raster_synthetic(mesh.vertices, camera)
        else:
            rng: np.random.Generator = np.random.default_rng(noise_seed)
            image = _raster_realish(mesh.vertices, mesh.topology.faces, camera, rng, noise_sigma)
    except GeometryError as exc:
        raise SynthError('degenerate_camera', str(exc)) from exc
    return np.clip(np.round(image), 0, 255).astype(np.uint8)


## -- capture sets --------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    count: int = 4000
    image_size: int = 64
    yaw_range_deg: float = 60.0
    distance_mm: float = 600.0
    focal_px: float = 150.0
    camera_kind: str = 'pinhole'
    style: str = 'synthetic'
    noise_sigma: float = 8.0
    convex_combination: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.style not in STYLES:
            raise ValueError(f'style must be one of {STYLES}')
        if self.count < 1 or self.image_size < 8:
            raise ValueError('count must be >= 1 and image_size >= 8')


@dataclass(frozen=True, eq=False)
class SynthSample:
    image: np.ndarray
    landmarks: LandmarkSet
    code: np.ndarray
    neutral_id: int
    camera: Camera
    domain_tag: str
    seed: int


@dataclass(frozen=True)
class _SampleDraw:
    neutral_index: int
    code: np.ndarray
    yaw_deg: float
    noise_seed: int


def _draw_sample(
    seed_seq: np.random.SeedSequence, neutral_count: int, codes: np.ndarray, config: SynthConfig
) -> _SampleDraw:
    rng: np.random.Generator = np.random.default_rng(seed_seq)
    neutral_index: int = int(rng.integers(0, neutral_count))
    code: np.ndarray = codes[int(rng.integers(0, codes.shape[0]))]
    if config.convex_combination:
        other: np.ndarray = codes[int(rng.integers(0, codes.shape[0]))]
        t: float = float(rng.uniform(0.0, 1.0))
        code = (1.0 - t) * code + t * other
    yaw: float = float(rng.uniform(-config.yaw_range_deg, config.yaw_range_deg))
    return _SampleDraw(neutral_index, np.array(code, copy=True), yaw, int(rng.integers(0, 2**63 - 1)))


def _render_sample(
    draw: _SampleDraw,
    mesh: Mesh,
    config: SynthConfig,
    size: tuple[int, int],
    focal: float,
    neutral_ids: Sequence[int],
) -> SynthSample:
    """
    Renders one decoded mesh from its drawn yaw and projects its landmarks.

    Called by `sample_synth_capture_set()`.
    """
    camera: Camera = look_at_yaw(draw.yaw_deg, config.distance_mm, size, focal, config.camera_kind)
    return SynthSample(
        image=rasterize(mesh, camera, config.style, draw.noise_seed, config.noise_sigma),
        landmarks=project_landmarks(mesh, camera),
        code=draw.code,
        neutral_id=int(neutral_ids[draw.neutral_index]),
        camera=camera,
        domain_tag=config.style,
        seed=draw.noise_seed,
    )


def sample_synth_capture_set(
    model: sm.SemanticModel,
    neutral_pool: np.ndarray,
    neutral_ids: Sequence[int],
    code_pool: np.ndarray,
    config: SynthConfig,
    threads: int = 1,
    progress: bool = False,
) -> list[SynthSample]:
    """
    Decodes sampled codes onto sampled neutrals, renders each result and projects its landmarks.

    Draws depend only on (seed, sample index); decoding runs in fixed chunks and rendering keeps
    input order, so results do not depend on `threads`.
    """
    if neutral_pool.shape[0] == 0 or code_pool.shape[0] == 0:
        raise SynthError('empty_pool', 'neutral and code pools must be non-empty')
    children: list[np.random.SeedSequence] = np.random.SeedSequence(config.seed).spawn(config.count)
    draws: list[_SampleDraw] = [_draw_sample(child, neutral_pool.shape[0], code_pool, config) for child in children]
    size: tuple[int, int] = (config.image_size, config.image_size)
    focal: float = config.focal_px * config.image_size / 64.0

    meshes: list[Mesh] = []
    for start in range(0, len(draws), DECODE_CHUNK):
        chunk: list[_SampleDraw] = draws[start : start + DECODE_CHUNK]
        neutrals: np.ndarray = neutral_pool[[d.neutral_index for d in chunk]]
        codes: np.ndarray = np.stack([d.code for d in chunk])
        displacements: np.ndarray = sm.decode_displacement_batch(model, codes, neutrals)
        meshes.extend(make_mesh(model.topology, n + d) for n, d in zip(neutrals, displacements, strict=True))

    render = functools.partial(_render_sample, config=config, size=size, focal=focal, neutral_ids=neutral_ids)
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        samples: list[SynthSample] = list(
            tqdm(pool.map(render, draws, meshes), total=len(draws), desc='Rendering samples', disable=not progress)
        )
    log.info(f'sampled {len(samples)} ``{config.style}`` capture samples')
    return samples


## -- files ---------------------------------------------------------


def write_pgm(path: Path, image: np.ndarray) -> None:
    """
    Writes a binary (P5) 8-bit grayscale PGM.
    """
    pixels: np.ndarray = np.asarray(image, dtype=np.uint8)
    height, width = pixels.shape
    Path(path).write_bytes(f'P5\n{width} {height}\n255\n'.encode('ascii') + pixels.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """
    Reads an 8-bit binary PGM; header comments are allowed, anything malformed is a `bad_image` error.
    """
    payload: bytes = Path(path).read_bytes()
    tokens: list[bytes] = []
    offset: int = 0
    while len(tokens) < 4:
        while offset < len(payload) and payload[offset : offset + 1].isspace():
            offset += 1
        if offset >= len(payload):
            raise SynthError('bad_image', f'{path}: truncated PGM header')
        if payload[offset : offset + 1] == b'#':
            newline: int = payload.find(b'\n', offset)
            if newline < 0:
                raise SynthError('bad_image', f'{path}: unterminated comment in PGM header')
            offset = newline + 1
            continue
        end: int = offset
        while end < len(payload) and not payload[end : end + 1].isspace():
            end += 1
        tokens.append(payload[offset:end])
        offset = end
    if tokens[0] != b'P5' or not all(t.isdigit() for t in tokens[1:]) or int(tokens[3]) != 255:
        raise SynthError('bad_image', f'{path}: only 8-bit binary PGM (P5) is supported')
    width, height = int(tokens[1]), int(tokens[2])
    offset += 1
    if len(payload) - offset < width * height:
        raise SynthError('bad_image', f'{path}: expected {width * height} pixel bytes')
    data: np.ndarray = np.frombuffer(payload, dtype=np.uint8, count=width * height, offset=offset)
    return data.reshape(height, width).copy()


def write_capture_set(out_dir: Path, samples: Sequence[SynthSample], split: str) -> Path:
    """
    Writes `{split}/{index:06}.pgm|.csv|.json` per sample plus `manifest.json`; returns the manifest path.
    """
    root: Path = Path(out_dir)
    folder: Path = root / split
    folder.mkdir(parents=True, exist_ok=True)
    listing: list[dict[str, Any]] = []
    for index, sample in enumerate(samples):
        stem: str = f'{index:06}'
        write_pgm(folder / f'{stem}.pgm', sample.image)
        save_landmarks_csv(folder / f'{stem}.csv', sample.landmarks)
        meta: dict[str, Any] = {
            'code': sample.code.tolist(),
            'neutral_id': sample.neutral_id,
            'camera': sample.camera.to_json_dict(),
            'domain_tag': sample.domain_tag,
            'seed': sample.seed,
        }
        (folder / f'{stem}.json').write_text(json.dumps(meta, sort_keys=True) + '\n', encoding='utf-8')
        listing.append({'image': f'{split}/{stem}.pgm', 'landmarks': f'{split}/{stem}.csv', 'meta': f'{split}/{stem}.json'})
    manifest_path: Path = root / 'manifest.json'
    manifest_path.write_text(json.dumps({'split': split, 'samples': listing}, indent=2) + '\n', encoding='utf-8')
    return manifest_path


def load_capture_set(root_dir: Path) -> list[SynthSample]:
    root: Path = Path(root_dir)
    manifest_path: Path = root / 'manifest.json'
    if not manifest_path.exists():
        raise SynthError('missing_file', f'no manifest.json in {root}')
    manifest: dict[str, Any] = json.loads(manifest_path.read_text(encoding='utf-8'))
    samples: list[SynthSample] = []
    for entry in manifest['samples']:
        meta: dict[str, Any] = json.loads((root / entry['meta']).read_text(encoding='utf-8'))
        samples.append(
            SynthSample(
                image=read_pgm(root / entry['image']),
                landmarks=load_landmarks_csv(root / entry['landmarks']),
                code=np.array(meta['code'], dtype=np.float64),
                neutral_id=int(meta['neutral_id']),
                camera=camera_from_json(meta['camera']),
                domain_tag=meta['domain_tag'],
                seed=int(meta['seed']),
            )
        )
    return samples


def yaw_view_label(yaw_deg: float) -> str:
    """
    Groups a yaw angle into frontal / angled / profile views.
    """
    magnitude: float = abs(yaw_deg)
    if magnitude < 15.0:
        return 'frontal'
    return 'angled' if magnitude < 40.0 else 'profile'


def camera_yaw_deg(camera: Camera) -> float:
    return math.degrees(math.atan2(float(camera.rotation[0, 2]), float(camera.rotation[0, 0])))
