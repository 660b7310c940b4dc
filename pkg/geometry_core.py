"""
Mesh and topology representation for the expression pipeline.

Holds the shared Topology (faces, edges, spiral orderings, region masks, eyelid polylines,
landmark indices), the Mesh / ConversionMatrix / Camera / LandmarkSet types, and the
operations on them: OBJ + JSON + CSV file I/O, spiral orderings, cross-topology conversion,
landmark projection and eyelid polyline distances.

Units are millimeters everywhere.
"""

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse

log = logging.getLogger(__name__)

REGION_NAMES: tuple[str, ...] = ('cheek', 'forehead', 'mouth', 'nose')
EYE_NAMES: tuple[str, ...] = ('left', 'right')
DEFAULT_LANDMARK_COUNT: int = 64
EYELID_RESAMPLE_COUNT: int = 16
MASK_FILE_KEYS: tuple[str, ...] = ('eyelid_polylines', 'landmark_indices', 'region_masks')
PROJECTION_DEPTH_EPSILON: float = 1e-6
ROW_SUM_TOLERANCE: float = 1e-9
ROTATION_TOLERANCE: float = 1e-9


class GeometryError(Exception):
    """
    Signals invalid geometry input; `kind` is a stable machine-readable label.
    """

    def __init__(self, kind: str, message: str) -> None:
        super().__init__(message)
        self.kind: str = kind


def _frozen(array: np.ndarray) -> np.ndarray:
    """
    Returns a read-only copy so shared types stay immutable.
    """
    copy: np.ndarray = np.array(array, copy=True)
    copy.setflags(write=False)
    return copy


## -- topology -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Topology:
    """
    Shared mesh connectivity plus the semantic vertex groupings used by losses and the benchmark.
    """

    vertex_count: int
    faces: np.ndarray
    edges: np.ndarray
    spiral_len: int
    spiral_orderings: np.ndarray
    region_masks: dict[str, np.ndarray]
    eyelid_polylines: dict[str, tuple[np.ndarray, np.ndarray]]
    landmark_indices: np.ndarray
    topology_id: str = field(default='')

    def to_json_dict(self) -> dict[str, Any]:
        """
        Renders the JSON sidecar shape; spiral orderings are re-derived on load.

        Called by `save_topology()`.
        """
        return {
            'vertex_count': self.vertex_count,
            'faces': self.faces.tolist(),
            'spiral_len': self.spiral_len,
            'region_masks': {name: mask.tolist() for name, mask in sorted(self.region_masks.items())},
            'eyelid_polylines': {
                eye: {'upper': upper.tolist(), 'lower': lower.tolist()}
                for eye, (upper, lower) in sorted(self.eyelid_polylines.items())
            },
            'landmark_indices': self.landmark_indices.tolist(),
        }


def compute_topology_id(vertex_count: int, faces: np.ndarray) -> str:
    """
    Derives a short content hash identifying a connectivity.
    """
    digest = hashlib.sha256()
    digest.update(str(vertex_count).encode('ascii'))
    digest.update(np.ascontiguousarray(faces, dtype='<i8').tobytes())
    return digest.hexdigest()[:16]


def derive_edges(faces: np.ndarray) -> np.ndarray:
    """
    Lists every undirected edge exactly once, sorted, and rejects edges shared by more than two faces.

    Called by `build_topology()`.
    """
    counts: dict[tuple[int, int], int] = {}
    for a, b, c in faces.tolist():
        for u, w in ((a, b), (b, c), (c, a)):
            key: tuple[int, int] = (min(u, w), max(u, w))
            counts[key] = counts.get(key, 0) + 1
    non_manifold: list[tuple[int, int]] = [key for key, count in counts.items() if count > 2]
    if non_manifold:
        raise GeometryError('non_manifold', f'edge {non_manifold[0]} is shared by more than two faces')
    edges: np.ndarray = np.array(sorted(counts), dtype=np.int64).reshape(-1, 2)
    return edges


def _build_fan_maps(vertex_count: int, faces: np.ndarray) -> tuple[list[dict[int, int]], list[dict[int, int]]]:
    """
    Builds, per vertex, the successor / predecessor maps of its one-ring following face winding.

    Called by `build_spiral_orderings()`.
    """
    next_of: list[dict[int, int]] = [{} for _ in range(vertex_count)]
    prev_of: list[dict[int, int]] = [{} for _ in range(vertex_count)]
    for a, b, c in faces.tolist():
        for v, u, w in ((a, b, c), (b, c, a), (c, a, b)):
            if u in next_of[v] or w in prev_of[v]:
                raise GeometryError('non_manifold', f'vertex {v} has an inconsistent or non-manifold fan')
            next_of[v][u] = w
            prev_of[v][w] = u
    return next_of, prev_of


def order_one_ring(vertex: int, next_of: dict[int, int], prev_of: dict[int, int]) -> list[int]:
    """
    Orders a vertex's one-ring in winding order, starting from its smallest-index neighbor.

    Interior fans are cycles; boundary fans are chains, which are rotated so the smallest
    neighbor comes first while keeping the chain order.

    Called by `build_spiral_orderings()`.
    """
    neighbors: set[int] = set(next_of) | set(prev_of)
    if not neighbors:
        raise GeometryError('isolated_vertex', f'vertex {vertex} belongs to no face')
    heads: list[int] = sorted(n for n in neighbors if n not in prev_of)
    if len(heads) > 1:
        raise GeometryError('non_manifold', f'vertex {vertex} joins {len(heads)} separate fans')
    start: int = min(neighbors)
    walk_from: int = heads[0] if heads else start
    ring: list[int] = [walk_from]
    current: int = walk_from
    while current in next_of and len(ring) <= len(neighbors):
        current = next_of[current]
        if current == walk_from:
            break
        ring.append(current)
    if len(ring) != len(neighbors):
        raise GeometryError('non_manifold', f'vertex {vertex} has a fan that does not cover its neighbors')
    pivot: int = ring.index(start)
    return ring[pivot:] + ring[:pivot]


def build_spiral_orderings(vertex_count: int, faces: np.ndarray, spiral_len: int) -> np.ndarray:
    """
    Builds a fixed-length spiral per vertex: itself, its winding-ordered one-ring, then outward rings.

    Outer rings are collected by walking the previous ring in order and appending each vertex's
    ordered one-ring members not yet visited. Spirals that exhaust the mesh repeat their last vertex.

    Called by `build_topology()`.
    """
    if spiral_len < 1:
        raise GeometryError('invalid_spiral_len', f'spiral_len must be >= 1, got {spiral_len}')
    next_of, prev_of = _build_fan_maps(vertex_count, faces)
    rings: list[list[int]] = [order_one_ring(v, next_of[v], prev_of[v]) for v in range(vertex_count)]
    spirals: np.ndarray = np.empty((vertex_count, spiral_len), dtype=np.int64)
    for v in range(vertex_count):
        sequence: list[int] = [v]
        visited: set[int] = {v}
        frontier: list[int] = [v]
        while len(sequence) < spiral_len and frontier:
            next_frontier: list[int] = []
            for u in frontier:
                for w in rings[u]:
                    if w not in visited:
                        visited.add(w)
                        next_frontier.append(w)
            sequence.extend(next_frontier)
            frontier = next_frontier
        sequence = sequence[:spiral_len]
        sequence.extend([sequence[-1]] * (spiral_len - len(sequence)))
        spirals[v] = sequence
    return spirals


def _check_index_array(name: str, indices: np.ndarray, vertex_count: int) -> None:
    """
    Rejects out-of-range vertex indices.

    Called by `build_topology()`.
    """
    if indices.size and (indices.min() < 0 or indices.max() >= vertex_count):
        raise GeometryError('index_out_of_range', f'{name} references a vertex outside [0, {vertex_count})')


def build_topology(
    vertex_count: int,
    faces: Any,
    spiral_len: int,
    region_masks: dict[str, Any] | None = None,
    eyelid_polylines: dict[str, tuple[Any, Any]] | None = None,
    landmark_indices: Any = None,
) -> Topology:
    """
    Validates connectivity and semantic groupings, derives edges and spirals, and returns a Topology.
    """
    face_array: np.ndarray = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    _check_index_array('faces', face_array, vertex_count)
    degenerate: np.ndarray = (
        (face_array[:, 0] == face_array[:, 1])
        | (face_array[:, 1] == face_array[:, 2])
        | (face_array[:, 0] == face_array[:, 2])
    )
    if degenerate.any():
        raise GeometryError('degenerate_face', f'face {int(np.argmax(degenerate))} repeats a vertex')

    masks: dict[str, np.ndarray] = {}
    seen: dict[int, str] = {}
    for name, members in sorted((region_masks or {}).items()):
        mask: np.ndarray = np.asarray(members, dtype=np.int64).reshape(-1)
        _check_index_array(f'region mask {name}', mask, vertex_count)
        for index in mask.tolist():
            if index in seen:
                raise GeometryError('overlapping_masks', f'vertex {index} is in both {seen[index]} and {name}')
            seen[index] = name
        masks[name] = _frozen(mask)

    polylines: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for eye, (upper, lower) in sorted((eyelid_polylines or {}).items()):
        upper_arr: np.ndarray = np.asarray(upper, dtype=np.int64).reshape(-1)
        lower_arr: np.ndarray = np.asarray(lower, dtype=np.int64).reshape(-1)
        if upper_arr.size != lower_arr.size or upper_arr.size < 2:
            raise GeometryError('eyelid_length_mismatch', f'{eye} eyelid polylines must have equal length >= 2')
        _check_index_array(f'{eye} eyelids', np.concatenate([upper_arr, lower_arr]), vertex_count)
        polylines[eye] = (_frozen(upper_arr), _frozen(lower_arr))

    landmarks: np.ndarray = np.asarray(landmark_indices if landmark_indices is not None else [], dtype=np.int64)
    _check_index_array('landmark_indices', landmarks, vertex_count)

    edges: np.ndarray = derive_edges(face_array)
    spirals: np.ndarray = build_spiral_orderings(vertex_count, face_array, spiral_len)
    topology = Topology(
        vertex_count=vertex_count,
        faces=_frozen(face_array),
        edges=_frozen(edges),
        spiral_len=spiral_len,
        spiral_orderings=_frozen(spirals),
        region_masks=masks,
        eyelid_polylines=polylines,
        landmark_indices=_frozen(landmarks.reshape(-1)),
        topology_id=compute_topology_id(vertex_count, face_array),
    )
    log.debug(f'built topology ``{topology.topology_id}`` with {vertex_count} vertices, {len(edges)} edges')
    return topology


def load_topology(path: Path) -> Topology:
    """
    Reads a topology JSON sidecar and rebuilds the derived fields.
    """
    try:
        data: dict[str, Any] = json.loads(Path(path).read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise GeometryError('parse_error', f'{path}: {exc}') from exc
    eyelids: dict[str, tuple[Any, Any]] = {
        eye: (entry['upper'], entry['lower']) for eye, entry in data.get('eyelid_polylines', {}).items()
    }
    return build_topology(
        vertex_count=int(data['vertex_count']),
        faces=data['faces'],
        spiral_len=int(data['spiral_len']),
        region_masks=data.get('region_masks', {}),
        eyelid_polylines=eyelids,
        landmark_indices=data.get('landmark_indices', []),
    )


def save_topology(path: Path, topology: Topology) -> None:
    """
    Writes the topology JSON sidecar with sorted keys for byte-stable output.
    """
    Path(path).write_text(json.dumps(topology.to_json_dict(), sort_keys=True) + '\n', encoding='utf-8')


def load_mask_file(path: Path) -> dict[str, Any]:
    """
    Reads a masks JSON file holding any of `region_masks`, `eyelid_polylines` and `landmark_indices`.

    Called by `build_topology_from_files()`.
    """
    try:
        data: Any = json.loads(Path(path).read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise GeometryError('parse_error', f'{path}: {exc}') from exc
    if not isinstance(data, dict):
        raise GeometryError('parse_error', f'{path}: expected a JSON object')
    unknown: list[str] = sorted(set(data) - set(MASK_FILE_KEYS))
    if unknown:
        raise GeometryError('parse_error', f'{path}: unknown key(s) {unknown}; expected some of {MASK_FILE_KEYS}')
    return data


def build_topology_from_files(mesh_path: Path, spiral_len: int, masks_path: Path | None = None) -> Topology:
    """
    Builds a topology from a template OBJ (faces required) and an optional masks file.
    """
    vertices, faces = parse_obj(Path(mesh_path).read_text(encoding='utf-8'))
    if faces.size == 0:
        raise GeometryError('parse_error', f'{mesh_path}: template OBJ has no faces')
    groups: dict[str, Any] = load_mask_file(masks_path) if masks_path is not None else {}
    eyelids: dict[str, tuple[Any, Any]] = {
        eye: (entry['upper'], entry['lower']) for eye, entry in groups.get('eyelid_polylines', {}).items()
    }
    return build_topology(
        vertex_count=int(vertices.shape[0]),
        faces=faces,
        spiral_len=spiral_len,
        region_masks=groups.get('region_masks', {}),
        eyelid_polylines=eyelids,
        landmark_indices=groups.get('landmark_indices', []),
    )


## -- meshes ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Vertex positions bound to a shared Topology.
    """

    topology: Topology
    vertices: np.ndarray

    @property
    def topology_id(self) -> str:
        return self.topology.topology_id


def make_mesh(topology: Topology, vertices: Any) -> Mesh:
    """
    Validates shape and finiteness and returns an immutable Mesh.
    """
    array: np.ndarray = np.asarray(vertices, dtype=np.float64)
    if array.shape != (topology.vertex_count, 3):
        raise GeometryError(
            'vertex_count_mismatch',
            f'expected {topology.vertex_count} x 3 vertices, got shape {array.shape}',
        )
    if not np.all(np.isfinite(array)):
        raise GeometryError('non_finite', 'mesh contains non-finite coordinates')
    return Mesh(topology=topology, vertices=_frozen(array))


def _parse_face_token(token: str, line_number: int) -> int:
    """
    Parses the vertex index of an OBJ face token (`7`, `7/2`, `7//3`, `7/2/3`) to 0-based.

    Called by `parse_obj()`.
    """
    head: str = token.split('/', 1)[0]
    try:
        return int(head) - 1
    except ValueError as exc:
        raise GeometryError('parse_error', f'line {line_number}: bad face token ``{token}``') from exc


def parse_obj(text: str) -> tuple[np.ndarray, np.ndarray]:
    """
    Parses ASCII OBJ text into (vertices, faces); only `v` and triangular `f` records matter.

    Called by `load_mesh()`.
    """
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line: str = raw_line.split('#', 1)[0].strip()
        if not line:
            continue
        parts: list[str] = line.split()
        if parts[0] == 'v':
            if len(parts) < 4:
                raise GeometryError('parse_error', f'line {line_number}: vertex needs 3 coordinates')
            try:
                vertices.append((float(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError as exc:
                raise GeometryError('parse_error', f'line {line_number}: bad vertex ``{line}``') from exc
        elif parts[0] == 'f':
            if len(parts) != 4:
                raise GeometryError('parse_error', f'line {line_number}: only triangular faces are supported')
            a, b, c = (_parse_face_token(token, line_number) for token in parts[1:])
            faces.append((a, b, c))
    return np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def load_mesh(path: Path, topology: Topology) -> Mesh:
    """
    Loads an ASCII OBJ mesh and binds it to `topology`; face records, if present, must match it.
    """
    vertices, faces = parse_obj(Path(path).read_text(encoding='utf-8'))
    if vertices.shape[0] != topology.vertex_count:
        raise GeometryError(
            'vertex_count_mismatch',
            f'{path}: file has {vertices.shape[0]} vertices, topology has {topology.vertex_count}',
        )
    if not np.all(np.isfinite(vertices)):
        raise GeometryError('non_finite', f'{path}: non-finite coordinate')
    if faces.size and not np.array_equal(faces, topology.faces):
        raise GeometryError('face_mismatch', f'{path}: face records differ from the topology faces')
    return make_mesh(topology, vertices)


def save_mesh(path: Path, mesh: Mesh, write_faces: bool = True) -> None:
    """
    Writes an ASCII OBJ with fixed precision so identical meshes give identical bytes.
    """
    lines: list[str] = [f'v {x:.9f} {y:.9f} {z:.9f}' for x, y, z in mesh.vertices.tolist()]
    if write_faces:
        lines.extend(f'f {a + 1} {b + 1} {c + 1}' for a, b, c in mesh.topology.faces.tolist())
    Path(path).write_text('\n'.join(lines) + '\n', encoding='ascii')


def edge_lengths(vertices: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """
    Returns the Euclidean length of each edge.
    """
    return np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=-1)


## -- cross-topology conversion ---------------------------------------


@dataclass(frozen=True, eq=False)
class ConversionMatrix:
    """
    Sparse row-stochastic map from source-topology vertices to target-topology vertices.
    """

    source_topology_id: str
    target_topology_id: str
    source_vertex_count: int
    rows: tuple[tuple[tuple[int, float], ...], ...]

    @property
    def target_vertex_count(self) -> int:
        return len(self.rows)

    def to_sparse(self) -> scipy.sparse.csr_matrix:
        """
        Returns the (target x source) CSR matrix.

        Called by `apply_conversion()`.
        """
        row_ids: list[int] = []
        col_ids: list[int] = []
        weights: list[float] = []
        for target, entries in enumerate(self.rows):
            for source, weight in entries:
                row_ids.append(target)
                col_ids.append(source)
                weights.append(weight)
        shape: tuple[int, int] = (self.target_vertex_count, self.source_vertex_count)
        return scipy.sparse.csr_matrix((weights, (row_ids, col_ids)), shape=shape)


def make_conversion_matrix(
    source_topology_id: str,
    target_topology_id: str,
    source_vertex_count: int,
    rows: list[list[tuple[int, float]]],
) -> ConversionMatrix:
    """
    Validates non-empty, non-negative, sum-to-one rows and returns a ConversionMatrix.
    """
    frozen_rows: list[tuple[tuple[int, float], ...]] = []
    for target, entries in enumerate(rows):
        if not entries:
            raise GeometryError('invalid_conversion', f'row {target} is empty')
        total: float = 0.0
        for source, weight in entries:
            if not 0 <= source < source_vertex_count:
                raise GeometryError('index_out_of_range', f'row {target} references source vertex {source}')
            if weight < 0:
                raise GeometryError('invalid_conversion', f'row {target} has a negative weight')
            total += weight
        if abs(total - 1.0) > ROW_SUM_TOLERANCE:
            raise GeometryError('invalid_conversion', f'row {target} sums to {total!r}, not 1')
        frozen_rows.append(tuple((int(source), float(weight)) for source, weight in entries))
    return ConversionMatrix(source_topology_id, target_topology_id, source_vertex_count, tuple(frozen_rows))


def load_conversion_matrix(path: Path) -> ConversionMatrix:
    """
    Reads the sparse triplet JSON `{rows:[{t, entries:[[s,w],...]}]}` plus topology ids.
    """
    data: dict[str, Any] = json.loads(Path(path).read_text(encoding='utf-8'))
    ordered: list[dict[str, Any]] = sorted(data['rows'], key=lambda row: int(row['t']))
    if [int(row['t']) for row in ordered] != list(range(len(ordered))):
        raise GeometryError('invalid_conversion', f'{path}: target rows must cover 0..{len(ordered) - 1}')
    rows: list[list[tuple[int, float]]] = [[(int(s), float(w)) for s, w in row['entries']] for row in ordered]
    return make_conversion_matrix(
        data.get('source_topology_id', ''),
        data.get('target_topology_id', ''),
        int(data['source_vertex_count']),
        rows,
    )


def save_conversion_matrix(path: Path, matrix: ConversionMatrix) -> None:
    """
    Writes the sparse triplet JSON.
    """
    payload: dict[str, Any] = {
        'source_topology_id': matrix.source_topology_id,
        'target_topology_id': matrix.target_topology_id,
        'source_vertex_count': matrix.source_vertex_count,
        'rows': [{'t': t, 'entries': [[s, w] for s, w in entries]} for t, entries in enumerate(matrix.rows)],
    }
    Path(path).write_text(json.dumps(payload) + '\n', encoding='utf-8')


def apply_conversion(matrix: ConversionMatrix, mesh: Mesh, target_topology: Topology) -> Mesh:
    """
    Maps a source-topology mesh onto the target topology by per-row weighted combination.
    """
    if mesh.topology_id != matrix.source_topology_id:
        raise GeometryError('topology_mismatch', 'mesh topology does not match the conversion source')
    if target_topology.topology_id != matrix.target_topology_id:
        raise GeometryError('topology_mismatch', 'target topology does not match the conversion target')
    converted: np.ndarray = np.asarray(matrix.to_sparse() @ mesh.vertices)
    return make_mesh(target_topology, converted)


## -- cameras and landmarks -------------------------------------------


@dataclass(frozen=True, eq=False)
class Camera:
    """
    Orthographic or pinhole camera. For orthographic cameras `focal` is pixels per millimeter.

    Camera space looks down +z; image rows grow downward, so camera +y maps to decreasing row.
    """

    kind: str
    image_size: tuple[int, int]
    focal: float
    principal_point: tuple[float, float]
    rotation: np.ndarray
    translation: np.ndarray

    def to_json_dict(self) -> dict[str, Any]:
        return {
            'kind': self.kind,
            'image_size': list(self.image_size),
            'focal': self.focal,
            'principal_point': list(self.principal_point),
            'rotation': self.rotation.tolist(),
            'translation': self.translation.tolist(),
        }


def make_camera(
    kind: str,
    image_size: tuple[int, int],
    focal: float,
    rotation: Any = None,
    translation: Any = None,
    principal_point: tuple[float, float] | None = None,
) -> Camera:
    """
    Validates and returns a Camera; the principal point defaults to the image center.
    """
    if kind not in ('orthographic', 'pinhole'):
        raise GeometryError('invalid_camera', f'unknown camera kind ``{kind}``')
    width, height = int(image_size[0]), int(image_size[1])
    if width < 1 or height < 1 or not focal > 0:
        raise GeometryError('invalid_camera', 'image size and focal length must be positive')
    rot: np.ndarray = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    trans: np.ndarray = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
    if rot.shape != (3, 3) or trans.shape != (3,):
        raise GeometryError('invalid_camera', 'rotation must be 3x3 and translation a 3-vector')
    if np.abs(rot.T @ rot - np.eye(3)).max() > ROTATION_TOLERANCE or abs(np.linalg.det(rot) - 1.0) > ROTATION_TOLERANCE:
        raise GeometryError('invalid_camera', 'rotation is not orthonormal with determinant +1')
    center: tuple[float, float] = (
        principal_point if principal_point is not None else (width / 2.0, height / 2.0)
    )
    return Camera(
        kind=kind,
        image_size=(width, height),
        focal=float(focal),
        principal_point=(float(center[0]), float(center[1])),
        rotation=_frozen(rot),
        translation=_frozen(trans),
    )


def camera_from_json(data: dict[str, Any]) -> Camera:
    return make_camera(
        data['kind'],
        tuple(data['image_size']),
        data['focal'],
        data['rotation'],
        data['translation'],
        tuple(data['principal_point']),
    )


def yaw_rotation(yaw_deg: float) -> np.ndarray:
    """
    Returns the rotation about the +y axis by `yaw_deg` degrees.
    """
    angle: float = math.radians(yaw_deg)
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def look_at_yaw(
    yaw_deg: float,
    distance: float,
    image_size: tuple[int, int],
    focal: float,
    kind: str = 'pinhole',
) -> Camera:
    """
    Builds a camera on a horizontal ring around the origin, facing it, rotated by `yaw_deg`.
    """
    return make_camera(kind, image_size, focal, yaw_rotation(yaw_deg), np.array([0.0, 0.0, distance]))


def project_points(points: np.ndarray, camera: Camera) -> np.ndarray:
    """
    Projects N x 3 world points to N x 2 pixel coordinates without clipping.
    """
    camera_space: np.ndarray = points @ camera.rotation.T + camera.translation
    cx, cy = camera.principal_point
    if camera.kind == 'pinhole':
        depth: np.ndarray = camera_space[:, 2]
        if np.any(depth <= PROJECTION_DEPTH_EPSILON):
            raise GeometryError('behind_camera', 'a point lies at or behind the camera plane')
        u: np.ndarray = cx + camera.focal * camera_space[:, 0] / depth
        v: np.ndarray = cy - camera.focal * camera_space[:, 1] / depth
    else:
        u = cx + camera.focal * camera_space[:, 0]
        v = cy - camera.focal * camera_space[:, 1]
    return np.stack([u, v], axis=-1)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """
    N x 2 pixel coordinates of projected landmark vertices.
    """

    points: np.ndarray


def project_landmarks(mesh: Mesh, camera: Camera) -> LandmarkSet:
    """
    Projects the topology's landmark vertices through the camera.
    """
    indices: np.ndarray = mesh.topology.landmark_indices
    if indices.size == 0:
        raise GeometryError('missing_landmarks', 'topology defines no landmark indices')
    return LandmarkSet(points=_frozen(project_points(mesh.vertices[indices], camera)))


def save_landmarks_csv(path: Path, landmarks: LandmarkSet) -> None:
    """
    Writes landmarks as `index,x,y` rows.
    """
    with Path(path).open('w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(['index', 'x', 'y'])
        for index, (x, y) in enumerate(landmarks.points.tolist()):
            writer.writerow([index, repr(float(x)), repr(float(y))])


def load_landmarks_csv(path: Path) -> LandmarkSet:
    """
    Reads an `index,x,y` landmark CSV in index order.
    """
    with Path(path).open('r', encoding='utf-8', newline='') as fh:
        rows: list[dict[str, str]] = list(csv.DictReader(fh))
    rows.sort(key=lambda row: int(row['index']))
    points: np.ndarray = np.array([[float(row['x']), float(row['y'])] for row in rows], dtype=np.float64)
    return LandmarkSet(points=_frozen(points.reshape(-1, 2)))


## -- eyelid polylines -----------------------------------------------


def polyline_resampling_weights(points: np.ndarray, count: int = EYELID_RESAMPLE_COUNT) -> np.ndarray:
    """
    Returns the count x n matrix W such that W @ points resamples the polyline at equal arc-length steps.

    A zero-length polyline maps every sample onto its first point.
    """
    n: int = points.shape[0]
    weights: np.ndarray = np.zeros((count, n), dtype=np.float64)
    segment_lengths: np.ndarray = np.linalg.norm(np.diff(points, axis=0), axis=-1)
    cumulative: np.ndarray = np.concatenate([[0.0], np.cumsum(segment_lengths)])
    total: float = float(cumulative[-1])
    if total <= 0.0:
        weights[:, 0] = 1.0
        return weights
    targets: np.ndarray = np.linspace(0.0, total, count)
    for k, target in enumerate(targets.tolist()):
        segment: int = int(np.clip(np.searchsorted(cumulative, target, side='right') - 1, 0, n - 2))
        length: float = float(segment_lengths[segment])
        t: float = 0.0 if length <= 0.0 else min(max((target - cumulative[segment]) / length, 0.0), 1.0)
        weights[k, segment] += 1.0 - t
        weights[k, segment + 1] += t
    return weights


def resample_polyline(points: np.ndarray, count: int = EYELID_RESAMPLE_COUNT) -> np.ndarray:
    """
    Resamples a polyline to `count` points spaced evenly by arc length.
    """
    return polyline_resampling_weights(points, count) @ points


def polyline_distance(mesh: Mesh, eye: str) -> float:
    """
    Returns the mean distance between corresponding resampled points of an eye's upper and lower lids.
    """
    if eye not in mesh.topology.eyelid_polylines:
        raise GeometryError('missing_eyelids', f'topology defines no eyelid polylines for ``{eye}``')
    upper, lower = mesh.topology.eyelid_polylines[eye]
    upper_points: np.ndarray = resample_polyline(mesh.vertices[upper])
    lower_points: np.ndarray = resample_polyline(mesh.vertices[lower])
    return float(np.mean(np.linalg.norm(upper_points - lower_points, axis=-1)))
