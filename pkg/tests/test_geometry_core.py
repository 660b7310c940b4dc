import json
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from geometry_core import (
    GeometryError,
    apply_conversion,
    build_topology,
    build_topology_from_files,
    edge_lengths,
    load_conversion_matrix,
    load_landmarks_csv,
    load_mesh,
    look_at_yaw,
    make_camera,
    make_conversion_matrix,
    make_mesh,
    polyline_distance,
    polyline_resampling_weights,
    project_landmarks,
    project_points,
    resample_polyline,
    save_conversion_matrix,
    save_landmarks_csv,
    save_mesh,
)


def hexagon_fan(spiral_len: int = 7, **groups):
    """
    Builds a 7-vertex fan: center 0 plus six rim vertices, counter-clockwise in the xy-plane.
    """
    faces = [(0, i, i % 6 + 1) for i in range(1, 7)]
    return build_topology(7, faces, spiral_len, **groups)


def hexagon_vertices() -> np.ndarray:
    rim = [(math.cos(math.radians(60 * k)), math.sin(math.radians(60 * k)), 0.0) for k in range(6)]
    return np.array([(0.0, 0.0, 0.0), *rim])


class TestBuildTopology(unittest.TestCase):
    """
    Tests build_topology() validation and derived fields.
    """
    def test_edges_are_listed_once(self):
        """
        Checks that a six-face fan has six spokes and six rim edges.
        """
        topology = hexagon_fan()
        self.assertEqual(topology.edges.shape, (12, 2))
        self.assertTrue(np.all(topology.edges[:, 0] < topology.edges[:, 1]))

    def test_topology_id_is_stable(self):
        """
        Checks that the same connectivity yields the same id, and a different one another id.
        """
        self.assertEqual(hexagon_fan().topology_id, hexagon_fan(spiral_len=3).topology_id)
        other = build_topology(4, [(0, 1, 2), (0, 2, 3)], 3)
        self.assertNotEqual(hexagon_fan().topology_id, other.topology_id)

    def test_overlapping_masks_are_rejected(self):
        """
        Checks that a vertex in two region masks is an error.
        """
        with self.assertRaises(GeometryError) as ctx:
            hexagon_fan(region_masks={'nose': [0, 1], 'mouth': [1, 2]})
        self.assertEqual(ctx.exception.kind, 'overlapping_masks')

    def test_eyelid_lengths_must_match(self):
        """
        Checks that upper and lower eyelid polylines need the same length.
        """
        with self.assertRaises(GeometryError) as ctx:
            hexagon_fan(eyelid_polylines={'left': ([1, 2, 3], [4, 5])})
        self.assertEqual(ctx.exception.kind, 'eyelid_length_mismatch')

    def test_out_of_range_indices_are_rejected(self):
        """
        Checks that faces and landmarks must reference existing vertices.
        """
        with self.assertRaises(GeometryError) as ctx:
            build_topology(3, [(0, 1, 3)], 3)
        self.assertEqual(ctx.exception.kind, 'index_out_of_range')
        with self.assertRaises(GeometryError) as ctx:
            hexagon_fan(landmark_indices=[0, 7])
        self.assertEqual(ctx.exception.kind, 'index_out_of_range')

    def test_degenerate_face_is_rejected(self):
        """
        Checks that a face repeating a vertex is an error.
        """
        with self.assertRaises(GeometryError) as ctx:
            build_topology(3, [(0, 1, 1)], 3)
        self.assertEqual(ctx.exception.kind, 'degenerate_face')

    def test_non_manifold_edge_is_rejected(self):
        """
        Checks that an edge shared by three faces is an error.
        """
        with self.assertRaises(GeometryError) as ctx:
            build_topology(5, [(0, 1, 2), (1, 0, 3), (0, 1, 4)], 3)
        self.assertEqual(ctx.exception.kind, 'non_manifold')


class TestSpiralOrderings(unittest.TestCase):
    """
    Tests the spiral orderings derived by build_topology().
    """
    def test_interior_vertex_spiral(self):
        """
        Checks that the center spiral is itself followed by its ring in winding order from the smallest neighbor.
        """
        topology = hexagon_fan(spiral_len=7)
        self.assertEqual(topology.spiral_orderings[0].tolist(), [0, 1, 2, 3, 4, 5, 6])

    def test_boundary_vertex_spiral(self):
        """
        Checks a boundary vertex: one-ring chain rotated to the smallest neighbor, then the outer ring.
        """
        topology = hexagon_fan(spiral_len=7)
        self.assertEqual(topology.spiral_orderings[1].tolist(), [1, 0, 6, 2, 3, 4, 5])

    def test_short_spirals_repeat_the_last_vertex(self):
        """
        Checks padding when the spiral is longer than the mesh.
        """
        topology = hexagon_fan(spiral_len=9)
        self.assertEqual(topology.spiral_orderings[0].tolist(), [0, 1, 2, 3, 4, 5, 6, 6, 6])
        self.assertEqual(topology.spiral_orderings.shape, (7, 9))

    def test_spirals_start_with_the_vertex(self):
        """
        Checks that every spiral starts at its own vertex.
        """
        topology = hexagon_fan(spiral_len=4)
        self.assertEqual(topology.spiral_orderings[:, 0].tolist(), list(range(7)))


class TestMeshFiles(unittest.TestCase):
    """
    Tests make_mesh(), save_mesh(), load_mesh() and build_topology_from_files().
    """
    def test_vertex_count_mismatch(self):
        """
        Checks that a vertex array of the wrong size is rejected.
        """
        with self.assertRaises(GeometryError) as ctx:
            make_mesh(hexagon_fan(), np.zeros((6, 3)))
        self.assertEqual(ctx.exception.kind, 'vertex_count_mismatch')

    def test_non_finite_vertices(self):
        """
        Checks that NaN coordinates are rejected.
        """
        vertices = hexagon_vertices()
        vertices[3, 1] = np.nan
        with self.assertRaises(GeometryError) as ctx:
            make_mesh(hexagon_fan(), vertices)
        self.assertEqual(ctx.exception.kind, 'non_finite')

    def test_obj_file_keeps_vertices(self):
        """
        Checks that a saved OBJ loads back onto the same topology.
        """
        topology = hexagon_fan()
        mesh = make_mesh(topology, hexagon_vertices() * 12.5)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'fan.obj'
            save_mesh(path, mesh)
            loaded = load_mesh(path, topology)
        self.assertTrue(np.allclose(loaded.vertices, mesh.vertices, atol=1e-9))
        self.assertEqual(loaded.topology_id, topology.topology_id)

    def test_obj_with_other_vertex_count(self):
        """
        Checks that loading an OBJ with the wrong vertex count fails.
        """
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'short.obj'
            path.write_text('v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n', encoding='utf-8')
            with self.assertRaises(GeometryError) as ctx:
                load_mesh(path, hexagon_fan())
        self.assertEqual(ctx.exception.kind, 'vertex_count_mismatch')

    def test_topology_from_files(self):
        """
        Checks that a template OBJ plus masks file builds the expected topology.
        """
        topology = hexagon_fan(region_masks={'nose': [0]}, landmark_indices=[1, 4])
        with tempfile.TemporaryDirectory() as tmp:
            obj_path = Path(tmp) / 'template.obj'
            masks_path = Path(tmp) / 'masks.json'
            save_mesh(obj_path, make_mesh(topology, hexagon_vertices()))
            masks_path.write_text(json.dumps({'region_masks': {'nose': [0]}, 'landmark_indices': [1, 4]}), encoding='utf-8')
            built = build_topology_from_files(obj_path, 7, masks_path)
        self.assertEqual(built.topology_id, topology.topology_id)
        self.assertEqual(built.landmark_indices.tolist(), [1, 4])
        self.assertEqual(built.region_masks['nose'].tolist(), [0])

    def test_masks_file_rejects_unknown_keys(self):
        """
        Checks that an unrecognized masks-file key is an error.
        """
        with tempfile.TemporaryDirectory() as tmp:
            obj_path = Path(tmp) / 'template.obj'
            masks_path = Path(tmp) / 'masks.json'
            save_mesh(obj_path, make_mesh(hexagon_fan(), hexagon_vertices()))
            masks_path.write_text(json.dumps({'regions': {}}), encoding='utf-8')
            with self.assertRaises(GeometryError) as ctx:
                build_topology_from_files(obj_path, 7, masks_path)
        self.assertEqual(ctx.exception.kind, 'parse_error')

    def test_edge_lengths(self):
        """
        Checks that every edge of the unit hexagon fan has length 1.
        """
        topology = hexagon_fan()
        self.assertTrue(np.allclose(edge_lengths(hexagon_vertices(), topology.edges), 1.0))


class TestConversion(unittest.TestCase):
    """
    Tests conversion matrices between topologies.
    """
    def setUp(self):
        self.source = hexagon_fan()
        self.target = build_topology(4, [(0, 1, 2), (0, 2, 3)], 3)

    def test_rows_must_sum_to_one(self):
        """
        Checks that a row summing to 0.9 is rejected.
        """
        with self.assertRaises(GeometryError) as ctx:
            make_conversion_matrix('a', 'b', 7, [[(0, 0.5), (1, 0.4)]])
        self.assertEqual(ctx.exception.kind, 'invalid_conversion')

    def test_negative_weights_are_rejected(self):
        """
        Checks that a negative weight is rejected even when the row sums to one.
        """
        with self.assertRaises(GeometryError):
            make_conversion_matrix('a', 'b', 7, [[(0, 1.5), (1, -0.5)]])

    def test_apply_weighted_rows(self):
        """
        Checks that each target vertex is the weighted combination of its source vertices.
        """
        rows = [[(0, 1.0)], [(1, 0.5), (2, 0.5)], [(3, 0.25), (4, 0.75)], [(5, 1.0)]]
        matrix = make_conversion_matrix(self.source.topology_id, self.target.topology_id, 7, rows)
        vertices = hexagon_vertices()
        converted = apply_conversion(matrix, make_mesh(self.source, vertices), self.target)
        self.assertTrue(np.allclose(converted.vertices[1], 0.5 * (vertices[1] + vertices[2])))
        self.assertTrue(np.allclose(converted.vertices[2], 0.25 * vertices[3] + 0.75 * vertices[4]))

    def test_topology_mismatch(self):
        """
        Checks that a mesh on the wrong source topology is rejected.
        """
        rows = [[(0, 1.0)]] * 4
        matrix = make_conversion_matrix('other', self.target.topology_id, 7, rows)
        with self.assertRaises(GeometryError) as ctx:
            apply_conversion(matrix, make_mesh(self.source, hexagon_vertices()), self.target)
        self.assertEqual(ctx.exception.kind, 'topology_mismatch')

    def test_json_file(self):
        """
        Checks that the sparse triplet file reproduces the matrix.
        """
        rows = [[(0, 1.0)], [(1, 0.5), (2, 0.5)], [(3, 1.0)], [(6, 1.0)]]
        matrix = make_conversion_matrix(self.source.topology_id, self.target.topology_id, 7, rows)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'conversion.json'
            save_conversion_matrix(path, matrix)
            loaded = load_conversion_matrix(path)
        self.assertEqual(loaded.rows, matrix.rows)
        self.assertEqual((loaded.to_sparse() != matrix.to_sparse()).nnz, 0)


class TestProjection(unittest.TestCase):
    """
    Tests cameras, project_points() and project_landmarks().
    """
    def test_pinhole_projection(self):
        """
        Checks a hand-computed pinhole projection with rows growing downward.
        """
        camera = make_camera('pinhole', (64, 64), 100.0, translation=[0.0, 0.0, 10.0])
        uv = project_points(np.array([[1.0, 2.0, 0.0]]), camera)
        self.assertTrue(np.allclose(uv, [[42.0, 12.0]]))

    def test_orthographic_projection(self):
        """
        Checks that orthographic projection ignores depth.
        """
        camera = make_camera('orthographic', (64, 64), 2.0)
        uv = project_points(np.array([[1.0, 2.0, 5.0], [1.0, 2.0, -50.0]]), camera)
        self.assertTrue(np.allclose(uv, [[34.0, 28.0], [34.0, 28.0]]))

    def test_points_behind_the_camera(self):
        """
        Checks that a pinhole camera rejects points at or behind the camera plane.
        """
        camera = make_camera('pinhole', (64, 64), 100.0, translation=[0.0, 0.0, 10.0])
        with self.assertRaises(GeometryError) as ctx:
            project_points(np.array([[0.0, 0.0, -20.0]]), camera)
        self.assertEqual(ctx.exception.kind, 'behind_camera')

    def test_invalid_rotation(self):
        """
        Checks that a non-orthonormal rotation is rejected.
        """
        with self.assertRaises(GeometryError) as ctx:
            make_camera('pinhole', (64, 64), 100.0, rotation=2.0 * np.eye(3))
        self.assertEqual(ctx.exception.kind, 'invalid_camera')

    def test_yaw_ring_looks_at_origin(self):
        """
        Checks that the origin projects to the principal point for any yaw.
        """
        for yaw in (-60.0, 0.0, 35.0):
            camera = look_at_yaw(yaw, 600.0, (64, 64), 150.0)
            self.assertTrue(np.allclose(project_points(np.zeros((1, 3)), camera), [[32.0, 32.0]]))

    def test_points_outside_the_image_are_kept(self):
        """
        Checks that projection does not clip to the image bounds.
        """
        camera = make_camera('orthographic', (16, 16), 1.0)
        uv = project_points(np.array([[100.0, 0.0, 0.0]]), camera)
        self.assertAlmostEqual(float(uv[0, 0]), 108.0)

    def test_landmark_csv(self):
        """
        Checks that landmark CSV files keep the projected coordinates.
        """
        topology = hexagon_fan(landmark_indices=[0, 2, 5])
        mesh = make_mesh(topology, hexagon_vertices() * 10.0)
        landmarks = project_landmarks(mesh, make_camera('orthographic', (32, 32), 1.0))
        self.assertEqual(landmarks.points.shape, (3, 2))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'landmarks.csv'
            save_landmarks_csv(path, landmarks)
            loaded = load_landmarks_csv(path)
        self.assertTrue(np.array_equal(loaded.points, landmarks.points))

    def test_missing_landmarks(self):
        """
        Checks that a topology without landmark indices cannot project landmarks.
        """
        mesh = make_mesh(hexagon_fan(), hexagon_vertices())
        with self.assertRaises(GeometryError) as ctx:
            project_landmarks(mesh, make_camera('orthographic', (32, 32), 1.0))
        self.assertEqual(ctx.exception.kind, 'missing_landmarks')


class TestEyelidPolylines(unittest.TestCase):
    """
    Tests polyline resampling and polyline_distance().
    """
    def test_resample_straight_line(self):
        """
        Checks arc-length resampling of an unevenly segmented straight line.
        """
        points = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        resampled = resample_polyline(points, 4)
        self.assertTrue(np.allclose(resampled[:, 0], [0.0, 1.0, 2.0, 3.0]))

    def test_weights_are_convex(self):
        """
        Checks that each resampling row is non-negative and sums to one.
        """
        points = np.random.default_rng(3).normal(size=(5, 3))
        weights = polyline_resampling_weights(points, 16)
        self.assertEqual(weights.shape, (16, 5))
        self.assertTrue(np.all(weights >= 0.0))
        self.assertTrue(np.allclose(weights.sum(axis=1), 1.0))

    def test_coincident_lids_have_zero_distance(self):
        """
        Checks that an upper lid placed onto the lower lid has distance 0.
        """
        topology = hexagon_fan(eyelid_polylines={'left': ([1, 2], [4, 5])})
        vertices = hexagon_vertices()
        vertices[1] = vertices[4]
        vertices[2] = vertices[5]
        self.assertEqual(polyline_distance(make_mesh(topology, vertices), 'left'), 0.0)

    def test_offset_lids(self):
        """
        Checks that a lower lid shifted by 2 mm gives a distance of 2 mm.
        """
        topology = hexagon_fan(eyelid_polylines={'left': ([1, 2], [4, 5])})
        vertices = hexagon_vertices()
        vertices[4] = vertices[1] + [0.0, 0.0, 2.0]
        vertices[5] = vertices[2] + [0.0, 0.0, 2.0]
        self.assertAlmostEqual(polyline_distance(make_mesh(topology, vertices), 'left'), 2.0, places=12)

    def test_missing_eye(self):
        """
        Checks that asking for an undefined eye is an error.
        """
        with self.assertRaises(GeometryError) as ctx:
            polyline_distance(make_mesh(hexagon_fan(), hexagon_vertices()), 'right')
        self.assertEqual(ctx.exception.kind, 'missing_eyelids')


if __name__ == '__main__':
    unittest.main()
