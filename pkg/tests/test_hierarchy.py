import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meshatlas.hierarchy import (
    LevelCorrespondence,
    TemplateHierarchy,
    build_hierarchy,
    decimate,
    icosphere,
    pool_features,
    pooling_matrix,
    subdivide_loop,
    unpool_features,
    unpooling_matrix,
)
from meshatlas.mesh import MeshError, TriMesh, build_adjacency, icosahedron, tetrahedron, validate_closed


@pytest.fixture(scope="module")
def ico_step():
    fine, corr = subdivide_loop(icosahedron(), geometric_smoothing=False)
    return fine, corr, build_adjacency(fine)


def loop_oracle(mesh):
    """Per-vertex and per-edge Loop rules written out with python loops."""
    v = mesh.vertices
    nbrs = {i: set() for i in range(len(v))}
    opp = {}
    for a, b, c in mesh.faces.tolist():
        for x, y, z in ((a, b, c), (b, c, a), (c, a, b)):
            nbrs[x].update((y, z))
            opp.setdefault(tuple(sorted((x, y))), []).append(z)
    even = []
    for i in range(len(v)):
        k = len(nbrs[i])
        beta = (5 / 8 - (3 / 8 + np.cos(2 * np.pi / k) / 4) ** 2) / k
        even.append((1 - k * beta) * v[i] + beta * sum(v[j] for j in sorted(nbrs[i])))
    odd = {e: 3 / 8 * (v[e[0]] + v[e[1]]) + 1 / 8 * (v[o[0]] + v[o[1]]) for e, o in opp.items()}
    return np.array(even), odd


class TestSubdivision:
    def test_icosahedron_counts(self, ico_step):
        fine, corr, _ = ico_step
        assert (fine.n_vertices, fine.n_faces) == (42, 80)
        assert len(corr.inherited) == 12 and len(corr.inserted) == 30

    def test_midpoints_without_smoothing(self, ico_step):
        fine, corr, _ = ico_step
        v = icosahedron().vertices
        for hi, (a, b) in corr.inserted.items():
            assert a < b
            np.testing.assert_array_equal(fine.vertices[hi], (v[a] + v[b]) / 2)
        np.testing.assert_array_equal(fine.vertices[:12], v)

    def test_every_coarse_edge_inserted_once(self, ico_step):
        _, corr, _ = ico_step
        edges = {tuple(e) for e in corr.inserted_edges.tolist()}
        assert len(edges) == 30 == len(corr.inserted_edges)

    def test_smoothing_stays_inside_unit_sphere(self):
        fine, _ = subdivide_loop(icosahedron(), geometric_smoothing=True)
        assert (np.linalg.norm(fine.vertices, axis=1) < 1).all()

    @pytest.mark.parametrize("base", [icosahedron(), tetrahedron(), icosphere(1)], ids=["ico", "tet", "ico42"])
    def test_loop_weights_match_oracle(self, base):
        fine, corr = subdivide_loop(base, geometric_smoothing=True)
        even, odd = loop_oracle(base)
        np.testing.assert_allclose(fine.vertices[: base.n_vertices], even, rtol=0, atol=1e-14)
        for hi, e in corr.inserted.items():
            np.testing.assert_allclose(fine.vertices[hi], odd[e], rtol=0, atol=1e-14)

    def test_inherited_one_ring_is_inserted_only(self, ico_step):
        _, corr, adj = ico_step
        for i in range(corr.n_low):
            assert all(not corr.is_inherited(j) for j in adj.neighbors[i])

    def test_open_mesh_rejected(self):
        m = icosahedron()
        with pytest.raises(MeshError):
            subdivide_loop(TriMesh(m.vertices, m.faces[:-1]))


class TestHierarchy:
    def test_three_levels(self):
        assert build_hierarchy(icosahedron(), 3).vertex_counts == [12, 42, 162]

    def test_four_level_faces(self):
        h = build_hierarchy(icosahedron(), 4)
        assert h.face_counts == [20, 80, 320, 1280]
        for k in range(3):
            lo = h.levels[k]
            assert h.levels[k + 1].n_vertices == lo.n_vertices + 3 * lo.n_faces // 2
        assert all(2 * v - f == 4 for v, f in zip(h.vertex_counts, h.face_counts))

    def test_two_levels_one_correspondence(self):
        assert len(build_hierarchy(tetrahedron(), 2).correspondences) == 1

    def test_single_level_rejected(self):
        with pytest.raises(ValueError):
            build_hierarchy(num_levels=1)

    def test_save_load_round_trip(self, tmp_path, hierarchy3):
        hierarchy3.save(tmp_path / "h")
        back = TemplateHierarchy.load(tmp_path / "h")
        assert back.vertex_counts == hierarchy3.vertex_counts
        for a, b in zip(back.correspondences, hierarchy3.correspondences):
            assert a.n_low == b.n_low
            np.testing.assert_array_equal(a.inserted_edges, b.inserted_edges)
        text = (tmp_path / "h" / "correspondence_0.txt").read_text().splitlines()
        assert text[0] == "inherited 12"
        assert text[1].split()[:2] == ["inserted", "12"]

    def test_load_rejects_bad_correspondence(self, tmp_path, toy_hierarchy):
        toy_hierarchy.save(tmp_path / "h")
        path = tmp_path / "h" / "correspondence_0.txt"
        path.write_text(path.read_text().replace("inherited 12", "parents 12"))
        with pytest.raises(MeshError):
            TemplateHierarchy.load(tmp_path / "h")

    def test_load_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            TemplateHierarchy.load(tmp_path / "nothing")


class TestPooling:
    def test_constant_preserved(self, ico_step):
        _, corr, adj = ico_step
        out = pool_features(np.full((42, 2), 3.5), adj, corr)
        np.testing.assert_allclose(out, 3.5, atol=1e-15)

    def test_self_plus_five_neighbors(self, ico_step):
        _, corr, adj = ico_step
        F = np.zeros(42)
        F[0] = 6.0
        assert adj.degree[0] == 5
        assert pool_features(F, adj, corr)[0] == 1.0

    def test_matches_one_ring_oracle(self, ico_step):
        fine, corr, adj = ico_step
        F = fine.vertices
        out = pool_features(F, adj, corr)
        for i in range(corr.n_low):
            ring = [i] + list(adj.neighbors[i])
            np.testing.assert_allclose(out[i], F[ring].mean(axis=0), rtol=0, atol=1e-15)

    def test_shape_mismatch(self, ico_step):
        _, corr, adj = ico_step
        with pytest.raises(ValueError):
            pool_features(np.zeros((12, 3)), adj, corr)

    def test_matrix_rows_and_equivalence(self, ico_step, rng):
        _, corr, adj = ico_step
        P = pooling_matrix(corr, adj)
        assert P.shape == (12, 42)
        assert np.abs(np.asarray(P.sum(axis=1)).ravel() - 1).max() <= 1e-15
        F = rng.normal(size=(42, 5))
        assert np.abs(P @ F - pool_features(F, adj, corr)).max() == 0.0


class TestUnpooling:
    def test_endpoint_average(self, ico_step):
        _, corr, _ = ico_step
        F = np.zeros(12)
        hi, (a, b) = next(iter(corr.inserted.items()))
        F[a], F[b] = 1.0, 3.0
        assert unpool_features(F, corr)[hi] == 2.0

    def test_constant(self, ico_step):
        _, corr, _ = ico_step
        np.testing.assert_array_equal(unpool_features(np.full((12, 3), -2.0), corr), -2.0)

    def test_equals_midpoint_subdivision(self, ico_step):
        fine, corr, _ = ico_step
        np.testing.assert_array_equal(unpool_features(icosahedron().vertices, corr), fine.vertices)

    def test_matrix(self, ico_step, rng):
        _, corr, _ = ico_step
        U = unpooling_matrix(corr)
        assert U.shape == (42, 12)
        single_ones = [(U.getrow(i).nnz == 1 and U[i].max() == 1.0) for i in range(42)]
        assert sum(single_ones) == 12
        F = rng.normal(size=(12, 4))
        assert np.abs(U @ F - unpool_features(F, corr)).max() == 0.0
        np.testing.assert_allclose(np.asarray(U.sum(axis=1)).ravel(), 1.0, atol=1e-15)

    def test_shape_mismatch(self, ico_step):
        _, corr, _ = ico_step
        with pytest.raises(ValueError):
            unpool_features(np.zeros((42, 3)), corr)

    def test_pool_of_unpooled_constant(self, ico_step):
        _, corr, adj = ico_step
        F = np.full((12, 3), 0.25)
        np.testing.assert_allclose(pool_features(unpool_features(F, corr), adj, corr), F, atol=1e-15)


finite = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(
    F=arrays(np.float64, (42, 3), elements=finite),
    G=arrays(np.float64, (42, 3), elements=finite),
    a=finite,
    b=finite,
    t=arrays(np.float64, (3,), elements=finite),
)
def test_pool_linear_and_translation_equivariant(F, G, a, b, t):
    fine, corr = subdivide_loop(icosahedron(), geometric_smoothing=False)
    adj = build_adjacency(fine)
    pool = lambda X: pool_features(X, adj, corr)  # noqa: E731
    np.testing.assert_allclose(pool(a * F + b * G), a * pool(F) + b * pool(G), rtol=0, atol=1e-12 * (1 + abs(a) + abs(b)) * 10)
    np.testing.assert_allclose(pool(F + t), pool(F) + t, rtol=0, atol=1e-12 * 20)
    low = F[:12]
    unpool = lambda X: unpool_features(X, corr)  # noqa: E731
    np.testing.assert_allclose(unpool(a * low + b * G[:12]), a * unpool(low) + b * unpool(G[:12]), rtol=0, atol=1e-12 * 200)
    np.testing.assert_allclose(unpool(low + t), unpool(low) + t, rtol=0, atol=1e-12 * 20)


class TestDecimate:
    def test_642_to_162(self):
        out = decimate(icosphere(3), 162)
        assert 160 <= out.n_vertices <= 164
        assert validate_closed(out).ok

    def test_tetrahedron_is_minimal(self):
        t = tetrahedron()
        out = decimate(t, 4)
        assert out.n_vertices == 4
        np.testing.assert_array_equal(out.vertices, t.vertices)

    def test_42_to_12_keeps_euler(self):
        out = decimate(icosphere(1), 12)
        assert out.n_vertices <= 14
        assert 2 * out.n_vertices - out.n_faces == 4
        assert validate_closed(out).ok

    def test_infeasible_target(self):
        with pytest.raises(ValueError):
            decimate(icosahedron(), 3)

    def test_correspondence_counts(self):
        c = LevelCorrespondence(3, np.array([[0, 1], [0, 2], [1, 2]]))
        assert c.n_high == 6
        assert c.inserted == {3: (0, 1), 4: (0, 2), 5: (1, 2)}
