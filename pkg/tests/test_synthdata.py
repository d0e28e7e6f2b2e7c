import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshatlas.synthdata import (
    Cohort,
    DeformConfig,
    denormalize,
    generate_cohort,
    is_valid_shape,
    normalize,
    split_cohort,
    template_mm,
)


class TestNormalize:
    def test_example(self):
        np.testing.assert_array_equal(normalize([[128.0, -64.0, 0.0]]), [[0.5, -0.25, 0.0]])

    def test_origin(self):
        np.testing.assert_array_equal(normalize(np.zeros((4, 3))), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-256, 256), min_size=3, max_size=30))
    def test_round_trip(self, xs):
        v = np.resize(np.asarray(xs), (len(xs) // 3 or 1, 3))
        assert np.abs(denormalize(normalize(v)) - v).max(initial=0) < 1e-12

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            normalize([[300.0, 0, 0]])

    def test_custom_scale(self):
        assert normalize([[50.0, 0, 0]], unit_scale=100.0)[0, 0] == 0.5


class TestSplit:
    def test_default_counts(self):
        s = split_cohort(124, seed=0)
        assert [(s == k).sum() for k in ("train", "validation", "test")] == [86, 19, 19]

    def test_seeded(self):
        assert (split_cohort(124, seed=4) == split_cohort(124, seed=4)).all()
        assert not (split_cohort(124, seed=4) == split_cohort(124, seed=5)).all()

    @pytest.mark.parametrize("ratios", [(1, 0, 0), (0.5, 0.5, 0.5), (0.5, 0.6, -0.1), (0.5, 0.5)])
    def test_bad_ratios(self, ratios):
        with pytest.raises(ValueError):
            split_cohort(124, ratios)


class TestGenerate:
    def test_bitwise_deterministic(self, toy_hierarchy):
        a = generate_cohort(toy_hierarchy, 8, seed=11)
        b = generate_cohort(toy_hierarchy, 8, seed=11)
        assert a.vertices.tobytes() == b.vertices.tobytes()
        assert list(a.split) == list(b.split)

    def test_seed_changes_cases(self, toy_hierarchy):
        a = generate_cohort(toy_hierarchy, 8, seed=11)
        b = generate_cohort(toy_hierarchy, 8, seed=12)
        assert not np.array_equal(a.vertices, b.vertices)

    def test_zero_deformation_is_template(self, toy_hierarchy):
        cfg = DeformConfig.zero()
        c = generate_cohort(toy_hierarchy, 6, seed=0, deform_cfg=cfg)
        expected = template_mm(toy_hierarchy, cfg) / c.unit_scale
        for x in c.vertices:
            np.testing.assert_allclose(x, expected, rtol=0, atol=1e-15)

    def test_full_size_cohort(self, hierarchy3):
        c = generate_cohort(hierarchy3, 124, seed=0)
        assert c.vertices.shape == (124, 162, 3)
        assert np.abs(c.vertices).max() <= 1.0
        flat = c.vertices.reshape(124, -1)
        assert len(np.unique(flat.round(12), axis=0)) == 124
        ref = template_mm(hierarchy3, DeformConfig())
        assert all(is_valid_shape(c.mesh(i).vertices, c.faces, ref) for i in range(124))
        assert [len(c.indices(k)) for k in ("train", "validation", "test")] == [86, 19, 19]

    def test_shared_topology(self, toy_cohort, toy_hierarchy):
        for i in range(toy_cohort.n_cases):
            assert toy_cohort.mesh(i).faces is toy_hierarchy.fine.faces or np.array_equal(
                toy_cohort.mesh(i).faces, toy_hierarchy.fine.faces
            )

    def test_too_few_cases(self, toy_hierarchy):
        with pytest.raises(ValueError):
            generate_cohort(toy_hierarchy, 2)


class TestValidity:
    def test_flipped_face_rejected(self, toy_hierarchy):
        ref = template_mm(toy_hierarchy, DeformConfig())
        faces = toy_hierarchy.fine.faces
        assert is_valid_shape(ref, faces, ref)
        assert not is_valid_shape(-ref, faces, ref)

    def test_collapsed_face_rejected(self, toy_hierarchy):
        ref = template_mm(toy_hierarchy, DeformConfig())
        faces = toy_hierarchy.fine.faces
        bad = ref.copy()
        a, b, _ = faces[0]
        bad[b] = bad[a]
        assert not is_valid_shape(bad, faces, ref)


class TestCohortIO:
    def test_round_trip(self, toy_cohort, tmp_path):
        toy_cohort.save(tmp_path / "c")
        back = Cohort.load(tmp_path / "c")
        assert back.case_ids == toy_cohort.case_ids
        assert list(back.split) == list(toy_cohort.split)
        # OFF files keep 9 significant digits in mm
        np.testing.assert_allclose(
            denormalize(back.vertices), denormalize(toy_cohort.vertices), rtol=5e-9, atol=1e-12
        )
        assert len(list((tmp_path / "c" / "cases").glob("*.off"))) == toy_cohort.n_cases

    def test_case_lookup(self, toy_cohort):
        assert toy_cohort.case_index("case003") == 3
        with pytest.raises(KeyError):
            toy_cohort.case_index("nope")

    def test_rejects_unnormalized(self, toy_hierarchy):
        with pytest.raises(ValueError):
            Cohort(toy_hierarchy, np.full((1, 42, 3), 2.0), ["a"], ["train"])
