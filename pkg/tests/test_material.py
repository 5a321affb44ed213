"""Coefficient fields, derived moduli and geometry handling."""

import numpy as np
import pytest

from biotms.material import (MaterialError, SubdomainGeometry, build_case,
                             drained_modulus, generate_geometry, lame_from_modulus,
                             read_geometry, write_geometry)
from biotms.mesh import build_fine_mesh
from tests.conftest import uniform_geometry


class TestLame:
    def test_hand_evaluated_case1(self):
        # mu = 10 / (2 * 1.22), lam = 10 * 0.22 / (1.22 * 0.56)
        mu, lam = lame_from_modulus(10.0, 0.22)
        assert mu == pytest.approx(4.098360655737705, rel=1e-12)
        assert lam == pytest.approx(3.2201405152224827, rel=1e-12)

    def test_linearity_in_modulus(self):
        mu10, lam10 = lame_from_modulus(10.0, 0.22)
        mu1, lam1 = lame_from_modulus(1.0, 0.22)
        assert mu1 * 10 == pytest.approx(mu10, rel=1e-14)
        assert lam1 * 10 == pytest.approx(lam10, rel=1e-14)

    def test_case2_soft_subdomain(self):
        mu, _ = lame_from_modulus(1e-3, 0.22)
        assert mu == pytest.approx(4.098360655737705e-4, rel=1e-12)

    def test_incompressible_limit_rejected(self):
        with pytest.raises(MaterialError):
            lame_from_modulus(10.0, 0.5)
        with pytest.raises(MaterialError):
            lame_from_modulus(10.0, 0.61)


class TestDrainedModulus:
    def test_hand_evaluated(self):
        # 10 * 0.78 / (0.56 * 1.22)
        assert drained_modulus(10.0, 0.22) == pytest.approx(11.416861826697893, rel=1e-12)

    def test_zero_modulus_limit(self):
        assert drained_modulus(0.0, 0.22) == 0.0

    def test_zero_poisson_collapses(self):
        assert drained_modulus(7.5, 0.0) == pytest.approx(7.5, rel=1e-15)

    def test_incompressible_limit_rejected(self):
        with pytest.raises(MaterialError):
            drained_modulus(1.0, 0.5)


class TestBuildCase:
    def test_homogeneous_degenerate_geometry(self):
        mesh = build_fine_mesh(6)
        mat = build_case(1, uniform_geometry(6), mesh)
        assert np.all(mat.permeability == 1e-3)
        assert np.all(mat.biot_modulus == 1.0)
        assert np.all(mat.elastic_modulus == 10.0)

    def test_case2_contrast(self):
        mesh = build_fine_mesh(12)
        geom = generate_geometry(12, seed=4, margin=2)
        mat = build_case(2, geom, mesh)
        assert set(np.unique(mat.labels)) == {1, 2}
        assert mat.elastic_modulus.max() / mat.elastic_modulus.min() == pytest.approx(1e4)

    def test_case1_contrast(self):
        mesh = build_fine_mesh(12)
        mat = build_case(1, generate_geometry(12, seed=4, margin=2), mesh)
        assert mat.elastic_modulus.max() / mat.elastic_modulus.min() == pytest.approx(10.0)

    def test_flow_fields_shared_between_cases(self):
        mesh = build_fine_mesh(12)
        geom = generate_geometry(12, seed=4, margin=2)
        mat1 = build_case(1, geom, mesh)
        mat2 = build_case(2, geom, mesh)
        assert np.array_equal(mat1.permeability, mat2.permeability)
        assert np.array_equal(mat1.biot_modulus, mat2.biot_modulus)
        assert not np.array_equal(mat1.elastic_modulus, mat2.elastic_modulus)

    def test_unknown_case_rejected(self):
        mesh = build_fine_mesh(4)
        with pytest.raises(MaterialError):
            build_case(3, uniform_geometry(4), mesh)

    def test_global_constants(self):
        mesh = build_fine_mesh(4)
        mat = build_case(1, uniform_geometry(4), mesh)
        assert mat.viscosity == 1.0
        assert mat.alpha == 0.9
        assert mat.poisson == 0.22

    def test_derived_fields_deterministic(self):
        mesh = build_fine_mesh(12)
        geom = generate_geometry(12, seed=4, margin=2)
        a = build_case(1, geom, mesh)
        b = build_case(1, geom, mesh)
        for field in ("mu", "lam", "drained"):
            assert np.array_equal(getattr(a, field), getattr(b, field))
        assert np.all(a.mu > 0) and np.all(a.lam > 0) and np.all(a.drained > 0)


class TestGeometry:
    def test_raster_roundtrip(self, tmp_path):
        geom = generate_geometry(16, seed=3)
        path = tmp_path / "geo.txt"
        write_geometry(path, geom)
        back = read_geometry(path)
        assert np.array_equal(back.raster, geom.raster)
        header = path.read_text().split()[:2]
        assert header == ["16", "16"]

    def test_bad_label_rejected(self):
        with pytest.raises(MaterialError):
            SubdomainGeometry(np.array([[1, 3]]))

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "geo.txt"
        path.write_text("4 4\n1 1 1\n")
        with pytest.raises(MaterialError):
            read_geometry(path)

    def test_generator_deterministic(self):
        a = generate_geometry(20, seed=9)
        b = generate_geometry(20, seed=9)
        c = generate_geometry(20, seed=10)
        assert np.array_equal(a.raster, b.raster)
        assert not np.array_equal(a.raster, c.raster)

    def test_generator_margin(self):
        geom = generate_geometry(30, seed=1, margin=4)
        r = geom.raster
        assert np.all(r[:4, :] == 1) and np.all(r[-4:, :] == 1)
        assert np.all(r[:, :4] == 1) and np.all(r[:, -4:] == 1)

    def test_labels_cover_all_cells(self):
        mesh = build_fine_mesh(10)
        labels = generate_geometry(10, seed=2).labels_for(mesh)
        assert labels.shape == (mesh.n_cells,)
        assert np.all(np.isin(labels, (1, 2)))

    def test_centroid_lookup_on_coarser_raster(self):
        # a 2x2 raster paints the four quadrants of any finer mesh
        raster = np.array([[1, 2], [2, 1]])
        mesh = build_fine_mesh(8)
        labels = SubdomainGeometry(raster).labels_for(mesh)
        cx, cy = mesh.centroids[:, 0], mesh.centroids[:, 1]
        expected = np.where((cx < 0.5) ^ (cy < 0.5), 2, 1)
        assert np.array_equal(labels, expected)
