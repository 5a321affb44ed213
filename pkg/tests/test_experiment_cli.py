"""Configuration, sweep orchestration, manifest, caching and the CLI."""

import hashlib
import json

import pytest

from biotms.cli import main
from biotms.config import (ConfigError, ExperimentConfig, apply_overrides, parse_config,
                           write_config)
from biotms import experiment

SMOKE = dict(fine_n=12, coarse_n=3, geometry="generate:4", noff_p=(2, 4), noff_u=(4,),
             steps=3, tau=5.0, write_vtk=True)


class TestConfig:
    def test_defaults_valid(self):
        cfg = ExperimentConfig().validate()
        assert cfg.tau * cfg.steps == pytest.approx(100.0)

    def test_parse_file_with_comments(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# experiment\nfine_n = 12\ncoarse_n = 3\nnoff_p = 2,4\n"
            "oversample_t = 0,2\nsnapshots = random\ngeometry = generate:1\n")
        cfg = parse_config(path)
        assert cfg.fine_n == 12 and cfg.noff_p == (2, 4)
        assert cfg.oversample_t == (0, 2) and cfg.snapshots == "random"

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("fine_m = 12\n")
        with pytest.raises(ConfigError, match="fine_m"):
            parse_config(path)

    def test_zero_mode_count_rejected(self):
        with pytest.raises(ConfigError, match="noff_p"):
            ExperimentConfig(noff_p=(0,)).validate()

    def test_empty_list_rejected(self):
        with pytest.raises(ConfigError, match="noff_u"):
            ExperimentConfig(noff_u=()).validate()

    def test_t_max_consistency(self):
        ExperimentConfig(tau=5.0, steps=20, t_max=100.0).validate()
        with pytest.raises(ConfigError, match="t_max"):
            ExperimentConfig(tau=5.0, steps=20, t_max=99.0).validate()

    def test_nesting_validated(self):
        with pytest.raises(ConfigError, match="coarse_n"):
            ExperimentConfig(fine_n=60, coarse_n=7).validate()

    def test_missing_geometry_file(self):
        with pytest.raises(ConfigError, match="geometry"):
            ExperimentConfig(geometry="/definitely/not/here.txt").validate()

    def test_overrides(self):
        cfg = apply_overrides(ExperimentConfig(),
                              {"noff_p": "2,4,8", "oversample_t": "0,2,4,6",
                               "scheme": "fixed_stress", "tau": 2.5, "steps": 40})
        assert cfg.noff_p == (2, 4, 8)
        assert cfg.oversample_t == (0, 2, 4, 6)
        assert cfg.scheme == "fixed_stress"

    def test_write_roundtrip(self, tmp_path):
        cfg = ExperimentConfig(fine_n=12, coarse_n=3, noff_p=(2,), noff_u=(2,))
        path = tmp_path / "cfg.txt"
        write_config(cfg, path)
        assert parse_config(path) == cfg

    def test_workers_env(self, monkeypatch):
        monkeypatch.setenv("BIOTMS_WORKERS", "3")
        assert ExperimentConfig().effective_workers == 3
        monkeypatch.delenv("BIOTMS_WORKERS")
        assert ExperimentConfig(workers=2).effective_workers == 2


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "smoke"
    cfg = ExperimentConfig(**SMOKE, output_dir=str(out))
    experiment.run(cfg)
    return out, cfg


class TestSweep:
    def test_outputs_exist(self, smoke_run):
        out, cfg = smoke_run
        assert (out / "errors_endpoint.csv").exists()
        assert (out / "manifest.json").exists()
        assert (out / "resolved_config.txt").exists()
        assert (out / "fine" / "diagnostics.csv").exists()
        assert (out / "fine" / "step_0000.vtk").exists()
        for p in cfg.noff_p:
            for u in cfg.noff_u:
                assert (out / f"cell_t0_p{p}_u{u}.csv").exists()
                assert (out / f"cell_t0_p{p}_u{u}_final.vtk").exists()

    def test_endpoint_table_sorted_and_complete(self, smoke_run):
        out, cfg = smoke_run
        lines = (out / "errors_endpoint.csv").read_text().splitlines()
        assert len(lines) == 1 + len(cfg.noff_p) * len(cfg.noff_u)
        assert lines[0].startswith("oversample_t,noff_p,noff_u,dim,")

    def test_manifest_lists_every_file_with_hash(self, smoke_run):
        out, _ = smoke_run
        manifest = json.loads((out / "manifest.json").read_text())
        on_disk = {str(p.relative_to(out)) for p in out.rglob("*")
                   if p.is_file() and ".cache" not in p.parts
                   and p.name != "manifest.json"}
        assert set(manifest["files"]) == on_disk
        for rel, digest in manifest["files"].items():
            data = (out / rel).read_bytes()
            assert hashlib.sha256(data).hexdigest() == digest
        assert all(v == "ok" for v in manifest["cells"].values())

    def test_vtk_structure(self, smoke_run):
        out, _ = smoke_run
        text = (out / "fine" / "step_0000.vtk").read_text().splitlines()
        assert text[0] == "# vtk DataFile Version 2.0"
        assert "DATASET UNSTRUCTURED_GRID" in text
        assert any(line.startswith("POINTS 169 double") for line in text)
        assert any(line.startswith("VECTORS displacement") for line in text)

    def test_determinism_and_cache_soundness(self, tmp_path):
        """Cold rerun in a fresh dir and warm rerun on the cache both
        reproduce byte-identical CSV outputs."""
        cfg_a = ExperimentConfig(**SMOKE, output_dir=str(tmp_path / "a"))
        cfg_b = ExperimentConfig(**SMOKE, output_dir=str(tmp_path / "b"))
        out_a = experiment.run(cfg_a)
        out_b = experiment.run(cfg_b)

        def csv_bytes(root):
            return {str(p.relative_to(root)): p.read_bytes()
                    for p in sorted(root.rglob("*.csv"))}

        first = csv_bytes(out_a)
        assert first == csv_bytes(out_b)
        # warm rerun: offline cache hit must not change any number
        experiment.run(cfg_a)
        assert csv_bytes(out_a) == first
        manifest_a = json.loads((out_a / "manifest.json").read_text())
        manifest_b = json.loads((out_b / "manifest.json").read_text())
        assert manifest_a["files"] == manifest_b["files"]

    def test_failed_cell_recorded_not_fatal(self, tmp_path, monkeypatch):
        from biotms import coarse_solver

        original = coarse_solver.run_coarse
        calls = {"n": 0}

        def flaky(system, p0):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("synthetic breakdown")
            return original(system, p0)

        monkeypatch.setattr(experiment, "run_coarse", flaky)
        cfg = ExperimentConfig(**{**SMOKE, "write_vtk": False},
                               output_dir=str(tmp_path / "flaky"))
        out = experiment.run(cfg)
        manifest = json.loads((out / "manifest.json").read_text())
        statuses = list(manifest["cells"].values())
        assert any(s.startswith("error") for s in statuses)
        assert any(s == "ok" for s in statuses)


class TestCli:
    def test_mesh_command(self, tmp_path, capsys):
        assert main(["mesh", "--fine-n", "12", "--coarse-n", "3",
                     "--output", str(tmp_path)]) == 0
        captured = capsys.readouterr().out
        assert "169 nodes" in captured and "288 cells" in captured
        assert (tmp_path / "mesh.vtk").exists()

    def test_offline_command(self, tmp_path, capsys):
        assert main(["offline", "--fine-n", "12", "--coarse-n", "3",
                     "--geometry", "generate:4", "--noff-p", "2", "--noff-u", "2",
                     "--snapshots", "random", "--snapshot-ratio", "0.5",
                     "--oversample-t", "1", "--seed", "3",
                     "--output", str(tmp_path)]) == 0
        assert (tmp_path / "offline_basis.npz").exists()

    def test_solve_fine_command(self, tmp_path):
        assert main(["solve-fine", "--fine-n", "12", "--coarse-n", "3",
                     "--geometry", "generate:4", "--steps", "2", "--no-vtk",
                     "--output", str(tmp_path)]) == 0
        assert (tmp_path / "diagnostics.csv").exists()

    def test_solve_coarse_command(self, tmp_path, capsys):
        assert main(["solve-coarse", "--fine-n", "12", "--coarse-n", "3",
                     "--geometry", "generate:4", "--steps", "2",
                     "--noff-p", "2", "--noff-u", "2", "--no-vtk",
                     "--output", str(tmp_path)]) == 0
        assert (tmp_path / "errors.csv").exists()
        assert "endpoint relative errors" in capsys.readouterr().out

    def test_report_command(self, smoke_run):
        out, _ = smoke_run
        assert main(["report", "--run-dir", str(out)]) == 0
        report_dir = out / "report"
        assert (report_dir / "table_t0.csv").exists()
        assert (report_dir / "errors_over_time_l2_p_t0.png").exists()
        assert (report_dir / "endpoint_vs_dim_t0.png").exists()

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("noff_p = 0\n")
        assert main(["sweep", "--config", str(bad)]) == 2

    def test_fixed_stress_scheme_flag(self, tmp_path):
        assert main(["solve-fine", "--fine-n", "12", "--coarse-n", "3",
                     "--geometry", "generate:4", "--scheme", "fixed_stress",
                     "--steps", "2", "--no-vtk", "--output", str(tmp_path)]) == 0
