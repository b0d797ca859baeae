import json

import numpy as np
import pytest

from ctatlas.cli import main
from ctatlas.nifti import read_nifti, write_nifti

FAST = {"schedule": [{"spacing": 6, "radius": 2, "quant": 2}, {"spacing": 4, "radius": 1, "quant": 1}],
        "affine": {"levels": 2}}


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("--seed", 3, "--out", d / "cohort", "phantom-cohort", "--n", 1) == 0
    cfg = d / "fast.json"
    cfg.write_text(json.dumps(FAST))
    return d, d / "cohort" / "manifest.json", cfg


@pytest.fixture(scope="module")
def pipeline_run(cohort):
    d, manifest, cfg = cohort
    outs = []
    for name in ("run1", "run2"):
        assert run("--config", cfg, "--manifest", manifest, "--out", d / name, "--threads", 1, "pipeline") == 0
        outs.append(d / name)
    return outs


def test_pipeline_outputs(pipeline_run):
    out = pipeline_run[0]
    for name in ("portal_venous_mean.nii", "portal_venous_variance.nii", "portal_venous_report.json",
                 "metrics.json", "report.json"):
        assert (out / name).exists(), name
    for name in ("affine.json", "field.dfld", "registered.nii", "label.nii"):
        assert (out / "subjects" / "sub000" / name).exists(), name


def test_repeated_runs_are_byte_identical(pipeline_run):
    a, b = pipeline_run
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_evaluate_reports_kidneys(cohort, pipeline_run, capsys):
    d, manifest, cfg = cohort
    capsys.readouterr()
    assert run("--manifest", manifest, "--out", pipeline_run[0], "evaluate") == 0
    rows = json.loads(capsys.readouterr().out)
    ids = {r["organ_id"] for r in rows}
    assert {2, 3} <= ids
    assert all(set(r) == {"subject", "organ_id", "dice", "msd_mm", "hd_mm"} for r in rows)
    sub = pipeline_run[0] / "subjects" / "sub000" / "label.nii"
    truth = d / "cohort" / "sub000_label.nii"
    assert run("evaluate", sub, truth, "--symmetric", "-o", d / "ev.json") == 0
    assert {r["organ_id"] for r in json.loads((d / "ev.json").read_text())} == ids


def test_manual_chain_matches_pipeline(cohort, pipeline_run, tmp_path):
    d, manifest, cfg = cohort
    c = d / "cohort"
    atlas, vol = c / "atlas.nii", c / "sub000.nii"
    base = ["--config", cfg]
    assert run(*base, "crop", vol, "--atlas", atlas, "-o", tmp_path / "prep.nii") == 0
    assert run(*base, "reg-affine", atlas, tmp_path / "prep.nii", "-o", tmp_path / "a.json") == 0
    assert run(*base, "reg-deform", atlas, tmp_path / "prep.nii", "--affine", tmp_path / "a.json",
               "-o", tmp_path / "f.dfld") == 0
    assert run("transfer-labels", c / "atlas_label.nii", "--affine", tmp_path / "a.json",
               "--field", tmp_path / "f.dfld", "--subject", vol, "-o", tmp_path / "l.nii") == 0
    sub = pipeline_run[0] / "subjects" / "sub000"
    assert (tmp_path / "f.dfld").read_bytes() == (sub / "field.dfld").read_bytes()
    assert (tmp_path / "l.nii").read_bytes() == (sub / "label.nii").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (sub / "affine.json").read_bytes()


def test_score_warp_invert_render(cohort, pipeline_run, tmp_path, capsys):
    d, _, _ = cohort
    c = d / "cohort"
    sub = pipeline_run[0] / "subjects" / "sub000"
    capsys.readouterr()
    assert run("score", c / "sub000.nii") == 0
    rep = json.loads(capsys.readouterr().out)
    assert len(rep["raw"]) == read_nifti(c / "sub000.nii").geometry.dims[2]
    assert run("warp", c / "atlas_label.nii", "--reference", c / "atlas.nii", "--field", sub / "field.dfld",
               "-o", tmp_path / "w.nii") == 0
    assert read_nifti(tmp_path / "w.nii").is_label
    assert run("invert", sub / "field.dfld", "--reference", c / "atlas.nii", "-o", tmp_path / "inv.dfld",
               "--report", tmp_path / "inv.json") == 0
    assert "converged" in json.loads((tmp_path / "inv.json").read_text())
    out = pipeline_run[0]
    assert run("render", "montage", c / "atlas.nii", out / "portal_venous_mean.nii", "-o", tmp_path / "m.png") == 0
    assert run("render", "heatmap", out / "portal_venous_variance.nii", "-o", tmp_path / "h.png") == 0
    assert run("render", "checkerboard", sub / "field.dfld", "--reference", c / "atlas.nii",
               "-o", tmp_path / "c.png") == 0
    assert all((tmp_path / n).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for n in ("m.png", "h.png", "c.png"))


def test_errors_are_json(tmp_path, capsys):
    capsys.readouterr()
    assert run("pipeline") == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(err) == {"error", "message"}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert run("--config", bad, "--out", tmp_path, "--manifest", bad, "pipeline") == 1
    assert "error" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert run("evaluate", bad) == 1


def test_evaluate_pairs_without_manifest(tmp_path, capsys):
    from ctatlas.volume import LabelMap
    lab = np.zeros((6, 6, 6), dtype=np.int16)
    lab[1:4, 1:4, 1:4] = 2
    write_nifti(LabelMap.from_array(lab), tmp_path / "a.nii")
    capsys.readouterr()
    assert run("evaluate", tmp_path / "a.nii", tmp_path / "a.nii", "--subject", "x") == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows == [{"subject": "x", "organ_id": 2, "dice": 1.0, "msd_mm": 0.0, "hd_mm": 0.0}]
