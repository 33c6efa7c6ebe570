import json
from pathlib import Path

import pytest
from PIL import Image

from pe_triage.cli import main
from pe_triage.dicom import load_series
from pe_triage.triage import DatasetManifest

TINY = {"stage_channels": [8, 8, 16, 16], "cbam_reduction": 4, "spatial_kernel": 3, "input_size": 32, "epochs": 1,
        "batch_size": 4}


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    code = main(["--log-level", "WARNING", "phantom-gen", "--out", str(data), "--pe", "2", "--other", "2", "--wnl", "2",
                 "--slices", "3", "--size", "192", "--seed", "4", "--split", "1,1,1"])
    assert code == 0
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    return root, data, cfg


@pytest.fixture(scope="module")
def weights(cohort):
    root, data, cfg = cohort
    out = {}
    for stage in (1, 2):
        path = root / f"s{stage}.ctw"
        code = main(["train", "--stage", str(stage), "--manifest", str(data / "manifest.tsv"), "--out", str(path),
                     "--config", str(cfg)])
        assert code == 0
        out[stage] = path
    return out


def test_phantom_gen_tree(cohort):
    _, data, _ = cohort
    manifest = DatasetManifest.read(data / "manifest.tsv")
    assert len(manifest) == 18
    assert sorted(lab.value for lab in manifest.patients().values()) == ["OTHER", "OTHER", "PE", "PE", "WNL", "WNL"]
    for pdir in sorted(p for p in data.iterdir() if p.is_dir()):
        vol = load_series(sorted(pdir.glob("*.dcm")))
        assert vol.instance_numbers == (1, 2, 3)
        assert len(list(pdir.glob("*.gt"))) == 3


def test_phantom_gen_reproducible(cohort, tmp_path):
    _, data, _ = cohort
    args = ["--pe", "2", "--other", "2", "--wnl", "2", "--slices", "3", "--size", "192", "--seed", "4", "--split", "1,1,1"]
    assert main(["phantom-gen", "--out", str(tmp_path), *args]) == 0
    assert (tmp_path / "manifest.tsv").read_text() == (data / "manifest.tsv").read_text()
    first = sorted(data.rglob("*.dcm"))[0]
    assert (tmp_path / first.relative_to(data)).read_bytes() == first.read_bytes()


def test_preprocess_outputs(cohort, tmp_path):
    _, data, _ = cohort
    assert main(["preprocess", "--manifest", str(data / "manifest.tsv"), "--out", str(tmp_path), "--jobs", "2"]) == 0
    pngs = sorted(tmp_path.glob("*.png"))
    assert len(pngs) == 18 * 2
    assert Image.open(pngs[0]).size == (224, 224)
    report = (tmp_path / "crop_boxes.tsv").read_text().splitlines()
    assert len(report) == 1 + 18
    assert all(line.endswith("false") for line in report[1:])


def test_train_writes_history(weights):
    hist = json.loads(weights[1].with_suffix(".history.json").read_text())
    assert hist["stage"] == 1 and len(hist["epochs"]) == 1
    assert hist["config"]["stage_channels"] == [8, 8, 16, 16]


def test_eval_report(cohort, weights, tmp_path):
    _, data, cfg = cohort
    out = tmp_path / "m.json"
    args = ["eval", "--stage", "1", "--manifest", str(data / "manifest.tsv"), "--weights", str(weights[1]),
            "--config", str(cfg), "--split", "ALL", "--out", str(out)]
    assert main(args) == 0
    report = json.loads(out.read_text())
    assert report["per_slice"]["accuracy"]["denominator"] == 18
    assert report["per_patient"]["accuracy"]["denominator"] == 6
    assert set(report["per_slice"]["sensitivity"]) <= {"Disease", "WNL"}
    first = out.read_text()
    assert main(args) == 0
    assert out.read_text() == first


def test_triage_and_explain(cohort, weights, tmp_path):
    _, data, cfg = cohort
    out = tmp_path / "t"
    args = ["triage", "--dicom-dir", str(data), "--stage1", str(weights[1]), "--stage2", str(weights[2]),
            "--out", str(out), "--config", str(cfg), "--explain", "--jobs", "2"]
    assert main(args) == 0
    rows = (out / "verdicts.tsv").read_text().splitlines()[1:]
    assert len(rows) == 6
    assert {r.split("\t")[1] for r in rows} <= {"PE", "OTHER", "WNL"}
    n_pe = sum(int(r.split("\t")[3]) for r in rows)
    assert len(list((out / "overlays").glob("*.png"))) == 2 * n_pe

    dcm = sorted(data.rglob("*.dcm"))[0]
    ex = tmp_path / "ex"
    assert main(["explain", str(dcm), "--weights", str(weights[2]), "--config", str(cfg), "--out", str(ex),
                 "--dump-maps"]) == 0
    assert len(list(ex.glob("*.png"))) == 2 and len(list(ex.glob("*.cam"))) == 2
    assert main(["explain", str(dcm), "--weights", str(weights[2]), "--config", str(cfg), "--out", str(ex),
                 "--layer", "stage7"]) == 2


def test_triage_reports_unreadable_files(cohort, weights, tmp_path):
    _, data, cfg = cohort
    bad = tmp_path / "in"
    bad.mkdir()
    src = sorted(data.rglob("*.dcm"))[0]
    (bad / "ok.dcm").write_bytes(src.read_bytes())
    (bad / "broken.dcm").write_bytes(b"not a dicom file")
    out = tmp_path / "t"
    code = main(["triage", "--dicom-dir", str(bad), "--stage1", str(weights[1]), "--stage2", str(weights[2]),
                 "--out", str(out), "--config", str(cfg)])
    assert code == 1
    errors = (out / "errors.tsv").read_text()
    assert "broken.dcm" in errors and "MissingMagic" in errors
    assert len((out / "verdicts.tsv").read_text().splitlines()) == 2


def test_exit_codes(cohort, tmp_path):
    _, data, cfg = cohort
    manifest = str(data / "manifest.tsv")
    assert main(["train"]) == 2
    assert main(["nonsense"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochz": 1}))
    assert main(["train", "--stage", "1", "--manifest", manifest, "--out", str(tmp_path / "w"), "--config", str(bad)]) == 2
    assert main(["train", "--stage", "1", "--manifest", manifest, "--out", str(tmp_path / "w"), "--set", "lr"]) == 2
    assert main(["train", "--stage", "1", "--manifest", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "w")]) == 1
    garbage = tmp_path / "w.ctw"
    garbage.write_bytes(b"junk")
    assert main(["eval", "--stage", "1", "--manifest", manifest, "--weights", str(garbage), "--config", str(cfg)]) == 1
    assert main(["--version"]) == 0


def test_cli_flag_overrides_config(cohort, tmp_path):
    _, data, cfg = cohort
    out = tmp_path / "w.ctw"
    assert main(["train", "--stage", "2", "--manifest", str(data / "manifest.tsv"), "--out", str(out),
                 "--config", str(cfg), "--epochs", "2", "--set", "seed=9"]) == 0
    hist = json.loads(Path(out.with_suffix(".history.json")).read_text())
    assert len(hist["epochs"]) == 2 and hist["config"]["seed"] == 9 and hist["config"]["batch_size"] == 4
