import hashlib

import numpy as np
import pytest

from oracles import enumerate_triplets

from avcmr.cli import main
from avcmr.data import load_dataset
from avcmr.model import load_checkpoint
from avcmr.trainer import evaluate_models


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def body(path):
    return [l for l in path.read_text().splitlines() if not l.startswith("#")]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n-pairs", "60", "--num-classes", "3", "--out", str(root / "data")]) == 0
    manifest = root / "data" / "manifest.txt"
    assert main(["train", "--manifest", str(manifest), "--epochs", "12", "--switch", "6",
                 "--hidden-dim", "12", "--batch-size", "48", "--eval-every", "4",
                 "--out", str(root / "run")]) == 0
    return root, manifest, root / "run" / "final.npz"


def test_gen_data_files(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path)]) == 0
    for name in ("manifest.txt", "audio.csv", "visual.csv"):
        assert (tmp_path / name).exists()
    assert len(body(tmp_path / "audio.csv")) == 201
    assert body(tmp_path / "visual.csv")[0].startswith("id,label,f0,")
    assert (tmp_path / "audio.csv").read_text().startswith("# avcmr gen-data")


def test_gen_data_rejects_one_class(tmp_path, capsys):
    assert main(["gen-data", "--num-classes", "1", "--out", str(tmp_path)]) == 1
    assert "num_classes must be >= 2" in capsys.readouterr().err


def test_gen_data_is_byte_identical(tmp_path):
    main(["gen-data", "--out", str(tmp_path / "a")])
    main(["gen-data", "--out", str(tmp_path / "b")])
    for name in ("manifest.txt", "audio.csv", "visual.csv"):
        assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 1


def test_train_schedule_rows(workspace):
    root, _, _ = workspace
    rows = body(root / "run" / "metrics.csv")
    assert len(rows) == 13
    stages = [r.split(",")[1] for r in rows[1:]]
    assert stages == ["semihard"] * 5 + ["hard"] * 7
    assert (root / "run" / "stage1.npz").exists()


def test_train_is_deterministic(workspace, tmp_path):
    root, manifest, _ = workspace
    assert main(["train", "--manifest", str(manifest), "--epochs", "12", "--switch", "6",
                 "--hidden-dim", "12", "--batch-size", "48", "--eval-every", "4",
                 "--out", str(tmp_path)]) == 0
    assert digest(tmp_path / "metrics.csv") == digest(root / "run" / "metrics.csv")


def test_gamma_zero_equals_no_augmentation(workspace, tmp_path):
    _, manifest, _ = workspace
    common = ["train", "--manifest", str(manifest), "--epochs", "6", "--switch", "2",
              "--hidden-dim", "8", "--batch-size", "48"]
    assert main(common + ["--gamma", "0", "--out", str(tmp_path / "g0")]) == 0
    assert main(common + ["--no-augmentation", "--out", str(tmp_path / "na")]) == 0
    assert digest(tmp_path / "g0" / "metrics.csv") == digest(tmp_path / "na" / "metrics.csv")


def test_config_file_and_override(workspace, tmp_path):
    _, manifest, _ = workspace
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("# short run\ntotal_epochs=4\nstage_switch_epoch=2\nhidden_dim=8\nmargin=0.5\n")
    assert main(["train", "--manifest", str(manifest), "--config", str(cfg), "--margin", "0.3",
                 "--out", str(tmp_path / "r")]) == 0
    text = (tmp_path / "r" / "metrics.csv").read_text()
    assert "# margin=0.3" in text and "# total_epochs=4" in text
    cfg.write_text("total_epochs=4\nwarmup=3\n")
    assert main(["train", "--manifest", str(manifest), "--config", str(cfg),
                 "--out", str(tmp_path / "r2")]) == 1


def test_nan_exit_code(workspace, tmp_path, capsys):
    _, manifest, _ = workspace
    with np.errstate(all="ignore"):
        code = main(["train", "--manifest", str(manifest), "--epochs", "4", "--lr", "1e300",
                     "--optimizer", "sgd", "--out", str(tmp_path)])
    assert code == 3
    assert "epoch" in capsys.readouterr().err


def test_missing_manifest_is_data_error(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == 2


def test_eval_matches_in_memory(workspace, tmp_path, capsys):
    _, manifest, ckpt = workspace
    assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                 "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    report = evaluate_models(load_checkpoint(ckpt)[0], load_dataset(manifest).test)
    assert f"average {report.map_average:.3f}" in printed
    rows = dict((r.split(",")[1], float(r.split(",")[2]))
                for r in body(tmp_path / "report.csv") if r.startswith("map,"))
    assert rows["a2v"] == report.map_audio_to_visual
    assert abs(rows["average"] - (rows["a2v"] + rows["v2a"]) / 2) <= 1e-12


def test_eval_separable(tmp_path, capsys):
    main(["gen-data", "--n-pairs", "30", "--num-classes", "3", "--noise-scale", "0",
          "--cluster-spread", "5", "--out", str(tmp_path / "d")])
    manifest = tmp_path / "d" / "manifest.txt"
    main(["train", "--manifest", str(manifest), "--epochs", "120", "--switch", "60",
          "--hidden-dim", "16", "--lr", "0.003", "--out", str(tmp_path / "r")])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "final.npz"), "--manifest",
                 str(manifest), "--out", str(tmp_path / "e")]) == 0
    out = capsys.readouterr().out
    assert "audio->visual MAP 1.000" in out and "visual->audio MAP 1.000" in out


def test_mine_census_matches_oracle(workspace, tmp_path):
    _, manifest, ckpt = workspace
    assert main(["mine", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                 "--margin", "0.5", "--out", str(tmp_path)]) == 0
    total = body(tmp_path / "census.csv")[-1].split(",")
    data = load_dataset(manifest).train
    A, V = load_checkpoint(ckpt)[0].embed(data.audio, data.visual)
    perm = np.random.default_rng(0).permutation(len(data))
    _, census = enumerate_triplets(A[perm], data.labels[perm], V[perm], data.labels[perm],
                                   len(data), 0.5)
    assert [int(t) for t in total[2:5]] == census


def test_mine_band_widens_with_margin(workspace, tmp_path):
    _, manifest, ckpt = workspace
    counts = []
    for m in ("0.1", "0.5", "2", "50"):
        main(["mine", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--margin", m,
              "--out", str(tmp_path / m)])
        total = body(tmp_path / m / "census.csv")[-1].split(",")
        counts.append(int(total[3]) + int(total[4]))
    assert counts == sorted(counts)


def test_mine_single_class_batch_is_advisory(workspace, tmp_path, capsys):
    _, manifest, ckpt = workspace
    assert main(["mine", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                 "--batch-size", "1", "--out", str(tmp_path)]) == 0
    assert "advisory" in capsys.readouterr().out


def test_retrieve_case_study(workspace, tmp_path, capsys):
    _, manifest, ckpt = workspace
    ds = load_dataset(manifest)
    assert main(["retrieve", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                 "--query-id", "3", "--k", "5", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 6 and "AP@5=" in lines[0]
    qlabel = ds.labels[ds.ids == 3][0]
    for line in lines[1:]:
        fields = dict(f.split("=") for f in line.split("\t") if "=" in f)
        gl = ds.labels[ds.ids == int(fields["id"])][0]
        assert int(fields["label"]) == gl
        assert line.endswith("MATCH") == (gl == qlabel)


def test_retrieve_unknown_id(workspace, tmp_path):
    _, manifest, ckpt = workspace
    assert main(["retrieve", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                 "--query-id", "9999", "--out", str(tmp_path)]) == 1


def test_grad_check_corrupted_fails(capsys):
    code = main(["grad-check", "--hidden-dim", "4", "--batch", "6", "--h", "1e-6",
                 "--inject-gradient-bug"])
    assert code == 3
    out = capsys.readouterr().out
    assert "# h=1e-06" in out and "FAIL" in out


def test_grad_check_small_passes(capsys):
    assert main(["grad-check", "--hidden-dim", "4", "--batch", "6", "--h", "1e-6"]) == 0
    assert "PASS" in capsys.readouterr().out
