import csv
import json

import numpy as np
import pytest

from hoifuse.backend import SchedulerParams, make_backend, sample_initial_latent, ToyConditioner
from hoifuse.cli import main
from hoifuse.io import load_image, read_dump, save_image
from hoifuse.masks import HeadMask, save_mask
from hoifuse.pipeline import IdentityConditioning, array_checksum, image_to_uint8, rollout

BASE = ["--prompt", "a man riding a horse", "--subject", "alice", "--steps", "8"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def only_manifest(folder):
    (m,) = folder.glob("*.manifest.json")
    return m


def test_generate_deterministic(tmp_path, capsys):
    code, out, _ = run(capsys, "generate", *BASE, "--out", str(tmp_path / "a"))
    assert code == 0
    run(capsys, "generate", *BASE, "--out", str(tmp_path / "b"))
    ma, mb = only_manifest(tmp_path / "a"), only_manifest(tmp_path / "b")
    assert ma.name == mb.name
    assert ma.read_bytes() == mb.read_bytes()
    man = json.loads(ma.read_text())
    for key in ("image", "stage1_image", "head_mask"):
        assert (tmp_path / "a" / man["outputs"][key]).exists()
    assert json.loads(out)["image_checksum"] == man["checksums"]["image"]
    assert "created" not in man


def test_seed_changes_output(tmp_path, capsys):
    run(capsys, "generate", *BASE, "--out", str(tmp_path / "a"))
    run(capsys, "generate", *BASE, "--seed", "9", "--out", str(tmp_path / "b"))
    a = json.loads(only_manifest(tmp_path / "a").read_text())["checksums"]["image"]
    b = json.loads(only_manifest(tmp_path / "b").read_text())["checksums"]["image"]
    assert a != b


def test_replay(tmp_path, capsys):
    run(capsys, "generate", *BASE, "--inject-step", "3", "--filter-mode", "HighLow", "--out", str(tmp_path / "a"))
    code, out, _ = run(capsys, "generate", "--from-manifest", str(only_manifest(tmp_path / "a")),
                       "--out", str(tmp_path / "r"))
    assert code == 0 and "replay: all checksums match" in out
    assert only_manifest(tmp_path / "r").read_bytes() == only_manifest(tmp_path / "a").read_bytes()


def test_replay_detects_tampering(tmp_path, capsys):
    run(capsys, "generate", *BASE, "--out", str(tmp_path / "a"))
    m = only_manifest(tmp_path / "a")
    man = json.loads(m.read_text())
    man["checksums"]["image"] = "0" * 64
    m.write_text(json.dumps(man))
    code, _, err = run(capsys, "generate", "--from-manifest", str(m), "--out", str(tmp_path / "r"))
    assert code == 1 and "image" in err


def test_no_toggles_matches_pfd_only(tmp_path, capsys):
    run(capsys, "generate", *BASE, "--no-cac", "--no-lm", "--no-rm", "--out", str(tmp_path))
    man = json.loads(only_manifest(tmp_path).read_text())
    pfd = make_backend("toy:seed=2")
    c = ToyConditioner()
    cond = IdentityConditioning(c.encode(BASE[1]), c.encode_personalized(BASE[1], "alice", True))
    z = rollout(pfd, cond.with_identity, sample_initial_latent((4, 8, 8), 0, 8), SchedulerParams.toy(8))
    assert man["checksums"]["image"] == array_checksum(image_to_uint8(pfd.decode(z)))


def test_missing_prompt_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["generate", "--out", str(tmp_path)])
    assert err.value.code == 2
    assert "--prompt" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["--filter-mode", "Blur"], ["--inject-step", "99"], ["--backend-sd", "unet"]])
def test_bad_values_are_usage_errors(tmp_path, argv):
    with pytest.raises(SystemExit) as err:
        main(["generate", *BASE, *argv, "--out", str(tmp_path)])
    assert err.value.code == 2


def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"prompt": "a woman holding a cat", "seed": 5, "steps": 6}))
    run(capsys, "generate", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "o"))
    man = json.loads(only_manifest(tmp_path / "o").read_text())
    assert man["prompt"] == "a woman holding a cat"
    assert man["config"]["seed"] == 7 and man["config"]["total_steps"] == 6
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"prompt": "x", "colour": 1}))
    with pytest.raises(SystemExit):
        main(["generate", "--config", str(bad), "--out", str(tmp_path / "p")])


def test_missing_config_exit_1(tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path))
    assert code == 1 and "not found" in err


def test_user_mask(tmp_path, capsys):
    save_mask(HeadMask.full((64, 64), 1.0), tmp_path / "m.png")
    code, _, _ = run(capsys, "generate", *BASE, "--segmentor", "none", "--mask", str(tmp_path / "m.png"),
                     "--out", str(tmp_path / "o"))
    assert code == 0
    prov = json.loads(only_manifest(tmp_path / "o").read_text())["mask_provenance"]
    assert prov["source"] == "user_supplied" and prov["fallback_used"] is True
    with pytest.raises(SystemExit):
        main(["generate", *BASE, "--segmentor", "none", "--out", str(tmp_path / "p")])


def test_dump_intermediates(tmp_path, capsys):
    run(capsys, "generate", *BASE, "--dump-intermediates", "--out", str(tmp_path))
    d = tmp_path / "intermediates"
    arr, meta = read_dump(d / "step000_z_merged")
    assert arr.shape == (4, 8, 8) and meta["timestep"] == 7 and meta["branch_tag"] == "merged"
    res, meta = read_dump(d / "step007_res2")
    assert res.shape == (8, 2, 2) and meta["layer_index"] == 2
    assert len(list(d.glob("*.f32"))) == 8 * (3 + 3)


def test_stage1_mask(tmp_path, capsys):
    code, out, _ = run(capsys, "stage1-mask", *BASE, "--out", str(tmp_path))
    assert code == 0 and out.strip().endswith("mask.png")
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["mask_provenance"]["source"] == "segmentor"


def ablate_rows(path):
    with open(path / "ablation.csv") as fh:
        return list(csv.DictReader(fh))


def test_ablate_filter_modes(tmp_path, capsys):
    code, _, _ = run(capsys, "ablate", *BASE, "--filter-modes", "all", "--out", str(tmp_path / "a"))
    assert code == 0
    rows = ablate_rows(tmp_path / "a")
    assert [r["filter_mode"] for r in rows] == ["Replace", "NoFilter", "LowLow", "HighHigh", "HighLow", "LowHigh"]
    assert all(r["status"] == "ok" for r in rows)
    for r in rows:
        assert (tmp_path / "a" / "cells" / r["config_hash"]).is_dir()
    run(capsys, "ablate", *BASE, "--filter-modes", "all", "--jobs", "3", "--out", str(tmp_path / "b"))
    for name in ("ablation.csv", "ablation.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ablate_toggles(tmp_path, capsys):
    run(capsys, "ablate", *BASE, "--toggles", "grid", "--out", str(tmp_path))
    rows = ablate_rows(tmp_path)
    assert [r["label"] for r in rows] == ["full", "minus-LM", "minus-RM", "minus-CAC", "baseline"]
    assert [r["toggles"] for r in rows] == ["CAC+LM+RM", "CAC+RM", "CAC+LM", "LM+RM", "none"]


def test_ablate_alphas_and_injection(tmp_path, capsys):
    run(capsys, "ablate", *BASE, "--alphas", "1.5,2.5->0.5", "--inject-steps", "0,8", "--out", str(tmp_path))
    rows = ablate_rows(tmp_path)
    assert [(r["alpha_schedule"], r["inject_step"]) for r in rows] == [
        (rows[0]["alpha_schedule"], "0"), (rows[0]["alpha_schedule"], "8"),
        (rows[2]["alpha_schedule"], "0"), (rows[2]["alpha_schedule"], "8")]
    assert rows[0]["alpha_schedule"] != rows[2]["alpha_schedule"]


def test_ablate_needs_axis(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["ablate", *BASE, "--out", str(tmp_path)])
    assert err.value.code == 2


@pytest.mark.parametrize("subject", ["man", "woman"])
def test_corpus_matches_golden(capsys, golden, subject):
    code, out, _ = run(capsys, "corpus", "--subject", subject, "--set", "hoi")
    assert code == 0 and out.encode() == (golden / f"hoi_{subject}.txt").read_bytes()
    _, out, _ = run(capsys, "corpus", "--subject", subject, "--set", "general")
    assert out.encode() == (golden / f"general_{subject}.txt").read_bytes()
    _, out, _ = run(capsys, "corpus", "--subject", subject, "--set", "general", "--format", "json")
    assert sum(len(v) for v in json.loads(out).values()) == 40


def write_images(folder, n, size=8):
    folder.mkdir()
    for i in range(n):
        save_image(folder / f"img{i}.png", np.full((size, size, 3), i / max(n, 1)))


def test_evaluate_with_mocks(tmp_path, capsys, monkeypatch):
    write_images(tmp_path / "imgs", 3)
    save_image(tmp_path / "ref.png", np.ones((8, 8, 3)))
    spec = {
        "face_detector": {"type": "whole_image"},
        "face_embedder": {"type": "scripted", "default": [1, 0]},
        "text_image_scorer": {"type": "scripted", "scores": {"img0.png": 0.2, "img1.png": 0.3, "img2.png": 0.25}},
        "hoi_detector": {"type": "scripted", "scores": {"img0.png": 0.9, "img1.png": 0.3, "img2.png": 0.6}},
    }
    (tmp_path / "adapters.json").write_text(json.dumps(spec))
    prompts = {"img0.png": "a man riding a horse",
               "img1.png": {"subject": "man", "verb": "holding", "object": "a cat"},
               "img2.png": "a man eating pizza"}
    (tmp_path / "prompts.json").write_text(json.dumps(prompts))
    monkeypatch.setenv("PERSONAHOI_ADAPTERS", str(tmp_path / "adapters.json"))
    code, out, _ = run(capsys, "evaluate", "--images", str(tmp_path / "imgs"), "--mode",
                       "identity,prompt,interaction", "--prompts", str(tmp_path / "prompts.json"),
                       "--reference", str(tmp_path / "ref.png"), "--out", str(tmp_path / "report.json"))
    assert code == 0 and "Interaction Alignment (%)" in out
    report = json.loads((tmp_path / "report.json").read_text())
    agg = report["aggregates"]
    assert agg["identity_preservation"] == 100.0
    assert abs(agg["prompt_consistency"] - 25.0) < 1e-9
    assert abs(agg["interaction_alignment"] - 60.0) < 1e-9
    assert report["rows"][1]["triplet"] == prompts["img1.png"]


def test_evaluate_invalid_reference(tmp_path, capsys):
    write_images(tmp_path / "imgs", 1)
    save_image(tmp_path / "ref.png", np.ones((8, 8, 3)))
    (tmp_path / "a.json").write_text(json.dumps({"face_detector": {"type": "none"},
                                                 "face_embedder": {"type": "scripted", "default": [1]}}))
    code, _, err = run(capsys, "evaluate", "--images", str(tmp_path / "imgs"), "--mode", "identity",
                       "--adapters", str(tmp_path / "a.json"), "--reference", str(tmp_path / "ref.png"))
    assert code == 1 and "reference" in err


def test_evaluate_needs_adapters(tmp_path, monkeypatch):
    monkeypatch.delenv("PERSONAHOI_ADAPTERS", raising=False)
    write_images(tmp_path / "imgs", 1)
    with pytest.raises(SystemExit) as err:
        main(["evaluate", "--images", str(tmp_path / "imgs"), "--mode", "prompt"])
    assert err.value.code == 2


def test_grid(tmp_path, capsys):
    write_images(tmp_path / "imgs", 4, size=4)
    code, out, _ = run(capsys, "grid", "--images", str(tmp_path / "imgs"), "--cols", "2",
                       "--out", str(tmp_path / "grid.png"))
    assert code == 0 and out.strip().endswith("8x8")
    g = load_image(tmp_path / "grid.png")
    assert g.shape == (8, 8, 3) and g[0, 0, 0] == 0.0 and g[4, 4, 0] == 191 / 255
