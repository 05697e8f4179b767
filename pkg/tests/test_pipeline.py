import json
import shutil

import numpy as np
import pytest
import yaml

from beyondlog import cli, dllm, io, pipeline
from beyondlog.config import ConfigError, load_config

TINY = {
    "tokenizer": {"epochs": 3, "codebook_size": 16},
    "dllm": {"steps": 30, "batch_size": 16},
    "ranker": {"epochs": 1, "mlp_hidden": [16]},
    "eval": {"hr_k": [5], "sm_hr_k": [1]},
}


def tiny(out, seed=0, **over):
    tree = json.loads(json.dumps(TINY))
    for k, v in over.items():
        tree.setdefault(k, {}).update(v)
    return load_config(seed=seed, out=out, overrides=tree)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    ran = pipeline.run(tiny(out))
    return out, ran


class TestConfig:
    def test_paper_preset_constants(self):
        d = load_config(preset="paper")["dllm"]
        assert (d["d_model"], d["n_layers"], d["n_heads"], d["batch_size"], d["learning_rate"], d["temperature"]) \
            == (128, 4, 8, 3200, 0.0075, 0.07)

    def test_yaml_overrides_and_seed(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({"seed": 5, "dllm": {"steps": 10}, "world": {"n_users": 50}}))
        cfg = load_config(p)
        assert cfg.seed == 5 and cfg["dllm"]["steps"] == 10 and cfg["world"]["n_users"] == 50
        assert load_config(p, seed=9).seed == 9

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("dllm: {stepz: 3}\n")
        with pytest.raises(ConfigError, match="dllm.stepz"):
            load_config(p)

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"dllm": {"n_heads": 5}})
        with pytest.raises(ConfigError):
            load_config(preset="huge")

    def test_stage_hash_tracks_own_sections(self):
        a, b = load_config(), load_config(overrides={"ranker": {"epochs": 2}})
        assert a.stage_hash("train-dllm") == b.stage_hash("train-dllm")
        assert a.stage_hash("train-ranker") != b.stage_hash("train-ranker")
        assert a.stage_hash("gen-world") != load_config(seed=1).stage_hash("gen-world")


@pytest.mark.slow
class TestRun:
    def test_all_stages_and_artifacts(self, run_dir):
        out, ran = run_dir
        assert ran == list(pipeline.ORDER)
        for f in ("report/report.txt", "report/report.jsonl", "report/figures/dllm_loss.png",
                  "encode/item_reps.bin", "tokenize/sids.jsonl", "fill/completed.jsonl"):
            assert (out / f).exists(), f
        rows = [json.loads(line) for line in (out / "report/report.jsonl").read_text().splitlines()]
        assert [r["name"] for r in rows if r["section"] == "dllm"] == ["INFONCE_COS", "COS_POINTWISE",
                                                                          "MSE_POINTWISE"]

    def test_rerun_is_noop(self, run_dir):
        out, _ = run_dir
        assert pipeline.run(tiny(out)) == []

    def test_deleted_artifact_reruns_stage_and_descendants(self, run_dir):
        out, _ = run_dir
        before = (out / "report/report.txt").read_bytes()
        (out / "tokenize/sids.jsonl").unlink()
        assert pipeline.run(tiny(out)) == ["tokenize", "train-ranker", "eval", "report"]
        assert (out / "report/report.txt").read_bytes() == before

    def test_config_change_reruns(self, run_dir, tmp_path):
        out, _ = run_dir
        work = tmp_path / "copy"
        shutil.copytree(out, work)
        assert pipeline.run(tiny(work, eval={"hr_k": [3]})) == ["eval", "report"]

    def test_missing_upstream_names_stage(self, tmp_path):
        with pytest.raises(pipeline.MissingArtifactError, match="gen-world"):
            pipeline.run_stage(tiny(tmp_path), "locate")

    def test_fill_ratio_matches_recount(self, run_dir):
        out, _ = run_dir
        m = json.loads((out / "eval/metrics.json").read_text())
        seqs = [json.loads(line) for line in (out / "locate/token_seqs.jsonl").read_text().splitlines()]
        _, held = pipeline.split_users(len(seqs), 0.2, 0)
        tags = [s["tag"] for i in held for s in seqs[i]["slots"]]
        ratio = tags.count("fill") / len(tags)
        for row in m["table3"]:
            assert row["fill_ratio_pct"] == pytest.approx(100 * ratio)

    def test_checkpoint_refuses_paper_shapes(self, run_dir):
        out, _ = run_dir
        paper = pipeline.dllm_config(load_config(preset="paper"), 32, "INFONCE_COS")
        with pytest.raises(io.CheckpointMismatch):
            io.load_checkpoint(out / "dllm/INFONCE_COS.ckpt", into=dllm.init_params(paper))


@pytest.mark.slow
class TestDeterminism:
    def test_byte_identical_reports(self, run_dir, tmp_path):
        out, _ = run_dir
        pipeline.run(tiny(tmp_path / "again"))
        for f in ("report/report.txt", "report/report.jsonl", "eval/metrics.json"):
            assert (tmp_path / "again" / f).read_bytes() == (out / f).read_bytes(), f


class TestCLI:
    def test_show_config(self, capsys):
        assert cli.main(["show-config", "--preset", "paper"]) == 0
        assert "batch_size: 3200" in capsys.readouterr().out

    def test_stage_failure_exit_code(self, tmp_path, capsys):
        assert cli.main(["fill", "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert "fill" in err and "train-dllm" in err

    def test_bad_config_exit_code(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text("nope: 1\n")
        assert cli.main(["gen-world", "--config", str(p), "--out", str(tmp_path)]) == 2

    def test_single_stage(self, tmp_path, capsys):
        assert cli.main(["gen-world", "--out", str(tmp_path), "--seed", "3"]) == 0
        assert "gen-world: done" in capsys.readouterr().out
        assert cli.main(["gen-world", "--out", str(tmp_path), "--seed", "3"]) == 0
        assert "up to date" in capsys.readouterr().out
        m = json.loads((tmp_path / "manifests/gen-world.json").read_text())
        assert m["seed"] == 3 and "world/world.pkl" in m["outputs"]
