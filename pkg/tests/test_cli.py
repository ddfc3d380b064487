from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import pytest

from asdkit.backend import load_embeddings, read_scores_csv
from asdkit.cli import main
from asdkit.csvio import parse_stamp, read_rows
from asdkit.encoder import load_checkpoint

CFG_TEXT = """
[synth]
n_machines = 2
attrs_per_machine = 2
clips_per_attr_train = 6
clips_per_attr_test = 4
unattributed_machines = 1
clip_seconds = 1.0
target_fraction = 0.25

[frontend]
clip_seconds = 1.0
n_mels = 32
padded_frames = 112

[encoder]
depth = 2
dim = 32
heads = 2
mlp_ratio = 2

[pretrain]
epochs = 3
batch_size = 8
mask_ratio = 0.75

[cluster]
policy = fixed:2

[finetune]
epochs = 3
batch_size = 8
warmup_steps = 4
lr_peak = 0.001
freq_mask_width = 4
time_mask_width = 8

[run]
seed = 3
"""


@pytest.fixture(scope="module")
def pipeline_out(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg_path = base / "desk.cfg"
    out = base / "out"
    cfg_path.write_text(CFG_TEXT + f"output_dir = {out}\n")
    assert main(["--config", str(cfg_path), "pipeline"]) == 0
    return cfg_path, out


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestPipeline:
    def test_all_artifacts_exist(self, pipeline_out):
        _, out = pipeline_out
        for name in ["corpus_manifest.csv", "latent_attributes.csv", "pretrain_teacher.ckpt",
                     "pretrain_student.ckpt", "pretrain_loss.csv", "embeddings.bin",
                     "embeddings.csv", "pseudo_labels.csv", "dendrogram_machine01.csv",
                     "finetuned.ckpt", "finetuned_curve.csv", "scores.csv",
                     "test_embeddings.bin", "report.csv"]:
            assert (out / name).exists(), name

    def test_report_has_summary_rows(self, pipeline_out):
        _, out = pipeline_out
        lines = (out / "report.csv").read_text().splitlines()
        assert lines[0].startswith("# config_hash=")
        assert lines[1] == "machine,auc_source,auc_target,pauc"
        assert "subset,score" in lines
        subsets = [l.split(",")[0] for l in lines[lines.index("subset,score") + 1:]]
        assert subsets == ["all", "noattr"]

    def test_artifacts_are_stamped_consistently(self, pipeline_out):
        _, out = pipeline_out
        stamp, _ = read_scores_csv(out / "scores.csv")
        score_hash = parse_stamp(stamp)["config_hash"]
        ckpt = load_checkpoint(out / "finetuned.ckpt")
        assert ckpt.config_hash == score_hash

    def test_loss_curve_schema(self, pipeline_out):
        _, out = pipeline_out
        _, rows = read_rows(out / "pretrain_loss.csv", ["step", "L_f", "L_u", "L_UFO"])
        assert len(rows) == 3 * 3  # epochs * ceil(24 / 8)
        steps = [int(r[0]) for r in rows]
        assert steps == list(range(len(rows)))
        totals = [float(r[3]) for r in rows]
        parts = [float(r[1]) + float(r[2]) for r in rows]
        assert np.allclose(totals, parts, rtol=1e-6)


class TestStageReruns:
    def test_stage_reruns_are_byte_identical(self, pipeline_out):
        cfg_path, out = pipeline_out
        before = {p.name: _digest(p) for p in out.iterdir() if p.is_file()}
        for stage in ["embed", "cluster", "score", "eval"]:
            assert main(["--config", str(cfg_path), stage]) == 0
        after = {p.name: _digest(p) for p in out.iterdir() if p.is_file()}
        assert before == after

    def test_synth_rerun_is_byte_identical(self, pipeline_out):
        cfg_path, out = pipeline_out
        wavs_before = {p: _digest(p) for p in sorted((out / "corpus").rglob("*.wav"))}
        assert main(["--config", str(cfg_path), "synth"]) == 0
        wavs_after = {p: _digest(p) for p in sorted((out / "corpus").rglob("*.wav"))}
        assert wavs_before == wavs_after


class TestFlags:
    def test_no_pseudo_label_space(self, pipeline_out):
        cfg_path, out = pipeline_out
        assert main(["--config", str(cfg_path), "finetune", "--no-pseudo",
                     "--output", "finetuned_nopseudo"]) == 0
        ckpt = load_checkpoint(out / "finetuned_nopseudo.ckpt")
        # machine00 has 2 ground-truth attrs; machine01 collapses to one noAttr class
        assert ckpt.params["head.weight"].shape[0] == 3

    def test_random_init_embeddings_differ_from_trained(self, pipeline_out):
        cfg_path, out = pipeline_out
        assert main(["--config", str(cfg_path), "embed", "--random-init",
                     "--output", "embeddings_random"]) == 0
        trained = load_embeddings(out / "embeddings")
        random = load_embeddings(out / "embeddings_random")
        assert trained.keys() == random.keys()
        some = next(iter(trained))
        assert not np.allclose(trained[some], random[some])

    def test_projection_export(self, pipeline_out):
        cfg_path, out = pipeline_out
        assert main(["--config", str(cfg_path), "eval", "--projection"]) == 0
        _, rows = read_rows(out / "projection.csv", ["path", "label", "x", "y"])
        assert len(rows) == 16  # test clips
        assert {r[1].split("/")[1] for r in rows} == {"normal", "anomalous"}


class TestErrors:
    def test_eval_without_scores_exits_3(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(CFG_TEXT + f"output_dir = {tmp_path / 'out'}\n")
        assert main(["--config", str(cfg), "synth"]) == 0
        assert main(["--config", str(cfg), "eval"]) == 3

    def test_cluster_without_embeddings_exits_3(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(CFG_TEXT + f"output_dir = {tmp_path / 'out'}\n")
        assert main(["--config", str(cfg), "synth"]) == 0
        assert main(["--config", str(cfg), "cluster"]) == 3

    def test_config_parse_error_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[run]\nseed = eleven\n")
        assert main(["--config", str(cfg), "synth"]) == 2

    def test_bad_override_exits_2(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(CFG_TEXT + f"output_dir = {tmp_path / 'out'}\n")
        assert main(["--config", str(cfg), "--set", "pretrain.bogus=1", "synth"]) == 2

    def test_eval_hash_mismatch_refused_unless_forced(self, pipeline_out, tmp_path, capsys):
        cfg_path, out = pipeline_out
        other = tmp_path / "other.cfg"
        other.write_text(cfg_path.read_text().replace("mask_ratio = 0.75", "mask_ratio = 0.8"))
        assert main(["--config", str(other), "eval"]) == 3
        assert "config hash" in capsys.readouterr().err
        assert main(["--config", str(other), "eval", "--force"]) == 0

    def test_env_var_overrides_output_dir(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(CFG_TEXT + "output_dir = should_not_be_used\n")
        redirected = tmp_path / "redirected"
        monkeypatch.setenv("ASDKIT_OUTPUT", str(redirected))
        assert main(["--config", str(cfg), "synth"]) == 0
        assert (redirected / "corpus").is_dir()
        assert not Path("should_not_be_used").exists()
