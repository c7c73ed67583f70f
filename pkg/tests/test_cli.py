"""Command-line harness tests: exit codes, manifests, determinism, outputs."""

import json
import os

import numpy as np
import pytest

from pronext import cli
from pronext import model as M
from pronext import train as T
from pronext.netpbm import read_pgm_p2


@pytest.fixture()
def workspace(tmp_path):
    cfg = M.ModelConfig(input_size=32, stem_channels=4, patch_size=4, embed_dim=16,
                        ca_layers=1, ca_heads=2, num_classes=4).validate()
    model_cfg = tmp_path / "model.cfg"
    M.save_model_config(cfg, model_cfg)
    train_cfg = tmp_path / "train.cfg"
    T.save_train_config(T.TrainConfig(batch_size=4, steps=3, crop=32, resize=32,
                                      mixup_alpha=0.0, seed=5), train_cfg)
    data_dir = tmp_path / "data"
    rc = cli.main(["gen-data", "--task", "interaction", "--n", "16",
                   "--image-size", "32", "--out", str(data_dir), "--seed", "9"])
    assert rc == 0
    return tmp_path, str(model_cfg), str(train_cfg), str(data_dir)


def run_train(ws, out_name, extra=()):
    tmp_path, model_cfg, train_cfg, data_dir = ws
    out = tmp_path / out_name
    rc = cli.main(["train", "--config", model_cfg, "--train-config", train_cfg,
                   "--data", data_dir, "--out", str(out), "--quiet", *extra])
    return rc, out


class TestTrainCommand:
    def test_successful_run_writes_log_and_checkpoint(self, workspace):
        rc, out = run_train(workspace, "run")
        assert rc == 0
        assert (out / "train.csv").exists()
        assert (out / "final.ckpt").exists()
        assert (out / "manifest.json").exists()

    def test_missing_config_key_exit_1_naming_key(self, workspace, capsys):
        tmp_path, model_cfg, train_cfg, data_dir = workspace
        lines = [l for l in open(model_cfg) if not l.startswith("patch_size")]
        broken = tmp_path / "broken.cfg"
        broken.write_text("".join(lines))
        rc = cli.main(["train", "--config", str(broken), "--data", data_dir,
                       "--out", str(tmp_path / "x"), "--quiet"])
        assert rc == 1
        assert "patch_size" in capsys.readouterr().err

    def test_same_seed_byte_identical_log(self, workspace):
        rc1, out1 = run_train(workspace, "runA")
        rc2, out2 = run_train(workspace, "runB")
        assert rc1 == rc2 == 0
        assert (out1 / "train.csv").read_bytes() == (out2 / "train.csv").read_bytes()

    def test_existing_out_dir_refused_without_force(self, workspace, capsys):
        rc1, out = run_train(workspace, "runC")
        assert rc1 == 0
        tmp_path, model_cfg, train_cfg, data_dir = workspace
        rc2 = cli.main(["train", "--config", model_cfg, "--train-config", train_cfg,
                        "--data", data_dir, "--out", str(out), "--quiet"])
        assert rc2 == 1
        rc3 = cli.main(["train", "--config", model_cfg, "--train-config", train_cfg,
                        "--data", data_dir, "--out", str(out), "--quiet", "--force"])
        assert rc3 == 0

    def test_bad_data_dir_exit_2(self, workspace):
        tmp_path, model_cfg, train_cfg, _ = workspace
        rc = cli.main(["train", "--config", model_cfg, "--train-config", train_cfg,
                       "--data", str(tmp_path / "nowhere"),
                       "--out", str(tmp_path / "y"), "--quiet"])
        assert rc == 2

    def test_parser_override_flag(self, workspace):
        rc, out = run_train(workspace, "runD", extra=("--parser", "sa"))
        assert rc == 0

    def test_manifest_written_with_hash(self, workspace):
        rc, out = run_train(workspace, "runE")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert len(manifest["config_hash"]) == 40
        assert manifest["seed"] == 5

    def test_git_blob_hash_convention(self):
        # sha1 of "blob 12\0hello world\n" has a well-known value
        assert cli.git_blob_hash("hello world\n") == \
            "3b18e512dba79e4c8300dd08aeb37f8e728b8dad"


class TestEvalAndExplain:
    def test_eval_and_explain_outputs(self, workspace):
        rc, out = run_train(workspace, "runF")
        tmp_path, model_cfg, train_cfg, data_dir = workspace
        eval_dir = tmp_path / "eval"
        rc = cli.main(["eval", "--checkpoint", str(out / "final.ckpt"),
                       "--data", data_dir, "--out", str(eval_dir), "--quiet"])
        assert rc == 0
        header, row = (eval_dir / "eval.csv").read_text().splitlines()[:2]
        assert header == "dataset,acc,loss"

        exp_dir = tmp_path / "explain"
        rc = cli.main(["explain", "--checkpoint", str(out / "final.ckpt"),
                       "--data", data_dir, "--out", str(exp_dir), "--quiet"])
        assert rc == 0
        header = (exp_dir / "metrics.csv").read_text().splitlines()[0]
        assert header == "gt_known,top1_loc,top5_loc,max_box_acc_v1,max_box_acc_v2,iou,dice"
        # three plain-text PGM masks per image, values in {0, 1}
        img0 = exp_dir / "masks" / "img_00000"
        masks = sorted(os.listdir(img0))
        assert masks == ["mask_stage1.pgm", "mask_stage2.pgm", "mask_stage3.pgm"]
        m = read_pgm_p2(img0 / "mask_stage1.pgm")
        assert set(np.unique(m)) <= {0, 1}
        assert (exp_dir / "boxes.csv").exists()

    def test_explain_rerun_deterministic(self, workspace):
        rc, out = run_train(workspace, "runG")
        tmp_path, model_cfg, train_cfg, data_dir = workspace
        rows = []
        for name in ("exp_a", "exp_b"):
            exp_dir = tmp_path / name
            rc = cli.main(["explain", "--checkpoint", str(out / "final.ckpt"),
                           "--data", data_dir, "--out", str(exp_dir), "--quiet"])
            assert rc == 0
            rows.append((exp_dir / "metrics.csv").read_bytes()
                        + (exp_dir / "boxes.csv").read_bytes())
        assert rows[0] == rows[1]

    def test_explain_stage_out_of_range_exit_1(self, workspace):
        rc, out = run_train(workspace, "runH")
        tmp_path, *_ , data_dir = workspace
        rc = cli.main(["explain", "--checkpoint", str(out / "final.ckpt"),
                       "--data", data_dir, "--out", str(tmp_path / "exp_bad"),
                       "--stage", "4", "--quiet"])
        assert rc == 1


class TestGenData:
    def test_determinism(self, tmp_path):
        for name in ("d1", "d2"):
            rc = cli.main(["gen-data", "--task", "detail", "--n", "6",
                           "--image-size", "32", "--classes", "4",
                           "--out", str(tmp_path / name), "--seed", "3"])
            assert rc == 0
        a = (tmp_path / "d1" / "index.csv").read_bytes()
        b = (tmp_path / "d2" / "index.csv").read_bytes()
        assert a == b
        ia = (tmp_path / "d1" / "img_00000.ppm").read_bytes()
        ib = (tmp_path / "d2" / "img_00000.ppm").read_bytes()
        assert ia == ib

    def test_unknown_task_exit_code(self, tmp_path, capsys):
        with pytest.raises(SystemExit):
            cli.main(["gen-data", "--task", "nonsense", "--out", str(tmp_path / "z")])


class TestFlops:
    def test_flops_listing(self, capsys):
        rc = cli.main(["flops", "--pairs", "S/8,S/4,S/2"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        vals = [float(l.split(",")[1]) for l in lines]
        assert vals == sorted(vals)


@pytest.mark.slow
class TestAblateSmoke:
    def test_tiny_ladder_shape(self, tmp_path):
        for task in ("detail", "interaction"):
            rc = cli.main(["gen-data", "--task", task, "--n", "16",
                           "--image-size", "32", "--classes", "4",
                           "--out", str(tmp_path / "abl" / task), "--seed", "1"])
            assert rc == 0
        out = tmp_path / "abl_out"
        rc = cli.main(["ablate", "--data", str(tmp_path / "abl"),
                       "--tasks", "detail,interaction", "--steps", "2",
                       "--batch-size", "4", "--seeds", "1",
                       "--out", str(out), "--quiet"])
        assert rc == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0] == "row,detail,interaction"
        assert len(lines) == 7  # header + six ladder rows
        names = [l.split(",")[0] for l in lines[1:]]
        assert names == ["baseline", "separation_sa", "context_sa",
                         "plain_field", "conditional_sine", "band_pass"]
