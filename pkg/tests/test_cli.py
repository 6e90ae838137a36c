import pytest

from wsloc.cli import main
from wsloc.config import (
    CONFIG_KEYS,
    ConfigError,
    format_config,
    parse_config_file,
    resolve_config,
)

SMALL_CONFIG = """
# desk-scale smoke settings
seed = 11
classes = 3
grid_n = 4
trunk_dim = 32
conv_channels = 8,16,16
conv_strides = 2,2,2
epochs = 2
lr_scale = 20.0
jitter_scales = 1.0
flip_prob = 0.5
eval_scales = 1.0
eval_flips = false
synth_image_size = 96
synth_train_images = 8
synth_test_images = 4
"""


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL_CONFIG)
    return path


class TestConfig:
    def test_defaults_resolve(self):
        cfg = resolve_config()
        assert cfg["head"] == "contrastive_s"
        assert cfg["context_ratio"] == 1.8
        assert cfg["nms_iou"] == 0.4
        assert cfg["score_min"] == 1e-4
        assert cfg["epochs"] == 30
        assert cfg["lr_initial"] == 1e-5

    def test_file_values_override_defaults(self, config_path):
        cfg = resolve_config(config_path)
        assert cfg["seed"] == 11
        assert cfg["conv_channels"] == (8, 16, 16)
        assert cfg["eval_flips"] is False
        assert cfg["head"] == "contrastive_s"  # untouched default

    def test_unknown_key_is_error_with_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("seed = 1\nmystery = 2\n")
        with pytest.raises(ConfigError, match=r"bad.cfg:2.*mystery"):
            parse_config_file(path)

    def test_bad_value_is_error_with_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("epochs = many\n")
        with pytest.raises(ConfigError, match="epochs"):
            parse_config_file(path)

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("\n# hello\nseed = 3  # trailing comment\n\n")
        assert parse_config_file(path) == {"seed": 3}

    def test_effective_config_round_trips(self, tmp_path):
        cfg = resolve_config()
        path = tmp_path / "echo.cfg"
        path.write_text(format_config(cfg))
        reparsed = resolve_config(path)
        assert reparsed == cfg

    def test_every_key_has_help(self):
        for key, ck in CONFIG_KEYS.items():
            assert ck.help, key


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train -> detect -> eval, executed once for the module."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = root / "run.cfg"
    cfg.write_text(SMALL_CONFIG)
    data = root / "data"
    run = root / "run"
    det = root / "det"
    ev = root / "eval"
    assert run_cli("synth", "--config", cfg, "--out", data) == 0
    assert run_cli("train", "--config", cfg, "--manifest", data / "train.tsv", "--out", run) == 0
    assert (
        run_cli(
            "detect", "--config", cfg, "--checkpoint", run / "checkpoint.cltf",
            "--manifest", data / "test.tsv", "--out", det,
        )
        == 0
    )
    assert (
        run_cli(
            "eval", "--config", cfg, "--manifest", data / "test.tsv",
            "--detections", det / "detections.csv",
            "--top-boxes", det / "top_boxes.csv", "--out", ev,
        )
        == 0
    )
    return {"root": root, "cfg": cfg, "data": data, "run": run, "det": det, "eval": ev}


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        assert (pipeline["data"] / "train.tsv").exists()
        assert (pipeline["run"] / "checkpoint.cltf").exists()
        assert (pipeline["run"] / "loss_log.csv").exists()
        assert (pipeline["run"] / "effective_config.txt").exists()
        assert (pipeline["det"] / "detections.csv").exists()
        assert (pipeline["det"] / "top_boxes.csv").exists()
        assert (pipeline["eval"] / "ap_table.csv").exists()
        assert (pipeline["eval"] / "corloc_table.csv").exists()

    def test_loss_log_shape(self, pipeline):
        lines = (pipeline["run"] / "loss_log.csv").read_text().splitlines()
        assert lines[0] == "epoch,step,loss"
        assert len(lines) == 1 + 2 * 8

    def test_detections_schema(self, pipeline):
        lines = (pipeline["det"] / "detections.csv").read_text().splitlines()
        assert lines[0] == "image_id,class,x1,y1,x2,y2,score"
        for line in lines[1:]:
            parts = line.split(",")
            assert len(parts) == 7
            assert float(parts[6]) >= 1e-4

    def test_top_boxes_cover_all_test_images(self, pipeline):
        lines = (pipeline["det"] / "top_boxes.csv").read_text().splitlines()[1:]
        image_ids = {line.split(",")[0] for line in lines}
        assert len(image_ids) == 4
        classes = [int(line.split(",")[1]) for line in lines]
        assert classes.count(0) == 4  # one top box per image per class

    def test_tables_have_class_columns_and_mean(self, pipeline):
        header, row = (pipeline["eval"] / "ap_table.csv").read_text().splitlines()
        assert header == "class_0,class_1,class_2,mean"
        assert len(row.split(",")) == 4

    def test_rerun_is_byte_identical(self, pipeline, tmp_path):
        cfg = pipeline["cfg"]
        data2 = tmp_path / "data2"
        run2 = tmp_path / "run2"
        det2 = tmp_path / "det2"
        ev2 = tmp_path / "eval2"
        assert run_cli("synth", "--config", cfg, "--out", data2) == 0
        assert run_cli("train", "--config", cfg, "--manifest", data2 / "train.tsv", "--out", run2) == 0
        assert run_cli("detect", "--config", cfg, "--checkpoint", run2 / "checkpoint.cltf",
                       "--manifest", data2 / "test.tsv", "--out", det2) == 0
        assert run_cli("eval", "--config", cfg, "--manifest", data2 / "test.tsv",
                       "--detections", det2 / "detections.csv",
                       "--top-boxes", det2 / "top_boxes.csv", "--out", ev2) == 0
        pairs = [
            (pipeline["run"] / "loss_log.csv", run2 / "loss_log.csv"),
            (pipeline["det"] / "detections.csv", det2 / "detections.csv"),
            (pipeline["det"] / "top_boxes.csv", det2 / "top_boxes.csv"),
            (pipeline["eval"] / "ap_table.csv", ev2 / "ap_table.csv"),
            (pipeline["eval"] / "corloc_table.csv", ev2 / "corloc_table.csv"),
        ]
        for a, b in pairs:
            assert a.read_bytes() == b.read_bytes(), a.name

    def test_pool_dump(self, pipeline, tmp_path):
        sample_image = pipeline["data"] / "images" / "test_00000.pgm"
        out = tmp_path / "pool"
        assert run_cli("pool-dump", "--config", pipeline["cfg"], "--image", sample_image,
                       "--box", "20,20,70,70", "--out", out) == 0
        lines = (out / "pooled.csv").read_text().splitlines()
        assert lines[0] == "pool_type,channel,row,col,value"
        kinds = {line.split(",")[0] for line in lines[1:]}
        assert kinds == {"roi", "context", "frame"}
        assert len(lines) == 1 + 3 * 16 * 4 * 4  # kinds x channels x grid

    def test_score_sweep(self, pipeline, tmp_path):
        sample_image = pipeline["data"] / "images" / "test_00000.pgm"
        out = tmp_path / "sweep"
        assert run_cli("score-sweep", "--config", pipeline["cfg"],
                       "--checkpoint", pipeline["run"] / "checkpoint.cltf",
                       "--image", sample_image, "--center", "48,48",
                       "--class-id", "0", "--sizes", "16,32,48,64", "--out", out) == 0
        lines = (out / "score_sweep.csv").read_text().splitlines()
        assert lines[0] == "size,branch_roi,branch_context,loc_score"
        assert len(lines) == 5
        for line in lines[1:]:
            size, g_roi, g_ctx, l_score = (float(v) for v in line.split(","))
            assert l_score == pytest.approx(g_roi - g_ctx, abs=1e-9)

    def test_gradcheck_passes(self, capsys):
        assert run_cli("gradcheck", "--seed", "5") == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_weak_supervision_firewall(self, pipeline, tmp_path):
        cfg = pipeline["cfg"]
        data = tmp_path / "data_nogt"
        assert run_cli("synth", "--config", cfg, "--out", data) == 0
        for gt_file in (data / "gt").iterdir():
            gt_file.unlink()
        run = tmp_path / "run_nogt"
        assert run_cli("train", "--config", cfg, "--manifest", data / "train.tsv", "--out", run) == 0
        det = tmp_path / "det_nogt"
        assert run_cli("detect", "--config", cfg, "--checkpoint", run / "checkpoint.cltf",
                       "--manifest", data / "test.tsv", "--out", det) == 0
        # only evaluation needs the ground truth
        assert run_cli("eval", "--config", cfg, "--manifest", data / "test.tsv",
                       "--detections", det / "detections.csv", "--out", tmp_path / "ev") == 1


class TestEvalHandFixture:
    def test_ap_and_corloc_tables(self, tmp_path, capsys):
        data = tmp_path / "data"
        for sub in ("labels", "gt"):
            (data / sub).mkdir(parents=True)
        (data / "labels" / "a.csv").write_text("1,-1,-1\n")
        (data / "labels" / "b.csv").write_text("-1,1,-1\n")
        (data / "gt" / "a.csv").write_text("0,0,0,10,10\n")
        (data / "gt" / "b.csv").write_text("1,0,0,10,10\n")
        manifest = data / "test.tsv"
        manifest.write_text(
            "a\timages/a.pgm\tlabels/a.csv\tprops/a.csv\tgt/a.csv\n"
            "b\timages/b.pgm\tlabels/b.csv\tprops/b.csv\tgt/b.csv\n"
        )
        dets = tmp_path / "detections.csv"
        dets.write_text(
            "image_id,class,x1,y1,x2,y2,score\n"
            "a,0,0,0.5,10,10.5,0.9\n"   # TP, IoU ~ 0.905
            "b,1,50,50,60,60,0.9\n"     # FP ahead of the TP
            "b,1,0,0,10,10,0.8\n"       # TP
        )
        tops = tmp_path / "top_boxes.csv"
        tops.write_text(
            "image_id,class,x1,y1,x2,y2,score\n"
            "a,0,0,0.5,10,10.5,0.42\n"  # hit
            "b,1,50,50,60,60,0.3\n"     # miss
        )
        out = tmp_path / "eval"
        assert run_cli("eval", "--manifest", manifest, "--detections", dets,
                       "--top-boxes", tops, "--out", out) == 0
        ap_row = (out / "ap_table.csv").read_text().splitlines()[1]
        assert ap_row == "100.0000,50.0000,,75.0000"
        corloc_row = (out / "corloc_table.csv").read_text().splitlines()[1]
        assert corloc_row == "100.0000,0.0000,,50.0000"
        printed = capsys.readouterr().out
        assert "mAP 75.00" in printed
        assert "CorLoc 50.00" in printed


class TestErrors:
    def test_missing_config_file(self, tmp_path, capsys):
        assert run_cli("synth", "--config", tmp_path / "nope.cfg", "--out", tmp_path / "o") == 1
        assert "error:" in capsys.readouterr().err

    def test_train_without_manifest(self, capsys, tmp_path):
        assert run_cli("train", "--out", tmp_path / "o") == 1
        assert "manifest" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("who = knows\n")
        assert run_cli("synth", "--config", cfg, "--out", tmp_path / "o") == 1
        err = capsys.readouterr().err
        assert "who" in err and "bad.cfg:1" in err
