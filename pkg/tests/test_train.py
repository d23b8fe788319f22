import csv
import logging

import numpy as np
import pytest
from PIL import Image

from endocaver import checkpoint as ckpt
from endocaver.cli import main
from endocaver.config import LocosConfig, TrainConfig, dump_config, load_config
from endocaver.data import CORPUS_DIR, load_dataset, make_corpus
from endocaver.model import ModelConfig
from endocaver.train import (ABLATION_COLUMNS, CHECKPOINT_NAME, ablate, evaluate, evaluate_model, infer, train)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(total_steps=4, warmup_steps=1, input_size=32, max_images=4)
    res = train(ModelConfig.toy(), cfg, out)
    return out, res


@pytest.fixture(scope="module")
def seg_only_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("segonly")
    cfg = TrainConfig(total_steps=2, warmup_steps=0, input_size=32, max_images=2)
    train(ModelConfig.toy().variant("no-deblur"), cfg, out, locos_on=False)
    return out / CHECKPOINT_NAME


def test_train_writes_log_and_checkpoint(tiny_run):
    out, res = tiny_run
    rows = list(csv.DictReader(open(out / "loss.csv")))
    assert len(rows) == 4 and tuple(rows[0]) == ("step", "lr", "total", "deb", "seg", "w_seg")
    assert float(rows[0]["lr"]) == 0.0
    assert ckpt.load(out / CHECKPOINT_NAME).step == 4
    for h in res.history:
        assert h.total == pytest.approx((1 - h.w_seg) * h.deb + h.w_seg * h.seg, rel=1e-5)


def test_training_is_deterministic(tmp_path):
    cfg = TrainConfig(total_steps=3, warmup_steps=1, input_size=32, max_images=4)
    a = train(ModelConfig.toy(), cfg, tmp_path / "a")
    b = train(ModelConfig.toy(), cfg, tmp_path / "b")
    assert [h.total for h in a.history] == [h.total for h in b.history]


def test_train_requires_masks(tmp_path):
    make_corpus(tmp_path, n=2, size=32)
    for f in (tmp_path / "masks").iterdir():
        f.unlink()
    (tmp_path / "masks").rmdir()
    with pytest.raises(ValueError, match="masks"):
        train(ModelConfig.toy(), TrainConfig(total_steps=2, warmup_steps=0, input_size=32,
                                             train_dir=str(tmp_path)))


def test_early_stop_on_targets(tmp_path):
    cfg = TrainConfig(total_steps=10, warmup_steps=1, input_size=32, max_images=2, eval_every=2, stop_dice=0.0)
    res = train(ModelConfig.toy(), cfg, tmp_path)
    assert res.stopped_early and len(res.history) == 2 and res.evals[0][0] == 2


def test_deblur_warmup_phase_is_restoration_only(tmp_path):
    cfg = TrainConfig(total_steps=4, warmup_steps=1, input_size=32, max_images=2, deblur_warmup_steps=2)
    h = train(ModelConfig.toy(), cfg).history
    assert h[0].w_seg == 0.0 and h[0].total == pytest.approx(h[0].deb)
    assert h[2].w_seg == 1.0


def test_eval_csv_is_byte_identical(tiny_run, tmp_path):
    out, _ = tiny_run
    r1 = evaluate(out / CHECKPOINT_NAME, out_csv=tmp_path / "a.csv")
    evaluate(out / CHECKPOINT_NAME, out_csv=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert len(rows) == 34 and rows[-1][0] == "MEAN"
    assert r1.mean().dice == pytest.approx(np.mean([r.dice for r in r1.rows]))


def test_eval_empty_dataset_errors_without_csv(tiny_run, tmp_path):
    out, _ = tiny_run
    (tmp_path / "data" / "images").mkdir(parents=True)
    with pytest.raises(FileNotFoundError):
        evaluate(out / CHECKPOINT_NAME, tmp_path / "data", out_csv=tmp_path / "m.csv")
    assert not (tmp_path / "m.csv").exists()
    ds = load_dataset(CORPUS_DIR, 32).subset(0)
    with pytest.raises(ValueError, match="empty"):
        evaluate_model(ckpt.load(out / CHECKPOINT_NAME).build_model(), ds)


def test_eval_without_masks_warns(tiny_run, tmp_path, caplog):
    out, _ = tiny_run
    make_corpus(tmp_path / "d", n=2, size=32)
    for f in (tmp_path / "d/masks").iterdir():
        f.unlink()
    (tmp_path / "d/masks").rmdir()
    with caplog.at_level(logging.WARNING):
        rep = evaluate(out / CHECKPOINT_NAME, tmp_path / "d")
    assert "restoration metrics only" in caplog.text
    assert rep.rows[0].dice is None and rep.rows[0].psnr is not None


def test_eval_without_masks_or_restoration_errors(seg_only_ckpt, tmp_path):
    make_corpus(tmp_path / "d", n=1, size=32)
    for f in (tmp_path / "d/masks").iterdir():
        f.unlink()
    (tmp_path / "d/masks").rmdir()
    with pytest.raises(ValueError, match="nothing to evaluate"):
        evaluate(seg_only_ckpt, tmp_path / "d")


def test_infer_outputs(tiny_run, tmp_path):
    out, _ = tiny_run
    img = tmp_path / "frame.png"
    Image.fromarray((np.random.default_rng(0).random((50, 70, 3)) * 255).astype(np.uint8)).save(img)
    p1 = infer(out / CHECKPOINT_NAME, img, tmp_path / "a")
    p2 = infer(out / CHECKPOINT_NAME, img, tmp_path / "b")
    assert set(p1) == {"mask", "prob", "restored"}
    with Image.open(p1["mask"]) as m:
        assert m.size == (32, 32) and set(np.unique(np.asarray(m))) <= {0, 255}
    for k in p1:
        assert p1[k].read_bytes() == p2[k].read_bytes()


def test_infer_without_deblur_branch(seg_only_ckpt, tmp_path):
    img = CORPUS_DIR / "images" / "polyp_000.png"
    paths = infer(seg_only_ckpt, img, tmp_path)
    assert set(paths) == {"mask", "prob"}
    assert not (tmp_path / "polyp_000_restored.png").exists()


def test_ablate_all_variants(tmp_path):
    cfg = TrainConfig(total_steps=2, warmup_steps=0, input_size=32, max_images=2)
    rows = ablate(ModelConfig.toy(), cfg, out_dir=tmp_path)
    assert [r.variant for r in rows] == ["full", "no-locos", "no-locos-dsa", "no-locos-dsa-gam", "no-deblur"]
    table = list(csv.reader(open(tmp_path / "ablation.csv")))
    assert tuple(table[0]) == ABLATION_COLUMNS and len(table) == 6
    by = {r.variant: r for r in rows}
    assert by["no-deblur"].psnr is None and by["no-deblur"].params < by["full"].params
    with pytest.raises(ValueError, match="unknown variants"):
        ablate(ModelConfig.toy(), cfg, ["full", "no-encoder"])


def test_config_yaml_round_trip(tmp_path):
    m, t = ModelConfig.paper_scale(), TrainConfig(lr=3e-4, locos=LocosConfig(direction="inverted"))
    dump_config(m, t, tmp_path / "c.yaml")
    m2, t2 = load_config(tmp_path / "c.yaml")
    assert m2 == m and t2 == t
    (tmp_path / "bad.yaml").write_text("train:\n  learning_rate: 1\n")
    with pytest.raises(ValueError, match="unknown"):
        load_config(tmp_path / "bad.yaml")


@pytest.mark.parametrize("kw", [dict(warmup_steps=10, total_steps=10), dict(batch_size=0), dict(input_size=48),
                                dict(severity="awful"), dict(lr=0.0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- CLI ---------------------------------------------------------------------------------
def test_cli_end_to_end(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["--seed", "3", "train", "--steps", "3", "--max-images", "2", "--out", str(run), "--no-plot"]) == 0
    assert (run / "config.yaml").exists() and (run / CHECKPOINT_NAME).exists()
    ck = run / CHECKPOINT_NAME
    assert main(["eval", "--checkpoint", str(ck), "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev/metrics.csv").exists() and (tmp_path / "ev/metrics.png").exists()
    img = CORPUS_DIR / "images" / "polyp_003.png"
    assert main(["infer", "--checkpoint", str(ck), str(img), "--out", str(tmp_path / "inf")]) == 0
    assert (tmp_path / "inf/polyp_003_mask.png").exists()
    assert main(["degrade", str(CORPUS_DIR), "--severity", "mild", "--out", str(tmp_path / "deg")]) == 0
    assert len(list((tmp_path / "deg/images").iterdir())) == 32
    assert main(["count", "--paper-scale"]) == 0
    assert "GMac" in capsys.readouterr().out


def test_cli_train_with_config_and_plot(tmp_path):
    dump_config(ModelConfig.toy(), TrainConfig(total_steps=2, warmup_steps=0, input_size=32, max_images=2),
                tmp_path / "c.yaml")
    assert main(["train", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r/loss.png").exists()
    _, t = load_config(tmp_path / "r/config.yaml")
    assert t.total_steps == 2


def test_cli_ablate_and_errors(tmp_path, capsys):
    assert main(["ablate", "--variants", "full", "no-deblur", "--steps", "2", "--max-images", "2",
                 "--out", str(tmp_path / "ab")]) == 0
    assert (tmp_path / "ab/ablation.png").exists()
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"nope")
    ck = tmp_path / "ab/full" / CHECKPOINT_NAME
    assert main(["infer", "--checkpoint", str(ck), str(bad), "--out", str(tmp_path / "i")]) != 0
    assert main(["--seed", str(2 ** 64), "count"]) == 2
    with pytest.raises(SystemExit):
        main(["ablate", "--variants", "no-encoder"])
    assert "error" in capsys.readouterr().err
