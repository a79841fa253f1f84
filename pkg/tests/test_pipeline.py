import json
import math

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from slenet import cli, pipeline
from slenet.datapipe import normalize, write_synthetic_dataset
from slenet.objective import omega_m
from slenet.pipeline import (
    RunConfig,
    ablate,
    build_model,
    cosine_lr,
    evaluate,
    load_checkpoint,
    mu_sweep,
    predict,
    train,
)


def tiny_config(tmp_path, **kw):
    base = dict(channels=(8, 16, 24, 32), width=8, train_size=64, batch_size=2, epochs=3,
                output_dir=str(tmp_path / "run"), seed=1, save_every=1)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    train_man = write_synthetic_dataset(root, "train", 4, size=64, seed=0)
    test_man = write_synthetic_dataset(root, "test", 3, size=80, seed=1)
    return root, train_man, test_man


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data):
    out = tmp_path_factory.mktemp("trained")
    cfg = tiny_config(out, epochs=2)
    return cfg, train(cfg, data[1])


def test_cosine_closed_form():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(2.0, 5, 10) == pytest.approx(1.0)


def test_history_follows_schedules(tmp_path, data):
    cfg = tiny_config(tmp_path, epochs=4, lr=1e-3)
    result = train(cfg, data[1])
    lines = (tmp_path / "run" / "history.jsonl").read_text().splitlines()
    assert [json.loads(l) for l in lines] == result.history
    for rec in result.history:
        e = rec["epoch"]
        assert abs(rec["lr"] - cosine_lr(1e-3, e, 4)) <= 1e-9
        assert rec["omega_m"] == omega_m(e, cfg.loss_config())
        assert rec["iters"] == 2
        assert math.isfinite(rec["loss"])


def test_resume_matches_uninterrupted(tmp_path, data, monkeypatch):
    full = train(tiny_config(tmp_path / "a", epochs=4), data[1])

    real_epoch = pipeline._train_epoch

    def crash_at_three(model, optimizer, dataset, epoch, *args):
        if epoch == 2:
            raise KeyboardInterrupt
        return real_epoch(model, optimizer, dataset, epoch, *args)

    cfg = tiny_config(tmp_path / "b", epochs=4)
    monkeypatch.setattr(pipeline, "_train_epoch", crash_at_three)
    with pytest.raises(KeyboardInterrupt):
        train(cfg, data[1])
    monkeypatch.setattr(pipeline, "_train_epoch", real_epoch)
    resumed = train(cfg, data[1], resume=tmp_path / "b" / "run" / "checkpoint.pt")

    assert [r["loss"] for r in resumed.history] == [r["loss"] for r in full.history]
    for (name, a), b in zip(full.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.equal(a, b), name


def test_checkpoint_round_trip(trained):
    cfg, result = trained
    model, loaded_cfg, state = load_checkpoint(result.checkpoint_path)
    assert loaded_cfg == cfg
    assert state["epoch"] == 2
    x = torch.rand(2, 3, 64, 64)
    result.model.eval()
    model.eval()
    a, b = result.model(x), model(x)
    for u, v in zip((*a.levels, a.m), (*b.levels, b.m)):
        assert torch.equal(u, v)


def test_frozen_encoder_unchanged_by_training(tmp_path, data):
    cfg = tiny_config(tmp_path, epochs=1, frozen=True)
    before = build_model(cfg).encoder
    before_frozen = {k: v.clone() for k, v in before.state_dict().items() if ".adapter." not in k}
    after = train(cfg, data[1]).model.encoder.state_dict()
    for k, v in before_frozen.items():
        assert torch.equal(after[k], v), k
    adapters = [k for k in after if ".adapter." in k]
    assert adapters
    fresh = build_model(cfg).encoder.state_dict()
    assert any(not torch.equal(after[k], fresh[k]) for k in adapters)


def test_predict_outputs(tmp_path, trained, data):
    images = data[0] / "test" / "images"
    written = predict(trained[1].checkpoint_path, images, tmp_path / "p", overlay=True)
    assert len(written) == 3
    assert len(list((tmp_path / "p" / "overlay").iterdir())) == 3
    for p in written:
        arr = np.asarray(Image.open(p))
        assert arr.dtype == np.uint8 and arr.shape == (80, 80)


def test_prediction_matches_direct_forward(trained, data):
    cfg, result = trained
    img_path = data[2].pairs[0][0]
    image = torch.from_numpy(np.asarray(Image.open(img_path).convert("RGB"), np.float32) / 255).permute(2, 0, 1)
    prob = pipeline.predict_probability(result.model, image, cfg, (80, 80))
    x = normalize(torch.nn.functional.interpolate(image[None], size=(64, 64), mode="bilinear"), cfg.backbone)
    with torch.no_grad():
        p1 = result.model(x).p1
    ref = torch.sigmoid(torch.nn.functional.interpolate(p1, size=(80, 80), mode="bilinear"))[0, 0]
    torch.testing.assert_close(prob, ref)
    assert prob.min() >= 0 and prob.max() <= 1


def test_eval_is_deterministic(tmp_path, trained, data):
    a = evaluate(trained[1].checkpoint_path, data[2], tmp_path / "e1")
    b = evaluate(trained[1].checkpoint_path, data[2], tmp_path / "e2")
    assert a.means == b.means
    assert (tmp_path / "e1" / "report_means.csv").read_text() == (tmp_path / "e2" / "report_means.csv").read_text()
    assert all(0 <= v <= 1 for v in a.means.values())


def test_mu_sweep_table(tmp_path, data):
    rows = mu_sweep(tiny_config(tmp_path, epochs=1), data[1], data[2])
    assert [r["mu"] for r in rows] == [0.2, 0.4, 0.6, 0.8]
    table = (tmp_path / "run" / "mu_sweep.csv").read_text().splitlines()
    assert table[0].startswith("mu,") and len(table) == 5


def test_ablation_census(tmp_path, data):
    rows = ablate(tiny_config(tmp_path, width=16), data[1], train_models=False)
    params = {(r["gae"], r["lgb_mssd"]): r["params"] for r in rows}
    full = params[(True, True)]
    assert params[(False, True)] < full
    assert params[(True, False)] < full
    assert params[(False, False)] < min(params[(False, True)], params[(True, False)])
    assert len((tmp_path / "run" / "ablation.csv").read_text().splitlines()) == 5


def test_ablated_models_train(tmp_path, data):
    for gae, lgb in ((False, True), (True, False)):
        cfg = tiny_config(tmp_path / f"{gae}{lgb}", epochs=1, enable_gae=gae, enable_lgb_mssd=lgb)
        hist = train(cfg, data[1]).history
        assert math.isfinite(hist[0]["loss"])
        assert (hist[0]["m_term"] is None) == (not lgb)


# -- command line ------------------------------------------------------------


def test_cli_bad_config_exit_code(tmp_path, data):
    code = cli.main(["train", "--data-root", str(data[0]), "--train-size", "33", "--output-dir", str(tmp_path)])
    assert code == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"widht": 8}))
    assert cli.main(["train", "--data-root", str(data[0]), "--config", str(bad)]) == 2


def test_cli_missing_data_exit_code(tmp_path, trained, data):
    root = tmp_path / "d"
    write_synthetic_dataset(root, "test", 2, size=64, seed=3)
    (root / "test" / "masks" / "shape_0001.png").unlink()
    code = cli.main(["eval", "--checkpoint", str(trained[1].checkpoint_path), "--data-root", str(root),
                     "--out", str(tmp_path / "o")])
    assert code == 3


def test_cli_precedence(tmp_path, monkeypatch):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text(yaml.safe_dump({"width": 8, "epochs": 7, "device": "cpu"}))
    monkeypatch.setenv(cli.DEVICE_ENV, "meta")
    parser = cli.build_parser()
    args = parser.parse_args(["train", "--data-root", "x", "--config", str(cfg_file), "--width", "16"])
    config = cli.resolve_config(args)
    assert config.width == 16
    assert config.epochs == 7
    assert config.device == "cpu"
    args = parser.parse_args(["train", "--data-root", "x"])
    assert cli.resolve_config(args).device == "meta"


def test_cli_train_eval_predict(tmp_path, data):
    run = tmp_path / "r"
    common = ["--channels", "8,16,24,32", "--width", "8", "--train-size", "64", "--batch-size", "2"]
    assert cli.main(["train", "--data-root", str(data[0]), "--epochs", "1", "--output-dir", str(run)] + common) == 0
    ckpt = run / "checkpoint.pt"
    assert ckpt.is_file()
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data-root", str(data[0]), "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "report_means.csv").is_file()
    assert cli.main(["predict", "--checkpoint", str(ckpt), "--images", str(data[0] / "test" / "images"),
                     "--out", str(tmp_path / "p")]) == 0
    assert len(list((tmp_path / "p").glob("*.png"))) == 3
