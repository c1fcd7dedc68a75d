import math
import os

import numpy as np
import pytest

from jointsal.data import generate_dataset, load_manifest, load_mask
from jointsal.model import ModelConfig, SegSaliencyNet
from jointsal.pseudolabel import generate_pseudo_dataset
from jointsal.crf import CrfParams
from jointsal.tensor import Tensor
from jointsal import trainer
from jointsal.trainer import (Adam, Checkpoint, CheckpointError, TrainConfig, TrainingError,
                              adam_step, load_checkpoint, lr_at, predict, save_checkpoint, train)


TOY_MODEL = dict(num_classes=5, input_size=48, widths=(4, 6, 8, 8, 8))


def adam_reference_trace(g_seq, lr, beta1=0.9, beta2=0.999, eps=1e-8, x0=0.0):
    """Scalar hand-rolled Adam trace with bias-corrected moments."""
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(g_seq, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
    return x


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return generate_dataset(str(root), seed=5, n_class_images=12, n_saliency_images=12,
                            n_val=4, canvas=48)


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    m = np.zeros(2)
    v = np.zeros(2)
    adam_step(p, np.zeros(2), m, v, t=1, lr=0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_closed_form():
    lr, beta1, beta2, eps = 1e-3, 0.9, 0.999, 1e-8
    p = np.zeros(3)
    adam_step(p, np.ones(3), np.zeros(3), np.zeros(3), t=1, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    # first step with g=1: m_hat = v_hat = 1, so the update is exactly lr/(1+eps)
    expected = -lr / (1.0 + eps)
    np.testing.assert_allclose(p, expected, rtol=1e-12)
    assert abs(p[0] + lr) < 1e-6 * lr + 1e-9


def test_adam_two_steps_match_reference_trace():
    lr = 0.01
    p = np.array([0.0])
    m = np.zeros(1)
    v = np.zeros(1)
    for t, g in enumerate([0.5, 0.5], start=1):
        adam_step(p, np.array([g]), m, v, t=t, lr=lr)
    assert p[0] == pytest.approx(adam_reference_trace([0.5, 0.5], lr), abs=1e-15)


def test_adam_matches_scalar_reference_over_100_random_steps():
    rng = np.random.default_rng(0)
    g_seq = rng.normal(size=100)
    p = np.array([0.3])
    m = np.zeros(1)
    v = np.zeros(1)
    for t, g in enumerate(g_seq, start=1):
        adam_step(p, np.array([g]), m, v, t=t, lr=2e-3)
    expected = adam_reference_trace(g_seq.tolist(), 2e-3, x0=0.3)
    assert abs(p[0] - expected) < 1e-12


def test_adam_class_rejects_nonfinite_gradients():
    t = Tensor(np.zeros(3), requires_grad=True)
    t.grad = np.array([0.0, np.nan, 0.0])
    opt = Adam()
    with pytest.raises(TrainingError) as exc:
        opt.step({"layer.weight": t}, lr=1e-3, iteration=7)
    assert "layer.weight" in str(exc.value) and "7" in str(exc.value)


def test_lr_schedule_exact():
    for it, expected in [(0, 1e-4), (999, 1e-4), (1000, 5e-5), (2500, 2.5e-5), (3000, 1.25e-5)]:
        assert lr_at(it, 1e-4, 1000) == pytest.approx(expected, rel=1e-15)


# ---------------------------------------------------------------------------
# checkpoint round trip
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_identical_forward(tmp_path):
    cfg = ModelConfig(stage=1, seed=4, **TOY_MODEL)
    net = SegSaliencyNet(cfg)
    opt = Adam()
    # one step so moments are nontrivial
    img = Tensor(np.random.default_rng(1).normal(size=(2, 3, 48, 48)))
    seg, sal, probs = net.forward(img)
    (seg.sum() * 1e-3).backward()
    opt.step(net.params, 1e-4)
    net.zero_grad()

    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, cfg, net.params, opt, iteration=1, rng_state={"note": 1})
    ckpt = load_checkpoint(path)
    assert ckpt.model_config == cfg
    assert ckpt.iteration == 1 and ckpt.adam_t == 1
    net2 = ckpt.build_net()
    for k in net.params:
        np.testing.assert_array_equal(net.params[k].data, net2.params[k].data)
        np.testing.assert_array_equal(opt.m[k], ckpt.adam_m[k])

    out1 = net.forward(img)[0].data
    out2 = net2.forward(img)[0].data
    assert np.array_equal(out1, out2)


def test_checkpoint_rejects_bad_magic_and_version(tmp_path):
    path = str(tmp_path / "bad.ckpt")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    cfg = ModelConfig(stage=1, seed=0, **TOY_MODEL)
    net = SegSaliencyNet(cfg)
    good = str(tmp_path / "good.ckpt")
    save_checkpoint(good, cfg, net.params)
    blob = bytearray(open(good, "rb").read())
    blob[4:8] = (99).to_bytes(4, "little")
    with open(good, "wb") as fh:
        fh.write(blob)
    with pytest.raises(CheckpointError):
        load_checkpoint(good)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "ghost.ckpt"))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def short_config(stage, iters=6, **kw):
    return TrainConfig(stage=stage, iterations=iters, batch_size=4, lr_halving_interval=3,
                       eval_interval=0, log_interval=2, seed=11, **kw)


def test_stage1_initial_loss_matches_uniform_closed_form(dataset, tmp_path):
    """With zeroed heads: class probs are exactly 1/(C+1), scores 0.5, and the
    saliency map is 0.5*C/(C+1) everywhere; the first loss must equal the
    closed-form BCE of those constants."""
    cfg = ModelConfig(stage=1, seed=2, **TOY_MODEL)
    net = SegSaliencyNet(cfg)
    for name, p in net.params.items():
        if name.startswith(("head.conv", "sam.")):
            p.data[:] = 0.0

    from jointsal import losses as L
    from jointsal import data as data_mod

    c = cfg.num_classes
    dc = load_manifest(dataset.dc_manifest)[:4]
    ds = load_manifest(dataset.ds_manifest)[:4]
    imgs_c = Tensor(np.stack([data_mod.load_image(r.image_path) for r in dc]))
    labels = np.stack([r.category_vector(c) for r in dc])
    imgs_s = Tensor(np.stack([data_mod.load_image(r.image_path) for r in ds]))
    masks = np.stack([load_mask(r.payload, binary=True) for r in ds])

    probs = net.forward(imgs_c)[2]
    sal = net.forward(imgs_s)[1]
    actual = (L.class_loss(probs, labels) + L.saliency_loss(sal, masks)).item()

    t_hat = 1.0 / (c + 1)
    s_hat = 0.5 * c / (c + 1)
    n_present = labels.sum()
    n_absent = labels.size - n_present
    expected_class = -(n_present * math.log(t_hat) + n_absent * math.log(1 - t_hat)) / len(dc)
    n_pos = masks.sum()
    n_neg = masks.size - n_pos
    expected_sal = -(n_pos * math.log(s_hat) + n_neg * math.log(1 - s_hat)) / masks.size
    assert actual == pytest.approx(expected_class + expected_sal, rel=1e-9)


def test_short_training_runs_and_is_deterministic(dataset, tmp_path):
    cfg = ModelConfig(stage=1, seed=3, **TOY_MODEL)
    results = []
    for run in ("a", "b"):
        out = str(tmp_path / run)
        res = train(cfg, short_config(1), out, dc_manifest=dataset.dc_manifest,
                    ds_manifest=dataset.ds_manifest)
        with open(res.final_checkpoint, "rb") as fh:
            results.append(fh.read())
        assert math.isfinite(res.first_loss) and math.isfinite(res.last_loss)
    assert results[0] == results[1]


def test_training_resume_matches_uninterrupted_run(dataset, tmp_path):
    cfg = ModelConfig(stage=1, seed=6, **TOY_MODEL)
    full = train(cfg, short_config(1, iters=6), str(tmp_path / "full"),
                 dc_manifest=dataset.dc_manifest, ds_manifest=dataset.ds_manifest)
    half = train(cfg, short_config(1, iters=3), str(tmp_path / "half"),
                 dc_manifest=dataset.dc_manifest, ds_manifest=dataset.ds_manifest)
    resumed = train(cfg, short_config(1, iters=6), str(tmp_path / "resumed"),
                    dc_manifest=dataset.dc_manifest, ds_manifest=dataset.ds_manifest,
                    resume_from=half.final_checkpoint)
    a = load_checkpoint(full.final_checkpoint)
    b = load_checkpoint(resumed.final_checkpoint)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_stage2_training_with_pseudo_labels(dataset, tmp_path):
    stage1 = SegSaliencyNet(ModelConfig(stage=1, seed=7, **TOY_MODEL))
    pseudo = generate_pseudo_dataset(stage1, dataset.dc_manifest, str(tmp_path / "pseudo"),
                                     CrfParams(iterations=2))
    cfg2 = ModelConfig(stage=2, seed=8, **TOY_MODEL)
    res = train(cfg2, short_config(2), str(tmp_path / "s2"),
                ds_manifest=dataset.ds_manifest, pseudo_manifest=pseudo.manifest_path)
    assert os.path.exists(res.final_checkpoint)
    ckpt = load_checkpoint(res.final_checkpoint)
    assert ckpt.model_config.stage == 2
    assert any(k.startswith("head.branch") for k in ckpt.params)


def test_single_task_configs(dataset, tmp_path):
    cfg = ModelConfig(stage=1, seed=9, **TOY_MODEL)
    res = train(cfg, short_config(1, loss_terms=("class",)), str(tmp_path / "s"),
                dc_manifest=dataset.dc_manifest)
    assert os.path.exists(res.final_checkpoint)
    with pytest.raises(ValueError):
        train(cfg, short_config(1, loss_terms=("saliency",)), str(tmp_path / "x"))  # manifest missing
    with pytest.raises(ValueError):
        short_config(1, loss_terms=("pseudo",))  # not a stage-1 term


def test_validation_tracking_writes_best(dataset, tmp_path):
    cfg = ModelConfig(stage=1, seed=10, **TOY_MODEL)
    config = TrainConfig(stage=1, iterations=4, batch_size=4, lr_halving_interval=2,
                         eval_interval=2, log_interval=2, seed=12)
    res = train(cfg, config, str(tmp_path / "v"), dc_manifest=dataset.dc_manifest,
                ds_manifest=dataset.ds_manifest, val_seg_manifest=dataset.val_seg_manifest)
    assert res.best_checkpoint is not None and os.path.exists(res.best_checkpoint)
    assert res.best_miou is not None and 0 <= res.best_miou <= 1
    log = str(tmp_path / "v" / "train_log.jsonl")
    assert os.path.exists(log)
    import json
    recs = [json.loads(line) for line in open(log)]
    assert {"iteration", "lr", "loss_total", "wall_time"} <= set(recs[0])


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def test_predict_outputs(dataset, tmp_path):
    cfg = ModelConfig(stage=1, seed=13, **TOY_MODEL)
    net = SegSaliencyNet(cfg)
    ckpt_path = str(tmp_path / "m.ckpt")
    save_checkpoint(ckpt_path, cfg, net.params)

    val = load_manifest(dataset.val_seg_manifest)
    image_paths = [r.image_path for r in val]
    res = predict(ckpt_path, image_paths, str(tmp_path / "out"))
    assert res.failures == []
    assert len(res.written) == 3 * len(image_paths)
    for p in res.written:
        assert os.path.exists(p)
    label = load_mask(res.written[0])
    assert label.max() <= cfg.num_classes
    sal = load_mask(res.written[1])
    assert sal.dtype == np.uint8

    missing = predict(ckpt_path, [str(tmp_path / "ghost.png")], str(tmp_path / "out2"))
    assert len(missing.failures) == 1 and missing.written == []
