import hashlib
import math
import struct

import numpy as np
import pytest

from fundusgan.autodiff import Tensor
from fundusgan.data import UnpairedSampler, encode_ppm, synthesize_clean, write_synthetic_dataset
from fundusgan.layers import ConfigError, Parameter
from fundusgan.losses import generator_total
from fundusgan.models import Discriminator
from fundusgan.trainer import (
    Adam,
    Checkpoint,
    CheckpointError,
    CycleGANTrainer,
    EarlyStopping,
    Enhancer,
    TrainConfig,
    adam_step,
    build_cyclegan,
    enhance,
    load_checkpoint,
    save_checkpoint,
    train,
)


def scalar_param(v):
    p = Parameter((1,), "zeros", np.float64)
    p.data[:] = v
    return p


def tiny_config(root, **kw):
    base = dict(image_size=32, embed_dim=16, depth=1, heads=2, disc_base=4, epochs_max=2,
                low_dir=str(root / "data" / "low"), high_dir=str(root / "data" / "high"),
                checkpoint_dir=str(root / "ck"))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def dataset(tmp_path):
    write_synthetic_dataset(tmp_path / "data", 4, 32, 5)
    return tmp_path


def param_digest(named):
    h = hashlib.sha256()
    for name, p in named:
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


# -- Adam -----------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameter():
    p = scalar_param(0.7)
    opt = Adam([("x", p)], lr=0.1)
    for _ in range(5):
        p.grad = np.zeros(1)
        opt.step()
    assert p.data[0] == 0.7


@pytest.mark.parametrize("lr", [1e-3, 0.1, 2.0])
def test_adam_first_step_moves_by_lr(lr):
    p = scalar_param(1.0)
    opt = Adam([("x", p)], lr=lr)
    p.grad = np.ones(1)
    opt.step()
    assert p.data[0] == pytest.approx(1.0 - lr, rel=1e-6)
    assert opt.step_count == 1


def test_adam_minimizes_parabola():
    p = scalar_param(1.0)
    opt = Adam([("x", p)], lr=0.1, beta1=0.9)
    for _ in range(100):
        p.grad = 2 * p.data
        opt.step()
    assert abs(p.data[0]) < 0.1


def test_functional_adam_step_matches_method():
    a, b = scalar_param(0.5), scalar_param(0.5)
    oa, ob = Adam([("x", a)], lr=0.01), Adam([("x", b)], lr=0.01)
    for g in (0.3, -1.2, 0.8):
        a.grad = np.array([g])
        oa.step()
        adam_step([b], [np.array([g])], ob)
    assert a.data[0] == b.data[0]


def test_adam_rejects_nonfinite_gradient():
    p = scalar_param(1.0)
    opt = Adam([("weight", p)])
    p.grad = np.array([math.nan])
    with pytest.raises(FloatingPointError, match="weight"):
        opt.step()
    assert p.data[0] == 1.0


# -- checkpoint format ----------------------------------------------------

def test_checkpoint_byte_layout():
    ck = Checkpoint()
    ck["a"] = np.array([[1.0, 2.0]], np.float32)
    raw = ck.to_bytes()
    expect = b"RGCK" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"a" \
        + struct.pack("<B", 2) + struct.pack("<II", 1, 2) + struct.pack("<ff", 1.0, 2.0)
    assert raw == expect


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    cfg = tiny_config(tmp_path)
    tr = CycleGANTrainer(cfg)
    raw = tr.checkpoint().to_bytes()
    again = Checkpoint.from_bytes(raw).to_bytes()
    assert raw == again
    path = tmp_path / "x.ckpt"
    Checkpoint.from_bytes(raw).save(path)
    assert Checkpoint.load(path).to_bytes() == raw


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
    (lambda b: b[:-3], "offset"),
    (lambda b: b + b"\0", "trailing"),
])
def test_corrupt_checkpoints_are_rejected(mutate, msg):
    ck = Checkpoint()
    ck["w"] = np.ones((2, 3), np.float32)
    with pytest.raises(CheckpointError, match=msg):
        Checkpoint.from_bytes(mutate(ck.to_bytes()))


def test_loading_into_mismatched_architecture_names_tensor(tmp_path):
    small = Discriminator(4)
    ck = save_checkpoint(small)
    with pytest.raises(CheckpointError, match="c0.weight"):
        load_checkpoint(ck, Discriminator(8))


def test_checkpoint_carries_moments_and_meta(tmp_path):
    names = set(CycleGANTrainer(tiny_config(tmp_path)).checkpoint().tensors)
    assert "adam.m.gen_h.patch.weight" in names and "adam.v.disc_l.final.bias" in names
    assert {"meta.epoch", "meta.step", "meta.best_loss"} <= names


# -- configuration --------------------------------------------------------

def test_config_text_round_trip():
    cfg = TrainConfig(lr=1e-3, generator_kind="cnn-baseline", low_dir="a", high_dir="b")
    assert TrainConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("text,field", [
    ("embed_dim = 20", "embed_dim"),
    ("heads = 3", "heads"),
    ("lr = 0", "lr"),
    ("beta2 = 1.0", "beta2"),
    ("patience = 0", "patience"),
    ("image_size = 60", "image_size"),
    ("image_size = 16", "image_size"),
    ("lambda_cycle = -1", "lambda_cycle"),
    ("colour = red", "colour"),
    ("depth = two", "depth"),
])
def test_config_errors_name_the_field(text, field):
    with pytest.raises(ConfigError, match=f"^{field}"):
        TrainConfig.from_text(text)


def test_missing_dataset_is_error_before_training(tmp_path):
    with pytest.raises(ConfigError, match="low_dir"):
        train(tiny_config(tmp_path))


# -- early stopping -------------------------------------------------------

def test_early_stopping_rule():
    es = EarlyStopping(1)
    es.update(1, 5.0)
    assert not es.should_stop
    es.update(2, 6.0)
    assert es.should_stop and es.best_epoch == 1 and es.best == 5.0


def test_loss_sequence_with_patience_two():
    es = EarlyStopping(2)
    for e, v in enumerate([5, 4, 4.5, 3, 3.5, 3.2], 1):
        es.update(e, v)
        if es.should_stop:
            break
    assert (e, es.best_epoch) == (6, 4)


# -- iteration semantics --------------------------------------------------

def _batch(seed, size=32):
    rng = np.random.default_rng(seed)
    return (rng.uniform(-1, 1, (3, size, size)).astype(np.float32),
            rng.uniform(-1, 1, (3, size, size)).astype(np.float32))


def test_zero_weights_and_neutral_discriminators_give_two_ln_two(tmp_path):
    tr = CycleGANTrainer(tiny_config(tmp_path, lambda_cycle=0.0, lambda_identity=0.0))
    for d in (tr.model.disc_h, tr.model.disc_l):
        for p in d.parameters():
            p.data[:] = 0
    low, high = map(Tensor, _batch(0))
    terms = tr.generator_step(low, high, tr.model.gen_h(low), tr.model.gen_l(high))
    total = generator_total(terms["adv_g_l"], terms["adv_g_h"], terms["cycle_l"], terms["cycle_h"],
                            terms["id_l"], terms["id_h"], tr.config.weights)
    assert total == pytest.approx(2 * math.log(2), abs=1e-6)


def test_discriminator_step_is_detached_and_leaves_generators(tmp_path):
    tr = CycleGANTrainer(tiny_config(tmp_path))
    m = tr.model
    low, high = map(Tensor, _batch(1))
    fake_h, fake_l = m.gen_h(low), m.gen_l(high)
    before = param_digest(m.generator_parameters())
    tr.discriminator_step(low, high, fake_h, fake_l)
    assert param_digest(m.generator_parameters()) == before
    for _, p in m.generator_parameters():
        assert p.grad is None or not p.grad.any()


def test_generator_step_leaves_discriminators(tmp_path):
    tr = CycleGANTrainer(tiny_config(tmp_path))
    m = tr.model
    low, high = map(Tensor, _batch(2))
    before = param_digest(m.discriminator_parameters())
    tr.generator_step(low, high, m.gen_h(low), m.gen_l(high))
    assert param_digest(m.discriminator_parameters()) == before
    assert all(p.requires_grad for _, p in m.discriminator_parameters())


def test_iteration_report_totals(tmp_path):
    tr = CycleGANTrainer(tiny_config(tmp_path))
    rep = tr.train_iteration(*_batch(3))
    w = tr.config.weights
    assert abs(rep.total_g - (rep.adv_g_l + rep.adv_g_h + w.lambda_cycle * (rep.cycle_l + rep.cycle_h)
                              + w.lambda_identity * (rep.id_l + rep.id_h))) < 1e-6
    assert abs(rep.total_d - (rep.adv_d_l + rep.adv_d_h)) < 1e-6
    assert tr.step == 1


def test_identity_loss_decreases_on_constant_pools(tmp_path):
    tr = CycleGANTrainer(tiny_config(tmp_path))
    img = np.full((3, 32, 32), 0.3, np.float32)
    ids = [tr.train_iteration(img, img) for _ in range(20)]
    vals = [r.id_l + r.id_h for r in ids]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_batched_iteration_runs(tmp_path):
    tr = CycleGANTrainer(tiny_config(tmp_path, batch_size=2))
    a, b = _batch(4)
    rep = tr.train_iteration(np.stack([a, b]), np.stack([b, a]))
    assert math.isfinite(rep.total_g)


# -- runs -----------------------------------------------------------------

def test_train_writes_history_and_checkpoints(dataset):
    cfg = tiny_config(dataset, epochs_max=3)
    res = train(cfg)
    ck = dataset / "ck"
    lines = (ck / "history.txt").read_text().splitlines()
    assert [l.split()[0] for l in lines] == ["epoch=1", "epoch=2", "epoch=3"]
    assert lines[0].split()[1].startswith("total_g=")
    best = Checkpoint.load(ck / "best.ckpt")
    hist = [h["total_g"] for h in res.history]
    assert best.scalar("meta.best_loss") == pytest.approx(min(hist), rel=1e-6)
    assert int(best.scalar("meta.epoch")) == 1 + int(np.argmin(hist))
    assert int(Checkpoint.load(ck / "last.ckpt").scalar("meta.epoch")) == 3


def test_same_seed_runs_are_bitwise_identical(dataset):
    a = tiny_config(dataset, epochs_max=1, checkpoint_dir=str(dataset / "a"))
    b = tiny_config(dataset, epochs_max=1, checkpoint_dir=str(dataset / "b"))
    train(a)
    train(b)
    assert (dataset / "a" / "last.ckpt").read_bytes() == (dataset / "b" / "last.ckpt").read_bytes()
    assert (dataset / "a" / "history.txt").read_bytes() == (dataset / "b" / "history.txt").read_bytes()


def test_resume_matches_straight_run(dataset):
    straight = tiny_config(dataset, epochs_max=2, checkpoint_dir=str(dataset / "s"))
    train(straight)
    first = tiny_config(dataset, epochs_max=1, checkpoint_dir=str(dataset / "r"))
    train(first)
    resumed = tiny_config(dataset, epochs_max=2, checkpoint_dir=str(dataset / "r"))
    res = train(resumed, resume=dataset / "r" / "last.ckpt")
    assert res.history[0]["epoch"] == 2
    assert (dataset / "s" / "last.ckpt").read_bytes() == (dataset / "r" / "last.ckpt").read_bytes()
    assert (dataset / "s" / "history.txt").read_bytes() == (dataset / "r" / "history.txt").read_bytes()


def test_training_can_use_the_baseline_generator(dataset):
    cfg = tiny_config(dataset, generator_kind="cnn-baseline", cnn_base=4, n_res=1, epochs_max=1)
    res = train(cfg)
    assert math.isfinite(res.history[0]["total_g"])


def test_size_mismatch_between_data_and_config(dataset):
    with pytest.raises(ConfigError, match="image_size"):
        train(tiny_config(dataset, image_size=64, epochs_max=1))


# -- inference ------------------------------------------------------------

def test_enhance_is_deterministic_and_checks_size(tmp_path):
    cfg = tiny_config(tmp_path)
    ck = CycleGANTrainer(cfg).checkpoint()
    imgs = [s.pixels for s in synthesize_clean(0, 32, 2)] + [synthesize_clean(0, 64, 1)[0].pixels]
    out1, out2 = enhance(ck, imgs), enhance(ck, imgs)
    assert isinstance(out1[2], ConfigError)
    for a, b in zip(out1[:2], out2[:2]):
        assert a.dtype == np.uint8 and a.shape == (32, 32, 3)
        assert encode_ppm(a) == encode_ppm(b)


def test_enhancer_rebuilds_architecture_from_checkpoint(tmp_path):
    cfg = tiny_config(tmp_path, generator_kind="cnn-baseline", cnn_base=4, n_res=1)
    e = Enhancer(CycleGANTrainer(cfg).checkpoint())
    assert e.config.generator_kind == "cnn-baseline" and e.config.cnn_base == 4


def test_build_is_seeded(tmp_path):
    a = build_cyclegan(tiny_config(tmp_path, seed=3))
    b = build_cyclegan(tiny_config(tmp_path, seed=3))
    assert param_digest(a.named_parameters()) == param_digest(b.named_parameters())


def test_sampler_epoch_length_drives_iterations(dataset):
    cfg = tiny_config(dataset, epochs_max=1)
    tr = CycleGANTrainer(cfg)
    tr.run_epoch(UnpairedSampler(cfg.low_dir, cfg.high_dir, cfg.seed), 1)
    assert tr.step == 4
