import math

import numpy as np
import pytest

from relseg.checkpoint import decode, encode, load_checkpoint, save_checkpoint
from relseg.errors import ConfigError, DatasetIOError, DivergenceError, UsageError
from relseg.relations import binarize, dice
from relseg.synth import DifficultyRanges, generate_dataset
from relseg.tensor import _sigmoid
from relseg.trainer import TrainConfig, lr_at_epoch, train, train_relation, train_vanilla
from relseg.unet import ModelConfig, build_model, forward_relation, forward_vanilla

TINY = ModelConfig(base_channels=4, depth=2, input_size=(16, 16))


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(12, (16, 16), seed=3)


def quick(**kw):
    base = dict(epochs=2, initial_lr=3e-3, batches_per_epoch=2, batch_size=4, seed=1)
    base.update(kw)
    return TrainConfig(**base)


# ---- schedule --------------------------------------------------------------------

def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_at_epoch(cfg, 0) == 1e-4
    assert lr_at_epoch(cfg, 20) == 5e-5
    assert math.isclose(lr_at_epoch(cfg, 99), 6.25e-6, rel_tol=1e-15)
    flat = TrainConfig(epochs=10, lr_halving_period=50)
    assert {lr_at_epoch(flat, e) for e in range(10)} == {1e-4}
    with pytest.raises(UsageError):
        lr_at_epoch(cfg, 100)


def test_log_lr_column_matches_schedule(tiny_data):
    cfg = quick(epochs=5, lr_halving_period=2)
    result = train(build_model(TINY, 0), tiny_data, cfg)
    assert [r["lr"] for r in result.log.rows] == [lr_at_epoch(cfg, e) for e in range(5)]
    assert [r["epoch"] for r in result.log.rows] == [1, 2, 3, 4, 5]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(loss_head_weights=(1, 1, 1))
    with pytest.raises(ConfigError):
        TrainConfig.from_text("epochs=ten")
    assert TrainConfig.from_text("epochs=3\nloss_head_weights=1,0,0,0").loss_head_weights == (1.0, 0.0, 0.0, 0.0)
    assert TrainConfig(batch_size=8).steps_per_epoch(17) == 3


# ---- relation training ------------------------------------------------------------

def test_zero_weighted_heads_get_zero_gradient(tiny_data):
    net = build_model(TINY, 0)
    before = {k: v.data.copy() for k, v in net.params.items()}
    train_relation(net, tiny_data, quick(epochs=1, batches_per_epoch=1, loss_head_weights=(1, 0, 0, 0)))
    for head in ("s2", "rp", "rc"):
        for part in ("weight", "bias"):
            p = net.params[f"head_{head}.{part}"]
            assert np.all(p.grad == 0)
            assert np.array_equal(p.data, before[f"head_{head}.{part}"])
    assert np.any(net.params["head_s1.weight"].grad != 0)


def test_every_trunk_tensor_gets_gradient(tiny_data):
    net = build_model(TINY, 0)
    train_relation(net, tiny_data, quick(epochs=1, batches_per_epoch=1))
    for name, p in net.params.items():
        assert np.linalg.norm(p.grad) > 0, name


def test_same_seed_same_checkpoint(tiny_data):
    a, b = build_model(TINY, 2), build_model(TINY, 2)
    train(a, tiny_data, quick())
    train(b, tiny_data, quick())
    assert encode(a) == encode(b)
    c = build_model(TINY, 2)
    train(c, tiny_data, quick(seed=2))
    assert encode(c) != encode(a)


def test_relation_smoke_run_halves_loss():
    data = generate_dataset(50, (32, 32), seed=7)
    result = train(build_model(ModelConfig(), 0), data, TrainConfig(epochs=10, initial_lr=3e-3, seed=0))
    losses = result.log.total_losses()
    assert losses[-1] < 0.5 * losses[0]
    assert result.log.columns == ["epoch", "lr", "total_loss", "loss_s1", "loss_s2", "loss_rp", "loss_rc"]


def test_divergence_is_reported(tiny_data):
    net = build_model(TINY, 0)
    net.params["head_rc.bias"].data[:] = np.nan
    with pytest.raises(DivergenceError, match="head rc"):
        train(net, tiny_data, quick())


def test_variant_guards(tiny_data):
    with pytest.raises(UsageError):
        train_vanilla(build_model(TINY, 0), tiny_data, quick())
    with pytest.raises(UsageError):
        train_relation(build_model(TINY, 0), [], quick())


# ---- vanilla training --------------------------------------------------------------

def test_vanilla_learns_the_clean_corpus():
    clean = DifficultyRanges(contrast=(1, 1), blur_sigma=(0, 0), noise_std=(0, 0))
    data = generate_dataset(40, (32, 32), clean, seed=7)
    net = build_model(ModelConfig(variant="vanilla"), 0)
    result = train(net, data, TrainConfig(epochs=20, initial_lr=3e-3, seed=0))
    assert result.log.columns == ["epoch", "lr", "total_loss", "loss_s"]
    probs = _sigmoid(forward_vanilla(net, np.stack([d.image for d in data])[:, None]).data[:, 0])
    assert np.mean([dice(binarize(p), d.mask) for p, d in zip(probs, data)]) > 0.95


def test_zero_rate_dropout_trains_like_vanilla(tiny_data):
    cfg = dict(base_channels=4, depth=2, input_size=(16, 16))
    plain = build_model(ModelConfig(variant="vanilla", **cfg), 4)
    drop = build_model(ModelConfig(variant="vanilla_dropout", dropout_rate=0.0, **cfg), 4)
    log_a = train(plain, tiny_data, quick()).log
    log_b = train(drop, tiny_data, quick()).log
    assert plain.flat_params().tobytes() == drop.flat_params().tobytes()
    assert log_a.rows == log_b.rows


def test_dropout_changes_training(tiny_data):
    cfg = dict(base_channels=4, depth=2, input_size=(16, 16))
    plain = build_model(ModelConfig(variant="vanilla", **cfg), 4)
    drop = build_model(ModelConfig(variant="vanilla_dropout", dropout_rate=0.5, **cfg), 4)
    train(plain, tiny_data, quick())
    train(drop, tiny_data, quick())
    assert plain.flat_params().tobytes() != drop.flat_params().tobytes()


def test_trainlog_csv(tmp_path, tiny_data):
    result = train(build_model(TINY, 0), tiny_data, quick())
    path = tmp_path / "sub" / "trainlog.csv"
    result.log.write_csv(path)
    lines = path.read_bytes().split(b"\r\n")
    assert lines[0] == b"epoch,lr,total_loss,loss_s1,loss_s2,loss_rp,loss_rc"
    assert float(lines[1].split(b",")[2]) == result.log.rows[0]["total_loss"]


# ---- checkpoints -------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["relation", "vanilla", "vanilla_dropout"])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_data, variant):
    net = build_model(ModelConfig(base_channels=4, depth=2, input_size=(16, 16), variant=variant,
                                  dropout_rate=0.25), 0)
    train(net, tiny_data, quick(epochs=1, batches_per_epoch=1))
    path = tmp_path / "deep" / "dir" / "checkpoint.rseg"
    save_checkpoint(path, net)
    back = load_checkpoint(path)
    assert back.config == net.config
    assert list(back.params) == list(net.params)
    x = np.stack([d.image for d in tiny_data[:3]])[:, None]
    if variant == "relation":
        a, b = forward_relation(net, x, x[::-1]), forward_relation(back, x, x[::-1])
        for h in a.heads():
            assert a.heads()[h].data.tobytes() == b.heads()[h].data.tobytes()
    else:
        assert forward_vanilla(net, x).data.tobytes() == forward_vanilla(back, x).data.tobytes()
    assert encode(back) == path.read_bytes()


def test_checkpoint_layout():
    net = build_model(TINY, 0)
    blob = encode(net)
    assert blob[:4] == b"RSEG"
    assert int.from_bytes(blob[4:8], "little") == 1
    # raw little-endian doubles close the file
    tail = np.frombuffer(blob[-8 * net.parameter_count():], dtype="<f8")
    assert tail.tobytes() == net.flat_params().astype("<f8").tobytes()


def test_corrupt_checkpoints(tmp_path):
    blob = encode(build_model(TINY, 0))
    with pytest.raises(DatasetIOError):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(DatasetIOError):
        decode(blob[:-3])
    with pytest.raises(DatasetIOError):
        decode(blob + b"\x00")
    with pytest.raises(DatasetIOError, match="absent.rseg"):
        load_checkpoint(tmp_path / "absent.rseg")
