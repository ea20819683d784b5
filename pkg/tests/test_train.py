import numpy as np
import pytest

from deepcarve import carve, data, nn, train
from deepcarve.nn import CheckpointError
from deepcarve.tensor import Rng


def _net(ds, seed=0):
    return nn.build_network(nn.mini_alexnet(ds.num_classes, image_size=12, width=4, hidden=8),
                            Rng(seed), ds.image_shape)


def _state():
    return train.TrainState(rng=Rng(0))


def test_sgd_plain_descent():
    net = nn.build_network([nn.fc(1, 1)], Rng(0))
    net.params["fullyconnected0.W"][...] = 1.0
    cfg = train.TrainConfig(lr=1.0, momentum=0.0, weight_decay=0.0)
    grads = {"fullyconnected0.W": np.array([[0.5]]), "fullyconnected0.b": np.array([0.0])}
    train.sgd_step(net, grads, _state(), cfg)
    assert net.params["fullyconnected0.W"][0, 0] == 0.5
    assert net.params["fullyconnected0.b"][0] == 0.0


def test_sgd_momentum_matches_recurrence():
    net = nn.build_network([nn.fc(1, 1)], Rng(0))
    net.params["fullyconnected0.W"][...] = 2.0
    cfg = train.TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.01)
    st = _state()
    w, v = 2.0, 0.0
    for g in (0.5, -0.25):
        train.sgd_step(net, {"fullyconnected0.W": np.array([[g]]), "fullyconnected0.b": np.zeros(1)}, st, cfg)
        v = 0.9 * v - 0.1 * (g + 0.01 * w)
        w = w + v
    assert net.params["fullyconnected0.W"][0, 0] == pytest.approx(w, rel=1e-15)
    assert st.iteration == 2


def test_sgd_rejects_non_finite():
    net = nn.build_network([nn.fc(1, 1)], Rng(0))
    with pytest.raises(FloatingPointError, match="fullyconnected0.W"):
        train.sgd_step(net, {"fullyconnected0.W": np.array([[np.nan]]), "fullyconnected0.b": np.zeros(1)},
                       _state(), train.TrainConfig())


def test_config_defaults_and_validation():
    cfg = train.TrainConfig(max_epochs=50)
    assert cfg.warmup_epochs == 6 and cfg.carve_period == 5 and cfg.gamma == 0.7
    assert train.TrainConfig().max_epochs == 500 and train.TrainConfig().warmup_epochs == 60
    with pytest.raises(ValueError):
        train.TrainConfig(loss="hinge")
    with pytest.raises(ValueError):
        train.TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        train.TrainConfig(max_epochs=5, warmup_epochs=10)
    with pytest.raises(ValueError, match="unknown"):
        train.TrainConfig.from_dict({"learning_rate": 0.1})


def test_softmax_training_reduces_loss():
    spec = data.SynthSpec(num_attributes=2, image_size=12, cooccurrence=0.0, seed=0, noise=0.02)
    ds = data.generate_synthetic(spec, {"train": 20, "val": 4, "test": 4})
    _, metrics = train.train(ds, _net(ds), train.TrainConfig(max_epochs=20, loss="softmax", lr=0.05))
    assert metrics[-1]["loss"] < metrics[0]["loss"]
    assert all(m["phase"] == "train" and m["carve_iteration"] == "" for m in metrics)


def test_carving_schedule_in_training(tiny_dataset, tmp_path):
    cfg = train.TrainConfig(max_epochs=12, warmup_epochs=6, carve_period=3, run_dir=str(tmp_path))
    before = tiny_dataset.fingerprint()
    _, metrics = train.train(tiny_dataset, _net(tiny_dataset), cfg)
    assert tiny_dataset.fingerprint() == before
    carved = [m["epoch"] for m in metrics if m["carve_iteration"] != ""]
    assert carved == [6, 9, 12]
    assert [m["phase"] for m in metrics[:5]] == ["warmup"] * 5
    assert all(m["phase"] == "carve" for m in metrics[5:])
    assert sorted(p.name for p in (tmp_path / "pseudo_labels").iterdir()) == \
        ["iter_001.csv", "iter_002.csv", "iter_003.csv"]
    ckpts = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert ckpts == ["carve_001.ckpt", "carve_002.ckpt", "carve_003.ckpt", "final.ckpt", "last.ckpt"]
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,phase,loss,val_precision,carve_iteration"


def test_targets_swap_only_at_carving_epochs(tiny_dataset, monkeypatch):
    epoch = [0]
    calls = []     # (epoch, head, targets) per optimisation step
    swaps = {}     # epoch -> pseudo-labels
    real_schedule, real_carve = carve.carving_schedule, carve.carve

    def sched(e, warmup, period):
        epoch[0] = e
        return real_schedule(e, warmup, period)

    def carve_spy(*args, **kwargs):
        out = real_carve(*args, **kwargs)
        swaps[epoch[0]] = out[1].labels
        return out

    def head(name, fn):
        def spy(logits, targets):
            calls.append((epoch[0], name, np.array(targets)))
            return fn(logits, targets)
        return spy

    monkeypatch.setattr(train.carving, "carving_schedule", sched)
    monkeypatch.setattr(train.carving, "carve", carve_spy)
    monkeypatch.setattr(train, "carving_loss", head("carve", train.carving_loss))
    monkeypatch.setattr(train, "sigmoid_ce", head("weak", train.sigmoid_ce))
    cfg = train.TrainConfig(max_epochs=8, warmup_epochs=3, carve_period=3, batch_size=64)
    train.train(tiny_dataset, _net(tiny_dataset), cfg)

    assert sorted(swaps) == [3, 6]
    assert {e for e, name, _ in calls if name == "weak"} == {1, 2}
    assert {e for e, name, _ in calls if name == "carve"} == {3, 4, 5, 6, 7, 8}
    for e, name, targets in calls:
        if name == "carve":
            source = {tuple(r) for r in swaps[6 if e >= 6 else 3]}
            assert all(tuple(r) in source for r in targets)


def test_training_is_deterministic(tiny_dataset):
    cfg = train.TrainConfig(max_epochs=5, warmup_epochs=2, carve_period=2, seed=3)
    _, a = train.train(tiny_dataset, _net(tiny_dataset, 3), cfg)
    _, b = train.train(tiny_dataset, _net(tiny_dataset, 3), cfg)
    assert a == b


def test_resume_equals_uninterrupted(tiny_dataset, tmp_path):
    cfg_a = train.TrainConfig(max_epochs=8, warmup_epochs=3, carve_period=2, seed=1, run_dir=str(tmp_path / "a"))
    net_a, full = train.train(tiny_dataset, _net(tiny_dataset, 1), cfg_a)

    cfg_b = train.TrainConfig(max_epochs=8, warmup_epochs=3, carve_period=2, seed=1, run_dir=str(tmp_path / "b"))
    train.train(tiny_dataset, _net(tiny_dataset, 1), cfg_b, stop_after=4)
    net_b, resumed = train.resume(tmp_path / "b" / "checkpoints" / "last.ckpt", tiny_dataset, cfg_b)
    assert resumed == full
    for k in net_a.params:
        assert net_a.params[k].tobytes() == net_b.params[k].tobytes()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_rejects_other_seed_and_corruption(tiny_dataset, tmp_path):
    cfg = train.TrainConfig(max_epochs=3, warmup_epochs=1, seed=1, run_dir=str(tmp_path))
    train.train(tiny_dataset, _net(tiny_dataset), cfg, stop_after=2)
    ckpt = tmp_path / "checkpoints" / "last.ckpt"
    other = train.TrainConfig(max_epochs=3, warmup_epochs=1, seed=2, run_dir=str(tmp_path))
    with pytest.raises(CheckpointError, match="seed"):
        train.resume(ckpt, tiny_dataset, other)
    raw = bytearray(ckpt.read_bytes())
    raw[100] ^= 0x01
    ckpt.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        train.resume(ckpt, tiny_dataset, cfg)


def test_class_count_mismatch(tiny_dataset):
    net = nn.build_network(nn.mini_alexnet(5, image_size=12, width=4, hidden=8), Rng(0), (1, 12, 12))
    with pytest.raises(ValueError, match="classes"):
        train.train(tiny_dataset, net, train.TrainConfig(max_epochs=1))


def test_resume_from_carve_checkpoint(tiny_dataset, tmp_path):
    cfg = train.TrainConfig(max_epochs=7, warmup_epochs=3, carve_period=2, seed=1, run_dir=str(tmp_path / "a"))
    net_a, full = train.train(tiny_dataset, _net(tiny_dataset, 1), cfg)
    ckpt = tmp_path / "a" / "checkpoints" / "carve_002.ckpt"
    _, state, _ = train.load_train_checkpoint(ckpt)
    assert state.epoch == 4 and state.carve_iteration == 2 and state.carved_epoch == 5
    net_b, resumed = train.resume(ckpt, tiny_dataset, cfg)
    assert resumed == full
    for k in net_a.params:
        assert net_a.params[k].tobytes() == net_b.params[k].tobytes()
