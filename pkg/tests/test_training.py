import json
import struct

import numpy as np
import pytest

from idsr import autodiff as ad
from idsr import training as tr
from idsr.alp import alp_loss, fit_basis
from idsr.imagecore import PairDataset, synth_pairs
from idsr.networks import NetConfig
from idsr.scalespace import GAUSSIAN_SCALES, forward_diff_gradients, gaussian_blur
from gradcheck import away_from_zero, check_grad

RNG = np.random.default_rng(61)
TINY_NET = NetConfig(blocks=1, channels=8)


@pytest.fixture(scope="module")
def basis():
    return fit_basis()


@pytest.fixture(scope="module")
def tiny_ds():
    pairs = synth_pairs(4, 32, seed=3)
    return PairDataset.from_arrays([p[1] for p in pairs], [p[2] for p in pairs], patch_size=16)


def lum(x):
    return ad.Tensor(x[:, None])


def test_learning_rate_schedule():
    cfg = tr.TrainConfig()
    assert tr.learning_rate(1, cfg) == tr.learning_rate(80, cfg) == 1e-4
    assert tr.learning_rate(81, cfg) == 0.5e-4
    assert tr.learning_rate(85, cfg) == 0.5e-4
    assert tr.learning_rate(101, cfg) == 0.25e-4
    assert tr.learning_rate(125, cfg) == 1.25e-5
    assert tr.learning_rate(160, cfg) == 1e-4 / 16


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(lr0=0.0), dict(lambda_alp=-1.0), dict(batch=0),
                                 dict(pixel_loss="huber")])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        tr.TrainConfig(**bad)


def test_alp_loss_diff_identities(basis):
    y = RNG.random((2, 16, 16))
    assert tr.alp_loss_diff(lum(y), lum(y), basis).item() == 0.0
    assert tr.alp_loss_diff(lum(y), lum(y + 0.2), basis).item() < 1e-9


def test_alp_loss_diff_matches_image_domain(basis):
    a, b = RNG.random((3, 16, 16)), RNG.random((3, 16, 16))
    want = np.mean([alp_loss(a[i], b[i], basis) for i in range(3)])
    assert abs(tr.alp_loss_diff(lum(a), lum(b), basis).item() - want) < 1e-6
    want0 = np.mean([alp_loss(a[i], b[i], basis, include_eta0=True) for i in range(3)])
    assert abs(tr.alp_loss_diff(lum(a), lum(b), basis, include_eta0=True).item() - want0) < 1e-6


def test_alp_loss_diff_gradient(basis):
    clean = RNG.random((1, 1, 8, 8))
    # nudge every eta difference away from the l1 kink
    derained = clean + away_from_zero(0.2 * RNG.standard_normal(clean.shape), 0.05)
    err = check_grad(lambda ts: tr.alp_loss_diff(ad.Tensor(clean), ts[0], basis), [derained])
    assert err < 1e-3


def test_alp_loss_diff_errors(basis):
    with pytest.raises(ValueError):
        tr.alp_loss_diff(lum(np.zeros((1, 8, 8))), lum(np.zeros((1, 8, 9))), basis)
    with pytest.raises(ValueError):
        tr.alp_loss_diff(ad.Tensor(np.zeros((1, 3, 8, 8))), ad.Tensor(np.zeros((1, 3, 8, 8))), basis)


def grad_loss_oracle(clean, derained):
    total = 0.0
    for s in GAUSSIAN_SCALES:
        gc = forward_diff_gradients(gaussian_blur(clean, s))
        gd = forward_diff_gradients(gaussian_blur(derained, s))
        total += np.abs(gc.gx - gd.gx).mean() + np.abs(gc.gy - gd.gy).mean()
    return total


def test_grad_loss_identities_and_oracle():
    a, b = RNG.random((2, 20, 20)), RNG.random((2, 20, 20))
    assert tr.grad_loss_diff(lum(a), lum(a)).item() == 0.0
    assert tr.grad_loss_diff(lum(a), lum(a + 0.3)).item() < 1e-9
    want = np.mean([grad_loss_oracle(a[i], b[i]) for i in range(2)])
    assert abs(tr.grad_loss_diff(lum(a), lum(b)).item() - want) < 1e-6
    with pytest.raises(ValueError):
        tr.grad_loss_diff(lum(a), lum(b[:, :-1]))


def test_losses_non_negative(basis):
    for _ in range(5):
        a, b = RNG.random((1, 12, 12)), RNG.random((1, 12, 12))
        assert tr.alp_loss_diff(lum(a), lum(b), basis).item() > 0
        assert tr.grad_loss_diff(lum(a), lum(b)).item() > 0


def test_objective_terms(basis):
    x = ad.Tensor(RNG.random((1, 3, 16, 16)))
    y = ad.Tensor(RNG.random((1, 3, 16, 16)))
    loss, terms = tr.objective("dprnet", y, x, tr.TrainConfig(), basis)
    assert set(terms) == {"pixel", "alp"} and loss.item() == pytest.approx(sum(terms.values()))
    _, terms = tr.objective("ggirnet", y, x, tr.TrainConfig(), None)
    assert set(terms) == {"grad"}
    _, terms = tr.objective("ggirnet", y, x, tr.TrainConfig(lambda_pixel_ggir=0.5), None)
    assert set(terms) == {"grad", "pixel"}
    with pytest.raises(ValueError):
        tr.objective("dprnet", y, x, tr.TrainConfig(lambda_alp=0.0, lambda_pixel_dpr=0.0), basis)


def test_overfit_single_image(basis):
    pairs = synth_pairs(1, 32, seed=5)
    ds = PairDataset.from_arrays([pairs[0][1]], [pairs[0][2]], patch_size=32)
    cfg = tr.TrainConfig(epochs=50, batch=1, patch=32, lr0=1e-3)
    ck = tr.train("dprnet", ds, cfg, TINY_NET, basis)
    assert ck.history[-1]["loss"] < 0.5 * ck.history[0]["loss"]


def test_training_deterministic(tiny_ds, basis):
    cfg = tr.TrainConfig(epochs=3, batch=2, patch=16)
    a = tr.train("dprnet", tiny_ds, cfg, TINY_NET, basis)
    b = tr.train("dprnet", tiny_ds, cfg, TINY_NET, basis)
    assert a.history == b.history
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_history_rows_and_lr(tiny_ds):
    cfg = tr.TrainConfig(epochs=2, batch=4, patch=16, decay_start=1, decay_every=1)
    ck = tr.train("ggirnet", tiny_ds, cfg, TINY_NET)
    assert [r["epoch"] for r in ck.history] == [1, 2]
    assert [r["lr"] for r in ck.history] == [1e-4, 0.5e-4]
    assert set(ck.history[0]) == {"epoch", "lr", "loss", "grad"}


def test_train_rejects_wrong_channels(tiny_ds):
    with pytest.raises(ValueError):
        tr.train("ggirnet", tiny_ds, tr.TrainConfig(epochs=1, patch=16), NetConfig(blocks=1, channels=8,
                                                                                 input_channels=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts():
    # float32 overflow inside the network turns the loss non-finite
    huge = np.full((16, 16, 3), 3e38)
    huge[::2] *= -1
    ds = PairDataset.from_arrays([huge], [np.zeros((16, 16, 3))], patch_size=16)
    with pytest.raises(tr.TrainingError, match="non-finite loss"):
        tr.train("ggirnet", ds, tr.TrainConfig(epochs=1, batch=1, patch=16), TINY_NET)


def test_loss_log_csv(tiny_ds, tmp_path):
    ck = tr.train("ggirnet", tiny_ds, tr.TrainConfig(epochs=2, batch=4, patch=16), TINY_NET,
                  log_path=tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,loss,grad"
    assert len(lines) == 3
    assert float(lines[1].split(",")[2]) == ck.history[0]["loss"]


def test_checkpoint_round_trip_bytes(tiny_ds, basis, tmp_path):
    ck = tr.train("dprnet", tiny_ds, tr.TrainConfig(epochs=1, batch=2, patch=16), TINY_NET, basis)
    tr.save_checkpoint(ck, tmp_path / "a.ckpt")
    back = tr.load_checkpoint(tmp_path / "a.ckpt")
    tr.save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.epoch == 1 and back.basis_digest == basis.digest()
    assert list(back.params) == list(ck.params)
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:8] == b"IDSRCKPT" and struct.unpack("<I", raw[8:12])[0] == tr.CKPT_VERSION


def _rewrite_meta(path, edit):
    raw = path.read_bytes()
    n = struct.unpack("<Q", raw[12:20])[0]
    meta = json.loads(raw[20:20 + n])
    edit(meta)
    new = json.dumps(meta, sort_keys=True).encode()
    path.write_bytes(raw[:12] + struct.pack("<Q", len(new)) + new + raw[20 + n:])


def test_checkpoint_errors(tiny_ds, tmp_path):
    ck = tr.train("ggirnet", tiny_ds, tr.TrainConfig(epochs=1, batch=4, patch=16), TINY_NET)
    path = tmp_path / "g.ckpt"
    tr.save_checkpoint(ck, path)
    good = path.read_bytes()

    path.write_bytes(b"NOTACKPT" + good[8:])
    with pytest.raises(tr.CheckpointError, match="magic"):
        tr.load_checkpoint(path)
    path.write_bytes(good[:8] + struct.pack("<I", 99) + good[12:])
    with pytest.raises(tr.CheckpointError, match="version"):
        tr.load_checkpoint(path)
    path.write_bytes(good[:-10])
    with pytest.raises(tr.CheckpointError, match="truncated"):
        tr.load_checkpoint(path)

    path.write_bytes(good)
    _rewrite_meta(path, lambda m: m["entries"][0].__setitem__("shape", [8, 3, 5, 5]))
    with pytest.raises(tr.CheckpointError, match="shape mismatch"):
        tr.load_checkpoint(path)

    path.write_bytes(good)
    _rewrite_meta(path, lambda m: m["entries"].pop(0))
    with pytest.raises(tr.CheckpointError, match="missing"):
        tr.load_checkpoint(path)


def test_resume_matches_uninterrupted(tiny_ds, basis, tmp_path):
    full_cfg = tr.TrainConfig(epochs=3, batch=2, patch=16)
    full = tr.train("dprnet", tiny_ds, full_cfg, TINY_NET, basis)
    part = tr.train("dprnet", tiny_ds, tr.TrainConfig(epochs=2, batch=2, patch=16), TINY_NET, basis)
    tr.save_checkpoint(part, tmp_path / "p.ckpt")
    resumed = tr.train("dprnet", tiny_ds, full_cfg, TINY_NET, basis, resume=tr.load_checkpoint(tmp_path / "p.ckpt"))
    assert resumed.history[2] == full.history[2]
    assert all(resumed.params[k].data.tobytes() == full.params[k].data.tobytes() for k in full.params)


def test_resume_rejects_other_network(tiny_ds):
    ck = tr.train("ggirnet", tiny_ds, tr.TrainConfig(epochs=1, batch=4, patch=16), TINY_NET)
    with pytest.raises(ValueError):
        tr.train("dprnet", tiny_ds, tr.TrainConfig(epochs=2, batch=4, patch=16), TINY_NET, resume=ck)
