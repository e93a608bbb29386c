import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from oracle import build_oracle_unet

from dsnet.checkpoint import load_checkpoint, save_checkpoint
from dsnet.data import ImageSample, load_manifest, load_samples
from dsnet.model import ModelHandle, NetworkSpec, build_unet
from dsnet.postprocess import DegenerateMapWarning, EmptyPredictionWarning
from dsnet.synthetic import write_fixture
from dsnet.training import (Adadelta, TrainingConfig, TrainingDivergedError, TrainingState,
                            adadelta_step, evaluate, init_he_normal, plateau_scheduler, train)


# --- initialisation --------------------------------------------------------

def test_he_normal_statistics():
    w = init_he_normal((100_000,), fan_in=8, seed=0)
    sigma = math.sqrt(2 / 8)
    # a normal truncated at two sigma keeps about 0.88 of the original spread
    assert 0.43 <= float(w.std()) <= 0.47
    assert abs(float(w.mean())) < 0.01
    assert float(w.abs().max()) <= 2 * sigma + 1e-6


def test_he_normal_bounds_and_seed():
    w = init_he_normal((20_000,), fan_in=2, seed=1)
    assert float(w.min()) >= -2 and float(w.max()) <= 2
    torch.testing.assert_close(init_he_normal((3, 3), 4, seed=5), init_he_normal((3, 3), 4, seed=5))
    with pytest.raises(ValueError):
        init_he_normal((3,), fan_in=0)


# --- adadelta ----------------------------------------------------------------

def test_adadelta_zero_gradient_is_a_no_op():
    p = torch.tensor([1.0, -2.0])
    adadelta_step([p], [torch.zeros(2)], {})
    torch.testing.assert_close(p, torch.tensor([1.0, -2.0]))


@pytest.mark.parametrize("lr", [1.0, 0.6])
def test_adadelta_first_step_by_hand(lr):
    p = torch.zeros(1, dtype=torch.float64)
    adadelta_step([p], [torch.ones(1, dtype=torch.float64)], {}, lr=lr)
    eps = 1e-7
    assert float(p) == pytest.approx(-lr * math.sqrt(eps) / math.sqrt(0.05 + eps), rel=1e-12)


def test_adadelta_matches_torch_reference():
    torch.manual_seed(0)
    a = torch.nn.Parameter(torch.randn(5, 3, dtype=torch.float64))
    b = torch.nn.Parameter(a.detach().clone())
    ours = Adadelta([a], lr=0.6)
    ref = torch.optim.Adadelta([b], lr=0.6, rho=0.95, eps=1e-7)
    target = torch.randn(5, 3, dtype=torch.float64)
    for _ in range(50):
        for p, opt in ((a, ours), (b, ref)):
            opt.zero_grad()
            ((p - target) ** 4).sum().backward()
            opt.step()
    torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-12)


def test_adadelta_descends_a_quadratic_bowl():
    p = torch.nn.Parameter(torch.tensor([3.0, -4.0]))
    opt = Adadelta([p])
    losses = []
    for _ in range(200):
        opt.zero_grad()
        loss = (p ** 2).sum()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < losses[0]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_adadelta_rejects_non_finite_gradients():
    p = torch.zeros(4)
    with pytest.raises(TrainingDivergedError, match="w0"):
        adadelta_step([p], [torch.tensor([0.0, np.nan, 0.0, 0.0])], {}, names=["w0"])


# --- plateau schedule --------------------------------------------------------

def reference_lrs(values, patience=8, factor=0.6, min_delta=1e-4, lr0=1.0):
    """Straightforward patience rule: the lr used after each observed value."""
    best, stall, lr, out = float("inf"), 0, lr0, []
    for v in values:
        if v < best - min_delta:
            best, stall = v, 0
        else:
            stall += 1
            if stall == patience:
                lr, stall = lr * factor, 0
        out.append(lr)
    return out


def run_scheduler(values, **kw):
    state, out = TrainingState(), []
    for v in values:
        state = plateau_scheduler(state, v, **kw)
        out.append(state.lr)
    return out


def test_plateau_chain():
    lrs = run_scheduler([1.0] * 17)
    assert lrs[0] == 1.0 and lrs[7] == pytest.approx(1.0)
    assert lrs[8] == pytest.approx(0.6)
    assert lrs[16] == pytest.approx(0.36)
    assert run_scheduler([1 - 0.01 * i for i in range(40)]) == [1.0] * 40
    # gains below min_delta count as stagnation
    assert run_scheduler([1 - 1e-5 * i for i in range(9)])[-1] == pytest.approx(0.6)


@settings(max_examples=200)
@given(st.lists(st.floats(0, 2), min_size=1, max_size=60), st.integers(1, 10))
def test_plateau_matches_reference(values, patience):
    ours = run_scheduler(values, patience=patience)
    ref = reference_lrs(values, patience=patience)
    assert ours == pytest.approx(ref, rel=1e-12)


def test_state_json_round_trip():
    fresh = TrainingState()
    state = fresh
    for v in (3.0, 2.0, 2.0):
        state = plateau_scheduler(state, v)
    assert TrainingState.from_json(state.to_json()) == state
    assert TrainingState.from_json(fresh.to_json()).best == math.inf


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(plateau_factor=1.0)
    with pytest.raises(ValueError):
        TrainingConfig(loss="dice")


# --- training loop -----------------------------------------------------------

@pytest.fixture
def tiny_set(tmp_path):
    write_fixture(tmp_path, "t", ["mel", "sk", "nev"], 32, 32)
    return load_samples(load_manifest(tmp_path, "t"), (32, 32))


def tiny_unet(seed=0):
    return build_unet(input_height=32, input_width=32, base_width=4, seed=seed)


def test_zero_epochs(tiny_set):
    handle = tiny_unet()
    before = {k: v.clone() for k, v in handle.network.state_dict().items()}
    _, state = train(handle, tiny_set, config=TrainingConfig(max_epochs=0))
    assert state.history == []
    for k, v in handle.network.state_dict().items():
        torch.testing.assert_close(v, before[k])


def test_training_is_deterministic(tiny_set):
    cfg = TrainingConfig(max_epochs=3, batch_size=2, seed=4)
    runs = [train(tiny_unet(), tiny_set, tiny_set, cfg)[1].history for _ in range(2)]
    assert runs[0] == runs[1]
    assert [h["epoch"] for h in runs[0]] == [1, 2, 3]
    assert set(runs[0][0]) == {"epoch", "train_loss", "val_loss", "val_miou", "lr"}


def test_mask_shape_mismatch_is_rejected(tiny_set):
    with pytest.raises(ValueError, match="does not match"):
        train(build_unet(input_height=64, input_width=64, base_width=4), tiny_set,
              config=TrainingConfig(max_epochs=1))


def test_checkpoint_reproduces_metrics(tiny_set, tmp_path):
    handle, _ = train(tiny_unet(), tiny_set, config=TrainingConfig(max_epochs=2, batch_size=3),
                      out_dir=tmp_path / "run")
    assert (tmp_path / "run" / "history.json").exists()
    _, meta = load_checkpoint(tmp_path / "run" / "best.ckpt", "unet")
    assert meta["epoch"] in (1, 2)
    save_checkpoint(handle, tmp_path / "final.ckpt")
    reloaded, _ = load_checkpoint(tmp_path / "final.ckpt")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a, b = evaluate(handle, tiny_set), evaluate(reloaded, tiny_set)
    assert a.comparable() == b.comparable()


def test_divergence_dumps_state(tiny_set, tmp_path):
    handle = tiny_unet()
    with torch.no_grad():
        handle.network.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError):
        train(handle, tiny_set, config=TrainingConfig(max_epochs=1), out_dir=tmp_path)
    assert (tmp_path / "diverged_state.json").exists()


# --- evaluation ----------------------------------------------------------------

def test_oracle_scores_perfectly(tmp_path):
    write_fixture(tmp_path, "t", ["mel", "sk", "nev", "nev"], 96, 128, noise=0,
                  image_format="png")
    report = evaluate(build_oracle_unet(), load_manifest(tmp_path, "t"))
    for g in ("overall", "mel", "sk", "nev"):
        s = report.groups[g]
        assert (s.miou, s.mdice, s.msn, s.msp, s.auc) == (1.0, 1.0, 1.0, 1.0, 1.0)
    assert report.groups["nev"].n == 2
    assert report.meta["warnings"] == {}


class Constant(torch.nn.Module):
    def forward(self, x):
        return torch.full_like(x[:, :1], 0.5)


def test_constant_model_warns_and_misses_everything(tiny_set):
    handle = ModelHandle(Constant(), NetworkSpec(input_height=32, input_width=32), "constant")
    with pytest.warns(DegenerateMapWarning), pytest.warns(EmptyPredictionWarning):
        report = evaluate(handle, tiny_set)
    assert report.overall.msn == 0.0 and report.overall.msp == 1.0
    assert report.overall.auc == pytest.approx(0.5)
    assert report.meta["warnings"] == {"DegenerateMapWarning": 3, "EmptyPredictionWarning": 3}
    assert report.seconds_per_image >= 0


def test_evaluate_needs_masks():
    handle = ModelHandle(Constant(), NetworkSpec(input_height=32, input_width=32), "constant")
    s = ImageSample("a", np.zeros((32, 32, 3), np.float32), None)
    with pytest.raises(ValueError, match="ground-truth"):
        evaluate(handle, [s])
