import numpy as np
import pytest

from svphw.data import SpriteWorldConfig, generate_sequence
from svphw.gradcheck import tiny_config
from svphw.model import SVPHW, LossBreakdown
from svphw.params import ParameterStore
from svphw.train import CHECKPOINT_NAME, LOG_NAME, Adam, NumericalAbort, read_loss_log, sample_batch, train


def tiny_world(n=3, length=6):
    cfg = SpriteWorldConfig(height=8, width=8, min_size=2, max_size=3, max_speed=1, length=length)
    return [generate_sequence(cfg, i) for i in range(n)]


def test_adam_matches_reference_formula():
    store = ParameterStore()
    store.add("w", np.array([1.0, -2.0]))
    store.astype(np.float64)
    opt = Adam(store, lr=0.1)
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3])]
    w, m, v = np.array([1.0, -2.0]), np.zeros(2), np.zeros(2)
    for t, g in enumerate(grads, 1):
        opt.step({"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(store["w"].data, w, rtol=1e-12)


def test_first_adam_step_moves_by_lr():
    store = ParameterStore()
    store.add("w", np.array([0.0, 0.0]))
    Adam(store, lr=0.01).step({"w": np.array([3.0, -1e-3])})
    np.testing.assert_allclose(store["w"].data, [-0.01, 0.01], rtol=1e-4)


def test_sample_batch_deterministic_and_shaped():
    seqs = tiny_world(4)
    a = sample_batch(seqs, 2, 4, seed=0, step=5)
    assert a.shape == (4, 2, 1, 8, 8)
    assert np.array_equal(a, sample_batch(seqs, 2, 4, seed=0, step=5))
    assert not np.array_equal(a, sample_batch(seqs, 2, 4, seed=0, step=6))
    with pytest.raises(ValueError, match="shorter"):
        sample_batch(seqs, 1, 7, 0, 1)


def test_train_writes_log_and_checkpoint(tmp_path):
    cfg = tiny_config(steps=3)
    model = SVPHW(cfg)
    res = train(model, tiny_world(), out_dir=tmp_path, checkpoint_every=2)
    assert res.steps_done == 3
    rows = read_loss_log(tmp_path / LOG_NAME)
    assert [r[0] for r in rows] == [1, 2, 3]
    for (_, vals), loss in zip(rows, res.losses):
        assert vals[-1] == LossBreakdown.combine(*vals[:-1], cfg.beta)
        assert vals == loss.values()
    saved = ParameterStore.load(tmp_path / CHECKPOINT_NAME)
    assert all(np.array_equal(saved[n].data, model.params[n].data) for n in saved.names())


def test_zero_steps_writes_initial_checkpoint(tmp_path):
    model = SVPHW(tiny_config(steps=0))
    res = train(model, tiny_world(), out_dir=tmp_path)
    assert res.steps_done == 0
    assert (tmp_path / CHECKPOINT_NAME).read_bytes() == SVPHW(tiny_config()).params.to_bytes()


def test_training_is_deterministic(tmp_path):
    runs = []
    for name in ("a", "b"):
        train(SVPHW(tiny_config(steps=4)), tiny_world(), out_dir=tmp_path / name)
        runs.append(((tmp_path / name / LOG_NAME).read_bytes(), (tmp_path / name / CHECKPOINT_NAME).read_bytes()))
    assert runs[0] == runs[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_aborts_and_keeps_last_good_checkpoint(tmp_path):
    model = SVPHW(tiny_config(steps=6))
    snapshot = {}

    def poison(step, loss):
        if step == 2:
            snapshot["bytes"] = (tmp_path / CHECKPOINT_NAME).read_bytes()
            model.params.set("dec.pixel.l1.pw.bias", np.full(1, np.nan))

    with pytest.raises(NumericalAbort, match="step 3"):
        train(model, tiny_world(), out_dir=tmp_path, checkpoint_every=2, progress=poison)
    assert (tmp_path / CHECKPOINT_NAME).read_bytes() == snapshot["bytes"]
    assert len(read_loss_log(tmp_path / LOG_NAME)) == 2
