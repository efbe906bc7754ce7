import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fena import sfne
from fena.errors import ConfigError, EnsembleTrainingError, NumericError, ShapeError
from fena.nn.layers import BEAM_CNN
from fena.nn.tensor import Tensor
from fena.sfne import Block, TrainConfig

from gradcheck import check_grads

SMALL_CNN = (("conv", 3, 1, 3), ("pool", 2, 2), ("dropout", 0.2))


def tiny_arch(encoder="mlp", width=10, channels=2, cells=2, n_x=5, out_acts=("eswish",), cnn=SMALL_CNN):
    init = Block.of((3, cells), ("tanh", "eswish"))
    return sfne.ArchSpec(
        n_t=3, n_x=n_x, in_dyn_width=1, in_static_shape=(channels, n_x), cells=cells,
        fhs=init, bhs=init, fcs=init, bcs=init,
        ind=Block.of((4,), ("tanh",)), out=Block.of((6,) * len(out_acts), out_acts),
        static_encoder=encoder, output_width=width, cnn_layers=cnn)


class Toy:
    """Minimal dataset stand-in: arrays only."""

    def __init__(self, in_static, in_dyn, out):
        self.in_static, self.in_dyn, self.out = in_static, in_dyn, out

    def __len__(self):
        return len(self.out)


def toy_data(arch, n, seed=0, T=3):
    r = np.random.default_rng(seed)
    c, L = arch.in_static_shape
    s = r.normal(size=(n, c, L))
    w = r.uniform(1, 3, size=(n, 1, 1))
    t = np.arange(1, T + 1)[None, :, None] * 0.3
    d = np.sin(w * t)
    x = np.linspace(0, 1, arch.output_width)[None, None, :]
    y = np.sin(w * t + x) * (1 + s.mean(axis=(1, 2))[:, None, None])
    return Toy(s, d, y)


# -- build -----------------------------------------------------------------------

def rod_layout_count(cells=50, n_x=51, n_static=51):
    def dense(i, o):
        return i * o + o
    init = dense(n_static, 20) + dense(20, cells) + 1          # tanh then ES (one beta)
    ind = dense(1, 20) + dense(20, 60) + 2 * dense(60, 60) + 3
    lstm = 4 * cells * 60 + 4 * cells * cells + 4 * cells
    out = dense(2 * cells, 50) + dense(50, 60) + 5 * dense(60, 60) + 7 + dense(60, n_x)
    return 4 * init + ind + 2 * lstm + out


def test_rod_layout_parameter_count():
    m = sfne.build(sfne.rod_arch(), seed=0)
    assert sfne.count_parameters(m) == rod_layout_count() == 90_915
    assert m.head.W.shape[0] == 51 and m.head.activation == "linear"


def test_same_seed_same_parameters():
    a, b = sfne.build(tiny_arch(), 3), sfne.build(tiny_arch(), 3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    c = sfne.build(tiny_arch(), 4)
    assert not np.array_equal(a.head.W.data, c.head.W.data)


def test_initial_betas_and_loss_weights_are_one():
    m = sfne.build(tiny_arch(), 0, loss="weighted")
    betas = [p.data for n, p in m.named_parameters() if n.endswith("beta")]
    assert betas and all(np.all(b == 1.0) for b in betas)
    assert np.array_equal(m.loss_w.data, [1.0, 1.0])


def test_init_block_width_must_match_cells():
    bad = Block.of((3, 4), ("tanh", "eswish"))
    with pytest.raises(ConfigError, match="cells"):
        sfne.ArchSpec(n_t=3, n_x=5, in_dyn_width=1, in_static_shape=(1, 5), cells=2, fhs=bad,
                      bhs=bad, fcs=bad, bcs=bad, ind=Block.of((4,), ("tanh",)), out=Block.of((), ()))


def test_unknown_activation_rejected():
    with pytest.raises(ConfigError):
        Block.of((3,), ("relu",))


def test_arch_json_round_trip():
    arch = sfne.beam_arch(cells=4, init_width=5, ind=(3, 4), out_width=6, out_layers=2)
    assert sfne.ArchSpec.from_json(arch.to_json()) == arch


# -- forward -----------------------------------------------------------------------

def test_zero_static_maps_to_bias_determined_states():
    m = sfne.build(tiny_arch(channels=1), 1)
    # give the biases values so the check is not trivially zero
    for blk in (m.fhs, m.fcs, m.bhs, m.bcs):
        for layer in blk.mlp.layers:
            layer.b.data[:] = np.random.default_rng(2).normal(size=layer.b.shape)
    (hf, cf), (hb, cb) = [(st.hidden.data, st.cell.data) for st in m.initial_states(Tensor(np.zeros((1, 1, 5))))]

    def by_hand(blk):
        l1, l2 = blk.mlp.layers
        a = np.tanh(l1.b.data)
        z = l2.W.data @ a + l2.b.data
        return l2.beta.data[0] * z / (1 + np.exp(-z))

    np.testing.assert_allclose(hf[0], by_hand(m.fhs), rtol=1e-14)
    np.testing.assert_allclose(cf[0], by_hand(m.fcs), rtol=1e-14)
    np.testing.assert_allclose(hb[0], by_hand(m.bhs), rtol=1e-14)
    np.testing.assert_allclose(cb[0], by_hand(m.bcs), rtol=1e-14)
    assert np.abs(hf).max() > 0


def test_single_step_sequence():
    arch = tiny_arch()
    m = sfne.build(arch, 0)
    y = sfne.predict(m, np.zeros((2, 5)), np.zeros((1, 1)))
    assert y.shape == (1, 10)


def test_untrained_output_within_interval_bound():
    """Propagate |h| <= 1 from the BRNN through NN_out with |ES(x)| <= beta (|x| + 0.2785)."""
    arch = sfne.rod_arch(cells=25, n_t=100)
    m = sfne.build(arch, 7)
    r = np.random.default_rng(0)
    d = np.sin(r.uniform(50, 360) * np.arange(1, 101) * 1e-3)[:, None]
    y = sfne.predict(m, np.zeros((1, 51)), d)
    bound = 1.0
    for layer in m.out.layers:
        pre = np.abs(layer.W.data).sum(axis=1).max() * bound + np.abs(layer.b.data).max()
        bound = layer.beta.data[0] * (pre + 0.27846454276106725)
    head = np.abs(m.head.W.data).sum(axis=1).max() * bound + np.abs(m.head.b.data).max()
    assert np.isfinite(y).all() and np.abs(y).max() <= head


def test_inference_is_bitwise_deterministic():
    arch = tiny_arch(encoder="cnn")
    m = sfne.build(arch, 0)
    data = toy_data(arch, 4)
    a = sfne.predict(m, data.in_static, data.in_dyn)
    b = sfne.predict(m, data.in_static, data.in_dyn)
    assert np.array_equal(a, b)


def test_static_input_is_live():
    arch = tiny_arch()
    m = sfne.build(arch, 0)
    data = toy_data(arch, 1)
    base = sfne.predict(m, data.in_static, data.in_dyn)
    s = data.in_static.copy()
    s[0, 1, 2] += 1e-3
    assert np.abs(sfne.predict(m, s, data.in_dyn) - base).max() > 0


def test_forward_shape_errors():
    m = sfne.build(tiny_arch(), 0)
    with pytest.raises(ShapeError):
        sfne.predict(m, np.zeros((3, 5)), np.zeros((3, 1)))
    with pytest.raises(ShapeError):
        sfne.predict(m, np.zeros((2, 5)), np.zeros((3, 2)))


def test_non_finite_names_the_block():
    m = sfne.build(tiny_arch(), 0)
    m.ind.layers[0].W.data[0, 0] = np.nan
    with pytest.raises(NumericError, match="NN_InD"):
        sfne.predict(m, np.zeros((2, 5)), np.ones((3, 1)))


def test_beam_layout_forward():
    arch = sfne.beam_arch(cells=4, init_width=5, ind=(3, 4), out_width=6, out_layers=2, channels=4)
    m = sfne.build(arch, 0, loss="weighted")
    y = sfne.predict(m, np.ones((2, 4, 101)), np.zeros((2, 7, 1)))
    assert y.shape == (2, 7, 202) and arch.out_channels == 2
    assert m.fhs.cnn.n_out == 16  # 101 -> 99 -> 49 -> 47 -> 23 -> 19 -> 9 -> 3 -> 1, 16 channels


# -- end-to-end gradients ---------------------------------------------------------------

@pytest.mark.parametrize("encoder,loss_kind,acts", [
    ("cnn", "mse", ("eswish",)),
    ("cnn", "weighted", ("snake", "snake")),
    ("mlp", "weighted", ("eswish",)),
    ("none", "mse", ("snake",)),
])
def test_full_model_gradients(encoder, loss_kind, acts):
    arch = tiny_arch(encoder=encoder, out_acts=acts)
    m = sfne.build(arch, 1, loss=loss_kind)
    data = toy_data(arch, 3, seed=2)
    m.norm = sfne.Normaliser.fit(arch, data.in_static, data.in_dyn, data.out)
    if loss_kind == "weighted":
        m.loss_w.data[:] = [0.7, 1.9]
    m.eval()
    check_grads(lambda: sfne._batch_loss(m, data.in_static, data.in_dyn, data.out), m.parameters(), tol=1e-4)


def test_beam_encoder_gradients_in_full_model():
    arch = tiny_arch(encoder="cnn", n_x=101, width=202, cnn=BEAM_CNN)
    m = sfne.build(arch, 0, loss="weighted")
    data = toy_data(arch, 2, seed=1)
    m.norm = sfne.Normaliser.fit(arch, data.in_static, data.in_dyn, data.out)
    picks = [m.fhs.cnn.convs[0].W, m.bcs.cnn.convs[3].b, m.fcs.mlp.layers[0].W]
    check_grads(lambda: sfne._batch_loss(m, data.in_static, data.in_dyn, data.out), picks, tol=1e-4)


# -- losses ------------------------------------------------------------------------------

def _pair(seed=0, shape=(4, 6, 10)):
    r = np.random.default_rng(seed)
    return r.normal(size=shape), r.normal(size=shape)


def test_losses_vanish_at_truth():
    _, y = _pair()
    w = Tensor(np.array([2.0, 3.0]))
    assert float(sfne.loss("mse", Tensor(y), y).data) == 0.0
    assert float(sfne.loss("weighted", Tensor(y), y, w).data) == 0.0


def test_weighted_with_w2_zero_is_sum_of_channel_mse():
    p, y = _pair(1)
    w = Tensor(np.array([1.0, 0.0]))
    got = float(sfne.loss("weighted", Tensor(p), y, w).data)
    mse_u = np.mean((p[..., :5] - y[..., :5]) ** 2)
    mse_v = np.mean((p[..., 5:] - y[..., 5:]) ** 2)
    assert got == pytest.approx(mse_u + mse_v, rel=1e-14)
    # equal channel widths: twice the plain mean over all entries
    assert got == pytest.approx(2 * float(sfne.loss("mse", Tensor(p), y).data), rel=1e-14)


def test_weighted_range_term_is_scale_invariant():
    p, y = _pair(2, shape=(1, 6, 10))
    only1 = Tensor(np.array([1.0, 0.0]))
    only2 = Tensor(np.array([0.0, 1.0]))
    a1 = float(sfne.loss("weighted", Tensor(p), y, only1).data)
    a2 = float(sfne.loss("weighted", Tensor(p), y, only2).data)
    b1 = float(sfne.loss("weighted", Tensor(10 * p), 10 * y, only1).data)
    b2 = float(sfne.loss("weighted", Tensor(10 * p), 10 * y, only2).data)
    assert b2 == pytest.approx(a2, rel=1e-12)
    assert b1 == pytest.approx(100 * a1, rel=1e-12)


def test_weighted_loss_constant_truth_rejected():
    p, y = _pair(3)
    y[1, :, :5] = 0.25
    with pytest.raises(NumericError, match="sample 1"):
        sfne.loss("weighted", Tensor(p), y, Tensor(np.array([1.0, 1.0])))
    # harmless when the range term is switched off
    sfne.loss("weighted", Tensor(p), y, Tensor(np.array([1.0, 0.0])))


def test_loss_shape_mismatch():
    p, y = _pair()
    with pytest.raises(ShapeError):
        sfne.loss("mse", Tensor(p), y[:, :-1])


# -- metric ------------------------------------------------------------------------------

def test_relative_error_definition():
    _, y = _pair(4)
    assert sfne.relative_error(y, y) == 0.0
    assert sfne.relative_error(y + 0.01 * np.ptp(y), y) == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(NumericError):
        sfne.relative_error(y, np.ones_like(y))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_relative_error_nonnegative_zero_iff_equal(seed, amount):
    r = np.random.default_rng(seed)
    y = r.normal(size=(5, 7))
    p = y.copy()
    p[r.integers(5), r.integers(7)] += amount
    e = sfne.relative_error(p, y)
    assert e >= 0 and ((e == 0) == np.array_equal(p, y))


def test_sample_errors_average_channels():
    _, y = _pair(5)
    p = y.copy()
    p[..., :5] += 0.02 * np.ptp(y[..., :5].reshape(4, -1), axis=1)[:, None, None]
    np.testing.assert_allclose(sfne.sample_errors(p, y, channels=2), 1.0, rtol=1e-12)
    prof = sfne.step_profile(p, y, channels=2)
    np.testing.assert_allclose(prof, 1.0, rtol=1e-12)


# -- training -------------------------------------------------------------------------------

def test_one_epoch_reduces_loss_in_most_seeds():
    arch = tiny_arch()
    wins = 0
    for seed in range(10):
        data = toy_data(arch, 10, seed=seed)
        m = sfne.build(arch, seed)
        m.norm = sfne.Normaliser.fit(arch, data.in_static, data.in_dyn, data.out)
        before = sfne.evaluate_loss(m, data)
        sfne.train(m, data, None, TrainConfig(epochs=1, batch_size=5, lr=1e-2, seed=seed))
        wins += sfne.evaluate_loss(m, data) < before
    assert wins >= 9


def test_step_decay_halves_at_300():
    opt = TrainConfig.rod().make_optimizer()
    lrs = []
    for epoch in range(1000):
        lrs.append(opt.lr)
        sfne.scheduler_step(opt, epoch, 1.0)
    assert lrs[299] == 1e-3 and lrs[300] == 5e-4 and lrs[600] == 2.5e-4
    assert TrainConfig.beam().make_optimizer().scheduler.patience == 75


def test_config_defaults_and_validation():
    rod, beam = TrainConfig.rod(), TrainConfig.beam()
    assert (rod.epochs, rod.lr, rod.batch_size, rod.split) == (1000, 1e-3, 64, 0.85)
    assert (beam.epochs, beam.lr, beam.scheduler, beam.loss) == (1500, 2e-4, "plateau", "weighted")
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(split=1.0)


def test_weighted_training_climbs_loss_weights_within_clamp():
    arch = tiny_arch()
    data = toy_data(arch, 12)
    m = sfne.build(arch, 0, loss="weighted")
    res = sfne.train(m, data, data, TrainConfig(epochs=3, batch_size=4, lr=0.5, loss="weighted"))
    assert np.all(m.loss_w.data > 1.0) and np.all(m.loss_w.data <= 10.0)
    assert len(res.curves.train_loss) == 3 and np.isfinite(res.curves.test_loss).all()


def test_nan_loss_aborts_with_location():
    arch = tiny_arch()
    data = toy_data(arch, 8)
    data.out[5, 1, 2] = np.nan
    m = sfne.build(arch, 0)
    m.norm = sfne.Normaliser.identity(arch)
    with pytest.raises(NumericError, match=r"epoch 0, batch \d"):
        sfne.train(m, data, None, TrainConfig(epochs=1, batch_size=4), fit_normaliser=False)


def test_loss_kind_mismatch():
    m = sfne.build(tiny_arch(), 0)
    with pytest.raises(ConfigError):
        sfne.train(m, toy_data(m.arch, 4), None, TrainConfig(epochs=1, loss="weighted"))


def test_curves_csv(tmp_path):
    arch = tiny_arch()
    data = toy_data(arch, 6)
    res = sfne.train(sfne.build(arch, 0), data, data, TrainConfig(epochs=2, batch_size=3))
    res.curves.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_loss,lr" and len(lines) == 3


# -- checkpoints ------------------------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path):
    arch = tiny_arch(encoder="cnn")
    data = toy_data(arch, 6)
    res = sfne.train(sfne.build(arch, 2, "weighted"), data, data,
                     TrainConfig(epochs=2, batch_size=3, loss="weighted"))
    sfne.save_checkpoint(tmp_path / "m.ckpt", res)
    back, meta = sfne.load_checkpoint(tmp_path / "m.ckpt")
    for (na, pa), (nb, pb) in zip(res.model.named_parameters(), back.model.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    assert back.curves.train_loss == res.curves.train_loss and back.epochs_done == 2
    assert np.array_equal(sfne.predict(back.model, data.in_static, data.in_dyn),
                          sfne.predict(res.model, data.in_static, data.in_dyn))


def test_resume_reproduces_next_epoch_bitwise(tmp_path):
    arch = tiny_arch(encoder="cnn")
    data = toy_data(arch, 9)
    cfg = TrainConfig(epochs=3, batch_size=4, scheduler="plateau", patience=1)
    straight = sfne.train(sfne.build(arch, 5), data, data, cfg)

    first = sfne.train(sfne.build(arch, 5), data, data, cfg, epochs=2)
    sfne.save_checkpoint(tmp_path / "half.ckpt", first, cfg)
    loaded, _ = sfne.load_checkpoint(tmp_path / "half.ckpt")
    resumed = sfne.train(loaded.model, data, data, cfg, resume=loaded)

    assert resumed.curves.train_loss == straight.curves.train_loss
    assert resumed.opt.lr == straight.opt.lr
    for (_, pa), (_, pb) in zip(straight.model.named_parameters(), resumed.model.named_parameters()):
        assert np.array_equal(pa.data, pb.data)


# -- ensembles and on-demand ---------------------------------------------------------------------

def test_ensemble_of_one_and_of_identical_models():
    arch = tiny_arch()
    data = toy_data(arch, 3)
    m = sfne.build(arch, 0)
    single = sfne.predict(m, data.in_static, data.in_dyn)
    assert np.array_equal(sfne.Ensemble([m]).predict(data.in_static, data.in_dyn), single)
    np.testing.assert_allclose(sfne.Ensemble([m, m, m]).predict(data.in_static, data.in_dyn), single,
                               rtol=1e-15, atol=0)


def test_train_ensemble_seeds_and_failures():
    arch = tiny_arch()

    def factory(j):
        d = toy_data(arch, 6, seed=j)
        return d, d

    ens, results = sfne.train_ensemble(arch, factory, 3, TrainConfig(epochs=1, batch_size=3, seed=10))
    assert len(ens) == 3 and [r.model.seed for r in results] == [10, 11, 12]

    def flaky(j):
        if j == 1:
            raise RuntimeError("disk full")
        return factory(j)

    with pytest.raises(EnsembleTrainingError, match="#1") as info:
        sfne.train_ensemble(arch, flaky, 3, TrainConfig(epochs=1, batch_size=3))
    assert len(info.value.survivors) == 2


def test_on_demand_forward_shape_and_bounds():
    arch = tiny_arch(width=2, channels=3)
    m = sfne.build(arch, 0)
    s = np.zeros((3, 5))
    s[2] = 0.81
    y = sfne.on_demand_forward(m, s, np.zeros((4, 1)))
    assert y.shape == (4, 2)
    s[2] = 1.2
    with pytest.raises(ValueError, match="outside"):
        sfne.on_demand_forward(m, s, np.zeros((4, 1)))
    with pytest.raises(ConfigError):
        sfne.on_demand_forward(sfne.build(tiny_arch(), 0), np.zeros((2, 5)), np.zeros((4, 1)))

