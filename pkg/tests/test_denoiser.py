import numpy as np
import pytest
import torch

from voldiff.condition import ChannelLayout, make_condition
from voldiff.denoiser import (AnalyticGaussianDenoiser, ControlAdapter, TorchDenoiser, ToyNetConfig,
                              ToyUNet, control_forward, load_checkpoint, make_optimizer, noise_loss,
                              predict_noise, read_checkpoint, save_checkpoint, train_step)
from voldiff.errors import FormatError, InvalidArgument, LayoutError, MissingConditionError, ShapeError
from voldiff.sampler import predict_x0, q_sample
from voldiff.schedule import cosine_schedule

S = cosine_schedule(100)
LAYOUT = ChannelLayout(frequencies=2, num_labels=4)


def toy(base=4, prediction="eps", seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    cfg = ToyNetConfig(base_channels=base, time_dim=8, prediction=prediction)
    return ToyUNet(1 + LAYOUT.condition_channels, cfg, S.alpha_bar).to(dtype)


def cond(rng, shape=(4, 4, 4), region="Chest", target=False):
    anatomy = rng.integers(0, 4, shape)
    tg = rng.standard_normal(shape) if target else None
    return make_condition(region, anatomy, frequencies=2, num_labels=4, target=tg)


def test_analytic_formula_and_mode():
    d = AnalyticGaussianDenoiser(0.3, 0.04, S)
    ab = S.alpha_bar[40]
    x = np.linspace(-2, 2, 27).reshape(3, 3, 3)
    expected = np.sqrt(1 - ab) * (x - np.sqrt(ab) * 0.3) / (ab * 0.04 + 1 - ab)
    np.testing.assert_allclose(d(x, 40), expected)
    assert np.allclose(d(np.full((2, 2, 2), np.sqrt(ab) * 0.3), 40), 0.0)
    with pytest.raises(InvalidArgument):
        AnalyticGaussianDenoiser(0.0, 0.0, S)


def test_analytic_matches_monte_carlo_conditional_mean():
    # E[eps | x_t] estimated by binning 10^5 paired draws
    rng = np.random.default_rng(0)
    t, n = 30, 100_000
    d = AnalyticGaussianDenoiser(0.3, 0.04, S)
    x0 = 0.3 + 0.2 * rng.standard_normal(n)
    eps = rng.standard_normal(n)
    xt = q_sample(x0, t, eps, S)
    bins = np.quantile(xt, np.linspace(0, 1, 21))
    idx = np.clip(np.digitize(xt, bins) - 1, 0, 19)
    for b in range(2, 18):
        sel = idx == b
        assert eps[sel].mean() == pytest.approx(d(xt[sel], t).mean(), abs=0.03)
    # no constant shift of the oracle lowers the squared error
    base = np.mean((eps - d(xt, t)) ** 2)
    for delta in (-0.01, 0.01):
        assert np.mean((eps - d(xt, t) - delta) ** 2) > base


def test_analytic_shared_component_is_exact_posterior():
    # x0 = mu + c + e over a 2x2x2 patch; compare with the exact Gaussian conditional mean
    s = cosine_schedule(20)
    d = AnalyticGaussianDenoiser(0.1, 0.05, s, var_shared=0.2)
    t, n = 8, 8
    ab = s.alpha_bar[t]
    cov_x0 = 0.05 * np.eye(n) + 0.2 * np.ones((n, n))
    cov_xt = ab * cov_x0 + (1 - ab) * np.eye(n)
    cross = np.sqrt(1 - ab) * np.eye(n)  # Cov(eps, x_t)
    xt = np.random.default_rng(3).standard_normal(n)
    expected = cross @ np.linalg.solve(cov_xt, xt - np.sqrt(ab) * 0.1)
    np.testing.assert_allclose(d(xt.reshape(2, 2, 2), t).ravel(), expected, atol=1e-12)


def test_predict_noise_shape_contract(rng):
    with pytest.raises(ShapeError):
        predict_noise(lambda x, t, c: x[:1], np.zeros((2, 2, 2)), 1, None)
    x = rng.standard_normal((3, 3, 3))
    assert predict_noise(AnalyticGaussianDenoiser(0, 1, S), x, 5, None).shape == x.shape


@pytest.mark.parametrize("prediction", ["eps", "v"])
def test_toy_net_deterministic_and_shaped(rng, prediction):
    d = TorchDenoiser(toy(prediction=prediction), LAYOUT)
    c = cond(rng)
    x = rng.standard_normal((4, 4, 4))
    a, b = d(x, 17, c), d(x, 17, c)
    assert a.shape == x.shape and np.isfinite(a).all() and np.array_equal(a, b)
    with pytest.raises(ShapeError):
        d(np.zeros((2, 4, 4)), 17, c)


def test_v_head_conversion(rng):
    from voldiff.denoiser.toynet import batch_tensors
    model = toy(prediction="v").double()
    x = rng.standard_normal((4, 4, 4))
    xin, t, region, _ = batch_tensors([x], [60], [cond(rng)], LAYOUT, torch.float64)
    captured = {}

    def hook(module, inputs, output):
        captured["v"] = output[:, 0].detach().numpy()

    model.out.register_forward_hook(hook)
    with torch.no_grad():
        eps = model(xin, t, region)[0].numpy()
    ab = S.alpha_bar[60]
    v = captured["v"][0]
    np.testing.assert_allclose(eps, np.sqrt(ab) * v + np.sqrt(1 - ab) * x, atol=1e-12)
    # the implied clean estimate is the usual v-parametrized one
    np.testing.assert_allclose(predict_x0(x, 60, eps, S), np.sqrt(ab) * x - np.sqrt(1 - ab) * v, atol=1e-10)
    with pytest.raises(InvalidArgument):
        ToyUNet(5, ToyNetConfig(prediction="v"))
    with pytest.raises(InvalidArgument):
        ToyUNet(5, ToyNetConfig(prediction="x0"), S.alpha_bar)


def _loss_fn(model, batch, ts, eps):
    return noise_loss(model, LAYOUT, batch, ts, eps, S)


@pytest.mark.parametrize("prediction", ["eps", "v"])
def test_gradients_match_finite_differences(prediction):
    rng = np.random.default_rng(7)
    model = toy(base=2, prediction=prediction, seed=3, dtype=torch.float64)
    batch = [(rng.uniform(-1, 1, (4, 4, 4)), cond(rng, region=r)) for r in ("HaN", "Abdomen")]
    ts = np.array([5, 80])
    eps = [rng.standard_normal((4, 4, 4)) for _ in batch]
    model.zero_grad()
    _loss_fn(model, batch, ts, eps).backward()
    h = 1e-3
    checked = 0
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        # a few entries from every parameter tensor
        for i in np.random.default_rng(len(name)).choice(flat.numel(), min(3, flat.numel()), replace=False):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = _loss_fn(model, batch, ts, eps).item()
                flat[i] = old - h
                down = _loss_fn(model, batch, ts, eps).item()
                flat[i] = old
            fd = (up - down) / (2 * h)
            an = p.grad.view(-1)[i].item()
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-2), (name, int(i), fd, an)
            checked += 1
    assert checked > 40


def test_oracle_noise_gives_zero_loss(rng):
    class Oracle(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.zeros(1))

        def forward(self, x, t, region, target=None):
            ab = torch.as_tensor(S.alpha_bar[t.numpy()])[:, None, None, None]
            x0 = torch.as_tensor(np.stack(clean))
            return (x[:, 0] - ab.sqrt() * x0) / (1 - ab).sqrt() + 0 * self.w

    clean = [rng.uniform(-1, 1, (4, 4, 4)) for _ in range(2)]
    batch = [(c, cond(rng)) for c in clean]
    loss = noise_loss(Oracle().double(), LAYOUT, batch, [3, 70], [rng.standard_normal((4, 4, 4)) for _ in clean], S)
    assert loss.item() < 1e-12


def test_training_reduces_loss_on_fixed_batch():
    rng = np.random.default_rng(0)
    model = toy(base=4, seed=1)
    opt = make_optimizer(model, lr=1e-3)
    batch = [(np.full((4, 4, 4), v), cond(rng)) for v in (-0.5, 0.5)]
    ts = np.array([30, 60])
    eps = [np.random.default_rng(i).standard_normal((4, 4, 4)) for i in range(2)]
    start = noise_loss(model, LAYOUT, batch, ts, eps, S).item()
    train_rng = np.random.default_rng(1)
    for _ in range(500):
        train_step(model, opt, batch, S, train_rng, LAYOUT)
    assert noise_loss(model, LAYOUT, batch, ts, eps, S).item() < start


def test_train_step_rejects_empty_batch():
    model = toy()
    with pytest.raises(InvalidArgument):
        train_step(model, make_optimizer(model), [], S, np.random.default_rng(0), LAYOUT)


def test_control_adapter_identity_and_lock():
    rng = np.random.default_rng(2)
    base = toy(base=4, seed=5)
    adapter = ControlAdapter(base)
    c = cond(rng, target=True)
    x = rng.standard_normal((4, 4, 4))
    out_base = TorchDenoiser(base, LAYOUT)(x, 40, c)
    out_adapter = control_forward(adapter, x, 40, c, LAYOUT)
    assert np.array_equal(out_base, out_adapter)
    with pytest.raises(MissingConditionError):
        control_forward(adapter, x, 40, c.with_target(None), LAYOUT)
    before = {k: v.clone() for k, v in base.state_dict().items()}
    opt = make_optimizer(adapter, lr=1e-3)
    batch = [(rng.uniform(-1, 1, (4, 4, 4)), cond(rng, target=True)) for _ in range(2)]
    adapter.train()
    for _ in range(100):
        train_step(adapter, opt, batch, S, rng, LAYOUT)
    adapter.eval()
    for k, v in base.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert not np.array_equal(control_forward(adapter, x, 40, c, LAYOUT), out_base)
    trainable = {id(p) for p in adapter.trainable_parameters()}
    assert not any(id(p) in trainable for p in base.parameters())


def test_control_adapter_link_perturbation_changes_output():
    rng = np.random.default_rng(4)
    adapter = ControlAdapter(toy(seed=2))
    c = cond(rng, target=True)
    x = rng.standard_normal((4, 4, 4))
    before = control_forward(adapter, x, 20, c, LAYOUT)
    with torch.no_grad():
        adapter.link_mid.bias.fill_(0.1)
    assert not np.array_equal(before, control_forward(adapter, x, 20, c, LAYOUT))


@pytest.mark.parametrize("with_adapter", [False, True])
def test_checkpoint_round_trip(tmp_path, with_adapter):
    model = toy(prediction="v", seed=9)
    if with_adapter:
        model = ControlAdapter(model)
        with torch.no_grad():
            for p in model.trainable_parameters():
                p.add_(0.01)
    path = tmp_path / "m.vdck"
    save_checkpoint(path, model, LAYOUT, S, {"note": "x"})
    loaded, layout, sched, header = load_checkpoint(path, LAYOUT)
    assert layout == LAYOUT and sched.T == S.T and header["meta"] == {"note": "x"}
    assert type(loaded) is type(model)
    for (k, a), (k2, b) in zip(sorted(model.state_dict().items()), sorted(loaded.state_dict().items())):
        assert k == k2 and torch.equal(a, b)
    raw = path.read_bytes()
    assert raw.startswith(b'{') and b'"magic": "VDCK1"' in raw.split(b"\n", 1)[0]


def test_checkpoint_rejections(tmp_path):
    path = tmp_path / "m.vdck"
    save_checkpoint(path, toy(), LAYOUT, S)
    with pytest.raises(LayoutError):
        read_checkpoint(path, ChannelLayout(frequencies=4, num_labels=4))
    raw = path.read_bytes()
    (tmp_path / "t.vdck").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "t.vdck")
    (tmp_path / "b.vdck").write_bytes(raw.replace(b"VDCK1", b"VDCK9", 1))
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "b.vdck")
