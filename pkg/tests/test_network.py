import numpy as np
import pytest
import torch

from aide.core import ArchConfig, TrainConfig, ValidationError
from aide.losses import seg_loss
from aide.network import (NonFiniteGradient, build_network, clone_model, forward, gradient_step, load_checkpoint,
                          make_optimizer, make_scheduler, parameter_count, predict, save_checkpoint)

SMALL = ArchConfig(base_channels=4, depth=5)


def test_output_shape_and_normalization(gen):
    for arch in (ArchConfig(base_channels=8), ArchConfig(base_channels=8, modalities=2)):
        model = build_network(arch, 0)
        x = gen.random((2, arch.modalities, 64, 64)).astype(np.float32)
        out = forward(model, x)
        assert out.shape == (2, 2, 64, 64)
        assert torch.allclose(out.sum(1), torch.ones(2, 64, 64), atol=1e-6)
        assert (out >= 0).all() and (out <= 1).all()


@pytest.mark.parametrize("size", [16, 32, 64])
def test_shape_contract(size, gen):
    model = build_network(SMALL, 1)
    assert forward(model, gen.random((1, 1, size, size))).shape == (1, 2, size, size)


def test_input_validation(gen):
    model = build_network(SMALL, 0)
    with pytest.raises(ValidationError):
        forward(model, gen.random((1, 1, 24, 24)))
    with pytest.raises(ValidationError):
        forward(model, gen.random((1, 2, 32, 32)))
    with pytest.raises(ValidationError):
        build_network(SMALL, 0, input_size=(40, 48))


def test_seeded_initialization():
    a, b, c = build_network(SMALL, 5), build_network(SMALL, 5), build_network(SMALL, 6)
    for (_, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))
    # construction must not consume the global torch stream
    torch.manual_seed(0)
    first = torch.rand(3)
    torch.manual_seed(0)
    build_network(SMALL, 9)
    assert torch.equal(torch.rand(3), first)


def test_zero_head_is_uniform(gen):
    model = build_network(SMALL, 0)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    assert torch.allclose(forward(model, gen.random((1, 1, 16, 16))), torch.full((1, 2, 16, 16), 0.5))


def test_forward_is_deterministic_and_eval_mode(gen):
    model = build_network(SMALL, 0)
    x = gen.random((3, 1, 32, 32)).astype(np.float32)
    first = forward(model, x)
    model.train()
    assert torch.equal(forward(model, x), first)
    assert model.training  # mode restored
    assert np.allclose(predict(model, x, batch_size=2), first.double().numpy(), atol=1e-6)


def test_multimodal_streams_are_separate():
    model = build_network(ArchConfig(base_channels=4, modalities=3), 0)
    assert len(model.streams) == 3
    x = torch.rand(1, 3, 16, 16)
    y = x.clone()
    y[:, 2] = torch.rand(16, 16)
    assert not torch.equal(forward(model, x), forward(model, y))


def test_tiny_network_gradient_matches_finite_differences():
    arch = ArchConfig(base_channels=1, growth=1, depth=5)
    model = build_network(arch, 3).double()
    assert parameter_count(model) <= 500
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64)
    y = (torch.rand(2, 16, 16, generator=g) < 0.4).double()
    model.train()

    def loss_fn():
        return seg_loss(model(x), y).scalar

    model.zero_grad()
    loss_fn().backward()
    params = [p for p in model.parameters()]
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).clone()
    numeric = torch.empty_like(analytic)
    h = 1e-6
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric[k] = (up - down) / (2 * h)
                k += 1
    err = (analytic - numeric).abs() / torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                                                     torch.tensor(1e-6))
    assert err.max().item() < 1e-3


class TestGradientStep:
    def test_quadratic(self):
        w = torch.nn.Parameter(torch.zeros(()))
        model = torch.nn.Module()
        model.w = w
        gradient_step(model, lambda: (w - 3) ** 2, lr=0.1)
        assert w.item() == pytest.approx(0.6)

    def test_constant_loss_leaves_parameters(self):
        model = build_network(SMALL, 0)
        before = [p.clone() for p in model.parameters()]
        gradient_step(model, lambda: torch.tensor(0.0), lr=0.1)
        assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))

    def test_non_finite_gradient(self):
        w = torch.nn.Parameter(torch.zeros(()))
        model = torch.nn.Module()
        model.w = w
        with pytest.raises(NonFiniteGradient, match="'w'"):
            gradient_step(model, lambda: torch.sqrt(w), lr=0.1)
        assert w.item() == 0.0

    def test_optimizer_path(self):
        model = build_network(SMALL, 0)
        opt = make_optimizer(model, TrainConfig(optimizer="adam", lr=1e-3))
        assert isinstance(opt, torch.optim.Adam)
        x, y = torch.rand(2, 1, 16, 16), (torch.rand(2, 16, 16) > 0.5).float()
        l0 = gradient_step(model, lambda: seg_loss(model(x), y).scalar, optimizer=opt)
        for _ in range(5):
            last = gradient_step(model, lambda: seg_loss(model(x), y).scalar, optimizer=opt)
        assert last < l0
        with pytest.raises(ValueError):
            gradient_step(model, lambda: torch.tensor(0.0))

    def test_cosine_schedule(self):
        model = build_network(SMALL, 0)
        cfg = TrainConfig(lr=0.1, lr_schedule="cosine", Q=10, q_w=5)
        opt = make_optimizer(model, cfg)
        sched = make_scheduler(opt, cfg)
        for _ in range(10):
            opt.step()
            sched.step()
        assert opt.param_groups[0]["lr"] == pytest.approx(0.0, abs=1e-12)
        assert make_scheduler(opt, TrainConfig()) is None


def test_checkpoint_round_trip(tmp_path, gen):
    model = build_network(ArchConfig(base_channels=4, modalities=2, depth=4), 11)
    x = torch.rand(2, 2, 32, 32)
    model.train()
    model(x)  # move batch-norm running statistics off their defaults
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.arch == model.arch
    assert torch.equal(forward(back, x), forward(model, x))
    assert torch.equal(forward(clone_model(model), x), forward(model, x))
    save_checkpoint(back, tmp_path / "n.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "bad.ckpt")
