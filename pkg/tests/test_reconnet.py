import pytest
import torch

from flowvad.errors import ConfigError, ShapeError
from flowvad.memaddr import entropy_loss
from flowvad.reconnet import (
    ReconConfig,
    ReconModel,
    build,
    flatten_flow_cube,
    recon_loss,
    total_recon_loss,
    unflatten_flow_cube,
)

SMALL = dict(base_channels=(4, 4, 4, 4), num_slots=6)


@pytest.mark.parametrize(
    "variant,memories,skips",
    [
        ("a", (4,), ()),
        ("b", (4, 3, 2, 1), ()),
        ("c", (4,), (3, 2)),
        ("d", (4, 3, 2, 1), (3, 2)),
        ("e", (4, 3), (3,)),
        ("f", (4, 3, 2), (3, 2)),
    ],
)
def test_variant_layouts(variant, memories, skips):
    cfg = ReconConfig(variant=variant)
    assert cfg.memory_levels == memories
    assert cfg.skip_levels == skips
    assert 1 not in cfg.skip_levels


def test_memory_counts():
    assert ReconConfig(variant="a").num_memories == 1
    assert ReconConfig(variant="b").num_memories == 4
    assert ReconConfig(variant="f").num_memories == 3
    assert ReconConfig(variant="three_mem_two_skip").variant == "f"


def test_outermost_skip_forbidden():
    with pytest.raises(ConfigError):
        ReconConfig(variant="custom", memory_levels=(4,), skip_levels=(3, 2, 1))
    with pytest.raises(ConfigError):
        ReconConfig(variant="c", skip_levels=(3, 2, 1))


def test_config_errors():
    with pytest.raises(ConfigError):
        ReconConfig(variant="z")
    with pytest.raises(ConfigError):
        ReconConfig(levels=3)  # 4 base channels
    with pytest.raises(ConfigError):
        ReconConfig(variant="f", levels=2, base_channels=(4, 8))
    with pytest.raises(ConfigError):
        ReconConfig(lambda_ent=-1)


def test_config_dict_roundtrip():
    cfg = ReconConfig(variant="e", **SMALL)
    assert ReconConfig.from_dict(cfg.to_dict()) == cfg
    custom = ReconConfig(variant="custom", memory_levels=(4, 2), skip_levels=(3,), **SMALL)
    assert ReconConfig.from_dict(custom.to_dict()) == custom


def test_level_sizes_default_flow_model():
    model = build(ReconConfig(variant="f", in_channels=8))
    assert model.level_shapes() == [(32, 32, 32), (16, 16, 64), (8, 8, 128), (4, 4, 256)]
    widths = {int(k): bank.width for k, bank in model.memories.items()}
    assert widths == {4: 256, 3: 128, 2: 64}
    assert all(bank.num_slots == 2000 for bank in model.memories.values())


@pytest.mark.parametrize("variant", list("abcdef"))
def test_shape_preserved(variant):
    model = build(ReconConfig(variant=variant, in_channels=8, **SMALL)).eval()
    y = torch.randn(2, 8, 32, 32)
    out = model(y)
    assert out.y_hat.shape == y.shape
    assert len(out.weight_maps) == model.config.num_memories
    for w in out.weight_maps:
        assert (w >= 0).all()
        assert torch.allclose(w.sum(1), torch.ones_like(w.sum(1)), atol=1e-5)


def test_mnist_mode_shape():
    model = build(ReconConfig(variant="f", in_channels=1, **SMALL)).eval()
    assert model(torch.rand(3, 1, 32, 32)).y_hat.shape == (3, 1, 32, 32)


def test_eval_forward_deterministic():
    model = build(ReconConfig(variant="d", in_channels=8, **SMALL)).eval()
    y = torch.randn(2, 8, 32, 32)
    assert torch.equal(model(y).y_hat, model(y).y_hat)


def test_bad_input_shapes():
    model = build(ReconConfig(in_channels=8, **SMALL))
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 8, 30, 30))
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 2, 32, 32))


def test_recon_loss_examples():
    assert recon_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 0.0])).item() == 0.5
    y = torch.randn(5)
    assert recon_loss(y, y).item() == 0.0
    with pytest.raises(ShapeError):
        recon_loss(torch.zeros(2), torch.zeros(3))


def test_recon_loss_gradient_identity():
    y = torch.randn(6, dtype=torch.float64)
    y_hat = torch.randn(6, dtype=torch.float64, requires_grad=True)
    recon_loss(y, y_hat).backward()
    assert torch.allclose(y_hat.grad, 2 * (y_hat.detach() - y) / 6)


def test_total_recon_loss_composition():
    model = build(ReconConfig(variant="f", in_channels=8, **SMALL))
    y = torch.randn(2, 8, 32, 32)
    out = model(y)
    base = recon_loss(y, out.y_hat)
    assert torch.equal(total_recon_loss(y, out, 1.5, 0.0), 1.5 * base)
    expected = base + 0.1 * entropy_loss(out.weight_maps)
    assert torch.allclose(total_recon_loss(y, out, 1.0, 0.1), expected)
    with pytest.raises(ConfigError):
        total_recon_loss(y, out, -1.0, 0.0)


def test_perfect_reconstruction_one_hot_is_zero():
    from flowvad.reconnet import ReconOutput

    y = torch.randn(1, 2, 4, 4)
    w = torch.zeros(1, 3, 4, 4)
    w[:, 0] = 1
    assert total_recon_loss(y, ReconOutput(y.clone(), [w], {}), 1.0, 2e-4).item() == 0.0


def test_flow_cube_flatten_roundtrip():
    f = torch.randn(3, 4, 2, 8, 8)
    flat = flatten_flow_cube(f)
    assert flat.shape == (3, 8, 8, 8)
    assert torch.equal(flat[:, 2:4], f[:, 1])
    assert torch.equal(unflatten_flow_cube(flat, 4), f)


def test_memory_bottleneck_property():
    """Trained on one pattern class, variant f reconstructs it better than an unseen class."""
    torch.manual_seed(0)
    g = torch.Generator().manual_seed(0)
    base = torch.zeros(1, 1, 32, 32)
    base[..., 8:24, 14:18] = 1.0  # vertical bar
    other = torch.zeros(1, 1, 32, 32)
    other[..., 14:18, 4:28] = 1.0  # horizontal bar
    normal = base + 0.05 * torch.randn(64, 1, 32, 32, generator=g)
    anomal = other + 0.05 * torch.randn(16, 1, 32, 32, generator=g)
    model = ReconModel(ReconConfig(variant="f", in_channels=1, base_channels=(8, 8, 16, 16), num_slots=10))
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    for _ in range(60):
        loss = total_recon_loss(normal, model(normal))
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        e_norm = ((model(normal[:16]).y_hat - normal[:16]) ** 2).mean()
        e_anom = ((model(anomal).y_hat - anomal) ** 2).mean()
    assert e_norm < e_anom
