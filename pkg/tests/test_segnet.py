import pytest
import torch
import torch.nn as nn

from beal.segnet import SegNetConfig, count_params, init_bound, init_params
from helpers import fd_check


@pytest.fixture(scope="module")
def net():
    return init_params(SegNetConfig(crop_size=128, tiny_mode=True), 0)


def test_output_shapes_and_ranges(net):
    out = net(torch.rand(2, 3, 128, 128))
    assert out.boundary.shape == (2, 1, 128, 128)
    assert out.mask_prob.shape == (2, 2, 128, 128)
    assert out.boundary.min() >= 0 and out.boundary.max() <= 1
    assert out.mask_prob.min() > 0 and out.mask_prob.max() < 1


def test_other_input_size(net):
    out = net(torch.rand(1, 3, 160, 160))
    assert out.boundary.shape[-2:] == (160, 160)
    assert out.mask_prob.shape[-2:] == (160, 160)


def test_indivisible_size_names_required_size(net):
    with pytest.raises(ValueError, match="136x136"):
        net(torch.rand(1, 3, 130, 130))


def test_same_seed_identical_params():
    a = init_params(SegNetConfig(), 5).state_dict()
    b = init_params(SegNetConfig(), 5).state_dict()
    c = init_params(SegNetConfig(), 6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_initial_params_within_bounds(net):
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            assert torch.isfinite(m.weight).all()
            assert m.weight.abs().max() <= init_bound(m)


def test_tiny_mode_is_small():
    tiny = count_params(init_params(SegNetConfig(tiny_mode=True), 0))
    full = count_params(init_params(SegNetConfig(tiny_mode=False), 0))
    assert tiny * 20 < full


@pytest.mark.parametrize("bad", [
    dict(boundary_branch_channels=(32, 32, 2)),
    dict(aspp_rates=(1, 1, 2)),
    dict(aspp_rates=()),
    dict(encoder_depth=1),
    dict(crop_size=100),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SegNetConfig(**bad)


def test_boundary_branch_structure(net):
    br = net.boundary_branch
    convs = [m for m in br.modules() if isinstance(m, nn.Conv2d)]
    assert len(convs) == 3
    for block in (br.conv1, br.conv2):
        kinds = [type(m) for m in block]
        assert kinds == [nn.Conv2d, nn.BatchNorm2d, nn.ReLU]
    assert isinstance(br.conv3, nn.Conv2d) and br.conv3.out_channels == 1


def test_mask_branch_sees_boundary(net):
    """Knocking out the boundary head's last layer must move the mask output."""
    net.eval()
    x = torch.rand(1, 3, 128, 128)
    with torch.no_grad():
        before = net(x).mask_prob.clone()
        saved = net.boundary_branch.conv3.weight.clone(), net.boundary_branch.conv3.bias.clone()
        net.boundary_branch.conv3.weight.zero_()
        net.boundary_branch.conv3.bias.zero_()
        after = net(x).mask_prob
        net.boundary_branch.conv3.weight.copy_(saved[0])
        net.boundary_branch.conv3.bias.copy_(saved[1])
    net.train()
    assert (before - after).abs().max() > 1e-6
    # the mask conv has exactly one extra input channel for the boundary probability
    assert net.mask_branch.in_channels == net.config.decoder_channels + 1


def test_boundary_disabled_variant():
    net = init_params(SegNetConfig(use_boundary=False), 0)
    out = net(torch.rand(1, 3, 64, 64))
    assert out.boundary is None and out.mask_prob.shape == (1, 2, 64, 64)
    assert not any("boundary" in k for k in net.state_dict())


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = init_params(SegNetConfig(crop_size=32), 1).double()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    target = torch.rand(2, 1, 32, 32, dtype=torch.float64)

    def loss():
        out = net(x)
        return ((out.boundary - target) ** 2).mean() + out.mask_prob[:, 1].mean() - out.mask_prob[:, 0].pow(2).mean()

    checks = fd_check(loss, list(net.parameters()), n=10, seed=3)
    for a, fd, rel in checks:
        assert rel <= 1e-3, (a, fd, rel)
    assert sum(a != 0 for a, _, _ in checks) >= 5


def test_gradient_reaches_image(net):
    x = torch.rand(1, 3, 64, 64, requires_grad=True)
    net(x).mask_prob.sum().backward()
    assert x.grad.abs().sum() > 0
