import pytest
import torch

from fslab.bpm import BpmConfig
from fslab.datamodel import ContractError
from fslab.encoder import BackboneConfig
from fslab.model import DuplexNet, NetConfig


def _small_net(seed=0, **kw):
    torch.manual_seed(seed)
    return DuplexNet(NetConfig(backbone=BackboneConfig(stem_stride=1), **kw)).double()


def test_forward_returns_both_heads_at_input_size():
    torch.manual_seed(0)
    net = DuplexNet()
    x = torch.rand(2, 3, 32, 32)
    pred = net(x, x)
    assert pred.s_a.shape == pred.s_m.shape == (2, 1, 32, 32)
    assert torch.all((pred.s_a >= 0) & (pred.s_a <= 1))


def test_forward_rejects_bad_inputs():
    net = DuplexNet()
    with pytest.raises(ContractError):
        net(torch.rand(1, 3, 40, 40), torch.rand(1, 3, 40, 40))
    with pytest.raises(ContractError):
        net(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 64, 64))


def test_stage_parameter_groups():
    net = DuplexNet()
    spatial = {id(p) for p in net.stage_parameters("spatial-pretrain")}
    temporal = {id(p) for p in net.stage_parameters("temporal-pretrain")}
    joint = {id(p) for p in net.stage_parameters("joint")}
    assert spatial and temporal and not (spatial & temporal)
    assert joint == {id(p) for p in net.parameters()}
    assert {id(p) for p in net.decoder_a.parameters()} <= spatial
    assert {id(p) for p in net.motion.parameters()} <= temporal


def test_end_to_end_gradient_matches_central_differences():
    net = _small_net(bpm=BpmConfig(n=2))
    g = torch.Generator().manual_seed(1)
    frame = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    flow = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    mask = (torch.rand(1, 1, 8, 8, generator=g) > 0.5).double()
    from fslab.decoder import total_loss

    params = [net.rcam.levels[1].theta.weight, net.bpm.units[0].update_f.fuse[0].weight, net.decoder_a.head.weight]

    def loss():
        return total_loss(net(frame, flow), mask)

    net.zero_grad()
    loss().backward()
    h = 1e-4
    for p in params:
        flat = p.data.view(-1)
        for idx in torch.randperm(flat.numel(), generator=torch.Generator().manual_seed(2))[:4]:
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                lp = loss().item()
                flat[idx] = orig - h
                lm = loss().item()
                flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            ad = p.grad.view(-1)[idx].item()
            assert abs(fd - ad) <= 1e-2 * max(abs(fd), abs(ad), 1e-6)
