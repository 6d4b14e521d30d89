import pytest
import torch
import torch.nn as nn

from segunet.adapter import (
    Adapter,
    AdapterConfig,
    format_report,
    freeze_backbone,
    insert_adapters,
    trainable_fraction,
    trainable_parameter_report,
)
from segunet.backbone import build_encoder, preset
from segunet.errors import ConfigError


def test_zero_init_is_identity():
    plain = build_encoder(preset("desktiny"), seed=0).eval()
    adapted = build_encoder(preset("desktiny"), seed=0).eval()
    insert_adapters(adapted, AdapterConfig(4))
    x = torch.rand(1, 3, 64, 64)
    for a, b in zip(plain(x), adapted(x)):
        assert torch.equal(a, b)


def test_one_adapter_per_block():
    enc = insert_adapters(build_encoder(preset("desk")))
    assert len(enc.adapters) == len(enc.blocks)
    for ad, dim in zip(enc.adapters, enc.block_dims()):
        assert ad.down.in_features == dim and ad.up.out_features == dim


def test_bottleneck_resolution():
    assert AdapterConfig().resolve(32) == 16
    assert AdapterConfig().resolve(144) == 32
    assert AdapterConfig(8).resolve(16) == 8
    with pytest.raises(ConfigError):
        AdapterConfig(16).resolve(16)
    with pytest.raises(ConfigError):
        AdapterConfig(0).resolve(16)


def test_freeze_only_adapters_trainable():
    enc = freeze_backbone(insert_adapters(build_encoder(preset("desktiny"))))
    for name, p in enc.named_parameters():
        assert p.requires_grad == name.startswith("adapters.")
    assert 0 < trainable_fraction(enc) < 0.2


def test_freeze_requires_adapters():
    with pytest.raises(ConfigError):
        freeze_backbone(build_encoder(preset("desktiny")))


def test_adapter_gradient_flows():
    ad = Adapter(8, 2)
    nn.init.normal_(ad.up.weight)
    ad(torch.randn(4, 8)).sum().backward()
    assert ad.down.weight.grad.abs().sum() > 0


def test_report():
    enc = freeze_backbone(insert_adapters(build_encoder(preset("desktiny"))))
    rows = trainable_parameter_report(enc)
    text = format_report(rows)
    assert "adapters.0.down.weight" in text and "trainable=" in text
    assert sum(r.count for r in rows) == sum(p.numel() for p in enc.parameters())


def test_closed_form_counts():
    import oracles
    from segunet.adapter import insertion_points

    assert sum(p.numel() for p in Adapter(144, 32).parameters()) == 9392 == oracles.adapter_count(144, 32)
    enc = build_encoder(preset("desk"))
    assert insertion_points(enc) == [f"blocks.{i}" for i in range(5)]
    insert_adapters(enc, AdapterConfig(16))
    freeze_backbone(enc)
    dims = [32, 32, 64, 128, 128]  # width entering each block for depths (1, 1, 2, 1)
    n_ad = sum(oracles.adapter_count(d, 16) for d in dims)
    n_all = oracles.hiera_count((32, 64, 128, 256), (1, 1, 2, 1)) + n_ad
    assert trainable_fraction(enc) == pytest.approx(n_ad / n_all, abs=1e-15)
