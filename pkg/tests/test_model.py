import numpy as np
import pytest
import torch

from csdkit.model import (
    CsdModel,
    CsdNet,
    FusionConfig,
    ModalityBlock,
    MultiHeadAttention,
    MultimodalBlock,
    TokenGeometry,
    load_checkpoint,
    save_checkpoint,
)
from csdkit.backbones import ToyAudioBackbone, ToyVisualBackbone
from csdkit.synth import make_segments
from csdkit.types import ValidationError


def test_fusion_config_validation():
    FusionConfig()
    with pytest.raises(ValidationError):
        FusionConfig(embed_dim=30, num_heads=8)  # not divisible
    with pytest.raises(ValidationError):
        FusionConfig(fusion="middle")
    with pytest.raises(ValidationError):
        FusionConfig(num_blocks=0)


def test_attention_shapes_cross_dims():
    attn = MultiHeadAttention(q_dim=10, kv_dim=12, attn_dim=12, num_heads=2)
    q = torch.randn(3, 5, 10)
    kv = torch.randn(3, 9, 12)
    out = attn(q, kv, kv)
    assert out.shape == (3, 5, 12)  # query count, attention width


def test_attention_weights_are_convex():
    # with value = identity-ish content, output rows stay inside the
    # convex hull of the value rows; cheap proxy: constant values in,
    # constant out
    attn = MultiHeadAttention(8, 8, 8, 2).double()
    q = torch.randn(1, 4, 8, dtype=torch.float64)
    v = torch.ones(1, 6, 8, dtype=torch.float64)
    out = attn(q, v, v)
    expected = attn(q, v[:, :1], v[:, :1])  # any convex mix of equal rows
    assert torch.allclose(out, expected, atol=1e-10)


def test_modality_block_early_takes_other_count():
    block = ModalityBlock(self_dim=12, other_dim=10, out_dim=16, num_heads=2, early=True)
    self_tokens = torch.randn(2, 9, 12)
    other_tokens = torch.randn(2, 4, 10)
    out = block(self_tokens, other_tokens)
    assert out.shape == (2, 4, 16)  # count from the querying modality


def test_modality_block_late_keeps_own_count():
    block = ModalityBlock(self_dim=12, other_dim=10, out_dim=16, num_heads=2, early=False)
    out = block(torch.randn(2, 9, 12), torch.randn(2, 4, 10))
    assert out.shape == (2, 9, 16)


def test_multimodal_block_residual_path():
    block = MultimodalBlock(16, 2)
    x = torch.randn(2, 5, 16)
    assert block(x).shape == x.shape


def _mini_cfg(**kw):
    defaults = dict(embed_dim=16, num_blocks=2, num_heads=2, audio_dim=12, visual_dim=8)
    defaults.update(kw)
    return FusionConfig(**defaults)


def test_net_output_shape_and_batching():
    net = CsdNet(_mini_cfg()).double()
    a = torch.randn(4, 6, 12, dtype=torch.float64)
    v = torch.randn(4, 3, 8, dtype=torch.float64)
    out = net(a, v)
    assert out.shape == (4, 7, 3)
    # single-sample call agrees with the batched rows
    for i in range(4):
        single = net(a[i], v[i])
        assert torch.allclose(single[0], out[i], atol=1e-12)


def test_net_dim_guards():
    net = CsdNet(_mini_cfg())
    with pytest.raises(ValidationError):
        net(torch.randn(1, 6, 13), torch.randn(1, 3, 8))
    with pytest.raises(ValidationError):
        net(torch.randn(1, 6, 12), torch.randn(1, 3, 9))


def test_no_cls_needs_geometry():
    with pytest.raises(ValidationError):
        CsdNet(_mini_cfg(use_cls=False))
    net = CsdNet(_mini_cfg(use_cls=False), TokenGeometry(6, 3))
    # flatten head sized by total token count x embed dim
    assert net.classifier.in_features == 9 * 16
    out = net(torch.randn(2, 6, 12), torch.randn(2, 3, 8))
    assert out.shape == (2, 7, 3)
    with pytest.raises(ValidationError):
        net(torch.randn(2, 5, 12), torch.randn(2, 3, 8))  # wrong count


def test_cls_permutation_invariance_quick():
    torch.manual_seed(0)
    net = CsdNet(_mini_cfg()).double()
    a = torch.randn(1, 6, 12, dtype=torch.float64)
    v = torch.randn(1, 5, 8, dtype=torch.float64)
    base = net(a, v)
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        pa = torch.randperm(6, generator=g)
        pv = torch.randperm(5, generator=g)
        out = net(a[:, pa], v[:, pv])
        assert torch.allclose(out, base, rtol=1e-9, atol=1e-12)


def test_no_cls_flatten_head_is_order_sensitive():
    # the flatten readout intentionally loses permutation invariance;
    # this guards against the CLS path and the flatten path being
    # accidentally wired the same way
    torch.manual_seed(1)
    net = CsdNet(_mini_cfg(use_cls=False), TokenGeometry(6, 3)).double()
    a = torch.randn(1, 6, 12, dtype=torch.float64)
    v = torch.randn(1, 3, 8, dtype=torch.float64)
    base = net(a, v)
    perm = torch.tensor([3, 0, 1, 2, 5, 4])
    assert not torch.allclose(net(a[:, perm], v), base, rtol=1e-4)


def test_early_vs_late_differ():
    torch.manual_seed(2)
    a = torch.randn(1, 6, 12)
    v = torch.randn(1, 3, 8)
    torch.manual_seed(3)
    early = CsdNet(_mini_cfg())(a, v)
    torch.manual_seed(3)
    late = CsdNet(_mini_cfg(fusion="late"))(a, v)
    assert not torch.allclose(early, late)


def test_gradients_flow_everywhere():
    net = CsdNet(_mini_cfg()).double()
    a = torch.randn(2, 6, 12, dtype=torch.float64)
    v = torch.randn(2, 3, 8, dtype=torch.float64)
    loss = net(a, v).square().sum()
    loss.backward()
    for name, p in net.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name


# --- checkpointing ----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    net = CsdNet(_mini_cfg()).double()
    path = tmp_path / "net.pt"
    save_checkpoint(net, path, extra={"note": "x"})
    loaded, extra = load_checkpoint(path)
    loaded = loaded.double()
    assert extra == {"note": "x"}
    a = torch.randn(1, 6, 12, dtype=torch.float64)
    v = torch.randn(1, 3, 8, dtype=torch.float64)
    assert torch.allclose(net(a, v), loaded(a, v))


def test_checkpoint_config_mismatch_is_loud(tmp_path):
    net = CsdNet(_mini_cfg())
    path = tmp_path / "net.pt"
    save_checkpoint(net, path)
    with pytest.raises(ValidationError, match="embed_dim"):
        load_checkpoint(path, expected=_mini_cfg(embed_dim=32))


def test_checkpoint_preserves_geometry(tmp_path):
    net = CsdNet(_mini_cfg(use_cls=False), TokenGeometry(6, 3))
    path = tmp_path / "net.pt"
    save_checkpoint(net, path)
    loaded, _ = load_checkpoint(path)
    assert loaded.geometry == TokenGeometry(6, 3)


# --- full model wrapper -----------------------------------------------------


@pytest.fixture(scope="module")
def tiny_segments():
    return make_segments(6, seed=9, image_size=24, mic_count=2, max_streams=3)


def test_csd_model_forward(tiny_segments):
    model = CsdModel(FusionConfig(embed_dim=32, num_blocks=2, num_heads=4))
    logits = model.forward_segments(tiny_segments)
    assert logits.shape == (6, 7, 3)


def test_csd_model_rejects_mixed_geometry(tiny_segments):
    model = CsdModel(FusionConfig(embed_dim=32, num_blocks=2, num_heads=4))
    other = make_segments(1, seed=10, image_size=24, mic_count=1, max_streams=3)
    with pytest.raises(ValidationError):
        model.forward_segments(list(tiny_segments[:2]) + other)


def test_parameter_groups_disjoint_and_complete():
    model = CsdModel(
        FusionConfig(embed_dim=32, num_blocks=2, num_heads=4),
        audio_backbone=ToyAudioBackbone(trainable=True),
        visual_backbone=ToyVisualBackbone(trainable=True),
    )
    groups = model.parameter_groups()
    ids = [sorted(id(p) for p in ps) for ps in groups.values()]
    flat = [i for group in ids for i in group]
    assert len(flat) == len(set(flat))  # pairwise disjoint
    all_params = {id(p) for p in model.parameters() if p.requires_grad}
    assert set(flat) == all_params  # nothing missing, nothing extra
    assert len(groups["audio"]) == 1
    assert len(groups["visual"]) == 1
