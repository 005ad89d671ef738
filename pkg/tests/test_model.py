import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from keyrestore.config import ModelConfig
from keyrestore.model import (
    FeatureExtractor,
    KeyframeRestorer,
    OutputHead,
    TemporalUpsample,
    assemble_prototype,
    extract_keyframe_stack,
)


def tiny_config(**overrides):
    base = dict(
        H=64, W=64, C=8, N=2, head_count=2, feature_extractor_widths=(8, 12)
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------- keyframe stack


def test_keyframe_stack_t9():
    clip = torch.arange(9, dtype=torch.float32).reshape(9, 1, 1, 1).expand(9, 2, 2, 3)
    keys = extract_keyframe_stack(clip)
    assert keys.shape == (3, 2, 2, 3)
    assert keys[:, 0, 0, 0].tolist() == [0.0, 4.0, 8.0]


def test_keyframe_stack_t5():
    clip = torch.arange(5, dtype=torch.float32).reshape(5, 1, 1, 1).expand(5, 2, 2, 3)
    assert extract_keyframe_stack(clip)[:, 0, 0, 0].tolist() == [0.0, 2.0, 4.0]


def test_keyframe_stack_identical_frames():
    clip = torch.rand(1, 4, 4, 3).expand(9, 4, 4, 3)
    keys = extract_keyframe_stack(clip)
    assert torch.equal(keys[0], keys[1]) and torch.equal(keys[1], keys[2])


# -------------------------------------------------------- feature extractor


def test_extractor_published_shape():
    fe = FeatureExtractor(ModelConfig()).eval()
    with torch.no_grad():
        out = fe(torch.rand(3, 256, 256, 3))
    assert tuple(out.shape) == (3, 64, 64, 96)


def test_extractor_desk_shape():
    fe = FeatureExtractor(tiny_config(C=96)).eval()
    with torch.no_grad():
        out = fe(torch.rand(3, 64, 64, 3))
    assert tuple(out.shape) == (3, 16, 16, 96)


def test_extractor_zero_input_zero_activations():
    fe = FeatureExtractor(tiny_config()).eval()
    with torch.no_grad():
        for mod in fe.modules():
            if isinstance(mod, torch.nn.Conv2d):
                mod.bias.zero_()
        out = fe(torch.zeros(3, 64, 64, 3))
    assert torch.equal(out, torch.zeros_like(out))


def test_extractor_rejects_bad_spatial_dims():
    fe = FeatureExtractor(tiny_config())
    with pytest.raises(ValueError, match="divide by 4"):
        fe(torch.rand(3, 30, 64, 3))


# ------------------------------------------------------------------ encoder


def test_encode_stage_resolutions():
    cfg = ModelConfig(H=256, W=256, N=2)  # C=96, M=4, heads 3
    model = KeyframeRestorer(cfg)
    x = torch.randn(1, 3, 64, 64, 96)
    with torch.no_grad():
        pre, post = model.encoder(x)
    assert [p.shape[-2] for p in pre] == [64, 32, 16, 8]
    assert [p.shape[-2] for p in post] == [32, 16, 8, 8]
    assert torch.equal(pre[3], post[3])
    assert all(p.shape[-1] == 96 for p in pre)


def test_encoder_depth_matches_n():
    model = KeyframeRestorer(tiny_config(N=2))
    assert all(len(stage) == 2 for stage in model.encoder.stages)
    model6 = KeyframeRestorer(tiny_config(N=4))
    assert all(len(stage) == 4 for stage in model6.encoder.stages)


def test_encoder_identity_blocks_reduce_to_downsample_chain():
    cfg = tiny_config()
    model = KeyframeRestorer(cfg)
    with torch.no_grad():
        for stage in model.encoder.stages:
            for block in stage:
                block.attn.proj.weight.zero_()
                block.attn.proj.bias.zero_()
                block.mlp.fc2.weight.zero_()
                block.mlp.fc2.bias.zero_()
    x = torch.randn(1, 3, 16, 16, 8)
    with torch.no_grad():
        pre, post = model.encoder(x)
    assert torch.allclose(pre[0], x, atol=1e-6)
    expected = model.encoder.downsamples[0](x)
    assert torch.allclose(post[0], expected, atol=1e-6)
    assert torch.allclose(pre[1], expected, atol=1e-6)


# ------------------------------------------------------- temporal upsample


def test_tu_shape_t9():
    tu = TemporalUpsample(ModelConfig(H=64, W=64, N=2))
    out = tu(torch.randn(3, 8, 8, 96))
    assert tuple(out.shape) == (6, 8, 8, 96)


def test_tu_shape_t5():
    tu = TemporalUpsample(tiny_config(T=5))
    out = tu(torch.randn(3, 4, 4, 8))
    assert tuple(out.shape) == (2, 4, 4, 8)


def test_tu_zero_weights_zero_output():
    tu = TemporalUpsample(tiny_config())
    with torch.no_grad():
        tu.deconv.weight.zero_()
        tu.deconv.bias.zero_()
    out = tu(torch.randn(3, 4, 4, 8))
    assert torch.equal(out, torch.zeros_like(out))


def test_tu_rejects_wrong_frame_count():
    tu = TemporalUpsample(tiny_config())
    with pytest.raises(ValueError, match="3 keyframe frames"):
        tu(torch.randn(4, 4, 4, 8))


# ------------------------------------------------------ prototype assembly


def test_assemble_order_t9():
    keys = torch.stack([torch.full((2, 2, 1), v) for v in (1.0, 2.0, 3.0)])
    filler = torch.stack([torch.full((2, 2, 1), v) for v in (10.0, 11.0, 12.0, 13.0, 14.0, 15.0)])
    proto = assemble_prototype(keys, filler)
    assert proto[:, 0, 0, 0].tolist() == [1, 10, 11, 12, 2, 13, 14, 15, 3]


def test_assemble_zero_filler_keeps_keyframe_slots():
    keys = torch.rand(3, 4, 4, 8)
    proto = assemble_prototype(keys, torch.zeros(6, 4, 4, 8))
    assert torch.equal(proto[[0, 4, 8]], keys)
    others = [t for t in range(9) if t not in (0, 4, 8)]
    assert torch.equal(proto[others], torch.zeros(6, 4, 4, 8))


def test_assemble_then_select_recovers_keyframes():
    keys = torch.rand(3, 2, 2, 4)
    filler = torch.rand(2, 2, 2, 4)  # T=5
    proto = assemble_prototype(keys, filler)
    assert proto.shape[0] == 5
    assert torch.equal(proto[[0, 2, 4]], keys)


def test_assemble_shape_errors():
    with pytest.raises(ValueError, match="3 keyframe slots"):
        assemble_prototype(torch.rand(2, 2, 2, 4), torch.rand(2, 2, 2, 4))
    with pytest.raises(ValueError, match="even"):
        assemble_prototype(torch.rand(3, 2, 2, 4), torch.rand(3, 2, 2, 4))
    with pytest.raises(ValueError, match="do not align"):
        assemble_prototype(torch.rand(3, 2, 2, 4), torch.rand(2, 4, 4, 4))


# ------------------------------------------------------------------ decoder


def test_decoder_stage_resolutions_components_walk():
    cfg = ModelConfig(H=256, W=256, C=8, N=2, head_count=2, feature_extractor_widths=(8, 12))
    model = KeyframeRestorer(cfg).eval()
    x = torch.rand(1, 3, 256, 256, 3)
    resolutions = {}
    hooks = []

    def record(depth):
        def hook(mod, args):
            resolutions.setdefault(depth, tuple(args[0].shape[-3:-1]))
            return None
        return hook

    for i, up in enumerate(model.decoder.upsamples):
        hooks.append(up.register_forward_pre_hook(record(3 - i)))
    with torch.no_grad():
        feats = model.feature_extractor(x)
        pre, post = model.encoder(feats)
        proto = assemble_prototype(post[3], model.bottleneck_tu(post[3]))
        decoded = model.decoder(pre, proto)
        out = model.output_head(decoded)
    for h in hooks:
        h.remove()
    assert resolutions == {3: (8, 8), 2: (16, 16), 1: (32, 32)}
    assert tuple(decoded.shape) == (1, 9, 64, 64, 8)
    assert tuple(out.shape) == (1, 9, 256, 256, 3)


def test_output_head_published_shape():
    head = OutputHead(ModelConfig()).eval()
    with torch.no_grad():
        out = head(torch.rand(9, 64, 64, 96))
    assert tuple(out.shape) == (9, 256, 256, 3)


def test_output_head_desk_shape():
    head = OutputHead(tiny_config(C=96)).eval()
    with torch.no_grad():
        out = head(torch.rand(9, 16, 16, 96))
    assert tuple(out.shape) == (9, 64, 64, 3)


def test_output_head_constant_map_stays_constant_through_shuffle():
    cfg = tiny_config()
    head = OutputHead(cfg).eval()
    shuffle = torch.nn.PixelShuffle(2)
    x = torch.full((1, 4 * cfg.C, 6, 6), 0.7)
    out = shuffle(x)
    assert tuple(out.shape) == (1, cfg.C, 12, 12)
    assert torch.equal(out, torch.full_like(out, 0.7))


# --------------------------------------------------------------- full model


def test_restore_event_desk_shape_and_determinism():
    model = KeyframeRestorer(tiny_config())
    keys = torch.rand(3, 64, 64, 3)
    a = model.restore_event(keys)
    b = model.restore_event(keys)
    assert tuple(a.shape) == (9, 64, 64, 3)
    assert torch.equal(a, b)


def test_forward_rejects_bad_inputs():
    model = KeyframeRestorer(tiny_config())
    with pytest.raises(ValueError, match="3 stacked keyframes"):
        model(torch.rand(4, 64, 64, 3))
    with pytest.raises(ValueError, match="model expects"):
        model(torch.rand(3, 32, 32, 3))


def test_keyframe_slots_of_prototype_match_bottleneck():
    model = KeyframeRestorer(tiny_config()).eval()
    keys = torch.rand(1, 3, 64, 64, 3)
    collect = {}
    with torch.no_grad():
        feats = model.feature_extractor(keys)
        _, post = model.encoder(feats)
        model(keys, collect=collect)
    proto = collect["prototype"]
    mid = model.cfg.middle_index
    assert torch.equal(proto[:, [0, mid, model.cfg.T - 1]], post[3])


@pytest.mark.parametrize(
    "cross,tu", [(False, False), (True, False), (False, True), (True, True)]
)
def test_ablation_configs_keep_shape_contract(cross, tu):
    cfg = tiny_config(cross_attention_skip=cross, tu_residual_skip=tu)
    model = KeyframeRestorer(cfg)
    out = model.restore_event(torch.rand(3, 64, 64, 3))
    assert tuple(out.shape) == (9, 64, 64, 3)


def test_tu_weight_sharing_scopes():
    model = KeyframeRestorer(tiny_config()).eval()
    keys = torch.rand(1, 3, 64, 64, 3)

    def run():
        collect = {}
        with torch.no_grad():
            model(keys, collect=collect)
        return collect

    base = run()
    with torch.no_grad():
        model.decoder.skip_tu.deconv.weight.add_(0.5)
    skip_bumped = run()
    for d in (0, 1, 2):
        assert not torch.equal(base[f"tu_residual_d{d}"], skip_bumped[f"tu_residual_d{d}"])
    assert torch.equal(base["prototype"], skip_bumped["prototype"])
    with torch.no_grad():
        model.bottleneck_tu.deconv.weight.add_(0.5)
    both_bumped = run()
    assert not torch.equal(skip_bumped["prototype"], both_bumped["prototype"])
    for d in (0, 1, 2):
        assert torch.equal(skip_bumped[f"tu_residual_d{d}"], both_bumped[f"tu_residual_d{d}"])


@settings(max_examples=8, deadline=None)
@given(
    t=st.sampled_from([5, 7, 9]),
    c=st.sampled_from([4, 8]),
    heads=st.sampled_from([1, 2]),
    m=st.sampled_from([1, 2, 4]),
    cross=st.booleans(),
    tu=st.booleans(),
)
def test_shape_contract_over_random_valid_configs(t, c, heads, m, cross, tu):
    cfg = ModelConfig(
        T=t, H=32, W=32, M=m, C=c, N=2, head_count=heads,
        feature_extractor_widths=(4, 6),
        cross_attention_skip=cross, tu_residual_skip=tu,
    )
    model = KeyframeRestorer(cfg)
    out = model.restore_event(torch.rand(3, 32, 32, 3))
    assert tuple(out.shape) == (t, 32, 32, 3)


def test_config_validation():
    with pytest.raises(ValueError, match="odd"):
        ModelConfig(T=8)
    with pytest.raises(ValueError, match="even"):
        ModelConfig(N=3)
    with pytest.raises(ValueError, match="divisible by 32"):
        ModelConfig(H=100)
    with pytest.raises(ValueError, match="head_count"):
        ModelConfig(C=10, head_count=3)


def test_full_model_gradcheck_small_subset():
    """Tiny full model in double precision: autograd parameter gradients vs
    central finite differences on a random 100-parameter subset.

    The network is piecewise smooth (leaky-relu, max-pool), so a fixed step
    can straddle a kink; each coordinate therefore gets a shrinking-step
    ladder and must agree within 1e-3 relative (plus a small absolute floor
    for near-zero gradients) at some step size, which only holds when the
    finite differences converge to the analytic value.
    """
    torch.manual_seed(0)
    cfg = tiny_config()
    model = KeyframeRestorer(cfg).double()
    assert sum(p.numel() for p in model.parameters()) <= 50_000
    model.eval()  # frozen BN statistics keep the loss a pure function
    keys = torch.rand(3, 64, 64, 3, dtype=torch.float64)
    probe = torch.randn(9, 64, 64, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def loss_value():
        with torch.no_grad():
            return float((model(keys) * probe).sum())

    model.zero_grad()
    ((model(keys) * probe).sum()).backward()

    rng = np.random.default_rng(2)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    picks = []
    for _ in range(100):
        n, p = named[rng.integers(len(named))]
        picks.append((n, int(rng.integers(p.numel()))))
    analytic = np.array(
        [dict(model.named_parameters())[n].grad.view(-1)[i].item() for n, i in picks]
    )

    def agrees(a, fd):
        return abs(a - fd) <= 1e-6 + 1e-3 * max(abs(a), abs(fd))

    failures = []
    fd = oracles.fd_gradient_subset(loss_value, model.named_parameters(), picks, eps=1e-8)
    for j, (name, idx) in enumerate(picks):
        if agrees(analytic[j], fd[j]):
            continue
        for eps in (2.5e-9, 6.25e-10):
            refined = oracles.fd_gradient_subset(
                loss_value, model.named_parameters(), [(name, idx)], eps=eps
            )[0]
            if agrees(analytic[j], refined):
                break
        else:
            failures.append((name, idx, analytic[j], fd[j]))
    assert not failures, failures
