import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ltpretrain.data import BoundingBox
from ltpretrain.errors import ContractError
from ltpretrain.models import (
    Backbone,
    DetectionHead,
    Generator,
    ModelConfig,
    MomentumPair,
    PretrainModel,
    ProjectionHead,
    decode_deltas,
    detection_head_forward,
    ema_update,
    encode,
    encode_deltas,
    extract_proposal_features,
    generate,
    roi_pool,
    zero_init_,
)

CFG = ModelConfig()


def test_stage_shapes_match_calculator():
    out = encode(Backbone(CFG), torch.rand(2, 3, 64, 64))
    size = oracles.conv_out(64, 3, 2, 1)  # stem
    expected = []
    for _ in CFG.backbone_channels:
        size = oracles.conv_out(size, 3, 2, 1)
        expected.append(size)
    assert expected == [16, 8, 4, 2]
    assert [f.shape[-1] for f in out.stage_features] == expected
    assert [f.shape[1] for f in out.stage_features] == list(CFG.backbone_channels)
    assert out.pooled.shape == (2, 256)
    assert CFG.stage_sizes() == expected


def test_zero_encoder_gives_zero_features():
    out = encode(zero_init_(Backbone(CFG)), torch.zeros(1, 3, 64, 64))
    assert all(torch.count_nonzero(f) == 0 for f in out.stage_features)


def test_identical_items_identical_features():
    x = torch.rand(1, 3, 64, 64).repeat(2, 1, 1, 1)
    out = encode(Backbone(CFG), x)
    for f in out.stage_features:
        assert torch.equal(f[0], f[1])


def test_encoder_shape_contract():
    with pytest.raises(ContractError, match="3 x 64 x 64"):
        encode(Backbone(CFG), torch.rand(1, 3, 32, 32))


class TestGenerator:
    def test_shape_matches_calculator(self):
        g = Generator(CFG)
        size = 2
        for layer in g.net:
            if isinstance(layer, torch.nn.ConvTranspose2d):
                size = oracles.deconv_out(size, 4, layer.stride[0], layer.padding[0])
        assert size == 64
        assert generate(g, torch.rand(2, 256, 2, 2)).shape == (2, 3, 64, 64)

    def test_channel_pattern(self):
        g = Generator(CFG)
        convs = [m for m in g.net if isinstance(m, torch.nn.ConvTranspose2d)]
        assert [(c.in_channels, c.out_channels) for c in convs] == [(256, 64), (64, 32), (32, 8), (8, 3)]
        assert all(c.kernel_size == (4, 4) for c in convs)
        wide = ModelConfig(backbone_channels=(256, 512, 1024, 2048))
        assert wide.resolved_generator_widths() == (512, 256, 64)

    def test_zero_generator(self):
        assert torch.count_nonzero(generate(zero_init_(Generator(CFG)), torch.zeros(1, 256, 2, 2))) == 0

    def test_contract(self):
        with pytest.raises(ContractError):
            generate(Generator(CFG), torch.rand(1, 128, 2, 2))


class TestEma:
    def _pair(self, m, kval=1.0, qval=0.0):
        q, k = torch.nn.Linear(3, 2).double(), torch.nn.Linear(3, 2).double()
        for p in q.parameters():
            torch.nn.init.constant_(p, qval)
        for p in k.parameters():
            torch.nn.init.constant_(p, kval)
        return MomentumPair(q, k, m)

    def test_m_one_keeps_key(self):
        pair = ema_update(self._pair(1.0, 0.3, 0.7))
        assert all(torch.all(p == 0.3) for p in pair.momentum.parameters())

    def test_m_zero_copies(self):
        pair = ema_update(self._pair(0.0, 0.3, 0.7))
        assert all(torch.all(p == 0.7) for p in pair.momentum.parameters())

    def test_single_step(self):
        pair = ema_update(self._pair(0.999))
        assert all(torch.allclose(p, torch.tensor(0.999, dtype=torch.float64)) for p in pair.momentum.parameters())

    def test_closed_form(self):
        a, b, m = -0.4, 1.3, 0.97
        pair = self._pair(m, kval=b, qval=a)
        for k in range(1, 101):
            ema_update(pair)
            w = pair.momentum.weight
            assert torch.max(torch.abs(w - (a + m**k * (b - a)))) < 1e-9

    def test_mismatch(self):
        with pytest.raises(ContractError):
            ema_update(MomentumPair(torch.nn.Linear(3, 2), torch.nn.Linear(2, 2)))


class TestRegionFeatures:
    def test_full_box_equals_global_average(self):
        f = torch.rand(1, 5, 8, 8)
        pooled = roi_pool(f, [[BoundingBox(0, 0, 64, 64)]], 8, 1)
        torch.testing.assert_close(pooled[0, :, 0, 0], f[0].mean(dim=(1, 2)))

    def test_identical_boxes(self):
        model = PretrainModel(CFG).eval()
        out = encode(model.online.backbone, torch.rand(1, 3, 64, 64))
        b = BoundingBox(5.5, 6, 30, 41)
        z = extract_proposal_features(out, [[b, b]], model.online.roi_projector, CFG)
        torch.testing.assert_close(z[0], z[1])

    def test_unit_norm(self):
        model = PretrainModel(CFG)
        out = encode(model.online.backbone, torch.rand(3, 3, 64, 64))
        rng = np.random.default_rng(0)
        boxes = []
        for _ in range(3):
            items = []
            for _ in range(4):
                x, y = rng.uniform(0, 40, 2)
                items.append(BoundingBox(x, y, x + rng.uniform(4, 24), y + rng.uniform(4, 24)))
            boxes.append(items)
        z = extract_proposal_features(out, boxes, model.online.roi_projector, CFG, model.roi_predictor)
        assert z.shape == (12, 256)
        assert torch.max(torch.abs(z.norm(dim=1) - 1)) < 1e-6

    def test_empty(self):
        model = PretrainModel(CFG)
        out = encode(model.online.backbone, torch.rand(2, 3, 64, 64))
        assert extract_proposal_features(out, [[], []], model.online.roi_projector, CFG).shape == (0, 256)


class TestDetection:
    def test_zero_head(self):
        head = zero_init_(DetectionHead(CFG.backbone_channels[1] * 49))
        out = encode(Backbone(CFG), torch.rand(1, 3, 64, 64))
        logit, deltas = detection_head_forward(out, [[BoundingBox(1, 1, 20, 20)]], head, CFG)
        assert torch.count_nonzero(logit) == 0 and torch.count_nonzero(deltas) == 0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(*[st.floats(0, 50)] * 2, *[st.floats(1, 30)] * 2), min_size=2, max_size=2))
    def test_delta_round_trip(self, boxes):
        (x, y, w, h), (u, v, p, q) = boxes
        src = torch.tensor([[x, y, x + w, y + h]], dtype=torch.float64)
        dst = torch.tensor([[u, v, u + p, v + q]], dtype=torch.float64)
        torch.testing.assert_close(decode_deltas(src, encode_deltas(src, dst)), dst, rtol=0, atol=1e-9)


def test_momentum_branch_frozen_and_excluded():
    model = PretrainModel(CFG)
    assert not any(p.requires_grad for p in model.momentum.parameters())
    trainable = {id(p) for p in model.trainable_parameters()}
    assert not trainable & {id(p) for p in model.momentum.parameters()}
    assert {id(p) for p in model.online.parameters()} <= trainable
    for pq, pk in zip(model.online.parameters(), model.momentum.parameters()):
        assert torch.equal(pq, pk)


def test_projection_head_shape():
    assert ProjectionHead(10, 16, 8)(torch.rand(4, 10)).shape == (4, 8)
