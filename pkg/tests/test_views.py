import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import make_manifest
from ltpretrain.data import BoundingBox, SyntheticConfig, generate_synthetic
from ltpretrain.errors import EmptyProposalsError
from ltpretrain.views import (
    AugmentConfig,
    MaskSpec,
    ViewTransform,
    apply_mask,
    apply_masks,
    flip_box,
    make_view_pair,
    match_proposals,
    sample_mask_spec,
    visible_fraction,
    view_seed,
)


@pytest.fixture(scope="module")
def images():
    return generate_synthetic(SyntheticConfig(6, 4, 1.0, image_size=64, seed=1)).images


class TestGeometry:
    def test_identity_pair(self, images):
        im = images[0]
        pair = make_view_pair(im, "ground-truth", seed=4, config=AugmentConfig(identity=True))
        assert len(pair.proposals) == len(im.annotations)
        for p, a in zip(pair.proposals, im.annotations):
            assert p.box_q == a.box and p.box_k == a.box and p.source == a.box
        assert torch.equal(pair.view_q.pixels, pair.view_k.pixels)
        np.testing.assert_allclose(pair.view_q.pixels.permute(1, 2, 0).numpy(), im.pixels)

    def test_flip_algebra(self):
        assert flip_box(BoundingBox(2, 3, 10, 9), 64).as_tuple() == (54.0, 3.0, 62.0, 9.0)

    def test_flip_transform(self):
        t = ViewTransform((0, 0, 64, 64), True, (64, 64))
        assert t.map_box(BoundingBox(2, 3, 10, 9)).as_tuple() == (54.0, 3.0, 62.0, 9.0)

    @settings(max_examples=100, deadline=None)
    @given(
        st.integers(0, 30), st.integers(0, 30), st.integers(8, 34), st.integers(8, 34), st.booleans(),
        st.floats(0, 50), st.floats(0, 50), st.floats(2, 14), st.floats(2, 14),
    )
    def test_unmap_inverts_map(self, x0, y0, w, h, flip, bx, by, bw, bh):
        t = ViewTransform((x0, y0, x0 + w, y0 + h), flip, (64, 64))
        box = BoundingBox(bx, by, bx + bw, by + bh)
        mapped = t.map_box(box)
        if mapped is None:
            return
        back = t.unmap_box(mapped)
        expected = box.intersect(t.crop_box)
        np.testing.assert_allclose(back.as_tuple(), expected.as_tuple(), atol=1e-9)

    def test_visibility_forty_percent_excluded(self):
        box = BoundingBox(10, 10, 20, 20)
        crop = (16, 0, 64, 64)  # keeps columns 16..20 -> 40% of the box
        assert oracles.pixel_coverage(box.as_tuple(), crop) == pytest.approx(0.4)
        assert visible_fraction(box, BoundingBox(*map(float, crop))) == pytest.approx(0.4)
        full = ViewTransform((0, 0, 64, 64), False, (64, 64))
        part = ViewTransform(crop, False, (64, 64))
        assert match_proposals([box], part, full) == []
        assert len(match_proposals([box], full, full)) == 1

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 40), st.integers(0, 40), st.integers(5, 24), st.integers(5, 24))
    def test_visible_fraction_matches_pixel_count(self, cx, cy, cw, ch):
        box = (12.0, 15.0, 25.0, 22.0)
        crop = (cx, cy, cx + cw, cy + ch)
        got = visible_fraction(BoundingBox(*box), BoundingBox(*map(float, crop)))
        assert got == pytest.approx(oracles.pixel_coverage(box, crop), abs=1e-12)


class TestViewPair:
    def test_deterministic(self, images):
        a = make_view_pair(images[1], "jittered-gt", seed=11)
        b = make_view_pair(images[1], "jittered-gt", seed=11)
        assert torch.equal(a.view_q.pixels, b.view_q.pixels)
        assert a.proposals == b.proposals

    def test_proposals_inside_views(self, images):
        for s in range(20):
            pair = make_view_pair(images[s % 6], "random-boxes", seed=s, allow_empty=True)
            assert len(pair.proposals) <= 8
            for p in pair.proposals:
                assert p.box_q.within(64, 64) and p.box_k.within(64, 64)

    def test_output_shape_and_range(self, images):
        pair = make_view_pair(images[2], "ground-truth", seed=5)
        assert pair.view_q.pixels.shape == (3, 64, 64)
        assert pair.view_q.pixels.min() >= 0 and pair.view_q.pixels.max() <= 1

    def test_empty_proposals(self):
        m = make_manifest([[]], size=64, with_pixels=True)
        with pytest.raises(EmptyProposalsError):
            make_view_pair(m.images[0], "ground-truth", seed=0)
        pair = make_view_pair(m.images[0], "ground-truth", seed=0, allow_empty=True)
        assert pair.proposals == []

    def test_unknown_source(self, images):
        with pytest.raises(ValueError):
            make_view_pair(images[0], "selective-search", seed=0)

    def test_view_seed_distinct(self):
        seeds = {view_seed(0, i, e, o) for i in range(5) for e in range(1, 4) for o in range(2)}
        assert len(seeds) == 30


class TestMask:
    def test_ratio_zero(self):
        spec = sample_mask_spec(BoundingBox(2, 2, 12, 12), 0.0, seed=1)
        assert spec.area == 0
        x = np.random.default_rng(0).random((3, 16, 16))
        np.testing.assert_array_equal(apply_mask(x, spec), x)

    def test_four_by_four(self):
        spec = sample_mask_spec(BoundingBox(4, 4, 8, 8), 0.25, seed=3)
        out = apply_mask(np.ones((3, 16, 16)), spec)
        assert (out[0] == 0).sum() == 4
        assert np.all((out == 0).sum(axis=0) % 3 == 0)

    def test_twenty_by_twenty(self):
        for seed in range(20):
            spec = sample_mask_spec(BoundingBox(10, 10, 30, 30), 0.25, seed=seed)
            assert spec.area == 100 and not spec.relaxed
            x0, y0, x1, y1 = spec.rect
            assert 10 <= x0 and x1 <= 30 and 10 <= y0 and y1 <= 30

    def test_achievable_areas_enumeration(self):
        # 5x3 proposal: target 0.25*15 = 3.75; closest integer rectangles with aspect in [0.5, 2] have area 4
        spec = sample_mask_spec(BoundingBox(0, 0, 5, 3), 0.25, seed=0)
        achievable = {w * h for w in range(1, 6) for h in range(1, 4) if 0.5 <= w / h <= 2}
        assert spec.area == min(achievable, key=lambda a: abs(a - 3.75))

    def test_deterministic(self):
        b = BoundingBox(3.2, 4.9, 27.5, 19.1)
        assert sample_mask_spec(b, 0.25, seed=8) == sample_mask_spec(b, 0.25, seed=8)

    def test_too_small(self):
        with pytest.raises(ValueError):
            sample_mask_spec(BoundingBox(0, 0, 1, 3), 0.25)

    def test_torch_keeps_gradient(self):
        x = torch.rand(3, 8, 8, requires_grad=True)
        spec = MaskSpec(0, (2, 2, 4, 5))
        apply_mask(x, spec).sum().backward()
        assert x.grad[:, 2:5, 2:4].sum() == 0
        assert x.grad.sum() == 3 * (64 - 6)

    def test_batch(self):
        batch = torch.ones(2, 3, 8, 8)
        out = apply_masks(batch, [[MaskSpec(0, (0, 0, 2, 2))], None])
        assert (out[0] == 0).sum() == 12 and torch.equal(out[1], batch[1])

    def test_flipped(self):
        assert MaskSpec(0, (1, 2, 4, 6)).flipped(10).rect == (6, 2, 9, 6)
