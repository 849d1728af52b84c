import pytest
import torch

from detkit.models.backbones import (
    ChannelProjector,
    FeaturePyramid,
    PatchifyBackbone,
    ResidualBackbone,
    TooManyStagesError,
)
from detkit.models.common import MLP, inverse_sigmoid, iterative_box_refine
from detkit.models.encoder import (
    DeformableTransformerEncoder,
    DenseTransformerEncoder,
    flatten_pyramid,
    grid_reference_points,
)
from detkit.models.queries import (
    EncoderContext,
    KTooLargeError,
    LearnedQueryInit,
    TwoStageQueryInit,
    make_token_proposals,
    two_stage_select,
)


def _pyramid(shapes, channels=8, batch=2, strides=None, pad_right=None):
    strides = strides or [8 * 2**i for i in range(len(shapes))]
    levels, masks = [], []
    for (h, w), stride in zip(shapes, strides):
        levels.append((torch.rand(batch, channels, h, w), stride))
        mask = torch.zeros(batch, h, w, dtype=torch.bool)
        if pad_right is not None:
            mask[:, :, max(1, int(w * (1 - pad_right))) :] = True
        masks.append(mask)
    return FeaturePyramid(levels=levels, padding_masks=masks)


# ---------------------------------------------------------------------------
# flatten_pyramid


def test_single_level_flatten():
    flat = flatten_pyramid(_pyramid([(2, 2)]))
    assert flat.tokens.shape == (2, 4, 8)
    assert flat.level_index.tolist() == [0, 0, 0, 0]
    assert flat.level_start_index.tolist() == [0]


def test_unpadded_valid_ratios_are_one():
    flat = flatten_pyramid(_pyramid([(4, 4), (2, 2)]))
    assert torch.allclose(flat.valid_ratios, torch.ones(2, 2, 2))


def test_two_levels_boundary_at_sixteen():
    flat = flatten_pyramid(_pyramid([(4, 4), (2, 2)]))
    assert flat.tokens.shape[1] == 20
    assert flat.level_start_index.tolist() == [0, 16]
    assert flat.level_index[:16].eq(0).all() and flat.level_index[16:].eq(1).all()
    assert flat.spatial_shapes.tolist() == [[4, 4], [2, 2]]


def test_valid_ratios_reflect_padding():
    flat = flatten_pyramid(_pyramid([(4, 8)], pad_right=0.5))
    # half of each row padded on the right: w-ratio 0.5, h-ratio 1.0
    assert torch.allclose(flat.valid_ratios[:, 0], torch.tensor([0.5, 1.0]))


def test_flatten_rejects_wrong_width():
    with pytest.raises(ValueError):
        flatten_pyramid(_pyramid([(2, 2)]), embed_dim=16)


def test_grid_reference_points_centers():
    flat = flatten_pyramid(_pyramid([(2, 2)]))
    ref = grid_reference_points(flat.spatial_shapes, flat.valid_ratios)
    assert ref.shape == (2, 4, 1, 2)
    assert torch.allclose(ref[0, 0, 0], torch.tensor([0.25, 0.25]))
    assert torch.allclose(ref[0, 3, 0], torch.tensor([0.75, 0.75]))


# ---------------------------------------------------------------------------
# iterative refinement


def test_refine_zero_deltas_is_identity():
    boxes = torch.rand(3, 4).clamp(0.05, 0.95)
    out = iterative_box_refine(boxes, torch.zeros(3, 4))
    assert torch.allclose(out, boxes, atol=1e-6)


def test_refine_from_half_gives_sigmoid_of_delta():
    deltas = torch.tensor([[0.3, -0.7, 1.2, 0.0]])
    out = iterative_box_refine(torch.full((1, 4), 0.5), deltas)
    assert torch.allclose(out, deltas.sigmoid(), atol=1e-6)


def test_refine_composition_equals_summed_deltas():
    torch.manual_seed(0)
    boxes = torch.rand(5, 4).clamp(0.1, 0.9)
    d1, d2 = torch.randn(5, 4) * 0.5, torch.randn(5, 4) * 0.5
    two_steps = iterative_box_refine(iterative_box_refine(boxes, d1), d2)
    one_step = iterative_box_refine(boxes, d1 + d2)
    assert torch.allclose(two_steps, one_step, atol=1e-5)


def test_inverse_sigmoid_clamps_boundaries():
    x = torch.tensor([0.0, 1.0, 0.5])
    out = inverse_sigmoid(x)
    assert torch.isfinite(out).all()
    assert out[2].abs() < 1e-6


# ---------------------------------------------------------------------------
# two-stage selection


def test_select_all_tokens_is_permutation():
    torch.manual_seed(1)
    scores = torch.rand(2, 9)
    top = two_stage_select(scores, 9)
    assert sorted(top[0].tolist()) == list(range(9))


def test_select_single_peak():
    scores = torch.full((1, 6), -10.0)
    scores[0, 4] = 10.0
    assert two_stage_select(scores, 1).item() == 4


def test_selected_scores_are_k_largest_sort_oracle():
    torch.manual_seed(2)
    for _ in range(20):
        scores = torch.rand(1, 30).round(decimals=1)  # duplicates force tie-breaks
        k = int(torch.randint(1, 31, ()))
        picked = scores[0][two_stage_select(scores, k)[0]]
        expected = sorted(scores[0].tolist(), reverse=True)[:k]
        assert sorted(picked.tolist(), reverse=True) == pytest.approx(expected)


def test_tie_break_prefers_lower_index():
    scores = torch.tensor([[1.0, 3.0, 3.0, 3.0]])
    assert two_stage_select(scores, 2)[0].tolist() == [1, 2]


def test_k_too_large_raises():
    with pytest.raises(KTooLargeError):
        two_stage_select(torch.rand(1, 5), 6)


def test_token_proposals_scale_with_level():
    flat = flatten_pyramid(_pyramid([(4, 4), (2, 2)]))
    proposals, valid = make_token_proposals(flat, base_scale=0.05)
    assert proposals.shape == (2, 20, 4)
    assert torch.allclose(proposals[0, :16, 2:], torch.full((16, 2), 0.05))
    assert torch.allclose(proposals[0, 16:, 2:], torch.full((4, 2), 0.10))
    assert valid[0, :].all()  # unpadded, boxes interior


def test_padded_tokens_make_invalid_proposals():
    flat = flatten_pyramid(_pyramid([(4, 8)], pad_right=0.5))
    _, valid = make_token_proposals(flat)
    assert not valid[0, 4:8].any()  # right half of first row is padded


def test_two_stage_query_init_outputs():
    torch.manual_seed(3)
    flat = flatten_pyramid(_pyramid([(4, 4), (2, 2)]))
    init = TwoStageQueryInit(dim=8, num_queries=5, num_classes=3)
    queries, proposals = init(EncoderContext(memory=torch.rand(2, 20, 8), flat=flat))
    assert queries.content.shape == (2, 5, 8)
    assert queries.anchors.shape == (2, 5, 4)
    assert not queries.anchors.requires_grad  # detached before seeding decoder
    assert proposals.logits.shape == (2, 5, 3)
    assert proposals.boxes.requires_grad  # auxiliary loss path keeps gradients


def test_learned_query_init_variants():
    init = LearnedQueryInit(num_queries=4, dim=8, use_anchors=True)
    ctx = EncoderContext(memory=torch.rand(3, 10, 8), flat=None)
    queries, proposals = init(ctx)
    assert proposals is None
    assert queries.anchors.shape == (3, 4, 4)
    assert (queries.anchors > 0).all() and (queries.anchors < 1).all()

    plain = LearnedQueryInit(num_queries=4, dim=8, use_anchors=False, learned_content=False)
    queries, _ = plain(ctx)
    assert queries.anchors is None
    assert queries.pos.shape == (3, 4, 8)
    assert torch.allclose(queries.content, torch.zeros(3, 4, 8))


# ---------------------------------------------------------------------------
# backbones


def test_residual_backbone_pyramid_shapes():
    bb = ResidualBackbone(stem_channels=8, stage_channels=(8, 16, 32, 64), out_stages=(2, 3, 4))
    images = torch.rand(2, 3, 64, 96)
    mask = torch.zeros(2, 64, 96, dtype=torch.bool)
    pyramid = bb(images, mask)
    assert [s for _, s in pyramid.levels] == [8, 16, 32]
    assert [f.shape[-2:] for f, _ in pyramid.levels] == [(8, 12), (4, 6), (2, 3)]
    assert pyramid.channels == [16, 32, 64]


def test_freeze_stages_stops_gradients_and_norm_updates():
    bb = ResidualBackbone(stem_channels=8, stage_channels=(8, 16, 32, 64))
    bb.freeze_stages(2)  # stem + first residual stage
    assert all(not p.requires_grad for p in bb.stem.parameters())
    assert all(not p.requires_grad for p in bb.stages[0].parameters())
    assert all(p.requires_grad for p in bb.stages[1].parameters())

    bb.train()
    assert not bb.stem.training and not bb.stages[0].training
    assert bb.stages[1].training

    running = bb.stages[0][0].bn1.running_mean.clone()
    bb(torch.rand(1, 3, 64, 64), torch.zeros(1, 64, 64, dtype=torch.bool))
    assert torch.allclose(bb.stages[0][0].bn1.running_mean, running)
    live = bb.stages[1][0].bn1.running_mean
    assert not torch.allclose(live, torch.zeros_like(live))


def test_freeze_too_many_stages_raises():
    bb = ResidualBackbone()
    with pytest.raises(TooManyStagesError):
        bb.freeze_stages(6)


def test_patchify_backbone_single_level():
    bb = PatchifyBackbone(dim=16, patch_size=8, depth=1, num_heads=2)
    pyramid = bb(torch.rand(2, 3, 32, 48), torch.zeros(2, 32, 48, dtype=torch.bool))
    assert len(pyramid.levels) == 1
    feat, stride = pyramid.levels[0]
    assert stride == 8 and feat.shape == (2, 16, 4, 6)
    assert len(bb.stage_units()) == 2  # stem + one block


def test_channel_projector_unifies_and_extends():
    pyramid = _pyramid([(8, 8), (4, 4)], channels=8)
    proj = ChannelProjector([8, 8], out_dim=16, num_extra_levels=1)
    out = proj(pyramid)
    assert out.channels == [16, 16, 16]
    assert [s for _, s in out.levels] == [8, 16, 32]
    assert out.levels[-1][0].shape[-2:] == (2, 2)


def test_pyramid_requires_increasing_strides():
    with pytest.raises(ValueError):
        FeaturePyramid(
            levels=[(torch.rand(1, 4, 4, 4), 16), (torch.rand(1, 4, 2, 2), 8)],
            padding_masks=[torch.zeros(1, 4, 4, dtype=torch.bool), torch.zeros(1, 2, 2, dtype=torch.bool)],
        )


# ---------------------------------------------------------------------------
# encoders preserve shape


def test_encoders_preserve_token_shape():
    torch.manual_seed(4)
    flat = flatten_pyramid(_pyramid([(4, 4), (2, 2)]))
    dense = DenseTransformerEncoder(dim=8, num_layers=2, num_heads=2, ffn_dim=16)
    assert dense(flat).shape == flat.tokens.shape
    deform = DeformableTransformerEncoder(dim=8, num_layers=2, num_heads=2, num_levels=2, num_points=2, ffn_dim=16)
    assert deform(flat).shape == flat.tokens.shape


def test_deformable_encoder_level_count_checked():
    flat = flatten_pyramid(_pyramid([(4, 4)]))
    enc = DeformableTransformerEncoder(dim=8, num_layers=1, num_heads=2, num_levels=2, num_points=2, ffn_dim=16)
    with pytest.raises(ValueError):
        enc(flat)


def test_mlp_layer_count_and_shapes():
    mlp = MLP(8, 16, 4, 3)
    assert len(mlp.layers) == 3
    assert mlp(torch.rand(5, 8)).shape == (5, 4)
