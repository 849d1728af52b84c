# Multi-scale deformable attention at toy scale: two pyramid levels, sparse
# sampling in both encoder and decoder, learned positional queries with
# 2-dim center references.
from detkit import L
from detkit.criterion import LossWeights, SetCriterion
from detkit.data import generate_shapes_dataset
from detkit.engine import TrainConfig
from detkit.models import (
    ChannelProjector,
    DeformableTransformerDecoder,
    DeformableTransformerEncoder,
    Detector,
    LearnedQueryInit,
    ResidualBackbone,
)

project = "deformable-detr"
num_classes = 3
dim = 64

model = L(
    Detector,
    backbone=L(ResidualBackbone, stem_channels=16, stage_channels=(16, 16, 32, 32),
               stage_blocks=(1, 1, 1, 1), out_stages=(3, 4)),
    projector=L(ChannelProjector, in_channels=[32, 32], out_dim=dim),
    encoder=L(DeformableTransformerEncoder, dim=dim, num_layers=2, num_heads=4,
              num_levels=2, num_points=2, ffn_dim=128),
    query_init=L(LearnedQueryInit, num_queries=20, dim=dim, use_anchors=False),
    decoder=L(DeformableTransformerDecoder, dim=dim, num_layers=2, num_heads=4,
              num_levels=2, num_points=2, ffn_dim=128, ref_dim=2,
              query_pos_mode="learned", refine_anchors=False),
    num_classes=num_classes,
    dim=dim,
)

criterion = L(SetCriterion, num_classes=num_classes,
              weights=L(LossWeights, class_weight=1.0))

train = L(TrainConfig, max_iter=2000, lr_milestones=(1600,), base_lr=1e-3,
          backbone_lr=1e-3, offsets_refpoints_lr=1e-4, encdec_lr=1e-3,
          batch_size=8, freeze_stages=0, warmup_iters=10, log_every=100, seed=42)

data = dict(
    train=L(generate_shapes_dataset, seed=5, num_images=16, image_size=64, max_objects=2),
    val=L(generate_shapes_dataset, seed=6, num_images=8, image_size=64, max_objects=2),
    eval_batch_size=4,
)
