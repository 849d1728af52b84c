# Four pyramid levels, two-stage proposal queries, and contrastive
# denoising (each noised group carries a paired negative to be rejected).
from detkit import L
from detkit.criterion import LossWeights, SetCriterion
from detkit.data import generate_shapes_dataset
from detkit.engine import TrainConfig
from detkit.models import (
    ChannelProjector,
    DeformableTransformerDecoder,
    DeformableTransformerEncoder,
    DenoisingConfig,
    Detector,
    ResidualBackbone,
    TwoStageQueryInit,
)

project = "dino-4scale"
num_classes = 3
dim = 64

model = L(
    Detector,
    backbone=L(ResidualBackbone, stem_channels=16, stage_channels=(16, 16, 32, 32),
               stage_blocks=(1, 1, 1, 1), out_stages=(1, 2, 3, 4)),
    projector=L(ChannelProjector, in_channels=[16, 16, 32, 32], out_dim=dim),
    encoder=L(DeformableTransformerEncoder, dim=dim, num_layers=2, num_heads=4,
              num_levels=4, num_points=2, ffn_dim=128),
    query_init=L(TwoStageQueryInit, dim=dim, num_queries=20, num_classes=num_classes),
    decoder=L(DeformableTransformerDecoder, dim=dim, num_layers=2, num_heads=4,
              num_levels=4, num_points=2, ffn_dim=128, ref_dim=4,
              query_pos_mode="anchor", refine_anchors=True),
    num_classes=num_classes,
    dim=dim,
    denoising=L(DenoisingConfig, num_groups=3, label_noise_ratio=0.5,
                box_noise_scale=0.4, contrastive=True),
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
