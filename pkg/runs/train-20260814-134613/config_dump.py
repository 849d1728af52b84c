# canonical config dump; executable, sorted keys, deterministic formatting
criterion = L('detkit.criterion.SetCriterion', num_classes=3, weights=L('detkit.criterion.LossWeights', class_weight=1.0))
data = {'eval_batch_size': 4, 'train': L('detkit.data.shapes.generate_shapes_dataset', image_size=64, max_objects=2, num_images=16, seed=5), 'val': L('detkit.data.shapes.generate_shapes_dataset', image_size=64, max_objects=2, num_images=8, seed=6)}
dim = 64
model = L('detkit.models.detector.Detector', backbone=L('detkit.models.backbones.ResidualBackbone', out_stages=(4,), stage_blocks=(1, 1, 1, 1), stage_channels=(16, 16, 32, 32), stem_channels=16), decoder=L('detkit.models.decoder.DenseTransformerDecoder', dim=64, ffn_dim=128, num_heads=4, num_layers=2, refine_anchors=True), dim=64, encoder=L('detkit.models.encoder.DenseTransformerEncoder', dim=64, ffn_dim=128, num_heads=4, num_layers=2), num_classes=3, projector=L('detkit.models.backbones.ChannelProjector', in_channels=[32], out_dim=64), query_init=L('detkit.models.queries.LearnedQueryInit', dim=64, num_queries=20, use_anchors=True))
num_classes = 3
project = 'dab-detr'
train = L('detkit.engine.schedule.TrainConfig', backbone_lr=0.001, base_lr=0.001, batch_size=8, encdec_lr=0.001, freeze_stages=0, log_every=100, lr_milestones=(1600,), max_iter=2000, offsets_refpoints_lr=0.0001, seed=42, warmup_iters=10, никак=1)
