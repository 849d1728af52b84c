"""Acceptance scorecard: one test per shipped guarantee, one verdict line each.

Every check here states the guarantee in its name, carries its own
independent oracle (brute force, quadratic reference, or hand-computed
fixture), and prints a single [PASS]/[FAIL] line so a log scan reads as a
scorecard. The slow items (the overfit run and the denoising comparison)
budget their wall time explicitly.
"""

import contextlib
import hashlib
import itertools
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from detkit import lazyconf
from detkit.cli import build_batches, main, run_evaluation
from detkit.criterion import LossWeights, SetCriterion, box_losses, focal_loss
from detkit.data import generate_shapes_dataset
from detkit.engine import (
    TrainConfig,
    Trainer,
    build_param_groups,
    load_checkpoint,
    round_robin,
    save_checkpoint,
    seed_everything,
    lr_at,
)
from detkit.evalbench import (
    coco_ap_evaluate,
    count_parameters,
    emit_report,
    estimate_flops,
    BenchmarkRecord,
)
from detkit.geometry import (
    BoxArray,
    BoxFormat,
    batched_nms,
    box_iou,
    cxcywh_to_xyxy,
    generalized_iou,
    hungarian_match,
    nms,
    xyxy_to_cxcywh,
)
from detkit.models import (
    AnchorQueryEmbedding,
    ChannelProjector,
    DenoisingConfig,
    DenseTransformerDecoder,
    DenseTransformerEncoder,
    Detector,
    LearnedQueryInit,
    MultiScaleDeformableAttention,
    ResidualBackbone,
)

REPO = Path(__file__).resolve().parents[1]
torch.set_num_threads(1)


@contextlib.contextmanager
def verdict(tag: str):
    try:
        yield
    except BaseException:
        print(f"[FAIL] {tag}")
        raise
    print(f"[PASS] {tag}")


# ---------------------------------------------------------------------------
# independent oracles


def brute_force_assignment_cost(cost: torch.Tensor) -> float:
    """Minimum one-to-one assignment cost by exhausting all permutations."""
    n, m = cost.shape
    if n > m:
        return brute_force_assignment_cost(cost.t())
    best = math.inf
    for cols in itertools.permutations(range(m), n):
        total = sum(float(cost[i, j]) for i, j in enumerate(cols))
        best = min(best, total)
    return best


def quadratic_nms_reference(boxes: torch.Tensor, scores: torch.Tensor,
                            threshold: float) -> list[int]:
    """O(N^2) greedy suppression: walk score-descending, drop a box when its
    IoU with any already-kept box exceeds the threshold (strictly)."""
    order = torch.argsort(-scores, stable=True).tolist()
    kept: list[int] = []
    for index in order:
        x1, y1, x2, y2 = boxes[index].tolist()
        area = max(x2 - x1, 0.0) * max(y2 - y1, 0.0)
        suppressed = False
        for other in kept:
            ox1, oy1, ox2, oy2 = boxes[other].tolist()
            iw = min(x2, ox2) - max(x1, ox1)
            ih = min(y2, oy2) - max(y1, oy1)
            inter = max(iw, 0.0) * max(ih, 0.0)
            oarea = max(ox2 - ox1, 0.0) * max(oy2 - oy1, 0.0)
            union = area + oarea - inter
            if union > 0 and inter / union > threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(index)
    return kept


def finite_difference_grad(loss_fn, tensor: torch.Tensor, step: float = 1e-6) -> torch.Tensor:
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.numel()):
        original = flat[i].item()
        flat[i] = original + step
        plus = loss_fn().item()
        flat[i] = original - step
        minus = loss_fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2 * step)
    return grad


def assert_fd_agreement(loss_fn, tensors: dict[str, torch.Tensor], rtol: float = 1e-4):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    for (name, tensor), analytic in zip(tensors.items(), grads):
        with torch.no_grad():
            numeric = finite_difference_grad(loss_fn, tensor)
        if analytic is None:
            analytic = torch.zeros_like(tensor)
        scale = numeric.abs().max().clamp(min=1e-8)
        assert torch.allclose(analytic, numeric, atol=float(rtol * scale), rtol=rtol), (
            f"gradient mismatch on {name}: max abs diff "
            f"{(analytic - numeric).abs().max().item():.3e}"
        )


# hand-computed average precision for the 2-GT / 3-prediction fixture:
#   rank 1 (score .9): TP  -> recall 1/2, precision 1/1
#   rank 2 (score .8): FP  -> recall 1/2, precision 1/2
#   rank 3 (score .7): TP  -> recall 2/2, precision 2/3
# envelope: 1.0 on recall <= 0.5, 2/3 above; of the 101 grid points,
# 51 lie at or below recall 0.5 and 50 above.
HAND_AP_2GT_3PRED = (51 * 1.0 + 50 * (2.0 / 3.0)) / 101


# ---------------------------------------------------------------------------
# shared toy pieces


def tiny_detector(seed: int, denoising: DenoisingConfig | None = None,
                  num_classes: int = 3) -> tuple[Detector, SetCriterion]:
    seed_everything(seed)
    dim = 32
    model = Detector(
        backbone=ResidualBackbone(stem_channels=8, stage_channels=(8, 8, 16, 16),
                                  stage_blocks=(1, 1, 1, 1), out_stages=(4,)),
        encoder=DenseTransformerEncoder(dim=dim, num_layers=1, num_heads=2, ffn_dim=64),
        query_init=LearnedQueryInit(num_queries=20, dim=dim, use_anchors=True),
        decoder=DenseTransformerDecoder(dim=dim, num_layers=2, num_heads=2, ffn_dim=64,
                                        refine_anchors=True),
        num_classes=num_classes, dim=dim, projector=ChannelProjector([16], dim),
        denoising=denoising,
    )
    return model, SetCriterion(num_classes=num_classes)


def toy_train_config(seed: int, max_iter: int, **overrides) -> TrainConfig:
    base = dict(max_iter=max_iter, lr_milestones=(), base_lr=1e-3, backbone_lr=1e-3,
                offsets_refpoints_lr=1e-4, encdec_lr=1e-3, batch_size=8,
                freeze_stages=0, warmup_iters=5, log_every=10_000, seed=seed)
    base.update(overrides)
    return TrainConfig(**base)


def random_eval_fixture(rng, num_gt: int = 4, size: int = 200):
    boxes, labels = [], []
    for _ in range(num_gt):
        x1, y1 = rng.uniform(0, size - 40, size=2)
        w, h = rng.uniform(8, 40, size=2)
        boxes.append([x1, y1, x1 + w, y1 + h])
        labels.append(int(rng.integers(0, 3)))
    gt = {"boxes": np.array(boxes), "labels": np.array(labels),
          "crowd": np.zeros(num_gt, dtype=bool)}
    jitter = rng.normal(0, 3.0, size=(num_gt, 4))
    pred = {"boxes": np.array(boxes) + jitter,
            "scores": rng.uniform(0.3, 1.0, size=num_gt),
            "labels": np.array(labels)}
    return pred, gt


# ---------------------------------------------------------------------------
# 1. matcher exactness


def test_01_hungarian_matches_factorial_brute_force():
    with verdict("01 matcher equals factorial brute force on 200 matrices"):
        rng = np.random.default_rng(101)
        started = time.perf_counter()
        for _ in range(200):
            n = int(rng.integers(1, 8))
            m = int(rng.integers(1, 8))
            # integer-valued costs keep float sums associativity-proof
            cost = torch.tensor(rng.integers(0, 100, size=(n, m)), dtype=torch.float32)
            assignment = hungarian_match(cost)
            assert assignment.total_cost == brute_force_assignment_cost(cost)
            assert len(assignment.pairs) == min(n, m)
        assert time.perf_counter() - started < 10.0


# ---------------------------------------------------------------------------
# 2. nms oracle


def test_02_nms_matches_quadratic_reference():
    with verdict("02 nms equals O(N^2) reference on 100 box sets"):
        rng = np.random.default_rng(202)
        started = time.perf_counter()
        for _ in range(100):
            count = int(rng.integers(1, 201))
            x1y1 = rng.uniform(0, 80, size=(count, 2))
            wh = rng.uniform(1, 40, size=(count, 2))
            boxes = torch.tensor(np.concatenate([x1y1, x1y1 + wh], axis=1),
                                 dtype=torch.float32)
            scores = torch.tensor(rng.uniform(0, 1, size=count), dtype=torch.float32)
            threshold = float(rng.uniform(0.2, 0.9))
            kept = nms(boxes, scores, threshold).tolist()
            assert kept == quadratic_nms_reference(boxes, scores, threshold)
        assert time.perf_counter() - started < 5.0


# ---------------------------------------------------------------------------
# 3. geometry fixtures


def test_03_geometry_hand_fixtures_and_round_trips():
    with verdict("03 IoU 1/7, GIoU -0.5, box format round trips"):
        a = BoxArray(torch.tensor([[0.0, 0.0, 2.0, 2.0]]), BoxFormat.XYXY_ABS)
        b = BoxArray(torch.tensor([[1.0, 1.0, 3.0, 3.0]]), BoxFormat.XYXY_ABS)
        assert float(box_iou(a, b)) == pytest.approx(1.0 / 7.0, abs=1e-6)

        # diagonal neighbors: IoU 0, union 2, enclosing hull 4
        c = BoxArray(torch.tensor([[0.0, 0.0, 1.0, 1.0]]), BoxFormat.XYXY_ABS)
        d = BoxArray(torch.tensor([[1.0, 1.0, 2.0, 2.0]]), BoxFormat.XYXY_ABS)
        assert float(generalized_iou(c, d)) == pytest.approx(-0.5, abs=1e-6)

        rng = np.random.default_rng(303)
        cxcywh = torch.tensor(
            np.concatenate([rng.uniform(0.2, 0.8, size=(100, 2)),
                            rng.uniform(0.05, 0.3, size=(100, 2))], axis=1),
            dtype=torch.float32)
        assert torch.allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(cxcywh)), cxcywh, atol=1e-6)
        xyxy = cxcywh_to_xyxy(cxcywh)
        assert torch.allclose(cxcywh_to_xyxy(xyxy_to_cxcywh(xyxy)), xyxy, atol=1e-6)


# ---------------------------------------------------------------------------
# 4. gradient suite


def test_04_gradients_match_finite_differences_in_float64():
    with verdict("04 focal/L1/GIoU/deformable/anchor-embed gradients vs finite differences"):
        started = time.perf_counter()
        torch.manual_seed(404)

        logits = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
        targets = torch.tensor([0, 2, 3, 1, 3])  # 3 = background
        assert_fd_agreement(lambda: focal_loss(logits, targets), {"logits": logits})

        pred = torch.rand(4, 4, dtype=torch.float64) * 0.5 + 0.25
        pred.requires_grad_(True)
        tgt = BoxArray(torch.rand(4, 4, dtype=torch.float64) * 0.5 + 0.25,
                       BoxFormat.CXCYWH_NORM)

        def box_loss():
            result = box_losses(BoxArray(pred, BoxFormat.CXCYWH_NORM), tgt)
            return result.l1 + result.giou

        assert_fd_agreement(box_loss, {"pred_boxes": pred})

        attn = MultiScaleDeformableAttention(8, num_heads=2, num_levels=2,
                                             num_points=2).double()
        assert sum(p.numel() for p in attn.parameters()) <= 1000
        query = torch.randn(1, 3, 8, dtype=torch.float64)
        reference = torch.rand(1, 3, 2, 2, dtype=torch.float64) * 0.6 + 0.2
        value = torch.randn(1, 20, 8, dtype=torch.float64, requires_grad=True)
        shapes = torch.tensor([[4, 4], [2, 2]])
        probe = torch.randn(1, 3, 8, dtype=torch.float64)

        def attn_loss():
            return (attn(query, reference, value, shapes) * probe).sum()

        tensors = {"value": value}
        tensors.update({name: p for name, p in attn.named_parameters()})
        assert_fd_agreement(attn_loss, tensors)

        embed = AnchorQueryEmbedding(8).double()
        assert sum(p.numel() for p in embed.parameters()) <= 1000
        anchors = torch.rand(1, 4, 4, dtype=torch.float64) * 0.6 + 0.2
        anchors.requires_grad_(True)
        probe2 = torch.randn(1, 4, 8, dtype=torch.float64)

        def embed_loss():
            return (embed(anchors) * probe2).sum()

        tensors = {"anchors": anchors}
        tensors.update({name: p for name, p in embed.named_parameters()})
        assert_fd_agreement(embed_loss, tensors)

        assert time.perf_counter() - started < 120.0


# ---------------------------------------------------------------------------
# 5. evaluator fixtures


def test_05_ap_evaluator_fixtures():
    with verdict("05 AP evaluator: perfect detector, hand PR fixture, monotone invariance"):
        gt_boxes = np.array([[0, 0, 10, 10], [20, 20, 70, 70], [100, 100, 300, 300]],
                            dtype=float)  # one box per area band
        gt = [{"boxes": gt_boxes, "labels": np.array([0, 1, 2]),
               "crowd": np.zeros(3, dtype=bool)}]
        preds = [{"boxes": gt_boxes.copy(), "scores": np.array([0.9, 0.8, 0.7]),
                  "labels": np.array([0, 1, 2])}]
        metrics = coco_ap_evaluate(preds, gt)
        for key, value in metrics.items():
            assert value == pytest.approx(1.0, abs=1e-9), key

        # 2 ground truths, 3 ranked predictions (TP, FP, TP); see oracle above
        gt = [{"boxes": np.array([[0, 0, 10, 10], [30, 30, 40, 40]], dtype=float),
               "labels": np.zeros(2, dtype=int), "crowd": np.zeros(2, dtype=bool)}]
        preds = [{"boxes": np.array([[0, 0, 10, 10], [60, 60, 70, 70], [30, 30, 40, 40]],
                                    dtype=float),
                  "scores": np.array([0.9, 0.8, 0.7]), "labels": np.zeros(3, dtype=int)}]
        metrics = coco_ap_evaluate(preds, gt)
        expected = {"AP": HAND_AP_2GT_3PRED, "AP50": HAND_AP_2GT_3PRED,
                    "AP75": HAND_AP_2GT_3PRED, "AP_S": HAND_AP_2GT_3PRED,
                    "AP_M": float("nan"), "AP_L": float("nan")}
        for key, value in expected.items():
            assert metrics[key] == pytest.approx(value, abs=1e-6, nan_ok=True), key

        rng = np.random.default_rng(505)
        for _ in range(50):
            pred, gt_item = random_eval_fixture(rng)
            base = coco_ap_evaluate([pred], [gt_item])
            for transform in (lambda s: 0.2 + 0.5 * s, lambda s: s ** 3):
                mapped = dict(pred, scores=transform(pred["scores"]))
                got = coco_ap_evaluate([mapped], [gt_item])
                for key in base:
                    assert got[key] == pytest.approx(base[key], abs=1e-6, nan_ok=True)


# ---------------------------------------------------------------------------
# 6. toy overfit


def test_06_toy_overfit_reaches_ap50():
    with verdict("06 toy anchor-box model reaches AP50 >= 0.85 within 2000 iterations"):
        started = time.perf_counter()
        tree = lazyconf.load_config(REPO / "projects" / "dab-detr" / "configs" / "toy_shapes.py")
        train_cfg = lazyconf.instantiate(tree["train"])
        seed_everything(train_cfg.seed)
        model = lazyconf.instantiate(tree["model"])
        criterion = lazyconf.instantiate(tree["criterion"])
        dataset = lazyconf.instantiate(tree["data.train"])
        assert len(dataset) == 16 and dataset[0].image.shape[:2] == (64, 64)
        trainer = Trainer(model, criterion, train_cfg,
                          round_robin(build_batches(dataset, train_cfg.batch_size,
                                                    train_cfg.seed)))
        reached = None
        for upto in range(200, 2001, 200):
            trainer.train(until=upto)
            metrics, _, _ = run_evaluation(model, dataset)
            if metrics["AP50"] >= 0.85:
                reached = upto
                break
        assert reached is not None, "AP50 never reached 0.85 within 2000 iterations"
        assert time.perf_counter() - started < 900.0


# ---------------------------------------------------------------------------
# 7. denoising efficacy


def test_07_denoising_reaches_loss_target_faster():
    # the advantage dn training buys is stable assignment while matching is
    # still ambiguous, so the fixture keeps ambiguity alive: 48 images with
    # up to 6 objects each, and a loss target inside the steep descent.
    with verdict("07 denoising reaches the loss target in <= 0.8x iterations (median of 3 seeds)"):
        matched_keys = ("class", "l1", "giou", "aux0.class", "aux0.l1", "aux0.giou")
        data = generate_shapes_dataset(seed=9, num_images=48, image_size=64, max_objects=6)
        target, window, max_iter = 4.0, 10, 1600

        def iterations_to_target(seed: int, denoising: DenoisingConfig | None) -> int:
            model, criterion = tiny_detector(seed, denoising=denoising)
            cfg = toy_train_config(seed, max_iter)
            trainer = Trainer(model, criterion, cfg,
                              round_robin(build_batches(data, cfg.batch_size, seed)))
            trailing: list[float] = []
            for _ in range(max_iter):
                report = trainer.train_step(trainer.batch_source(trainer.iteration))
                trailing.append(sum(report[k] for k in matched_keys))
                recent = trailing[-window:]
                if sum(recent) / len(recent) <= target:
                    return trainer.iteration
            raise AssertionError(f"loss target {target} not reached in {max_iter} iterations")

        dn = DenoisingConfig(num_groups=8, label_noise_ratio=0.5, box_noise_scale=0.4)
        ratios = []
        for seed in (0, 1, 2):
            plain_iters = iterations_to_target(seed, None)
            dn_iters = iterations_to_target(seed, dn)
            ratios.append(dn_iters / plain_iters)
        assert statistics.median(ratios) <= 0.8, f"per-seed ratios {ratios}"


# ---------------------------------------------------------------------------
# 8. nms ablation direction


def _duplicate_heavy_split(rng):
    """4 images, 4 disjoint grid-placed GT boxes each; predictions are the
    exact GT boxes plus one translated near-duplicate per box at a strictly
    lower score. Box sides >= 24 and |shift| <= 1 keep every duplicate above
    IoU 0.8 with its source, and separate grid cells keep it below any
    matchable IoU with every other ground truth."""
    preds, gts = [], []
    for _ in range(4):
        boxes = []
        for cx, cy in itertools.product((10.0, 110.0), repeat=2):
            x1 = cx + rng.uniform(0, 20)
            y1 = cy + rng.uniform(0, 20)
            w, h = rng.uniform(24, 60, size=2)
            boxes.append([x1, y1, x1 + w, y1 + h])
        boxes = np.array(boxes)
        scores = rng.uniform(0.5, 1.0, size=4)
        shift = np.tile(rng.uniform(-1.0, 1.0, size=(4, 2)), 2)
        gts.append({"boxes": boxes, "labels": np.zeros(4, dtype=int),
                    "crowd": np.zeros(4, dtype=bool)})
        preds.append({
            "boxes": np.concatenate([boxes, boxes + shift]),
            "scores": np.concatenate([scores, scores * rng.uniform(0.5, 0.9, size=4)]),
            "labels": np.zeros(8, dtype=int),
        })
    return preds, gts


def test_08_nms_improves_ap_with_duplicate_predictions():
    with verdict("08 nms@0.8 never hurts AP on duplicate-heavy predictions (20 draws)"):
        rng = np.random.default_rng(808)
        improved = 0
        for _ in range(20):
            preds, gts = _duplicate_heavy_split(rng)
            raw = coco_ap_evaluate(preds, gts)["AP"]
            cleaned = []
            for pred in preds:
                keep = batched_nms(torch.tensor(pred["boxes"], dtype=torch.float32),
                                   torch.tensor(pred["scores"], dtype=torch.float32),
                                   torch.tensor(pred["labels"]), 0.8).numpy()
                cleaned.append({key: value[keep] for key, value in pred.items()})
            suppressed = coco_ap_evaluate(cleaned, gts)["AP"]
            assert suppressed >= raw - 1e-12
            improved += suppressed > raw + 1e-12
        # duplicate scores interleave with true detections across images, so
        # suppression must strictly help in nearly every draw
        assert improved >= 15


# ---------------------------------------------------------------------------
# 9. recipe fidelity


def test_09_schedule_param_groups_and_freeze_semantics():
    with verdict("09 lr schedule drops, per-component lr rows, freeze immutability"):
        for max_iter, milestone in ((90_000, 80_000), (180_000, 150_000), (270_000, 225_000)):
            cfg = TrainConfig(max_iter=max_iter, lr_milestones=(milestone,), warmup_iters=10)
            assert lr_at(milestone - 1, cfg) == 1.0
            assert lr_at(milestone, cfg) == 0.1
            assert lr_at(max_iter - 1, cfg) == 0.1

        model, _ = tiny_detector(seed=0)
        for lrs in ((2e-5, 2e-5, 2e-4), (1e-5, 1e-4, 1e-4)):
            cfg = TrainConfig(backbone_lr=lrs[0], offsets_refpoints_lr=lrs[1],
                              encdec_lr=lrs[2])
            groups = {g["component"]: g["lr"] for g in build_param_groups(model, cfg)}
            assert groups == {"backbone": lrs[0], "offsets_refpoints": lrs[1],
                              "encdec": lrs[2]}

        # freezing 2 stage units locks the stem and the first residual stage
        model, criterion = tiny_detector(seed=1)
        data = generate_shapes_dataset(seed=11, num_images=8, image_size=64, max_objects=2)
        cfg = toy_train_config(seed=1, max_iter=3, freeze_stages=2)
        trainer = Trainer(model, criterion, cfg,
                          round_robin(build_batches(data, cfg.batch_size, 1)))
        frozen_names = model.backbone.frozen_parameter_names(prefix="backbone.")
        assert frozen_names and all(
            name.startswith(("backbone.stem.", "backbone.stage1."))
            for name in frozen_names
        )
        snapshot = {name: param.clone() for name, param in model.named_parameters()
                    if name in frozen_names}
        trainer.train()
        changed = 0
        for name, param in model.named_parameters():
            if name in frozen_names:
                assert torch.equal(param, snapshot[name]), name
            elif param.requires_grad:
                changed += 1
        assert changed > 0


# ---------------------------------------------------------------------------
# 10. determinism and resume


def _toy_run(seed: int, iters: int, trainer_out=None):
    model, criterion = tiny_detector(seed)
    data = generate_shapes_dataset(seed=13, num_images=8, image_size=64, max_objects=2)
    cfg = toy_train_config(seed, max_iter=iters, log_every=1)
    trainer = Trainer(model, criterion, cfg,
                      round_robin(build_batches(data, cfg.batch_size, seed)),
                      out_dir=trainer_out)
    return trainer


def test_10_determinism_and_resume(tmp_path):
    with verdict("10 same-seed loss sequences identical; resume matches to 1e-6"):
        sequences = []
        for _ in range(2):
            trainer = _toy_run(seed=21, iters=18)
            records = trainer.train()
            sequences.append([r.losses["total"] for r in records])
        assert sequences[0] == sequences[1]

        continuous = _toy_run(seed=21, iters=18)
        reference = [r.losses["total"] for r in continuous.train()]

        interrupted = _toy_run(seed=21, iters=18)
        interrupted.train(until=8)
        save_checkpoint(interrupted.state(), tmp_path / "mid.ckpt")

        resumed = _toy_run(seed=21, iters=18)
        resumed.load_state(load_checkpoint(tmp_path / "mid.ckpt"))
        assert resumed.iteration == 8
        tail = [r.losses["total"] for r in resumed.train()]
        assert len(tail) == 10
        for ours, theirs in zip(tail, reference[8:]):
            assert abs(ours - theirs) <= 1e-6


# ---------------------------------------------------------------------------
# 11. modularity via configs alone


SLOT_COMBOS = [
    ("residual backbone + learned anchors",
     "L(ResidualBackbone, stem_channels=8, stage_channels=(8, 8, 16, 16),\n"
     "  stage_blocks=(1, 1, 1, 1), out_stages=(3, 4))",
     "L(ChannelProjector, in_channels=[16, 16], out_dim=32)",
     "L(LearnedQueryInit, num_queries=8, dim=32, use_anchors=True)"),
    ("residual backbone + encoder proposals",
     "L(ResidualBackbone, stem_channels=8, stage_channels=(8, 8, 16, 16),\n"
     "  stage_blocks=(1, 1, 1, 1), out_stages=(3, 4))",
     "L(ChannelProjector, in_channels=[16, 16], out_dim=32)",
     "L(TwoStageQueryInit, dim=32, num_queries=8, num_classes=3)"),
    ("patch backbone + learned anchors",
     "L(PatchifyBackbone, dim=32, patch_size=16, depth=1, num_heads=2)",
     "L(ChannelProjector, in_channels=[32], out_dim=32, num_extra_levels=1)",
     "L(LearnedQueryInit, num_queries=8, dim=32, use_anchors=True)"),
    ("patch backbone + encoder proposals",
     "L(PatchifyBackbone, dim=32, patch_size=16, depth=1, num_heads=2)",
     "L(ChannelProjector, in_channels=[32], out_dim=32, num_extra_levels=1)",
     "L(TwoStageQueryInit, dim=32, num_queries=8, num_classes=3)"),
]

_COMBO_TEMPLATE = """\
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
    PatchifyBackbone,
    ResidualBackbone,
    TwoStageQueryInit,
)

project = "combo"
model = L(
    Detector,
    backbone={backbone},
    projector={projector},
    encoder=L(DeformableTransformerEncoder, dim=32, num_layers=1, num_heads=2,
              num_levels=2, num_points=2, ffn_dim=64),
    query_init={query_init},
    decoder=L(DeformableTransformerDecoder, dim=32, num_layers=2, num_heads=2,
              num_levels=2, num_points=2, ffn_dim=64, ref_dim=4,
              query_pos_mode="anchor", refine_anchors=True),
    num_classes=3,
    dim=32,
)
criterion = L(SetCriterion, num_classes=3, weights=L(LossWeights))
train = L(TrainConfig, max_iter=3, lr_milestones=(), base_lr=1e-3, backbone_lr=1e-3,
          offsets_refpoints_lr=1e-4, encdec_lr=1e-3, batch_size=4, freeze_stages=0,
          warmup_iters=1, log_every=1, seed=3)
data = dict(
    train=L(generate_shapes_dataset, seed=15, num_images=8, image_size=64, max_objects=2),
    val=L(generate_shapes_dataset, seed=16, num_images=4, image_size=64, max_objects=2),
)
"""


def _core_digest() -> str:
    digest = hashlib.sha256()
    for path in sorted((REPO / "src" / "detkit").rglob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def test_11_slot_swaps_need_no_core_edits(tmp_path):
    with verdict("11 four backbone/query-init combos train via configs alone"):
        before = _core_digest()
        for index, (label, backbone, projector, query_init) in enumerate(SLOT_COMBOS):
            config = tmp_path / f"combo{index}.py"
            config.write_text(_COMBO_TEMPLATE.format(
                backbone=backbone, projector=projector, query_init=query_init))
            out = tmp_path / f"run{index}"
            code = main(["train", "--config", str(config), "--out", str(out)])
            assert code == 0, label
            assert (out / "final.ckpt").exists(), label
        assert _core_digest() == before


# ---------------------------------------------------------------------------
# 12. analysis tooling


class _LedgerNet(torch.nn.Sequential):
    def __init__(self):
        super().__init__(
            torch.nn.Conv2d(3, 4, 3, padding=1),
            torch.nn.BatchNorm2d(4),
            torch.nn.ReLU(),
            torch.nn.AdaptiveAvgPool2d(1),
            torch.nn.Flatten(),
            torch.nn.Linear(4, 5),
        )


def test_12_flops_params_and_report_layout():
    with verdict("12 flops ledger exact, parameter closed forms, 13-column report"):
        # hand ledger, multiply-accumulate = 1 op:
        #   conv 3->4, k=3, HxW out: 4*H*W * 27; batchnorm: one per element;
        #   pool/relu/flatten: zero; linear 4->5: 20.
        net = _LedgerNet()
        estimate = estimate_flops(net, [torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 16, 16)])
        assert estimate.totals == [6912 + 256 + 20, 27648 + 1024 + 20]

        linear = torch.nn.Linear(13, 7)
        assert count_parameters(linear) == (13 * 7 + 7, 13 * 7 + 7)
        conv = torch.nn.Conv2d(3, 8, 3)
        assert count_parameters(conv)[0] == 8 * 3 * 9 + 8
        conv.bias.requires_grad_(False)
        assert count_parameters(conv) == (8 * 3 * 9 + 8, 8 * 3 * 9)

        record = BenchmarkRecord(model_name="toy", epochs=12, ap=0.421, ap50=0.63,
                                 ap75=0.44, ap_s=0.2, ap_m=0.45, ap_l=0.6,
                                 params=41_000_000, flops_mean=175.6e9,
                                 flops_std=19.1e9, fps=23.0, peak_memory=None,
                                 wall_hours=3.5)
        text = emit_report([record], format="markdown")
        header, separator, row = text.strip().splitlines()
        assert header.count("|") == 14 and row.count("|") == 14
        cells = [cell.strip() for cell in row.strip("|").split("|")]
        assert len(cells) == 13
        assert cells[9] == "175.6 ± 19.1"
        assert cells[11] == "n/a"
