import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from agnostic_ssl.datamodel import BBox, DetectorConfig, Instance, ValidationError
from agnostic_ssl.datamodel.config import tiny_config
from agnostic_ssl.detector import (
    DensePredictions,
    LossWeights,
    assign_targets,
    build_detector,
    decode_candidates,
    detection_loss,
    dice_loss,
    infer,
    mask_loss,
    nms,
)
from agnostic_ssl.detector.model import locations_for
from agnostic_ssl.detector.targets import TargetMap, centerness_target
from agnostic_ssl.synthgen import SynthSpec, generate_image

CFG = DetectorConfig()


def _zeros(n=1, size=64):
    return torch.zeros(n, 3, size, size)


# forward


def test_output_shapes_for_64px_input():
    model = build_detector(CFG, seed=0)
    preds = model(_zeros())
    assert [tuple(t.shape[-2:]) for t in preds.cls] == [(8, 8), (4, 4)]
    assert [tuple(t.shape) for t in preds.reg] == [(1, 4, 8, 8), (1, 4, 4, 4)]
    assert preds.cls[0].shape[1] == CFG.num_classes
    assert preds.kernels[0].shape[1] == CFG.num_dynamic_params
    assert preds.mask_feats.shape == (1, CFG.mask_channels, 64 // CFG.mask_stride, 64 // CFG.mask_stride)
    assert preds.flat("cls").shape == (1, 80, CFG.num_classes)
    assert len(preds.locations()) == 80


def test_identical_inputs_give_identical_outputs():
    model = build_detector(CFG, seed=1)
    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    preds = model(torch.cat([x, x]))
    for name in ("cls", "reg", "ctr", "kernels"):
        flat = preds.flat(name)
        assert torch.equal(flat[0], flat[1])
    assert torch.equal(preds.mask_feats[0], preds.mask_feats[1])


def test_batch_forward_equals_per_image_forward():
    model = build_detector(CFG, seed=2).double()
    x = torch.rand(3, 3, 32, 48, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    whole = model(x)
    for b in range(3):
        single = model(x[b : b + 1])
        for name in ("cls", "reg", "ctr", "kernels"):
            assert torch.allclose(whole.flat(name)[b], single.flat(name)[0], atol=1e-12)


def test_forward_rejects_bad_input():
    model = build_detector(CFG, seed=0)
    with pytest.raises(ValueError, match="divisible"):
        model(torch.zeros(1, 3, 60, 64))
    with pytest.raises(ValueError, match="expected"):
        model(torch.zeros(1, 1, 64, 64))


def test_same_seed_same_weights():
    a = build_detector(CFG, seed=5)
    b = build_detector(CFG, seed=5)
    c = build_detector(CFG, seed=6)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_fuzz_outputs_finite_and_offsets_nonnegative():
    rng = np.random.default_rng(0)
    cfg = tiny_config(3)
    for draw in range(100):
        model = build_detector(cfg, seed=draw)
        with torch.no_grad():
            for p in model.parameters():
                p.mul_(float(rng.uniform(0.5, 3.0)))
        size = int(rng.choice([16, 32, 48]))
        x = torch.from_numpy(rng.normal(scale=rng.uniform(0.1, 5.0), size=(2, 3, size, size)).astype(np.float32))
        with torch.no_grad():
            preds = model(x)
        for name in ("cls", "reg", "ctr", "kernels"):
            assert torch.isfinite(preds.flat(name)).all(), (draw, name)
        assert torch.isfinite(preds.mask_feats).all()
        assert (preds.flat("reg") >= 0).all()


# targets


def _image(boxes, size=64, classes=None):
    insts = []
    for k, b in enumerate(boxes):
        insts.append(Instance(BBox(*b), class_id=None if classes is None else classes[k]))
    return insts


def _brute_force_assign(boxes, cfg, size):
    """Per-location loop over every box, written independently of the vectorized rule."""
    locs = locations_for(size, cfg.strides)
    per_level = [-(-size[0] // s) * -(-size[1] // s) for s in cfg.strides]
    levels = [lvl for lvl, n in enumerate(per_level) for _ in range(n)]
    out = []
    for (x, y), lvl in zip(locs, levels):
        lo, hi = cfg.scale_ranges[lvl]
        best = None
        for k, (x1, y1, x2, y2) in enumerate(boxes):
            l, t, r, b = x - x1, y - y1, x2 - x, y2 - y
            if min(l, t, r, b) <= 0:
                continue
            if not lo <= max(l, t, r, b) <= hi:
                continue
            area = (x2 - x1) * (y2 - y1)
            if best is None or area < best[0]:
                best = (area, k, (l, t, r, b))
        out.append(best)
    return out


def test_empty_image_all_background():
    tm = assign_targets([[]], CFG, (64, 64))
    assert tm.num_positive == 0
    assert (tm.assigned == -1).all()


def test_centered_box_matches_brute_force():
    cfg = DetectorConfig(num_classes=1)
    boxes = [(16, 16, 48, 48)]
    tm = assign_targets([_image(boxes)], cfg, (64, 64))
    oracle = _brute_force_assign(boxes, cfg, (64, 64))
    assert tm.num_positive == sum(o is not None for o in oracle) == 16
    for i, o in enumerate(oracle):
        assert (tm.assigned[0, i] >= 0) == (o is not None)


def test_center_location_has_unit_centerness():
    cfg = DetectorConfig(num_classes=1)
    # location (20, 20) on the stride-8 grid sits at the center of this box
    tm = assign_targets([_image([(10, 10, 30, 30)])], cfg, (64, 64))
    i = int(np.flatnonzero((tm.locations[:, 0] == 20) & (tm.locations[:, 1] == 20))[0])
    assert tm.centerness[0, i] == 1.0
    assert centerness_target(np.array([3.0, 5.0, 3.0, 5.0])) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_assignment_matches_brute_force(data):
    size = (data.draw(st.sampled_from([32, 48, 64])), data.draw(st.sampled_from([32, 64])))
    n = data.draw(st.integers(0, 5))
    boxes = []
    for _ in range(n):
        x1 = data.draw(st.integers(0, size[1] - 2))
        y1 = data.draw(st.integers(0, size[0] - 2))
        x2 = data.draw(st.integers(x1 + 1, size[1]))
        y2 = data.draw(st.integers(y1 + 1, size[0]))
        boxes.append((x1, y1, x2, y2))
    cfg = DetectorConfig(num_classes=3)
    classes = [data.draw(st.integers(0, 2)) for _ in boxes]
    tm = assign_targets([_image(boxes, classes=classes)], cfg, size)
    oracle = _brute_force_assign(boxes, cfg, size)
    for i, o in enumerate(oracle):
        if o is None:
            assert tm.labels[0, i] == 0 and tm.assigned[0, i] == -1
            continue
        area, k, ltrb = o
        # equal-area ties may pick a different box; compare by area
        x1, y1, x2, y2 = boxes[tm.assigned[0, i]]
        assert (x2 - x1) * (y2 - y1) == area
        assert tm.labels[0, i] == classes[tm.assigned[0, i]] + 1
        # offsets reproduce the assigned box
        x, y = tm.locations[i]
        l, t, r, b = tm.offsets[0, i]
        assert (x - l, y - t, x + r, y + b) == (x1, y1, x2, y2)
        assert 0.0 < tm.centerness[0, i] <= 1.0


def test_agnostic_labels_are_one():
    cfg = DetectorConfig(num_classes=1)
    tm = assign_targets([_image([(0, 0, 30, 30)], classes=[7])], cfg, (64, 64))
    assert set(np.unique(tm.labels[tm.positive])) == {1}


def test_specific_targets_need_class_ids():
    with pytest.raises(ValidationError, match="class id"):
        assign_targets([_image([(0, 0, 30, 30)])], DetectorConfig(num_classes=3), (64, 64))
    with pytest.raises(ValidationError, match="out of range"):
        assign_targets([_image([(0, 0, 30, 30)], classes=[3])], DetectorConfig(num_classes=3), (64, 64))


# losses


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _scalar_focal(x, t, alpha=0.25, gamma=2.0):
    p = _sigmoid(x)
    if t == 1:
        return -alpha * (1 - p) ** gamma * math.log(p)
    return -(1 - alpha) * p**gamma * math.log(1 - p)


def _scalar_iou(pred, tgt):
    pl, pt, pr, pb = pred
    tl, tt, tr, tb = tgt
    inter = (min(pl, tl) + min(pr, tr)) * (min(pt, tt) + min(pb, tb))
    union = (pl + pr) * (pt + pb) + (tl + tr) * (tt + tb) - inter
    return -math.log((inter + 1) / (union + 1))


def _scalar_bce(x, t):
    p = _sigmoid(x)
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


def _toy_preds(cls, reg, ctr):
    """A one-level, one-row map: ``cls`` [B, N, K], ``reg`` [B, N, 4], ``ctr`` [B, N]."""
    cls = torch.as_tensor(cls, dtype=torch.float64)
    b, n, k = cls.shape
    to_map = lambda t: t.permute(0, 2, 1).reshape(b, -1, 1, n)  # noqa: E731
    return DensePredictions(
        cls=[to_map(cls)],
        reg=[to_map(torch.as_tensor(reg, dtype=torch.float64))],
        ctr=[to_map(torch.as_tensor(ctr, dtype=torch.float64)[..., None])],
        kernels=[torch.zeros(b, 1, 1, n, dtype=torch.float64)],
        mask_feats=torch.zeros(b, 1, 1, n, dtype=torch.float64),
        strides=(8,),
        image_size=(8, 8 * n),
    )


def _toy_targets(labels, offsets, ctr):
    labels = np.asarray(labels, dtype=np.int64)
    b, n = labels.shape
    return TargetMap(
        labels=labels,
        offsets=np.asarray(offsets, dtype=np.float64),
        centerness=np.asarray(ctr, dtype=np.float64),
        assigned=np.where(labels > 0, 0, -1),
        locations=locations_for((8, 8 * n), (8,)),
    )


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        k = int(rng.integers(1, 4))
        cls = rng.normal(scale=2, size=(1, 2, k))
        reg = rng.uniform(0.5, 20, size=(1, 2, 4))
        ctr = rng.normal(size=(1, 2))
        labels = rng.integers(0, k + 1, size=(1, 2))
        offsets = rng.uniform(0.5, 20, size=(1, 2, 4))
        ctr_t = rng.uniform(size=(1, 2))
        mode = "agnostic" if k == 1 else "specific"
        out = detection_loss(_toy_preds(cls, reg, ctr), _toy_targets(labels, offsets, ctr_t), mode)

        pos = [i for i in range(2) if labels[0, i] > 0]
        focal = sum(_scalar_focal(cls[0, i, c], int(labels[0, i] == c + 1)) for i in range(2) for c in range(k))
        want_cls = focal / max(len(pos), 1)
        want_loc = sum(_scalar_iou(reg[0, i], offsets[0, i]) for i in pos) / len(pos) if pos else 0.0
        want_ctr = sum(_scalar_bce(ctr[0, i], ctr_t[0, i]) for i in pos) / len(pos) if pos else 0.0
        got = out.scalars()
        assert got["cls"] == pytest.approx(want_cls, abs=1e-9)
        assert got["loc"] == pytest.approx(want_loc, abs=1e-9)
        assert got["ctr"] == pytest.approx(want_ctr, abs=1e-9)
        assert float(out.total) == pytest.approx(want_cls + want_loc + want_ctr, abs=1e-9)


def test_loss_weights_scale_components():
    preds = _toy_preds([[[0.3], [-1.0]]], [[[1, 2, 3, 4], [2, 2, 2, 2]]], [[0.1, 0.2]])
    targets = _toy_targets([[1, 0]], [[[2, 2, 2, 2], [0, 0, 0, 0]]], [[0.5, 0]])
    w = LossWeights(cls=2.0, loc=0.5, ctr=3.0)
    out = detection_loss(preds, targets, "agnostic", w)
    p = out.scalars()
    assert float(out.total) == pytest.approx(2 * p["cls"] + 0.5 * p["loc"] + 3 * p["ctr"], abs=1e-12)


def test_perfect_fit_loss():
    offsets = [[[3.0, 4.0, 5.0, 6.0], [2.0, 2.0, 2.0, 2.0]]]
    ctr_t = np.array([[1.0, 0.0]])
    targets = _toy_targets([[1, 1]], offsets, ctr_t)
    # saturated logits: +/-40 gives probabilities within 1e-17 of the targets
    preds = _toy_preds([[[40.0], [40.0]]], offsets, [[40.0, -40.0]])
    out = detection_loss(preds, targets, "agnostic").scalars()
    assert out["loc"] == 0.0
    assert out["ctr"] == pytest.approx(0.0, abs=1e-15)
    assert out["cls"] == pytest.approx(0.0, abs=1e-15)

    # with a soft centerness target the loss floor is the target's entropy
    ctr_t = np.array([[0.3, 0.3]])
    logit = math.log(0.3 / 0.7)
    out = detection_loss(_toy_preds([[[40.0], [40.0]]], offsets, [[logit, logit]]),
                         _toy_targets([[1, 1]], offsets, ctr_t), "agnostic").scalars()
    entropy = -(0.3 * math.log(0.3) + 0.7 * math.log(0.7))
    assert out["ctr"] == pytest.approx(entropy, abs=1e-12)


def test_all_background_loss():
    preds = _toy_preds([[[0.5], [-2.0]]], [[[1, 1, 1, 1], [1, 1, 1, 1]]], [[0.0, 0.0]])
    out = detection_loss(preds, _toy_targets([[0, 0]], np.zeros((1, 2, 4)), [[0, 0]]), "agnostic")
    p = out.scalars()
    assert p["loc"] == 0.0 and p["ctr"] == 0.0
    assert p["cls"] == pytest.approx(_scalar_focal(0.5, 0) + _scalar_focal(-2.0, 0), abs=1e-12)


def test_agnostic_mode_requires_single_class():
    preds = _toy_preds(np.zeros((1, 2, 3)), np.ones((1, 2, 4)), np.zeros((1, 2)))
    with pytest.raises(ValueError, match="single-class"):
        detection_loss(preds, _toy_targets([[0, 0]], np.zeros((1, 2, 4)), [[0, 0]]), "agnostic")
    with pytest.raises(ValueError, match="mode"):
        detection_loss(preds, _toy_targets([[0, 0]], np.zeros((1, 2, 4)), [[0, 0]]), "other")


def test_mode_equivalence_with_one_class():
    model = build_detector(DetectorConfig(num_classes=1), seed=0).double()
    im = generate_image(SynthSpec(seed=0, num_images=1), 0)
    x = torch.from_numpy(np.array(np.transpose(im.pixels, (2, 0, 1))[None])).double()
    insts = [Instance(i.bbox, i.mask, class_id=0) for i in im.instances]
    tm = assign_targets([insts], model.cfg, (64, 64))
    preds = model(x)
    a = detection_loss(preds, tm, "agnostic")
    s = detection_loss(preds, tm, "specific")
    assert float(a.total.detach()) == float(s.total.detach())
    assert a.scalars() == s.scalars()


def test_dice_cases():
    g = torch.zeros(1, 8, 8, dtype=torch.float64)
    g[0, 2:5, 1:6] = 1
    assert float(dice_loss(g.clone(), g)[0]) == 0.0
    disjoint = 1 - g
    assert float(dice_loss(disjoint, g)[0]) == 1.0

    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.uniform(size=(8, 8))
        t = (rng.uniform(size=(8, 8)) < 0.4).astype(float)
        want = 1 - 2 * sum(p[i, j] * t[i, j] for i in range(8) for j in range(8)) / (
            sum(p[i, j] for i in range(8) for j in range(8)) + sum(t[i, j] for i in range(8) for j in range(8))
        )
        got = float(dice_loss(torch.from_numpy(p)[None], torch.from_numpy(t)[None])[0])
        assert got == pytest.approx(want, abs=1e-9)


def test_mask_loss_zero_without_positives():
    model = build_detector(CFG, seed=0)
    preds = model(_zeros())
    tm = assign_targets([[]], CFG, (64, 64))
    assert float(mask_loss(preds, tm, [[]], CFG.dynamic_width)) == 0.0


def test_mask_loss_in_unit_interval():
    cfg = DetectorConfig(num_classes=1)
    model = build_detector(cfg, seed=0)
    im = generate_image(SynthSpec(seed=1, num_images=1), 0)
    tm = assign_targets([list(im.instances)], cfg, (64, 64))
    loss = mask_loss(model(torch.from_numpy(np.array(np.transpose(im.pixels, (2, 0, 1))[None]))), tm,
                     [[i.mask for i in im.instances]], cfg.dynamic_width)
    assert 0.0 < float(loss) < 1.0
    loss.backward()


# inference


def _synth(seed=0):
    return generate_image(SynthSpec(seed=seed, num_images=1), 0)


def test_floor_one_gives_nothing():
    model = build_detector(CFG, seed=0)
    assert infer(model, _synth(), score_floor=1.0) == []


def test_duplicate_boxes_one_survives():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
    assert list(nms(boxes, np.array([0.9, 0.8]), 0.5)) == [0]
    assert list(nms(boxes, np.array([0.9, 0.8]), 0.5, labels=np.array([0, 1]))) == [0, 1]


def _reference_nms(boxes, scores, thr, labels=None):
    def iou(a, b):
        iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
        ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
        inter = iw * ih
        union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
        return inter / union if union > 0 else 0.0

    remaining = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    while remaining:
        i = remaining.pop(0)
        keep.append(i)
        remaining = [
            j for j in remaining
            if not ((labels is None or labels[i] == labels[j]) and iou(boxes[i], boxes[j]) > thr)
        ]
    return keep


@pytest.mark.parametrize("mode", ["agnostic", "specific"])
def test_infer_matches_reference_nms(mode):
    cfg = DetectorConfig(num_classes=1 if mode == "agnostic" else 3)
    for seed in range(3):
        model = build_detector(cfg, seed=seed)
        with torch.no_grad():
            # spread the regressions so boxes overlap partially
            model.head.reg.weight.normal_(std=0.3, generator=torch.Generator().manual_seed(seed))
        im = _synth(seed)
        dets = infer(model, im, score_floor=0.05, nms_iou=0.5, mode=mode, with_masks=False)
        with torch.no_grad():
            preds = model(torch.from_numpy(np.array(np.transpose(im.pixels, (2, 0, 1))[None])))
        cand = decode_candidates(preds, 0, (64, 64), 0.05)
        assert len(cand.scores) > 10
        keep = _reference_nms(cand.boxes.tolist(), cand.scores.tolist(), 0.5,
                              None if mode == "agnostic" else cand.labels.tolist())
        assert [d.bbox.as_tuple() for d in dets] == [tuple(cand.boxes[i]) for i in keep]
        assert [d.score for d in dets] == [cand.scores[i] for i in keep]
        assert all(a.score >= b.score for a, b in zip(dets, dets[1:]))


def test_infer_is_deterministic_and_pure():
    model = build_detector(CFG, seed=0)
    im = _synth()
    before = [p.detach().clone() for p in model.parameters()]
    a = infer(model, im)
    b = infer(model, im)
    assert [d.bbox for d in a] == [d.bbox for d in b]
    assert all(np.array_equal(x.mask.data, y.mask.data) for x, y in zip(a, b) if x.mask is not None)
    assert all(torch.equal(p, q) for p, q in zip(before, model.parameters()))
    assert model.training


def test_infer_masks_inside_boxes_and_scores_above_floor():
    model = build_detector(DetectorConfig(num_classes=1), seed=3)
    dets = infer(model, _synth(2), score_floor=0.05)
    assert dets
    for d in dets:
        assert d.score > 0.05 and d.class_id is None
        if d.mask is not None:
            ys, xs = np.nonzero(d.mask.data)
            assert xs.min() + 0.5 >= d.bbox.x1 and xs.max() + 0.5 <= d.bbox.x2
            assert ys.min() + 0.5 >= d.bbox.y1 and ys.max() + 0.5 <= d.bbox.y2


def test_infer_unknown_mode():
    with pytest.raises(ValueError, match="mode"):
        infer(build_detector(CFG, seed=0), _synth(), mode="bogus")

