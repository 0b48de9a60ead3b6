"""Acceptance suite: one test per shipped guarantee.

Each test here states a quantitative promise of the package at a pinned
tolerance, so `pytest -v tests/test_acceptance.py` reads as a checklist.
The desk-scale training test generates and trains at full size and takes
several minutes; everything else is seconds.
"""

import os
import time
from itertools import permutations

import numpy as np
import pytest

from cuboidlift import cli, kitti_io
from cuboidlift import dataset as ds
from cuboidlift import lifter as lf
from cuboidlift import metrics as mt
from cuboidlift import pose
from cuboidlift.crossratio import (
    DEFAULT_GATE,
    cr_loss,
    cross_ratio,
    edge_quadruples,
    target_cr,
)
from cuboidlift.geometry import (
    DEFAULT_INTERP,
    TAU,
    BehindCameraError,
    Cuboid,
    PointSet2D,
    build_psi,
    build_tau,
    crop_transform,
    project,
    tight_bbox,
    to_local,
)


def test_01_projective_invariance():
    # >= 1000 random (cuboid, intrinsics, crop) triples: every ungated
    # projected edge quadruple has cross-ratio 1.125 within 1e-9, < 5 s
    start = time.time()
    rng = np.random.default_rng(101)
    quads = np.asarray(edge_quadruples(TAU), dtype=int)
    pair_iu = np.triu_indices(4, 1)
    assert target_cr(DEFAULT_INTERP).cr == 1.125
    triples = 0
    ungated = 0
    while triples < 1000:
        dims = tuple(rng.uniform((1.0, 1.0, 2.0), (2.0, 2.5, 5.0)))
        camera = ds.Camera(
            fx=rng.uniform(300.0, 2000.0),
            fy=rng.uniform(300.0, 2000.0),
            cx=rng.uniform(400.0, 900.0),
            cy=rng.uniform(100.0, 300.0),
            width=1242,
            height=375,
        )
        z = rng.uniform(8.0, 60.0)
        x = (rng.uniform(0.2, 0.8) * camera.width - camera.cx) / camera.fx * z
        y = (rng.uniform(0.3, 0.7) * camera.height - camera.cy) / camera.fy * z
        cuboid = Cuboid(dims=dims, centroid=(x, y, z),
                        yaw=rng.uniform(-np.pi, np.pi))
        try:
            phi = project(build_tau(cuboid), camera)
        except BehindCameraError:
            continue
        jitter = (rng.uniform(0.8, 1.2), rng.uniform(-0.1, 0.1),
                  rng.uniform(-0.1, 0.1))
        local = to_local(phi, crop_transform(tight_bbox(phi), jitter=jitter))
        quad_pts = local.points[quads]  # (n_quads, 4, 2)
        deltas = quad_pts[:, pair_iu[0]] - quad_pts[:, pair_iu[1]]
        min_gap = np.sqrt((deltas ** 2).sum(-1)).min(axis=1)
        for quad, gap in zip(quads, min_gap):
            if gap <= DEFAULT_GATE:
                continue
            pts = local.points[quad]
            assert abs(cross_ratio(*pts) - 1.125) < 1e-9
            ungated += 1
        triples += 1
    assert ungated > 2000
    assert time.time() - start < 5.0


def test_02_cross_ratio_loss_and_gradient():
    # loss vanishes on ground-truth projections (zero at double
    # precision: the smooth-L1 of a few-ulp rounding residual stays
    # below 1e-28); analytic gradient matches central differences to
    # relative error < 1e-5 on 100 perturbed point sets, < 10 s
    start = time.time()
    spec = ds.SampleSpec()
    quads = edge_quadruples(TAU)
    target = target_cr(DEFAULT_INTERP)
    rng = np.random.default_rng(202)

    worst = 0.0
    clean_sets = []
    for _ in range(100):
        _, pair = ds._accepted_pair(rng, spec, spec.camera, DEFAULT_INTERP)
        loss, _ = cr_loss(pair.phi_l, quads, target)
        worst = max(worst, loss)
        clean_sets.append(pair.phi_l.points)
    assert worst <= 1e-28

    h = 1e-6
    checked = 0
    for base in clean_sets:
        points = base + rng.normal(0.0, 0.02, size=base.shape)
        gaps = []
        for quad in quads:
            pts = points[list(quad)]
            gaps.append(min(np.linalg.norm(pts[i] - pts[j])
                            for i in range(4) for j in range(i + 1, 4)))
        # keep a differentiable neighborhood: no quadruple may sit on
        # the gate boundary where the active set flips
        if min(abs(g - DEFAULT_GATE) for g in gaps) < 1e-4:
            continue
        _, grad = cr_loss(PointSet2D(points=points, frame="local"), quads, target)
        flat_idx = rng.integers(0, points.size, size=8)
        for idx in flat_idx:
            probe = points.copy().reshape(-1)
            probe[idx] += h
            up, _ = cr_loss(PointSet2D(points=probe.reshape(points.shape),
                                       frame="local"), quads, target)
            probe[idx] -= 2 * h
            dn, _ = cr_loss(PointSet2D(points=probe.reshape(points.shape),
                                       frame="local"), quads, target)
            fd = (up - dn) / (2 * h)
            an = grad.reshape(-1)[idx]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            assert rel < 1e-5
        checked += 1
    assert checked >= 90
    assert time.time() - start < 10.0


def test_03_pose_recovery_oracle():
    # yaw recovered to < 1e-9 rad over a 360-point sweep with random
    # dimensions; with sigma=0.01 noise on unit cuboids the median over
    # 100 seeded trials stays below 1 degree
    rng = np.random.default_rng(303)
    template = pose.template_psi()
    for yaw in np.linspace(-np.pi, np.pi, 360, endpoint=False):
        dims = tuple(rng.uniform((1.0, 1.0, 2.0), (2.0, 2.5, 5.0)))
        psi = build_psi(Cuboid(dims=dims, centroid=(0.0, 0.0, 20.0), yaw=yaw))
        estimate = pose.recover_orientation(psi, template)
        assert abs(pose.wrap_angle(estimate.yaw - yaw)) < 1e-9

    errors = []
    for trial in range(100):
        trial_rng = np.random.default_rng(10_000 + trial)
        yaw = trial_rng.uniform(-np.pi, np.pi)
        psi = build_psi(Cuboid(dims=(1.0, 1.0, 1.0), centroid=(0.0, 0.0, 10.0),
                               yaw=yaw))
        noisy = psi.points + trial_rng.normal(0.0, 0.01, size=psi.points.shape)
        estimate = pose.recover_orientation(noisy, template)
        errors.append(abs(pose.wrap_angle(estimate.yaw - yaw)))
    assert np.degrees(np.median(errors)) < 1.0


def test_04_lifter_gradient_check():
    # every parameter group passes central finite differences at
    # relative error < 1e-4, dropout disabled, < 60 s.  The comparison
    # carries an absolute term at the difference quotient's own noise
    # floor (ulps of the loss over 2h): hidden-layer biases are exactly
    # cancelled by the following batch norm's mean subtraction, so their
    # true gradient is zero and a pure ratio would divide rounding noise
    # by itself.
    start = time.time()
    model = lf.LifterNet(rng=np.random.default_rng(404), dtype=np.float64,
                         dropout_rate=0.0)
    rng = np.random.default_rng(405)
    x = rng.standard_normal((4, lf.INPUT_DIM))
    t = rng.standard_normal((4, lf.OUTPUT_DIM))
    loss0, grads, _ = lf.batch_loss_and_grads(model, x, t)
    h = 1e-6
    noise_floor = 1e3 * np.finfo(float).eps * max(1.0, abs(loss0)) / (2 * h)
    assert set(grads) == set(model.params)
    for name in sorted(model.params):
        flat = model.params[name].reshape(-1)
        probe_idx = rng.integers(0, flat.size, size=5)
        for idx in probe_idx:
            orig = flat[idx]
            flat[idx] = orig + h
            up, _, _ = lf.batch_loss_and_grads(model, x, t)
            flat[idx] = orig - h
            dn, _, _ = lf.batch_loss_and_grads(model, x, t)
            flat[idx] = orig
            fd = (up - dn) / (2 * h)
            an = grads[name].reshape(-1)[idx]
            err = abs(fd - an)
            bound = 1e-4 * max(abs(fd), abs(an)) + noise_floor
            assert err < bound, f"{name}[{idx}]: err={err:g} bound={bound:g}"
    assert time.time() - start < 60.0


def _median_yaw_deg(model, data):
    n = data.inputs.shape[0]
    preds = model.predict(data.inputs, batch_size=1024).astype(float)
    preds = preds.reshape(n, -1, 3)
    template = pose.template_psi()
    errors = np.empty(n)
    for i in range(n):
        estimate = pose.recover_orientation(preds[i], template)
        errors[i] = abs(pose.wrap_angle(estimate.yaw - data.yaw[i]))
    return float(np.degrees(np.median(errors)))


def test_05_desk_scale_training(tmp_path_factory):
    # 100k-pair training run: median yaw error < 3 deg on clean inputs
    # and < 10 deg at sigma=2 px; the mixed run with the cross-ratio
    # term enabled (weights 1.0/0.1/0.005) must not trail the
    # cross-ratio-off plain baseline by more than 0.5 deg at sigma=2;
    # training plus evaluation inside 15 min (corpus generation happens
    # first and is not part of the timed procedure)
    root = tmp_path_factory.mktemp("desk")
    train_dir = os.path.join(root, "train")
    eval_dir = os.path.join(root, "eval")
    spec = ds.SampleSpec()
    ds.generate_to_dir(train_dir, seed=42, spec=spec, base_count=1015,
                       augment_factor=100, unlabeled_count=20000)
    ds.generate_to_dir(eval_dir, seed=43, spec=spec, base_count=5050)

    start = time.time()
    train_data = ds.load_training_data(train_dir, noise_sigma_px=1.0, seed=1)
    assert train_data.inputs.shape[0] >= 100_000
    eval_clean = ds.load_training_data(eval_dir, noise_sigma_px=0.0, seed=2)
    eval_noisy = ds.load_training_data(eval_dir, noise_sigma_px=2.0, seed=2)
    assert eval_clean.inputs.shape[0] >= 5_000

    def run(mixed, cr_enabled):
        config = lf.TrainConfig(
            lr=0.001, lr_decay=0.5, lr_decay_every=2, epochs=7,
            batch_size=256, w_2d=0.1, w_3d=1.0, w_cr=0.005,
            mixed=mixed, cr_enabled=cr_enabled, cr_warmup_epochs=1, seed=1,
        )
        model = lf.LifterNet(
            rng=np.random.default_rng(np.random.SeedSequence([1, 1]))
        )
        history = lf.train(model, train_data, config)
        return model, history

    mixed_model, mixed_history = run(mixed=True, cr_enabled=True)
    assert mixed_history[-1].loss_cr > 0.0  # the monitor actually reported
    plain_model, plain_history = run(mixed=False, cr_enabled=False)
    assert all(rec.loss_cr == 0.0 for rec in plain_history)

    clean_median = _median_yaw_deg(mixed_model, eval_clean)
    noisy_median = _median_yaw_deg(mixed_model, eval_noisy)
    plain_noisy_median = _median_yaw_deg(plain_model, eval_noisy)
    elapsed = time.time() - start

    assert clean_median < 3.0
    assert noisy_median < 10.0
    assert noisy_median <= plain_noisy_median + 0.5
    assert elapsed < 900.0


def _exact_curves(frame, iou_threshold, regime):
    """Brute-force AP/AOS for one frame: re-match at every score cutoff.

    The running similarity sum adds one detection at a time in score
    order so the float accumulation associates exactly like the
    package's cumulative sweep; everything else is recomputed fresh
    from an independent greedy match of each prefix.
    """

    def match(preds_subset):
        sub = mt.EvalFrame(gts=frame.gts, preds=preds_subset)
        return mt.match_detections(sub, iou_threshold, regime)

    order = sorted(range(len(frame.preds)),
                   key=lambda i: (-frame.preds[i].score, i))
    n_gt = match(()).n_valid_gt
    if n_gt == 0:
        raise ValueError("no ground truths in regime")
    points = []
    prev_count = 0
    sim_sum = 0.0
    for k in range(1, len(order) + 1):
        kept = sorted(order[:k])
        preds = [frame.preds[i] for i in kept]
        result = match(preds)
        count = len(preds) - len(result.ignored_preds)
        if count == prev_count:
            continue  # the newest detection was ignored, no new cutoff
        prev_count = count
        newest = kept.index(order[k - 1])
        matched = dict(result.pairs)
        if newest in matched:
            gt = frame.gts[matched[newest]]
            delta = preds[newest].rotation_y - gt.rotation_y
            sim_sum += (1.0 + np.cos(delta)) / 2.0
        tp = len(result.pairs)
        points.append((tp / n_gt, tp / count, sim_sum / count))
    ap_env = np.zeros(mt.RECALL_LEVELS.size)
    aos_env = np.zeros(mt.RECALL_LEVELS.size)
    for i, level in enumerate(mt.RECALL_LEVELS):
        hits = [(p, s) for r, p, s in points if r >= level]
        if hits:
            ap_env[i] = max(p for p, _ in hits)
            aos_env[i] = max(s for _, s in hits)
    return float(ap_env.mean()), float(aos_env.mean())


def test_06_metrics_oracle_equivalence():
    # exhaustive scenarios up to 4 detections x 3 ground truths with all
    # score orderings: the sweep equals brute-force re-matching exactly;
    # AOS <= AP on 10k random scenarios
    slots = [
        (0.0, 0.0, 50.0, 50.0),
        (10.0, 10.0, 60.0, 60.0),
        (100.0, 0.0, 150.0, 45.0),
        (100.0, 8.0, 150.0, 50.0),
        (200.0, 200.0, 240.0, 260.0),
    ]

    class R:
        def __init__(self, bbox, score=None, rotation_y=0.0, occlusion=0):
            self.bbox = bbox
            self.score = score
            self.rotation_y = rotation_y
            self.truncation = 0.0
            self.occlusion = occlusion

    checked = 0
    for n_gt in range(0, 4):
        for gt_variant in range(3):
            for occ_mask in range(2 ** n_gt):
                gts = [
                    R(slots[(j + gt_variant) % len(slots)],
                      rotation_y=0.37 * j,
                      occlusion=3 if occ_mask >> j & 1 else 0)
                    for j in range(n_gt)
                ]
                for n_det in range(0, 5):
                    for det_variant in range(3):
                        for perm in permutations(range(n_det)):
                            preds = [
                                R(slots[(i + det_variant) % len(slots)],
                                  score=1.0 - 0.1 * perm[i],
                                  rotation_y=0.37 * i + 0.21)
                                for i in range(n_det)
                            ]
                            frame = mt.EvalFrame(gts=gts, preds=preds)
                            regime = mt.MODERATE
                            try:
                                expected = _exact_curves(frame, 0.5, regime)
                            except ValueError:
                                with pytest.raises(ValueError):
                                    mt.average_precision([frame], 0.5, regime)
                                continue
                            got = (mt.average_precision([frame], 0.5, regime),
                                   mt.aos([frame], 0.5, regime))
                            assert got == expected  # bitwise
                            checked += 1
    assert checked > 3000

    rng = np.random.default_rng(606)
    verified = 0
    while verified < 10_000:
        n = int(rng.integers(1, 4))
        gts = []
        for _ in range(n):
            l, t = rng.uniform(0, 80), rng.uniform(0, 60)
            gts.append(R((l, t, l + rng.uniform(15, 60), t + rng.uniform(15, 60)),
                         rotation_y=float(rng.uniform(-np.pi, np.pi))))
        preds = []
        for i in range(int(rng.integers(0, 5))):
            src = gts[int(rng.integers(len(gts)))]
            jit = rng.uniform(-10, 10, size=4)
            bb = (src.bbox[0] + jit[0], src.bbox[1] + jit[1],
                  max(src.bbox[0] + jit[0] + 5, src.bbox[2] + jit[2]),
                  max(src.bbox[1] + jit[1] + 5, src.bbox[3] + jit[3]))
            preds.append(R(bb, score=float(rng.uniform(0, 1)),
                           rotation_y=float(rng.uniform(-np.pi, np.pi))))
        frame = mt.EvalFrame(gts=gts, preds=preds)
        ap = mt.average_precision([frame], 0.5, mt.ALL)
        assert mt.aos([frame], 0.5, mt.ALL) <= ap + 1e-12
        verified += 1


def test_07_orientation_similarity_algebra():
    # perfect detection with every angle off by pi scores AOS 0 while
    # AP stays 1; zero angle error makes AOS equal AP
    class R:
        def __init__(self, bbox, score=None, rotation_y=0.0):
            self.bbox = bbox
            self.score = score
            self.rotation_y = rotation_y
            self.truncation = 0.0
            self.occlusion = 0

    def build(delta):
        result = []
        for i in range(8):
            gt = R((0.0, 0.0, 80.0, 80.0), rotation_y=0.4)
            pred = R((0.0, 0.0, 80.0, 80.0), score=1.0 - 0.05 * i,
                     rotation_y=0.4 + delta)
            result.append(mt.EvalFrame(gts=[gt], preds=[pred]))
        return result

    flipped = build(np.pi)
    assert mt.average_precision(flipped, regime=mt.ALL) == 1.0
    assert mt.aos(flipped, regime=mt.ALL) == pytest.approx(0.0, abs=1e-12)

    aligned = build(0.0)
    ap = mt.average_precision(aligned, regime=mt.ALL)
    assert mt.aos(aligned, regime=mt.ALL) == ap
    assert ap == 1.0


def test_08_label_format_fidelity():
    # 1k generated records: parse of the written file is value-exact,
    # and write -> parse -> write reproduces the bytes
    rng = np.random.default_rng(808)
    classes = ("Car", "Van", "Truck", "Pedestrian", "Cyclist", "DontCare")

    def q6(x):
        return round(float(x), 6)

    records = []
    for i in range(1000):
        left = q6(rng.uniform(0, 1000))
        top = q6(rng.uniform(0, 300))
        record = kitti_io.DetectionRecord(
            class_name=classes[int(rng.integers(len(classes)))],
            truncation=q6(rng.uniform(0, 1)),
            occlusion=int(rng.integers(0, 4)),
            alpha=q6(rng.uniform(-np.pi + 1e-6, np.pi - 1e-6)),
            bbox=(left, top, q6(left + rng.uniform(1, 300)),
                  q6(top + rng.uniform(1, 70))),
            dims=(q6(rng.uniform(0.5, 3)), q6(rng.uniform(0.5, 3)),
                  q6(rng.uniform(1, 20))),
            location=(q6(rng.uniform(-40, 40)), q6(rng.uniform(-3, 3)),
                      q6(rng.uniform(0.1, 90))),
            rotation_y=q6(rng.uniform(-np.pi + 1e-6, np.pi - 1e-6)),
            score=q6(rng.uniform(0, 1)) if i % 2 else None,
        )
        records.append(record)

    text = kitti_io.write_result_file(records)
    parsed = kitti_io.parse_label_file(text)
    assert len(parsed) == 1000
    for orig, back in zip(records, parsed):
        assert back.class_name == orig.class_name
        assert back.truncation == orig.truncation
        assert back.occlusion == orig.occlusion
        assert back.alpha == orig.alpha
        assert back.bbox == orig.bbox
        assert back.dims == orig.dims
        assert back.location == orig.location
        assert back.rotation_y == orig.rotation_y
        assert back.score == orig.score

    again = kitti_io.write_result_file(parsed)
    assert again == text
    assert kitti_io.write_result_file(kitti_io.parse_label_file(again)) == again


def test_09_pipeline_determinism(tmp_path):
    # gen, train and eval rerun with the same seed and configuration
    # produce byte-identical artifact trees

    def tree_bytes(root):
        out = {}
        for base, _, files in os.walk(root):
            for name in files:
                path = os.path.join(base, name)
                with open(path, "rb") as fh:
                    out[os.path.relpath(path, root)] = fh.read()
        return out

    def run(*argv):
        assert cli.main(list(argv)) == 0

    data = os.path.join(tmp_path, "data")
    train = os.path.join(tmp_path, "train")
    evald = os.path.join(tmp_path, "eval")

    trees = []
    for attempt in range(2):
        force = ["--force"] if attempt else []
        run("gen", "--out", data, "--seed", "3", "--pairs", "12",
            "--augment", "2", "--unlabeled", "10", *force)
        run("train", "--out", train, "--dataset", data, "--mode", "mixed",
            "--noise-sigma-px", "0.5", "--epochs", "2", "--batch-size", "16",
            "--seed", "4", *force)
        run("eval", "--out", evald, "--dataset", data,
            "--checkpoint", os.path.join(train, "checkpoint.bin"),
            "--sigmas", "0,1", *force)
        trees.append({
            "gen": tree_bytes(data),
            "train": tree_bytes(train),
            "eval": tree_bytes(evald),
        })

    for stage in ("gen", "train", "eval"):
        a, b = trees[0][stage], trees[1][stage]
        assert sorted(a) == sorted(b)
        for name in a:
            assert a[name] == b[name], f"{stage}/{name}"
