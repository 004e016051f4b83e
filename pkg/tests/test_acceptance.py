"""Acceptance criteria 1-9 at their stated tolerances and runtime budgets.

Each test records one PASS/FAIL line (see conftest.py) before asserting, so
the terminal summary lists every criterion even when some fail.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from msflow import cli
from msflow import flownet as FN
from msflow import tensor as T
from msflow.dataset import write_synthetic
from msflow.encoder import (Backbone, EncoderTrainConfig, TrainSample, contrastive_loss, extract_features,
                            make_state, toy_config, train_encoder)
from msflow.evaluation import (EvalError, KeypointAnnotation, coseg_iou, dense_flow_pck, mask_iou, nn_match, pck,
                               weighted_iou)
from msflow.flownet import (IDENTITY, Frame, FlowModel, FlowNetConfig, FlowSample, FlowTrainConfig,
                            affine_warp, dense_map, endpoint_error, loss_affine, loss_corr, loss_flow, loss_mask,
                            loss_total, make_flow_model, pair_losses, predict, proxy_mask, segment, train_flownet)
from msflow.gradcheck import check_gradients
from msflow.miner import MinerConfig, exhaustive_minimum, mine_pair, random_problem, solve_trws
from msflow.msconv import MSConvConfig, MultiScaleConv, parse_weight_report, weight_report
from msflow.rng import stream
from msflow.synthetic import blob_pair, sample_correspondences, self_pair, translation_pair, warp_pair

INSTANCES = 20


def rng_for(criterion_number, *names):
    return stream(criterion_number, *names)


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

def _gradient_cases():
    """(name, tolerance, builder) where builder(rng) -> (fn, inputs)."""
    def conv(d):
        def build(rng):
            x = T.tensor(rng.normal(size=(1, 2, 2 * d + 5, 2 * d + 4)))
            k = T.tensor(rng.normal(size=(2, 2, 3, 3)))
            b = T.tensor(rng.normal(size=2))
            return (lambda: T.conv2d(x, k, b, dilation=d, padding=d)), [x, k, b]
        return build

    def msconv(rng):
        layer = MultiScaleConv(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2), MSConvConfig(), rng.normal(size=5))
        x = T.tensor(rng.normal(size=(1, 2, 11, 11)))
        proj = T.tensor(rng.normal(size=(1, 2, 11, 11)))
        return (lambda: (layer(x) * proj).sum()), [x, layer.kernel, layer.bias, layer.mixture_logits]

    def grid_sample(rng):
        x = T.tensor(rng.normal(size=(1, 2, 4, 5)))
        g = T.tensor(rng.uniform(-1.1, 1.1, size=(1, 3, 3, 2)))
        proj = T.tensor(rng.normal(size=(1, 2, 3, 3)))
        return (lambda: T.grid_sample(x, g) * proj), [x, g]

    fr = Frame(16, 20, 4, 4, 5)

    def l_aff(rng):
        f_s, f_t = T.tensor(rng.normal(size=(1, 3, 4, 5))), T.tensor(rng.normal(size=(1, 3, 4, 5)))
        theta = T.tensor(IDENTITY + rng.normal(0, 0.05, 6))
        return (lambda: loss_affine(f_s, affine_warp(f_t, theta, fr))), [f_s, f_t, theta]

    def l_flow(rng):
        model = FlowModel(3, (4, 4), FlowNetConfig(loc_channels=3, channels=(3, 4)), rng)
        frame = Frame(16, 16, 4, 4, 4)
        f_s, f_t = T.tensor(rng.normal(size=(1, 3, 4, 4))), T.tensor(rng.normal(size=(1, 3, 4, 4)))
        head = model.refine.flow_head
        head.kernel.data = rng.normal(0, 0.1, head.kernel.shape).astype(np.float32)
        return (lambda: loss_flow(f_s, model(f_s, f_t, frame).f_flow)), [f_t, head.kernel, head.bias]

    def l_corr(rng):
        theta = T.tensor(IDENTITY + rng.normal(0, 0.05, 6))
        flow = T.tensor(rng.normal(0, 0.05, (1, 2, 4, 5)))
        c = rng.uniform(3, 13, (6, 4))
        return (lambda: loss_corr(c, theta, flow, fr)), [theta, flow]

    def l_mask(rng):
        logits = T.tensor(rng.normal(size=(1, 1, 6, 6)))
        m = rng.uniform(size=(1, 1, 6, 6)) > 0.5
        return (lambda: loss_mask(T.sigmoid(logits), m)), [logits]

    def contrastive(rng):
        a, b = T.tensor(rng.normal(0, 0.4, (6, 4))), T.tensor(rng.normal(0, 0.4, (6, 4)))
        pos = rng.uniform(size=6) < 0.5
        return (lambda: contrastive_loss(a, b, pos, 1.0)), [a, b]

    def chain(rng):
        model = FlowModel(2, (4, 4), FlowNetConfig(loc_channels=4, channels=(4, 6)), rng)
        model.loc.weight.data = rng.normal(0, 0.05, model.loc.weight.shape).astype(np.float32)
        for head in (model.refine.flow_head, model.refine.seg_head):
            head.kernel.data = rng.normal(0, 0.05, head.kernel.shape).astype(np.float32)
        frame = Frame(16, 16, 4, 4, 4)
        f_s = T.l2_normalize(T.tensor(rng.normal(size=(1, 2, 4, 4))), axis=1)
        f_t = T.l2_normalize(T.tensor(rng.normal(size=(1, 2, 4, 4))), axis=1)
        c = rng.uniform(3, 12, (5, 4))
        params = [model.loc.weight, model.loc.bias, model.refine.flow_head.bias, model.refine.seg_head.bias]
        return (lambda: pair_losses(model, f_s, f_t, frame, c)[0]), params

    cases = [(f"conv2d d={d}", 1e-4, conv(d)) for d in range(1, 6)]
    cases += [("msconv", 1e-4, msconv), ("grid_sample", 1e-3, grid_sample), ("L_aff", 1e-3, l_aff),
              ("L_flow", 1e-3, l_flow), ("L_corr", 1e-3, l_corr), ("L_mask", 1e-4, l_mask),
              ("contrastive", 1e-4, contrastive), ("affine/flow chain", 1e-3, chain)]
    return cases


def test_criterion_1_gradients(criterion):
    t0 = time.time()
    worst, failures = {}, []
    for name, tol, build in _gradient_cases():
        for seed in range(INSTANCES):
            fn, inputs = build(rng_for(1, seed, len(name)))
            err = max(check_gradients(fn, inputs))
            worst[name] = max(worst.get(name, 0.0), err)
            if not err < tol:
                failures.append((name, seed, err))
    elapsed = time.time() - t0
    detail = f"{len(worst)} ops x {INSTANCES} instances, worst rel err {max(worst.values()):.1e}, {elapsed:.0f}s"
    ok = criterion(1, not failures and elapsed < 120, detail)
    assert not failures, failures[:5]
    assert ok, detail


# ---------------------------------------------------------------------------
# 2. msconv degeneracy
# ---------------------------------------------------------------------------

def test_criterion_2_msconv(criterion):
    t0 = time.time()
    rng = rng_for(2)
    layer = MultiScaleConv(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), MSConvConfig(), np.zeros(5))
    x = T.tensor(rng.normal(size=(2, 2, 12, 13)))

    def branch(d):
        return T.relu(T.conv2d(x, layer.kernel, layer.bias, dilation=d, padding=d)).data

    one_hot = 0.0
    for hot in range(5):
        logits = np.full(5, -60.0)
        logits[hot] = 60.0
        layer.mixture_logits.data = logits.astype(np.float32)
        one_hot = max(one_hot, float(np.abs(layer(x).data - branch(hot + 1)).max()))
    layer.mixture_logits.data = np.zeros(5, np.float32)
    uniform = float(np.abs(layer(x).data - np.mean([branch(d) for d in range(1, 6)], axis=0)).max())
    opt = T.SGD(layer.parameters(), lr=0.5, momentum=0.9)
    for _ in range(100):
        xi = T.tensor(rng.normal(size=(1, 2, 11, 11)))
        opt.zero_grad()
        (layer(xi) * T.tensor(rng.normal(size=(1, 3, 11, 11)))).sum().backward()
        opt.step()
    drift = abs(float(layer.mixture_weights().sum()) - 1.0)
    elapsed = time.time() - t0
    ok = one_hot < 1e-5 and uniform < 1e-5 and drift < 1e-6 and elapsed < 30
    criterion(2, ok, f"one-hot err {one_hot:.1e}, uniform err {uniform:.1e}, |sum-1| {drift:.1e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. TRW-S oracle
# ---------------------------------------------------------------------------

def test_criterion_3_trws(criterion):
    t0 = time.time()
    optimal = bound_violations = one_to_one_violations = 0
    for seed in range(500):
        prob = random_problem(rng_for(3, seed), max_nodes=8, max_labels=3)
        res = solve_trws(prob, 50)
        _, best = exhaustive_minimum(prob)
        optimal += res.energy <= best + 1e-6
        bound_violations += res.energy < res.lower_bound - 1e-9 or res.lower_bound > best + 1e-6
        targets = list(prob.assigned_targets(res.labeling).values())
        one_to_one_violations += len(set(targets)) != len(targets)
    elapsed = time.time() - t0
    rate = optimal / 500
    ok = rate >= 0.95 and bound_violations == 0 and one_to_one_violations == 0 and elapsed < 60
    criterion(3, ok, f"optimum in {rate:.1%}, bound violations {bound_violations}, "
                     f"one-to-one violations {one_to_one_violations}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4. mining recovery (its mined pairs also feed criterion 5)
# ---------------------------------------------------------------------------

NOISE = 0.15


@pytest.fixture(scope="module")
def mined():
    backbone = Backbone(toy_config(None), rng_for(4, "backbone"))
    pairs = [translation_pair(rng_for(4, "pair", i), size=64, noise=NOISE) for i in range(50)]
    t0 = time.time()
    results = [mine_pair(p.source, p.target, backbone, MinerConfig(), f"t{i}") for i, p in enumerate(pairs)]
    selfs = [self_pair(rng_for(4, "self", i), size=64) for i in range(10)]
    self_results = [mine_pair(p.source, p.target, backbone, MinerConfig(), f"s{i}") for i, p in enumerate(selfs)]
    return pairs, results, self_results, time.time() - t0


def test_criterion_4_mining(criterion, mined):
    pairs, results, self_results, elapsed = mined
    good = total = 0
    for p, cs in zip(pairs, results):
        for c in cs:
            gt = p.map_points(np.array([[c.x_s, c.y_s]]))[0]
            good += np.hypot(c.x_t - gt[0], c.y_t - gt[1]) < c.stride
            total += 1
    self_good = sum(np.hypot(c.x_s - c.x_t, c.y_s - c.y_t) <= 1 for cs in self_results for c in cs)
    self_total = sum(len(cs) for cs in self_results)
    acc, self_acc = good / max(total, 1), self_good / max(self_total, 1)
    ok = acc >= 0.8 and self_acc >= 0.9 and elapsed < 300
    criterion(4, ok, f"{acc:.1%} of {total} matches within one stride, self-pairs {self_acc:.1%} within 1 px, "
                     f"{elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5. encoder end to end
# ---------------------------------------------------------------------------

def _held_out_pck(backbone, pairs):
    anns, preds = [], []
    for i, p in enumerate(pairs):
        pts = rng_for(5, "kp", i).uniform(8, 56, (20, 2))
        gt = p.map_points(pts)
        ok = (gt >= 0).all(1) & (gt <= 63).all(1)
        with T.no_grad():
            fs, ft = extract_features(p.source, backbone), extract_features(p.target, backbone)
        preds.append(nn_match(fs, ft, pts[ok], backbone.stride))
        anns.append(KeypointAnnotation(str(i), pts[ok], gt[ok], (64, 64), (64, 64)))
    return pck(anns, preds, alphas=(0.1,)).value(0.1)


def test_criterion_5_encoder(criterion, mined):
    pairs, results, _, _ = mined
    samples = [TrainSample(p.source, p.target, np.array([c.as_row() for c in cs]), pair_id=f"t{i}")
               for i, (p, cs) in enumerate(zip(pairs, results)) if cs]
    held = [translation_pair(rng_for(5, "held", i), size=64, noise=NOISE) for i in range(30)]
    t0 = time.time()
    random_pck = _held_out_pck(Backbone(toy_config(MSConvConfig()), rng_for(5, "random")), held)
    encoder = Backbone(toy_config(MSConvConfig()), rng_for(5, "trained"))
    cfg = EncoderTrainConfig(seed=5)
    train_encoder(samples, encoder, 20, 0.02, cfg, make_state(encoder, cfg))
    trained_pck = _held_out_pck(encoder, held)
    elapsed = time.time() - t0
    ok = trained_pck >= 0.9 and random_pck <= 0.3 and elapsed < 600
    criterion(5, ok, f"held-out PCK@0.1 trained {trained_pck:.3f} vs random-init {random_pck:.3f}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6. flownet recovery
# ---------------------------------------------------------------------------

def _warp_sample(key, i):
    rng = rng_for(6, key, i)
    p = warp_pair(rng, 64, residual=4.0)
    return p, FlowSample(p.source, p.target, sample_correspondences(p, rng, 100, margin=2), f"{key}{i}")


def test_criterion_6_flownet(criterion):
    t0 = time.time()
    train = [_warp_sample("train", i) for i in range(60)]
    held = [_warp_sample("held", i) for i in range(10)]
    encoder = Backbone(toy_config(None), rng_for(6, "encoder"))
    train_encoder([TrainSample(p.source, p.target, s.correspondences) for p, s in train[:40]], encoder, 8, 0.05,
                  EncoderTrainConfig(seed=6))
    model = make_flow_model(encoder, (64, 64), FlowNetConfig(), seed=6)
    init = predict(model, encoder, held[0][0].source, held[0][0].target)
    identity = (np.array_equal(init.theta.data, IDENTITY.astype(np.float32)) and not init.flow.data.any())
    train_flownet([s for _, s in train], encoder, model, FlowTrainConfig(epochs=12, seed=6))
    epe = float(np.mean([endpoint_error(dense_map(predict(model, encoder, p.source, p.target)), p.forward_map,
                                        p.inside_target()) for p, _ in held]))
    elapsed = time.time() - t0
    ok = identity and epe < 1.5 and elapsed < 600
    criterion(6, ok, f"held-out mean EPE {epe:.2f} px, exact identity at step 0: {identity}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 7. segmentation
# ---------------------------------------------------------------------------

def _blob_sample(key, i):
    rng = rng_for(7, key, i)
    p = blob_pair(rng, 64)
    corr = sample_correspondences(p, rng, 150, mask=p.source_mask, margin=2, inset=5.0)
    return p, FlowSample(p.source, p.target, corr, f"{key}{i}")


def test_criterion_7_segmentation(criterion):
    t0 = time.time()
    gx, gy = np.meshgrid(np.arange(32), np.arange(32))
    disk_exact = np.array_equal(proxy_mask(np.array([[10.0, 10.0]]), 32, 32, 5.0),
                                (gx - 10) ** 2 + (gy - 10) ** 2 <= 25)
    train = [_blob_sample("train", i) for i in range(40)]
    held = [_blob_sample("held", i) for i in range(10)]
    encoder = Backbone(toy_config(None), rng_for(7, "encoder"))
    train_encoder([TrainSample(p.source, p.target, s.correspondences) for p, s in train[:30]], encoder, 6, 0.05,
                  EncoderTrainConfig(seed=7))
    model = make_flow_model(encoder, (64, 64), FlowNetConfig(), seed=7)
    train_flownet([s for _, s in train], encoder, model, FlowTrainConfig(epochs=10, seed=7))
    ious = []
    for p, _ in held:
        seg = segment(model, encoder, p.source, p.target)
        ious += [mask_iou(seg.mask_source, p.source_mask), mask_iou(seg.mask_target, p.target_mask)]
    iou = float(np.mean(ious))
    elapsed = time.time() - t0
    ok = disk_exact and iou > 0.7 and elapsed < 600
    criterion(7, ok, f"held-out mask IoU {iou:.3f}, radius-5 proxy disk exact: {disk_exact}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 8. metric arithmetic
# ---------------------------------------------------------------------------

def test_criterion_8_metrics(criterion):
    checks = {}
    gt = np.array([[40.0, 50.0]])
    ann = KeypointAnnotation("p", gt, gt, (100, 100), (100, 100))
    checks["pck exact"] = pck([ann], [gt]).values() == {0.05: 1.0, 0.1: 1.0, 0.15: 1.0}
    off = gt + [0.07 * np.hypot(100, 100), 0]
    checks["pck 0.07"] = pck([ann], [off]).values() == {0.05: 0.0, 0.1: 1.0, 0.15: 1.0}
    bb = KeypointAnnotation("b", gt, gt, (100, 100), (100, 100), target_bbox=(0, 0, 40, 20))
    checks["pck bbox"] = (pck([bb], [gt + [3.9, 0]], (0.1,), "bbox").value(0.1) == 1.0
                          and pck([bb], [gt + [4.0, 0]], (0.1,), "bbox").value(0.1) == 0.0)
    try:
        pck([KeypointAnnotation("nobox", gt, gt, (100, 100), (100, 100))], [gt], (0.1,), "bbox")
        checks["pck bbox error"] = False
    except EvalError as e:
        checks["pck bbox error"] = "nobox" in str(e)
    t1 = np.zeros((10, 10), bool)
    t1[0] = True
    t2 = np.zeros((10, 10), bool)
    t2[5:8] = True
    w2 = np.zeros((10, 10), bool)
    w2[5:8, :5] = True
    warped = {id(t1): t1, id(t2): w2}
    checks["weighted iou 0.625"] = weighted_iou([t1, t2], [t1, t2], lambda m: warped[id(m)]) == 0.625
    checks["weighted iou identity"] = weighted_iou([t2], [t2], lambda m: m) == 1.0
    checks["weighted iou disjoint"] = weighted_iou([t1], [t2], lambda m: m) == 0.0
    gx, gy = np.meshgrid(np.arange(100.0), np.arange(100.0))
    grid, full = np.stack([gx, gy], -1), np.ones((100, 100), bool)
    mixed = grid.copy()
    mixed[:, 50:, 0] += 10
    checks["dense pck perfect"] = dense_flow_pck(grid, grid, full) == 1.0
    checks["dense pck 6px"] = dense_flow_pck(grid, grid + [6.0, 0], full) == 0.0
    mixed_pcks = [dense_flow_pck(grid, mixed, full, n_samples=1000, seed=s) for s in (0, 1)]
    checks["dense pck mixed"] = all(abs(v - 0.5) <= 0.05 for v in mixed_pcks)
    checks["dense pck seed spread"] = abs(mixed_pcks[0] - mixed_pcks[1]) < 0.05
    checks["coseg perfect"] = coseg_iou([t1, t2], [t1, t2]) == 1.0
    checks["coseg empty"] = coseg_iou([np.zeros((10, 10), bool)], [t2]) == 0.0
    checks["loss total 7"] = loss_total(1.0, 1.0, 1.0, 1.0, gamma=4, mu=1, nu=1) == 7.0
    rng = rng_for(8)
    layers = [MultiScaleConv(rng.normal(size=(2, 2, 3, 3)), np.zeros(2), MSConvConfig(), rng.normal(size=5))
              for _ in range(4)]
    report = weight_report(layers)
    dilations, rows = parse_weight_report(report)
    checks["weight report layout"] = (report.splitlines()[0].split("|")[0].strip() == "Layer"
                                      and dilations == [1, 2, 3, 4, 5] and list(rows) == [f"Conv{i}" for i in range(1, 5)]
                                      and all(abs(sum(r) - 1) <= 1e-6 for r in rows.values()))
    failed = [k for k, v in checks.items() if not v]
    criterion(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} fixtures exact"
                             + (f", failed: {failed}" if failed else ""))
    assert not failed


# ---------------------------------------------------------------------------
# 9. determinism of the command line
# ---------------------------------------------------------------------------

def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(criterion, tmp_path):
    data = write_synthetic(tmp_path / "data", 4, 64, seed=9)
    base = f"profile: toy\nseed: 9\ndata: {{path: {data}}}\n"
    (tmp_path / "enc.yaml").write_text(base + "encoder: {epochs: 2}\n")
    results = {}
    for cmd, cfg in (("mine", "enc.yaml"), ("train-encoder", "enc.yaml")):
        for jobs in (1, 4):
            out = tmp_path / f"{cmd}-{jobs}"
            assert cli.main([cmd, "--config", str(tmp_path / cfg), "--jobs", str(jobs), "--out", str(out)]) == 0
        results[cmd] = _tree(tmp_path / f"{cmd}-1") == _tree(tmp_path / f"{cmd}-4")
    enc = tmp_path / "train-encoder-1" / "encoder"
    (tmp_path / "flow.yaml").write_text(base + f"encoder: {{checkpoint: {enc}}}\nflow: {{epochs: 1}}\n")
    assert cli.main(["train-flow", "--config", str(tmp_path / "flow.yaml"), "--out", str(tmp_path / "flow")]) == 0
    (tmp_path / "match.yaml").write_text(
        base + f"encoder: {{checkpoint: {enc}}}\nflow: {{checkpoint: {tmp_path / 'flow' / 'flow'}}}\n")
    for jobs in (1, 4):
        assert cli.main(["match", "--config", str(tmp_path / "match.yaml"), "--jobs", str(jobs),
                         "--out", str(tmp_path / f"match-{jobs}")]) == 0
    results["match"] = _tree(tmp_path / "match-1") == _tree(tmp_path / "match-4")
    nonempty = all(len(_tree(tmp_path / f"{c}-1")) > 1 for c in ("mine", "train-encoder", "match"))
    ok = all(results.values()) and nonempty
    criterion(9, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in results.items())
              + " across --jobs 1 and --jobs 4")
    assert ok
