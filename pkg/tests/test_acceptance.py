"""Acceptance gate: one test and one printed PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary block at
the end of the pytest output lists every criterion with its measured numbers.
Tolerances below are the contract values and must not be loosened.
"""

import itertools
import sys
import time
from collections import Counter

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from _acceptance import record
from facebound.balt_net import FusionConfig, build_balt, shortcut_start
from facebound.datapipe import AugmentConfig, FaceDataset, apply_affine, apply_augmentation, load_annotations, sample_augmentation
from facebound.heatmaps import RasterizerConfig, decode_heatmaps, rasterize_boundaries, rasterize_landmarks
from facebound.metrics import ced_auc, failure_rate, nme
from facebound.schemas import flip_landmarks, get_schema, parse_schema
from facebound.scbe_net import ScbeConfig, StemConfig, build_scbe
from facebound.synth import synth_dataset
from facebound.trainer import TrainConfig, evaluate, predict_heatmaps, train_phase
from oracles import boundary_channel, failure_rate_count, nme_loop, step_auc

RASTER_TOL = 1e-6
RASTER_BUDGET_S = 60
FUSION_BUDGET_S = 60
GRAD_REL_TOL = 1e-3
GRAD_MAX_PARAMS = 10_000
GRAD_PROBES = 50
GRAD_STEPS = (1e-6, 3e-7, 1e-7, 3e-8, 1e-8)
GRAD_BUDGET_S = 300
METRIC_TOL = 1e-9
AUC_RESOLUTION = 1000
STRIDE = 4
OVERFIT_RATIO = 0.1
OVERFIT_NME = 0.05
OVERFIT_BUDGET_S = 600
AUG_TOL = 1e-6


# -- rasterizer ----------------------------------------------------------------


def test_rasterizer_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, union_exact, n_lines = 0.0, True, 0
    cfg = RasterizerConfig()
    for _ in range(25):  # 25 schemas x 4 curves = 100 polylines
        lengths = rng.integers(1, 9, size=4)
        idx = np.split(np.arange(lengths.sum()), np.cumsum(lengths)[:-1])
        text = f"schema r\nlandmarks {lengths.sum()}\n" + "".join(
            f"curve c{k} " + " ".join(map(str, ix)) + "\n" for k, ix in enumerate(idx)
        )
        schema = parse_schema(text)
        pts = rng.uniform(-2, 65, size=(lengths.sum(), 2))
        hm = rasterize_boundaries(pts, schema, cfg).data
        for k, ix in enumerate(idx):
            clipped = np.clip(pts[ix], 0, 63)
            want = boundary_channel(clipped, cfg.sigma_boundary, cfg.distance_cutoff,
                                    cfg.interpolation_samples_per_segment)
            worst = max(worst, float(np.abs(hm[k] - want).max()))
            n_lines += 1
        union_exact &= bool(np.array_equal(hm[4], hm[:4].max(axis=0)))
    elapsed = time.perf_counter() - t0
    ok = worst <= RASTER_TOL and union_exact and elapsed < RASTER_BUDGET_S and n_lines == 100
    record("rasterizer-oracle", ok, f"{n_lines} polylines, max |diff| {worst:.2e} (tol {RASTER_TOL:g}), "
           f"union==max exactly: {union_exact}, {elapsed:.1f}s (budget {RASTER_BUDGET_S}s)")
    assert ok


# -- fusion ---------------------------------------------------------------------


def _pyramid(gen, ch=4, s=5):
    return [torch.randn(1, ch, 64 >> i, 64 >> i, generator=gen) for i in range(s)]


def test_fusion_algebra():
    t0 = time.perf_counter()
    bit_exact = 0
    for seed in range(20):
        gen = torch.Generator().manual_seed(seed)
        m = build_balt(16, 19, [4] * 5, FusionConfig(t=1), base_width=4, seed=seed).eval()
        feats = _pyramid(gen)
        with torch.no_grad():
            same = True
            for i in range(1, 5):
                f = torch.randn(1, 4 << (i - 1), 64 >> (i - 1), 64 >> (i - 1), generator=gen)
                a, fa = m.encode_step(f, feats, i)
                b, fb = m.encode_step_single(f, feats, i)
                same &= torch.equal(a, b) and torch.equal(fa, fb)
        bit_exact += int(same)

    mismatches = []
    gen = torch.Generator().manual_seed(99)
    feats = _pyramid(gen)
    for t, i in itertools.product(range(4), range(1, 6)):
        m = build_balt(16, 19, [4] * 5, FusionConfig(t=t, s=5), base_width=4, seed=t).eval()
        f = torch.randn(1, 4 << (i - 1), 64 >> (i - 1), 64 >> (i - 1), generator=gen)

        def run(fs):
            # levels 1..4 go through the full encoder step; level 5 is the bottleneck fusion
            return m.encode_step(f, fs, i)[0] if i < 5 else m.fuse(f, fs, i)

        with torch.no_grad():
            base = run(feats)
            depends = set()
            for j in range(1, 6):
                pert = list(feats)
                pert[j - 1] = feats[j - 1] + 1.0
                if not torch.equal(run(pert), base):
                    depends.add(j)
        want = set(range(shortcut_start(i, t), i + 1)) if t > 0 else set()
        if depends != want:
            mismatches.append((i, t, sorted(depends), sorted(want)))
    elapsed = time.perf_counter() - t0
    ok = bit_exact == 20 and not mismatches and elapsed < FUSION_BUDGET_S
    record("fusion-algebra", ok, f"t=1 vs single-fusion path bit-exact on {bit_exact}/20 instances; "
           f"dependency sets match m=max(1,i-t+1) for {20 - len(mismatches)}/20 (i,t) pairs, s=5; "
           f"{elapsed:.1f}s (budget {FUSION_BUDGET_S}s)" + (f"; mismatches {mismatches}" if mismatches else ""))
    assert ok


# -- gradient checks -------------------------------------------------------------


def _reset_(model):
    # default PyTorch init so activations are O(1) instead of the tiny training init
    for mod in model.modules():
        if hasattr(mod, "reset_parameters") and mod is not model:
            mod.reset_parameters()
    return model


def _probe_gradients(model, loss_fn, n_probes, seed):
    """Worst relative error of analytic vs central-difference gradients at random scalars.

    ReLU and max-pool kinks are dense on 256x256 inputs, so a large step can
    straddle one, while a small step drowns in the round-off of a loss summed
    over ~10^5 terms. Both show up as disagreement between the forward and
    backward one-sided slopes, so each probe uses the step from ``GRAD_STEPS``
    where the two agree best. Returns ``(worst_rel, chosen_steps)``.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    base = loss_fn()
    base.backward()
    base = base.item()
    grads = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=n_probes, replace=False)
    offsets = np.cumsum(sizes) - sizes
    eps = np.finfo(np.float64).eps
    worst, chosen = 0.0, []
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            view, idx = params[k].view(-1), int(f - offsets[k])
            orig = view[idx].item()
            analytic = grads[k].view(-1)[idx].item()
            trials = []
            for h in GRAD_STEPS:
                view[idx] = orig + h
                up = loss_fn().item()
                view[idx] = orig - h
                down = loss_fn().item()
                view[idx] = orig
                trials.append((abs((up - base) - (base - down)) / h, h, (up - down) / (2 * h)))
            _, h, numeric = min(trials)
            chosen.append(h)
            # the summed loss carries ~10^2 ulps of round-off, i.e. about 1e2*eps*|L|/h in a
            # difference; gradients below 1e3 times that are compared on an absolute
            # scale (biases ahead of batch norm have a true gradient of exactly zero)
            floor = 1e5 * eps * abs(base) / h
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor))
    return worst, chosen


def test_gradient_checks():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    scbe = build_scbe(StemConfig("vgg_style", output_channels=4), ScbeConfig(base_width=4), stem_width=4)
    scbe = _reset_(scbe).double().train()
    x = torch.randn(2, 3, 256, 256, dtype=torch.float64)
    w_pred = [torch.randn(2, 16, 64, 64, dtype=torch.float64) for _ in range(2)]

    def scbe_loss():
        out = scbe(x, clamp=False)
        loss = sum((p * w).sum() for p, w in zip(out.boundary_preds, w_pred))
        return loss + sum(f.square().mean() for f in out.features)

    balt = build_balt(16, 19, [4, 4, 4], FusionConfig(t=3, s=3), base_width=2)
    balt = _reset_(balt).double().train()
    bnd = torch.rand(2, 16, 64, 64, dtype=torch.float64)
    feats = [torch.randn(2, 4, 64 >> i, 64 >> i, dtype=torch.float64) for i in range(3)]
    w_out = torch.randn(2, 19, 64, 64, dtype=torch.float64)

    def balt_loss():
        return (balt(bnd, feats, clamp=False) * w_out).sum()

    n_scbe = sum(p.numel() for p in scbe.parameters())
    n_balt = sum(p.numel() for p in balt.parameters())
    rel_scbe, steps_scbe = _probe_gradients(scbe, scbe_loss, GRAD_PROBES, seed=1)
    rel_balt, steps_balt = _probe_gradients(balt, balt_loss, GRAD_PROBES, seed=2)
    elapsed = time.perf_counter() - t0
    ok = (max(rel_scbe, rel_balt) < GRAD_REL_TOL and max(n_scbe, n_balt) <= GRAD_MAX_PARAMS
          and elapsed < GRAD_BUDGET_S)
    steps = Counter(f"{h:g}" for h in steps_scbe + steps_balt)
    record("gradient-checks", ok, f"SCBE {n_scbe} params max rel err {rel_scbe:.2e}; BALT {n_balt} params "
           f"max rel err {rel_balt:.2e} (tol {GRAD_REL_TOL:g}, {GRAD_PROBES} probes each, float64 central "
           f"differences, step per probe where one-sided slopes agree best: {dict(sorted(steps.items()))}); "
           f"{elapsed:.1f}s (budget {GRAD_BUDGET_S}s)")
    assert ok


# -- shapes ----------------------------------------------------------------------


def test_shape_contracts():
    scbe = build_scbe(StemConfig(output_channels=8), ScbeConfig(base_width=8), stem_width=4).eval()
    problems = []
    with torch.no_grad():
        for B in (1, 2, 3):
            out = scbe(torch.randn(B, 3, 256, 256))
            if len(out.boundary_preds) != 2 or any(p.shape != (B, 16, 64, 64) for p in out.boundary_preds):
                problems.append(f"SCBE B={B}: {[tuple(p.shape) for p in out.boundary_preds]}")
            for L in (19, 29, 68, 98):
                balt = build_balt(16, L, scbe.feature_channels, FusionConfig(), base_width=4).eval()
                y = balt(out.boundary_preds[-1], out.features)
                if y.shape != (B, L, 64, 64):
                    problems.append(f"BALT B={B} L={L}: {tuple(y.shape)}")
    ok = not problems
    record("shape-contracts", ok, "SCBE N=2 stacks of Bx16x64x64 and BALT BxLx64x64 for B in {1,2,3}, "
           "L in {19,29,68,98}" + (f"; problems {problems}" if problems else ""))
    assert ok


# -- metrics ----------------------------------------------------------------------


def test_metrics_oracle():
    rng = np.random.default_rng(7)
    worst_nme, fr_exact, worst_auc = 0.0, True, 0.0
    for _ in range(1000):
        L = int(rng.choice([19, 29, 68, 98]))
        n = int(rng.integers(1, 40))
        nmes, ref = [], []
        for _ in range(n):
            gt = rng.uniform(0, 256, (L, 2))
            pred = gt + rng.normal(0, rng.uniform(0.5, 20), (L, 2))
            d = float(rng.uniform(20, 120))
            nmes.append(nme(pred, gt, d))
            ref.append(nme_loop(pred, gt, d))
        worst_nme = max(worst_nme, max(abs(a - b) for a, b in zip(nmes, ref)))
        tau = float(rng.choice([0.08, 0.1]))
        fr_exact &= failure_rate(nmes, tau) == failure_rate_count(nmes, tau)
        _, auc = ced_auc(nmes, tau, AUC_RESOLUTION)
        worst_auc = max(worst_auc, abs(auc - step_auc(nmes, tau)))
    ok = worst_nme <= METRIC_TOL and fr_exact and worst_auc <= 1 / AUC_RESOLUTION
    record("metrics-oracle", ok, f"1000 lists: NME max |diff| {worst_nme:.1e} (tol {METRIC_TOL:g}), FR exact: "
           f"{fr_exact}, AUC max |diff| vs step integral {worst_auc:.2e} (tol 1/{AUC_RESOLUTION})")
    assert ok


# -- decode ----------------------------------------------------------------------


def test_decode_roundtrip():
    rng = np.random.default_rng(11)
    cfg = RasterizerConfig()
    bound = STRIDE * 0.5 + 1e-6
    worst = 0.0
    for _ in range(1000):
        L = int(rng.choice([19, 29, 68, 98]))
        pts = rng.uniform(1.0, 62.0, size=(L, 2))  # interior: both neighbours of the peak exist
        coords, _ = decode_heatmaps(rasterize_landmarks(pts, cfg), stride=STRIDE)
        worst = max(worst, float(np.linalg.norm(coords - pts * STRIDE, axis=1).max()))
    ok = worst <= bound
    record("decode-roundtrip", ok, f"1000 landmark sets, max error {worst:.4f} px (bound stride*0.5+1e-6 = {bound:.6f})")
    assert ok


# -- overfit + freeze ------------------------------------------------------------------


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    torch.set_num_threads(max(1, torch.get_num_threads()))
    t0 = time.perf_counter()
    schema = get_schema("wflw98")
    ann = synth_dataset(tmp_path_factory.mktemp("overfit"), 8, "wflw98", seed=0)
    samples = load_annotations(ann, schema)
    ds = FaceDataset(samples, schema)
    scbe = build_scbe(StemConfig("vgg_style", output_channels=16), ScbeConfig(base_width=16), seed=0, stem_width=8)
    balt = build_balt(16, 98, scbe.feature_channels, FusionConfig(), base_width=16, seed=0)
    common = dict(lr=2e-3, epochs=200, lr_drops=(), batch_size=8, seed=0)
    res_a = train_phase(scbe, balt, ds, TrainConfig(phase="scbe", **common))

    batch = next(iter(torch.utils.data.DataLoader(ds, batch_size=8)))

    def landmark_mse():
        heat, _ = predict_heatmaps(scbe, balt, batch["image"])
        return F.mse_loss(heat, batch["landmark"]).item()

    scbe_before = {k: v.clone() for k, v in scbe.state_dict().items()}
    mse0 = landmark_mse()
    res_b = train_phase(scbe, balt, ds, TrainConfig(phase="balt", **common))
    mse1 = landmark_mse()
    report = evaluate(scbe, balt, samples, schema, norm="face_size")
    return dict(res_a=res_a, res_b=res_b, mse0=mse0, mse1=mse1, nme=report.nme_mean,
                elapsed=time.perf_counter() - t0, scbe=scbe, scbe_before=scbe_before)


def test_overfit_smoke(overfit_run):
    r = overfit_run
    steps = (len(r["res_a"].step_loss), len(r["res_b"].step_loss))
    # trend over consecutive 20-step windows; reported, not gated (a trainer invariant)
    windows = np.asarray(r["res_b"].step_loss).reshape(-1, 20).mean(axis=1)
    worst_rise = float(np.max(windows[1:] / windows[:-1]) - 1.0)
    ok = (r["mse1"] <= OVERFIT_RATIO * r["mse0"] and r["nme"] < OVERFIT_NME and r["elapsed"] < OVERFIT_BUDGET_S
          and steps == (200, 200))
    record("overfit-smoke", ok, f"8 synthetic faces, {steps[0]}+{steps[1]} steps: landmark MSE {r['mse0']:.3e} -> "
           f"{r['mse1']:.3e} (ratio {r['mse1'] / r['mse0']:.3f}, limit {OVERFIT_RATIO}), face-size NME "
           f"{r['nme']:.4f} (limit {OVERFIT_NME}), {r['elapsed']:.0f}s (budget {OVERFIT_BUDGET_S}s); phase-B "
           f"20-step window loss {windows[0]:.2e} -> {windows[-1]:.2e}, largest window-to-window rise "
           f"{100 * max(worst_rise, 0.0):.0f}%")
    assert ok


def test_freeze_contract(overfit_run):
    before, model = overfit_run["scbe_before"], overfit_run["scbe"]
    changed = [k for k, v in model.state_dict().items() if not torch.equal(v, before[k])]
    ok = not changed
    record("freeze-contract", ok, f"{len(before)} SCBE tensors (parameters and batch-norm buffers) compared "
           f"bit-for-bit across 200 phase-B steps; changed: {changed[:3] or 'none'}")
    assert ok


# -- augmentation ---------------------------------------------------------------------


def test_augmentation_consistency():
    rng = np.random.default_rng(5)
    schema = get_schema("wflw98")
    perm = list(schema.flip_permutation)
    cfg = AugmentConfig(flip_prob=0.5, coarse_dropout_prob=0.0, brightness_jitter=False)
    worst, flips = 0.0, 0
    for _ in range(1000):
        aug = sample_augmentation(cfg, rng, size=256)
        pts = rng.uniform(0, 255, size=(98, 2))
        moved = aug.apply_to_landmarks(pts, schema)
        # the image is warped with aug.matrix; carry the points through the same matrix
        via_image = apply_affine(aug.matrix, pts)
        if aug.flipped:
            via_image = via_image[perm]
            flips += 1
        worst = max(worst, float(np.abs(moved - via_image).max()))

    # pixel-level check that cv2 applies aug.matrix as the forward map
    xs, ys = np.meshgrid(np.arange(256), np.arange(256))
    pix_worst = 0.0
    for _ in range(20):
        aug = sample_augmentation(AugmentConfig(coarse_dropout_prob=0.0, brightness_jitter=False, scale_range=0.0), rng)
        p = rng.uniform(96, 160, size=2)
        img = np.zeros((256, 256, 3), np.float32)
        img[..., 0] = np.exp(-((xs - p[0]) ** 2 + (ys - p[1]) ** 2) / 18.0)
        out, moved = apply_augmentation(img, np.tile(p, (98, 1)), aug, schema)
        w = out[..., 0].astype(np.float64)
        centroid = np.array([(w * xs).sum(), (w * ys).sum()]) / w.sum()
        pix_worst = max(pix_worst, float(np.linalg.norm(centroid - moved[0])))

    # double flip: exact on a 1/1024-pixel grid (where W-1-x is exact in float64)
    grid_exact, raw_worst = True, 0.0
    for _ in range(1000):
        width = int(rng.integers(2, 2049))
        raw = rng.uniform(0, width - 1, size=(98, 2))
        grid = np.round(raw * 1024) / 1024
        grid_exact &= bool(np.array_equal(flip_landmarks(flip_landmarks(grid, width, schema), width, schema), grid))
        raw_worst = max(raw_worst, float(np.abs(flip_landmarks(flip_landmarks(raw, width, schema), width, schema) - raw).max()))

    ok = worst <= AUG_TOL and grid_exact and pix_worst < 0.1
    record("augmentation-consistency", ok,
           f"1000 augmentations ({flips} flipped): landmarks vs image-warp matrix max |diff| {worst:.1e} "
           f"(tol {AUG_TOL:g}); rendered-blob centroid vs landmark {pix_worst:.3f}px (cv2 interpolates on a 1/32 px "
           f"grid); double flip exact on 1000 sets at 1/1024 px resolution: {grid_exact} "
           f"(arbitrary float64 inputs: max |diff| {raw_worst:.1e}, one rounding of W-1-x)")
    assert ok


# -- not reproducible here ---------------------------------------------------------------


def test_benchmark_numbers_not_reproduced():
    record("benchmark-numbers", True,
           "published WFLW/300W/COFW NME, FR and AUC figures need full GPU training on the original datasets and "
           "are not reproduced; the eval command writes the same per-subset NME/FR/AUC layout so a full-scale run "
           "is a configuration change", status="NOT REPRODUCIBLE (by design)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
