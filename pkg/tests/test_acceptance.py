"""End-to-end acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import functools
import time

import numpy as np
import pytest

from bsnseg import evaluate, geometry, kernels, loss, net
from bsnseg.cli import main as cli_main
from bsnseg.raster import save_mask, save_rgb
from bsnseg.synthetic import held_out, portrait_suite
from oracles import (brute_contour, brute_distance, central_difference, count_iou,
                     soft_label_oracle, softmax_ce)

MODES = ("ik", "gk", "combined")


def rel_err(a, n):
    a, n = np.asarray(a, float), np.asarray(n, float)
    return float((np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))).max())


# -- 1. gradient fidelity -------------------------------------------------------


def _oracle_loss(mode, z, mask, kind, kg):
    """Mean over pixels of the per-pixel definition, evaluated with plain floats."""
    c, h, w = z.shape
    fg = mask.astype(float)
    total = 0.0
    for r in range(h):
        for col in range(w):
            if mode == "gk":
                target = [fg[r, col], 0.0, 1.0 - fg[r, col]]
            else:
                target = kind[:, r, col].tolist()
            weight = 1.0 if mode == "ik" else kg[r, col]
            total += softmax_ce(z[:, r, col].tolist(), target, weight)
    return total / (h * w)


def test_criterion_1_gradient_fidelity(acceptance_record):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    loss_err, e2e_err = 0.0, 0.0
    for mode in MODES:
        for i in range(20):
            h, w = rng.integers(2, 9, size=2)
            mask = rng.random((h, w)) < rng.uniform(0.2, 0.8)
            width = float(rng.integers(0, 7))
            norm = kernels.NORM_MODES[i % 2]
            kind = kernels.individual_kernel(mask, width, norm)
            kg = kernels.global_kernel(rng.random((h, w)))
            z = rng.normal(scale=2.0, size=(3, h, w))
            analytic = loss.segmentation_loss(mode, z, mask, kind, kg).grad
            numeric = central_difference(lambda v: _oracle_loss(mode, v, mask, kind, kg), z)
            loss_err = max(loss_err, rel_err(analytic, numeric))

            x = geometry.assemble_input(rng.random((3, h, w)), rng.random((h, w)),
                                        dtype=np.float64)
            report = net.gradient_check(net.init_net(rng), x, mask, int(rng.integers(2)),
                                        mode, width=width, norm=norm)
            e2e_err = max(e2e_err, report.max_error)
    elapsed = time.perf_counter() - start
    ok = loss_err < 1e-6 and e2e_err < 1e-4 and elapsed < 60
    acceptance_record(1, ok, f"loss-level {loss_err:.2e} (<1e-6), end-to-end {e2e_err:.2e} "
                             f"(<1e-4), {elapsed:.1f}s (<60s)")
    assert ok


# -- 2. soft-label algebra ------------------------------------------------------


def test_criterion_2_soft_label_algebra(acceptance_record):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst_sum, worst_band_sum, worst_oracle = 0.0, 0.0, 0.0
    fgbg_ok = onehot_ok = True
    for i in range(200):
        h, w = rng.integers(3, 17, size=2)
        mask = rng.random((h, w)) < rng.uniform(0.1, 0.9)
        width = float(rng.uniform(0, 12))
        norm = kernels.NORM_MODES[i % 2]
        k = kernels.individual_kernel(mask, width, norm)
        worst_sum = max(worst_sum, float(np.abs(k.sum(axis=0) - 1).max()))
        fgbg_ok &= bool((k[kernels.FG] * k[kernels.BG] == 0).all())
        band = geometry.boundary_band(mask, width)
        outside = ~band.member
        onehot_ok &= bool(np.isin(k[:, outside], (0.0, 1.0)).all())
        onehot_ok &= bool((k[kernels.BDRY][outside] == 0).all())
        if norm == "sum" and band.distance[band.member].sum() > 0:
            worst_band_sum = max(worst_band_sum, abs(float(k[kernels.BDRY][band.member].sum()) - 1))
        worst_oracle = max(worst_oracle, float(np.abs(k - soft_label_oracle(mask, width, norm)).max()))
    elapsed = time.perf_counter() - start
    ok = (worst_sum <= 1e-6 and worst_band_sum <= 1e-5 and fgbg_ok and onehot_ok
          and worst_oracle <= 1e-12 and elapsed < 30)
    acceptance_record(2, ok, f"label sum {worst_sum:.1e}, sum-mode band sum {worst_band_sum:.1e}, "
                             f"fg*bg=0 {fgbg_ok}, outside one-hot {onehot_ok}, "
                             f"oracle {worst_oracle:.1e}, {elapsed:.1f}s (<30s)")
    assert ok


# -- 3. distance transform ------------------------------------------------------


def test_criterion_3_distance_transform(acceptance_record):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(50):
        mask = rng.random((32, 32)) < rng.uniform(0.2, 0.8)
        contour = geometry.extract_contour(mask)
        assert {tuple(p) for p in contour.points.tolist()} == brute_contour(mask)
        exact = brute_distance(contour.points.tolist(), mask.shape)
        mismatches += int((geometry.distance_transform(contour) != exact).sum())
    ok = mismatches == 0
    acceptance_record(3, ok, f"{mismatches} differing pixels over 50 masks (exact equality)")
    assert ok


# -- 4. global kernel -----------------------------------------------------------


def test_criterion_4_global_kernel(acceptance_record):
    rng = np.random.default_rng(4)
    exact_ok, worst = True, 0.0
    for _ in range(50):
        a = float(rng.uniform(0, 1))
        b = float(rng.uniform(a, 1.5))
        m = rng.random((9, 11))
        m.flat[:3] = (0.0, 0.5, 1.0)
        lit = kernels.global_kernel(m, a, b, "literal")
        intent = kernels.global_kernel(m, a, b, "intent")
        exact_ok &= lit.flat[1] == a and lit.flat[0] == b and lit.flat[2] == b
        worst = max(worst, float(np.abs(lit - kernels.global_kernel(1 - m, a, b, "literal")).max()),
                    float(np.abs(intent - kernels.global_kernel(1 - m, a, b, "intent")).max()),
                    float(np.abs(lit + intent - (a + b)).max()))
    ok = bool(exact_ok) and worst <= 1e-12
    acceptance_record(4, ok, f"endpoints exact {bool(exact_ok)}, symmetry/sum {worst:.1e} (<=1e-12)")
    assert ok


# -- 5. reduction identities ----------------------------------------------------


def test_criterion_5_reductions(acceptance_record):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        h, w = rng.integers(1, 20, size=2)
        z = rng.normal(scale=3, size=(3, h, w))
        hard = rng.integers(0, 3, size=(h, w))
        onehot = loss.hard_to_onehot(hard, 3)
        ce = loss.cross_entropy(z, hard)
        soft = kernels.individual_kernel(rng.random((h, w)) < 0.5, float(rng.integers(0, 8)))
        pairs = [(loss.ik_loss(z, onehot), ce),
                 (loss.gk_loss(z, hard, np.ones((h, w))), ce),
                 (loss.combined_loss(z, soft, np.ones((h, w))), loss.ik_loss(z, soft))]
        for got, want in pairs:
            worst = max(worst, abs(got.value - want.value), float(np.abs(got.grad - want.grad).max()))
    ok = worst <= 1e-12
    acceptance_record(5, ok, f"max deviation {worst:.1e} (<=1e-12) over values and gradients")
    assert ok


# -- 6 and 7. training on the synthetic suite ------------------------------------

# Frozen desk-scale schedule; see the README for how it was chosen.
SUITE_SEED, HELD_OUT_SEED, TRAIN_SEEDS = 0, 1234, range(5)
SCHEDULE = dict(iterations=500, crop=48, lr=0.1, momentum=0.9, width=4.0)


@functools.lru_cache(maxsize=None)
def _suite():
    samples, palettes = portrait_suite(8, 64, SUITE_SEED)
    mean_mask = kernels.compute_mean_mask([s.mask for s in samples])
    return samples, held_out(samples, palettes, HELD_OUT_SEED), mean_mask


@functools.lru_cache(maxsize=None)
def _run(loss_mode, seed):
    samples, _, mean_mask = _suite()
    start = time.perf_counter()
    trained, rows = net.train(samples, net.TrainConfig(loss=loss_mode, seed=seed, **SCHEDULE),
                              mean_mask)
    return trained, rows, time.perf_counter() - start


def _predictions(trained, data, mean_mask):
    return [net.predict_mask(trained, geometry.assemble_input(s.image, mean_mask)) for s in data]


def test_criterion_6_toy_overfit(acceptance_record):
    samples, _, mean_mask = _suite()
    trained, rows, elapsed = _run("combined", 0)
    preds = _predictions(trained, samples, mean_mask)
    train_iou = evaluate.mean_iou(zip(preds, (s.mask for s in samples)))
    seg = np.array([r.seg_loss for r in rows])
    ratio = seg[-20:].mean() / seg[0]
    ok = train_iou >= 0.95 and ratio < 0.2 and elapsed < 120
    acceptance_record(6, ok, f"training mean IoU {train_iou:.4f} (>=0.95), loss ratio {ratio:.3f} "
                             f"(<0.2), {elapsed:.1f}s (<120s)")
    assert ok


def test_criterion_7_boundary_benefit(acceptance_record):
    _, test, mean_mask = _suite()
    scores = {}
    for mode in ("combined", "baseline"):
        per_seed = []
        for seed in TRAIN_SEEDS:
            preds = _predictions(_run(mode, seed)[0], test, mean_mask)
            per_seed.append(np.mean([evaluate.boundary_band_iou(p, s.mask, 5)
                                     for p, s in zip(preds, test)]))
        scores[mode] = float(np.mean(per_seed))
    ok = scores["combined"] >= scores["baseline"]
    acceptance_record(7, ok, f"held-out band IoU (w=5, {len(TRAIN_SEEDS)} seeds) combined "
                             f"{scores['combined']:.4f} vs baseline {scores['baseline']:.4f}")
    assert ok


# -- 8. evaluation oracle -------------------------------------------------------


def test_criterion_8_eval_oracle(acceptance_record):
    rng = np.random.default_rng(8)
    pairs = [(rng.random((16, 16)) < rng.uniform(0, 1), rng.random((16, 16)) < rng.uniform(0, 1))
             for _ in range(100)]
    iou_ok = all(evaluate.iou(p, g) == count_iou(p, g) for p, g in pairs)
    iou_ok &= evaluate.mean_iou(pairs) == np.mean([count_iou(p, g) for p, g in pairs])
    trimap_ok = True
    for _ in range(100):
        h, w = rng.integers(1, 33, size=2)
        mask = rng.random((h, w)) < rng.uniform(0, 1)
        t = evaluate.make_trimap(mask, float(rng.uniform(0, 12)))
        levels = (evaluate.TRIMAP_BG, evaluate.TRIMAP_UNKNOWN, evaluate.TRIMAP_FG)
        counts = sum(int((t == v).sum()) for v in levels)
        trimap_ok &= counts == mask.size
        cont = np.zeros_like(mask)
        for r, c in brute_contour(mask):
            cont[r, c] = True
        trimap_ok &= bool((t[cont] == evaluate.TRIMAP_UNKNOWN).all())
        known = t != evaluate.TRIMAP_UNKNOWN
        trimap_ok &= bool(((t == evaluate.TRIMAP_FG) == mask)[known].all())
    ok = bool(iou_ok and trimap_ok)
    acceptance_record(8, ok, f"IoU equals pixel counting {bool(iou_ok)}, "
                             f"trimap invariants {bool(trimap_ok)}")
    assert ok


# -- 9. CLI determinism ---------------------------------------------------------


def _cli_outputs(root, data):
    out = root
    m = data / "masks"
    invocations = [
        ["contour", "--mask", m / "p0.png", "--out", out / "c.png", "--distance", out / "d.bsnt"],
        ["indiv-kernel", "--mask", m / "p1.png", "--out", out / "k.bsnt", "--png", out / "k.png"],
        ["indiv-kernel", "--mask", m / "p1.png", "--norm", "sum", "--out", out / "ks.bsnt"],
        ["mean-mask", "--masks", m, "--out", out / "mm.bsnt"],
        ["global-kernel", "--masks", m, "--mode", "intent", "--out", out / "g.bsnt"],
        ["trimap", "--mask", m / "p2.png", "--out", out / "t.png"],
        ["train", "--images", data / "images", "--masks", m, "--crop", 20, "--iterations", 8,
         "--lr", 0.05, "--momentum", 0.9, "--width", 4, "--seed", 11, "--out", out / "run"],
        ["train", "--synthetic", 3, "--size", 24, "--crop", 16, "--iterations", 8,
         "--loss", "gk", "--lr", 0.05, "--seed", 3, "--out", out / "syn"],
        ["eval", "--checkpoint", out / "run", "--images", data / "images", "--gt", m,
         "--out", out / "report.csv"],
        ["gradcheck", "--loss", "combined", "--seed", 7, "--out", out / "grad.csv"],
    ]
    for argv in invocations:
        assert cli_main([str(a) for a in argv]) == 0, argv
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_cli_determinism(acceptance_record, tmp_path, capsys):
    data = tmp_path / "data"
    (data / "images").mkdir(parents=True)
    (data / "masks").mkdir()
    samples, _ = portrait_suite(3, 24, seed=9)
    for i, s in enumerate(samples):
        save_rgb(s.image, data / "images" / f"p{i}.png")
        save_mask(s.mask, data / "masks" / f"p{i}.png")
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = _cli_outputs(tmp_path / "a", data)
    second = _cli_outputs(tmp_path / "b", data)
    capsys.readouterr()
    tensors = sum(1 for p in first if p.suffix in (".bsnt", ".csv"))
    differing = sorted(str(p) for p in first if first[p] != second.get(p))
    ok = first.keys() == second.keys() and not differing and tensors > 0
    acceptance_record(9, ok, f"{len(first)} output files ({tensors} BSNT/CSV), "
                             f"{len(differing)} differ between repeated runs")
    assert ok
