"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``[PASS]``/``[FAIL]`` line; the lines are also repeated
in pytest's terminal summary. Run on its own with::

    pytest tests/test_acceptance.py -v
"""

import contextlib
import math
import time

import numpy as np
import pytest
import torch

import oracles
from rgbdvos.backbone import ModalitySelectFuse, select_fuse, zero_parameters
from rgbdvos.core import anchor_point, mask_bbox
from rgbdvos.decoder import Decoder, decode
from rgbdvos.evaluation import DEFAULT_ENTROPIES, DEFAULT_SHIFTS, f_measure, j_measure, jf, sweep
from rgbdvos.losses import total_loss
from rgbdvos.memory import (MemoryConfig, MemoryKey, MemoryValue, MultiStoreMemory, consolidate,
                            insert_working, readout)
from rgbdvos.pipeline import PipelineConfig, run_sequence, sweep_runner
from rgbdvos.refinement import ObjectHistory, RefinementConfig, region_entropy, spatio_temporal_prompt
from rgbdvos.synthetic import moving_squares
from rgbdvos.training import OptimizerConfig, fit_toy

RESULTS: list[str] = []


@contextlib.contextmanager
def criterion(name):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        line = f"[FAIL] {name} ({time.perf_counter() - start:.1f}s): {type(exc).__name__}: {exc}"
        RESULTS.append(line)
        print(line)
        raise
    line = f"[PASS] {name} ({time.perf_counter() - start:.1f}s)"
    RESULTS.append(line)
    print(line)


def random_mask(g, h, w):
    kind = g.integers(0, 4)
    if kind == 0:
        return g.random((h, w)) < g.uniform(0.1, 0.9)
    if kind == 1:
        m = np.zeros((h, w), bool)
        for _ in range(g.integers(1, 4)):
            y0, x0 = g.integers(0, h), g.integers(0, w)
            m[y0:y0 + g.integers(1, h + 1), x0:x0 + g.integers(1, w + 1)] = True
        return m
    if kind == 2:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx, r = g.uniform(0, h), g.uniform(0, w), g.uniform(0.5, max(h, w) / 2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return np.zeros((h, w), bool)


def test_metric_oracle_suite():
    with criterion("metric oracles: 200 random pairs, J exact, F <= 1e-9, < 30 s"):
        g = np.random.default_rng(2024)
        start = time.perf_counter()
        worst_f = 0.0
        for _ in range(200):
            h, w = (int(v) for v in g.integers(1, 33, 2))
            a, b = random_mask(g, h, w), random_mask(g, h, w)
            if g.random() < 0.15:
                b = a.copy()
            tol = int(g.integers(0, 4))
            assert j_measure(a, b) == oracles.iou_brute(a, b)
            f_ref = oracles.f_pairwise(a, b, tol)
            worst_f = max(worst_f, abs(f_measure(a, b, tol) - f_ref))
            assert abs(jf(a, b, tol) - (oracles.iou_brute(a, b) + f_ref) / 2) <= 1e-9
        assert worst_f <= 1e-9, worst_f
        assert time.perf_counter() - start < 30


def test_entropy_suite():
    with criterion("entropy: 0 / 1 / 1.75 bits and sparse == dense histogram"):
        c = [(1, 2, 3), (250, 0, 9), (7, 7, 7), (0, 128, 255)]

        def img(counts):
            px = [c[i] for i, n in enumerate(counts) for _ in range(n)]
            return np.array(px, np.uint8).reshape(1, -1, 3)

        assert region_entropy(img([8])) == 0.0
        assert region_entropy(img([4, 4])) == 1.0
        assert region_entropy(img([4, 2, 1, 1])) == 1.75
        g = np.random.default_rng(5)
        for levels in (256, 256, 4, 2):
            x = g.integers(0, levels, (16, 16, 3)).astype(np.uint8)
            assert region_entropy(x) == oracles.dense_entropy(x)


def test_fusion_math():
    with criterion("fusion math: scalar loop within 1e-6, zero init averages bit-exactly"):
        torch.manual_seed(0)
        block = ModalitySelectFuse(2)
        g = torch.Generator().manual_seed(0)
        a, b = torch.randn(1, 2, 2, 2, generator=g), torch.randn(1, 2, 2, 2, generator=g)
        fused, w = select_fuse(block, a, b)
        ref, wr, wd = oracles.select_fuse_loop(a[0].numpy(), b[0].numpy(), oracles.np_params(block))
        assert np.abs(fused[0].detach().numpy() - ref).max() <= 1e-6
        assert np.abs(w.w_rgb[0].detach().numpy() - wr).max() <= 1e-6
        assert np.abs(w.w_d[0].detach().numpy() - wd).max() <= 1e-6
        zero = zero_parameters(ModalitySelectFuse(8))
        for dtype in (torch.float32, torch.float64):
            x = torch.randn(2, 8, 5, 5, dtype=dtype, generator=g)
            y = torch.randn(2, 8, 5, 5, dtype=dtype, generator=g)
            with torch.no_grad():
                out, _ = select_fuse(zero.to(dtype), x, y)
            assert torch.equal(out, 0.5 * (x + y))


def test_gradient_checks():
    with criterion("gradients: total_loss, select_fuse, decode vs finite differences <= 1e-3, < 2 min"):
        start = time.perf_counter()
        g = torch.Generator().manual_seed(3)

        logits = torch.randn(3, 8, 8, generator=g, dtype=torch.float64, requires_grad=True)
        gt = torch.from_numpy(np.random.default_rng(3).integers(0, 3, (8, 8)))
        err_loss = oracles.finite_diff_check(
            lambda: total_loss(torch.softmax(logits, 0), gt, 0.7), [logits], 1e-3)

        torch.manual_seed(3)
        block = ModalitySelectFuse(3).double()
        a = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
        b = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
        coeff = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
        err_fuse = oracles.finite_diff_check(lambda: (block(a, b)[0] * coeff).sum(),
                                             [a, b] + list(block.parameters()), 1e-3)

        dec = Decoder(3, (2, 3, 4), 2, (4, 3, 2)).double()
        ins = [torch.randn(*s, generator=g, dtype=torch.float64, requires_grad=True)
               for s in ((2, 3, 1, 1), (1, 4, 1, 1), (1, 3, 2, 2), (1, 2, 4, 4), (2, 2, 1, 1))]
        pc = torch.randn(3, 16, 16, generator=g, dtype=torch.float64)
        hc = torch.randn(2, 2, 1, 1, generator=g, dtype=torch.float64)

        def dec_obj():
            p, hid = decode(*ins, dec, return_hidden=True)
            return (p * pc).sum() + (hid * hc).sum()

        err_dec = oracles.finite_diff_check(dec_obj, ins + list(dec.parameters()), 1e-3)
        errs = {"total_loss": err_loss, "select_fuse": err_fuse, "decode": err_dec}
        assert max(errs.values()) <= 1e-3, errs
        assert time.perf_counter() - start < 120


def test_memory_suite():
    with criterion("memory: identity, averaging, normalization, capacity over 1000 op sequences"):
        def entry(*v):
            return torch.tensor(v, dtype=torch.float64).reshape(-1, 1, 1)

        mem = MultiStoreMemory()
        insert_working(mem, MemoryKey(entry(0.2, -0.4)), MemoryValue(entry(3.0, -7.0), 0))
        q = MemoryKey(torch.randn(2, 2, 3, dtype=torch.float64))
        assert torch.equal(readout(q, mem), entry(3.0, -7.0).expand(2, 2, 3))

        mem = MultiStoreMemory()
        insert_working(mem, MemoryKey(entry(1.0, 1.0)), MemoryValue(entry(2.0), 0))
        insert_working(mem, MemoryKey(entry(1.0, 1.0)), MemoryValue(entry(6.0), 1))
        assert abs(float(readout(MemoryKey(entry(-3.0, 0.5)), mem)) - 4.0) <= 1e-12

        g = np.random.default_rng(77)
        for _ in range(1000):
            cap = int(g.integers(1, 5))
            p = int(g.integers(1, 6))
            mem = MultiStoreMemory(MemoryConfig(working_capacity=cap, prototype_count=p,
                                                neighbors=int(g.integers(1, 9))))
            hw = (int(g.integers(1, 3)), int(g.integers(1, 3)))
            n_pos = hw[0] * hw[1]
            model_len, model_lt = 0, 0
            for step in range(int(g.integers(1, 12))):
                op = g.integers(0, 3)
                if op < 2 or model_len == 0:
                    k = torch.from_numpy(g.normal(size=(2,) + hw))
                    v = torch.from_numpy(g.normal(size=(3,) + hw))
                    insert_working(mem, MemoryKey(k), MemoryValue(v, step))
                    model_len += 1
                    if model_len > cap:
                        removed = model_len - cap + 1
                        model_lt += min(p, removed * n_pos)
                        model_len -= removed
                elif op == 2 and g.random() < 0.5:
                    removed = model_len - cap + 1
                    consolidate(mem)
                    if removed > 0:
                        model_lt += min(p, removed * n_pos)
                        model_len -= removed
                if model_len or model_lt:
                    q = MemoryKey(torch.from_numpy(g.normal(size=(2, 2, 2)) * 3))
                    _, w = readout(q, mem, return_weights=True)
                    assert float((w.sum(0) - 1).abs().max()) <= 1e-6
                assert len(mem.working) == model_len <= cap
                assert mem.longterm_size == model_lt


def test_prompt_truth_table():
    with criterion("prompt rules: all 8 deviation x area x empty combinations"):
        shape = (40, 1300)

        def sq(x0, side):
            m = np.zeros(shape, bool)
            m[10:10 + side, x0:x0 + side] = True
            return m

        memory = sq(20, 10)
        cfg = RefinementConfig(shift_threshold=500)
        for far in (False, True):
            for area_out in (False, True):
                for empty in (False, True):
                    cur = np.zeros(shape, bool) if empty else \
                        sq(20 + (600 if far else 100), 20 if area_out else 10)
                    hist = ObjectHistory(5)
                    hist.push(0, memory)
                    p = spatio_temporal_prompt(cur, hist, cfg)
                    want_pt = "memory" if empty or far else "current"
                    want_box = "memory" if empty or area_out else "current"
                    src = {"memory": memory, "current": cur}
                    assert (p.point_source, p.box_source) == (want_pt, want_box), (far, area_out, empty)
                    assert p.points[0] == anchor_point(src[want_pt])
                    assert p.box == mask_bbox(src[want_box])


def test_toy_learnability():
    with criterion("toy learnability: loss <= 50% of initial within 200 steps, < 5 min"):
        start = time.perf_counter()
        res = fit_toy(moving_squares(8, 64, seed=1), 200, OptimizerConfig(lr=1e-3))
        losses = res.losses
        ratio = losses[-1] / losses[0]
        print(f"  initial {losses[0]:.4f} final {losses[-1]:.4f} ratio {ratio:.3f}")
        assert ratio <= 0.5, ratio
        assert time.perf_counter() - start < 300


def test_refinement_benefit(trained_model):
    with criterion("refinement benefit: oracle J after >= before on 5 sequences; trained J&F >= 0.9"):
        seqs = [moving_squares(8, 64, seed=s, n_objects=n)
                for s, n in ((20, 1), (21, 1), (22, 2), (23, 2), (24, 3))]
        for ds in seqs:
            res = run_sequence(ds, PipelineConfig(refiner="mock-oracle"))
            for f, after, before in zip(ds.frames[1:], res.masks[1:], res.unrefined[1:]):
                for k in ds.object_ids:
                    ja, jb = j_measure(after == k, f.gt_mask == k), j_measure(before == k, f.gt_mask == k)
                    assert ja >= jb, (ds.name, f.index, k, ja, jb)
        held_out = moving_squares(8, 64, seed=100)
        score = run_sequence(held_out, PipelineConfig(), trained_model).report.JF
        print(f"  held-out J&F {score:.4f}")
        assert score >= 0.9, score


def test_sweep_structure():
    with criterion("sweep: default 3x3 table over M x E, deterministic"):
        ds = moving_squares(5, 64, seed=9)
        cfg = PipelineConfig(refiner="mock-identity")
        a = sweep(ds, sweep_runner(cfg))
        b = sweep(ds, sweep_runner(cfg))
        assert a.scores.shape == (3, 3)
        assert a.shifts == DEFAULT_SHIFTS == (300, 500, 700)
        assert a.entropies == DEFAULT_ENTROPIES == (4, 6, 8)
        assert np.array_equal(a.scores, b.scores)
        assert all(0.0 <= s <= 1.0 and not math.isnan(s) for _, _, s in a.rows())


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
