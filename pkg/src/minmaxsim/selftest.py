"""Randomised self-checks: vectorised losses against the scalar-loop references,
autograd against finite differences, InfoNCE bounds, split invariants and Dice.

Each ``check_*`` returns a :class:`CheckResult`; ``run_all`` prints one line
per check and is what ``minmaxsim selftest`` runs.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from . import reference as R
from .data import disjoint_split
from .evaluation import dsc

ORACLE_RTOL = 1e-6
GRAD_RTOL = 1e-3
FD_STEP = 1e-4
EXACT_TOL = 1e-9
LEAK_TOL = 1e-12  # roundoff of the subtraction that isolates the target slot


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    worst: float = 0.0
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-12)


def _unit(t: torch.Tensor, dim: int) -> torch.Tensor:
    return F.normalize(t, dim=dim)


def _rand_probs(gen, shape, lo=0.0, hi=1.0):
    return lo + (hi - lo) * torch.rand(shape, generator=gen, dtype=torch.float64)


def _rand_mask(gen, shape):
    return (torch.rand(shape, generator=gen, dtype=torch.float64) > 0.5).double()


def check_loss_oracles(n: int = 100, seed: int = 0, rtol: float = ORACLE_RTOL) -> CheckResult:
    """Each loss vs its scalar-loop reference on ``n`` random small inputs."""
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}

    def record(name, a, b):
        worst[name] = max(worst.get(name, 0.0), _rel(float(a), float(b)))

    for _ in range(n):
        b = int(rng.integers(1, 5))
        h, w = (int(v) for v in rng.integers(2, 9, size=2))
        p = _rand_probs(gen, (b, 1, h, w))
        p2 = _rand_probs(gen, (b, 1, h, w))
        y = _rand_mask(gen, (b, 1, h, w))
        wm = 1.0 + 5.0 * torch.rand((b, 1, h, w), generator=gen, dtype=torch.float64)
        record("weighted_bce", L.weighted_bce(p, y, wm), R.weighted_bce(p, y, wm))
        record("weighted_iou", L.weighted_iou(p, y, wm), R.weighted_iou(p, y, wm))
        record("sup_loss", L.sup_loss(p, y), R.sup_loss(p, y))
        record("similarity_loss", L.similarity_loss(p, p2), R.similarity_loss(p, p2))

        d = int(rng.integers(1, 17))
        bq, k = int(rng.integers(1, 5)), int(rng.integers(1, 9))
        tau = float(rng.uniform(0.05, 1.0))
        q = _unit(torch.randn((bq, d), generator=gen, dtype=torch.float64), 1)
        keys = _unit(torch.randn((k, d), generator=gen, dtype=torch.float64), 1)
        record("info_nce_all_negative", L.info_nce_all_negative(q, keys, tau),
               R.info_nce_all_negative(q, keys, tau))

        fh, fw = (int(v) for v in rng.integers(1, 9, size=2))
        if fh * fw < 2:
            fw = 2
        fb = int(rng.integers(1, 3))
        f1 = _unit(torch.randn((fb, d, fh, fw), generator=gen, dtype=torch.float64), 1)
        f2 = _unit(torch.randn((fb, d, fh, fw), generator=gen, dtype=torch.float64), 1)
        record("pixel_info_nce", L.pixel_info_nce(f1, f2, tau, "all"), R.pixel_info_nce(f1, f2, tau))

        comps = [float(v) for v in rng.uniform(0, 5, size=4)]
        lams = [float(v) for v in rng.uniform(0, 1, size=4)]
        record("total_loss", L.total_loss(*comps, L.LossWeights(*lams)), R.total_loss(comps, lams))

    top = max(worst.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    return CheckResult("loss oracle equivalence", top <= rtol, f"max rel err {top:.2e} <= {rtol:g}; {detail}",
                       top, time.perf_counter() - t0)


def _fd_grad(f: Callable[[torch.Tensor], float], x: torch.Tensor, h: float = FD_STEP) -> torch.Tensor:
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def _autograd(fn, *inputs):
    xs = [x.clone().requires_grad_(True) for x in inputs]
    out = fn(*xs)
    grads = torch.autograd.grad(out, xs, allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for x, g in zip(xs, grads)]


def _target_slot_grad(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Gradient reaching ``target`` through its role as the frozen target only."""
    t = target.clone().requires_grad_(True)
    out = L.similarity_loss(pred, t) - 0.5 * L._directional_similarity(t, pred, L.WEIGHT_KERNEL)
    (g,) = torch.autograd.grad(out, t)
    return g


def _grad_err(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale


def check_gradients(n: int = 20, seed: int = 1, rtol: float = GRAD_RTOL) -> CheckResult:
    """Autograd of every loss vs central differences of the reference loops.

    Probabilities stay inside (0.02, 0.98) so no pixel sits on the clamp.
    For the similarity loss the numeric side uses the frozen-target reference,
    so any gradient leaking through a target slot shows up as an error.
    """
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    target_leak = 0.0

    def record(name, a, nmr):
        worst[name] = max(worst.get(name, 0.0), _grad_err(a, nmr))

    for _ in range(n):
        b = int(rng.integers(1, 3))
        h, w = (int(v) for v in rng.integers(3, 7, size=2))
        p = _rand_probs(gen, (b, 1, h, w), 0.02, 0.98)
        p2 = _rand_probs(gen, (b, 1, h, w), 0.02, 0.98)
        y = _rand_mask(gen, (b, 1, h, w))
        wm = 1.0 + 5.0 * torch.rand((b, 1, h, w), generator=gen, dtype=torch.float64)

        (g,) = _autograd(lambda x: L.weighted_bce(x, y, wm), p)
        record("weighted_bce", g, _fd_grad(lambda x: R.weighted_bce(x, y, wm), p.clone()))
        (g,) = _autograd(lambda x: L.weighted_iou(x, y, wm), p)
        record("weighted_iou", g, _fd_grad(lambda x: R.weighted_iou(x, y, wm), p.clone()))

        wy = R.weight_map(y)
        (g,) = _autograd(lambda x: L.sup_loss(x, y), p)
        record("sup_loss", g, _fd_grad(lambda x: R.weighted_iou(x, y, wy) + R.weighted_bce(x, y, wy), p.clone()))

        # p1 appears as prediction in one direction and as frozen target in the other
        g1, g2 = _autograd(L.similarity_loss, p, p2)
        w2, w1 = R.weight_map(p2), R.weight_map(p)
        fd1 = _fd_grad(lambda x: 0.5 * (R.weighted_iou(x, p2, w2) + R.weighted_bce(x, p2, w2)), p.clone())
        fd2 = _fd_grad(lambda x: 0.5 * (R.weighted_iou(x, p, w1) + R.weighted_bce(x, p, w1)), p2.clone())
        record("similarity_loss", g1, fd1)
        record("similarity_loss", g2, fd2)
        gt = _target_slot_grad(p2, p)
        target_leak = max(target_leak, gt.abs().max().item())

        d = int(rng.integers(2, 17))
        bq, k = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        tau = float(rng.uniform(0.1, 1.0))
        q = _unit(torch.randn((bq, d), generator=gen, dtype=torch.float64), 1)
        keys = _unit(torch.randn((k, d), generator=gen, dtype=torch.float64), 1)
        gq, gk = _autograd(lambda a, c: L.info_nce_all_negative(a, c, tau), q, keys)
        record("info_nce_all_negative", gq, _fd_grad(lambda a: R.info_nce_all_negative(a, keys, tau), q.clone()))
        record("info_nce_all_negative", gk, _fd_grad(lambda c: R.info_nce_all_negative(q, c, tau), keys.clone()))

        d = int(rng.integers(2, 7))
        f1 = _unit(torch.randn((1, d, 3, 3), generator=gen, dtype=torch.float64), 1)
        f2 = _unit(torch.randn((1, d, 3, 3), generator=gen, dtype=torch.float64), 1)
        g1, g2 = _autograd(lambda a, c: L.pixel_info_nce(a, c, tau, "all"), f1, f2)
        record("pixel_info_nce", g1, _fd_grad(lambda a: R.pixel_info_nce(a, f2, tau), f1.clone()))
        record("pixel_info_nce", g2, _fd_grad(lambda c: R.pixel_info_nce(f1, c, tau), f2.clone()))

    top = max(worst.values())
    passed = top <= rtol and target_leak <= LEAK_TOL
    detail = (f"max rel err {top:.2e} <= {rtol:g}; target-slot grad {target_leak:.1e}; "
              + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    return CheckResult("gradient checks", passed, detail, top, time.perf_counter() - t0)


def check_info_nce_bounds(n: int = 1000, seed: int = 2) -> CheckResult:
    """log(1 + K e^{-1/tau}) <= L <= log(1 + K e^{1/tau}) plus the exact fixed points."""
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(n):
        d = int(rng.integers(1, 33))
        bq, k = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        tau = float(rng.uniform(0.05, 2.0))
        q = _unit(torch.randn((bq, d), generator=gen, dtype=torch.float64), 1)
        keys = _unit(torch.randn((k, d), generator=gen, dtype=torch.float64), 1)
        val = float(L.info_nce_all_negative(q, keys, tau))
        lo = math.log1p(k * math.exp(-1.0 / tau))
        hi = math.log1p(k * math.exp(1.0 / tau))
        if not lo - 1e-12 <= val <= hi + 1e-12:
            violations += 1
    e1, e2 = torch.zeros(1, 2, dtype=torch.float64), torch.zeros(1, 5, dtype=torch.float64)
    e1[0, 0] = 1.0
    q1 = e1.clone()
    k1 = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    log2 = float(L.info_nce_all_negative(q1, k1, 0.3))
    e2[0, 0] = 1.0
    k4 = torch.eye(5, dtype=torch.float64)[1:]
    log5 = float(L.info_nce_all_negative(e2, k4, 0.07))
    fixed_err = max(abs(log2 - math.log(2)), abs(log5 - math.log(5)))
    passed = violations == 0 and fixed_err <= EXACT_TOL
    return CheckResult("all-negative InfoNCE bounds", passed,
                       f"{violations} bound violations in {n} draws; fixed-point err {fixed_err:.1e}",
                       fixed_err, time.perf_counter() - t0)


def check_split_protocol(n: int = 200, seed: int = 3) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        size = int(rng.integers(2, 600))
        frac = float(rng.uniform(0.01, 1.0))
        s = int(rng.integers(0, 2**31))
        labeled = [(f"img{i}.png", f"mask{i}.png") for i in range(size)]
        try:
            m = disjoint_split(labeled, frac, s)
        except ValueError:
            # too few selected images is a legitimate refusal
            continue
        x1, x2 = set(m.labeled_x1), set(m.labeled_x2)
        lab_imgs = {i for i, _ in x1 | x2}
        if x1 & x2 or abs(len(x1) - len(x2)) > 1 or lab_imgs & set(m.unlabeled) \
                or len(lab_imgs) + len(m.unlabeled) != size:
            bad += 1
    k472 = disjoint_split([(f"k{i}.png", f"k{i}_m.png") for i in range(472)], 0.05, 0)
    instance_ok = len(k472.labeled_x1) == 12 and len(k472.labeled_x2) == 12
    return CheckResult("split protocol", bad == 0 and instance_ok,
                       f"{bad} invariant violations in {n} splits; 472 @ 5% -> "
                       f"{len(k472.labeled_x1)} + {len(k472.labeled_x2)}",
                       float(bad), time.perf_counter() - t0)


def check_dsc(n: int = 500, seed: int = 4) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n):
        h, w = (int(v) for v in rng.integers(1, 33, size=2))
        density = rng.uniform(0, 1)
        a = rng.random((h, w)) < density * rng.uniform(0, 1)
        b = rng.random((h, w)) < density
        got, ref = dsc(a, b), R.dsc(a, b)
        if got != ref or dsc(b, a) != got:
            mismatches += 1
    m = np.zeros((10, 20), bool)
    m[:, :10] = True
    g = np.zeros((10, 20), bool)
    g[:, 5:15] = True
    fixed = [dsc(m, m) == 1.0, dsc(m, ~m) == 0.0, dsc(m, g) == 0.5]
    passed = mismatches == 0 and all(fixed)
    return CheckResult("dice metric", passed, f"{mismatches} mismatches in {n} pairs; fixed points {fixed}",
                       float(mismatches), time.perf_counter() - t0)


CHECKS = (check_loss_oracles, check_gradients, check_info_nce_bounds, check_split_protocol, check_dsc)


def run_all(echo: Callable[[str], None] = print) -> list[CheckResult]:
    results = []
    for check in CHECKS:
        r = check()
        echo(r.line())
        results.append(r)
    return results
