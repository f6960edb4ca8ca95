"""Acceptance criteria, one test per criterion.

Every test records a single PASS/FAIL verdict line that is echoed in the
pytest terminal summary. Tolerances and budgets are pinned below and must
not be loosened to make a run pass.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from minmaxsim import selftest
from minmaxsim.checkpoint import load_checkpoint, save_checkpoint
from minmaxsim.data import AugmentConfig, disjoint_split, scan_dataset
from minmaxsim.errors import CheckpointIntegrityError
from minmaxsim.evaluation import Predictor, evaluate_set
from minmaxsim.losses import COMPONENTS, LossWeights
from minmaxsim.models import HeadConfig, ModelConfig, SegNetConfig
from minmaxsim.synthdata import SynthConfig, generate_dataset, generate_unlabeled_variants
from minmaxsim.training import CHECKPOINT_NAME, TrainConfig, train

from conftest import ACCEPTANCE_LINES

# pinned tolerances and budgets
ORACLE_RTOL = 1e-6
ORACLE_CASES = 100
ORACLE_BUDGET_S = 60.0
GRAD_RTOL = 1e-3
GRAD_CASES = 20
GRAD_BUDGET_S = 120.0
BOUND_DRAWS = 1000
SPLIT_TRIPLES = 200
OVERFIT_DSC = 0.95
OVERFIT_EPOCHS = 200
OVERFIT_BUDGET_S = 600.0
BENCH_BUDGET_S = 1800.0
BENCH_SEEDS = (0, 1, 2)
BENCH_FRACTION = 0.10
BENCH_EPOCHS = 100
DSC_PAIRS = 500

# The default widths (32 base channels, 64-channel heads) are too slow for
# a single CPU core inside the time budgets; the toy runs use a narrow model.
TOY_MODEL = ModelConfig(seg=SegNetConfig(encoder_base_channels=8),
                        classifier=HeadConfig(16, 3, 128), projector=HeadConfig(16, 2, 64))
TOY_AUGMENT = AugmentConfig(target_size=(64, 64))
TOY_TRAIN = TrainConfig(epochs=OVERFIT_EPOCHS, batch_size=4, learning_rate=1e-3, k_neg="all", seed=0,
                        checkpoint_every=50)


def record(n, title, ok, detail):
    ACCEPTANCE_LINES.append(f"C{n} {'PASS' if ok else 'FAIL'} {title}: {detail}")
    assert ok, detail


def _timed(check, **kw):
    start = time.perf_counter()
    result = check(**kw)
    return result, time.perf_counter() - start


# criteria 1-4 and 8: oracle, gradient and property checks

def test_c1_loss_oracles():
    r, secs = _timed(selftest.check_loss_oracles, n=ORACLE_CASES, rtol=ORACLE_RTOL)
    record(1, "loss oracle equivalence", r.passed and secs < ORACLE_BUDGET_S,
           f"{ORACLE_CASES} cases, {r.detail}; {secs:.1f}s")


def test_c2_gradients():
    r, secs = _timed(selftest.check_gradients, n=GRAD_CASES, rtol=GRAD_RTOL)
    record(2, "gradient checks", r.passed and secs < GRAD_BUDGET_S,
           f"{r.detail}; {secs:.1f}s")


def test_c3_info_nce_bounds():
    r, secs = _timed(selftest.check_info_nce_bounds, n=BOUND_DRAWS)
    record(3, "all-negative InfoNCE bounds", r.passed, f"{r.detail}; {secs:.1f}s")


def test_c4_split_protocol():
    r, secs = _timed(selftest.check_split_protocol, n=SPLIT_TRIPLES)
    record(4, "split protocol", r.passed, f"{r.detail}; {secs:.1f}s")


def test_c8_dsc_metric():
    r, secs = _timed(selftest.check_dsc, n=DSC_PAIRS)
    record(8, "DSC metric", r.passed, f"{r.detail}; {secs:.1f}s")


# criteria 5, 7 and 9: the overfit setup

@pytest.fixture(scope="module")
def overfit_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    cfg = SynthConfig(n_images=8, size=(64, 64), seed=11)
    generate_dataset(cfg, root)
    generate_unlabeled_variants(cfg, 4, root)
    labeled, unlabeled = scan_dataset(root)
    manifest = disjoint_split(labeled, 1.0, seed=0, unlabeled=unlabeled)
    assert len(labeled) == 8 and len(unlabeled) == 32
    return root, manifest, labeled


@pytest.fixture(scope="module")
def overfit_run(overfit_data, tmp_path_factory):
    _, manifest, _ = overfit_data
    out = tmp_path_factory.mktemp("overfit_run")
    start = time.perf_counter()
    state = train(manifest, TOY_TRAIN, TOY_AUGMENT, out, TOY_MODEL)
    return state, time.perf_counter() - start


def _finite_trace(history):
    return all(math.isfinite(row[k]) for row in history for k in (*COMPONENTS, "total"))


@pytest.mark.slow
def test_c5_overfit(overfit_data, overfit_run):
    _, _, labeled = overfit_data
    state, secs = overfit_run
    report = evaluate_set(state, labeled)
    ok = report.mean_dsc >= OVERFIT_DSC and _finite_trace(state.loss_history) and secs <= OVERFIT_BUDGET_S
    record(5, "overfit sanity", ok,
           f"training ensemble DSC {report.mean_dsc:.4f} (>= {OVERFIT_DSC}), trace finite "
           f"{_finite_trace(state.loss_history)}, {len(state.loss_history)} epochs in {secs:.0f}s "
           f"(<= {OVERFIT_BUDGET_S:.0f}s, 1 CPU core)")


@pytest.mark.slow
def test_c7_ablations(overfit_data, overfit_run):
    _, manifest, labeled = overfit_data
    full, _ = overfit_run
    runs = {"full": full}
    runs["no-classifiers"] = train(manifest, replace(TOY_TRAIN, use_classifiers=False), TOY_AUGMENT, None, TOY_MODEL)
    runs["no-cls-no-proj"] = train(manifest, replace(TOY_TRAIN, use_classifiers=False, use_projectors=False),
                                   TOY_AUGMENT, None, TOY_MODEL)
    disabled = {"full": (), "no-classifiers": ("l_nce_sup",), "no-cls-no-proj": ("l_nce_sup", "l_nce")}
    ok = True
    for name, state in runs.items():
        h = state.loss_history
        ok &= len(h) == OVERFIT_EPOCHS and _finite_trace(h)
        ok &= all(row[c] == 0.0 for row in h for c in disabled[name])
        ok &= all(row[c] > 0.0 for row in h for c in COMPONENTS if c not in disabled[name])
    traces = [tuple(r["total"] for r in s.loss_history) for s in runs.values()]
    ok &= len(set(traces)) == 3
    dsc = {name: evaluate_set(state, labeled).mean_dsc for name, state in runs.items()}
    order = " > ".join(f"{k} {v:.4f}" for k, v in sorted(dsc.items(), key=lambda kv: -kv[1]))
    record(7, "ablation hook", ok,
           f"3 configs completed, disabled components identically 0, logs distinct; training DSC (not gated): {order}")


def test_c9_determinism_and_persistence(overfit_data, tmp_path):
    _, manifest, labeled = overfit_data
    short = replace(TOY_TRAIN, epochs=2)
    a = train(manifest, short, TOY_AUGMENT, tmp_path / "a", TOY_MODEL)
    b = train(manifest, short, TOY_AUGMENT, tmp_path / "b", TOY_MODEL)
    same_trace = a.loss_history == b.loss_history

    path = tmp_path / "a" / CHECKPOINT_NAME
    loaded = load_checkpoint(path, expected_config_hash=a.train_config_hash)
    image = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(0))
    maps_a, maps_l = Predictor(a).prob_maps(image), Predictor(loaded).prob_maps(image)
    bit_identical = all(torch.equal(x, y) for x, y in zip(maps_a, maps_l))
    bit_identical &= evaluate_set(a, labeled).per_image == evaluate_set(loaded, labeled).per_image

    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    (tmp_path / "bad.mms").write_bytes(bytes(raw))
    try:
        load_checkpoint(tmp_path / "bad.mms")
        rejected = False
    except CheckpointIntegrityError:
        rejected = True
    save_checkpoint(loaded, tmp_path / "resaved.mms")
    resave_same = (tmp_path / "resaved.mms").read_bytes() == path.read_bytes()
    ok = same_trace and bit_identical and rejected and resave_same
    record(9, "determinism and persistence", ok,
           f"identical traces {same_trace}, reload bit-identical {bit_identical}, "
           f"corruption rejected {rejected}, re-save byte-identical {resave_same}")


# criterion 6: semi-supervised benefit direction

# Six labels already drive supervised-only held-out DSC to ~0.999 on this
# generator, so both arms sit near the ceiling and the margin is small; both
# are trained for the same number of epochs, long enough to converge.
@pytest.mark.slow
def test_c6_semi_supervised_benefit(tmp_path):
    start = time.perf_counter()
    generate_dataset(SynthConfig(n_images=64, size=(64, 64), seed=101), tmp_path)
    generate_dataset(SynthConfig(n_images=32, size=(64, 64), seed=101), tmp_path / "test", prefix="tst", start=64)
    labeled, _ = scan_dataset(tmp_path)
    test, _ = scan_dataset(tmp_path / "test")
    mms, sup = [], []
    base = replace(TOY_TRAIN, epochs=BENCH_EPOCHS)
    for seed in BENCH_SEEDS:
        manifest = disjoint_split(labeled, BENCH_FRACTION, seed=seed, test=test)
        full = replace(base, seed=seed)
        supervised = replace(full, loss_weights=LossWeights(1.0, 0.0, 0.0, 0.0),
                             use_classifiers=False, use_projectors=False)
        mms.append(evaluate_set(train(manifest, full, TOY_AUGMENT, None, TOY_MODEL), test).mean_dsc)
        sup.append(evaluate_set(train(manifest, supervised, TOY_AUGMENT, None, TOY_MODEL,
                                      method="supervised"), test).mean_dsc)
    secs = time.perf_counter() - start
    ok = np.mean(mms) >= np.mean(sup) and secs <= BENCH_BUDGET_S
    record(6, "semi-supervised benefit direction", ok,
           f"held-out DSC MMS {np.mean(mms):.4f} {[round(v, 4) for v in mms]} vs supervised-only "
           f"{np.mean(sup):.4f} {[round(v, 4) for v in sup]}, 64 images @ {BENCH_FRACTION:.0%} labels, "
           f"{len(BENCH_SEEDS)} seeds, {secs:.0f}s (<= {BENCH_BUDGET_S:.0f}s)")
