"""The eleven acceptance criteria, one test each, with a PASS/FAIL line per criterion."""

import json
import time

import numpy as np
import pytest

from conftest import TRAIN_SEEDS, record
from gradcases import CASES, make_case
from oracles import psnr_oracle, rmse_oracle, ssim_oracle
from pvckit.autodiff import Tensor, check_gradients, no_grad
from pvckit.cli import main
from pvckit.dynconv import DenseAttentionState, dense_mix, unrolled_weights
from pvckit.fileio import load_checkpoint, save_checkpoint
from pvckit.losses import LossWeights, composite_loss, imbv, imbv_loss, mae_loss, sobel_loss, ssim_loss
from pvckit.metrics import bland_altman, psnr, rmse, ssim_eval
from pvckit.network import NetworkConfig, build, forward
from pvckit.phantom import PhantomSpec, augment_rotations, cohort_specs, generate, rotate_array, small_spec
from pvckit.pvc import PsfModel, iy_correct, iy_mismatch_demo
from pvckit.volume import Volume


def test_c01_gradients():
    start = time.perf_counter()
    worst, kinds = 0.0, set()
    n = 104
    for seed in range(n):
        kind, fn, tensors = make_case(seed)
        kinds.add(kind)
        worst = max(worst, check_gradients(fn, tensors, max_probes=8, rng=np.random.default_rng(seed)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60 and kinds == {k for k, _ in CASES}
    assert record(1, "gradient checks", ok, f"{n} configs, {len(kinds)} kinds, worst rel err {worst:.1e}, {elapsed:.1f} s")


def test_c02_forced_attention_static():
    dyn = build(NetworkConfig(filters=8), seed=21)
    static = build(NetworkConfig(filters=8, dynamic_enabled=False, dc_dy_enabled=False), seed=99)
    static.load_state({k: v for k, v in dyn.state_dict().items() if k in static.parameters()})
    dyn.set_forced_attention(1.0)
    x = Tensor(np.random.default_rng(21).uniform(size=(2, 1, 8, 16, 16)))
    with no_grad():
        diff = float(np.max(np.abs(forward(dyn, x).data - forward(static, x).data)))
    assert record(2, "forced attention equals static U-net", diff <= 1e-10, f"max abs diff {diff:.1e}")


def test_c03_dense_unroll():
    consts = [2.0, -3.0, 5.0, 7.0, 11.0]
    feats = [Tensor(np.full((1, 2, 2, 3, 3), c)) for c in consts]
    state = DenseAttentionState(feats[0])
    worst = 0.0
    for m, f in enumerate(feats, start=1):
        mixed, state = dense_mix(f, state)
        expect = sum(w * c for w, c in zip(unrolled_weights(m), consts))
        worst = max(worst, float(np.max(np.abs(mixed.data - expect))))
    w5 = unrolled_weights(5)
    shape_ok = w5[::-1][:3] == [0.5, 0.25, 0.125] and w5[0] + w5[1] == 0.125
    ok = worst <= 1e-12 and shape_ok
    assert record(3, "dense mixing unroll", ok, f"5 layers, weights {w5}, max err {worst:.1e}")


def test_c04_parameter_parity():
    on = build(NetworkConfig(dc_dy_enabled=True), seed=0).parameter_count()
    off = build(NetworkConfig(dc_dy_enabled=False), seed=0).parameter_count()
    assert record(4, "DC on/off parameter parity", on == off, f"{on} vs {off} trainable parameters")


def test_c05_iy_recovery():
    start = time.perf_counter()
    spec = PhantomSpec(psf=PsfModel(10.0))
    case = generate(spec)
    ratio = spec.activity["blood_pool"] / spec.activity["myocardium"]
    observed = imbv(case.observed, case.templates)
    corrected = imbv(iy_correct(case.observed, case.templates, spec.psf, 10), case.templates)
    elapsed = time.perf_counter() - start
    excess = observed / case.true_imbv - 1
    err = abs(corrected / case.true_imbv - 1)
    ok = case.observed.dims == (32, 48, 48) and ratio == 4.0 and excess >= 0.15 and err <= 0.05 and elapsed < 10
    assert record(5, "iY recovery", ok,
                  f"true {case.true_imbv:.4f}, observed +{100 * excess:.1f}%, iY err {100 * err:.2f}%, {elapsed:.2f} s")


@pytest.mark.slow
def test_c06_directional_trend(trained_runs):
    lines, ok = [], len(TRAIN_SEEDS) >= 3
    for seed in TRAIN_SEEDS:
        v = trained_runs[(seed, 0.1)]
        ba = bland_altman(v["network"], v["iy"])
        within = int(ba.within(v["network"], v["iy"]).sum())
        seed_ok = v["non-pvc"].mean() > v["network"].mean() and within >= 8 and len(v["iy"]) == 10
        ok &= bool(seed_ok)
        lines.append(f"seed {seed}: non-pvc {v['non-pvc'].mean():.3f} > net {v['network'].mean():.3f}, "
                     f"iY {v['iy'].mean():.3f}, {within}/10 in LoA")
    assert record(6, "directional trend after tiny training", ok, "; ".join(lines))


def test_c07_composite_weights():
    base = generate(small_spec())
    y = Tensor(base.observed.data[None, None])
    x = Tensor(iy_correct(base.observed, base.templates, base.spec.psf, 3).data[None, None])
    got = float(composite_loss(y, x, base.templates, LossWeights(0.8, 0.1, 0.1)).data)
    hand = (float(mae_loss(y, x).data) + 0.8 * float(ssim_loss(y, x).data)
            + 0.1 * float(sobel_loss(y, x).data) + 0.1 * float(imbv_loss(y, x, base.templates).data))
    diff = abs(got - hand)
    assert record(7, "composite loss weights", diff <= 1e-12, f"|composite - hand sum| = {diff:.1e}")


def test_c08_augmentation():
    vols = [Volume(np.full((4, 6, 6), float(i))) for i in range(30)]
    count = len(augment_rotations(vols, 30))
    arr = generate(PhantomSpec(counts_scale=10.0)).observed.data
    exact = all(np.array_equal(rotate_array(arr, 90 * k, 0), np.rot90(arr, k, axes=(1, 2))) for k in (1, 2, 3))
    perm = all(np.array_equal(np.sort(rotate_array(arr, 90 * k, 0), axis=None), np.sort(arr, axis=None))
               for k in (1, 2, 3))
    ok = count == 1020 and exact and perm
    assert record(8, "augmentation count and exact right angles", ok, f"30 inputs -> {count}, permutations exact {exact and perm}")


def test_c09_metric_oracles():
    rng = np.random.default_rng(9)
    y = rng.uniform(size=(16, 16, 16))
    x = np.clip(y + 0.1 * rng.normal(size=y.shape), 0, None)
    errs = [abs(ssim_eval(y, x) - ssim_oracle(y, x)), abs(psnr(y, x) - psnr_oracle(y, x)), abs(rmse(y, x) - rmse_oracle(y, x))]
    self_ssim = ssim_eval(y, y)
    ref = np.zeros((4, 4, 4))
    ref[0, 0, 0] = 1.0
    db = psnr(ref, ref + 0.1)
    ok = max(errs) <= 1e-9 and self_ssim == pytest.approx(1.0, abs=1e-12) and abs(db - 20.0) < 1e-9
    assert record(9, "SSIM/PSNR/RMSE oracles", ok,
                  f"max oracle diff {max(errs):.1e}, SSIM(X,X)={self_ssim:.12f}, PSNR={db:.9f} dB")


def test_c10_mismatch():
    rows = []
    for spec in cohort_specs(PhantomSpec(), 5, seed=11):
        case = generate(spec)
        _, rep = iy_mismatch_demo(case.observed, case.templates, spec.psf, 10, (0, 2, 0), true_imbv=case.true_imbv)
        rows.append((rep.error_aligned, rep.error_mismatched))
    ok = all(m > a for a, m in rows)
    detail = ", ".join(f"{a:.4f}->{m:.4f}" for a, m in rows)
    assert record(10, "template mismatch increases IMBV error", ok, f"5 cases, aligned->shifted |err|: {detail}")


def _pipeline(root, capsys):
    def run(*argv):
        code = main(list(argv))
        out, err = capsys.readouterr()
        assert code == 0, err
        return json.loads(out)

    run("phantom", "gen", "--spec", "small", "--n", "6", "--seed", "5", "--counts", "30", "--out", str(root / "data"), "--threads", "1")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps({"epochs": 2, "batch_size": 3, "lr": 0.01, "network": {"filters": 2}}))
    run("train", "--config", str(cfg), "--seed", "4", "--data", str(root / "data"), "--out", str(root / "run"), "--threads", "1")
    run("eval", "--checkpoint", str(root / "run" / "best.ckpt"), "--out", str(root / "eval"), "--threads", "1")
    return (root / "eval" / "metrics.csv").read_bytes(), load_checkpoint(root / "run" / "best.ckpt")


def test_c11_reproducibility(tmp_path, capsys):
    csv_a, ck_a = _pipeline(tmp_path / "a", capsys)
    csv_b, ck_b = _pipeline(tmp_path / "b", capsys)
    save_checkpoint(tmp_path / "copy.ckpt", ck_a)
    back = load_checkpoint(tmp_path / "copy.ckpt")
    rows = csv_a.decode().splitlines()
    ok = csv_a == csv_b and ck_a.param_hash() == ck_b.param_hash() == back.param_hash() and len(rows) > 1
    assert record(11, "reproducibility", ok,
                  f"metrics CSV identical {csv_a == csv_b} ({len(csv_a)} bytes), checkpoint hash {back.param_hash()[:12]}")
