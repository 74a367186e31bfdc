"""Acceptance gate: one test per numbered criterion.

Each test evaluates its criterion against a fixed tolerance, records a
PASS/FAIL line through ``record_criterion`` (printed after the run, see
conftest), and then asserts. Tolerances and frozen configs live here and
are not to be loosened to force a pass; a red line plus its detail string
is the honest outcome when a criterion does not hold.
"""

import json
import subprocess
import sys
import time

import numpy as np

from conftest import record_criterion
from svdti.core import DwiVolume, GradientScheme
from svdti.fit import derive_metrics, fit_tensor_ols
from svdti.loss import loss_and_grad
from svdti.metrics import SSIM_K1, SSIM_K2, psnr, ssim
from svdti.nala import NalaState, nala_update
from svdti.net import backward, forward, init_params
from svdti.phantom import NoiseSpec, add_rician_noise, make_phantom, simulate_dwi
from svdti.qspace import apply_subsampling, fibonacci_scheme, pair_energy, select_uniform

# Frozen benchmark config for the ablation-trend criterion. The fixed-lambda
# arm uses the tuned weight 0.05; every other knob is written out explicitly
# so the run does not drift if library defaults ever change.
ABLATION_CONFIG = {
    "data": {
        "dims": [24, 24, 24],
        "preset": "mixed",
        "phantom_seed": 0,
        "n_dirs": 90,
        "bval": 1000.0,
        "n_b0": 1,
        "k": 6,
        "subsample_restarts": 20,
        "subsample_seed": 0,
        "noise_sigma": 0.025,
        "noise_seed": 0,
        "split": [0.6, 0.2, 0.2],
        "split_seed": 0,
    },
    "train": {
        "patch_size": 3,
        "stride": 1,
        "batch_size": 64,
        "hidden_sizes": [64, 64],
        "learning_rate": 0.001,
        "inner_epochs": 1,
        "outer_steps": 40,
        "fixed_lambda": 0.05,
        "lambda0": 0.05,
        "beta": 0.9,
        "kappa": 0.001,
        "lambda_bounds": [0.0, 10.0],
    },
    "ablate": {
        "modes": ["plain", "svd_reg_fixed", "svd_reg_nala"],
        "seeds": [0, 1, 2],
    },
}

# Small, fast config for the byte-identity criterion: all three modes, one
# seed, two outer steps.
REPRO_CONFIG = {
    "data": {"dims": [12, 12, 15], "n_dirs": 18, "noise_sigma": 0.02},
    "train": {
        "hidden_sizes": [8],
        "outer_steps": 2,
        "batch_size": 128,
        "fixed_lambda": 0.1,
        "lambda0": 0.1,
    },
    "ablate": {"seeds": [0]},
}


def _run_ablate(workdir, config: dict, out_base: str) -> subprocess.CompletedProcess:
    cfg_path = workdir / "exp.json"
    cfg_path.write_text(json.dumps(config, indent=2) + "\n")
    cmd = [sys.executable, "-m", "svdti", "ablate", "--threads", "1",
           "--config", str(cfg_path), "--out", out_base]
    return subprocess.run(cmd, cwd=workdir, capture_output=True, text=True)


def test_criterion_01_scale_substitution():
    detail = ("cohort-scale training data and the large pretrained backbone "
              "are out of reach on a desk machine; criteria 2-10 are the "
              "substituted property-based gate")
    assert record_criterion(
        1, "full-scale benchmark reproduction is out of scope by design", True, detail)


def test_criterion_02_noiseless_round_trip():
    start = time.perf_counter()
    field = make_phantom((16, 16, 16), "mixed", seed=0)
    parent = fibonacci_scheme(90, 1000.0, n_b0=1)
    sel = select_uniform(parent, 6, restarts=20, seed=0)
    vol = apply_subsampling(simulate_dwi(field, parent), sel, n_b0=1)

    fitted = derive_metrics(fit_tensor_ols(vol))
    truth = derive_metrics(field)
    elapsed = time.perf_counter() - start

    same_mask = bool(np.array_equal(fitted.mask, truth.mask))
    worst = 0.0
    if same_mask:
        m = truth.mask
        for name in ("fa", "md", "ad"):
            diff = np.abs(getattr(fitted, name)[m] - getattr(truth, name)[m])
            worst = max(worst, float(diff.max()))
    ok = same_mask and worst <= 1e-8 and elapsed < 5.0
    detail = f"max |error| {worst:.3e} across fa/md/ad, {elapsed:.2f}s"
    assert record_criterion(
        2, "noiseless 6+1 fit round-trips phantom maps within 1e-8", ok, detail)


def _gapped_pair(rng: np.random.Generator) -> tuple:
    # Keep singular values simple (well separated, away from the zero clamp)
    # so the loss is smooth at the evaluation point.
    while True:
        pred = rng.standard_normal((27, 3))
        gt = rng.standard_normal((27, 3))
        sp = np.linalg.svd(pred, compute_uv=False)
        sg = np.linalg.svd(gt, compute_uv=False)
        gaps = np.concatenate([-np.diff(sp), -np.diff(sg), sp[-1:], sg[-1:]])
        if gaps.min() > 1e-3:
            return pred, gt


def test_criterion_03_loss_gradient_vs_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    pairs = [_gapped_pair(rng) for _ in range(100)]
    h = 1e-6
    worst = 0.0

    for lam in (0.0, 0.5, 2.0):
        for pred, gt in pairs:
            _, grad = loss_and_grad(pred, gt, lam)
            v = rng.standard_normal((27, 3))
            v /= np.linalg.norm(v)
            f_plus = loss_and_grad(pred + h * v, gt, lam)[0].total
            f_minus = loss_and_grad(pred - h * v, gt, lam)[0].total
            fd = (f_plus - f_minus) / (2.0 * h)
            an = float(np.sum(grad * v))
            worst = max(worst, abs(fd - an) / max(1.0, abs(fd), abs(an)))

        # Element-wise check on a subset: every one of the 81 coordinates.
        for pred, gt in pairs[:10]:
            _, grad = loss_and_grad(pred, gt, lam)
            for i in range(27):
                for j in range(3):
                    e = np.zeros((27, 3))
                    e[i, j] = h
                    fd = (loss_and_grad(pred + e, gt, lam)[0].total
                          - loss_and_grad(pred - e, gt, lam)[0].total) / (2.0 * h)
                    an = float(grad[i, j])
                    worst = max(worst, abs(fd - an) / max(1.0, abs(fd), abs(an)))

    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 10.0
    detail = f"worst relative error {worst:.3e} over 100 pairs x 3 lambdas, {elapsed:.2f}s"
    assert record_criterion(
        3, "analytic loss gradient matches central differences at 1e-5", ok, detail)


def _loss_of(params, x: np.ndarray, target: np.ndarray) -> float:
    out, _ = forward(params, x)
    return 0.5 * float(np.sum((out - target) ** 2))


def _perturbed(params, kind: str, layer: int, delta: np.ndarray):
    weights = [w.copy() for w in params.weights]
    biases = [b.copy() for b in params.biases]
    target = weights if kind == "weights" else biases
    target[layer] = target[layer] + delta
    return type(params)(weights=weights, biases=biases)


def test_criterion_04_network_backward_vs_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    archs = []
    for _ in range(10):
        hidden = [int(rng.integers(3, 17)) for _ in range(int(rng.integers(1, 4)))]
        archs.append((int(rng.integers(2, 9)), *hidden, 3 * int(rng.integers(1, 5))))

    h = 1e-6
    worst = 0.0
    for idx, arch in enumerate(archs):
        params = init_params(arch, seed=idx)
        # Redraw inputs until no ReLU preactivation sits inside the FD step,
        # otherwise the kink makes central differences meaningless.
        for _ in range(50):
            x = rng.standard_normal((4, arch[0]))
            out, tape = forward(params, x)
            if min(float(np.abs(p).min()) for p in tape.preacts) > 1e-4:
                break
        target = rng.standard_normal(out.shape)
        flat_target = target.reshape(out.shape)
        grads = backward(params, tape, out - flat_target)

        for layer in range(len(params.weights)):
            for kind in ("weights", "biases"):
                base = getattr(params, kind)[layer]
                grad = getattr(grads, kind)[layer]
                checks = [rng.standard_normal(base.shape)]
                if idx < 2:
                    # Full element-wise sweep on the first two nets.
                    for flat in range(base.size):
                        e = np.zeros(base.size)
                        e[flat] = 1.0
                        checks.append(e.reshape(base.shape))
                for v in checks:
                    v = v / np.linalg.norm(v)
                    fd = (_loss_of(_perturbed(params, kind, layer, h * v), x, flat_target)
                          - _loss_of(_perturbed(params, kind, layer, -h * v), x, flat_target)
                          ) / (2.0 * h)
                    an = float(np.sum(grad * v))
                    worst = max(worst, abs(fd - an) / max(1.0, abs(fd), abs(an)))

    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 30.0
    detail = f"worst relative error {worst:.3e} over {len(archs)} architectures, {elapsed:.2f}s"
    assert record_criterion(
        4, "network backward pass matches finite differences at 1e-5", ok, detail)


def test_criterion_05_momentum_recurrence_exact():
    state = NalaState(lam=0.1, momentum=0.0, prev_reg_value=0.0, beta=0.9, kappa=0.01)
    s1, _ = nala_update(state, 0.5)
    s2, _ = nala_update(s1, 0.4)
    # Hand evaluation: m1 = 0.9*0 + 0.5 + 0.9*(0.5 - 0)   = 0.95
    #                  m2 = 0.9*0.95 + 0.4 + 0.9*(0.4 - 0.5) = 1.165
    err1 = abs(s1.momentum - 0.95)
    err2 = abs(s2.momentum - 1.165)
    ok = err1 <= 1e-12 and err2 <= 1e-12
    ok = ok and abs(s1.lam - (0.1 - 0.01 * 0.95)) <= 1e-15
    ok = ok and abs(s2.lam - (s1.lam - 0.01 * 1.165)) <= 1e-15

    # beta = 0 collapses the recurrence to plain descent on the reg value.
    plain = NalaState(lam=0.5, momentum=0.0, prev_reg_value=0.0, beta=0.0, kappa=0.02)
    lam = 0.5
    rng = np.random.default_rng(5)
    for r in rng.uniform(0.0, 1.0, size=6):
        r = float(r)
        plain, _ = nala_update(plain, r)
        lam = lam - 0.02 * r
        ok = ok and plain.momentum == r and plain.lam == lam

    detail = f"|m1-0.95| = {err1:.2e}, |m2-1.165| = {err2:.2e}, beta=0 reduces to plain descent"
    assert record_criterion(
        5, "momentum recurrence is exact and beta=0 degenerates cleanly", ok, detail)


def test_criterion_06_rician_second_moment():
    start = time.perf_counter()
    dims = (100, 100, 100)
    scheme = GradientScheme(
        bvals=np.array([0.0, 1000.0, 1000.0, 1000.0]),
        bvecs=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                        [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
    )
    levels = (0.0, 0.5, 1.0)
    data = np.empty(dims + (4,))
    data[..., 0] = 1.0
    for ch, s in enumerate(levels, start=1):
        data[..., ch] = s
    vol = DwiVolume(data=data, mask=np.ones(dims, dtype=bool), scheme=scheme)

    sigma = 0.05  # relative to the mean masked b0 signal, which is 1 here
    noisy = add_rician_noise(vol, NoiseSpec(sigma=sigma, seed=77))

    worst = 0.0
    for ch, s in enumerate(levels, start=1):
        second_moment = float(np.mean(noisy.data[..., ch] ** 2))
        expected = s * s + 2.0 * sigma * sigma
        worst = max(worst, abs(second_moment - expected) / expected)
    elapsed = time.perf_counter() - start
    ok = worst <= 0.02 and elapsed < 10.0
    detail = f"worst E[M^2] relative error {worst:.4f} over S in {levels}, {elapsed:.2f}s"
    assert record_criterion(
        6, "Rician magnitude second moment matches S^2 + 2*sigma^2 within 2%", ok, detail)


def test_criterion_07_ablation_trend(tmp_path):
    start = time.perf_counter()
    proc = _run_ablate(tmp_path, ABLATION_CONFIG, "run")
    elapsed = time.perf_counter() - start

    report_path = tmp_path / "run.report.json"
    ok = proc.returncode == 0 and report_path.exists()
    detail = ""
    if not ok:
        tail = (proc.stderr or proc.stdout).strip().splitlines()[-1:] or ["no output"]
        detail = f"exit {proc.returncode}: {tail[0]}"
    else:
        report = json.loads(report_path.read_text())
        modes = report["modes"]
        ok = all(not modes[m]["failures"] for m in modes)
        mse_plain = modes["plain"]["aggregate"]["mse"]["all"]["mean"]
        mse_fixed = modes["svd_reg_fixed"]["aggregate"]["mse"]["all"]["mean"]
        ssim_plain = modes["plain"]["aggregate"]["ssim"]["all"]["mean"]
        ssim_nala = modes["svd_reg_nala"]["aggregate"]["ssim"]["all"]["mean"]
        ok = (ok and mse_fixed <= mse_plain and ssim_nala >= ssim_plain
              and elapsed < 900.0)
        detail = (f"3-seed means: mse fixed {mse_fixed:.5f} vs plain {mse_plain:.5f}, "
                  f"ssim nala {ssim_nala:.5f} vs plain {ssim_plain:.5f}, {elapsed:.0f}s")
    assert record_criterion(
        7, "regularized fixed-lambda beats plain on MSE and adaptive beats plain on SSIM",
        ok, detail)


def test_criterion_08_metric_oracles():
    rng = np.random.default_rng(8)
    a = rng.uniform(0.0, 1.0, size=(16, 20))
    self_err = abs(ssim(a, a, 1.0) - 1.0)

    # Two masked voxels with squared errors 16e-4 and 4e-4 average to a mean
    # squared error of exactly 1e-3 in binary floating point, and
    # 1.0 / 1e-3 -> log10(1000.0) == 3.0, so the decibel value is exact.
    pred = np.zeros((3, 3, 3))
    gt = np.zeros((3, 3, 3))
    mask = np.zeros((3, 3, 3), dtype=bool)
    mask[0, 0, 0] = mask[0, 0, 1] = True
    pred[0, 0, 0] = 0.04
    pred[0, 0, 1] = 0.02
    assert np.mean(np.array([0.04, 0.02]) ** 2) == 1e-3
    psnr_value = psnr(pred, gt, 1.0, mask)

    # Constant images: variances and covariance vanish, so only the
    # luminance factor survives: (2*mu_x*mu_y + C1) / (mu_x^2 + mu_y^2 + C1).
    mu_x, mu_y, c1 = 0.3, 0.5, (SSIM_K1 * 1.0) ** 2
    closed_form = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    got = ssim(np.full((16, 16), mu_x), np.full((16, 16), mu_y), 1.0)
    const_err = abs(got - closed_form)

    ok = self_err <= 1e-12 and psnr_value == 30.0 and const_err <= 1e-4
    detail = (f"|ssim(x,x)-1| = {self_err:.2e}, psnr = {psnr_value!r}, "
              f"constant-pair ssim {got:.6f} vs closed form {closed_form:.6f}")
    assert record_criterion(
        8, "self-SSIM is 1, the 30 dB case is exact, constant-pair SSIM matches closed form",
        ok, detail)
    assert SSIM_K2 == 0.03  # closed form above assumes the standard constants


def test_criterion_09_subset_energy_beats_random():
    start = time.perf_counter()
    parents = [fibonacci_scheme(90, 1000.0, n_b0=1)]
    rng = np.random.default_rng(9)
    for _ in range(4):
        dirs = rng.standard_normal((90, 3))
        norms = np.linalg.norm(dirs, axis=1)
        while norms.min() < 1e-3:
            dirs = rng.standard_normal((90, 3))
            norms = np.linalg.norm(dirs, axis=1)
        dirs /= norms[:, None]
        parents.append(GradientScheme(
            bvals=np.concatenate([[0.0], np.full(90, 1000.0)]),
            bvecs=np.concatenate([np.zeros((1, 3)), dirs]),
        ))

    margins = []
    ok = True
    for pi, parent in enumerate(parents):
        sel = select_uniform(parent, 6, restarts=20, seed=0)
        chosen = pair_energy(parent.bvecs[np.asarray(sel.selected_indices)])
        dir_rows = np.flatnonzero(parent.bvals > 0)
        sub_rng = np.random.default_rng(100 + pi)
        random_mean = float(np.mean([
            pair_energy(parent.bvecs[sub_rng.choice(dir_rows, 6, replace=False)])
            for _ in range(100)
        ]))
        ok = ok and chosen <= random_mean
        margins.append(random_mean - chosen)
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < 5.0
    detail = (f"min energy margin {min(margins):.3f} over 5 parents "
              f"(positive means selected beats random mean), {elapsed:.2f}s")
    assert record_criterion(
        9, "selected 6-of-90 subsets beat the mean random-subset energy", ok, detail)


def test_criterion_10_ablate_byte_identity(tmp_path):
    outputs = []
    ok = True
    detail = ""
    for tag in ("a", "b"):
        workdir = tmp_path / tag
        workdir.mkdir()
        proc = _run_ablate(workdir, REPRO_CONFIG, "run")
        if proc.returncode != 0:
            ok = False
            tail = (proc.stderr or proc.stdout).strip().splitlines()[-1:] or ["no output"]
            detail = f"run {tag} exit {proc.returncode}: {tail[0]}"
            break
        outputs.append(workdir)

    compared = []
    if ok:
        names = ["run.report.json", "run.table.md"]
        names += [f"run.{mode}.seed0.history.jsonl"
                  for mode in ("plain", "svd_reg_fixed", "svd_reg_nala")]
        for name in names:
            first = (outputs[0] / name).read_bytes()
            second = (outputs[1] / name).read_bytes()
            compared.append(name)
            if first != second:
                ok = False
                detail = f"{name} differs between identical runs"
                break
        else:
            detail = f"{len(compared)} files byte-identical across two --threads 1 runs"
    assert record_criterion(
        10, "repeated ablate runs with --threads 1 are byte-identical", ok, detail)
