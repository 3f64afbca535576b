"""The ten acceptance criteria, one test each, at their stated tolerances.

Every test records a one-line verdict; conftest prints them in the
terminal summary (``pytest tests/test_acceptance.py -v``).
"""

import json
import math
import os
import statistics
import time
from collections import defaultdict

import mpmath
import numpy as np

from selfmod import tensor as T
from selfmod.architectures import ArchSpec, ModulationSpec, bn_site_count, build_generator
from selfmod.data import ring_of_gaussians
from selfmod.harness import GridSpec, paired_compare, run_grid, unpaired_compare
from selfmod.layers import SelfModulatedBN, SpectralNormState, gradient_penalty, sbn_forward, spectral_normalize
from selfmod.losses import hinge_loss_d, hinge_loss_g, ns_loss_d, ns_loss_g
from selfmod.metrics import (
    GaussianStats,
    condition_number_score,
    frechet_distance,
    prd_curve,
    prd_from_histograms,
    prd_slopes,
)
from selfmod.train import TrainConfig, build_pair, run_training, train_gan

from conftest import GRAD_RTOL, check_gradients, make_record

RESULTS = []


def verdict(number, title, ok, detail, started):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail} ({time.time() - started:.1f}s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


def worst(errors):
    return max(errors.items(), key=lambda kv: kv[1])


# -- 1 ----------------------------------------------------------------------------------------

def _u(rng, shape):
    x = rng.uniform(-2, 2, size=shape)
    x[np.abs(x) < 1e-3] += 2e-3
    return x


def _gp(w1, w2, real, fake, alpha):
    d = lambda x: T.matmul(T.tanh(T.matmul(x, w1)), w2)  # noqa: E731
    if w1.requires_grad:
        return gradient_penalty(d, real, fake, 10.0, alpha=alpha)
    with T.grad_mode(True):
        return gradient_penalty(d, real, fake, 10.0, alpha=alpha).detach()


def _sbn_generator_case(seed, rng):
    g = build_generator(ArchSpec(family="dcgan-like", latent_dim=4, base_channels=4, num_blocks=1,
                                 output_shape=(8, 8, 1), modulation=ModulationSpec("self")), seed=seed)
    site = g.sites[0].layer
    site.gamma_mod.out_weight.data = rng.normal(size=site.gamma_mod.out_weight.shape)
    site.beta_mod.out_weight.data = rng.normal(size=site.beta_mod.out_weight.shape)
    z = rng.normal(size=(3, 4))

    def fn(w_hidden, w_out, k):
        site.gamma_mod.hidden_weight, site.gamma_mod.out_weight, g.convs[0].weight = w_hidden, w_out, k
        return g(z)

    return fn, [site.gamma_mod.hidden_weight.data, site.gamma_mod.out_weight.data, g.convs[0].weight.data]


def _sbn_layer_case(seed, rng):
    h, z = _u(rng, (6, 3)), _u(rng, (6, 4))
    sbn = SelfModulatedBN(3, 4, hidden=5, rng=rng)
    sbn.gamma_mod.out_weight.data = rng.normal(size=sbn.gamma_mod.out_weight.shape)
    sbn.beta_mod.out_weight.data = rng.normal(size=sbn.beta_mod.out_weight.shape)

    def fn(x, w_hidden, w_out):
        sbn.gamma_mod.hidden_weight, sbn.beta_mod.out_weight = w_hidden, w_out
        return sbn_forward(sbn.stats, sbn.gamma_mod, sbn.beta_mod, x, z, "train")

    return fn, [h, sbn.gamma_mod.hidden_weight.data, sbn.beta_mod.out_weight.data]


def _sn_case(seed, rng):
    w = rng.normal(size=(4, 3))
    state = SpectralNormState(4, rng=rng)
    spectral_normalize(w, state, iterations=20)
    return (lambda weight: spectral_normalize(weight, state, update=False)), [w]


def _gp_case(seed, rng):
    real, fake, alpha = _u(rng, (5, 3)), _u(rng, (5, 3)), rng.uniform(size=5)
    return (lambda w1, w2: _gp(w1, w2, real, fake, alpha)), [_u(rng, (3, 4)) / 2, _u(rng, (4, 1)) / 2]


def _simple(fn, *shapes):
    return lambda seed, rng: (fn, [_u(rng, s) for s in shapes])


def _hinge_safe(fn, *shapes):
    def make(seed, rng):
        arrays = [_u(rng, s) for s in shapes]
        for a in arrays:
            for kink in (1.0, -1.0):
                a[np.abs(a - kink) < 1e-3] += 0.01
        return fn, arrays
    return make


GRADIENT_CASES = {
    "add": _simple(T.add, (3, 4), (4,)), "sub": _simple(T.sub, (3, 4), (1, 4)),
    "mul": _simple(T.mul, (3, 4), (3, 1)), "neg": _simple(T.neg, (3, 4)),
    "div": _simple(lambda a, b: T.div(a, T.add(T.square(b), 0.5)), (3, 4), (4,)),
    "power": _simple(lambda a: T.power(T.add(T.square(a), 1.0), 1.5), (3, 4)),
    "square": _simple(T.square, (3, 4)),
    "sqrt": _simple(lambda a: T.sqrt(T.add(T.square(a), 0.2)), (3, 4)),
    "exp": _simple(T.exp, (3, 4)),
    "log": _simple(lambda a: T.log(T.add(T.square(a), 0.2)), (3, 4)),
    "relu": _simple(T.relu, (3, 4)), "leaky_relu": _simple(T.leaky_relu, (3, 4)),
    "tanh": _simple(T.tanh, (3, 4)), "sigmoid": _simple(T.sigmoid, (3, 4)),
    "softplus": _simple(T.softplus, (3, 4)), "log_softmax": _simple(T.log_softmax, (3, 4)),
    "softmax": _simple(T.softmax, (3, 4)),
    "sum": _simple(lambda a: T.tsum(a, axis=1), (3, 4)),
    "mean": _simple(lambda a: T.mean(a, axis=0, keepdims=True), (3, 4)),
    "reshape": _simple(lambda a: T.reshape(a, (-1,)), (3, 4)),
    "transpose": _simple(T.transpose, (3, 4)),
    "take_rows": _simple(lambda a: T.take_rows(a, np.array([2, 0, 2, 1])), (3, 4)),
    "matmul": _simple(T.matmul, (3, 5), (5, 2)),
    "conv2d_same": _simple(T.conv2d, (2, 4, 4, 2), (3, 3, 2, 2)),
    "conv2d_valid": _simple(lambda x, k: T.conv2d(x, k, padding="valid"), (2, 4, 4, 2), (3, 3, 2, 2)),
    "conv2d_stride2": _simple(lambda x, k: T.conv2d(x, k, stride=2), (2, 4, 4, 2), (3, 3, 2, 2)),
    "upsample": _simple(lambda x: T.upsample_nearest(x, 2), (2, 3, 3, 2)),
    "avg_pool": _simple(T.avg_pool2, (2, 4, 4, 2)),
    "global_sum_pool": _simple(T.global_sum_pool, (2, 4, 4, 2)),
    "batch_moments": _simple(lambda x: T.add(*T.batch_moments(x, (0, 1, 2))), (2, 4, 4, 3)),
    "spectral_norm": _sn_case,
    "sbn_layer": _sbn_layer_case,
    "sbn_generator": _sbn_generator_case,
    "gradient_penalty": _gp_case,
    "ns_loss_d": _simple(ns_loss_d, (8,), (8,)), "ns_loss_g": _simple(ns_loss_g, (8,)),
    "hinge_loss_d": _hinge_safe(hinge_loss_d, (8,), (8,)),
    "hinge_loss_g": _simple(hinge_loss_g, (8,)),
}


def test_criterion_01_gradient_integrity():
    t0 = time.time()
    errors = {}
    for name, make in GRADIENT_CASES.items():
        errs = []
        for seed in range(20):
            fn, arrays = make(seed, np.random.default_rng(seed))
            errs.append(check_gradients(fn, arrays, seed))
        errors[name] = max(errs)
    name, err = worst(errors)
    verdict(1, "gradient integrity", err <= GRAD_RTOL,
            f"{len(errors)} ops x 20 seeds, worst rel err {err:.2e} ({name})", t0)


# -- 2 ----------------------------------------------------------------------------------------

def test_criterion_02_reduction_identity():
    t0 = time.time()
    ok = True
    z = np.random.default_rng(0).normal(size=(8, 16))
    for family, shape in (("dcgan-like", (16, 16, 1)), ("resnet-like", (16, 16, 1)), ("mlp", (2,))):
        base = ArchSpec(family=family, base_channels=8, output_shape=shape)
        selfmod = ArchSpec.from_dict(dict(base.to_dict(), modulation={"kind": "self", "layer_mask": None}))
        ok &= build_generator(base, 5)(z).data.tobytes() == build_generator(selfmod, 5)(z).data.tobytes()

    # all-false mask: trained side by side, the twins stay bit-identical
    ring = ring_of_gaussians(seed=0)
    base = ArchSpec(family="mlp", output_shape=(2,), base_channels=16)
    masked = ArchSpec.from_dict(dict(base.to_dict(), modulation={"kind": "self",
                                                                  "layer_mask": [False] * bn_site_count(base)}))
    pairs = [build_pair(base, TrainConfig(seed=3)), build_pair(masked, TrainConfig(seed=3))]
    for steps in (0, 10, 30):  # cumulative 0, 10, 40 generator steps
        for g, d in pairs:
            train_gan(g, d, ring, TrainConfig(seed=steps, total_steps=steps, batch_size=32))
        outs = [g(z).data.tobytes() for g, _ in pairs]
        ok &= outs[0] == outs[1]
    verdict(2, "reduction identity", ok, "init twins (3 families) and all-false mask at steps 0/10/40", t0)


# -- 3 ----------------------------------------------------------------------------------------

def _mp_sqrt(a):
    e, q = mpmath.eigsy(a)
    return q * mpmath.diag([mpmath.sqrt(max(x, 0)) for x in e]) * q.T


def fid_oracle(mu1, s1, mu2, s2):
    with mpmath.workdps(40):
        a, b = mpmath.matrix(s1.tolist()), mpmath.matrix(s2.tolist())
        ra = _mp_sqrt(a)
        e, _ = mpmath.eigsy(ra * b * ra)
        cross = sum(mpmath.sqrt(max(x, 0)) for x in e)
        diff = sum((mpmath.mpf(x) - mpmath.mpf(y)) ** 2 for x, y in zip(mu1, mu2))
        return float(diff + sum(a[i, i] + b[i, i] for i in range(a.rows)) - 2 * cross)


def test_criterion_03_fid_analytic_suite():
    t0 = time.time()
    G = lambda mu, s: GaussianStats(np.atleast_1d(np.asarray(mu, float)), np.atleast_2d(np.asarray(s, float)))  # noqa: E731
    rng = np.random.default_rng(11)
    m = rng.normal(size=(3, 3))
    same = G(rng.normal(size=3), m @ m.T + np.eye(3))
    analytic = [(frechet_distance(same, same), 0.0),
                (frechet_distance(G([0.0], [[1.0]]), G([1.0], [[1.0]])), 1.0),
                (frechet_distance(G([0.0], [[4.0]]), G([0.0], [[1.0]])), 1.0)]
    a_err = max(abs(v - ref) for v, ref in analytic)
    o_err = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        x, y = rng.normal(size=(n, n)), rng.normal(size=(n, n))
        s1, s2 = x @ x.T + 0.1 * np.eye(n), y @ y.T + 0.1 * np.eye(n)
        mu1, mu2 = rng.normal(size=n), rng.normal(size=n)
        o_err = max(o_err, abs(frechet_distance(G(mu1, s1), G(mu2, s2)) - fid_oracle(mu1, s1, mu2, s2)))
    verdict(3, "FID analytic suite", a_err <= 1e-8 and o_err <= 1e-6,
            f"analytic max err {a_err:.1e}, oracle max err over 100 SPD pairs {o_err:.1e}", t0)


# -- 4 ----------------------------------------------------------------------------------------

class _LinearG:
    training = False

    def __init__(self, a):
        self.a = a

    def __call__(self, z):
        return T.matmul(z, T.Tensor(self.a.T))


def _fd_jacobian(g, z, h=1e-6):
    cols = []
    with T.no_grad():
        for j in range(z.size):
            e = np.zeros_like(z)
            e[j] = h
            cols.append((g(z[None] + e).data - g(z[None] - e).data).reshape(-1) / (2 * h))
    return np.stack(cols, axis=1)


def test_criterion_04_condition_number_oracle():
    t0 = time.time()
    rel = 0.0
    specs = [ArchSpec(family="mlp", output_shape=(3,), latent_dim=3, base_channels=8,
                      modulation=ModulationSpec("self")),
             ArchSpec(family="dcgan-like", output_shape=(8, 8, 1), latent_dim=4, base_channels=4,
                      num_blocks=1, modulation=ModulationSpec("self"))]
    for seed in range(5):
        for spec in specs:
            rng = np.random.default_rng(seed)
            g = build_generator(spec, seed=seed)
            for site in g.sites:
                site.layer.gamma_mod.out_weight.data = 0.3 * rng.normal(size=site.layer.gamma_mod.out_weight.shape)
            g(rng.normal(size=(32, spec.latent_dim)))  # populate running statistics
            g.eval()
            z = rng.normal(size=(4, spec.latent_dim))
            logs = []
            for row in z:
                s = np.linalg.svd(_fd_jacobian(g, row), compute_uv=False)
                logs.append(math.log(s[0] / s[-1]))
            ref = statistics.fmean(logs)
            rel = max(rel, abs(condition_number_score(g, z) - ref) / abs(ref))
    exact = True
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=(int(rng.integers(3, 7)), 3))
        s = np.linalg.svd(a, compute_uv=False)
        exact &= condition_number_score(_LinearG(a), rng.normal(size=(2, 3))) == math.log(s[0] / s[-1])
    verdict(4, "condition-number oracle", rel <= 1e-3 and exact,
            f"max rel err vs FD+SVD {rel:.1e} over 10 generators, linear case exact={exact}", t0)


# -- 5 ----------------------------------------------------------------------------------------

def test_criterion_05_spectral_norm():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    sig = []
    for _ in range(100):
        w = rng.normal(size=(int(rng.integers(2, 17)), int(rng.integers(2, 17))))
        normed = spectral_normalize(w, SpectralNormState(w.shape[0], rng=rng), iterations=100).data
        sig.append(np.linalg.svd(normed, compute_uv=False)[0])
    verdict(5, "spectral norm", 0.99 <= min(sig) and max(sig) <= 1.01,
            f"100 matrices, 100 power iterations, sigma in [{min(sig):.6f}, {max(sig):.6f}]", t0)


# -- 6 ----------------------------------------------------------------------------------------

def test_criterion_06_prd_suite():
    t0 = time.time()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 2))
    same = prd_curve(x, x.copy())
    a, b = rng.normal(size=(500, 2)) * 0.1, rng.normal(size=(500, 2)) * 0.1 + 50.0
    apart = prd_curve(a, b)
    p, q = np.array([0.5, 0.5, 0.0]), np.array([0.5, 0.0, 0.5])
    hand = prd_from_histograms(p, q)
    lam = prd_slopes()
    alpha = np.array([sum(min(l * pi, qi) for pi, qi in zip(p, q)) for l in lam])
    beta = np.array([sum(min(pi, qi / l) for pi, qi in zip(p, q)) for l in lam])
    h_err = max(np.max(np.abs(hand.precision - alpha)), np.max(np.abs(hand.recall - beta)))
    ok = (abs(same.f8 - 1) <= 1e-9 and abs(same.f_inv8 - 1) <= 1e-9
          and apart.f8 <= 0.05 and apart.f_inv8 <= 0.05 and h_err <= 1e-10)
    verdict(6, "PRD suite", ok, f"identical ({same.f8:.6f}, {same.f_inv8:.6f}), disjoint "
            f"({apart.f8:.3f}, {apart.f_inv8:.3f}), hand-histogram err {h_err:.1e}", t0)


# -- 7 ----------------------------------------------------------------------------------------

def test_criterion_07_desk_scale_training():
    t0 = time.time()
    ring = ring_of_gaussians(8, 1.0, 0.05, seed=0)
    arch = ArchSpec(family="mlp", output_shape=(2,), base_channels=64, modulation=ModulationSpec("self"))
    ratios = []
    good = 0
    for seed in range(5):
        cfg = TrainConfig(seed=seed, loss="hinge", lipschitz="sn", beta1=0.0, beta2=0.9, disc_iters=1,
                          total_steps=2000, eval_every=250, eval_samples=2000)
        rec = run_training(arch, ring, cfg)
        ratio = rec.best_fid / rec.init["fid"] if rec.best_fid is not None else math.inf
        ratios.append(ratio)
        good += rec.status == "ok" and ratio <= 0.2
    verdict(7, "desk-scale training", good >= 4,
            f"{good}/5 seeds reach best/init FID <= 0.2 (ratios {', '.join(f'{r:.4f}' for r in ratios)})", t0)


# -- 8 ----------------------------------------------------------------------------------------

def independent_minima(root):
    """Per (model, conditioning) minimum of seed-median FID, read straight from disk."""
    fids = defaultdict(list)
    for name in os.listdir(os.path.join(root, "runs")):
        with open(os.path.join(root, "runs", name, "record.json")) as fh:
            rec = json.load(fh)
        c = rec["config"]["cell"]
        key = (c["loss"], c["lipschitz"], c["arch"], c["conditioning"], c["beta1"], c["beta2"], c["disc_iters"])
        if rec["status"] == "ok":
            fids[key].append(rec["best_fid"])
    minima = {}
    for key, vals in fids.items():
        group = key[:4]
        minima[group] = min(minima.get(group, math.inf), statistics.median(vals))
    return minima


def test_criterion_08_methodology_pipeline(tmp_path):
    t0 = time.time()
    root = str(tmp_path / "grid")
    grid = GridSpec(losses=["ns", "hinge"], archs=["mlp"], lipschitz=["sn"], seeds=[0, 1, 2])
    budget = dict(total_steps=300, eval_every=100, eval_samples=500, batch_size=64)
    ring = ring_of_gaussians(seed=0)
    res = run_grid(grid, ring, budget, root, {"output_shape": [2], "base_channels": 32})
    records = res.records
    count_ok = len(records) == grid.size() == 36 and len(os.listdir(os.path.join(root, "runs"))) == 36
    resumed = run_grid(grid, ring, budget, root, {"output_shape": [2], "base_channels": 32}).executed == 0
    paired = paired_compare(records)
    n_ok = {s: sum(r.status == s for r in records) for s in ("ok", "diverged", "missing")}
    tally = (paired["wins"] + paired["ties"] + paired["losses"] == paired["settings"]
             and paired["settings"] + len(paired["unmatched"]) == 6)
    un = unpaired_compare(records)
    mine = {(r["loss"], r["lipschitz"], r["arch"], cond): r[cond]["fid"]
            for r in un["rows"] for cond in ("baseline", "self-mod") if not r[cond]["incomparable"]}
    minima_ok = mine == independent_minima(root)
    agree = un["lower"] == paired["lower"]
    ok = count_ok and resumed and tally and minima_ok and agree
    verdict(8, "methodology pipeline", ok,
            f"{len(records)} records {n_ok}, paired {paired['summary']} "
            f"(w/t/l {paired['wins']}/{paired['ties']}/{paired['losses']}), resumed={resumed}, "
            f"independent minima match={minima_ok}", t0)


# -- 9 ----------------------------------------------------------------------------------------

# reference CIFAR10 FIDs, (lipschitz, arch, loss) -> (self-mod, baseline)
REFERENCE_FIDS = {
    ("gp", "resnet-like", "hinge"): (26.93, 28.14), ("gp", "resnet-like", "ns"): (26.74, 28.61),
    ("gp", "dcgan-like", "hinge"): (33.58, 36.24), ("gp", "dcgan-like", "ns"): (33.70, 37.12),
    ("sn", "resnet-like", "hinge"): (18.54, 20.08), ("sn", "resnet-like", "ns"): (20.63, 23.81),
    ("sn", "dcgan-like", "hinge"): (24.66, 26.33), ("sn", "dcgan-like", "ns"): (26.09, 27.41),
}
EXPECTED_REDUCTIONS = {("gp", "hinge"): "4.30", ("gp", "ns"): "6.51", ("sn", "hinge"): "7.67",
                        ("sn", "ns"): "13.36"}


def test_criterion_09_report_fidelity():
    t0 = time.time()
    recs = []
    for (lip, arch, loss), (sm, base) in REFERENCE_FIDS.items():
        lam = 10.0 if lip == "gp" else None
        for seed in range(5):
            recs.append(make_record(loss, lip, arch, "self-mod", sm, gp_lambda=lam, seed=seed))
            recs.append(make_record(loss, lip, arch, "baseline", base, gp_lambda=lam, seed=seed))
    rows = {(r["lipschitz"], r["loss"]): r for r in unpaired_compare(recs)["rows"] if r["arch"] == "resnet-like"}
    got = {k: f"{rows[k]['reduction']:.2f}" for k in EXPECTED_REDUCTIONS}
    mismatched = [f"{k[1]}-{k[0]} {got[k]} vs {v}" for k, v in EXPECTED_REDUCTIONS.items() if got[k] != v]

    pairs = []
    for i in range(144):
        model = dict(loss=("ns", "hinge")[i % 2], beta1=i / 1000)
        pairs.append(make_record(conditioning="baseline", fid=40.0, **model))
        pairs.append(make_record(conditioning="self-mod", fid=39.0 if i < 124 else 41.0, **model))
    summary = paired_compare(pairs)["summary"]
    ok = not mismatched and summary == "124/144 (86%)"
    detail = f"reductions {', '.join(f'{k[1]}-{k[0]} {v}' for k, v in got.items())}; win-rate {summary}"
    if mismatched:
        detail += f"; mismatched: {'; '.join(mismatched)}"
    verdict(9, "report fidelity", ok, detail, t0)


# -- 10 ---------------------------------------------------------------------------------------

def test_criterion_10_determinism():
    t0 = time.time()
    ring = ring_of_gaussians(seed=0)
    arch = ArchSpec(family="mlp", output_shape=(2,), base_channels=32, modulation=ModulationSpec("self"))
    cfg = TrainConfig(seed=7, loss="ns", lipschitz="gp", gp_lambda=10.0, disc_iters=2, total_steps=200,
                      eval_every=50, eval_samples=500)
    first, second = (run_training(arch, ring, cfg).to_json() for _ in range(2))
    verdict(10, "determinism", first == second,
            f"two runs with identical config+seed, {len(first)} JSON bytes, identical={first == second}", t0)
