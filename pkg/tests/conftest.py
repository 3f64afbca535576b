import sys

import numpy as np
import pytest

from selfmod import tensor as T

FD_STEP = 1e-5
GRAD_RTOL = 1e-4


def numeric_grad(f, arrays, step=FD_STEP):
    """Central differences of scalar f(*arrays) w.r.t. each array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + step
            fp = f(*arrays)
            a[idx] = orig - step
            fm = f(*arrays)
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn, arrays, weights_seed=0):
    """Max relative error between autodiff and finite differences of sum(w * fn(...)).

    Random output weights make every output component matter.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[T.Tensor(a) for a in arrays])
    w = np.random.default_rng(weights_seed).normal(size=probe.shape)

    def scalar(*arrs):
        with T.no_grad():
            return float(np.sum(w * fn(*[T.Tensor(a) for a in arrs]).data))

    params = [T.parameter(a.copy()) for a in arrays]
    out = fn(*params)
    analytic = T.grad(T.tsum(T.mul(out, w)), params)
    numeric = numeric_grad(scalar, arrays)
    return max(rel_error(a.data, n) for a, n in zip(analytic, numeric))


def away_from_zero(x, margin=1e-3):
    """Push entries off the kinks of relu-like functions."""
    x = np.array(x)
    x[np.abs(x) < margin] += 2 * margin
    return x


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_record(loss="hinge", lipschitz="sn", arch="resnet-like", conditioning="baseline", fid=10.0,
                beta1=0.0, beta2=0.9, disc_iters=1, gp_lambda=None, seed=0, status="ok",
                cond_number=None, prd=None):
    """Synthetic grid record carrying only what aggregation reads."""
    from selfmod.train import RunRecord

    cell = {"loss": loss, "arch": arch, "lipschitz": lipschitz, "gp_lambda": gp_lambda,
            "beta1": beta1, "beta2": beta2, "disc_iters": disc_iters,
            "conditioning": conditioning, "seed": seed}
    return RunRecord(config={"cell": cell}, best_fid=fid if status == "ok" else None,
                     status=status, final_cond_number=cond_number, prd=prd,
                     init={"fid": 100.0}, d_updates=10 * disc_iters, g_updates=10)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
