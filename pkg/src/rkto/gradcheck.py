"""Central finite-difference checks of the analytic gradients.

Three suites run on seeded random instances (vocabulary <= 8, trace length
<= 6): the mean SFT negative log-likelihood, the reflection loss, and the
log-probability of a single trace. The error of a coordinate is

    |analytic - numeric| / max(|analytic|, |numeric|, floor)

so coordinates whose true gradient is ~0 are judged on absolute error.
"""
from dataclasses import dataclass, field

import numpy as np

from .policy import Context, FeaturizedPolicy, TabularPolicy, Trace, sft_loss_and_grad
from .rewards import RewardConfig, reflect_loss_and_grad

SUITES = ("sft", "reflect", "log_prob")
REL_FLOOR = 1e-2


@dataclass
class Worst:
    error: float = 0.0
    instance: int = -1
    param: str = ""
    index: tuple = ()
    analytic: float = 0.0
    numeric: float = 0.0


@dataclass
class SuiteReport:
    name: str
    h: float
    n_instances: int
    worst: Worst = field(default_factory=Worst)

    @property
    def max_error(self):
        return self.worst.error


def _random_instance(i, rng):
    V = int(rng.integers(6, 9))
    F = int(rng.integers(2, 5))
    plan = [("intermediate", 1), ("reflection", int(rng.integers(1, 3))), ("output", int(rng.integers(1, 3)))]
    if rng.random() < 0.5:
        plan.insert(0, ("thinking", 1))
    if rng.random() < 0.5:
        plan.append(("mask", 1))
    segs = {}
    for kind, n in plan:
        lo, hi = (0, 2) if kind == "mask" else (2, V)
        segs[kind] = tuple(int(t) for t in rng.integers(lo, hi, size=n))
    y = Trace.from_segments(**segs)
    seed = int(rng.integers(2**31))
    if i % 2 == 0:
        pol = FeaturizedPolicy(V, F, embed_dim=3, pos_dim=4, init_scale=0.5, seed=seed)
    else:
        pol = TabularPolicy(V, 2, len(y), init_scale=1.0, seed=seed)
    contexts = [Context(tuple(rng.standard_normal(F)), tuple(int(t) for t in rng.integers(2, V, size=2)),
                        int(rng.integers(0, 2))) for _ in range(2)]
    return pol, contexts, y


def _objective(suite, pol, contexts, y, rcfg):
    if suite == "sft":
        return sft_loss_and_grad(pol, [(x, y) for x in contexts])
    if suite == "reflect":
        return reflect_loss_and_grad(pol, contexts[0], y, rcfg)
    return pol.log_prob(contexts[0], y)[0], pol.grad_log_prob(contexts[0], y)


def _coordinates(pol, rng, n_coords):
    coords = []
    for name, arr in pol.params.items():
        idx = [np.unravel_index(j, arr.shape) for j in range(arr.size)]
        if name != "bias" and arr.size > n_coords:
            picks = rng.choice(arr.size, size=n_coords, replace=False)
            idx = [idx[j] for j in np.sort(picks)]
        coords.extend((name, ix) for ix in idx)
    return coords


def check_suite(suite, n_instances=50, h=1e-5, seed=0, n_coords=24, inject_bug=False, rcfg=None):
    """Worst coordinate error of ``suite`` over seeded random instances."""
    rcfg = rcfg or RewardConfig()
    report = SuiteReport(suite, h, n_instances)
    for i in range(n_instances):
        rng = np.random.default_rng([seed, SUITES.index(suite), i])
        pol, contexts, y = _random_instance(i, rng)
        _, grads = _objective(suite, pol, contexts, y, rcfg)
        if inject_bug and "bias" in grads:
            grads["bias"] = grads["bias"] * 1.01 + 1e-3
        elif inject_bug:
            grads["table"] = grads["table"] * 1.01 + 1e-3
        for name, ix in _coordinates(pol, rng, n_coords):
            arr = pol.params[name]
            orig = arr[ix]
            arr[ix] = orig + h
            fp = _objective(suite, pol, contexts, y, rcfg)[0]
            arr[ix] = orig - h
            fm = _objective(suite, pol, contexts, y, rcfg)[0]
            arr[ix] = orig
            num = (fp - fm) / (2 * h)
            ana = float(grads[name][ix])
            err = abs(ana - num) / max(abs(ana), abs(num), REL_FLOOR)
            if err > report.worst.error:
                report.worst = Worst(err, i, name, tuple(int(k) for k in ix), ana, num)
    return report


def run_gradcheck(n_instances=50, h=1e-5, seed=0, inject_bug=False, suites=SUITES):
    return [check_suite(s, n_instances, h, seed, inject_bug=inject_bug) for s in suites]


def h_sweep(hs=(1e-4, 1e-5, 1e-6), n_instances=10, seed=0, suites=SUITES):
    """Max error per suite at each step size, as ``{suite: [err(h) for h in hs]}``."""
    return {s: [check_suite(s, n_instances, h, seed).max_error for h in hs] for s in suites}
