"""Reflection-aware KTO training: batch statistics, gradient estimator and schedule.

The trainer *ascends* the batch objective

    J = mean_i [ c_i * R_eff_i + lambda_ref * R_reflect_i ],  c_i = w(s_i - eta0)

where ``s_i`` is the policy/reference log-ratio of the preferred trace and
``eta0`` the cross-pair batch estimate of the policy/reference divergence.
The importance weights are held fixed within a step.
"""
import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import CapacityError, DivergenceError, InvalidInputError, NonFiniteError
from .numerics import iou, weight_fn
from .optim import AdamW, clip_by_norm, global_norm
from .policy import (KIND_INDEX, Layout, Policy, PolicySnapshot, TabularPolicy, Trace, exact_kl_to,
                     sft_loss_and_grad, snapshot)
from .rewards import reflect_batch, sampled_iou, semantic_score

# stream tags for counter-based random streams
_SHUFFLE, _SAMPLE, _MASK, _EVAL = 1, 2, 3, 4

METRIC_KEYS = (
    "step", "phase", "epoch", "J", "sft_loss", "eta0", "mean_s", "mean_c", "mean_r_eff",
    "mean_r_reflect", "b_iou", "grad_norm", "composite_kl", "rejected",
    "val_r_eff", "val_iou", "val_semantic", "val_r_reflect", "val_J",
)


def stream(seed, *counters):
    """Independent generator keyed by ``(seed, *counters)``."""
    return np.random.default_rng([int(seed), *(int(c) for c in counters)])


@dataclass
class TrainConfig:
    batch_size: int = 64
    sft_lr: float = 5e-4
    rkto_lr: float = 2e-4
    sft_epochs: int = 3
    rkto_epochs: int = 3
    mc_samples: int = 3
    seed: int = 0
    snapshot_interval: int = 0
    center_eff: bool = False
    center_iou: bool = True
    grad_clip: float = 5.0
    weight_decay: float = 0.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_samples: int = 4
    # "constant", or "linear" decay to zero over each phase
    lr_schedule: str = "constant"
    plateau_window: int = 5
    plateau_tol: float = 1e-3
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be positive")
        if self.lr_schedule not in ("constant", "linear"):
            raise InvalidInputError("lr_schedule must be 'constant' or 'linear'")
        if self.eval_samples < 1:
            raise InvalidInputError("eval_samples must be at least 1")
        if self.mc_samples < 1:
            raise InvalidInputError("mc_samples must be at least 1")
        if min(self.sft_epochs, self.rkto_epochs) < 0:
            raise InvalidInputError("epoch counts must be non-negative")
        if self.sft_lr < 0 or self.rkto_lr < 0:
            raise InvalidInputError("learning rates must be non-negative")
        if self.rkto_lr >= self.sft_lr and self.sft_lr > 0:
            raise InvalidInputError("rkto_lr must be smaller than sft_lr")

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class BatchStats:
    s_hat: np.ndarray
    eta0_hat: float
    c: np.ndarray
    b_iou: float
    d: np.ndarray
    r_eff: np.ndarray
    r_reflect: np.ndarray
    semantic: np.ndarray = None
    ious: np.ndarray = None
    samples: list = field(default_factory=list)


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------


def _ref_policy(ref):
    return ref.policy if isinstance(ref, PolicySnapshot) else ref


def _unpack(batch):
    """Contexts and preferred *text* traces; the mask block is scored by IoU, not likelihood."""
    if not batch:
        raise InvalidInputError("batch is empty")
    return [ex.context for ex in batch], [ex.y_pref.without("mask") for ex in batch]


def batch_log_ratios(policy, ref, batch):
    contexts, traces = _unpack(batch)
    return policy.log_prob_batch(contexts, traces) - _ref_policy(ref).log_prob_batch(contexts, traces)


def eta0_estimate(policy, ref, batch):
    """Cross-pair batch estimate of the policy/reference divergence, floored at 0."""
    if len(batch) < 2:
        raise InvalidInputError("the cross-pair estimate needs at least two examples")
    contexts, traces = _unpack(batch)
    M = policy.log_prob_matrix(contexts, traces) - _ref_policy(ref).log_prob_matrix(contexts, traces)
    B = len(batch)
    off = M.sum() - np.trace(M)
    return max(0.0, off / (B * (B - 1)))


def _eta0(policy, ref, batch):
    if len(batch) >= 2:
        return eta0_estimate(policy, ref, batch)
    if isinstance(policy, TabularPolicy):
        ex = batch[0]
        return exact_kl_to(policy, ref, ex.context, ex.y_pref.without("mask").plan)
    return 0.0


def rkto_objective(stats, cfg):
    return float(np.mean(stats.c * stats.r_eff + cfg.lambda_ref * stats.r_reflect))


def _grid_side(ex):
    return 0 if ex.m_ref is None else len(ex.m_ref)


def _sample_rollouts(policy, batch, key, K):
    """One text rollout per example plus K mask blocks continuing it."""
    rollouts = [None] * len(batch)
    masks = [[] for _ in batch]
    groups = {}
    for i, ex in enumerate(batch):
        groups.setdefault((ex.y_pref.without("mask").plan, _grid_side(ex)), []).append(i)
    for (plan, G), idx in groups.items():
        T = sum(n for _, n in plan)
        contexts = [batch[i].context for i in idx]
        U = np.stack([stream(*key, _SAMPLE, i).random(T) for i in idx]) if T else np.zeros((len(idx), 0))
        texts = policy.sample_batch(contexts, plan, U) if T else [Trace() for _ in idx]
        for j, i in enumerate(idx):
            rollouts[i] = texts[j]
        if G:
            for k in range(K):
                Um = np.stack([stream(*key, _MASK, i, k).random(G * G) for i in idx])
                blocks = policy.sample_batch(contexts, (("mask", G * G),), Um, prefix_len=T)
                for j, i in enumerate(idx):
                    masks[i].append(Trace(texts[j].segments + blocks[j].segments))
    return rollouts, masks


def _rollout_scores(policy, batch, rcfg, key, K):
    """Rollouts plus their semantic scores and per-sample mask IoUs."""
    rollouts, masks = _sample_rollouts(policy, batch, key, K)
    sem = np.array([semantic_score(r, ex.y_pref, rcfg) for r, ex in zip(rollouts, batch)])
    has_mask = np.array([ex.m_ref is not None for ex in batch])
    ious = np.zeros((len(batch), K))
    for i, ex in enumerate(batch):
        if has_mask[i]:
            ious[i] = [sampled_iou(m, ex.mask, len(ex.m_ref)) for m in masks[i]]
    return rollouts, masks, sem, ious, has_mask


def batch_statistics(policy, ref, batch, rcfg, tcfg, key, with_grad=True):
    """Rollouts, rewards and weights for one batch; optionally the ascent direction."""
    contexts, traces = _unpack(batch)
    B, K, alpha = len(batch), tcfg.mc_samples, rcfg.alpha
    s_hat = batch_log_ratios(policy, ref, batch)
    eta0 = _eta0(policy, ref, batch)
    c = weight_fn(s_hat - eta0, rcfg.w_max)
    c = np.atleast_1d(c)

    rollouts, masks, sem, ious, has_mask = _rollout_scores(policy, batch, rcfg, key, K)
    b_iou = float(ious[has_mask].mean()) if (tcfg.center_iou and has_mask.any()) else 0.0
    r_eff = np.where(has_mask, alpha * sem + (1 - alpha) * ious.mean(axis=1), sem)
    d = np.where(has_mask[:, None], c[:, None] * (1 - alpha) * (ious - b_iou), 0.0)

    r_refls = [r.segment("reflection") if rcfg.sampled_reflection and r.has("reflection") else None
               for r in rollouts]
    losses, grad_reflect = reflect_batch(policy, contexts, traces, rcfg, r_refls, with_grad=with_grad)
    r_reflect = 1.0 - losses

    stats = BatchStats(s_hat=s_hat, eta0_hat=eta0, c=c, b_iou=b_iou, d=d, r_eff=r_eff,
                       r_reflect=r_reflect, semantic=sem, ious=ious,
                       samples=list(zip(rollouts, masks)))
    if not with_grad:
        return stats, None

    r_tilde = r_eff - r_eff.mean() if tcfg.center_eff else r_eff
    grads = policy.grad_log_prob_batch(contexts, traces, c * r_tilde / B)
    for k_ in grads:
        grads[k_] -= rcfg.lambda_ref * grad_reflect[k_] / B
    mi = [i for i in range(B) if has_mask[i]]
    if mi:
        mctx = [contexts[i] for i in mi for _ in range(K)]
        mtr = [m for i in mi for m in masks[i]]
        coef = np.concatenate([d[i] for i in mi]) / (B * K)
        gm = policy.grad_log_prob_batch(mctx, mtr, coef, kinds=("mask",))
        for k_ in grads:
            grads[k_] += gm[k_]
    return stats, grads


def rkto_grad(policy, ref, batch, rcfg, tcfg, key):
    """Ascent direction of the batch objective (before clipping)."""
    return batch_statistics(policy, ref, batch, rcfg, tcfg, key)[1]


# --------------------------------------------------------------------------
# REINFORCE pieces, exposed for verification
# --------------------------------------------------------------------------


def mask_reinforce_grad(policy, x, prefix, m_ref, baseline, key, n_samples, weight=1.0):
    """Monte-Carlo estimate of ``weight * grad E[IoU(m, m_ref)]`` for one context.

    Mask blocks are drawn after ``prefix``; ``baseline`` is subtracted from each
    sample's IoU before it multiplies the score function.
    """
    G = len(m_ref)
    T = len(prefix)
    U = stream(*key, _MASK).random((n_samples, G * G))
    blocks = policy.sample_batch([x] * n_samples, (("mask", G * G),), U, prefix_len=T)
    full = [Trace(prefix.segments + b.segments) for b in blocks]
    vals = np.array([sampled_iou(m, np.asarray(m_ref), G) for m in full])
    coef = weight * (vals - baseline)
    per_sample = []
    # per-sample gradients feed the standard-error estimate
    for chunk in range(0, n_samples, 4096):
        sl = slice(chunk, chunk + 4096)
        per_sample.append(_per_sample_mask_scores(policy, x, full[sl], coef[sl]))
    scores = np.concatenate(per_sample)
    return scores.mean(axis=0), scores.std(axis=0, ddof=1) / math.sqrt(n_samples)


def _per_sample_mask_scores(policy, x, traces, coef):
    """Rows are ``coef_n * grad log rho(mask_n | x, prefix)`` flattened."""
    layout = Layout.of(traces[0].plan)
    toks = np.array([t.tokens for t in traces], dtype=np.intp)
    enc = policy._encode([x] * len(traces))
    prev, logp = policy._forward(enc, layout, toks)
    dl = -np.exp(logp)
    np.put_along_axis(dl, toks[..., None], np.take_along_axis(dl, toks[..., None], axis=-1) + 1.0, axis=-1)
    dl[:, layout.kinds != KIND_INDEX["mask"]] = 0.0
    dl *= coef[:, None, None]
    rows = np.empty((len(traces), policy.n_params))
    for n in range(len(traces)):
        g = policy.zeros_like_params()
        policy._backward(enc[n:n + 1], layout, prev[n:n + 1], dl[n:n + 1], g)
        rows[n] = Policy.flatten(g)
    return rows


def exact_mask_gradient(policy, x, prefix, m_ref, baseline=0.0, weight=1.0):
    """``weight * E[(IoU - baseline) grad log rho(m)]`` by enumerating every mask."""
    G = len(m_ref)
    masks = np.array(list(itertools.product((0, 1), repeat=G * G)), dtype=np.intp)
    T = len(prefix)
    full = [Trace(prefix.segments + (("mask", tuple(m)),)) for m in masks]
    lp = policy.log_prob_batch([x] * len(full), full) - (policy.log_prob(x, prefix)[0] if T else 0.0)
    p = np.exp(lp)
    vals = np.array([iou(m.reshape(G, G), np.asarray(m_ref)) for m in masks])
    g = policy.grad_log_prob_batch([x] * len(full), full, weight * p * (vals - baseline), kinds=("mask",))
    return Policy.flatten(g), float(np.sum(p * vals))


# --------------------------------------------------------------------------
# steps
# --------------------------------------------------------------------------


def empty_record(**kw):
    rec = dict.fromkeys(METRIC_KEYS)
    rec.update(kw)
    return rec


def train_step(policy, ref, batch, rcfg, tcfg, opt, key, lr=None):
    """One RKTO ascent step in place; returns the metrics record."""
    lr = tcfg.rkto_lr if lr is None else lr
    try:
        with np.errstate(invalid="ignore", over="ignore"):
            stats, grads = batch_statistics(policy, ref, batch, rcfg, tcfg, key)
    except NonFiniteError:
        return empty_record(phase="rkto", rejected=True)
    rec = empty_record(
        phase="rkto", J=rkto_objective(stats, rcfg), eta0=float(stats.eta0_hat),
        mean_s=float(stats.s_hat.mean()), mean_c=float(stats.c.mean()),
        mean_r_eff=float(stats.r_eff.mean()), mean_r_reflect=float(stats.r_reflect.mean()),
        b_iou=float(stats.b_iou), rejected=False,
    )
    norm = global_norm(grads)
    if not (math.isfinite(norm) and math.isfinite(rec["J"])):
        rec.update(grad_norm=None, rejected=True)
        return rec
    grads, norm = clip_by_norm(grads, tcfg.grad_clip)
    rec["grad_norm"] = norm
    opt.step(policy.params, grads, lr, maximize=True)
    return rec


def sft_step(policy, batch, tcfg, opt, lr=None):
    lr = tcfg.sft_lr if lr is None else lr
    with np.errstate(invalid="ignore", over="ignore"):
        loss, grads = sft_loss_and_grad(policy, [(ex.context, ex.y_pref) for ex in batch])
        norm = global_norm(grads)
    rec = empty_record(phase="sft", sft_loss=loss, rejected=False)
    if not math.isfinite(norm) or not math.isfinite(loss):
        rec.update(rejected=True)
        return rec
    grads, norm = clip_by_norm(grads, tcfg.grad_clip)
    rec["grad_norm"] = norm
    opt.step(policy.params, grads, lr)
    return rec


def evaluate(policy, ref, examples, rcfg, tcfg, chunk=None):
    """Validation metrics averaged over ``tcfg.eval_samples`` seeded rollouts per example.

    Rollout uniforms depend only on ``(seed, example offset, rollout index)``,
    so different policies are compared under common random numbers.
    """
    if not examples:
        return {}
    chunk = chunk or tcfg.batch_size
    E = tcfg.eval_samples
    r_eff, sem, ious, r_ref, J = [], [], [], [], []
    for start in range(0, len(examples), chunk):
        part = examples[start:start + chunk]
        contexts, traces = _unpack(part)
        s_hat = batch_log_ratios(policy, ref, part)
        c = np.atleast_1d(weight_fn(s_hat - _eta0(policy, ref, part), rcfg.w_max))
        sem_e = np.zeros(len(part))
        iou_e = np.zeros(len(part))
        first = None
        for r in range(E):
            rollouts, _, s_r, iou_r, has = _rollout_scores(policy, part, rcfg, (tcfg.seed, _EVAL, start, r), 1)
            first = first or rollouts
            sem_e += s_r / E
            iou_e += iou_r[:, 0] / E
        r_refls = [x.segment("reflection") if rcfg.sampled_reflection and x.has("reflection") else None
                   for x in first]
        refl = 1.0 - reflect_batch(policy, contexts, traces, rcfg, r_refls, with_grad=False)[0]
        eff = np.where(has, rcfg.alpha * sem_e + (1 - rcfg.alpha) * iou_e, sem_e)
        r_eff.append(eff)
        sem.append(sem_e)
        ious.append(iou_e[has])
        r_ref.append(refl)
        J.append(c * eff + rcfg.lambda_ref * refl)
    cat = np.concatenate
    iou_all = cat(ious)
    return {
        "val_r_eff": float(cat(r_eff).mean()),
        "val_semantic": float(cat(sem).mean()),
        "val_iou": float(iou_all.mean()) if iou_all.size else None,
        "val_r_reflect": float(cat(r_ref).mean()),
        "val_J": float(cat(J).mean()),
    }


# --------------------------------------------------------------------------
# composite divergence and the alignment check
# --------------------------------------------------------------------------


def composite_kl(policy, teacher, contexts, plan, lambda_ref, budget=1_000_000):
    """Mean over contexts of output KL plus lambda_ref times reflection-marginal KL."""
    total = 0.0
    cache = {}
    for x in contexts:
        key = x.cls if isinstance(policy, TabularPolicy) else id(x)
        if key not in cache:
            val = exact_kl_to(policy, teacher, x, plan, budget=budget)
            if lambda_ref and any(k == "reflection" for k, _ in plan):
                val += lambda_ref * exact_kl_to(policy, teacher, x, plan, segment="reflection", budget=budget)
            cache[key] = val
        total += cache[key]
    return total / len(contexts)


@dataclass
class TheoremResult:
    trajectory: list
    ratio: float
    frac_nonincreasing: float
    passed: bool
    max_ratio: float = 0.5
    min_frac: float = 0.95
    slack: float = 1e-6


def theorem_check(examples, teacher, rcfg, tcfg, policy=None, n_steps=200, lr=None, init_scale=1.0,
                  max_ratio=0.5, min_frac=0.95, slack=1e-6, budget=1_000_000):
    """Full-batch RKTO steps on a tabular task, tracking the exact composite KL."""
    pool = [ex for ex in examples if ex.desired] or list(examples)
    plan = pool[0].y_pref.without("mask").plan
    if any(ex.y_pref.without("mask").plan != plan for ex in pool):
        raise InvalidInputError("theorem check needs a single text layout")
    if not isinstance(teacher, TabularPolicy):
        raise CapacityError("exact divergence needs a tabular teacher")
    if policy is None:
        T = len(pool[0].y_pref)
        policy = TabularPolicy(teacher.vocab_size, teacher.n_classes, T, init_scale=init_scale, seed=tcfg.seed)
    if not isinstance(policy, TabularPolicy):
        raise CapacityError("exact divergence needs a tabular policy")
    contexts = [ex.context for ex in pool]
    ref = snapshot(policy)
    opt = AdamW(tcfg.adam_betas, tcfg.adam_eps, tcfg.weight_decay)
    lr = tcfg.rkto_lr if lr is None else lr
    traj = [composite_kl(policy, teacher, contexts, plan, rcfg.lambda_ref, budget)]
    for step in range(n_steps):
        rec = train_step(policy, ref, pool, rcfg, tcfg, opt, (tcfg.seed, step), lr=lr)
        if rec["rejected"]:
            continue
        traj.append(composite_kl(policy, teacher, contexts, plan, rcfg.lambda_ref, budget))
    return summarize_trajectory(traj, max_ratio, min_frac, slack)


def summarize_trajectory(traj, max_ratio=0.5, min_frac=0.95, slack=1e-6):
    arr = np.asarray(traj)
    ratio = float(arr[-1] / arr[0]) if arr[0] > 0 else (0.0 if arr[-1] <= slack else math.inf)
    steps = np.diff(arr)
    frac = float(np.mean(steps <= slack)) if steps.size else 1.0
    passed = bool(ratio <= max_ratio and frac >= min_frac) if arr[0] > 0 else bool(np.all(arr <= slack))
    return TheoremResult(list(map(float, arr)), ratio, frac, passed, max_ratio, min_frac, slack)


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    k = max(1, math.ceil(n / batch_size))
    return [np.sort(part) for part in np.array_split(order, k)]


class Trainer:
    """SFT epochs, then RKTO epochs, with periodic reference refresh.

    All randomness derives from ``(seed, phase, epoch, step, example)``
    counters, so a run restored from :meth:`state_dict` continues exactly as
    the uninterrupted run would have.
    """

    def __init__(self, policy, train, val, rcfg, tcfg, teacher=None, log=None, on_checkpoint=None):
        self.pool = [ex for ex in train if ex.desired]
        if not self.pool:
            raise InvalidInputError("training set has no desired examples")
        self.val = list(val or [])
        self.policy = policy
        self.rcfg = rcfg
        self.tcfg = tcfg
        self.teacher = teacher
        self.log = log if log is not None else []
        self.on_checkpoint = on_checkpoint
        self.ref = snapshot(policy, 0)
        self.opt = self._new_opt()
        self.phase = "sft" if tcfg.sft_epochs else ("rkto" if tcfg.rkto_epochs else "done")
        self.epoch = 0
        self.batch_index = 0
        self.step = 0
        self.val_history = []
        self.converged = False
        self._plan = None
        if teacher is not None and isinstance(policy, TabularPolicy):
            self._plan = self.pool[0].y_pref.without("mask").plan

    def _new_opt(self):
        return AdamW(self.tcfg.adam_betas, self.tcfg.adam_eps, self.tcfg.weight_decay)

    def _emit(self, rec):
        self.log.append({k: rec.get(k) for k in METRIC_KEYS})

    def _epoch_batches(self):
        tag = 1 if self.phase == "sft" else 2
        return _batches(len(self.pool), self.tcfg.batch_size, stream(self.tcfg.seed, _SHUFFLE, tag, self.epoch))

    def _lr(self, n_batches):
        sft = self.phase == "sft"
        base = self.tcfg.sft_lr if sft else self.tcfg.rkto_lr
        if self.tcfg.lr_schedule == "constant":
            return base
        total = n_batches * (self.tcfg.sft_epochs if sft else self.tcfg.rkto_epochs)
        done = self.epoch * n_batches + self.batch_index
        return base * (1.0 - done / total)

    def _composite(self):
        if self._plan is None:
            return None
        return composite_kl(self.policy, self.teacher, [ex.context for ex in self.pool], self._plan,
                            self.rcfg.lambda_ref)

    def _end_epoch(self):
        if self.tcfg.snapshot_interval == 0:
            self.ref = snapshot(self.policy, self.step)
        if self.val:
            metrics = evaluate(self.policy, self.ref, self.val, self.rcfg, self.tcfg)
            self._emit(empty_record(step=self.step, phase="eval", epoch=self.epoch, **metrics))
            self.val_history.append(metrics["val_J"])
            self._check_plateau()
        self.epoch += 1
        self.batch_index = 0
        total = self.tcfg.sft_epochs if self.phase == "sft" else self.tcfg.rkto_epochs
        if self.epoch >= total:
            self.epoch = 0
            if self.phase == "sft" and self.tcfg.rkto_epochs:
                self.phase = "rkto"
                self.ref = snapshot(self.policy, self.step)
                self.opt = self._new_opt()
            else:
                self.phase = "done"

    def _check_plateau(self):
        w = self.tcfg.plateau_window
        h = self.val_history
        if self.converged or len(h) < w + 1:
            return
        recent = h[-(w + 1):]
        rel = [abs(b - a) / max(abs(a), 1e-12) for a, b in zip(recent, recent[1:])]
        if max(rel) < self.tcfg.plateau_tol:
            self.converged = True
            self._emit(empty_record(step=self.step, phase="converged", epoch=self.epoch))

    def run(self, max_steps=None):
        """Train until the schedule ends or ``max_steps`` further steps were taken."""
        taken = 0
        while self.phase != "done":
            batches = self._epoch_batches()
            while self.batch_index < len(batches):
                if max_steps is not None and taken >= max_steps:
                    return self
                batch = [self.pool[i] for i in batches[self.batch_index]]
                lr = self._lr(len(batches))
                if self.phase == "sft":
                    rec = sft_step(self.policy, batch, self.tcfg, self.opt, lr=lr)
                else:
                    rec = train_step(self.policy, self.ref, batch, self.rcfg, self.tcfg, self.opt,
                                     (self.tcfg.seed, 2, self.step), lr=lr)
                self.step += 1
                self.batch_index += 1
                taken += 1
                rec.update(step=self.step, epoch=self.epoch, composite_kl=self._composite())
                self._emit(rec)
                if rec["rejected"]:
                    raise DivergenceError(f"non-finite {self.phase} update at step {self.step}", rec)
                si = self.tcfg.snapshot_interval
                if si and self.step % si == 0:
                    self.ref = snapshot(self.policy, self.step)
                ci = self.tcfg.checkpoint_interval
                if ci and self.step % ci == 0 and self.on_checkpoint:
                    self.on_checkpoint(self)
            self._end_epoch()
        return self

    def state_dict(self):
        return {
            "policy": self.policy.to_dict(),
            "ref": self.ref.policy.to_dict(),
            "ref_step": self.ref.step,
            "opt": self.opt.state_dict(),
            "phase": self.phase,
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "step": self.step,
            "val_history": [float(v).hex() for v in self.val_history],
            "converged": self.converged,
            "n_log": len(self.log),
        }

    def load_state_dict(self, d):
        self.policy = Policy.from_dict(d["policy"])
        self.ref = snapshot(Policy.from_dict(d["ref"]), d["ref_step"])
        self.opt = AdamW.from_state_dict(d["opt"])
        self.phase = d["phase"]
        self.epoch = d["epoch"]
        self.batch_index = d["batch_index"]
        self.step = d["step"]
        self.val_history = [float.fromhex(v) for v in d["val_history"]]
        self.converged = d["converged"]
        del self.log[d["n_log"]:]
        return self


def run_training(policy, train, val, rcfg, tcfg, teacher=None):
    """Run the full schedule; returns ``(policy, metrics_log)``."""
    if not train:
        raise InvalidInputError("dataset is empty")
    trainer = Trainer(policy, train, val, rcfg, tcfg, teacher=teacher).run()
    return trainer.policy, trainer.log
