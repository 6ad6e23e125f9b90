"""Instruction-effectiveness and reflection-quality rewards.

The text encoder is replaced by a deterministic bag-of-tokens embedding:
each token id owns a fixed Gaussian row drawn from its own seeded stream, and
a sequence embeds to the L2-normalised mean of its rows.
"""
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .exceptions import DecodeError, InvalidInputError
from .numerics import KL_FLOOR, check_prob_dist, cos_rescaled, iou, kl_divergence, kl_grad
from .policy import Layout, Trace, decode_mask


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.7
    beta: tuple = (0.5, 0.2, 0.3)
    gamma: float = 0.2
    lambda_ref: float = 0.2
    w_max: float = 10.0
    embed_dim: int = 16
    embed_seed: int = 7
    # accepted for config compatibility; not used by any computation
    softplus_tau: float = 0.1
    # score cos/length terms on a sampled reflection instead of the preferred one
    sampled_reflection: bool = False

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError("alpha must lie in [0, 1]")
        if len(self.beta) != 3 or min(self.beta) < 0:
            raise InvalidInputError("beta must be three non-negative coefficients")
        if abs(sum(self.beta) - 1.0) > 1e-9:
            raise InvalidInputError(f"beta must sum to 1, got {sum(self.beta)!r}")
        if self.gamma <= 0:
            raise InvalidInputError("gamma must be positive")
        if self.lambda_ref < 0:
            raise InvalidInputError("lambda_ref must be non-negative")
        if self.w_max <= 0:
            raise InvalidInputError("w_max must be positive")
        if self.embed_dim < 1:
            raise InvalidInputError("embed_dim must be positive")

    def to_dict(self):
        d = asdict(self)
        d["beta"] = list(self.beta)
        return d


@lru_cache(maxsize=65536)
def _token_row(token, seed, dim):
    row = np.random.default_rng([seed, token]).standard_normal(dim)
    row.setflags(write=False)
    return row


@lru_cache(maxsize=65536)
def _embed(tokens, seed, dim):
    v = np.mean([_token_row(t, seed, dim) for t in tokens], axis=0)
    n = np.linalg.norm(v)
    if n == 0:
        raise InvalidInputError("embedding collapsed to the zero vector")
    v = v / n
    v.setflags(write=False)
    return v


def embed(tokens, cfg):
    """Unit-norm mean of per-token rows (the bag is sorted, so order never matters)."""
    tokens = tuple(sorted(int(t) for t in tokens))
    if not tokens:
        raise InvalidInputError("cannot embed an empty token sequence")
    return _embed(tokens, cfg.embed_seed, cfg.embed_dim)


def _output_tokens(y):
    if isinstance(y, Trace):
        toks = y.segment("output") if y.has("output") else ()
    else:
        toks = tuple(y)
    if not toks:
        raise InvalidInputError("output segment is empty")
    return toks


def semantic_score(y_hat, y_pref, cfg):
    return cos_rescaled(embed(_output_tokens(y_hat), cfg), embed(_output_tokens(y_pref), cfg))


def r_eff(y_hat, m_hat, y_pref, m_ref, cfg):
    """alpha * rescaled cosine + (1 - alpha) * IoU; cosine alone when no reference mask."""
    sem = semantic_score(y_hat, y_pref, cfg)
    if m_ref is None:
        return sem
    overlap = 0.0 if m_hat is None else iou(m_hat, m_ref)
    return cfg.alpha * sem + (1.0 - cfg.alpha) * overlap


def sampled_iou(y_hat, m_ref, G):
    """IoU of a sampled trace's mask block; a malformed block scores 0."""
    try:
        return iou(decode_mask(y_hat, G), m_ref)
    except DecodeError:
        return 0.0


def reflection_terms(r_refl, y_pref, cfg):
    """The two policy-independent parts of the reflection reward."""
    r_refl = tuple(r_refl)
    if not r_refl:
        raise InvalidInputError("reflection segment is empty")
    sem = cos_rescaled(embed(r_refl, cfg), embed(_output_tokens(y_pref), cfg))
    brevity = float(np.exp(-cfg.gamma * len(r_refl)))
    return sem, brevity


def r_reflect(r_refl, y_pref, p_int, p_refl, cfg):
    sem, brevity = reflection_terms(r_refl, y_pref, cfg)
    p_int = check_prob_dist(p_int, "p_int")
    p_refl = check_prob_dist(p_refl, "p_refl")
    consistency = min(1.0, max(0.0, 1.0 - kl_divergence(p_int, p_refl)))
    b1, b2, b3 = cfg.beta
    return b1 * sem + b2 * brevity + b3 * consistency


def reflect_loss_and_grad(policy, x, y_pref, cfg, r_refl=None):
    """1 - R_reflect and its gradient through the teacher-forced segment distributions.

    The cosine and brevity terms are constants with respect to the policy, so
    only the clamped KL consistency term carries gradient.
    """
    for kind in ("intermediate", "reflection"):
        if not y_pref.has(kind) or not y_pref.segment(kind):
            raise InvalidInputError(f"preferred trace lacks a non-empty {kind!r} segment")
    if r_refl is None:
        r_refl = y_pref.segment("reflection")
    layout = Layout.of(y_pref.plan)
    probs = policy.token_probs(x, y_pref)
    pos_int = layout.positions("intermediate")
    pos_refl = layout.positions("reflection")
    p_int = probs[pos_int].mean(axis=0)
    p_refl = probs[pos_refl].mean(axis=0)
    p_int /= p_int.sum()
    p_refl /= p_refl.sum()
    loss = 1.0 - r_reflect(r_refl, y_pref, p_int, p_refl, cfg)

    kl = kl_divergence(p_int, p_refl)
    dlogits = np.zeros_like(probs)
    if 0.0 < kl < 1.0:
        b3 = cfg.beta[2]
        d_int, d_refl = kl_grad(p_int, p_refl)
        # d loss / d p = b3 * d KL / d p inside the unclamped band
        for pos, g in ((pos_int, b3 * d_int / len(pos_int)), (pos_refl, b3 * d_refl / len(pos_refl))):
            P = probs[pos]
            dlogits[pos] = P * (g - (P * g).sum(axis=1, keepdims=True))
    return loss, policy.backward([x], [y_pref], [dlogits])


def reflect_batch(policy, contexts, traces, cfg, r_refls=None, weights=None, with_grad=True):
    """Vectorised :func:`reflect_loss_and_grad` over a batch.

    Returns per-example losses and, with ``with_grad``, the gradient of
    ``sum_i weights[i] * loss_i``.
    """
    B = len(traces)
    if len(contexts) != B:
        raise InvalidInputError("contexts and traces differ in length")
    for y in traces:
        for kind in ("intermediate", "reflection"):
            if not y.has(kind) or not y.segment(kind):
                raise InvalidInputError(f"preferred trace lacks a non-empty {kind!r} segment")
    if r_refls is None:
        r_refls = [None] * B
    weights = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
    b1, b2, b3 = cfg.beta
    const = np.empty(B)
    for i, y in enumerate(traces):
        sem, brevity = reflection_terms(y.segment("reflection") if r_refls[i] is None else r_refls[i], y, cfg)
        const[i] = b1 * sem + b2 * brevity
    losses = np.empty(B)
    grads = policy.zeros_like_params() if with_grad else None
    policy._validate(contexts, traces)
    for idx, layout, toks, enc in policy._groups(contexts, traces):
        prev, logp = policy._forward(enc, layout, toks)
        probs = np.exp(logp)
        pos_int = layout.positions("intermediate")
        pos_refl = layout.positions("reflection")
        p_int = probs[:, pos_int].mean(axis=1)
        p_refl = probs[:, pos_refl].mean(axis=1)
        p_int /= p_int.sum(axis=1, keepdims=True)
        p_refl /= p_refl.sum(axis=1, keepdims=True)
        q = np.maximum(p_refl, KL_FLOOR)
        safe_p = np.where(p_int > 0, p_int, 1.0)
        kl = np.maximum(np.sum(np.where(p_int > 0, p_int * (np.log(safe_p) - np.log(q)), 0.0), axis=1), 0.0)
        losses[idx] = 1.0 - (const[idx] + b3 * np.clip(1.0 - kl, 0.0, 1.0))
        if not with_grad:
            continue
        active = (kl > 0.0) & (kl < 1.0)
        scale = np.where(active, weights[idx] * b3, 0.0)[:, None]
        d_int = np.where(p_int > 0, np.log(safe_p) - np.log(q) + 1.0, 0.0) * scale / len(pos_int)
        d_refl = -p_int / q * scale / len(pos_refl)
        dlogits = np.zeros_like(probs)
        for pos, g in ((pos_int, d_int), (pos_refl, d_refl)):
            P = probs[:, pos]
            dlogits[:, pos] = P * (g[:, None, :] - (P * g[:, None, :]).sum(axis=2, keepdims=True))
        policy._backward(enc, layout, prev, dlogits, grads)
    return losses, grads
