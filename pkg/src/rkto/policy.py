"""Toy autoregressive policies over segmented chain-of-thought traces.

Two parameterisations share one interface:

* ``FeaturizedPolicy`` -- logits are linear in context features, a learned
  previous-token embedding, segment/position features and the
  context-by-position interaction.
* ``TabularPolicy`` -- an explicit logit table per (context class, position),
  used where exact enumeration of the sequence space is required.

In both, the logits at a position decompose as ``A(x, t) + C(prev)`` where
``C`` depends only on the previous token (or the segment-start marker). The
mask segment only supports the two reserved mask tokens; every other segment
supports the whole vocabulary.
"""
import copy
import hashlib
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CapacityError, DecodeError, DimensionError, FormatError, InvalidInputError

SEGMENT_KINDS = ("thinking", "intermediate", "reflection", "output", "mask")
TEXT_KINDS = SEGMENT_KINDS[:4]
KIND_INDEX = {k: i for i, k in enumerate(SEGMENT_KINDS)}
MASK_OFF = 0
MASK_ON = 1
FIRST_CONTENT = 2
N_MARKERS = len(SEGMENT_KINDS)
CHECKPOINT_FORMAT = "rkto-policy/1"


# --------------------------------------------------------------------------
# data types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Context:
    """Conditioning input: a feature vector, prompt tokens and a class id.

    ``cls`` is only read by the tabular policy.
    """

    features: tuple
    prompt: tuple = ()
    cls: int = 0

    def __post_init__(self):
        feats = tuple(float(v) for v in self.features)
        if not all(np.isfinite(feats)):
            raise InvalidInputError("context features must be finite")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "cls", int(self.cls))

    def to_dict(self):
        return {"features": list(self.features), "prompt": list(self.prompt), "cls": self.cls}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["features"]), tuple(d.get("prompt", ())), d.get("cls", 0))


@dataclass(frozen=True)
class Trace:
    """Ordered ``(kind, tokens)`` segments in the canonical kind order."""

    segments: tuple = field(default_factory=tuple)

    def __post_init__(self):
        segs = tuple((str(k), tuple(int(t) for t in toks)) for k, toks in self.segments)
        last = -1
        for kind, toks in segs:
            if kind not in KIND_INDEX:
                raise InvalidInputError(f"unknown segment kind {kind!r}")
            if KIND_INDEX[kind] <= last:
                raise InvalidInputError("segments must appear at most once, in canonical order")
            last = KIND_INDEX[kind]
            if any(t < 0 for t in toks):
                raise InvalidInputError("token ids must be non-negative")
            if kind == "mask" and any(t not in (MASK_OFF, MASK_ON) for t in toks):
                raise InvalidInputError("mask segment may only hold mask tokens")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def from_segments(cls, **segments):
        return cls(tuple((k, segments[k]) for k in SEGMENT_KINDS if k in segments))

    def has(self, kind):
        return any(k == kind for k, _ in self.segments)

    def segment(self, kind):
        for k, toks in self.segments:
            if k == kind:
                return toks
        raise InvalidInputError(f"trace has no {kind!r} segment")

    def without(self, *kinds):
        return Trace(tuple((k, t) for k, t in self.segments if k not in kinds))

    @property
    def tokens(self):
        return tuple(t for _, toks in self.segments for t in toks)

    @property
    def plan(self):
        return tuple((k, len(t)) for k, t in self.segments)

    def __len__(self):
        return sum(len(t) for _, t in self.segments)

    def to_dict(self):
        return {k: list(t) for k, t in self.segments}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(SEGMENT_KINDS)
        if unknown:
            raise InvalidInputError(f"unknown segment kinds {sorted(unknown)}")
        return cls.from_segments(**{k: tuple(v) for k, v in d.items()})


@dataclass(frozen=True)
class Layout:
    """Per-position bookkeeping for a segment plan."""

    plan: tuple
    kinds: np.ndarray
    local: np.ndarray
    starts: np.ndarray

    @classmethod
    def of(cls, plan):
        plan = tuple((k, int(n)) for k, n in plan if int(n) > 0)
        kinds, local, starts = [], [], []
        for kind, n in plan:
            if kind not in KIND_INDEX:
                raise InvalidInputError(f"unknown segment kind {kind!r}")
            kinds += [KIND_INDEX[kind]] * n
            local += list(range(n))
            starts += [True] + [False] * (n - 1)
        return cls(plan, np.asarray(kinds, dtype=np.intp), np.asarray(local, dtype=np.intp),
                   np.asarray(starts, dtype=bool))

    def __len__(self):
        return len(self.kinds)

    def positions(self, kind):
        return np.flatnonzero(self.kinds == KIND_INDEX[kind])

    def prev_ids(self, tokens, vocab_size):
        """Previous-token input ids; a segment's first position sees its marker."""
        tokens = np.asarray(tokens, dtype=np.intp)
        prev = np.empty_like(tokens)
        prev[..., 1:] = tokens[..., :-1]
        markers = vocab_size + self.kinds
        return np.where(self.starts, markers, prev)


@dataclass(frozen=True)
class PolicySnapshot:
    """A frozen policy copy plus the step at which it was taken."""

    policy: "Policy"
    step: int = 0

    def to_bytes(self):
        return self.policy.to_bytes()


def decode_mask(y, G):
    """Row-major G x G grid from the trace's mask block (on -> 1, off -> 0)."""
    if not y.has("mask"):
        raise DecodeError("trace has no mask segment")
    toks = y.segment("mask")
    if len(toks) != G * G:
        raise DecodeError(f"mask segment has {len(toks)} tokens, expected {G * G}")
    return (np.asarray(toks, dtype=np.intp) == MASK_ON).astype(np.int8).reshape(G, G)


def encode_mask(mask):
    m = np.asarray(mask)
    return tuple(MASK_ON if v else MASK_OFF for v in m.ravel())


def sinusoidal_features(local, n_dims, base):
    """Sine/cosine features of the within-segment index."""
    local = np.asarray(local, dtype=np.float64)
    half = n_dims // 2
    freqs = base ** (-np.arange(half) / max(half, 1))
    ang = local[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _support(kinds, vocab_size):
    sup = np.ones((len(kinds), vocab_size), dtype=bool)
    sup[kinds == KIND_INDEX["mask"], FIRST_CONTENT:] = False
    return sup


def _masked_log_softmax(logits, support):
    z = np.where(support, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _float_list(arr):
    return [float(v).hex() for v in np.asarray(arr, dtype=np.float64).ravel()]


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------


class Policy:
    """Shared machinery; subclasses supply the ``A(x, t)`` part and its backward."""

    mode = None

    def __init__(self, vocab_size, params):
        if vocab_size < FIRST_CONTENT + 1:
            raise InvalidInputError("vocab_size must leave room for content tokens")
        self.vocab_size = int(vocab_size)
        self.params = params

    # -- parameter plumbing ------------------------------------------------

    def config(self):
        raise NotImplementedError

    def copy(self):
        return copy.deepcopy(self)

    def zeros_like_params(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def flat_params(self):
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        i = 0
        for k, v in self.params.items():
            n = v.size
            self.params[k] = flat[i:i + n].reshape(v.shape).copy()
            i += n
        if i != flat.size:
            raise DimensionError("flat parameter vector has the wrong length")

    @staticmethod
    def flatten(grads):
        return np.concatenate([g.ravel() for g in grads.values()])

    @property
    def n_params(self):
        return sum(v.size for v in self.params.values())

    def config_hash(self):
        blob = json.dumps(self.config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "mode": self.mode,
            "config": self.config(),
            "config_hash": self.config_hash(),
            "params": {k: {"shape": list(v.shape), "data": _float_list(v)}
                       for k, v in self.params.items()},
        }

    def to_bytes(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @staticmethod
    def from_dict(d):
        if d.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"unsupported checkpoint format {d.get('format')!r}")
        cls = {"featurized": FeaturizedPolicy, "tabular": TabularPolicy}.get(d.get("mode"))
        if cls is None:
            raise FormatError(f"unknown policy mode {d.get('mode')!r}")
        pol = cls(**d["config"])
        if pol.config_hash() != d["config_hash"]:
            raise FormatError("checkpoint config hash does not match its config")
        for k, entry in d["params"].items():
            if k not in pol.params:
                raise FormatError(f"unexpected parameter {k!r}")
            data = np.array([float.fromhex(s) for s in entry["data"]], dtype=np.float64)
            pol.params[k] = data.reshape(entry["shape"])
        return pol

    @staticmethod
    def from_bytes(blob):
        return Policy.from_dict(json.loads(blob))

    # -- validation ----------------------------------------------------------

    def check_context(self, x):
        if any(t < 0 or t >= self.vocab_size for t in x.prompt):
            raise InvalidInputError("prompt token outside the vocabulary")

    def check_trace(self, y):
        toks = y.tokens
        if not toks:
            raise InvalidInputError("trace is empty")
        if any(t >= self.vocab_size for t in toks):
            raise InvalidInputError("trace token outside the vocabulary")

    # -- subclass hooks --------------------------------------------------------

    def _encode(self, contexts):
        raise NotImplementedError

    def _base_logits(self, enc, layout):
        """(B, T, V) context/position part of the logits."""
        raise NotImplementedError

    def _prev_logits(self):
        """(V + markers, V) previous-token part of the logits."""
        raise NotImplementedError

    def _backward(self, enc, layout, prev, dlogits, grads):
        raise NotImplementedError

    # -- teacher-forced evaluation ---------------------------------------------

    def _groups(self, contexts, traces):
        groups = {}
        for i, y in enumerate(traces):
            groups.setdefault(y.plan, []).append(i)
        for plan, idx in groups.items():
            layout = Layout.of(plan)
            toks = np.array([traces[i].tokens for i in idx], dtype=np.intp).reshape(len(idx), len(layout))
            yield idx, layout, toks, self._encode([contexts[i] for i in idx])

    def _forward(self, enc, layout, toks):
        prev = layout.prev_ids(toks, self.vocab_size)
        logits = self._base_logits(enc, layout) + self._prev_logits()[prev]
        logp = _masked_log_softmax(logits, _support(layout.kinds, self.vocab_size))
        return prev, logp

    def _validate(self, contexts, traces):
        if len(contexts) != len(traces):
            raise DimensionError("contexts and traces differ in length")
        for x in contexts:
            self.check_context(x)
        for y in traces:
            self.check_trace(y)

    def log_prob(self, x, y):
        """Total and per-token log-probability of ``y`` given ``x``."""
        per_token = self.token_log_probs([x], [y])[0]
        return float(per_token.sum()), per_token

    def token_log_probs(self, contexts, traces):
        self._validate(contexts, traces)
        out = [None] * len(traces)
        for idx, layout, toks, enc in self._groups(contexts, traces):
            _, logp = self._forward(enc, layout, toks)
            picked = np.take_along_axis(logp, toks[..., None], axis=-1)[..., 0]
            for j, i in enumerate(idx):
                out[i] = picked[j]
        return out

    def log_prob_batch(self, contexts, traces):
        return np.array([lp.sum() for lp in self.token_log_probs(contexts, traces)])

    def log_prob_matrix(self, contexts, traces):
        """``M[i, j] = log rho(traces[j] | contexts[i])``."""
        for x in contexts:
            self.check_context(x)
        for y in traces:
            self.check_trace(y)
        M = np.empty((len(contexts), len(traces)))
        enc = self._encode(contexts)
        prev_tab = self._prev_logits()
        groups = {}
        for j, y in enumerate(traces):
            groups.setdefault(y.plan, []).append(j)
        for plan, idx in groups.items():
            layout = Layout.of(plan)
            toks = np.array([traces[j].tokens for j in idx], dtype=np.intp).reshape(len(idx), len(layout))
            prev = layout.prev_ids(toks, self.vocab_size)
            base = self._base_logits(enc, layout)
            logits = base[:, None] + prev_tab[prev][None]
            logp = _masked_log_softmax(logits, _support(layout.kinds, self.vocab_size))
            picked = np.take_along_axis(logp, np.broadcast_to(toks[None, ..., None], logp.shape[:-1] + (1,)), axis=-1)
            M[:, idx] = picked[..., 0].sum(axis=-1)
        return M

    def token_probs(self, x, y):
        """Teacher-forced next-token distributions, shape (T, V)."""
        self._validate([x], [y])
        (idx, layout, toks, enc), = self._groups([x], [y])
        _, logp = self._forward(enc, layout, toks)
        return np.exp(logp[0])

    def backward(self, contexts, traces, dlogits):
        """Accumulate parameter gradients given d(objective)/d(logits) per trace."""
        grads = self.zeros_like_params()
        for idx, layout, toks, enc in self._groups(contexts, traces):
            prev = layout.prev_ids(toks, self.vocab_size)
            dl = np.stack([np.asarray(dlogits[i], dtype=np.float64) for i in idx])
            self._backward(enc, layout, prev, dl, grads)
        return grads

    def grad_log_prob_batch(self, contexts, traces, weights=None, kinds=None):
        """``sum_i weights[i] * grad log rho(traces[i] | contexts[i])``.

        ``kinds`` restricts the log-probability to tokens of those segments,
        e.g. ``("mask",)`` for the mask block given everything before it.
        """
        self._validate(contexts, traces)
        if weights is None:
            weights = np.ones(len(traces))
        weights = np.asarray(weights, dtype=np.float64)
        grads = self.zeros_like_params()
        for idx, layout, toks, enc in self._groups(contexts, traces):
            prev, logp = self._forward(enc, layout, toks)
            d = -np.exp(logp)
            np.put_along_axis(d, toks[..., None],
                              np.take_along_axis(d, toks[..., None], axis=-1) + 1.0, axis=-1)
            d *= weights[idx][:, None, None]
            if kinds is not None:
                keep = np.isin(layout.kinds, [KIND_INDEX[k] for k in kinds])
                d[:, ~keep] = 0.0
            self._backward(enc, layout, prev, d, grads)
        return grads

    def grad_log_prob(self, x, y):
        return self.grad_log_prob_batch([x], [y])

    # -- sampling --------------------------------------------------------------

    def sample_batch(self, contexts, plan, uniforms, prefix_len=0):
        """Ancestral sampling by inverse CDF from pre-drawn uniforms (B, T).

        ``prefix_len`` offsets absolute positions so a block can be sampled as
        the continuation of an existing prefix.
        """
        for x in contexts:
            self.check_context(x)
        layout = Layout.of(plan)
        B, T = len(contexts), len(layout)
        uniforms = np.asarray(uniforms, dtype=np.float64).reshape(B, T)
        enc = self._encode(contexts)
        base = self._base_logits(enc, layout, offset=prefix_len)
        prev_tab = self._prev_logits()
        sup = _support(layout.kinds, self.vocab_size)
        toks = np.zeros((B, T), dtype=np.intp)
        prev = np.zeros(B, dtype=np.intp)
        for t in range(T):
            if layout.starts[t]:
                prev[:] = self.vocab_size + layout.kinds[t]
            logp = _masked_log_softmax(base[:, t] + prev_tab[prev], sup[t])
            cdf = np.cumsum(np.exp(logp), axis=-1)
            cdf[:, -1] = np.inf
            toks[:, t] = (uniforms[:, t, None] >= cdf).sum(axis=-1)
            prev = toks[:, t].copy()
        out = []
        for b in range(B):
            segs, i = [], 0
            for kind, n in layout.plan:
                segs.append((kind, tuple(int(v) for v in toks[b, i:i + n])))
                i += n
            out.append(Trace(tuple(segs)))
        return out

    def sample(self, x, rng, plan):
        layout = Layout.of(plan)
        return self.sample_batch([x], plan, rng.random((1, len(layout))))[0]

    # -- exact enumeration -------------------------------------------------------

    def sequence_log_probs(self, x, plan, tokens):
        """Log-probabilities of many token arrays (N, T) sharing one plan."""
        layout = Layout.of(plan)
        enc = self._encode([x])
        base = self._base_logits(enc, layout)[0]
        prev_tab = self._prev_logits()
        sup = _support(layout.kinds, self.vocab_size)
        tokens = np.asarray(tokens, dtype=np.intp)
        prev = layout.prev_ids(tokens, self.vocab_size)
        total = np.zeros(len(tokens))
        for t in range(len(layout)):
            logp = _masked_log_softmax(base[t] + prev_tab[prev[:, t]], sup[t])
            total += logp[np.arange(len(tokens)), tokens[:, t]]
        return total


class FeaturizedPolicy(Policy):
    """Feature-linear logits over context, previous-token embedding and position."""

    mode = "featurized"

    def __init__(self, vocab_size, feature_dim, embed_dim=8, pos_dim=8, pos_base=8.0,
                 init_scale=0.1, seed=0):
        self.feature_dim = int(feature_dim)
        self.embed_dim = int(embed_dim)
        self.pos_dim = int(pos_dim)
        self.pos_base = float(pos_base)
        self.init_scale = float(init_scale)
        self.seed = int(seed)
        if self.pos_dim % 2:
            raise InvalidInputError("pos_dim must be even")
        V = int(vocab_size)
        Dx = self.feature_dim + V
        P = N_MARKERS + self.pos_dim
        rng = np.random.default_rng(self.seed)
        s = self.init_scale
        params = {
            "W_x": s * rng.standard_normal((V, Dx)),
            "W_pos": s * rng.standard_normal((V, P)),
            "W_xpos": s * rng.standard_normal((V, Dx, P)),
            "bias": np.zeros(V),
            "W_emb": s * rng.standard_normal((V, self.embed_dim)),
            "emb": s * rng.standard_normal((V + N_MARKERS, self.embed_dim)),
        }
        super().__init__(V, params)

    def config(self):
        return {"vocab_size": self.vocab_size, "feature_dim": self.feature_dim,
                "embed_dim": self.embed_dim, "pos_dim": self.pos_dim, "pos_base": self.pos_base,
                "init_scale": self.init_scale, "seed": self.seed}

    def check_context(self, x):
        super().check_context(x)
        if len(x.features) != self.feature_dim:
            raise DimensionError(f"expected {self.feature_dim} features, got {len(x.features)}")

    def _encode(self, contexts):
        X = np.zeros((len(contexts), self.feature_dim + self.vocab_size))
        for i, x in enumerate(contexts):
            X[i, :self.feature_dim] = x.features
            if x.prompt:
                np.add.at(X[i], self.feature_dim + np.asarray(x.prompt), 1.0 / len(x.prompt))
        return X

    def _pos(self, layout):
        onehot = np.eye(N_MARKERS)[layout.kinds]
        return np.concatenate([onehot, sinusoidal_features(layout.local, self.pos_dim, self.pos_base)], axis=1)

    def _base_logits(self, enc, layout, offset=0):
        p = self.params
        pos = self._pos(layout)
        ctx = enc @ p["W_x"].T + p["bias"]
        # (V, Dx, P) x (B, Dx) -> (B, V, P), then against (T, P)
        inter = np.einsum("vdp,bd->bvp", p["W_xpos"], enc)
        return ctx[:, None, :] + (pos @ p["W_pos"].T)[None] + np.einsum("bvp,tp->btv", inter, pos)

    def _prev_logits(self):
        return self.params["emb"] @ self.params["W_emb"].T

    def _backward(self, enc, layout, prev, dlogits, grads):
        p = self.params
        pos = self._pos(layout)
        dsum = dlogits.sum(axis=1)
        grads["W_x"] += dsum.T @ enc
        grads["bias"] += dsum.sum(axis=0)
        grads["W_pos"] += dlogits.sum(axis=0).T @ pos
        grads["W_xpos"] += np.einsum("btv,bd,tp->vdp", dlogits, enc, pos)
        dC = np.zeros((self.vocab_size + N_MARKERS, self.vocab_size))
        np.add.at(dC, prev.ravel(), dlogits.reshape(-1, self.vocab_size))
        grads["W_emb"] += dC.T @ p["emb"]
        grads["emb"] += dC @ p["W_emb"]


class TabularPolicy(Policy):
    """Explicit logits per (context class, absolute position)."""

    mode = "tabular"

    def __init__(self, vocab_size, n_classes, max_len, init_scale=0.0, seed=0):
        self.n_classes = int(n_classes)
        self.max_len = int(max_len)
        self.init_scale = float(init_scale)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        table = self.init_scale * rng.standard_normal((self.n_classes, self.max_len, int(vocab_size)))
        super().__init__(vocab_size, {"table": table})

    def config(self):
        return {"vocab_size": self.vocab_size, "n_classes": self.n_classes,
                "max_len": self.max_len, "init_scale": self.init_scale, "seed": self.seed}

    def check_context(self, x):
        super().check_context(x)
        if not 0 <= x.cls < self.n_classes:
            raise InvalidInputError(f"context class {x.cls} outside [0, {self.n_classes})")

    def check_trace(self, y):
        super().check_trace(y)
        if len(y) > self.max_len:
            raise InvalidInputError(f"trace longer than the table ({len(y)} > {self.max_len})")

    def _encode(self, contexts):
        return np.array([x.cls for x in contexts], dtype=np.intp)

    def _base_logits(self, enc, layout, offset=0):
        T = len(layout)
        if offset + T > self.max_len:
            raise InvalidInputError("plan extends past the table")
        return self.params["table"][enc, offset:offset + T]

    def _prev_logits(self):
        return np.zeros((self.vocab_size + N_MARKERS, self.vocab_size))

    def _backward(self, enc, layout, prev, dlogits, grads):
        T = len(layout)
        np.add.at(grads["table"][:, :T], enc, dlogits)


# --------------------------------------------------------------------------
# module-level operations
# --------------------------------------------------------------------------


def log_prob(policy, x, y):
    return policy.log_prob(x, y)


def grad_log_prob(policy, x, y):
    return policy.grad_log_prob(x, y)


def sample(policy, x, rng, plan):
    return policy.sample(x, rng, plan)


def snapshot(policy, step=0):
    frozen = policy.copy()
    for v in frozen.params.values():
        v.setflags(write=False)
    return PolicySnapshot(frozen, int(step))


def segment_predictive_dist(policy, x, y, kind):
    """Mean teacher-forced next-token distribution over a segment's positions."""
    if not y.has(kind) or not y.segment(kind):
        raise InvalidInputError(f"trace has no non-empty {kind!r} segment")
    probs = policy.token_probs(x, y)
    return probs[Layout.of(y.plan).positions(kind)].mean(axis=0)


def sft_loss_and_grad(policy, batch):
    """Mean negative log-likelihood over ``(context, trace)`` pairs and its gradient."""
    if not batch:
        raise InvalidInputError("SFT batch is empty")
    contexts = [x for x, _ in batch]
    traces = [y for _, y in batch]
    B = len(batch)
    loss = -float(policy.log_prob_batch(contexts, traces).sum()) / B
    grads = policy.grad_log_prob_batch(contexts, traces, np.full(B, -1.0 / B))
    return loss, grads


def enumerate_sequences(plan, vocab_size, budget=1_000_000):
    """Every token array consistent with ``plan``'s per-position supports."""
    layout = Layout.of(plan)
    sizes = [2 if k == KIND_INDEX["mask"] else vocab_size for k in layout.kinds]
    total = 1
    for s in sizes:
        total *= s
        if total > budget:
            raise CapacityError(f"sequence space exceeds the enumeration budget of {budget}")
    if not sizes:
        return np.zeros((1, 0), dtype=np.intp)
    return np.array(list(itertools.product(*[range(s) for s in sizes])), dtype=np.intp)


def exact_kl_to(policy, ref, x, plan, segment=None, budget=1_000_000):
    """Exact KL(policy || ref) over all traces with the given plan.

    With ``segment`` set, both distributions are first marginalised onto that
    segment's tokens.
    """
    ref_policy = ref.policy if isinstance(ref, PolicySnapshot) else ref
    seqs = enumerate_sequences(plan, policy.vocab_size, budget)
    lp = policy.sequence_log_probs(x, plan, seqs)
    lq = ref_policy.sequence_log_probs(x, plan, seqs)
    if segment is not None:
        pos = Layout.of(plan).positions(segment)
        keys = seqs[:, pos]
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        p = np.bincount(inv, weights=np.exp(lp))
        q = np.bincount(inv, weights=np.exp(lq))
        nz = p > 0
        return float(max(np.sum(p[nz] * (np.log(p[nz]) - np.log(np.maximum(q[nz], 1e-300)))), 0.0))
    p = np.exp(lp)
    return float(max(np.sum(p * (lp - lq)), 0.0))
