"""Synthetic preference datasets with a planted preferred distribution.

Each context belongs to an abstract category (the reference/original media
mixture) and carries a feature vector drawn around its category centroid. A
tabular teacher per category generates the preferred chain-of-thought text,
and the reference mask is a thresholded linear projection of the features.
"""
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConsistencyError, FormatError, InvalidInputError, ParseError
from .policy import Context, Policy, TabularPolicy, Trace, encode_mask

DATASET_FORMAT = "rkto-dataset/1"
EXAMPLES_FILE = "examples.jsonl"
MANIFEST_FILE = "manifest.json"

# reference/original pairings and their relative sample counts
CATEGORIES = (
    ("image", "image", 10),
    ("image+text", "image", 5),
    ("video", "image", 4),
    ("image", "video", 3),
    ("video+text", "image", 3),
    ("text", "-", 5),
)


@dataclass(frozen=True)
class PreferenceExample:
    id: str
    context: Context
    y_pref: Trace
    m_ref: tuple = None
    desired: bool = True

    def __post_init__(self):
        if self.m_ref is not None:
            m = np.asarray(self.m_ref)
            if m.ndim != 2 or m.shape[0] != m.shape[1] or not np.all((m == 0) | (m == 1)):
                raise InvalidInputError(f"example {self.id}: m_ref must be a square binary grid")
            object.__setattr__(self, "m_ref", tuple(tuple(int(v) for v in row) for row in m))
        if self.y_pref.has("mask") and self.m_ref is not None:
            if len(self.y_pref.segment("mask")) != len(self.m_ref) ** 2:
                raise InvalidInputError(f"example {self.id}: mask block length does not match the grid")

    @property
    def mask(self):
        return None if self.m_ref is None else np.asarray(self.m_ref, dtype=np.int8)

    def to_dict(self):
        return {
            "id": self.id,
            "context": self.context.to_dict(),
            "y_pref": self.y_pref.to_dict(),
            "m_ref": None if self.m_ref is None else [list(r) for r in self.m_ref],
            "desired": self.desired,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            id=d["id"],
            context=Context.from_dict(d["context"]),
            y_pref=Trace.from_dict(d["y_pref"]),
            m_ref=d["m_ref"],
            desired=d["desired"],
        )


@dataclass
class GenerationConfig:
    n_examples: int = 2000
    n_classes: int = 6
    class_weights: tuple = tuple(c[2] for c in CATEGORIES)
    feature_dim: int = 8
    vocab_size: int = 12
    grid_side: int = 3
    thinking_len: int = 2
    intermediate_len: int = 2
    reflection_len: int = 2
    output_len: int = 3
    prompt_len: int = 2
    teacher_sharpness: float = 2.5
    tie_reflection: bool = True
    centroid_scale: float = 2.0
    feature_noise: float = 0.5
    mask_noise: float = 0.1
    desired_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if self.n_examples < 2:
            raise InvalidInputError("need at least two examples")
        if self.n_classes < 1 or len(self.class_weights) < self.n_classes:
            raise InvalidInputError("class_weights must cover every class")
        if any(w < 0 for w in self.class_weights) or sum(self.class_weights[:self.n_classes]) <= 0:
            raise InvalidInputError("class_weights must be non-negative with a positive sum")
        if self.vocab_size < 6:
            raise InvalidInputError("vocab_size must leave at least 4 content tokens")
        if self.grid_side < 0:
            raise InvalidInputError("grid_side must be >= 0 (0 disables masks)")
        if self.feature_dim < 1:
            raise InvalidInputError("feature_dim must be positive")
        if min(self.thinking_len, self.intermediate_len, self.reflection_len, self.prompt_len) < 0:
            raise InvalidInputError("segment lengths must be non-negative")
        if self.output_len < 1:
            raise InvalidInputError("output segment must be non-empty")
        if self.tie_reflection and self.reflection_len and not self.intermediate_len:
            raise InvalidInputError("tie_reflection needs an intermediate segment")
        if not 0.0 <= self.mask_noise <= 1.0 or not 0.0 <= self.desired_fraction <= 1.0:
            raise InvalidInputError("mask_noise and desired_fraction must lie in [0, 1]")

    @property
    def weights(self):
        w = np.asarray(self.class_weights[:self.n_classes])
        return w / w.sum()

    def text_plan(self):
        return tuple((k, n) for k, n in (("thinking", self.thinking_len),
                                          ("intermediate", self.intermediate_len),
                                          ("reflection", self.reflection_len),
                                          ("output", self.output_len)) if n > 0)

    def plan(self):
        plan = self.text_plan()
        if self.grid_side:
            plan += (("mask", self.grid_side ** 2),)
        return plan

    def to_dict(self):
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        return d


@dataclass
class DatasetManifest:
    seed: int
    counts: dict
    n_desired: int
    vocab_size: int
    grid_side: int
    feature_dim: int
    teacher: dict
    generation: dict = field(default_factory=dict)
    format_version: str = DATASET_FORMAT

    @property
    def n_examples(self):
        return sum(self.counts.values())

    def teacher_policy(self):
        return Policy.from_dict(self.teacher)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != DATASET_FORMAT:
            raise FormatError(f"unsupported dataset format {d.get('format_version')!r}")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown manifest fields {sorted(unknown)} for {DATASET_FORMAT}")
        return cls(**d)


def category_name(c):
    if c < len(CATEGORIES):
        ref, orig, _ = CATEGORIES[c]
        return f"{ref}->{orig}"
    return f"class{c}"


def planted_teacher(cfg, rng):
    """Tabular teacher over the text segments; mask tokens are kept out of text."""
    plan = cfg.text_plan()
    T = sum(n for _, n in plan)
    teacher = TabularPolicy(cfg.vocab_size, cfg.n_classes, T)
    table = cfg.teacher_sharpness * rng.standard_normal((cfg.n_classes, T, cfg.vocab_size))
    table[:, :, :2] = -10.0
    if cfg.tie_reflection and cfg.reflection_len:
        start = {}
        i = 0
        for kind, n in plan:
            start[kind] = i
            i += n
        for r in range(cfg.reflection_len):
            table[:, start["reflection"] + r] = table[:, start["intermediate"] + r % cfg.intermediate_len]
    teacher.params["table"] = table
    return teacher


def generate_dataset(cfg=None, seed=None):
    """Build ``(examples, manifest, teacher)`` reproducibly from the seed."""
    cfg = cfg or GenerationConfig()
    if seed is not None:
        cfg = GenerationConfig(**{**cfg.to_dict(), "seed": seed})
    rng = np.random.default_rng(cfg.seed)
    C, F, V, G, n = cfg.n_classes, cfg.feature_dim, cfg.vocab_size, cfg.grid_side, cfg.n_examples

    teacher = planted_teacher(cfg, rng)
    centroids = cfg.centroid_scale * rng.standard_normal((C, F))
    prompt_logits = cfg.teacher_sharpness * rng.standard_normal((C, V - 2))
    projection = rng.standard_normal((G * G, F)) if G else None

    classes = rng.choice(C, size=n, p=cfg.weights)
    feats = centroids[classes] + cfg.feature_noise * rng.standard_normal((n, F))
    prompts = []
    for c in classes:
        p = np.exp(prompt_logits[c] - prompt_logits[c].max())
        prompts.append(tuple(2 + rng.choice(V - 2, size=cfg.prompt_len, p=p / p.sum())))
    contexts = [Context(tuple(f), pr, int(c)) for f, pr, c in zip(feats, prompts, classes)]

    plan = cfg.text_plan()
    T = sum(k for _, k in plan)
    texts = teacher.sample_batch(contexts, plan, rng.random((n, T)))

    masks = [None] * n
    noisy = [None] * n
    if G:
        masks = [(projection @ f > 0).astype(np.int8).reshape(G, G) for f in feats]
        flips = rng.random((n, G, G)) < cfg.mask_noise
        noisy = [np.where(fl, 1 - m, m) for m, fl in zip(masks, flips)]

    n_desired = int(round(cfg.desired_fraction * n))
    desired = np.zeros(n, dtype=bool)
    desired[rng.permutation(n)[:n_desired]] = True

    examples = []
    width = len(str(n - 1))
    for i in range(n):
        segs = dict(texts[i].segments)
        block = noisy[i]
        if not desired[i]:
            if "reflection" in segs:
                segs["reflection"] = tuple(rng.permutation(segs["reflection"]))
            if G:
                k = max(1, int(round(0.25 * G * G)))
                cells = rng.choice(G * G, size=k, replace=False)
                block = block.copy().ravel()
                block[cells] = 1 - block[cells]
                block = block.reshape(G, G)
        if G:
            segs["mask"] = encode_mask(block)
        examples.append(PreferenceExample(
            id=f"ex{i:0{width}d}",
            context=contexts[i],
            y_pref=Trace.from_segments(**segs),
            m_ref=masks[i],
            desired=bool(desired[i]),
        ))

    counts = {category_name(c): int(np.sum(classes == c)) for c in range(C)}
    manifest = DatasetManifest(
        seed=cfg.seed, counts=counts, n_desired=n_desired, vocab_size=V, grid_side=G,
        feature_dim=F, teacher=teacher.to_dict(), generation=cfg.to_dict(),
    )
    return examples, manifest, teacher


def write_dataset(examples, manifest, path):
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, EXAMPLES_FILE), "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    with open(os.path.join(path, MANIFEST_FILE), "w") as fh:
        json.dump(manifest.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


_RECORD_FIELDS = {"id", "context", "y_pref", "m_ref", "desired"}


def read_dataset(path):
    """Load ``(examples, manifest)`` and cross-check them."""
    mpath = os.path.join(path, MANIFEST_FILE)
    epath = os.path.join(path, EXAMPLES_FILE)
    for p in (mpath, epath):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    with open(mpath) as fh:
        try:
            manifest = DatasetManifest.from_dict(json.load(fh))
        except json.JSONDecodeError as err:
            raise ParseError(f"manifest is not valid JSON: {err}") from None
    examples = []
    with open(epath) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.endswith("\n"):
                raise ParseError("truncated record (no newline terminator)", lineno)
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"malformed record: {err.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", lineno)
            unknown = set(rec) - _RECORD_FIELDS
            if unknown:
                raise ParseError(f"unknown fields {sorted(unknown)} for {DATASET_FORMAT}", lineno)
            missing = _RECORD_FIELDS - set(rec)
            if missing:
                raise ParseError(f"missing fields {sorted(missing)}", lineno)
            try:
                examples.append(PreferenceExample.from_dict(rec))
            except (InvalidInputError, KeyError, TypeError, ValueError) as err:
                raise ParseError(str(err), lineno) from None
    if len(examples) != manifest.n_examples:
        raise ConsistencyError(
            f"manifest lists {manifest.n_examples} examples but {len(examples)} records were read")
    return examples, manifest


def split(examples, val_fraction, seed):
    """Seeded shuffle into disjoint ``(train, val)`` lists."""
    if not 0.0 < val_fraction < 1.0:
        raise InvalidInputError("val_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(examples))
    n_val = int(round(val_fraction * len(examples)))
    val = [examples[i] for i in sorted(order[:n_val])]
    train = [examples[i] for i in sorted(order[n_val:])]
    return train, val
