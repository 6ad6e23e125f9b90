"""Input checks shared by the estimator and the command line."""
import numbers

import numpy as np

from .exceptions import DimensionError, InvalidInputError
from .policy import Context, Trace
from .synthdata import PreferenceExample


def check_examples(X, name="X", require_desired=False):
    """A non-empty list of preference examples with one feature width and vocabulary span."""
    if isinstance(X, PreferenceExample):
        raise InvalidInputError(f"{name} must be a sequence of examples, not a single example")
    X = list(X)
    if not X:
        raise InvalidInputError(f"{name} is empty")
    for i, ex in enumerate(X):
        if not isinstance(ex, PreferenceExample):
            raise InvalidInputError(f"{name}[{i}] is {type(ex).__name__}, expected PreferenceExample")
    widths = {len(ex.context.features) for ex in X}
    if len(widths) != 1:
        raise DimensionError(f"{name} mixes feature widths {sorted(widths)}")
    if require_desired and not any(ex.desired for ex in X):
        raise InvalidInputError(f"{name} has no desired examples")
    return X


def check_contexts(X, feature_dim=None, name="X"):
    """Contexts from a list of contexts or examples."""
    if isinstance(X, (Context, PreferenceExample)):
        X = [X]
    X = list(X)
    if not X:
        raise InvalidInputError(f"{name} is empty")
    out = []
    for i, item in enumerate(X):
        ctx = item.context if isinstance(item, PreferenceExample) else item
        if not isinstance(ctx, Context):
            raise InvalidInputError(f"{name}[{i}] is {type(item).__name__}, expected Context")
        if feature_dim is not None and len(ctx.features) != feature_dim:
            raise DimensionError(f"{name}[{i}] has {len(ctx.features)} features, expected {feature_dim}")
        out.append(ctx)
    return out


def check_plan(traces, name="traces"):
    plans = {t.plan for t in traces if isinstance(t, Trace)}
    if len(plans) != 1:
        raise InvalidInputError(f"{name} must share one segment layout, found {len(plans)}")
    return plans.pop()


def check_seed(seed):
    """Integer seed from an int, ``None`` (0) or a numpy Generator."""
    if seed is None:
        return 0
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(2**31))
    if isinstance(seed, numbers.Integral) and not isinstance(seed, bool) and seed >= 0:
        return int(seed)
    raise InvalidInputError(f"seed must be a non-negative int, None or a Generator, got {seed!r}")
