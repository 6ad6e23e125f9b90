"""Scikit-learn style wrapper around the SFT + RKTO schedule."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_contexts, check_examples, check_plan, check_seed
from .policy import FeaturizedPolicy, TabularPolicy, snapshot
from .rewards import RewardConfig
from .trainer import TrainConfig, Trainer, evaluate, stream

# stream tag for prediction rollouts, distinct from the trainer's tags
_PREDICT = 7


class RKTOAligner(BaseEstimator):
    """Fit a policy to preference examples with SFT followed by RKTO.

    ``fit`` takes a list of ``PreferenceExample``; ``predict`` samples traces
    for contexts; ``score`` is the mean effectiveness reward on examples.

    Parameters mirror the reward and training configuration keys. ``schedule``
    is ``"sft"``, ``"rkto"`` or ``"full"``.
    """

    def __init__(self, mode="featurized", schedule="full", alpha=0.7, lambda_ref=0.2, w_max=10.0,
                 batch_size=64, sft_lr=5e-4, rkto_lr=2e-4, sft_epochs=3, rkto_epochs=3, mc_samples=3,
                 center_eff=False, center_iou=True, grad_clip=5.0, embed_dim=8, pos_dim=8,
                 init_scale=0.1, eval_samples=4, lr_schedule="constant", random_state=0):
        self.mode = mode
        self.schedule = schedule
        self.alpha = alpha
        self.lambda_ref = lambda_ref
        self.w_max = w_max
        self.batch_size = batch_size
        self.sft_lr = sft_lr
        self.rkto_lr = rkto_lr
        self.sft_epochs = sft_epochs
        self.rkto_epochs = rkto_epochs
        self.mc_samples = mc_samples
        self.center_eff = center_eff
        self.center_iou = center_iou
        self.grad_clip = grad_clip
        self.embed_dim = embed_dim
        self.pos_dim = pos_dim
        self.init_scale = init_scale
        self.eval_samples = eval_samples
        self.lr_schedule = lr_schedule
        self.random_state = random_state

    def _configs(self):
        rcfg = RewardConfig(alpha=self.alpha, lambda_ref=self.lambda_ref, w_max=self.w_max)
        sft = self.schedule in ("sft", "full")
        rkto = self.schedule in ("rkto", "full")
        if not (sft or rkto):
            raise ValueError(f"schedule must be 'sft', 'rkto' or 'full', got {self.schedule!r}")
        tcfg = TrainConfig(
            batch_size=self.batch_size, sft_lr=self.sft_lr if sft else 0.0, rkto_lr=self.rkto_lr,
            sft_epochs=self.sft_epochs if sft else 0, rkto_epochs=self.rkto_epochs if rkto else 0,
            mc_samples=self.mc_samples, center_eff=self.center_eff, center_iou=self.center_iou,
            grad_clip=self.grad_clip, eval_samples=self.eval_samples,
            lr_schedule=self.lr_schedule, seed=check_seed(self.random_state),
        )
        return rcfg, tcfg

    def _new_policy(self, X, seed):
        vocab = 1 + max(max(ex.y_pref.tokens + ex.context.prompt) for ex in X)
        vocab = max(vocab, 6)
        if self.mode == "featurized":
            return FeaturizedPolicy(vocab, len(X[0].context.features), embed_dim=self.embed_dim,
                                    pos_dim=self.pos_dim, init_scale=self.init_scale, seed=seed)
        if self.mode == "tabular":
            n_classes = 1 + max(ex.context.cls for ex in X)
            return TabularPolicy(vocab, n_classes, max(len(ex.y_pref) for ex in X),
                                 init_scale=self.init_scale, seed=seed)
        raise ValueError(f"mode must be 'featurized' or 'tabular', got {self.mode!r}")

    def fit(self, X, y=None, X_val=None):
        """Train on examples ``X``; ``y`` is ignored (labels live on the examples)."""
        X = check_examples(X, require_desired=True)
        val = check_examples(X_val, "X_val") if X_val is not None else []
        rcfg, tcfg = self._configs()
        policy = self._new_policy(X, tcfg.seed)
        trainer = Trainer(policy, X, val, rcfg, tcfg).run()
        self.policy_ = trainer.policy
        self.reference_ = trainer.ref
        self.log_ = trainer.log
        self.n_steps_ = trainer.step
        self.plan_ = check_plan([ex.y_pref for ex in X if ex.desired], "y_pref")
        self.n_features_in_ = len(X[0].context.features)
        return self

    def predict(self, X):
        """One seeded trace per context, laid out like the training traces."""
        check_is_fitted(self, "policy_")
        contexts = check_contexts(X, self.n_features_in_)
        T = sum(n for _, n in self.plan_)
        U = stream(check_seed(self.random_state), _PREDICT).random((len(contexts), T))
        return self.policy_.sample_batch(contexts, self.plan_, U)

    def score_samples(self, X):
        """Log-probability of each example's preferred trace."""
        check_is_fitted(self, "policy_")
        X = check_examples(X)
        return self.policy_.log_prob_batch([ex.context for ex in X], [ex.y_pref for ex in X])

    def score(self, X, y=None):
        """Mean effectiveness reward of seeded rollouts on examples ``X``."""
        check_is_fitted(self, "policy_")
        X = check_examples(X)
        rcfg, tcfg = self._configs()
        return evaluate(self.policy_, snapshot(self.policy_), X, rcfg, tcfg)["val_r_eff"]
