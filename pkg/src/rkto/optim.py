"""AdamW over dictionaries of numpy arrays."""
import numpy as np


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_norm(grads, max_norm):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class AdamW:
    """Adam with decoupled weight decay; ``maximize=True`` ascends."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr, maximize=False):
        b1, b2 = self.betas
        self.t += 1
        for k, p in params.items():
            g = -grads[k] if maximize else grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            update = lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)
            params[k] = p - update

    def state_dict(self):
        enc = lambda a: {"shape": list(a.shape), "data": [float(x).hex() for x in a.ravel()]}
        return {"t": self.t, "betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay,
                "m": {k: enc(a) for k, a in self.m.items()}, "v": {k: enc(a) for k, a in self.v.items()}}

    @classmethod
    def from_state_dict(cls, d):
        dec = lambda s: np.array([float.fromhex(x) for x in s["data"]]).reshape(s["shape"])
        opt = cls(d["betas"], d["eps"], d["weight_decay"])
        opt.t = d["t"]
        opt.m = {k: dec(s) for k, s in d["m"].items()}
        opt.v = {k: dec(s) for k, s in d["v"].items()}
        return opt
