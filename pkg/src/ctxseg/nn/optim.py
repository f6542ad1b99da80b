"""Optimizers over name -> Tensor parameter dicts.

State is keyed by parameter name, so stepping a subset of parameters (the
adversarial phases do this) leaves the rest untouched, and a checkpoint can
restore moments exactly.  ``ascend=True`` flips the gradient sign, which is
how the discriminator maximizes the shared objective.
"""

import numpy as np


def zero_grad(params):
    for p in params.values():
        p.grad = None


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, ascend=False):
        sign = -1.0 if ascend else 1.0
        for p in params.values():
            if p.grad is not None:
                p.data -= self.lr * sign * p.grad

    def state_arrays(self):
        return {}

    def load_state_arrays(self, arrays):
        if arrays:
            raise ValueError("sgd carries no state")


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, params, ascend=False):
        sign = -1.0 if ascend else 1.0
        for name, p in params.items():
            if p.grad is None:
                continue
            if self.weight_decay:
                # decoupled decay: pulls toward zero whichever direction the
                # objective is stepped, so a player whose gradient has dried
                # up relaxes to the zero function instead of freezing at an
                # arbitrary point
                p.data -= self.lr * self.weight_decay * p.data
            g = sign * p.grad
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {
                    "m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            mhat = st["m"] / (1.0 - self.beta1 ** st["t"])
            vhat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        """Flatten moments for checkpointing."""
        out = {}
        for name, st in self.state.items():
            out[f"{name}#m"] = st["m"]
            out[f"{name}#v"] = st["v"]
            out[f"{name}#t"] = np.array(float(st["t"]))
        return out

    def load_state_arrays(self, arrays):
        self.state = {}
        for key, val in arrays.items():
            name, _, kind = key.rpartition("#")
            st = self.state.setdefault(
                name, {"m": None, "v": None, "t": 0})
            if kind == "t":
                st["t"] = int(np.asarray(val).item())
            else:
                st[kind] = np.asarray(val, dtype=np.float64)
