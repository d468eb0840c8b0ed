"""Adam with decoupled weight decay, over named parameter groups.

Parameter order is fixed by the (name, tensor) list handed in, so update
order — and therefore the whole trajectory — is deterministic. Moment
buffers can be exported/imported for bit-exact resume.
"""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, named_params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.named_params = list(named_params)
        names = [n for n, _ in self.named_params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self):
        """One update; parameters with no gradient this step are skipped."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - np.asarray(self.lr, dtype=p.data.dtype) * update.astype(p.data.dtype)

    def state_arrays(self, prefix="opt"):
        out = {}
        for name in self.m:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays, t, prefix="opt"):
        for name in self.m:
            self.m[name] = np.array(arrays[f"{prefix}.m.{name}"])
            self.v[name] = np.array(arrays[f"{prefix}.v.{name}"])
        self.t = int(t)
