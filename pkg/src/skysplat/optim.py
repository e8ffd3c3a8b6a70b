"""Adam with per-group learning rates and row masks for frozen parameters."""
import numpy as np


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def step(self, name, param, grad, lr, rows=None):
        """Update ``param`` in place. ``rows`` (bool mask on axis 0) limits the update."""
        st = self.state.get(name)
        if st is None or st["m"].shape != param.shape:
            st = self.state[name] = {"m": np.zeros_like(param), "v": np.zeros_like(param), "t": 0}
        st["t"] += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** st["t"]
        bc2 = 1.0 - b2 ** st["t"]
        if rows is None:
            m, v = st["m"], st["v"]
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            param -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            return
        if not rows.any():
            return
        m = st["m"][rows] * b1 + (1 - b1) * grad[rows]
        v = st["v"][rows] * b2 + (1 - b2) * grad[rows] ** 2
        st["m"][rows] = m
        st["v"][rows] = v
        param[rows] -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def append_rows(self, name, n):
        st = self.state.get(name)
        if st is None or n == 0:
            return
        for key in ("m", "v"):
            pad = np.zeros((n,) + st[key].shape[1:])
            st[key] = np.concatenate([st[key], pad])

    def keep_rows(self, name, keep):
        st = self.state.get(name)
        if st is None:
            return
        st["m"] = st["m"][keep]
        st["v"] = st["v"][keep]

    def drop(self, name):
        self.state.pop(name, None)

    def state_arrays(self):
        out = {}
        for name, st in self.state.items():
            out[f"{name}/m"] = st["m"]
            out[f"{name}/v"] = st["v"]
            out[f"{name}/t"] = np.array(st["t"])
        return out

    def load_arrays(self, arrays):
        self.state = {}
        for key, val in arrays.items():
            name, part = key.rsplit("/", 1)
            st = self.state.setdefault(name, {})
            st[part] = int(val) if part == "t" else np.array(val)


def exp_decay(lr_init, lr_final, step, max_steps):
    if max_steps <= 0 or lr_init == lr_final:
        return lr_init
    t = min(max(step / max_steps, 0.0), 1.0)
    return float(np.exp(np.log(lr_init) * (1 - t) + np.log(lr_final) * t))
