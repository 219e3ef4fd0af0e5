"""Adaptive-moment optimizer with decoupled weight decay, an optional
maximum-of-second-moment accumulator, and optional clamping of the update
magnitude by the root-mean-square of grad^2 / v-hat.

Update per parameter tensor p with gradient g at step t:

    m   <- b1 m + (1 - b1) g
    v   <- b2 v + (1 - b2) g^2
    m^  =  m / (1 - b1^t)
    vmx <- max(vmx, v)                     (if max_second_moment)
    v^  =  vmx / (1 - b2^t)   else   v / (1 - b2^t)
    rms =  sqrt(mean(g^2 / v^))            (0/0 counts as 0)
    lr' =  lr / max(1, rms)                (if clamp_updates, else lr)
    p   -= lr' * (m^ / (sqrt(v^) + eps) + wd * p)

Parameters are grouped; each group carries its own learning rate so the
two student branches can train at different rates.  A non-finite gradient
anywhere skips the whole step (logged), leaving every moment untouched.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

__all__ = ["StableAdamW"]


class StableAdamW:
    def __init__(self, param_groups, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, max_second_moment=True,
                 clamp_updates=True):
        """param_groups: list of {"params": {name: Tensor}, "lr": float}."""
        if not param_groups:
            raise ConfigError("no parameter groups")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ConfigError(f"betas out of range: {betas}")
        if eps <= 0 or weight_decay < 0:
            raise ConfigError("eps must be positive, weight_decay >= 0")
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.max_second_moment = bool(max_second_moment)
        self.clamp_updates = bool(clamp_updates)
        self.groups = []
        seen = set()
        for g in param_groups:
            lr = float(g["lr"])
            if lr <= 0:
                raise ConfigError(f"learning rate must be positive, got {lr}")
            params = dict(g["params"])
            dup = seen & params.keys()
            if dup:
                raise ConfigError(f"duplicate parameter names {sorted(dup)}")
            seen |= params.keys()
            self.groups.append({"params": params, "lr": lr})
        self.step_count = 0
        self.skipped = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self._items()}
        self._v = {n: np.zeros_like(p.data) for n, p in self._items()}
        self._vmax = {n: np.zeros_like(p.data) for n, p in self._items()}

    def _items(self):
        for g in self.groups:
            for name, p in g["params"].items():
                yield name, p

    def zero_grad(self):
        for _, p in self._items():
            p.grad = None

    def step(self) -> bool:
        """Apply one update.  Returns False (and changes nothing) if any
        gradient is non-finite."""
        grads = {}
        for name, p in self._items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                log.warning("skipping step %d: non-finite gradient in %s",
                            self.step_count + 1, name)
                return False
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for group in self.groups:
            lr = group["lr"]
            for name, p in group["params"].items():
                g = grads[name]
                m = self._m[name]
                v = self._v[name]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                if self.max_second_moment:
                    np.maximum(self._vmax[name], v, out=self._vmax[name])
                    v_hat = self._vmax[name] / bc2
                else:
                    v_hat = v / bc2
                m_hat = m / bc1
                if self.clamp_updates:
                    safe = np.where(v_hat > 0.0, v_hat, 1.0)
                    ratio = np.where(v_hat > 0.0, g * g / safe, 0.0)
                    rms = float(np.sqrt(np.mean(ratio)))
                    lr_eff = lr / max(1.0, rms)
                else:
                    lr_eff = lr
                p.data -= lr_eff * (m_hat / (np.sqrt(v_hat) + self.eps)
                                    + self.weight_decay * p.data)
        return True

    # ------------------------------------------------------- persistence

    def state_dict(self) -> dict:
        """Flat name -> array mapping, suitable for the tensor-file format."""
        out = {"opt.step_count": np.float64(self.step_count),
               "opt.skipped": np.float64(self.skipped)}
        for name in self._m:
            out[f"opt.m.{name}"] = self._m[name].copy()
            out[f"opt.v.{name}"] = self._v[name].copy()
            out[f"opt.vmax.{name}"] = self._vmax[name].copy()
        return out

    def load_state_dict(self, state: dict):
        self.step_count = int(np.asarray(state["opt.step_count"]))
        self.skipped = int(np.asarray(state["opt.skipped"]))
        for name in self._m:
            for slot, store in (("m", self._m), ("v", self._v),
                                ("vmax", self._vmax)):
                key = f"opt.{slot}.{name}"
                if key not in state:
                    raise ConfigError(f"optimizer state missing {key}")
                arr = np.asarray(state[key], dtype=np.float64)
                if arr.shape != store[name].shape:
                    raise ConfigError(
                        f"optimizer state shape mismatch for {key}")
                store[name] = arr.copy()
