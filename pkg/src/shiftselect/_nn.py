"""Small fully connected networks trained full-batch with Adam."""

import numpy as np

from ._optim import Adam, check_finite


class MLP:
    """Rectifier network; ``hidden=()`` gives a plain affine map."""

    def __init__(self, n_in, hidden, n_out, rng):
        sizes = [n_in, *hidden, n_out]
        self.params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_layers(self):
        return len(self.params) // 2

    def forward(self, X, keep=False):
        acts = [X]
        h = X
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            h = h @ W + b
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts, grad_out):
        grads = [None] * len(self.params)
        g = grad_out
        for i in reversed(range(self.n_layers)):
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.params[2 * i].T) * (acts[i] > 0)
        return grads

    def to_dict(self):
        return {"params": [p.tolist() for p in self.params]}

    @classmethod
    def from_dict(cls, data):
        net = cls.__new__(cls)
        net.params = [np.asarray(p, dtype=float) for p in data["params"]]
        return net


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy over all entries and its gradient w.r.t. logits."""
    loss = np.logaddexp(0.0, logits) - targets * logits
    prob = np.exp(-np.logaddexp(0.0, -logits))
    return float(loss.mean()), (prob - targets) / targets.size


def mse(pred, targets):
    diff = pred - targets
    return float((diff**2).mean()), 2.0 * diff / diff.size


def fit(net, X, targets, loss_fn, epochs, lr):
    """Full-batch Adam; returns the per-epoch loss before each step."""
    opt = Adam(net.params, lr=lr)
    history = np.empty(epochs)
    for epoch in range(epochs):
        out, acts = net.forward(X, keep=True)
        loss, grad = loss_fn(out, targets)
        check_finite(loss, "selector loss", lr)
        history[epoch] = loss
        opt.step(net.backward(acts, grad))
    return history
