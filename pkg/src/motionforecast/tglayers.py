"""Typed-graph network layers.

Nodes carry semantic classes; nodes of equal class share one weight
matrix (the typed weight tensor is N stacked views onto per-class
storage). A trainable N x N graph influence matrix mixes node features
after the typed projection. The recurrent cell additionally carries a
temporally additive influence matrix, accumulated every step.

All layers accept inputs of shape (..., N, D) with arbitrary leading
batch dimensions.
"""

from __future__ import annotations

import csv

import numpy as np

from motionforecast import diffcore as dc


def _init_weight(rng, d_in, d_out):
    scale = 1.0 / np.sqrt(d_in)
    return dc.param(rng.uniform(-scale, scale, size=(d_in, d_out)))


class TypedLinear:
    """Per-class linear map applied node-wise, optionally graph-mixed.

    f(x) = G (W . x) where W is the typed weight tensor. Pass
    use_influence=False for a plain typed projection without G.
    """

    def __init__(self, classes, d_in, d_out, rng, bias=True, use_influence=True):
        self.classes = list(classes)
        self.n_nodes = len(self.classes)
        self.n_classes = max(self.classes) + 1
        self.d_in = d_in
        self.d_out = d_out
        self.weights = [_init_weight(rng, d_in, d_out) for _ in range(self.n_classes)]
        self.biases = [dc.param(np.zeros(d_out)) for _ in range(self.n_classes)] if bias else None
        self.influence = dc.param(np.eye(self.n_nodes)) if use_influence else None

    def typed_matmul(self, x):
        w = dc.stack_rows(self.weights, self.classes)
        out = dc.typed_apply(w, x)
        if self.biases is not None:
            out = dc.add(out, dc.stack_rows(self.biases, self.classes))
        return out

    def __call__(self, x):
        out = self.typed_matmul(x)
        if self.influence is not None:
            out = dc.graph_mix(self.influence, out)
        return out

    def parameters(self):
        params = list(self.weights)
        if self.biases is not None:
            params += self.biases
        if self.influence is not None:
            params.append(self.influence)
        return params

    def named_parameters(self, prefix=""):
        out = [(f"{prefix}w{c}", p) for c, p in enumerate(self.weights)]
        if self.biases is not None:
            out += [(f"{prefix}b{c}", p) for c, p in enumerate(self.biases)]
        if self.influence is not None:
            out.append((f"{prefix}G", self.influence))
        return out


class TypedGRU:
    """Recurrent typed-graph cell.

    Gates follow the GRU convention (sigmoid for reset/update, tanh for
    the candidate); every input and hidden projection is typed and mixed
    through the current influence matrix, which advances by a trainable
    additive term each step: G_t = G_{t-1} + G_ta.
    """

    def __init__(self, classes, d_in, d_hidden, rng):
        self.classes = list(classes)
        self.n_nodes = len(self.classes)
        self.n_classes = max(self.classes) + 1
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.w_gates = {
            gate: [_init_weight(rng, d_in, d_hidden) for _ in range(self.n_classes)]
            for gate in ("r", "z", "n")
        }
        self.u_gates = {
            gate: [_init_weight(rng, d_hidden, d_hidden) for _ in range(self.n_classes)]
            for gate in ("r", "z", "n")
        }
        self.b_gates = {
            gate: [dc.param(np.zeros(d_hidden)) for _ in range(self.n_classes)]
            for gate in ("r", "z", "n")
        }
        self.influence0 = dc.param(np.eye(self.n_nodes))
        self.influence_ta = dc.param(np.zeros((self.n_nodes, self.n_nodes)))

    def initial_state(self, batch_shape=()):
        h = dc.Tensor(np.zeros(tuple(batch_shape) + (self.n_nodes, self.d_hidden)))
        return h, self.influence0

    def _gate_input(self, gate, g_mat, x, h_prev):
        wx = dc.typed_apply(dc.stack_rows(self.w_gates[gate], self.classes), x)
        uh = dc.typed_apply(dc.stack_rows(self.u_gates[gate], self.classes), h_prev)
        b = dc.stack_rows(self.b_gates[gate], self.classes)
        return dc.graph_mix(g_mat, wx), dc.graph_mix(g_mat, uh), b

    def step(self, x, h_prev, g_mat):
        """One recurrence step; returns (h_t, G_{t+1})."""
        rx, rh, rb = self._gate_input("r", g_mat, x, h_prev)
        r = dc.sigmoid(dc.add(dc.add(rx, rh), rb))
        zx, zh, zb = self._gate_input("z", g_mat, x, h_prev)
        z = dc.sigmoid(dc.add(dc.add(zx, zh), zb))
        nx, nh, nb = self._gate_input("n", g_mat, x, h_prev)
        n = dc.tanh(dc.add(dc.add(nx, dc.mul(r, nh)), nb))
        h = dc.add(dc.mul(dc.sub(1.0, z), n), dc.mul(z, h_prev))
        g_next = dc.add(g_mat, self.influence_ta)
        return h, g_next

    def run(self, xs, h0=None, g0=None):
        """Iterate over the leading time axis of xs: (T, ..., N, D_in).

        Returns (list of T hidden states, final hidden, final influence);
        feeding the returned carry back in continues the sequence exactly.
        """
        if h0 is None or g0 is None:
            batch_shape = xs[0].data.shape[:-2] if isinstance(xs[0], dc.Tensor) else np.shape(xs[0])[:-2]
            h, g_mat = self.initial_state(batch_shape)
            h = h if h0 is None else h0
            g_mat = g_mat if g0 is None else g0
        else:
            h, g_mat = h0, g0
        states = []
        for x in xs:
            h, g_mat = self.step(dc.as_tensor(x), h, g_mat)
            states.append(h)
        return states, h, g_mat

    def parameters(self):
        params = []
        for gate in ("r", "z", "n"):
            params += self.w_gates[gate] + self.u_gates[gate] + self.b_gates[gate]
        params += [self.influence0, self.influence_ta]
        return params

    def named_parameters(self, prefix=""):
        out = []
        for gate in ("r", "z", "n"):
            out += [(f"{prefix}w_{gate}{c}", p) for c, p in enumerate(self.w_gates[gate])]
            out += [(f"{prefix}u_{gate}{c}", p) for c, p in enumerate(self.u_gates[gate])]
            out += [(f"{prefix}b_{gate}{c}", p) for c, p in enumerate(self.b_gates[gate])]
        out += [(f"{prefix}G0", self.influence0), (f"{prefix}Gta", self.influence_ta)]
        return out


def export_influence_csv(layer, path):
    """Write a layer's learned influence matrices to CSV for inspection."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if isinstance(layer, TypedGRU):
            blocks = [("G0", layer.influence0), ("Gta", layer.influence_ta)]
        else:
            blocks = [("G", layer.influence)] if layer.influence is not None else []
        for name, mat in blocks:
            writer.writerow([name])
            for row in mat.data:
                writer.writerow([f"{v:.12g}" for v in row])


def param_count(layers):
    """Total trainable scalars, counting shared class storage once."""
    seen = set()
    total = 0
    for layer in layers:
        for p in layer.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                total += p.data.size
    return total
