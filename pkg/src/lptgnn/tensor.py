"""Low-rank weight tensors and the Tensor Transformation Layer (TTL).

A weight maps an input tensor with trailing modes ``input_shape`` to an
output tensor with modes ``output_shape``.  Its full form has shape
``input_shape + output_shape``; the factored forms never build it on the
contraction path.

Factor layouts (``M = len(input_shape) + len(output_shape)``):

* ``dense``  -- ``[W]``
* ``tucker`` -- ``[core (R_1..R_M), U_1 (D_1, R_1), ..., U_M (D_M, R_M)]``
* ``cp``     -- ``[weights (R,), U_1 (D_1, R), ..., U_M (D_M, R)]``
* ``tt``     -- ``[G_1 (1, D_1, r_1), G_2 (r_1, D_2, r_2), ..., G_M (r_{M-1}, D_M, 1)]``
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError

STRUCTURES = ("dense", "tucker", "cp", "tt")


class ShapeError(ContractError):
    pass


@dataclass
class LowRankWeight:
    structure: str
    input_shape: tuple
    output_shape: tuple
    factors: list
    ranks: tuple = ()

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.output_shape = tuple(int(d) for d in self.output_shape)
        self.ranks = tuple(int(r) for r in self.ranks)
        if self.structure not in STRUCTURES:
            raise ContractError(f"unknown structure {self.structure!r}")
        self.check()

    @property
    def modes(self):
        return self.input_shape + self.output_shape

    def check(self):
        dims = self.modes
        shapes = [np.shape(ad._val(f)) for f in self.factors]
        if self.structure == "dense":
            expected = [dims]
        elif self.structure == "tucker":
            expected = [tuple(self.ranks)] + [(d, r) for d, r in zip(dims, self.ranks)]
        elif self.structure == "cp":
            (r,) = self.ranks
            expected = [(r,)] + [(d, r) for d in dims]
        else:
            bonds = (1,) + self.ranks + (1,)
            expected = [(bonds[m], d, bonds[m + 1]) for m, d in enumerate(dims)]
        if self.structure == "tucker" and len(self.ranks) != len(dims):
            raise ContractError(f"tucker needs {len(dims)} ranks, got {len(self.ranks)}")
        if self.structure == "tt" and len(self.ranks) != len(dims) - 1:
            raise ContractError(f"tt needs {len(dims) - 1} bond ranks, got {len(self.ranks)}")
        if [tuple(s) for s in shapes] != [tuple(e) for e in expected]:
            raise ContractError(
                f"{self.structure} factor shapes {shapes} do not match expected {expected}"
            )

    def parameter_count(self):
        return int(sum(np.size(ad._val(f)) for f in self.factors))


def default_ranks(structure, dims):
    """Half-rank defaults: ceil(D/2) per mode (Tucker), bond/CP rank from the mode sizes."""
    half = [max(1, math.ceil(d / 2)) for d in dims]
    if structure == "tucker":
        return tuple(half)
    if structure == "cp":
        return (max(half),)
    if structure == "tt":
        return tuple(half[:-1])
    return ()


def init_weight(structure, input_shape, output_shape, ranks=None, rng=None, gain=2.0):
    """Random factors whose materialised weight has He-like scale."""
    rng = np.random.default_rng(0) if rng is None else rng
    dims = tuple(input_shape) + tuple(output_shape)
    ranks = tuple(default_ranks(structure, dims) if ranks is None else ranks)
    fan_in = int(np.prod(input_shape))
    std = math.sqrt(gain / fan_in)
    total = float(np.prod(dims))
    if structure == "dense":
        factors = [rng.normal(0.0, std, dims)]
    elif structure == "tucker":
        loadings = [_orthonormal(rng, d, r) for d, r in zip(dims, ranks)]
        core_std = std * math.sqrt(total / np.prod(ranks))
        factors = [rng.normal(0.0, core_std, ranks)] + loadings
    elif structure == "cp":
        (r,) = ranks
        cols = []
        for d in dims:
            u = rng.normal(size=(d, r))
            cols.append(u / np.linalg.norm(u, axis=0, keepdims=True))
        weights = rng.normal(0.0, std * math.sqrt(total / r), r)
        factors = [weights] + cols
    elif structure == "tt":
        bonds = (1,) + ranks + (1,)
        # Var(W) = prod Var(G_m) * prod r_m
        per_core = (std**2 / np.prod(ranks)) ** (1.0 / len(dims)) if ranks else std**2
        factors = [
            rng.normal(0.0, math.sqrt(per_core), (bonds[m], d, bonds[m + 1]))
            for m, d in enumerate(dims)
        ]
    else:
        raise ContractError(f"unknown structure {structure!r}")
    return LowRankWeight(structure, input_shape, output_shape, factors, ranks)


def _orthonormal(rng, d, r):
    q, _ = np.linalg.qr(rng.normal(size=(d, max(d, r))))
    return q[:, :r] if r <= d else rng.normal(size=(d, r)) / math.sqrt(d)


def materialize(weight):
    """Full weight tensor of shape ``input_shape + output_shape`` (tests/debugging only)."""
    dims = weight.modes
    m = len(dims)
    f = [ad._val(x) for x in weight.factors]
    if weight.structure == "dense":
        return np.array(f[0], dtype=np.float64)
    if weight.structure == "tucker":
        out = f[0]
        for mode in range(m):
            # mode-n product: replace axis `mode` of size R by D
            out = np.moveaxis(np.tensordot(out, f[mode + 1], axes=([mode], [1])), -1, mode)
        return out
    if weight.structure == "cp":
        out = np.zeros(dims)
        for r in range(len(f[0])):
            term = f[0][r]
            for mode in range(m):
                term = np.multiply.outer(term, f[mode + 1][:, r])
            out = out + term
        return out
    out = f[0]
    for core in f[1:]:
        out = np.tensordot(out, core, axes=([-1], [0]))
    return out.reshape(dims)


def contract(weight, x):
    """``<W, x>`` over the trailing ``input_shape`` modes of ``x``.

    Leading modes of ``x`` are batch modes and are kept in the output,
    followed by ``output_shape``.  Works on arrays or autodiff Vars.
    """
    xs = np.shape(ad._val(x))
    k = len(weight.input_shape)
    if k > len(xs) or tuple(xs[len(xs) - k:]) != weight.input_shape:
        raise ShapeError(
            f"contract: expected trailing modes {weight.input_shape}, got input shape {tuple(xs)}"
        )
    batch = tuple(xs[: len(xs) - k])
    nb = int(np.prod(batch)) if batch else 1
    h = ad.reshape(x, (nb,) + weight.input_shape)
    if weight.structure == "dense":
        y = _contract_dense(weight, h)
    elif weight.structure == "tucker":
        y = _contract_tucker(weight, h)
    elif weight.structure == "cp":
        y = _contract_cp(weight, h)
    else:
        y = _contract_tt(weight, h)
    return ad.reshape(y, batch + weight.output_shape)


def _contract_dense(weight, h):
    k, p = len(weight.input_shape), len(weight.output_shape)
    idx = ad.letters(k + p, skip="z")
    i, o = idx[:k], idx[k:]
    return ad.einsum(f"z{i},{i}{o}->z{o}", h, weight.factors[0])


def _contract_tucker(weight, h):
    k, p = len(weight.input_shape), len(weight.output_shape)
    core, loadings = weight.factors[0], weight.factors[1:]
    idx = ad.letters(k + p, skip="z")
    ranks = ad.letters(k + p, skip="z" + idx)
    # project input modes onto the input loadings, one mode at a time
    cur = list(idx[:k])
    for m in range(k):
        src = "z" + "".join(cur)
        cur[m] = ranks[m]
        h = ad.einsum(f"{src},{idx[m]}{ranks[m]}->z{''.join(cur)}", h, loadings[m])
    r_in, r_out = ranks[:k], ranks[k:]
    h = ad.einsum(f"z{r_in},{r_in}{r_out}->z{r_out}", h, core)
    cur = list(r_out)
    for j in range(p):
        src = "z" + "".join(cur)
        cur[j] = idx[k + j]
        h = ad.einsum(f"{src},{idx[k + j]}{r_out[j]}->z{''.join(cur)}", h, loadings[k + j])
    return h


def _contract_cp(weight, h):
    k, p = len(weight.input_shape), len(weight.output_shape)
    lam, cols = weight.factors[0], weight.factors[1:]
    idx = ad.letters(k + p, skip="zr")
    # (B, D_1..D_k) -> (B, R): one mode at a time keeps the rank index shared
    h = ad.einsum(f"z{idx[:k]},{idx[0]}r->z{idx[1:k]}r", h, cols[0])
    for m in range(1, k):
        rest = idx[m:k]
        h = ad.einsum(f"z{rest}r,{idx[m]}r->z{rest[1:]}r", h, cols[m])
    h = ad.mul(h, lam)
    out = ""
    for j in range(p):
        c = idx[k + j]
        h = ad.einsum(f"z{out}r,{c}r->z{out}{c}r", h, cols[k + j])
        out += c
    return ad.sum_(h, axis=-1)


def _contract_tt(weight, h):
    k, p = len(weight.input_shape), len(weight.output_shape)
    cores = weight.factors
    idx = ad.letters(k + p, skip="zab")
    # state: (B, bond, remaining input modes)
    h = ad.reshape(h, (h.shape[0], 1) + weight.input_shape)
    for m in range(k):
        rest = idx[m + 1:k]
        h = ad.einsum(f"za{idx[m]}{rest},a{idx[m]}b->zb{rest}", h, cores[m])
    out = ""
    for j in range(p):
        c = idx[k + j]
        h = ad.einsum(f"za{out},a{c}b->zb{out}{c}", h, cores[k + j])
        out += c
    # final bond has size 1
    return ad.reshape(h, (h.shape[0],) + weight.output_shape)


@dataclass
class TTLConfig:
    """Chain of tensor shapes through a TTL stack.

    ``shapes[0]`` is the input, ``shapes[-1]`` the output; ``layer_count``
    activated layers are followed by one final linear layer.
    """

    shapes: tuple
    structure: str = "tucker"
    ranks: tuple = None
    activation: str = "relu"

    def __post_init__(self):
        self.shapes = tuple(tuple(int(d) for d in s) for s in self.shapes)
        if len(self.shapes) < 3:
            raise ContractError("TTL needs at least one activated layer (>= 3 shapes)")
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")
        if self.ranks is not None:
            self.ranks = tuple(None if r is None else tuple(r) for r in self.ranks)

    @property
    def layer_count(self):
        return len(self.shapes) - 2

    def layer_ranks(self, i):
        if self.ranks is None or self.ranks[i] is None:
            return None
        return self.ranks[i]


def init_ttl(config, rng):
    weights, biases = [], []
    for i in range(len(config.shapes) - 1):
        gain = 2.0 if i < config.layer_count else 1.0
        weights.append(
            init_weight(config.structure, config.shapes[i], config.shapes[i + 1],
                        config.layer_ranks(i), rng, gain)
        )
        biases.append(np.zeros(config.shapes[i + 1]))
    return weights, biases


def ttl_forward(config, weights, biases, x):
    """Apply ``layer_count`` ReLU-activated low-rank layers then one linear layer."""
    n = len(config.shapes) - 1
    if len(weights) != n or len(biases) != n:
        raise ShapeError(f"TTL expects {n} weights and biases, got {len(weights)}/{len(biases)}")
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.input_shape != config.shapes[i] or w.output_shape != config.shapes[i + 1]:
            raise ShapeError(
                f"TTL layer {i}: weight maps {w.input_shape}->{w.output_shape}, "
                f"config chain expects {config.shapes[i]}->{config.shapes[i + 1]}"
            )
        if np.shape(ad._val(b)) != config.shapes[i + 1]:
            raise ShapeError(f"TTL layer {i}: bias shape {np.shape(ad._val(b))}")
        try:
            h = ad.add(contract(w, h), b)
        except ShapeError as exc:
            raise ShapeError(f"TTL layer {i}: {exc}") from None
        if i < config.layer_count:
            h = ad.relu(h)
    return h


def tucker_parameter_count(dims, ranks):
    return int(np.prod(ranks) + sum(d * r for d, r in zip(dims, ranks)))
