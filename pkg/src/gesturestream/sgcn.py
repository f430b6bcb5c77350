"""Spatial graph convolution applied independently to every frame."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .exceptions import ShapeError
from .skeleton import AdjacencyStack
from .tensor import Tensor


def sgcn_layer_forward(x, adj: AdjacencyStack | np.ndarray, weights: Sequence, masks: Sequence | None = None,
                       activation: bool = True) -> Tensor:
    """``act(sum_k ((A_k * M_k) @ x) @ W_k)`` over the joint axis of ``x: (..., lambda, phi_in)``.

    Leading axes (batch, frames) are carried through untouched, so frames never mix.
    """
    x = T.as_tensor(x)
    a = adj.matrices if isinstance(adj, AdjacencyStack) else np.asarray(adj)
    k_a, lam = a.shape[0], a.shape[1]
    if x.ndim < 2 or x.shape[-2] != lam:
        raise ShapeError(f"input has {x.shape[-2] if x.ndim >= 2 else '?'} joints, adjacency has {lam}")
    if len(weights) != k_a or (masks is not None and len(masks) != k_a):
        raise ShapeError(f"expected {k_a} weight matrices/masks, got {len(weights)}")
    phi_in = x.shape[-1]
    for w in weights:
        if w.shape[0] != phi_in:
            raise ShapeError(f"weight {w.shape} does not accept {phi_in} input features")
    phi_out = weights[0].shape[1]
    lead = x.shape[:-2]

    if masks is None:
        a_eff = Tensor(a)
    else:
        a_eff = T.mul(a, T.stack(masks, axis=0))
    nd = x.ndim
    # (lam, lead..., phi) -> (lam, P)
    xr = T.reshape(T.transpose(x, (nd - 2,) + tuple(range(nd - 2)) + (nd - 1,)), (lam, -1))
    z = T.matmul(T.reshape(a_eff, (k_a * lam, lam)), xr)
    z = T.reshape(z, (k_a, lam) + lead + (phi_in,))
    # (K, lam, lead..., phi) -> (lead..., lam, K, phi)
    perm = tuple(range(2, 2 + len(lead))) + (1, 0, nd)
    z = T.reshape(T.transpose(z, perm), (-1, k_a * phi_in))
    out = T.matmul(z, T.concat(weights, axis=0))
    out = T.reshape(out, lead + (lam, phi_out))
    return T.relu(out) if activation else out


def layer_names(index: int, num_partitions: int):
    return ([f"sgcn.layer{index}.W{k}" for k in range(num_partitions)],
            [f"sgcn.layer{index}.M{k}" for k in range(num_partitions)])


def sgcn_forward(s, adj: AdjacencyStack, params: Mapping[str, Tensor], num_layers: int,
                 use_masks: bool = True) -> Tensor:
    """Stack of graph-convolution layers; every layer but the last applies ReLU."""
    x = T.as_tensor(s)
    for i in range(num_layers):
        w_names, m_names = layer_names(i, adj.num_partitions)
        masks = [params[n] for n in m_names] if use_masks else None
        x = sgcn_layer_forward(x, adj, [params[n] for n in w_names], masks,
                               activation=i < num_layers - 1)
    return x
