"""
Gated recurrent unit math.

Gate blocks are concatenated column-wise in the order update (z), reset (r), candidate (h):
W is D x 3U, U is U x 3U and b is 3U.

    z  = sigmoid(x W_z + h_prev U_z + b_z)
    r  = sigmoid(x W_r + h_prev U_r + b_r)
    h~ = tanh(x W_h + (r * h_prev) U_h + b_h)
    h  = (1 - z) * h_prev + z * h~
"""

import typing
import numpy as np
import scipy.special

Params = typing.Mapping[str, np.ndarray]


def _units(params: Params) -> int:
    return params["U"].shape[0]


def gru_cell(
    x_t: np.ndarray, h_prev: np.ndarray, params: Params
) -> typing.Tuple[np.ndarray, dict]:
    units = _units(params)
    if x_t.shape[-1] != params["W"].shape[0]:
        raise ValueError(f"GRU expects {params['W'].shape[0]}-dim input, got {x_t.shape[-1]}")
    if h_prev.shape[-1] != units:
        raise ValueError(f"GRU state is {units}-dim, got {h_prev.shape[-1]}")

    projected = x_t @ params["W"] + params["b"]
    recurrent = h_prev @ params["U"][:, : 2 * units]

    z = scipy.special.expit(projected[:, :units] + recurrent[:, :units])
    r = scipy.special.expit(projected[:, units : 2 * units] + recurrent[:, units:])
    candidate = np.tanh(projected[:, 2 * units :] + (r * h_prev) @ params["U"][:, 2 * units :])
    h = (1 - z) * h_prev + z * candidate

    return h, dict(x=x_t, h_prev=h_prev, z=z, r=r, candidate=candidate)


def gru_cell_backward(
    dh: np.ndarray, cache: dict, params: Params
) -> typing.Tuple[np.ndarray, np.ndarray, typing.Dict[str, np.ndarray]]:
    """Gradients w.r.t. the input, the previous state and W, U, b."""
    units = _units(params)
    x, h_prev, z, r, candidate = (cache[key] for key in ("x", "h_prev", "z", "r", "candidate"))
    u_gates, u_candidate = params["U"][:, : 2 * units], params["U"][:, 2 * units :]

    d_candidate = dh * z * (1 - np.square(candidate))
    d_reset_state = d_candidate @ u_candidate.T
    d_z = dh * (candidate - h_prev) * z * (1 - z)
    d_r = d_reset_state * h_prev * r * (1 - r)

    d_gates = np.concatenate([d_z, d_r], axis=1)
    d_projected = np.concatenate([d_gates, d_candidate], axis=1)

    dh_prev = dh * (1 - z) + d_reset_state * r + d_gates @ u_gates.T
    grads = dict(
        W=x.T @ d_projected,
        U=np.concatenate([h_prev.T @ d_gates, (r * h_prev).T @ d_candidate], axis=1),
        b=d_projected.sum(axis=0),
    )
    return d_projected @ params["W"].T, dh_prev, grads


def _steps(length: int, reverse: bool) -> range:
    return range(length - 1, -1, -1) if reverse else range(length)


def gru_sequence(
    x: np.ndarray, params: Params, reverse: bool = False, h0: typing.Optional[np.ndarray] = None
) -> typing.Tuple[np.ndarray, typing.List[dict]]:
    """Run over (N, T, D) input; states come back (N, T, U) in input time order."""
    batch, length, _ = x.shape
    h = np.zeros((batch, _units(params)), dtype=x.dtype) if h0 is None else h0
    states = np.empty((batch, length, _units(params)), dtype=x.dtype)

    caches = []
    for t in _steps(length, reverse):
        h, cache = gru_cell(x[:, t], h, params)
        states[:, t] = h
        caches.append(cache)

    return states, caches


def gru_sequence_backward(
    d_states: np.ndarray, caches: typing.List[dict], params: Params, reverse: bool = False
) -> typing.Tuple[np.ndarray, typing.Dict[str, np.ndarray]]:
    batch, length, _ = d_states.shape
    dx = np.empty(d_states.shape[:2] + (params["W"].shape[0],), dtype=d_states.dtype)
    grads = {name: np.zeros_like(params[name]) for name in ("W", "U", "b")}

    carry = np.zeros((batch, _units(params)), dtype=d_states.dtype)
    for t, cache in zip(reversed(_steps(length, reverse)), reversed(caches)):
        dx[:, t], carry, step = gru_cell_backward(d_states[:, t] + carry, cache, params)
        for name in grads:
            grads[name] += step[name]

    return dx, grads
