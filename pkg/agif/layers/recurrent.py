from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor

LSTMState = Tuple[Tensor, Tensor]


@dataclass
class LSTMParams:
    W_ih: Tensor  # (4H, input), gate order i, f, g, o
    W_hh: Tensor  # (4H, H)
    b: Tensor  # (4H,)

    @classmethod
    def initialize(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator, dtype=None) -> "LSTMParams":
        return cls(
            W_ih=ad.xavier_init(4 * hidden_dim, input_dim, rng, dtype=dtype),
            W_hh=ad.xavier_init(4 * hidden_dim, hidden_dim, rng, dtype=dtype),
            b=ad.zeros((4 * hidden_dim,), requires_grad=True, dtype=dtype),
        )

    @property
    def input_dim(self) -> int:
        return self.W_ih.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_hh.shape[1]

    def named_tensors(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.W_ih", self.W_ih
        yield f"{prefix}.W_hh", self.W_hh
        yield f"{prefix}.b", self.b


def zero_state(batch_size: int, params: LSTMParams) -> LSTMState:
    dtype = params.W_hh.dtype
    shape = (batch_size, params.hidden_dim)
    return Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype))


def lstm_cell(x: Tensor, state: LSTMState, params: LSTMParams) -> LSTMState:
    h_prev, c_prev = state
    H = params.hidden_dim
    gates = ad.linear(x, params.W_ih, params.b) + ad.linear(h_prev, params.W_hh)
    i = ad.sigmoid(gates[..., 0:H])
    f = ad.sigmoid(gates[..., H : 2 * H])
    g = ad.tanh(gates[..., 2 * H : 3 * H])
    o = ad.sigmoid(gates[..., 3 * H : 4 * H])
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


def masked_lstm_cell(x: Tensor, state: LSTMState, params: LSTMParams, step_mask: np.ndarray) -> LSTMState:
    """
    Advance only the rows where ``step_mask`` is true; padded rows carry the
    previous state through unchanged.
    """
    h, c = lstm_cell(x, state, params)
    keep = step_mask[:, None]
    return ad.where(keep, h, state[0]), ad.where(keep, c, state[1])


def run_lstm(x: Tensor, mask: np.ndarray, params: LSTMParams, reverse: bool = False) -> List[Tensor]:
    """
    Run over the time axis of x (B, T, input).  In reverse, each row starts
    from its own last valid token.  Returns T hidden states of shape (B, H),
    in time order.
    """
    batch, steps = mask.shape
    state = zero_state(batch, params)
    outputs: List[Optional[Tensor]] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        state = masked_lstm_cell(x[:, t, :], state, params, mask[:, t])
        outputs[t] = state[0]
    return outputs


def bilstm(x: Tensor, mask: np.ndarray, forward: LSTMParams, backward: LSTMParams) -> Tensor:
    fw = run_lstm(x, mask, forward)
    bw = run_lstm(x, mask, backward, reverse=True)
    return ad.concat([ad.stack(fw, axis=1), ad.stack(bw, axis=1)], axis=-1)


def stacked_lstm_step(
    x: Tensor, states: Sequence[LSTMState], layers: Sequence[LSTMParams], step_mask: np.ndarray
) -> List[LSTMState]:
    new_states = []
    inputs = x
    for state, params in zip(states, layers):
        state = masked_lstm_cell(inputs, state, params, step_mask)
        new_states.append(state)
        inputs = state[0]
    return new_states
