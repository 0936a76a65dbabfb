"""
Reverse-mode gradients and a recurrent step
===========================================

The package carries its own small tape. Every op records how to push a
gradient back to its inputs; ``backward`` walks the tape once.
"""

import numpy as np

from gatedlongrec import numerics as nx
from gatedlongrec.model import GruParams, encode_sequence, gru_step
from gatedlongrec.numerics import Tensor

rng = np.random.default_rng(0)

# a parameter is just a Tensor that asks for a gradient
W = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
x = Tensor(rng.normal(size=(5, 4)))
loss = nx.total(nx.tanh(nx.linear_map(W, x)))
nx.backward(loss)
print("loss", float(loss.data))
print("dloss/dW\n", W.grad.round(4))

# central differences agree with the tape
err = nx.gradient_check(lambda: nx.total(nx.tanh(nx.linear_map(W, x))), [W])
print("gradient check, max relative error:", f"{err:.1e}")

# one GRU step without biases: z keeps the old state, 1 - z takes the candidate
gru = GruParams.init(hidden=3, inputs=2, rng=rng)
h = gru_step(gru, np.zeros(3), np.array([1.0, -1.0]))
print("h after one step", h.data.round(4))

# with all weights zero both gates sit at 0.5, so each step halves the state
zero = GruParams(*(Tensor(np.zeros((3, 5))) for _ in range(3)))
h = encode_sequence(zero, [Tensor(np.ones(2))] * 4, h0=np.array([1.0, 2.0, -4.0]))
print("zero weights, 4 steps:", h.data)
