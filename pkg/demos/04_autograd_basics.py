"""
The bundled autograd in five minutes
====================================

Everything in the detector trains through one small reverse-mode tensor
type: numpy arrays with a grad slot and a topological backward pass. This
walks the core moves — build a graph, backprop, check a gradient against
finite differences, and fit a toy function with Adam.
"""

import numpy as np

from poidet.kernels import Adam, Tensor, linear
from poidet.kernels.gradcheck import run_all
from poidet.rng import Rng

# A Tensor wraps float64 data. Ops build a graph; .backward() fills the
# .grad of every tensor created with requires_grad=True.
x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
w = Tensor(np.array([0.5, 0.5, 0.5]), requires_grad=True)
loss = (x * w).relu().sum()
loss.backward()
print("loss:", float(loss.data))
print("dloss/dx:", x.grad)   # relu gate: the -1.0 path contributes nothing
print("dloss/dw:", w.grad)

# Gradients accumulate; zero them (fresh Tensors here) before reuse.
# Finite differences are the house oracle: nudge one input by h, compare
# the slope to the analytic gradient. The packaged suite does this for
# every kernel; run two random configurations per op as a smoke pass.
results = run_all(seed=0, n_configs=2)
worst = max(r.max_rel_err for r in results)
print("\ngradcheck over %d kernels: worst relative error %.2e"
      % (len(results), worst))

# Fit y = sin(x) with a tiny two-layer net and Adam. The same optimizer,
# schedule-free here, trains the full detector.
rng = Rng(5)
xs = np.linspace(-3.0, 3.0, 200).reshape(-1, 1)
ys = np.sin(xs)
params = {
    "w1": Tensor(rng.normals(32, sigma=0.5).reshape(32, 1),
                 requires_grad=True),
    "b1": Tensor(np.zeros(32), requires_grad=True),
    "w2": Tensor(rng.normals(32, sigma=0.2).reshape(1, 32),
                 requires_grad=True),
    "b2": Tensor(np.zeros(1), requires_grad=True),
}
opt = Adam(params)


def forward(inputs: np.ndarray) -> Tensor:
    hidden = linear(Tensor(inputs), params["w1"], params["b1"]).relu()
    return linear(hidden, params["w2"], params["b2"])


for step in range(401):
    pred = forward(xs)
    err = pred - Tensor(ys)
    loss = (err * err).mean()
    opt.zero_grad()
    loss.backward()
    opt.step(lr=0.01)
    if step % 100 == 0:
        print("step %3d  mse %.5f" % (step, float(loss.data)))

probe = np.array([[-1.5707], [0.0], [1.5707]])
print("sin fit at -pi/2, 0, pi/2:", np.round(forward(probe).data.ravel(), 3))
