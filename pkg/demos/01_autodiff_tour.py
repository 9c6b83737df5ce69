# %% [markdown]
# A short tour of the numpy reverse-mode engine: build a tiny graph,
# backpropagate, and compare against central differences.

# %%
import numpy as np

from mimetic_mlp import autodiff as ad
from mimetic_mlp.autodiff import Tensor
from mimetic_mlp.gradcheck import numerical_gradient, relative_error, run_suite

rng = np.random.default_rng(0)

# %% one hidden layer, GELU, layernorm, cross-entropy
x = Tensor(rng.standard_normal((4, 6)))
W = Tensor(rng.standard_normal((5, 6)) * 0.3, requires_grad=True)
b = Tensor(np.zeros(5), requires_grad=True)
gamma = Tensor(np.ones(5), requires_grad=True)
beta = Tensor(np.zeros(5), requires_grad=True)
labels = np.array([0, 3, 1, 4])


def loss():
    h = ad.gelu(ad.linear(x, W, b))
    return ad.cross_entropy(ad.layernorm(h, gamma, beta), labels)


out = loss()
ad.backward(out)
print("loss", out.item())
print("dL/dW shape", W.grad.shape)

# %% the analytic gradient should agree with finite differences to ~1e-9
num = numerical_gradient(lambda: loss().item(), W)
print("relative error on W:", relative_error(W.grad, num))

# %% the packaged suite runs the same comparison for every primitive
for report in run_suite(["gelu", "softmax", "depthwise_conv2d"], points=10, models=False):
    print(f"{report.name:18s} {report.worst_rel_err:.2e}")
