# %% [markdown]
# Layers and their oracles
#
# Every fast kernel in mavnet has a slow twin it can be checked against.
# This walks through the convolution, dilation and gradient checks by hand.

# %%
import numpy as np

from mavnet.autodiff import Tape, Var, gradient_check
from mavnet.ops import ConvSpec, conv2d, conv2d_direct, maxpool2x2, upsample_nearest_x2

rng = np.random.default_rng(0)

# %% im2col + matmul against the nested loop
spec = ConvSpec.same(3, 4)  # 3x3, padding 1
x = rng.normal(size=(2, 3, 9, 9))
w = rng.normal(size=spec.weight_shape)
b = rng.normal(size=4)
fast, slow = conv2d(x, spec, w, b), conv2d_direct(x, spec, w, b)
print("dense conv   max |fast - loop| =", np.abs(fast - slow).max())

# %% the all-ones example: centre sees 9 taps, a corner only 4
ones = conv2d(np.ones((1, 1, 3, 3)), ConvSpec.same(1, 1), np.ones((1, 1, 3, 3)), np.zeros(1))
print(ones[0, 0])

# %% dilation is a zero-inflated kernel
d = 4
dil = ConvSpec.same(4, 4, dilation=d, groups=4)   # depthwise, D=4
wd = rng.normal(size=dil.weight_shape)
big = np.zeros((4, 1, 2 * d + 1, 2 * d + 1))
big[:, :, ::d, ::d] = wd
plain = ConvSpec.same(4, 4, 2 * d + 1, groups=4)
x4 = rng.normal(size=(1, 4, 16, 16))
diff = np.abs(conv2d(x4, dil, wd, np.zeros(4)) - conv2d(x4, plain, big, np.zeros(4))).max()
print(f"D={d} vs inflated {2 * d + 1}x{2 * d + 1} kernel: {diff:.1e}")

# %% pooling and upsampling
p, idx = maxpool2x2(np.array([[[[1.0, 2], [3, 4]]]]))
print("maxpool [[1,2],[3,4]] ->", p.ravel(), "argmax slot", idx.ravel())
print(upsample_nearest_x2(np.array([[[[1.0, 2], [3, 4]]]]))[0, 0])

# %% analytic vs central-difference gradients (64-bit)
x = Var(rng.normal(size=(2, 4, 12, 12)), name="x")
w = Var(rng.normal(size=dil.weight_shape), name="w")
bias = Var(rng.normal(size=4), name="b")
proj = rng.normal(size=(2, 4, 12, 12))


def loss(tape, x, w, bias):
    return tape.weighted_sum(tape.relu(tape.conv2d(x, dil, w, bias)), proj)


rep = gradient_check(loss, [x, w, bias], max_coords=50)
print("gradient check:", {k: f"{v:.1e}" for k, v in rep.per_input.items()}, "passed:", rep.passed)

# %% fan-out: x used twice gets both contributions
x = Var(np.zeros((1, 1, 2, 2)), requires_grad=True)
tape = Tape()
tape.backward(tape.add(tape.sum(x), tape.sum(tape.scale(x, 2.0))))
print("d/dx [sum(x) + sum(2x)] =", x.grad.ravel())
