"""Walk through the tensor core: build a computation, differentiate it,
and verify the gradients against central finite differences."""

import numpy as np

import langseg.tensor as T
from langseg.rng import Rng
from langseg.tensor import Tensor, backward, grad_check

rng = Rng(7)

print("== forward and backward through a small expression ==")
a = Tensor(rng.uniform((3, 4), -1, 1), requires_grad=True)
b = Tensor(rng.uniform((4, 2), -1, 1), requires_grad=True)
loss = T.relu(a @ b).mean()
print("loss =", float(loss.data))
backward(loss)
print("d loss / d a has shape", a.grad.shape, "and norm", float(np.abs(a.grad).sum()))

print()
print("== the same gradients, checked numerically ==")
report = grad_check(lambda: T.relu(a @ b).mean(), [a, b], names=["a", "b"])
for entry in report.entries:
    print(f"  {entry.name}: max rel err {entry.max_rel_err:.2e} "
          f"({'ok' if entry.ok else 'MISMATCH'})")

print()
print("== convolution and upsampling, the image-side primitives ==")
image = Tensor(rng.uniform((1, 8, 8), 0, 1), requires_grad=True)
kernel = Tensor(rng.uniform((4, 1, 3, 3), -0.5, 0.5), requires_grad=True)
fmap = T.conv2d(image, kernel, stride=1, pad=1)
up = T.upsample_nearest2x(fmap)
print("conv:", image.shape, "->", fmap.shape, "-> upsampled", up.shape)
backward(up.sum())
print("each feature pixel feeds a 2x2 block, so its gradient under sum() is 4:",
      bool((fmap.grad == 4.0).all()))

print()
print("== deterministic seeding: the same seed replays bitwise ==")
x1 = Rng(42).uniform((4,))
x2 = Rng(42).uniform((4,))
print("draws equal:", bool((x1 == x2).all()))
