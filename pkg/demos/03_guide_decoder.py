"""One guided decoding stage, step by step, and the gate that controls it."""

import numpy as np

from langseg.decoder import (StageIO, cross_fuse, decode_merge, evolve_visual,
                             guide_decoder_forward, init_guide_decoder,
                             project_text)
from langseg.rng import Rng
from langseg.tensor import Tensor

rng = Rng(21)
params = init_guide_decoder(rng, c_stage=16, c_skip=8, c_out=8, d_text=12,
                            l_max=10, m_tokens=4, grid_h=4, grid_w=4, heads=4)

visual = Tensor(rng.uniform((16, 16), -1, 1))     # 4x4 grid of 16-wide tokens
text = Tensor(rng.uniform((10, 12), -1, 1))       # 10 tokens, 12-wide
mask = np.array([True] * 7 + [False] * 3)         # last three are padding
skip = Tensor(rng.uniform((8, 8, 8), -1, 1))      # skip feature at 2x the side

print("== the four steps ==")
f_t = project_text(text, mask, params)
print("project_text:   ", text.shape, "->", f_t.shape, "(fewer tokens, visual width)")
f_i = evolve_visual(visual, params)
print("evolve_visual:  ", visual.shape, "->", f_i.shape, "(posenc + residual MHSA)")
f_c = cross_fuse(f_i, f_t, params)
print("cross_fuse:     ", f_i.shape, "+ text ->", f_c.shape, "(gated residual)")
out = decode_merge(f_c, skip, params)
print("decode_merge:   ", f_c.shape, "+ skip", tuple(skip.shape), "->", out.shape)

composed = guide_decoder_forward(StageIO(visual, text, mask, skip), params)
print("composition equals the one-call forward bitwise:",
      out.data.tobytes() == composed.data.tobytes())

print()
print("== the gate ==")
other_text = Tensor(rng.uniform((10, 12), -1, 1))
with_text = guide_decoder_forward(StageIO(visual, text, mask, skip), params)
with_other = guide_decoder_forward(StageIO(visual, other_text, mask, skip), params)
print("alpha =", float(params.alpha.data), "-> changing the text moves the output by",
      float(np.abs(with_text.data - with_other.data).max()))

params.alpha.data = np.asarray(0.0, dtype=np.float32)
closed_a = guide_decoder_forward(StageIO(visual, text, mask, skip), params)
closed_b = guide_decoder_forward(StageIO(visual, other_text, mask, skip), params)
print("alpha = 0.0 -> output is bitwise invariant to the text:",
      closed_a.data.tobytes() == closed_b.data.tobytes())
