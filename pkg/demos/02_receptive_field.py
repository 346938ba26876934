# %% [markdown]
# Receptive field of the encoder
#
# The closed-form analyzer tracks (size, jump, start) per axis. The oracle
# pushes a gradient back from one output pixel through an all-ones linear
# copy of the stack and measures which input pixels it reaches.

# %%
from mavnet.autodiff import gradient_footprint
from mavnet.model import DWFab, ModelConfig, block_layers
from mavnet.ops import dilation_saturation_bound, output_shape, receptive_field, receptive_field_trace

cfg = ModelConfig.default()
print("parameters:", cfg.param_count())

# %% per-block cumulative receptive field, 256x256 input
shape = (1, 3, 256, 256)
stack = []
for b in cfg.encoder_blocks():
    stack += block_layers(b)
    fh, _ = receptive_field_trace(stack)[-1]
    oh, ow = output_shape(stack, shape)[2:]
    i = oh // 2
    lo, hi = fh.window(i)
    rows, _ = gradient_footprint(stack, shape, (i, ow // 2))
    tag = f"D={b.dilation}" if isinstance(b, DWFab) else ""
    print(f"{b.kind:<16}{tag:<6} rf {receptive_field(stack)[0]:>4}   "
          f"window [{float(lo):7.1f}, {float(hi):7.1f}]   footprint {rows}")
# past ~256 the window runs off the image: the footprint is the clipped window

# %% a single DWFab: only the second depthwise conv is dilated
for d in (1, 2, 4, 8, 16):
    print(f"DWFab(D={d:>2}) alone: rf {receptive_field(block_layers(DWFab(4, d)))}")

# %% dilation ablation: same parameter count, smaller field
flat = ModelConfig.default(dilations=(1, 1, 1, 1))
print("all D=1:", flat.param_count(), "params, encoder rf",
      receptive_field(flat.layer_stack(flat.encoder_blocks())))
print("default:", cfg.param_count(), "params, encoder rf",
      receptive_field(cfg.layer_stack(cfg.encoder_blocks())))

# %% stacking more than K rate-2 dilations buys nothing once 2**K covers the image
for n in (64, 256, 1024, 1280):
    print(f"input {n:>4}: K = {dilation_saturation_bound(n)}")
