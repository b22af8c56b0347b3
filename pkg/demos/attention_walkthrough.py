"""Windowed temporal attention, step by step.

Builds random per-frame tokens, shows that half-width 0 reproduces ordinary
per-frame attention, that shifting absolute time changes nothing, how the
softmax support grows with the window, and that the streaming cache emits
the same frames while holding at most 2W+1 of them.

    python3 demos/attention_walkthrough.py
"""
import numpy as np

from temporal4d.swattn import (
    RotaryConfig,
    StreamingWindowAttention,
    streaming_attention,
    vanilla_attention,
    windowed_attention,
)

rng = np.random.default_rng(0)
T, N, D = 12, 4, 8
Q, K, V = (rng.standard_normal((T, N, D)) for _ in range(3))
cfg = RotaryConfig(D)

# half-width 0: every frame only sees itself, rotations cancel
w0 = windowed_attention((Q, K, V), 0, cfg, t0=500).data
print("W=0 vs per-frame attention, max diff:", np.abs(w0 - vanilla_attention(Q, K, V).data).max())

# relative time only: start the clip at a different absolute index
a = windowed_attention((Q, K, V), 2, cfg, t0=0).data
b = windowed_attention((Q, K, V), 2, cfg, t0=1000).data
print("t0=0 vs t0=1000 at W=2, max diff:", np.abs(a - b).max())

for W in (0, 1, 2, 4):
    _, weights = windowed_attention((Q, K, V), W, cfg, return_weights=True)
    keys = np.count_nonzero(weights[T // 2, 0, 0])
    print(f"W={W}: a middle-frame query attends to {keys} keys ((2W+1)N = {(2 * W + 1) * N})")

stream, stats = streaming_attention((Q, K, V), 2, cfg)
print("streaming vs batch at W=2, max diff:", np.abs(stream - a).max(), "| peak frames:", stats.peak_frames)

# a long stream: memory stays flat
sw = StreamingWindowAttention(2, RotaryConfig(4))
for t in range(5000):
    x = rng.standard_normal((2, 4))
    sw.push(t, x, x, x)
sw.flush()
print("5000-frame stream, peak cached frames:", sw.cache.peak_frames)
