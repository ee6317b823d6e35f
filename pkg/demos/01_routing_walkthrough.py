# Self-routing capsules, one location at a time.
#
# A capsule is a pose vector plus an activation in [0, 1]. A routing layer
# sends every input capsule to every output capsule type with coupling
# weights computed from the input pose alone (a softmax, so each input's
# weights sum to one). Outputs are activation-weighted averages of votes.
#
# Run:  python3 demos/01_routing_walkthrough.py

import numpy as np

from mcae.capsules import CapsuleMap, SelfRoutingParams, encoder_forward, self_route_local
from mcae.numerics import Tensor

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

# Three input capsule types of dimension 4 at a single location, routed to two
# output types of dimension 4.
K, D, M, Do = 3, 4, 2, 4
layer = SelfRoutingParams.init(K, D, M, Do, rng, std=0.5, dtype=np.float64)

poses = rng.standard_normal((1, 1, K, D))
acts = np.array([[[0.9, 0.5, 0.0]]])  # the third capsule is absent
caps = CapsuleMap(Tensor(poses), Tensor(acts), grid=(1, 1))

out, gamma = self_route_local(caps, layer, return_coupling=True)
print("coupling weights, one row per input capsule:")
print(gamma.data[0, 0])
print("row sums:", gamma.data[0, 0].sum(-1))

# An absent capsule (activation 0) still has coupling weights, but it
# contributes nothing: the outputs are weighted by input activation.
print("\noutput activations:", out.activations.data[0, 0])
print("output activations sum to", out.activations.data[0, 0].sum())

# Zeroing the absent capsule's pose leaves the outputs unchanged.
poses2 = poses.copy()
poses2[..., 2, :] = 0.0
out2 = self_route_local(CapsuleMap(Tensor(poses2), Tensor(acts), (1, 1)), layer)
print("absent capsule changes nothing:",
      np.array_equal(out.poses.data, out2.poses.data)
      and np.array_equal(out.activations.data, out2.activations.data))

# The encoder stacks such layers and routes strictly within each location, so
# a 4x4 map gives the same answer as sixteen separate 1x1 maps.
stack = [SelfRoutingParams.init(K, D, K, D, rng, std=0.5, dtype=np.float64) for _ in range(3)]
grid = CapsuleMap(Tensor(rng.standard_normal((2, 16, K, D))), Tensor(rng.uniform(0, 1, (2, 16, K))), (4, 4))
whole = encoder_forward(grid, stack)
same = all(np.array_equal(encoder_forward(grid.at(i), stack).poses.data, whole.poses.data[:, i:i + 1])
           for i in range(16))
print("\nencoder is per-location (bit-exact):", same)
