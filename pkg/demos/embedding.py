"""Lift a small CNN into the equivalent fully connected network.

Shows that the lifted network computes the same function, that every
convolution weight is copied into many dense entries, and that the
off-local part of the dense weights starts out exactly zero.

    python demos/embedding.py
"""
import numpy as np

from efcn import embed, nn

cnn = nn.build_vanilla_cnn(8, (3, 16, 16), 10)
emap = embed.build_map(cnn)
fcn = emap.fcn_spec
print(f"CNN parameters: {cnn.num_params:,}")
print(f"FCN parameters: {fcn.num_params:,}")

theta = nn.init_params(cnn, seed=0)
lifted = emap.embed(theta)

x = np.random.default_rng(1).standard_normal((5, 3, 16, 16)).astype(np.float32)
diff = np.abs(nn.forward(cnn, theta, x).data - nn.forward(fcn, lifted, x).data).max()
print(f"max |logit difference| on 5 random images: {diff:.2e}")

ties = emap.tie_counts()
print(f"dense copies per conv weight: min {ties.min()}, max {ties.max()}")

print(f"delta right after lifting: {embed.delta(lifted, emap.mask)}")
dense = nn.init_params(fcn, seed=2)
print(f"delta of a freshly initialised FCN: {embed.delta(dense, emap.mask):.4f}")
print(f"i.i.d. prediction sqrt(M_off / M_w): {embed.expected_delta_iid(cnn):.4f}")

full = nn.build_vanilla_cnn(64, (3, 32, 32), 10)
print(f"full-size VanillaCNN would need {embed.required_bytes(full) / 1e9:.2f} GB "
      f"for its FCN at float32; i.i.d. delta {embed.expected_delta_iid(full):.4f}")
