"""Paths between a lifted CNN and a trained FCN.

Compares the straight line in weight space, a string-relaxed path and
interpolation of the two networks' output probabilities.

    python demos/interpolation.py
"""
import numpy as np

from efcn import embed, interp, nn, train
from efcn.data import SyntheticConfig, gen_synthetic

train_set, test_set = gen_synthetic(SyntheticConfig(n_test=1000), seed=0)
cnn = nn.build_vanilla_cnn(8, train_set.shape, train_set.classes)
emap = embed.build_map(cnn)
fcn = emap.fcn_spec

cnn_theta, _, _ = train.train(cnn, nn.init_params(cnn, 0), train_set, test_set,
                              train.TrainConfig(lr=0.1, epochs=12, batch_size=100, seed=0))
lifted = emap.embed(cnn_theta)
fcn_theta, _, _ = train.train(fcn, lifted, train_set, test_set,
                              train.TrainConfig(lr=0.05, epochs=3, batch_size=100, seed=1))

line = interp.linear_path(lifted, fcn_theta, n=7)
relaxed = interp.string_relax(line, interp.StringConfig(stiffness=1.0, steps=50, lr=0.01,
                                                        batch_size=100), fcn, train_set)
rows = (interp.path_profile(line, fcn, train_set, test_set, "linear")
        + interp.path_profile(relaxed, fcn, train_set, test_set, "string")
        + interp.output_profile(fcn, lifted, fcn, fcn_theta, np.linspace(0, 1, 7),
                                train_set, test_set))
print("method   alpha  train loss  test acc")
for method, alpha, loss, acc in rows:
    print(f"{method:7s}  {alpha:5.2f}  {loss:10.4f}  {acc:.3f}")
