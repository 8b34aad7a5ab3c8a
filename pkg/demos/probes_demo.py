"""Gradient norm and top Hessian eigenvalue along a short training run.

Power iteration returns the eigenvalue of largest magnitude, which can be
negative.  The lifted network has about a thousand times more directions,
so 30 iterations leave its estimate rough; raise power_iters to converge it.

    python demos/probes_demo.py
"""
from efcn import embed, nn, probes, train
from efcn.data import SyntheticConfig, gen_synthetic

train_set, test_set = gen_synthetic(SyntheticConfig(n_test=1000), seed=0)
probe_set = train_set.subset(256, seed=1)
probe_set = (probe_set.images, probe_set.labels)

cnn = nn.build_vanilla_cnn(8, train_set.shape, train_set.classes)
emap = embed.build_map(cnn)
cfg = train.TrainConfig(lr=0.1, epochs=12, batch_size=100, seed=0)
_, _, snaps = train.train(cnn, nn.init_params(cnn, 0), train_set, test_set, cfg,
                          snapshot_epochs=[0, 2, 5, 12])

print(" t_w  model   |grad|   lambda_max  test acc")
for s in snaps:
    for name, model, theta in (("cnn", cnn, s.theta),
                               ("efcn", emap.fcn_spec, emap.embed(s.theta))):
        rep = probes.probe_model(model, theta, s.t_w, "init", probe_set, test_set,
                                 what=("grad", "hessian", "accuracy"), power_iters=30)
        print(f"{s.t_w:4d}  {name:5s} {rep.grad_norm:8.4f}  {rep.lambda_max:10.4f}  "
              f"{rep.test_accuracy:.3f}")
