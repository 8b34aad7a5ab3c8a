"""Run the relax protocol on the synthetic task and print a summary.

Trains a CNN, lifts snapshots taken at log-spaced epochs, keeps training
each lifted network as a plain FCN, and trains a fresh FCN for reference.
The defaults are small enough to finish in a few minutes; pass ``--full``
for the desk-scale run used by the acceptance suite.

    python demos/protocol.py [--full] [--seed 0]
"""
import argparse
import time

from efcn import embed, probes, train
from efcn.data import SyntheticConfig, gen_synthetic

ap = argparse.ArgumentParser()
ap.add_argument("--full", action="store_true")
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

if args.full:
    data = SyntheticConfig()
    cfg = train.ProtocolConfig(cnn_epochs=30, efcn_epochs=20, snapshots=6, efcn_lr=0.05,
                               seed=args.seed)
else:
    data = SyntheticConfig(n_train=2000, n_test=1000)
    cfg = train.ProtocolConfig(cnn_epochs=12, efcn_epochs=4, snapshots=4, batch_size=100,
                               efcn_lr=0.05, seed=args.seed)

train_set, test_set = gen_synthetic(data, seed=args.seed)
t0 = time.perf_counter()


def stage(name, _):
    print(f"  done {name} after {time.perf_counter() - t0:.0f}s", flush=True)


rep = train.relax_protocol(cfg, train_set, test_set, on_stage=stage)

print(f"\nCNN final test accuracy {rep.curves['cnn'].final_test_accuracy:.3f}")
print(f"FCN final test accuracy {rep.curves['fcn'].final_test_accuracy:.3f}")
print("\n t_w  acc@lift  acc@end  delta@end  off-local-only@lift")
for t in rep.relax_times:
    c = rep.curves[f"efcn_tw{t}"]
    off = probes.masked_accuracy(rep.fcn_spec, rep.efcn_init[t], rep.emap.mask, "off_local", test_set)
    print(f"{t:4d}  {c.initial['test_accuracy']:8.3f}  {c.final_test_accuracy:7.3f}"
          f"  {embed.delta(rep.efcn_final[t], rep.emap.mask):9.4f}  {off:.3f}")
