"""``efcn`` command line: run the protocol and its pieces inside a run directory.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime
error.  Failures print one JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import data as D
from . import embed as E
from . import interp as I
from . import nn
from . import probes as P
from . import train as tr
from .config import ConfigError, dump_config, load_config

log = logging.getLogger("efcn")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

CURVE_COLUMNS = ("run_id", "phase", "epoch", "split", "loss", "accuracy")
PROBE_COLUMNS = ("t_w", "phase", "grad_norm", "lambda_max", "delta",
                 "test_acc", "test_acc_local", "test_acc_offlocal")
PATH_COLUMNS = ("method", "alpha", "train_loss", "test_accuracy")
MASK_COLUMNS = ("t_w", "phase", "keep", "test_accuracy")
FCN_TW = -1  # t_w value used for the from-scratch FCN in probe tables


class UsageError(Exception):
    pass


class RunError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- run directory -----------------------------------------------------------

class RunDir:
    """Append-only output directory: existing files are never overwritten."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)

    def file(self, name):
        return self.path / name

    def _claim(self, name):
        p = self.file(name)
        if p.exists():
            raise RunError(f"{p} already exists; run directories are append-only")
        return p

    def write_csv(self, name, columns, rows):
        p = self._claim(name)
        with open(p, "x", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        return p

    def write_json(self, name, obj):
        p = self._claim(name)
        with open(p, "x") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        return p

    def write_text(self, name, text):
        p = self._claim(name)
        p.write_text(text)
        return p

    def save(self, name, ckpt):
        ck.save_checkpoint(self._claim(name), ckpt)

    def load(self, name):
        p = self.file(name)
        if not p.exists():
            raise RunError(f"{p} not found; run the command that produces it first")
        return ck.load_checkpoint(p)

    def snapshot_epochs(self):
        found = []
        for p in self.path.glob("snapshot_tw*.ckpt"):
            m = re.fullmatch(r"snapshot_tw(\d+)\.ckpt", p.name)
            if m:
                found.append(int(m.group(1)))
        return sorted(found)

    def efcn_epochs(self, stage):
        found = []
        for p in self.path.glob(f"efcn_tw*_{stage}.ckpt"):
            m = re.fullmatch(rf"efcn_tw(\d+)_{stage}\.ckpt", p.name)
            if m:
                found.append(int(m.group(1)))
        return sorted(found)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# -- shared pieces -----------------------------------------------------------

def load_data(cfg):
    d = cfg["data"]
    if d["kind"] == "cifar10":
        return D.load_cifar10(d["dir"] or None)
    scfg = D.SyntheticConfig(d["classes"], d["canvas"], d["pattern"], d["channels"],
                             d["n_train"], d["n_test"], d["noise"], d["standardize"])
    return D.gen_synthetic(scfg, d["seed"])


def protocol_config(cfg):
    t = cfg["train"]
    return tr.ProtocolConfig(channels=cfg["model"]["channels"], cnn_epochs=t["cnn_epochs"],
                             efcn_epochs=t["efcn_epochs"], snapshots=t["snapshots"],
                             cnn_lr=t["cnn_lr"], efcn_lr=t["efcn_lr"], batch_size=t["batch_size"],
                             optimizer=t["optimizer"], dropout=cfg["model"]["dropout"],
                             seed=t["seed"], max_bytes=t["max_bytes"])


def _cnn_spec(cfg, train_set):
    return nn.build_vanilla_cnn(cfg["model"]["channels"], train_set.shape, train_set.classes,
                                cfg["model"]["dropout"])


def _emap(cfg, train_set):
    return E.build_map(_cnn_spec(cfg, train_set), cfg["train"]["max_bytes"])


def _curve_rows(curve):
    return curve.records()


def _write_curve(run, curve):
    run.write_csv(f"curves_{curve.run_id}.csv", CURVE_COLUMNS, _curve_rows(curve))


def _seeds(pcfg, **extra):
    return {"train_seed": pcfg.seed, **extra}


def _efcn_final_ckpt(fcn_spec, theta, pcfg, t_w):
    return ck.from_params(fcn_spec, theta, pcfg.efcn_epochs, _seeds(pcfg, relax_time=t_w),
                          {"kind": pcfg.optimizer, "lr": pcfg.efcn_lr}, meta={"t_w": t_w})


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg, run):
    train_set, test_set = load_data(cfg)
    for ds in (train_set, test_set):
        run.save(f"dataset_{ds.split}.ckpt",
                 ck.Checkpoint(None, 0, {"data_seed": cfg["data"]["seed"]}, {"kind": "none"},
                               {"images": ds.images, "labels": ds.labels},
                               {"split": ds.split, "classes": ds.classes}))
    summary = {"train": len(train_set), "test": len(test_set), "shape": list(train_set.shape),
               "classes": train_set.classes,
               "label_counts": np.bincount(test_set.labels, minlength=test_set.classes).tolist()}
    run.write_json("synth.json", summary)
    return summary


def cmd_train_cnn(args, cfg, run):
    train_set, test_set = load_data(cfg)
    pcfg = protocol_config(cfg)
    spec = _cnn_spec(cfg, train_set)
    theta0 = nn.init_params(spec, pcfg.seed)
    tcfg = pcfg.cnn_train()
    tws = tr.log_spaced_epochs(pcfg.cnn_epochs, pcfg.snapshots)
    final, curve, snaps = tr.train(spec, theta0, train_set, test_set, tcfg, snapshot_epochs=tws,
                                   run_id="cnn")
    for s in snaps:
        run.save(f"snapshot_tw{s.t_w}.ckpt", ck.from_snapshot(spec, s, tcfg))
    run.save("cnn_final.ckpt", ck.from_params(spec, final, pcfg.cnn_epochs, _seeds(pcfg),
                                              {"kind": pcfg.optimizer, "lr": pcfg.cnn_lr}))
    _write_curve(run, curve)
    out = {"relax_times": tws, "final_test_accuracy": curve.final_test_accuracy,
           "num_params": spec.num_params}
    run.write_json("train_cnn.json", out)
    return out


def cmd_train_fcn(args, cfg, run):
    train_set, test_set = load_data(cfg)
    pcfg = protocol_config(cfg)
    fcn_spec = nn.build_fcn_from(_cnn_spec(cfg, train_set))
    theta0 = nn.init_params(fcn_spec, _fcn_seed(pcfg))
    final, curve, _ = tr.train(fcn_spec, theta0, train_set, test_set, pcfg.dense_train(0), run_id="fcn")
    run.save("fcn_init.ckpt", ck.from_params(fcn_spec, theta0, 0, _seeds(pcfg)))
    run.save("fcn_final.ckpt", ck.from_params(fcn_spec, final, pcfg.efcn_epochs, _seeds(pcfg),
                                              {"kind": pcfg.optimizer, "lr": pcfg.efcn_lr}))
    _write_curve(run, curve)
    out = {"final_test_accuracy": curve.final_test_accuracy, "num_params": fcn_spec.num_params}
    run.write_json("train_fcn.json", out)
    return out


def _fcn_seed(pcfg):
    return int(np.random.SeedSequence([pcfg.seed, 7]).generate_state(1)[0])


def _require_snapshot(run, t_w):
    available = run.snapshot_epochs()
    if t_w not in available:
        raise RunError(f"no snapshot at t_w={t_w}; available t_w values: {available}")
    return ck.to_snapshot(run.load(f"snapshot_tw{t_w}.ckpt"))


def cmd_embed(args, cfg, run):
    train_set, _ = load_data(cfg)
    emap = _emap(cfg, train_set)
    tws = [args.tw] if args.tw is not None else run.snapshot_epochs()
    if not tws:
        raise RunError("no snapshots in run directory; run train-cnn first")
    for t_w in tws:
        snap = _require_snapshot(run, t_w)
        theta = emap.embed(snap.theta)
        run.save(f"efcn_tw{t_w}_init.ckpt",
                 ck.from_params(emap.fcn_spec, theta, 0, {"relax_time": t_w}, meta={"t_w": t_w}))
    return {"embedded": tws, "M": emap.fcn_spec.num_params, "m": emap.cnn_spec.num_params}


def cmd_relax(args, cfg, run):
    train_set, test_set = load_data(cfg)
    pcfg = protocol_config(cfg)
    snap = _require_snapshot(run, args.tw)
    emap = _emap(cfg, train_set)
    start = emap.embed(snap.theta)
    final, curve, _ = tr.train(emap.fcn_spec, start, train_set, test_set,
                               pcfg.dense_train(args.tw + 1), run_id=f"efcn_tw{args.tw}")
    if not run.file(f"efcn_tw{args.tw}_init.ckpt").exists():
        run.save(f"efcn_tw{args.tw}_init.ckpt",
                 ck.from_params(emap.fcn_spec, start, 0, {"relax_time": args.tw}, meta={"t_w": args.tw}))
    run.save(f"efcn_tw{args.tw}_final.ckpt", _efcn_final_ckpt(emap.fcn_spec, final, pcfg, args.tw))
    _write_curve(run, curve)
    return {"t_w": args.tw, "initial_test_accuracy": curve.initial["test_accuracy"],
            "final_test_accuracy": curve.final_test_accuracy, "delta": E.delta(final, emap.mask)}


def _probe_targets(run):
    """(t_w, phase, checkpoint name) for every dense model in the run directory."""
    targets = []
    for t_w in run.efcn_epochs("init"):
        targets.append((t_w, "at_embedding", f"efcn_tw{t_w}_init.ckpt"))
    for t_w in run.efcn_epochs("final"):
        targets.append((t_w, "after_training", f"efcn_tw{t_w}_final.ckpt"))
    for name, phase in (("fcn_init.ckpt", "at_embedding"), ("fcn_final.ckpt", "after_training")):
        if run.file(name).exists():
            targets.append((FCN_TW, phase, name))
    return sorted(targets, key=lambda t: (t[0] == FCN_TW, t[0], t[1] != "at_embedding"))


def _probe_what(what, hessian=True):
    if what == "all":
        return ("grad", "hessian", "delta", "accuracy") if hessian else ("grad", "delta", "accuracy")
    return {"grad": ("grad",), "hessian": ("hessian",), "delta": ("delta",)}[what]


def _probe_rows(items, emap, probe_set, test_set, what, pc):
    rows = []
    for t_w, phase, model, theta in items:
        rep = P.probe_model(model, theta, t_w, phase, probe_set, test_set, emap.mask, what,
                            pc["power_iters"], pc["tol"], pc["seed"])
        rows.append(rep.row())
        log.info("probe t_w=%s %s: %s", t_w, phase, rep.row()[2:])
    return rows


def cmd_probe(args, cfg, run):
    train_set, test_set = load_data(cfg)
    emap = _emap(cfg, train_set)
    pc = cfg["probe"]
    probe_set = train_set.subset(pc["size"], pc["seed"])
    items = []
    for t_w, phase, name in _probe_targets(run):
        model, theta = ck.to_params(run.load(name))
        items.append((t_w, phase, model, theta))
    if not items:
        raise RunError("no eFCN/FCN checkpoints to probe; run embed, relax or train-fcn first")
    rows = _probe_rows(items, emap, probe_set, test_set, _probe_what(args.what), pc)
    run.write_csv(f"probes_{args.what}.csv", PROBE_COLUMNS, rows)
    return {"rows": len(rows)}


def cmd_mask_eval(args, cfg, run):
    train_set, test_set = load_data(cfg)
    emap = _emap(cfg, train_set)
    keep = "off_local" if args.keep == "offlocal" else "local"
    rows = []
    for t_w, phase, name in _probe_targets(run):
        model, theta = ck.to_params(run.load(name))
        rows.append((t_w, phase, args.keep, P.masked_accuracy(model, theta, emap.mask, keep, test_set)))
    if not rows:
        raise RunError("no eFCN/FCN checkpoints found")
    run.write_csv(f"mask_{args.keep}.csv", MASK_COLUMNS, rows)
    return {"rows": len(rows)}


def _pick_tw(run, requested):
    available = run.efcn_epochs("final")
    if not available:
        raise RunError("no trained eFCN in run directory; run relax or protocol first")
    t_w = available[-1] if requested is None or requested < 0 else requested
    if t_w not in available:
        raise RunError(f"no trained eFCN at t_w={t_w}; available t_w values: {available}")
    return t_w


def cmd_interp(args, cfg, run):
    train_set, test_set = load_data(cfg)
    ic = cfg["interp"]
    n = args.n or ic["n"]
    t_w = _pick_tw(run, args.tw if args.tw is not None else ic["tw"])
    cnn_model, cnn_theta = ck.to_params(run.load("cnn_final.ckpt"))
    emap = E.build_map(cnn_model, cfg["train"]["max_bytes"])
    fcn_model, efcn_theta = ck.to_params(run.load(f"efcn_tw{t_w}_final.ckpt"))
    a = emap.embed(cnn_theta)
    if args.method == "output":
        alphas = np.arange(n) / (n - 1)
        rows = I.output_profile(cnn_model, cnn_theta, fcn_model, efcn_theta, alphas, train_set, test_set)
    else:
        path = I.linear_path(a, efcn_theta, n)
        if args.method == "string":
            scfg = I.StringConfig(ic["stiffness"], ic["steps"], ic["lr"], ic["batch_size"], ic["seed"])
            path = I.string_relax(path, scfg, fcn_model, train_set)
        rows = I.path_profile(path, fcn_model, train_set, test_set, args.method)
    run.write_csv(f"path_{args.method}_tw{t_w}.csv", PATH_COLUMNS, rows)
    return {"t_w": t_w, "points": len(rows)}


def cmd_filters(args, cfg, run):
    train_set, _ = load_data(cfg)
    emap = _emap(cfg, train_set)
    try:
        i, j = (int(v) for v in args.pos.split(","))
    except ValueError as exc:
        raise UsageError(f"--pos expects i,j, got {args.pos!r}") from exc
    if args.tw is None:
        name = "fcn_final.ckpt" if args.phase == "final" else "fcn_init.ckpt"
    else:
        name = f"efcn_tw{args.tw}_{args.phase}.ckpt"
    _, theta = ck.to_params(run.load(name))
    try:
        heat = P.filter_heatmap(theta, emap, args.layer, args.channel, (i, j))
    except IndexError as exc:
        raise UsageError(str(exc)) from exc
    rows = [(c, r, *heat[c, r].tolist()) for c in range(heat.shape[0]) for r in range(heat.shape[1])]
    cols = ("in_channel", "row") + tuple(f"col{k}" for k in range(heat.shape[2]))
    stem = Path(name).stem
    run.write_csv(f"filters_{stem}_L{args.layer}_c{args.channel}_{i}_{j}.csv", cols, rows)
    return {"shape": list(heat.shape)}


def cmd_protocol(args, cfg, run):
    train_set, test_set = load_data(cfg)
    pcfg = protocol_config(cfg)
    pc = cfg["probe"]
    cnn_tcfg = pcfg.cnn_train()
    spec_holder = {}

    def on_stage(name, payload):
        if name == "cnn":
            final, curve, snaps = payload
            spec = nn.build_vanilla_cnn(pcfg.channels, train_set.shape, train_set.classes, pcfg.dropout)
            spec_holder["cnn"] = spec
            for s in snaps:
                run.save(f"snapshot_tw{s.t_w}.ckpt", ck.from_snapshot(spec, s, cnn_tcfg))
            run.save("cnn_final.ckpt", ck.from_params(spec, final, pcfg.cnn_epochs, _seeds(pcfg)))
            _write_curve(run, curve)
        elif name == "fcn":
            start, final, curve = payload
            fcn_spec = nn.build_fcn_from(spec_holder["cnn"])
            run.save("fcn_init.ckpt", ck.from_params(fcn_spec, start, 0, _seeds(pcfg)))
            run.save("fcn_final.ckpt", ck.from_params(fcn_spec, final, pcfg.efcn_epochs, _seeds(pcfg)))
            _write_curve(run, curve)
        else:
            start, final, curve = payload
            t_w = int(name.removeprefix("efcn_tw"))
            fcn_spec = nn.build_fcn_from(spec_holder["cnn"])
            run.save(f"efcn_tw{t_w}_init.ckpt",
                     ck.from_params(fcn_spec, start, 0, {"relax_time": t_w}, meta={"t_w": t_w}))
            run.save(f"efcn_tw{t_w}_final.ckpt", _efcn_final_ckpt(fcn_spec, final, pcfg, t_w))
            _write_curve(run, curve)
        log.info("stage %s done", name)

    report = tr.relax_protocol(pcfg, train_set, test_set, on_stage=on_stage)
    probe_set = train_set.subset(pc["size"], pc["seed"])
    items = []
    for t_w in report.relax_times:
        items.append((t_w, "at_embedding", report.fcn_spec, report.efcn_init[t_w]))
        items.append((t_w, "after_training", report.fcn_spec, report.efcn_final[t_w]))
    items.append((FCN_TW, "after_training", report.fcn_spec, report.fcn_final))
    rows = _probe_rows(items, report.emap, probe_set, test_set, _probe_what("all", pc["hessian"]), pc)
    run.write_csv("probes.csv", PROBE_COLUMNS, rows)
    summary = {
        "relax_times": report.relax_times,
        "cnn_final_test_accuracy": report.curves["cnn"].final_test_accuracy,
        "fcn_final_test_accuracy": report.curves["fcn"].final_test_accuracy,
        "efcn": {str(t): {"initial_test_accuracy": report.curves[f"efcn_tw{t}"].initial["test_accuracy"],
                          "final_test_accuracy": report.curves[f"efcn_tw{t}"].final_test_accuracy,
                          "delta": E.delta(report.efcn_final[t], report.emap.mask)}
                 for t in report.relax_times},
        "m": report.cnn_spec.num_params,
        "M": report.fcn_spec.num_params,
    }
    run.write_json("summary.json", summary)
    return summary


def cmd_verify(args, cfg, run):
    from .verify import run_suite

    results = run_suite(seed=cfg["train"]["seed"])
    run.write_json(f"verify_{time.strftime('%Y%m%dT%H%M%S')}.json", results)
    failed = [r["name"] for r in results if not r["passed"]]
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['name']}: {r['value']:.3g} (limit {r['limit']:.3g})")
    if failed:
        raise RunError(f"verification failed: {', '.join(failed)}")
    return {"passed": len(results)}


COMMANDS = {
    "synth": cmd_synth,
    "train-cnn": cmd_train_cnn,
    "train-fcn": cmd_train_fcn,
    "embed": cmd_embed,
    "relax": cmd_relax,
    "protocol": cmd_protocol,
    "probe": cmd_probe,
    "mask-eval": cmd_mask_eval,
    "interp": cmd_interp,
    "filters": cmd_filters,
    "verify": cmd_verify,
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--run-dir", default="runs/default", help="output directory (append-only)")
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="efcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    for name in ("synth", "train-cnn", "train-fcn", "protocol", "verify"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("embed", parents=[common])
    p.add_argument("--tw", type=int, help="embed only this snapshot (default: all)")
    p = sub.add_parser("relax", parents=[common])
    p.add_argument("--tw", type=int, required=True, help="relax time (epoch of a recorded snapshot)")
    p = sub.add_parser("probe", parents=[common])
    p.add_argument("--what", choices=("grad", "hessian", "delta", "all"), default="all")
    p = sub.add_parser("mask-eval", parents=[common])
    p.add_argument("--keep", choices=("local", "offlocal"), required=True)
    p = sub.add_parser("interp", parents=[common])
    p.add_argument("--method", choices=("linear", "string", "output"), required=True)
    p.add_argument("--n", type=int, help="number of points (>= 2)")
    p.add_argument("--tw", type=int, help="relax time of the eFCN endpoint (default: latest)")
    p = sub.add_parser("filters", parents=[common])
    p.add_argument("--layer", type=int, required=True, help="layer index of an embedded conv")
    p.add_argument("--channel", type=int, required=True, help="output channel")
    p.add_argument("--pos", required=True, help="output position i,j")
    p.add_argument("--tw", type=int, help="eFCN relax time (default: the from-scratch FCN)")
    p.add_argument("--phase", choices=("init", "final"), default="init")
    return parser


def _error(kind, code, message):
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def run(argv=None):
    """Entry point; returns the process exit status."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _error("usage", EXIT_USAGE, str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if getattr(args, "n", None) is not None and args.n < 2:
            raise UsageError("--n must be at least 2")
        run_dir = RunDir(args.run_dir)
        if not run_dir.file("config.toml").exists():
            run_dir.write_text("config.toml", dump_config(cfg))
        result = COMMANDS[args.command](args, cfg, run_dir)
    except UsageError as exc:
        return _error("usage", EXIT_USAGE, str(exc))
    except ConfigError as exc:
        return _error("config", EXIT_CONFIG, str(exc))
    except (RunError, OSError, ValueError, ArithmeticError, MemoryError, KeyError) as exc:
        return _error(type(exc).__name__, EXIT_RUNTIME, str(exc))
    print(json.dumps({"command": args.command, "result": result}, default=_jsonable, sort_keys=True))
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
