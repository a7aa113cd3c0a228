"""Command-line entry point: ``manifold-lab <command> [options]``.

Exit status is 0 on success, 2 when a sweep has censored points and 1 on
any error.  Every CSV written carries a ``# config-hash:`` line.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import lab
from .attacks import AttackConfig, robust_accuracy
from .distribution import ManifoldSpec, read_dataset_csv, sample, write_dataset_csv
from .models import load_params, save_params
from .objective import PopulationProxy
from .optimizers import OptimizerConfig, StepPolicy, estimate_optimum, powers_of_two, train

EXIT_OK, EXIT_ERROR, EXIT_CENSORED = 0, 1, 2

log = logging.getLogger("manifold_lab")

def _spec_from(data: dict | None) -> ManifoldSpec:
    if not data:
        return ManifoldSpec.default()
    if "sigma_off" in data:
        return ManifoldSpec.from_dict(data)
    return ManifoldSpec.default(**data)

def _floats(text: str | None):
    return None if text is None else [float(v) for v in text.split(",") if v.strip()]

def _hash_line(config: dict) -> str:
    return f"config-hash: {lab.config_hash(config)}"

def _load(args) -> dict:
    return json.loads(Path(args.config).read_text()) if args.config else {}

def _seed(args, conf: dict) -> int:
    return int(args.seed if args.seed is not None else conf.get("seed", 0))

# -- commands -------------------------------------------------------------

def cmd_sample(args, conf, out: Path) -> int:
    spec = _spec_from(conf.get("spec"))
    seed = _seed(args, conf)
    n = int(args.n or conf.get("n", 1000))
    config = {"command": "sample", "spec": spec.to_dict(), "seed": seed, "n": n}
    ds = sample(spec, n, seed)
    write_dataset_csv(ds, out / "dataset.csv", [_hash_line(config), "config: " + json.dumps(config, sort_keys=True)])
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    print(f"wrote {n} samples to {out / 'dataset.csv'}")
    return EXIT_OK

def _optimizer_from(spec, conf: dict, args) -> OptimizerConfig:
    data = dict(conf.get("optimizer", {}))
    method = args.method or data.pop("method", "gd")
    data.pop("method", None)
    if "policy" in data and isinstance(data["policy"], dict):
        data["policy"] = StepPolicy(**data["policy"])
    if args.max_iter is not None:
        data["max_iter"] = args.max_iter
    if args.radius is not None:
        data["radius"] = args.radius
    return OptimizerConfig.for_spec(spec, method, **data)

def cmd_train(args, conf, out: Path) -> int:
    spec = _spec_from(conf.get("spec"))
    seed = _seed(args, conf)
    proxy_size = int(args.proxy_size or conf.get("proxy_size", 20_000))
    opt = _optimizer_from(spec, conf, args)
    proxy = PopulationProxy.build(spec, proxy_size, seed)
    star = estimate_optimum(spec, proxy, radius=opt.radius)
    eps = _floats(args.epsilons) or conf.get("epsilons", [])
    config = {"command": "train", "spec": spec.to_dict(), "seed": seed, "proxy_size": proxy_size,
              "optimizer": opt.to_dict(), "epsilons": eps}
    test = sample(spec, int(conf.get("test_size", 2000)), seed + 1) if eps else None

    def cb(t, params, traj):
        for e in eps:
            rep = robust_accuracy(params, test, AttackConfig(e, seed=seed))
            traj.robust.setdefault(e, []).append(rep.robust_accuracy)

    traj = train(spec, proxy, opt, theta_star=star, record=powers_of_two(opt.max_iter), callback=cb,
                 keep_params=True)
    traj.to_csv(out / "trajectory.csv", header=_hash_line(config))
    save_params(out / "params.csv", traj.params[-1], spec, [_hash_line(config)])
    print(f"{opt.method}: {traj.t[-1]} iterations, loss {traj.loss[-1]:.6g}, stop {traj.stop_reason}")
    return EXIT_OK

def cmd_attack(args, conf, out: Path) -> int:
    spec = _spec_from(conf.get("spec"))
    seed = _seed(args, conf)
    model = load_params(args.model)
    data = read_dataset_csv(args.data, spec, seed)
    a = dict(conf.get("attack", {}))
    eps_list = _floats(args.epsilons) or a.pop("epsilons", None) or [a.pop("epsilon", 0.0)]
    a.pop("epsilon", None)
    a.pop("epsilons", None)
    rows = []
    for e in sorted(eps_list):
        acfg = AttackConfig(e, seed=seed, **a)
        rep = robust_accuracy(model, data, acfg)
        rows.append({"epsilon": e, "clean_accuracy": rep.clean_accuracy,
                     "robust_accuracy": rep.robust_accuracy, "mean_l1_margin": rep.mean_l1_margin})
    config = {"command": "attack", "spec": spec.to_dict(), "seed": seed, "attack": a,
              "epsilons": sorted(eps_list), "model": Path(args.model).name, "data": Path(args.data).name}
    lab.write_table(out / "attack.csv", ("epsilon", "clean_accuracy", "robust_accuracy", "mean_l1_margin"),
                    rows, config)
    for r in rows:
        print(f"eps={r['epsilon']:g}: clean {r['clean_accuracy']:.4f} robust {r['robust_accuracy']:.4f}")
    return EXIT_OK

def _sweep_from(conf: dict, args, **defaults) -> lab.SweepConfig:
    data = dict(defaults)
    data.update(conf.get("sweep", {}))
    if "spec" in conf and "base" not in conf.get("sweep", {}):
        data["base"] = conf["spec"]
    if args.seed is not None:
        data["seeds"] = [args.seed + i for i in range(int(data.get("repetitions", 1)))]
    return lab.SweepConfig.from_dict(data)

def cmd_sweep_rate(args, conf, out: Path) -> int:
    ratios = _floats(args.ratios)
    cfg = _sweep_from(conf, args, ratios=ratios or [2, 4, 8, 16])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", lab.CensoredWarning)
        res = lab.run_convergence_sweep(cfg, threads=args.threads)
        res.to_csv(out / "sweep_rate.csv")
        for r in res.rows:
            print(f"ratio {r.sigma_ratio:g}: T_on={r.t_on} T_off={r.t_off}")
        try:
            f = res.fit_off()
            print(f"T_off slope {f.slope:.3f} (r^2 {f.r_squared:.3f})")
        except ValueError as exc:
            print(f"no fit: {exc}")
    for w in caught:
        log.warning("%s", w.message)
    return EXIT_CENSORED if res.censored else EXIT_OK

def cmd_threshold(args, conf, out: Path) -> int:
    ks = _floats(args.k) or conf.get("k_values", [0.25, 0.5, 1.0])
    cfg = _sweep_from(conf, args, base=ManifoldSpec.default(sigma_ratio=8).to_dict(), variable="k",
                      values=sorted(ks), radius_scale=None, max_iter=int(args.max_iter or 20_000))
    rows = []
    censored = False
    for k in cfg.values:
        rep = lab.run_loss_threshold(cfg, k)
        rows.append(rep.to_dict())
        censored |= rep.k > 0 and rep.t_below is None
        print(f"k={k:g}: restricted min {rep.restricted_min:.4f} vs nu ln2 {rep.floor:.4f}; "
              f"t_above={rep.t_above} t_below={rep.t_below}")
    cols = ("k", "nu", "floor", "restricted_min", "t_above", "t_below", "ratio", "final_loss", "iterations")
    lab.write_table(out / "threshold.csv", cols, rows, cfg.to_dict())
    return EXIT_CENSORED if censored else EXIT_OK

def cmd_robustness_curve(args, conf, out: Path) -> int:
    base = _spec_from(conf["spec"]) if "spec" in conf else ManifoldSpec.default(sigma_ratio=8)
    eps = _floats(args.epsilons) or [0.0, base.off_gap() / 2]
    methods = args.methods.split(",") if args.methods else ["gd", "newton"]
    max_iter = int(args.max_iter or 10_000)
    cfg = _sweep_from(conf, args, base=base.to_dict(), variable="epsilon", values=sorted(eps),
                      methods=methods, radius_scale=None, checkpoints=[50, 100])
    iters = {m: (max_iter if m in ("gd", "agd") else min(max_iter, 256)) for m in cfg.methods}
    curve = lab.run_robustness_curve(cfg, iters, threads=args.threads)
    curve.to_csv(out / "robustness_curve.csv")
    print(lab.report([out / "robustness_curve.csv"]))
    return EXIT_OK

def cmd_boundary(args, conf, out: Path) -> int:
    spec = _spec_from(conf.get("spec"))
    model = load_params(args.model)
    res = int(args.resolution or conf.get("resolution", 101))
    lab.export_boundary_grid(model, spec, res, out / "boundary.csv",
                             config={"command": "boundary", "model": Path(args.model).name})
    print(f"wrote {res}x{res} grid to {out / 'boundary.csv'}")
    return EXIT_OK

def cmd_report(args, conf, out: Path) -> int:
    paths = [Path(p) for p in args.paths] if args.paths else sorted(out.glob("*.csv"))
    if not paths:
        raise FileNotFoundError("no CSV files to summarise")
    text = lab.report(paths)
    print(text)
    (out / "report.txt").write_text(text + "\n")
    return EXIT_OK

COMMANDS = {
    "sample": cmd_sample,
    "train": cmd_train,
    "attack": cmd_attack,
    "sweep-rate": cmd_sweep_rate,
    "threshold": cmd_threshold,
    "robustness-curve": cmd_robustness_curve,
    "boundary": cmd_boundary,
    "report": cmd_report,
}

def _global_flags(parser, defaults: dict):
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--threads", type=int, help="parallel workers for sweeps")
    parser.set_defaults(**defaults)
    return parser

def build_parser() -> argparse.ArgumentParser:
    top = _global_flags(argparse.ArgumentParser(add_help=False), {"out": ".", "threads": 1})
    # subcommand copies must not reset flags given before the subcommand
    common = _global_flags(argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS), {})
    p = argparse.ArgumentParser(prog="manifold-lab", parents=[top],
                                description="Low-dimensional manifold classification experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", parents=[common], help="draw a dataset")
    s.add_argument("--n", type=int)

    s = sub.add_parser("train", parents=[common], help="train one model and write its trajectory")
    s.add_argument("--method", choices=["gd", "agd", "newton", "precond-diag", "precond-kfac"])
    s.add_argument("--max-iter", type=int)
    s.add_argument("--radius", type=float)
    s.add_argument("--proxy-size", type=int)
    s.add_argument("--epsilons", help="comma-separated attack budgets evaluated while training")

    s = sub.add_parser("attack", parents=[common], help="PGD robustness of a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--epsilons")

    s = sub.add_parser("sweep-rate", parents=[common], help="iterations to tolerance vs sigma ratio")
    s.add_argument("--ratios", help="comma-separated sigma_on / sigma_off values")

    s = sub.add_parser("threshold", parents=[common], help="loss threshold runs over k")
    s.add_argument("--k", help="comma-separated k values")
    s.add_argument("--max-iter", type=int)

    s = sub.add_parser("robustness-curve", parents=[common], help="robust accuracy over training")
    s.add_argument("--epsilons")
    s.add_argument("--methods", help="comma-separated optimizer names")
    s.add_argument("--max-iter", type=int)

    s = sub.add_parser("boundary", parents=[common], help="decision-boundary grid of a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--resolution", type=int)

    s = sub.add_parser("report", parents=[common], help="summarise CSVs")
    s.add_argument("paths", nargs="*")
    return p

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ValueError("--seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        conf = _load(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, conf, out)
    except Exception as exc:  # noqa: BLE001 - report any failure as exit status 1
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

if __name__ == "__main__":
    sys.exit(main())
