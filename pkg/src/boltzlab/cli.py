"""Command-line entry point: ``boltzlab <command> [options]``.

Commands write into ``--out`` (default: the config's output_dir) and always
leave a ``<command>_resolved.ini`` there; running again from that file gives
byte-identical outputs.  Exit codes: 0 success, 1 usage or config error,
2 numerical abort (the last good checkpoint is saved).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import pitfalls
from .config import ConfigError, ExperimentConfig
from .flow import CheckpointFormatError, FlowModel, load_checkpoint, save_checkpoint
from .sampler import Dataset, make_rng, pt_run, read_dataset, write_dataset
from .targets import GaussianTarget
from .trainer import NumericalAbort, evaluate, finetune, pretrain, training_target, write_metrics

logger = logging.getLogger("boltzlab")

PITFALL_MODES = ("flow-ode", "naive-kl", "normalized-kl", "stabilizer")


class UsageError(Exception):
    pass


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _dataset_path(cfg: ExperimentConfig, out: Path) -> Path:
    p = cfg["sampler"]["dataset"]
    if p is not None:
        return Path(p)
    ext = "bin" if cfg["sampler"]["format"] == "binary" else "txt"
    return out / f"dataset.{ext}"


# -- commands --------------------------------------------------------------------


def cmd_sample_data(cfg: ExperimentConfig, out: Path, args) -> int:
    target = cfg.target()
    pt = cfg.pt_config(target)
    target_id = getattr(target, "target_id", type(target).__name__)
    res = pt_run(pt, target.energy, target.dim)
    ds = Dataset(res.samples, target_id=target_id, config_hash=pt.config_hash(target_id),
                 seed=cfg.seed)
    path = _dataset_path(cfg, out)
    write_dataset(ds, path, cfg["sampler"]["format"])
    report = {"dataset": str(path), "count": ds.count, "dim": ds.dim, **res.report()}
    if hasattr(target, "in_minor_mode"):
        report["minor_mode_fraction"] = float(np.mean(target.in_minor_mode(res.samples)))
        report["minor_mode_ratio_quadrature"] = target.minor_mode_ratio()
    (out / "sampling_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"wrote {ds.count} samples to {path}")
    return 0


def _abort(e: NumericalAbort, out: Path, phase: str) -> int:
    save_checkpoint(e.checkpoint, out / f"{phase}_abort.ckpt")
    (out / f"{phase}_abort_dump.json").write_text(json.dumps(e.dump) + "\n")
    print(f"numerical abort: {e}; last good checkpoint in {out / f'{phase}_abort.ckpt'}",
          file=sys.stderr)
    return 2


def cmd_pretrain(cfg: ExperimentConfig, out: Path, args) -> int:
    target = cfg.target()
    path = _dataset_path(cfg, out)
    if not path.exists():
        raise UsageError(f"dataset {path} not found; run sample-data first")
    try:
        ds = read_dataset(path)
    except (ValueError, KeyError) as e:
        raise UsageError(f"cannot read dataset {path}: {e}") from e
    if ds.dim != target.dim:
        raise UsageError(f"dataset dim {ds.dim} does not match target dim {target.dim}")
    if args.checkpoint:
        model = _load(args.checkpoint)
    else:
        model = cfg.build_model(make_rng(cfg.seed))
    if model.dim != ds.dim:
        raise UsageError(f"dataset dim {ds.dim} does not match model dim {model.dim}")
    try:
        res = pretrain(model, ds.x, cfg.train_config("pretrain"), target)
    except NumericalAbort as e:
        return _abort(e, out, "pretrain")
    save_checkpoint(res.model, out / "pretrain.ckpt")
    write_metrics(res.metrics, out / "pretrain_metrics.jsonl")
    print(f"pretrained {len(res.metrics)} records; checkpoint {out / 'pretrain.ckpt'}")
    return 0


def cmd_finetune(cfg: ExperimentConfig, out: Path, args) -> int:
    target = cfg.target()
    if args.checkpoint:
        model = _load(args.checkpoint)
    elif cfg["finetune"]["from_scratch"]:
        model = cfg.build_model(make_rng(cfg.seed))
    else:
        raise UsageError("finetune needs --checkpoint (or from_scratch = true)")
    if model.dim != target.dim:
        raise UsageError(f"checkpoint dim {model.dim} does not match target dim {target.dim}")
    try:
        res = finetune(model, cfg.train_config("finetune"), target)
    except NumericalAbort as e:
        return _abort(e, out, "finetune")
    save_checkpoint(res.model, out / "finetune.ckpt")
    write_metrics(res.metrics, out / "finetune_metrics.jsonl")
    print(f"fine-tuned {len(res.metrics)} records; checkpoint {out / 'finetune.ckpt'}")
    return 0


def _load(path) -> FlowModel:
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _histogram(values, edges):
    """Density histogram; values beyond the edges land in the outer bins."""
    v = np.clip(values, edges[0], edges[-1])
    dens, _ = np.histogram(v, bins=edges, density=True)
    return dens


def cmd_eval(cfg: ExperimentConfig, out: Path, args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    n = cfg["eval"]["n"] if args.n is None else args.n
    if n < 1000:
        raise UsageError(f"eval needs n >= 1000, got {n}")
    model = _load(args.checkpoint)
    target = cfg.target()
    if model.dim != target.dim:
        raise UsageError(f"checkpoint dim {model.dim} does not match target dim {target.dim}")
    rng = make_rng(cfg.seed)
    z = model.base.sample(rng, n)
    tc = cfg.train_config("finetune")
    eval_target = training_target(target, tc)
    rec = evaluate(model, eval_target, z=z, mode_threshold=tc.mode_threshold)
    x, _ = model.generate(z)
    u = eval_target.energy(x)
    bins = cfg["eval"]["bins"]

    edges = np.linspace(x[:, 0].min(), x[:, 0].max(), bins + 1)
    h = _histogram(x[:, 0], edges)
    write_csv(out / "hist_x1.csv", ["bin_lo", "bin_hi", "density"],
              zip(edges[:-1], edges[1:], h))

    report = {"metrics": {k: v for k, v in rec.__dict__.items()}, "n": n}
    path = _dataset_path(cfg, out)
    ref = read_dataset(path).x if path.exists() else None
    if ref is not None and ref.shape[1] == model.dim:
        u_ref = eval_target.energy(ref)
        lo, hi = np.quantile(u_ref, [0.001, 0.999])
        edges = np.linspace(lo, hi, bins + 1)
        hm, hd = _histogram(u, edges), _histogram(u_ref, edges)
        overlap = float(np.sum(np.minimum(hm, hd)) * (edges[1] - edges[0]))
        report["energy_overlap"] = overlap
        report["dataset_mean_UB"] = float(u_ref.mean())
        report["dataset_std_UB"] = float(u_ref.std())
        write_csv(out / "hist_energy.csv", ["bin_lo", "bin_hi", "model_density", "dataset_density"],
                  zip(edges[:-1], edges[1:], hm, hd))
    else:
        edges = np.linspace(np.quantile(u, 0.001), np.quantile(u, 0.999), bins + 1)
        write_csv(out / "hist_energy.csv", ["bin_lo", "bin_hi", "model_density"],
                  zip(edges[:-1], edges[1:], _histogram(u, edges)))
    (out / "eval_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report["metrics"]))
    return 0


def cmd_pitfall_demo(cfg: ExperimentConfig, out: Path, args) -> int:
    mode = args.mode
    if mode not in PITFALL_MODES:
        raise UsageError(f"unknown mode {mode!r}; choose from {', '.join(PITFALL_MODES)}")
    pc = cfg["pitfall"]
    rng = make_rng(cfg.seed)
    if mode == "flow-ode":
        m = pc["grid_points"]
        grid = np.linspace(-4.0, 4.0, m)
        dx = grid[1] - grid[0]
        p = rng.random(m)
        p /= p.sum() * dx
        dens = pitfalls.GridDensity(grid, rng.uniform(0.5, 1.5, m), p)
        qT = pitfalls.unconstrained_kl_flow(dens, pc["T"], pc["dt"])
        exact = pitfalls.unconstrained_kl_closed_form(dens, pc["T"])
        rel = np.abs(qT - exact) / exact
        write_csv(out / "flow_ode.csv", ["x", "q0", "qT", "closed_form", "rel_err"],
                  zip(grid, dens.q, qT, exact, rel))
        print(f"max rel_err {rel.max():.3e}")
    elif mode == "naive-kl":
        rows = naive_kl_trace(rng, pc["batch"], pc["steps"], pc["learning_rate"])
        write_csv(out / "naive_kl.csv", ["step", "minibatch_mass", "naive_kl", "normalized_kl"], rows)
        print(f"minibatch mass {rows[0][1]:.4g} -> {rows[-1][1]:.4g}")
    elif mode == "normalized-kl":
        rows = []
        n = pc["batch"]
        for i in range(pc["trials"]):
            lb, lg = np.log(rng.random(n)), np.log(rng.random(n))
            rows.append((i, "random", pitfalls.normalized_minibatch_kl(lb, lg)))
        for i in range(pc["trials"] // 100):
            lb = np.log(rng.random(n))
            rows.append((i, "proportional", pitfalls.normalized_minibatch_kl(lb, lb + rng.normal())))
        write_csv(out / "normalized_kl.csv", ["trial", "weights", "value"], rows)
        print(f"min value {min(r[2] for r in rows):.3e}")
    else:
        cat = pitfalls.CategoricalModel(rng.normal(size=pc["states"]))
        dq = cat.dq_dtheta()
        f = rng.normal(size=pc["states"])
        n = pc["minibatch"]
        K = pitfalls.ControlVariate.exact(dq, f).K_star
        _, naive_var = pitfalls.estimator_moments(dq, f, n)
        _, stab_var = pitfalls.estimator_moments(dq, f, n, K)
        pred = pitfalls.variance_reduction_formula(dq, f, n)
        write_csv(out / "stabilizer.csv",
                  ["coordinate", "naive_var", "stabilized_var", "reduction", "predicted_reduction"],
                  zip(range(len(K)), naive_var, stab_var, naive_var - stab_var, pred))
        print(f"variance reduced on {int(np.sum(stab_var <= naive_var))}/{len(K)} coordinates")
    return 0


def naive_kl_trace(rng, batch, steps, lr):
    """Repeated plain gradient steps on one fixed minibatch under the
    unnormalized minibatch KL; returns (step, sum_i p_G(x_i), naive, normalized)."""
    target = GaussianTarget(dim=2, sigma=1.0)
    model = FlowModel(2, block_count=2, hidden=8, rng=rng).randomize(rng, 0.3)
    x = target.sigma * rng.standard_normal((batch, 2))
    log_pB = -target.energy(x)
    rows = []
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps + 1):
            try:
                lg = model.log_prob(x)
                row = (step, float(np.exp(lg).sum()), pitfalls.naive_minibatch_kl(log_pB, lg),
                       pitfalls.normalized_minibatch_kl(log_pB, lg))
                if not np.all(np.isfinite(row)):
                    raise ad.NonFiniteError("non-finite trace value")
            except ad.NonFiniteError:
                # the unbounded mass growth is the point of the demo; stop the trace there
                logger.warning("naive-kl trace diverged at step %d", step)
                break
            rows.append(row)
            if step < steps:
                tape = ad.Tape()
                grads = pitfalls.naive_minibatch_kl_grad(x, log_pB, model, tape.leaves(model.params))
                model.params = [p - lr * g for p, g in zip(model.params, grads)]
    return rows


COMMANDS = {
    "sample-data": cmd_sample_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "pitfall-demo": cmd_pitfall_demo,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boltzlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config file (defaults if omitted)")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--seed", type=int, help="overrides experiment.seed")
        if name in ("pretrain", "finetune", "eval"):
            p.add_argument("--checkpoint", help="input checkpoint")
        if name == "eval":
            p.add_argument("--n", type=int, help="number of generated samples")
        if name == "pitfall-demo":
            p.add_argument("--mode", required=True, help=" | ".join(PITFALL_MODES))
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.defaults()
        if args.seed is not None:
            cfg.values["experiment"]["seed"] = args.seed
        out = Path(args.out or cfg["experiment"]["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        cfg.values["experiment"]["output_dir"] = str(out)
        cfg.write_resolved(out / f"{args.command.replace('-', '_')}_resolved.ini")
        return COMMANDS[args.command](cfg, out, args)
    except (ConfigError, UsageError, CheckpointFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
