"""Command-line entry point.

Commands: sample | rates | blr | lyapunov | check-stationarity.  Each run
reads one YAML config, writes CSV/JSON artifacts plus a run manifest into the
output directory, and exits 0 on success, 2 on config errors (the message
names the offending field path), 3 on numeric failures (partial outputs are
kept), 4 on I/O errors.
"""

import argparse
import datetime
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, blr, dynamics, lyapunov, potentials, ratelab, samplers
from .errors import ConfigError, IngestionError, NumericError, UsageError

_REQUIRED = object()


def _lookup(cfg, path, typ=None, default=_REQUIRED):
    node = cfg
    walked = []
    for key in path.split("."):
        walked.append(key)
        if not isinstance(node, dict) or key not in node:
            if default is _REQUIRED:
                raise ConfigError(f"{'.'.join(walked)}: required field missing")
            return default
        node = node[key]
    if typ is not None and not isinstance(node, typ):
        if typ is float and isinstance(node, int):
            return float(node)
        raise ConfigError(f"{path}: expected {getattr(typ, '__name__', typ)}, "
                          f"got {type(node).__name__}")
    return node


def _canonical_digest(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _atomic_write(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, payload):
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


class _Manifest:
    def __init__(self, command, cfg, seed, out_dir):
        self.data = {
            "command": command,
            "config_digest": _canonical_digest(cfg),
            "seed": seed,
            "started": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "finished": None,
            "outputs": [],
            "deviations": [],
            "version": __version__,
        }
        self.out_dir = out_dir

    def add_output(self, name):
        self.data["outputs"].append(str(name))

    def add_deviation(self, note):
        self.data["deviations"].append(note)

    def finish(self):
        self.data["finished"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        _write_json(self.out_dir / "manifest.json", self.data)


def _build_potential(cfg, path="potential"):
    kind = _lookup(cfg, f"{path}.kind", str)
    dim = int(_lookup(cfg, f"{path}.dim", int))
    if kind == "gaussian":
        return potentials.standard_gaussian(dim)
    if kind == "double_well":
        return potentials.double_well(dim)
    raise ConfigError(f"{path}.kind: unknown potential {kind!r}")


def _variant_params(cfg, variant, dim, seed):
    params = dict(_lookup(cfg, "params", dict, default={}) or {})
    mirror = None
    if variant == "nonreversible" and "J" not in params:
        j_seed = int(params.pop("j_seed", seed))
        j_scale = float(params.pop("j_scale", 1.0))
        params["J"] = dynamics.random_antisymmetric(dim, seed=j_seed, scale=j_scale)
    if variant == "mirror":
        eps = float(params.pop("mirror_eps", 0.5))
        mirror = potentials.make_quartic_mirror(dim, eps)
    return params, mirror


# ---------------------------------------------------------------------------
# commands


def cmd_sample(cfg, out_dir, seed, threads):
    variant = _lookup(cfg, "variant", str)
    pot = _build_potential(cfg)
    params, mirror = _variant_params(cfg, variant, pot.dim, seed)
    spec = dynamics.build_variant_spec(variant, pot, params, mirror=mirror)
    config = samplers.IntegratorConfig(
        eta=float(_lookup(cfg, "integrator.eta", float)),
        n_steps=int(_lookup(cfg, "integrator.n_steps", int)),
        burn_in=int(_lookup(cfg, "integrator.burn_in", int, default=0)),
        thinning=int(_lookup(cfg, "integrator.thinning", int, default=1)),
        n_chains=int(_lookup(cfg, "integrator.n_chains", int, default=1)),
        seed=seed,
        hist_bins=int(_lookup(cfg, "integrator.hist_bins", int, default=64)),
        hist_range=tuple(_lookup(cfg, "integrator.hist_range", list, default=[-10.0, 10.0])),
        threads=threads,
    )
    init_cfg = _lookup(cfg, "init", default="zeros")
    init = np.zeros(spec.n) if init_cfg == "zeros" else np.asarray(init_cfg, dtype=float)
    spill = None
    if _lookup(cfg, "write_trajectories", default=False):
        spill = out_dir / "chains"
        spill.mkdir(exist_ok=True)
    manifest = _Manifest("sample", cfg, seed, out_dir)
    result = samplers.run_ensemble(spec, config, init, spill_dir=spill)
    payload = samplers.summary_to_dict(result.summary)
    payload["failures"] = result.failures
    payload["variant"] = variant
    _write_json(out_dir / "summary.json", payload)
    manifest.add_output("summary.json")
    if spill is not None:
        for p in sorted(spill.glob("chain_*.csv")):
            manifest.add_output(f"chains/{p.name}")
    manifest.finish()
    if result.failures:
        raise NumericError(
            f"{len(result.failures)} chain(s) diverged: "
            + ", ".join(str(f["chain"]) for f in result.failures)
        )
    return 0


def cmd_rates(cfg, out_dir, seed, threads):
    variant = _lookup(cfg, "variant", str)
    pot = _build_potential(cfg)
    params, mirror = _variant_params(cfg, variant, pot.dim, seed)
    if variant == "mirror" and _lookup(cfg, "params.dominating", default=False):
        mirror = potentials.make_dominating_mirror(pot.dim)
    spec = dynamics.build_variant_spec(variant, pot, params, mirror=mirror)
    bounds = _lookup(cfg, "grid.bounds", list)
    points = _lookup(cfg, "grid.points", list)
    grid = ratelab.GridDomain(tuple(tuple(b) for b in bounds), tuple(points))
    count = int(_lookup(cfg, "family.count", int, default=20))
    amplitude = float(_lookup(cfg, "family.amplitude", float, default=0.5))
    fam_seed = int(_lookup(cfg, "family.seed", int, default=seed))
    restrict = None
    even = False
    if variant in ("underdamped", "highorder"):
        restrict = (grid.dims - 1,)
        even = True
    family = [
        ratelab.random_smooth_perturbation(grid, seed=fam_seed + i, amplitude=amplitude,
                                           restrict_to=restrict, even=even)
        for i in range(count)
    ]
    report = ratelab.compare_rates(
        family, variant, spec, grid,
        epsilon=float(_lookup(cfg, "epsilon", float, default=1e-4)),
        check_theta_contraction=bool(_lookup(cfg, "check_theta_contraction",
                                             default=(variant == "hfhr"))),
    )
    manifest = _Manifest("rates", cfg, seed, out_dir)
    _write_json(out_dir / "report.json", report.to_dict())
    manifest.add_output("report.json")
    report.save_csv(out_dir / "report.csv")
    manifest.add_output("report.csv")
    manifest.finish()
    return 0


def cmd_blr(cfg, out_dir, seed, threads):
    source = _lookup(cfg, "data.source", str)
    if source == "synthetic":
        syn = blr.SyntheticConfig(
            n=int(_lookup(cfg, "data.n", int, default=5000)),
            d=int(_lookup(cfg, "data.d", int, default=30)),
            feature_scale=float(_lookup(cfg, "data.feature_scale", float, default=10.0)),
            prior_scale=float(_lookup(cfg, "data.prior_scale", float, default=10.0)),
            seed=int(_lookup(cfg, "data.data_seed", int, default=seed)),
        )
        data, _ = blr.gen_synthetic(syn)
    elif source == "wdbc":
        path = _lookup(cfg, "data.path", str)
        data = blr.load_wdbc(path)
    else:
        raise ConfigError(f"data.source: expected synthetic or wdbc, got {source!r}")

    exp = blr.ExperimentConfig(
        variant=_lookup(cfg, "experiment.variant", str),
        eta=float(_lookup(cfg, "experiment.eta", float)),
        n_steps=int(_lookup(cfg, "experiment.n_steps", int)),
        eval_every=int(_lookup(cfg, "experiment.eval_every", int)),
        hyperparams=dict(_lookup(cfg, "experiment.hyperparams", dict, default={}) or {}),
        prediction_rule=_lookup(cfg, "experiment.prediction_rule", str,
                                default="current-iterate"),
        lam=float(_lookup(cfg, "experiment.lam", float, default=10.0)),
        train_fraction=float(_lookup(cfg, "experiment.train_fraction", float, default=0.8)),
        split_seed=int(_lookup(cfg, "experiment.split_seed", int, default=seed)),
        seed=seed,
        standardize=bool(_lookup(cfg, "experiment.standardize", default=True)),
        mirror_eps=float(_lookup(cfg, "experiment.mirror_eps", float, default=0.25)),
    )
    manifest = _Manifest("blr", cfg, seed, out_dir)
    traj = blr.run_experiment(exp, data)
    traj.save_csv(out_dir / "accuracy.csv")
    manifest.add_output("accuracy.csv")
    traj.save_metadata(out_dir / "metadata.json")
    manifest.add_output("metadata.json")
    for note in traj.meta["deviations"]:
        manifest.add_deviation(note)
    manifest.finish()
    if traj.failed:
        raise NumericError(f"sampler diverged at step {traj.failure_step}")
    return 0


def cmd_lyapunov(cfg, out_dir, seed, threads):
    kind = _lookup(cfg, "kind", str)
    pot = _build_potential(cfg)
    params = dict(_lookup(cfg, "params", dict, default={}) or {})
    dyn_params = dict(_lookup(cfg, "dynamics_params", dict, default={}) or {})
    lyap = lyapunov.build_lyapunov(kind, pot, params,
                                   allow_unchecked=bool(_lookup(cfg, "allow_unchecked",
                                                                default=False)))
    variant = _lookup(cfg, "dynamics_variant", str,
                      default={"hfhr": "hfhr", "highorder": "highorder",
                               "gibbs-power": "overdamped"}[kind])
    mirror = None
    if variant == "mirror":
        mirror = potentials.make_quartic_mirror(pot.dim,
                                                float(dyn_params.pop("mirror_eps", 0.5)))
    spec = dynamics.build_variant_spec(variant, pot, dyn_params, mirror=mirror)
    bounds = _lookup(cfg, "grid.bounds", list)
    points = _lookup(cfg, "grid.points", list)
    grid = ratelab.GridDomain(tuple(tuple(b) for b in bounds), tuple(points))
    constants = _lookup(cfg, "constants", dict, default=None)
    report = lyapunov.verify_quadratic_bound(
        spec, lyap, grid, constants=constants,
        dc_max=float(_lookup(cfg, "dc_max", float, default=10.0)),
        coef_floor=float(_lookup(cfg, "coef_floor", float, default=1e-3)),
    )
    manifest = _Manifest("lyapunov", cfg, seed, out_dir)
    _write_json(out_dir / "bound_report.json", report.to_dict())
    manifest.add_output("bound_report.json")
    manifest.finish()
    return 0


_STATIONARITY_DEFAULTS = [
    {"variant": "overdamped", "dim": 1, "params": {}},
    {"variant": "underdamped", "dim": 1, "params": {"gamma": 4.0}},
    {"variant": "nonreversible", "dim": 2, "params": {"j_seed": 3}},
    {"variant": "mirror", "dim": 1, "params": {"mirror_eps": 1.0}},
    {"variant": "highorder", "dim": 1, "params": {"gamma": 3.0, "alpha": 2.0}},
    {"variant": "hfhr", "dim": 1, "params": {"beta": 1.0, "alpha": 2.0}},
]


def cmd_check_stationarity(cfg, out_dir, seed, threads):
    entries = _lookup(cfg, "variants", default="all")
    if entries == "all":
        entries = _STATIONARITY_DEFAULTS
    fd_step = float(_lookup(cfg, "fd_step", float, default=1e-3))
    tol = float(_lookup(cfg, "tolerance", float, default=1e-4))
    count = int(_lookup(cfg, "cloud.count", int, default=50))
    box = float(_lookup(cfg, "cloud.box", float, default=3.0))
    cloud_seed = int(_lookup(cfg, "cloud.seed", int, default=seed))
    run_control = bool(_lookup(cfg, "negative_control", default=True))

    results = []
    worst = 0.0
    for entry in entries:
        variant = entry["variant"]
        dim = int(entry.get("dim", 1))
        pot = potentials.standard_gaussian(dim)
        params = dict(entry.get("params", {}))
        mirror = None
        if variant == "nonreversible" and "J" not in params:
            params["J"] = dynamics.random_antisymmetric(
                dim, seed=int(params.pop("j_seed", 3)))
        if variant == "mirror":
            mirror = potentials.make_quartic_mirror(
                dim, float(params.pop("mirror_eps", 1.0)))
        spec = dynamics.build_variant_spec(variant, pot, params, mirror=mirror)
        rng = np.random.Generator(np.random.Philox(key=[cloud_seed, 0x57]))
        cloud = rng.uniform(-box, box, size=(count, spec.n))
        res = max(abs(dynamics.stationarity_residual(spec, z, fd_step)) for z in cloud)
        row = {"variant": variant, "dim": dim, "max_residual": res,
               "pass": bool(res <= tol)}
        if run_control:
            bad = dynamics.corrupt_drift(spec)
            row["corrupted_max_residual"] = max(
                abs(dynamics.stationarity_residual(bad, z, fd_step)) for z in cloud)
            row["control_pass"] = bool(row["corrupted_max_residual"] > 1e-1)
        results.append(row)
        worst = max(worst, res)

    manifest = _Manifest("check-stationarity", cfg, seed, out_dir)
    payload = {"fd_step": fd_step, "tolerance": tol, "results": results,
               "max_residual": worst,
               "all_pass": all(r["pass"] for r in results)
               and all(r.get("control_pass", True) for r in results)}
    _write_json(out_dir / "stationarity.json", payload)
    manifest.add_output("stationarity.json")
    manifest.finish()
    return 0


_COMMANDS = {
    "sample": cmd_sample,
    "rates": cmd_rates,
    "blr": cmd_blr,
    "lyapunov": cmd_lyapunov,
    "check-stationarity": cmd_check_stationarity,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="langevinlab",
                                     description="Langevin sampling toolkit")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="YAML config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out-dir", default=None,
                        help="output directory (default: env LANGEVINLAB_OUT_DIR or cwd)")
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)

    try:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise IngestionError(f"cannot read config: {exc}") from exc
        try:
            cfg = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config parse error: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config root must be a mapping")

        out_dir = Path(args.out_dir or os.environ.get("LANGEVINLAB_OUT_DIR", "."))
        out_dir.mkdir(parents=True, exist_ok=True)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        return _COMMANDS[args.command](cfg, out_dir, seed, max(1, args.threads))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (OSError, IngestionError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
