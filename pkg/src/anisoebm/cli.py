"""Command-line driver: ``anisoebm {train,sample,denoise,blind,check}``.

Config files are flat ``section.key = value`` lines (``#`` comments, comma
lists), for example::

    data.kind = gsm          # gsm | field
    data.d = 100
    data.weights = 0.5, 0.5
    data.sigmas = 1, 4
    data.n = 50000
    data.seed = 1
    model.G = 2              # number of random equal coordinate groups
    model.m = 2
    model.hidden = 256
    model.depth = 5
    model.embed_offset = 0.01
    model.seed = 2
    training.steps = 20000   # any TrainingConfig field
    sampler.T = 200          # any SamplerConfig field

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 output collision.
``ANISO_THREADS`` overrides ``--threads``.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import records
from .checks import SCOPES, run_checks
from .covariance import PHI_MIN, DiagonalCovariance, GroupPartition, make_box_covariance
from .density import NormalizationRecord, blind_csv, blind_estimate, calibrate
from .energymodel import QuadraticMixtureEnergy
from .oracle import GaussianFieldPrior, GaussianScaleMixturePrior, prior_from_record
from .records import ConfigError, OutputExistsError
from .sampling import SamplerConfig, SamplerParameterError, SamplerTerminationError, posterior_sample
from .training import (DatasetSource, NonFiniteLossError, TrainingConfig, checkpoint_metadata,
                       train)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_COLLISION = 0, 2, 3, 4


# -- config helpers ----------------------------------------------------------------


def _dataclass_from(cls, section, name):
    section = dict(section or {})
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - fields
    if unknown:
        raise ConfigError(f"unknown {name} keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} settings: {exc}") from None


def random_partition(d, G, rng):
    """``G`` random groups of (nearly) equal size."""
    if G == 2:
        return GroupPartition.halves(d, rng=rng)
    if not 1 <= G <= d:
        raise ConfigError(f"need 1 <= G <= d, got G = {G}")
    parts = np.array_split(rng.permutation(d), G)
    return GroupPartition(tuple(np.sort(p) for p in parts))


def make_prior(data):
    kind = data.get("kind", "gsm")
    if kind == "gsm":
        sig = np.atleast_1d(np.asarray(data.get("sigmas", [1.0, 4.0]), dtype=float))
        w = np.atleast_1d(np.asarray(data.get("weights", np.full(sig.size, 1.0 / sig.size)), float))
        return GaussianScaleMixturePrior(w, sig**2, int(data["d"]))
    if kind == "field":
        return GaussianFieldPrior.power_law(int(data["height"]), int(data["width"]),
                                            float(data.get("amplitude", 1.0)))
    raise ConfigError(f"unknown data.kind {kind!r}")


def load_energy(path):
    """A checkpoint or an analytic prior record."""
    try:
        rec = records.read_json(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read model {path}: {exc}") from None
    try:
        if rec.get("kind") == "quadratic_mixture":
            return QuadraticMixtureEnergy.from_record(rec), rec
        return prior_from_record(rec), rec
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad model record {path}: {exc}") from None


def load_covariance(path):
    try:
        return records.covariance_from_record(records.read_json(path))[0]
    except (OSError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"cannot read covariance {path}: {exc}") from None


def _read_array(path):
    try:
        return records.read_array(path)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def _outputs(out_dir, *names):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / n for n in names]
    for p in paths:
        records.fresh_path(p)
    return paths


def normalization_for(model, rec, d, n, seed):
    """Offset for a checkpoint (calibrated at its largest trained variance) or an oracle (zero)."""
    if isinstance(model, QuadraticMixtureEnergy):
        cfg = rec.get("metadata", {}).get("config", {})
        phi_max = float(cfg.get("phi_max", 1e2))
        Sigma = DiagonalCovariance(np.full(d, phi_max), phi_max=max(phi_max, 1e3))
        return calibrate(model, Sigma, n, np.random.default_rng(seed), phi_max=phi_max)
    Sigma = DiagonalCovariance(np.full(d, 1e3))
    return NormalizationRecord(0.0, Sigma, 1, float(np.finfo(float).eps))


# -- commands ----------------------------------------------------------------------------


def cmd_train(args):
    cfg = records.load_config(args.config)
    data, mcfg = cfg.get("data", {}), cfg.get("model", {})
    tcfg = _dataclass_from(TrainingConfig, cfg.get("training"), "training")
    names = ("run.cfg",) if args.dry_run else ("checkpoint.json", "metrics.csv", "run.cfg")
    paths = _outputs(args.out, *names)
    echo_path = paths[-1]
    try:
        prior = make_prior(data)
        n = int(data.get("n", 50_000))
        data_seed = int(data.get("seed", 0))
        mrng = np.random.default_rng(int(mcfg.get("seed", 0)))
        G, m = int(mcfg.get("G", 2)), int(mcfg.get("m", 2))
        hidden, depth = int(mcfg.get("hidden", 256)), int(mcfg.get("depth", 5))
        embed_offset = float(mcfg.get("embed_offset", tcfg.phi_min))
        if n < 1 or m < 1 or hidden < 1 or depth < 1 or embed_offset <= 0:
            raise ConfigError("data.n, model.m, model.hidden and model.depth must be >= 1 "
                              "and model.embed_offset > 0")
        part = random_partition(prior.d, G, mrng)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid data/model settings: {exc}") from None

    echo = dict(cfg)
    echo["training"] = dataclasses.asdict(tcfg)
    records.write_text(echo_path, records.format_config(echo) + "\n")
    if args.dry_run:
        print(f"config valid; settings echoed to {echo_path}")
        return EXIT_OK
    ckpt_path, metrics_path = paths[0], paths[1]
    clean = prior.sample(n, np.random.default_rng(data_seed))
    model = QuadraticMixtureEnergy(part, m, hidden, depth, embed_offset, rng=mrng)

    def periodic(step, m, trace):
        records.write_json(Path(args.out) / f"checkpoint-{step}.json",
                           m.to_record(checkpoint_metadata(tcfg, step, trace)))

    result = train(model, tcfg, DatasetSource(clean), checkpoint=periodic)
    records.write_text(metrics_path, result.metrics_csv())
    records.write_json(ckpt_path, result.model.to_record(
        checkpoint_metadata(tcfg, result.steps, result.trace)))
    print(f"trained {result.steps} steps; checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_sample(args):
    model, _ = load_energy(args.model)
    y = _read_array(args.measurement)
    Sigma = load_covariance(args.covariance)
    cfg = records.load_config(args.config) if args.config else {}
    scfg = _dataclass_from(SamplerConfig, cfg.get("sampler"), "sampler")
    mask = None
    if args.mask:
        mask = _read_array(args.mask)[0] > 0.5
    names = ["samples.bin", "diagnostics.csv"] + (["trajectory.bin"] if args.trajectory else [])
    paths = _outputs(args.out, *names)
    if y.shape[1] != Sigma.d:
        raise ConfigError(f"measurement dimension {y.shape[1]} != covariance dimension {Sigma.d}")
    ys = np.repeat(y, args.chains, axis=0)
    partition = model.partition if isinstance(model, QuadraticMixtureEnergy) else None
    x, traj = posterior_sample(model, ys, Sigma, scfg, np.random.default_rng(scfg.seed), mask=mask,
                               partition=partition)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite samples")
    records.write_array(paths[0], x)
    records.write_text(paths[1], traj.diagnostics_csv())
    if args.trajectory:
        records.write_trajectory(paths[2], traj)
    print(f"wrote {x.shape[0]} samples over {len(traj.covariances) - 1} levels to {paths[0]}")
    return EXIT_OK


def cmd_denoise(args):
    model, _ = load_energy(args.model)
    y = _read_array(args.measurement)
    Sigma = load_covariance(args.covariance)
    paths = _outputs(Path(args.out).parent, Path(args.out).name)
    sweep_path = None
    if args.sweep:
        if not args.clean or not args.sweep_out:
            raise ConfigError("--sweep needs --clean and --sweep-out")
        sweep_path = _outputs(Path(args.sweep_out).parent, Path(args.sweep_out).name)[0]
    if y.shape[1] != Sigma.d:
        raise ConfigError("measurement and covariance dimensions differ")
    xhat = model.posterior_mean(y, Sigma)
    records.write_array(paths[0], xhat)
    if sweep_path is not None:
        clean = _read_array(args.clean)
        rng = np.random.default_rng(args.seed)
        rows = ["variance,mse"]
        for v in (float(s) for s in args.sweep.split(",") if s.strip()):
            S = DiagonalCovariance(np.full(clean.shape[1], v), phi_max=max(v, 1e3))
            noisy = clean + np.sqrt(v) * rng.standard_normal(clean.shape)
            mse = float(np.mean((model.posterior_mean(noisy, S) - clean) ** 2))
            rows.append(f"{v!r},{mse!r}")
        records.write_text(sweep_path, "\n".join(rows) + "\n")
    print(f"wrote posterior means to {paths[0]}")
    return EXIT_OK


def blind_candidates(grid, model):
    """Candidate covariances and their (param1, param2) labels from a grid section."""
    family = grid.get("family", "box")
    if family == "box":
        h, w = (int(v) for v in grid["dims"])
        sizes = np.atleast_1d(grid["s"])
        sig = np.atleast_1d(grid["sigma_in"])
        out = float(grid.get("sigma_out", 1e-4))
        cands, labels = [], []
        for s1 in sig:
            for s in sizes:
                cands.append(make_box_covariance(h, w, int(s), float(s1), out))
                labels.append((float(s1), float(s)))
        return cands, labels
    if family == "grouped":
        part = model.partition
        if len(part) != 2:
            raise ConfigError("grouped grids need a two-group model")
        cands, labels = [], []
        for a in np.atleast_1d(grid["t1"]):
            for b in np.atleast_1d(grid["t2"]):
                phi = part.expand(np.array([float(a), float(b)]))
                cands.append(DiagonalCovariance(phi, phi_max=max(1e3, phi.max())))
                labels.append((float(a), float(b)))
        return cands, labels
    raise ConfigError(f"unknown grid.family {family!r}")


def cmd_blind(args):
    model, rec = load_energy(args.model)
    y = _read_array(args.measurement)
    if y.shape[0] != 1:
        raise ConfigError("blind estimation takes exactly one measurement row")
    grid = records.load_config(args.grid).get("grid", {})
    try:
        cands, labels = blind_candidates(grid, model)
    except KeyError as exc:
        raise ConfigError(f"grid is missing {exc}") from None
    csv_path, report_path = _outputs(args.out, "blind.csv", "report.txt")
    norm = normalization_for(model, rec, y.shape[1], args.calib_n, args.seed)
    idx, scores = blind_estimate(model, norm, y[0], cands)
    records.write_text(csv_path, blind_csv(scores, labels))
    p1, p2 = labels[idx]
    report = (f"argmax candidate_id={idx} param1={p1!r} param2={p2!r} "
              f"log_density={float(scores[idx])!r} calibration_stderr={norm.stderr!r}\n")
    records.write_text(report_path, report)
    print(report, end="")
    return EXIT_OK


def cmd_check(args):
    scopes = [s.strip() for s in (args.scope or "").split(",") if s.strip()]
    if not scopes:
        raise ConfigError(f"give at least one scope from {', '.join(SCOPES)}")
    bad = [s for s in scopes if s not in SCOPES]
    if bad:
        raise ConfigError(f"unknown scope(s) {', '.join(bad)}; choose from {', '.join(SCOPES)}")
    results = run_checks(scopes, seed=args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# -- entry point ------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="anisoebm", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread limit (ANISO_THREADS overrides)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a quadratic-mixture energy")
    t.add_argument("config")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--dry-run", action="store_true",
                   help="validate the config and write only the run.cfg echo")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="posterior sampling")
    s.add_argument("--model", required=True, help="checkpoint or prior record (JSON)")
    s.add_argument("--measurement", required=True, help="ANISO1 file, one measurement per row")
    s.add_argument("--covariance", required=True, help="covariance record (JSON)")
    s.add_argument("--config", help="config file with a sampler section")
    s.add_argument("--mask", help="ANISO1 file with a 0/1 corrector mask row")
    s.add_argument("--chains", type=int, default=1, help="chains per measurement")
    s.add_argument("--trajectory", action="store_true", help="also write trajectory.bin")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("denoise", help="one-shot posterior mean")
    d.add_argument("--model", required=True)
    d.add_argument("--measurement", required=True)
    d.add_argument("--covariance", required=True)
    d.add_argument("--out", required=True, help="ANISO1 output file")
    d.add_argument("--clean", help="clean signals for an MSE sweep")
    d.add_argument("--sweep", help="comma list of uniform noise variances")
    d.add_argument("--sweep-out", help="CSV output of the sweep")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_denoise)

    b = sub.add_parser("blind", help="blind covariance estimation over a grid")
    b.add_argument("--model", required=True)
    b.add_argument("--measurement", required=True)
    b.add_argument("--grid", required=True, help="config file with a grid section")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--calib-n", type=int, default=10_000)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_blind)

    c = sub.add_parser("check", help="run invariant suites")
    c.add_argument("--scope", default="", help=f"comma list from {', '.join(SCOPES)}")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        threads = records.env_threads(args.threads)
        if threads is not None and threads < 1:
            raise ConfigError("--threads must be >= 1")
        with _thread_limit(threads):
            return args.func(args)
    except OutputExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COLLISION
    except (ConfigError, SamplerParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc} (step {exc.step}, batch seed {exc.batch_seed})",
              file=sys.stderr)
        return EXIT_NUMERIC
    except SamplerTerminationError as exc:
        print(f"numeric failure: {exc} after {len(exc.trajectory.covariances) - 1} levels",
              file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
