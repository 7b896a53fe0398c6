"""Command-line entry point.

Exit codes: 0 success, 1 failed check or aborted run, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import io as pio
from . import sr
from .errors import SolverError
from .po import po_sample
from .rng import MAX_SEED, RandomStream
from .solver import SolveConfig
from .validate import SUITES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DATA_SCHEMA_VERSION = 1


class ConfigError(Exception):
    pass


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _git_stamp():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def write_manifest(out: Path, command: str, argv, config, seed, wall_time: float) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config": None if config is None else str(Path(config).resolve()),
        "seed": seed,
        "version": __version__,
        "git": _git_stamp(),
        "out_dir": str(out.resolve()),
        "wall_time_s": round(wall_time, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read {path}: {err}") from None


def cmd_validate(args) -> int:
    checks = run_suite(args.suite, args.seed)
    passed = all(c.passed for c in checks)
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.statistic:.3e} <= {c.bound:.3e}")
    _write_json(
        args.out / "report.json",
        {"suite": args.suite, "seed": args.seed, "passed": passed, "checks": [c.to_dict() for c in checks]},
    )
    return EXIT_OK if passed else EXIT_FAIL


def cmd_sample(args) -> int:
    try:
        model = pio.load_model(args.config)
    except (KeyError, ValueError, OSError) as err:
        raise ConfigError(f"bad model config {args.config}: {err}") from None
    cfg = SolveConfig(rel_tol=args.tol)
    stream = RandomStream(args.seed)
    samples = np.empty((args.n_samples, model.n))
    iters, resid, conv = [], [], []
    status = EXIT_OK
    for s in range(args.n_samples):
        try:
            samples[s], rep = po_sample(model, stream, cfg)
        except SolverError as err:
            print(f"sample {s}: solver failure after {err.iterations} iterations: {err}", file=sys.stderr)
            samples = samples[:s]
            status = EXIT_FAIL
            break
        iters.append(rep.iterations)
        resid.append(rep.final_residual_norm)
        conv.append(int(rep.converged))
        if not rep.converged:
            status = EXIT_FAIL
    pio.write_csv(args.out / "samples.csv", samples)
    pio.write_table(
        args.out / "solve_reports.csv",
        ["sample", "iterations", "final_residual_norm", "converged"],
        [list(range(len(iters))), iters, resid, conv],
    )
    return status


def _sr_config(args, fallback: dict | None = None) -> sr.SRConfig:
    try:
        if args.config is not None:
            cfg = sr.SRConfig.from_dict(_load_json(args.config))
        elif fallback is not None:
            cfg = sr.SRConfig.from_dict(fallback)
        else:
            cfg = sr.SRConfig()
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"bad SR config: {err}") from None
    over = {}
    if getattr(args, "iters", None) is not None:
        over["n_iter"] = args.iters
    if getattr(args, "burn_in", None) is not None:
        over["burn_in"] = args.burn_in
    if getattr(args, "tol", None) is not None:
        over["solver"] = SolveConfig(**{**cfg.solver.__dict__, "rel_tol": args.tol})
    try:
        return cfg.with_overrides(**over)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def cmd_sr_sim(args) -> int:
    cfg = _sr_config(args)
    if args.truth is None:
        truth = sr.synthetic_image(cfg.hi_shape)
    else:
        try:
            truth = pio.read_image(args.truth).as_array()
        except (OSError, ValueError) as err:
            raise ConfigError(f"cannot read truth image: {err}") from None
    if truth.shape != cfg.hi_shape:
        raise ConfigError(f"truth image is {truth.shape}, config expects {cfg.hi_shape}")
    stream = RandomStream(args.seed).substream(sr.NOISE_STREAM)
    y = sr.simulate_data(cfg, truth, args.gamma_n, stream, noiseless=args.noiseless)
    frames = []
    for i, f in enumerate(sr.split_frames(cfg, y)):
        name = f"frame_{i:02d}"
        pio.write_image_csv(args.out / f"{name}.csv", f)
        pio.write_pgm(args.out / f"{name}.pgm", f)
        frames.append(f"{name}.csv")
    pio.write_image_csv(args.out / "truth.csv", truth)
    pio.write_pgm(args.out / "truth.pgm", truth)
    _write_json(
        args.out / "data.json",
        {
            "schema_version": DATA_SCHEMA_VERSION,
            "config": cfg.to_dict(),
            "frames": frames,
            "truth": "truth.csv",
            "gamma_n_true": None if args.noiseless else args.gamma_n,
            "noiseless": args.noiseless,
            "seed": args.seed,
        },
    )
    return EXIT_OK


def _load_sr_data(data_dir: Path):
    meta = _load_json(data_dir / "data.json")
    if meta.get("schema_version") != DATA_SCHEMA_VERSION:
        raise ConfigError(f"unsupported data schema_version {meta.get('schema_version')!r}")
    try:
        frames = [pio.read_image(data_dir / f).values for f in meta["frames"]]
        truth = None
        if meta.get("truth") and (data_dir / meta["truth"]).exists():
            truth = pio.read_image(data_dir / meta["truth"]).as_array()
    except (OSError, ValueError, KeyError) as err:
        raise ConfigError(f"bad data directory {data_dir}: {err}") from None
    return meta, np.concatenate(frames), truth


def _run_chain(cfg, y, stream):
    try:
        return sr.gibbs_run(cfg, y, stream), None
    except sr.GibbsAborted as err:
        return err.chain, err


def cmd_sr_run(args) -> int:
    meta, y, truth = _load_sr_data(args.data)
    cfg = _sr_config(args, fallback=meta.get("config"))
    if y.size != cfg.n_data:
        raise ConfigError(f"data has {y.size} values, config expects {cfg.n_data}")
    root = RandomStream(args.seed)
    streams = [root.substream(i) for i in range(args.chains)]
    if args.chains == 1:
        results = [_run_chain(cfg, y, streams[0])]
    else:
        with ThreadPoolExecutor(max_workers=args.chains) as pool:
            results = list(pool.map(lambda s: _run_chain(cfg, y, s), streams))
    chains = [c for c, _ in results]
    errors = [e for _, e in results if e is not None]

    pio.write_table(
        args.out / "chain.csv",
        ["chain", "iter", "gamma_n", "gamma_x", "cg_iterations"],
        [
            [i for i, c in enumerate(chains) for _ in range(c.n_iter)],
            [k for c in chains for k in range(c.n_iter)],
            np.concatenate([c.gamma_n for c in chains]),
            np.concatenate([c.gamma_x for c in chains]),
            np.concatenate([c.cg_iterations for c in chains]).astype(int).tolist(),
        ],
    )
    report = {
        "seed": args.seed,
        "config_hash": cfg.config_hash(),
        "n_chains": args.chains,
        "n_iter": cfg.n_iter,
        "burn_in": cfg.burn_in,
        "aborted": bool(errors),
        "errors": [str(e) for e in errors],
        "cg_iterations_total": int(sum(int(c.cg_iterations.sum()) for c in chains)),
    }
    if sum(c.count for c in chains) >= 2:
        stats = sr.chain_stats(chains, ci_level=args.ci_level)
        for name, img in [("posterior_mean", stats.mean), ("posterior_std", stats.std)]:
            pio.write_image_csv(args.out / f"{name}.csv", img)
            pio.write_pgm(args.out / f"{name}.pgm", img)
        pio.write_image_csv(args.out / "ci_lower.csv", stats.lower)
        pio.write_image_csv(args.out / "ci_upper.csv", stats.upper)
        for name, (counts, edges) in [("gamma_n", stats.gamma_n_hist), ("gamma_x", stats.gamma_x_hist)]:
            pio.write_table(
                args.out / f"hist_{name}.csv",
                ["bin_lo", "bin_hi", "count"],
                [edges[:-1], edges[1:], counts.astype(int).tolist()],
            )
        report.update(
            gamma_n_mean=stats.gamma_n_mean,
            gamma_x_mean=stats.gamma_x_mean,
            gamma_n_std=stats.gamma_n_std,
            gamma_x_std=stats.gamma_x_std,
            ci_level=stats.ci_level,
            n_posterior_samples=stats.n_samples,
        )
        if truth is not None:
            base = sr.zero_insertion_baseline(cfg, y)
            report.update(
                fraction_in_ci=stats.coverage(truth),
                mse_posterior_mean=float(np.mean((stats.mean - truth) ** 2)),
                mse_baseline=float(np.mean((base - truth) ** 2)),
            )
    _write_json(args.out / "report.json", report)
    for e in errors:
        print(f"chain aborted: {e}", file=sys.stderr)
    return EXIT_FAIL if errors else EXIT_OK


@contextlib.contextmanager
def _cwd(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def cmd_rerun(args) -> int:
    manifest = _load_json(args.manifest)
    argv = list(manifest.get("argv") or [])
    if not argv or argv[0] == "rerun":
        raise ConfigError("manifest does not record a rerunnable command")
    out = Path(args.out).resolve() if args.out else Path(manifest["out_dir"])
    if "--out" in argv:
        argv[argv.index("--out") + 1] = str(out)
    else:
        argv += ["--out", str(out)]
    with _cwd(manifest.get("cwd") or "."):
        return main(argv)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pofield", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"pofield {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--seed", type=_seed, default=0, help="root seed (0 to 2**64-1)")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--config", type=Path, required=config_required, help="JSON config file")

    v = sub.add_parser("validate", help="run a self-check suite")
    v.add_argument("suite", choices=SUITES + ("all",))
    common(v)
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("sample", help="draw PO samples from a JSON factor model")
    common(s, config_required=True)
    s.add_argument("--n-samples", type=int, default=1, help="number of draws")
    s.add_argument("--tol", type=float, default=1e-8, help="CG relative tolerance")
    s.set_defaults(func=cmd_sample)

    sim = sub.add_parser("sr-sim", help="simulate low-resolution frames")
    common(sim)
    sim.add_argument("--truth", type=Path, help="PGM or CSV image; a synthetic scene when omitted")
    sim.add_argument("--gamma-n", type=float, default=10.0, help="true noise precision")
    sim.add_argument("--noiseless", action="store_true", help="emit y = Hx without noise")
    sim.set_defaults(func=cmd_sr_sim)

    run = sub.add_parser("sr-run", help="run the super-resolution Gibbs sampler")
    common(run)
    run.add_argument("--data", type=Path, required=True, help="directory written by sr-sim")
    run.add_argument("--iters", type=int, help="Gibbs sweeps (overrides config)")
    run.add_argument("--burn-in", type=int, help="discarded sweeps (overrides config)")
    run.add_argument("--tol", type=float, help="CG relative tolerance (overrides config)")
    run.add_argument("--chains", type=int, default=1, help="independent chains, run in threads")
    run.add_argument("--ci-level", type=float, default=0.99, help="credible interval level")
    run.set_defaults(func=cmd_sr_run)

    r = sub.add_parser("rerun", help="re-execute the command recorded in a manifest")
    r.add_argument("manifest", type=Path)
    r.add_argument("--out", type=Path, help="output directory (default: the recorded one)")
    r.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "chains", 1) < 1 or getattr(args, "n_samples", 1) < 1:
        print("pofield: --chains and --n-samples must be positive", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "rerun":
        try:
            return cmd_rerun(args)
        except ConfigError as err:
            print(f"pofield: {err}", file=sys.stderr)
            return EXIT_USAGE
    args.out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        status = args.func(args)
    except ConfigError as err:
        print(f"pofield: {err}", file=sys.stderr)
        return EXIT_USAGE
    write_manifest(args.out, args.command, argv, args.config, args.seed, time.perf_counter() - start)
    return status


if __name__ == "__main__":
    sys.exit(main())
