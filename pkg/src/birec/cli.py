"""Single-binary command line front end.

Subcommands: generate-cohort, fit-prior, reconstruct, evaluate, ablate.
Exit codes: 0 success, 2 usage errors (bad flags, violated preconditions),
1 data or numerical failures. Every command writes exactly one
run_manifest.json into its output directory recording the invocation, the
effective configuration and its hash, the master seed, input/output paths,
the tool version, and wall time. Wall-clock fields are the only
nondeterministic bytes any command emits; everything else is
byte-reproducible for identical inputs and seeds when running
single-threaded (--threads 1, the default unless BIREC_THREADS is set).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import __version__
from .errors import BirecError, UsageError
from .generative import fit_prior, load_prior, save_prior
from .metrics import aggregate, evaluate_case, save_report
from .phantom import cohort_case_dirs, default_grid, generate_cohort, load_case
from .projector import backproject_average
from .recon import (
    VARIANTS,
    ReconConfig,
    ReconResult,
    config_hash,
    load_result_bundle,
    run_variant,
    write_result_bundle,
)
from .volume import read_gvol

_CLI_VARIANTS = VARIANTS + ("backprojection",)
_THREADS_ENV = "BIREC_THREADS"


def _sha256_json(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _write_manifest(out_dir, argv, cfg_doc, master_seed, inputs, t_start) -> None:
    os.makedirs(out_dir, exist_ok=True)
    doc = {
        "tool": "birec",
        "version": __version__,
        "command": list(argv),
        "config_hash": _sha256_json(cfg_doc),
        "effective_config": cfg_doc,
        "master_seed": master_seed,
        "inputs": inputs,
        "output": str(out_dir),
        "wall_time_s": time.perf_counter() - t_start,
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary portable graymap of a [0, 1] image."""
    data = np.clip(img, 0.0, 1.0)
    pix = np.round(data * 255.0).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pix.tobytes())


def _write_midslices(out_dir, volume) -> None:
    """Axial/coronal/sagittal mid-slice previews (first axis right, last up)."""
    nx, ny, nz = volume.grid.dims
    slices = {
        "axial": volume.data[:, :, nz // 2],
        "coronal": volume.data[:, ny // 2, :],
        "sagittal": volume.data[nx // 2, :, :],
    }
    for name, img in slices.items():
        _write_pgm(os.path.join(out_dir, f"slice_{name}.pgm"), np.flipud(img.T))


def _thread_count(arg_value) -> int:
    if arg_value is not None:
        n = int(arg_value)
    else:
        n = int(os.environ.get(_THREADS_ENV, "1"))
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    return n


def _map_jobs(fn, jobs, threads: int):
    if threads == 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def _load_recon_config(path, overrides: dict) -> ReconConfig:
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return ReconConfig.from_dict(doc)


# ------------------------------------------------------------- subcommands

def _cmd_generate_cohort(args, argv) -> int:
    t0 = time.perf_counter()
    grid = default_grid(args.grid)
    generate_cohort(args.n, args.seed, args.out, grid)
    cfg_doc = {"n": args.n, "seed": args.seed, "grid": args.grid}
    _write_manifest(args.out, argv, cfg_doc, args.seed, {}, t0)
    print(f"wrote {args.n} case(s) to {args.out}")
    return 0


def _parse_scales(text: str):
    try:
        sizes = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"--scales must be comma-separated integers, got {text!r}") from exc
    if not sizes:
        raise UsageError("--scales must name at least one scale")
    return tuple((s, s, s) for s in sizes)


def _cmd_fit_prior(args, argv) -> int:
    t0 = time.perf_counter()
    scales = _parse_scales(args.scales)
    case_dirs = cohort_case_dirs(args.cohort)
    volumes = [read_gvol(os.path.join(d, "v_minus.gvol")) for d in case_dirs]
    prior = fit_prior(volumes, d=args.d, scales=scales)
    save_prior(args.out, prior)
    print(f"fitted prior on {len(volumes)} volumes")
    print("scale  dims          explained_var  noise_amp")
    for s, scale in enumerate(prior.scales):
        dims = "x".join(str(d) for d in scale.grid.dims)
        ev = prior.fit_stats["explained_variance"][s]
        print(f"{s:<5d}  {dims:<12s}  {ev:<13.4f}  {scale.noise_amp:.5f}")
    cfg_doc = {"d": args.d, "scales": args.scales}
    _write_manifest(args.out, argv, cfg_doc, None, {"cohort": str(args.cohort)}, t0)
    return 0


def _run_backprojection(case, cfg: ReconConfig) -> ReconResult:
    vol = backproject_average(case.projections, case.geoms, case.v_minus.grid)
    return ReconResult(vol, None, None, None, [])


def _reconstruct_one(case, case_name, prior, cfg: ReconConfig, out_dir) -> ReconResult:
    t0 = time.perf_counter()
    if cfg.variant == "backprojection":
        result = _run_backprojection(case, cfg)
    else:
        if prior is None and cfg.variant in ("gen-only", "gen-then-deform", "full"):
            raise UsageError(f"variant '{cfg.variant}' requires --prior")
        result = run_variant(cfg.variant, prior, case.v_minus, case.projections, case.geoms, cfg)
    write_result_bundle(out_dir, result, cfg, time.perf_counter() - t0, case_name)
    _write_midslices(out_dir, result.volume)
    return result


def _cmd_reconstruct(args, argv) -> int:
    t0 = time.perf_counter()
    cfg = _load_recon_config(args.config, {"variant": args.variant, "seed": args.seed})
    case = load_case(args.case)
    case_name = os.path.basename(os.path.normpath(args.case))
    prior = load_prior(args.prior) if args.prior else None
    result = _reconstruct_one(case, case_name, prior, cfg, args.out)
    inputs = {"case": str(args.case), "prior": str(args.prior) if args.prior else None, "config": str(args.config) if args.config else None}
    _write_manifest(args.out, argv, cfg.to_dict(), cfg.seed, inputs, t0)
    final = result.trace[-1]["total"] if result.trace else float("nan")
    print(f"variant {cfg.variant}: wrote {args.out} (final objective {final:.6g})")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def _case_name_of_result(result_dir) -> str:
    meta_path = os.path.join(result_dir, "metadata.json")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        if meta.get("case"):
            return meta["case"]
    manifest_path = os.path.join(result_dir, "run_manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            doc = json.load(fh)
        case = (doc.get("inputs") or {}).get("case")
        if case:
            return os.path.basename(os.path.normpath(case))
    raise UsageError(f"result {result_dir} does not record which case it belongs to")


def _cmd_evaluate(args, argv) -> int:
    t0 = time.perf_counter()
    threads = _thread_count(args.threads)
    case_dirs = {os.path.basename(d): d for d in cohort_case_dirs(args.cases)}
    jobs = []
    for rdir in args.results:
        name = _case_name_of_result(rdir)
        if name not in case_dirs:
            raise UsageError(f"result {rdir} references unknown case '{name}'")
        jobs.append((name, rdir))
    covered = {name for name, _ in jobs}
    missing = sorted(set(case_dirs) - covered)
    if missing:
        raise UsageError(f"no result provided for case(s): {', '.join(missing)}")

    def run(job):
        name, rdir = job
        case = load_case(case_dirs[name])
        result = load_result_bundle(rdir)
        row = evaluate_case(case, result)
        row["case"] = name
        row["variant"] = result.metadata.get("variant", "")
        return row

    rows = _map_jobs(run, jobs, threads)
    rows.sort(key=lambda r: (r["case"], r["variant"]))
    variants = sorted({r["variant"] for r in rows})
    by_variant = {v: aggregate([r for r in rows if r["variant"] == v]) for v in variants}
    entries = sorted(by_variant.items(), key=lambda kv: -(kv[1]["psnr_db"]["mean"] or 0.0))
    agg = save_report(args.out, rows, entries)
    with open(os.path.join(args.out, "aggregate.json"), "w") as fh:
        json.dump({"overall": agg, "by_variant": by_variant}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "table.txt")) as fh:
        print(fh.read(), end="")
    cfg_doc = {"cases": str(args.cases), "results": [str(r) for r in args.results]}
    _write_manifest(args.out, argv, cfg_doc, None, cfg_doc, t0)
    return 0


def _cmd_ablate(args, argv) -> int:
    t0 = time.perf_counter()
    threads = _thread_count(args.threads)
    base_cfg = _load_recon_config(args.config, {"seed": args.seed})
    prior = load_prior(args.prior)
    case_dirs = cohort_case_dirs(args.cases)
    jobs = [(cdir, variant) for cdir in case_dirs for variant in VARIANTS]

    def run(job):
        cdir, variant = job
        name = os.path.basename(cdir)
        case = load_case(cdir)
        cfg = replace(base_cfg, variant=variant)
        out_dir = os.path.join(args.out, name, variant)
        result = _reconstruct_one(case, name, prior, cfg, out_dir)
        row = evaluate_case(case, result)
        row["case"] = name
        row["variant"] = variant
        return row

    rows = _map_jobs(run, jobs, threads)
    rows.sort(key=lambda r: (r["case"], r["variant"]))
    by_variant = {v: aggregate([r for r in rows if r["variant"] == v]) for v in VARIANTS}
    entries = sorted(by_variant.items(), key=lambda kv: -(kv[1]["psnr_db"]["mean"] or 0.0))
    save_report(args.out, rows, entries)
    with open(os.path.join(args.out, "aggregate.json"), "w") as fh:
        json.dump({"by_variant": by_variant}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "table.txt")) as fh:
        print(fh.read(), end="")
    inputs = {"cases": str(args.cases), "prior": str(args.prior), "config": str(args.config) if args.config else None}
    _write_manifest(args.out, argv, base_cfg.to_dict(), base_cfg.seed, inputs, t0)
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="birec",
        description="Biplanar-guided volumetric recovery: phantom cohorts, prior fitting, reconstruction, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"birec {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("generate-cohort", help="generate a seeded phantom case cohort")
    p.add_argument("--n", type=int, required=True, help="number of cases")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", required=True, help="output cohort directory")
    p.add_argument("--grid", type=int, default=64, help="cubic grid side (default 64)")
    p.set_defaults(func=_cmd_generate_cohort)

    p = sub.add_parser("fit-prior", help="fit the multi-scale generative prior on a cohort")
    p.add_argument("--cohort", required=True, help="cohort directory (uses each case's v_minus)")
    p.add_argument("--d", type=int, default=8, help="basis size per scale (default 8)")
    p.add_argument("--scales", default="16,32,64", help="comma-separated cubic scale sides")
    p.add_argument("--out", required=True, help="output prior directory")
    p.set_defaults(func=_cmd_fit_prior)

    p = sub.add_parser("reconstruct", help="recover one case's changed volume")
    p.add_argument("--case", required=True, help="case directory")
    p.add_argument("--prior", default=None, help="fitted prior directory")
    p.add_argument("--config", default=None, help="JSON config file (flags override)")
    p.add_argument("--variant", choices=_CLI_VARIANTS, default=None, help="method variant")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="output result directory")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score result bundles against their cases")
    p.add_argument("--cases", required=True, help="cohort directory")
    p.add_argument("--results", nargs="+", required=True, help="result bundle directories")
    p.add_argument("--out", required=True, help="output report directory")
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${_THREADS_ENV} or 1)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="run all method variants over a cohort and tabulate")
    p.add_argument("--cases", required=True, help="cohort directory")
    p.add_argument("--prior", required=True, help="fitted prior directory")
    p.add_argument("--config", default=None, help="JSON config file (flags override)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${_THREADS_ENV} or 1)")
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BirecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
