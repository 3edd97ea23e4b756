"""Command-line entry points: generate cohorts, simulate patients, calibrate
parameters with k-fold cross-validation, evaluate checkpoints, and serve the
what-if HTTP API.

Every run logs its fully resolved configuration at INFO (SOCTWIN_LOG controls
the level), errors map to stable exit codes with a single machine-parsable
stderr line, and --threads 1 pins the BLAS pool for bitwise reproducibility.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .calibrate import LossConfig, OptimConfig, fit, kfold_split, patient_loss
from .errors import ConfigError, FormatError, SolverError, StateError, ValidationError
from .imex import BioParams, RolloutConfig, predict_curve, rollout, threshold_mask
from .metrics import dsc, mae_rmse, mask_volume, time_to_progression
from .store import (
    read_checkpoint,
    read_manifest,
    read_patient,
    write_checkpoint,
    write_field,
    write_mask,
)
from .synth import CohortSpec, gen_cohort
from .therapy import KILL_MODES, SURGERY_MODES

log = logging.getLogger("soctwin")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_IO = 4
EXIT_INTERNAL = 5

_DEFAULT_INIT = BioParams(D=0.1, k=0.08, alpha_ct=0.03, alpha_rt=0.03, beta_rt=0.003)


def _setup_logging():
    level = os.environ.get("SOCTWIN_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def _limit_threads(n: int | None):
    if n is None:
        return
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _log_resolved(name: str, cfg: dict):
    log.info("resolved %s config: %s", name, json.dumps(cfg, sort_keys=True, default=str))


def _rollout_cfg(args, manifest: dict | None = None) -> RolloutConfig:
    """Build the integrator config; --obs-density falls back to the cohort
    manifest's generation level so rollout inits match the generator."""
    density = args.obs_density
    if density is None and manifest is not None:
        density = manifest.get("spec", {}).get("obs_density_level")
    if density is None:
        density = 1.0
    return RolloutConfig(
        steps_per_day=args.steps_per_day,
        assimilation_alpha=args.alpha,
        threshold_tau=args.tau,
        obs_density_level=density,
        kill_mode=args.kill_mode,
        surgery_mode=args.surgery_mode,
    )


def _load_cohort(path: str):
    """Read a cohort directory: manifest + every patient record (+ truth doc)."""
    manifest = read_manifest(os.path.join(path, "cohort.json"))
    patients, truths = [], []
    for entry in manifest["patients"]:
        rec, truth = read_patient(os.path.join(path, entry["path"]))
        patients.append(rec)
        truths.append(truth)
    return manifest, patients, truths


def _write_csv(path: str, header: list, rows: list):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# ----------------------------------------------------------------- subcommands


def cmd_gen(args) -> int:
    spec = CohortSpec(
        kind=args.kind,
        n_patients=args.n,
        grid=(args.grid, args.grid),
        spacing=args.spacing,
        seed=args.seed,
        scan_days=tuple(args.scan_days) if args.scan_days else None,
        tau=args.tau,
        steps_per_day=args.steps_per_day,
        noise_sigma=args.noise_sigma,
        bias_amplitude=args.bias_amplitude,
        lowpass_fraction=args.lowpass_fraction,
        jitter_prob=args.jitter_prob,
        tissue_contrast=args.tissue_contrast,
    )
    _log_resolved("gen", vars(spec))
    doc = gen_cohort(spec, args.out)
    print(f"wrote {len(doc['patients'])} patients to {args.out} "
          f"(manifest hash {doc['content_hash'][:16]})")
    return EXIT_OK


def _params_with_overrides(args) -> BioParams:
    if args.checkpoint:
        params, _, _ = read_checkpoint(args.checkpoint)
    else:
        params = _DEFAULT_INIT
    if not args.param:
        return params
    fields = {
        "D": params.D, "k": params.k, "theta": params.theta,
        "alpha_ct": params.alpha_ct, "alpha_rt": params.alpha_rt, "beta_rt": params.beta_rt,
    }
    for spec in args.param:
        name, _, value = spec.partition("=")
        if name not in fields or not value:
            raise ConfigError(f"--param expects name=value with name in {sorted(fields)}, got {spec!r}")
        fields[name] = float(value)
    return BioParams(**fields)


def cmd_simulate(args) -> int:
    rec, _ = read_patient(args.patient)
    params = _params_with_overrides(args)
    cfg = _rollout_cfg(args)
    _log_resolved("simulate", {"patient": rec.id, "params": vars(params), "cfg": vars(cfg),
                               "horizon": args.horizon})
    curve = predict_curve(rec, params, cfg, horizon=args.horizon)

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for day, fld in curve:
        mask = threshold_mask(fld, args.tau, params.theta)
        rows.append([day, mask_volume(mask, rec.spacing)])
    _write_csv(os.path.join(args.out, "volume.csv"), ["day", "volume_mm2"], rows)

    last_day, last_field = curve[-1]
    write_field(os.path.join(args.out, "pred_final.socf"), last_field, day=last_day)
    write_mask(os.path.join(args.out, "pred_final_mask.pgm"),
               threshold_mask(last_field, args.tau, params.theta))

    final_obs = rec.observations[-1]
    by_day = dict(curve)
    if final_obs.day in by_day:
        pred_mask = threshold_mask(by_day[final_obs.day], args.tau, params.theta)
        score = dsc(pred_mask, final_obs.mask)
        print(f"{rec.id}: final volume {rows[-1][1]:.1f} mm2 at day {last_day:g}, "
              f"DSC vs last scan {score:.4f}")
    else:
        print(f"{rec.id}: final volume {rows[-1][1]:.1f} mm2 at day {last_day:g}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    manifest, patients, _ = _load_cohort(args.cohort)
    if len(patients) < args.k_folds:
        raise ValidationError(
            f"cohort has {len(patients)} patients, cannot make {args.k_folds} folds"
        )
    cfg = _rollout_cfg(args, manifest)
    lc = LossConfig(soft_temp=args.soft_temp)
    _log_resolved("calibrate", {"cohort": args.cohort, "k_folds": args.k_folds,
                                "lr": args.lr, "iters": args.iters, "seed": args.seed,
                                "cfg": vars(cfg)})
    os.makedirs(args.out, exist_ok=True)

    folds = kfold_split(len(patients), args.k_folds, args.seed)
    rows = []
    for fold_idx, (train_ids, val_ids) in enumerate(folds):
        fold_seed = int(np.random.SeedSequence([args.seed, fold_idx]).generate_state(1)[0])
        oc = OptimConfig(lr=args.lr, max_iters=args.iters, seed=fold_seed)
        train = [patients[i] for i in train_ids]
        result = fit(train, _DEFAULT_INIT, oc, lc, cfg)
        ckpt_path = os.path.join(args.out, f"fold_{fold_idx}.json")
        write_checkpoint(ckpt_path, result.params,
                         optim={"fold": fold_idx, "seed": fold_seed,
                                "final_loss": result.loss_history[-1] if result.loss_history else None})

        scores = []
        for i in val_ids:
            preds = rollout(patients[i], result.params, cfg)
            pred_mask = threshold_mask(preds[-1][1], args.tau, result.params.theta)
            scores.append(dsc(pred_mask, patients[i].observations[-1].mask))
        val_losses = [patient_loss(patients[i], result.params, cfg, lc) for i in val_ids]
        rows.append([
            fold_idx,
            result.loss_history[0], min(result.loss_history),
            float(np.mean(val_losses)),
            float(np.mean(scores)), float(np.std(scores)),
            result.params.D, result.params.k, result.params.alpha_ct,
            result.params.alpha_rt, result.params.beta_rt,
        ])
        log.info("fold %d: val DSC %.4f +- %.4f", fold_idx, rows[-1][4], rows[-1][5])

    _write_csv(
        os.path.join(args.out, "folds.csv"),
        ["fold", "train_loss_init", "train_loss_best", "val_loss",
         "val_dsc_mean", "val_dsc_std", "D", "k", "alpha_ct", "alpha_rt", "beta_rt"],
        rows,
    )
    mean = float(np.mean([r[4] for r in rows]))
    std = float(np.std([r[4] for r in rows]))
    print(f"calibrated {args.k_folds} folds on {len(patients)} patients: "
          f"val DSC {mean:.4f} +- {std:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest, patients, truths = _load_cohort(args.cohort)
    params, weights, _ = read_checkpoint(args.checkpoint)
    cfg = _rollout_cfg(args, manifest)
    _log_resolved("eval", {"cohort": args.cohort, "checkpoint": args.checkpoint,
                           "tau": args.tau, "cfg": vars(cfg)})

    rows = []
    ttp_pairs = []
    for rec, truth in zip(patients, truths):
        preds = rollout(rec, params, cfg)
        pred_mask = threshold_mask(preds[-1][1], args.tau, params.theta)
        score = dsc(pred_mask, rec.observations[-1].mask)

        obs_series = [
            (o.day, mask_volume(o.mask, rec.spacing)) for o in rec.observations
        ]
        pred_series = [
            (day, mask_volume(threshold_mask(f, args.tau, params.theta), rec.spacing))
            for day, f in preds
        ]
        ttp_true = time_to_progression(obs_series)
        ttp_pred = time_to_progression(pred_series)
        if ttp_true is not None and ttp_pred is not None:
            ttp_pairs.append((ttp_true, ttp_pred))
        rows.append([rec.id, score,
                     "" if ttp_true is None else ttp_true,
                     "" if ttp_pred is None else ttp_pred])

    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "eval.csv"),
               ["patient", "dsc", "ttp_observed", "ttp_predicted"], rows)
    scores = [r[1] for r in rows]
    mean, std = float(np.mean(scores)), float(np.std(scores))
    summary = [["dsc_mean", mean], ["dsc_std", std], ["n_patients", len(rows)]]
    if ttp_pairs:
        mae, rmse = mae_rmse(ttp_pairs)
        summary += [["ttp_mae_days", mae], ["ttp_rmse_days", rmse],
                    ["ttp_n_pairs", len(ttp_pairs)]]
    _write_csv(os.path.join(args.out, "summary.csv"), ["metric", "value"], summary)
    print(f"evaluated {len(rows)} patients: DSC {mean:.4f} +- {std:.4f}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    host, _, port = args.bind.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"--bind must be host:port, got {args.bind!r}")
    defaults = {"steps_per_day": args.steps_per_day, "alpha": args.alpha, "tau": args.tau,
                "kill_mode": args.kill_mode, "surgery_mode": args.surgery_mode}
    if args.obs_density is not None:
        defaults["obs_density"] = args.obs_density
    _log_resolved("serve", {"cohort": args.cohort, "checkpoint": args.checkpoint,
                            "bind": args.bind, "defaults": defaults})
    app = create_app(args.cohort, checkpoint=args.checkpoint, defaults=defaults)
    uvicorn.run(app, host=host, port=int(port), log_level="info")
    return EXIT_OK


# ---------------------------------------------------------------------- parser


def _add_rollout_flags(p):
    p.add_argument("--steps-per-day", type=int, default=2)
    p.add_argument("--alpha", type=float, default=0.5,
                   help="assimilation weight on the model at intermediate scans; 1 disables nudging")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--obs-density", type=float, default=None,
                   help="density level observed masks imply; defaults to the cohort's generation level")
    p.add_argument("--kill-mode", choices=KILL_MODES, default=None)
    p.add_argument("--surgery-mode", choices=SURGERY_MODES, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="soctwin",
        description="Tumor digital twin: generate, simulate, calibrate, evaluate, serve.",
    )
    ap.add_argument("--version", action="version", version=f"soctwin {__version__}")
    ap.add_argument("--threads", type=int, default=None,
                    help="cap BLAS threads (1 gives bitwise-reproducible runs)")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic cohort")
    g.add_argument("--kind", choices=("AG", "HCC", "NAC"), default="AG")
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--grid", type=int, default=64)
    g.add_argument("--spacing", type=float, default=1.0)
    g.add_argument("--scan-days", type=float, nargs="+", default=None)
    g.add_argument("--tau", type=float, default=0.5)
    g.add_argument("--steps-per-day", type=int, default=2)
    g.add_argument("--noise-sigma", type=float, default=0.02)
    g.add_argument("--bias-amplitude", type=float, default=0.2)
    g.add_argument("--lowpass-fraction", type=float, default=0.8)
    g.add_argument("--jitter-prob", type=float, default=0.05)
    g.add_argument("--tissue-contrast", type=float, default=1.0)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("simulate", help="simulate one patient, write volume curve + masks")
    s.add_argument("--patient", required=True, help="path to a patient.json")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--param", action="append", default=[],
                   help="override a parameter, e.g. --param alpha_rt=0.04 (repeatable)")
    s.add_argument("--out", required=True)
    s.add_argument("--horizon", type=float, default=None)
    _add_rollout_flags(s)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="k-fold calibration over a cohort")
    c.add_argument("--cohort", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--k-folds", type=int, default=5)
    c.add_argument("--lr", type=float, default=5e-2)
    c.add_argument("--iters", type=int, default=200)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--soft-temp", type=float, default=None)
    _add_rollout_flags(c)
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("eval", help="evaluate a checkpoint over a cohort")
    e.add_argument("--cohort", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    _add_rollout_flags(e)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("serve", help="run the what-if HTTP service")
    v.add_argument("--cohort", required=True)
    v.add_argument("--checkpoint", default=None)
    v.add_argument("--bind", default="127.0.0.1:8420")
    _add_rollout_flags(v)
    v.set_defaults(func=cmd_serve)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        _limit_threads(args.threads)
        return args.func(args)
    except (ValidationError, ConfigError, StateError) as e:
        print(f"error code=validation message={e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverError as e:
        print(f"error code=solver message={e}", file=sys.stderr)
        return EXIT_SOLVER
    except (FormatError, OSError) as e:
        print(f"error code=io message={e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # pragma: no cover - last-resort guard
        log.exception("internal error")
        print(f"error code=internal message={e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
