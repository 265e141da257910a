"""Command-line entry point: model-gen, synth, train, fit, eval, render.

Every subcommand prints its fully resolved configuration before running.
Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""
import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import kvconfig
from .body_model import audit_model, generate_toy_model, load_model, save_model
from .camera import default_camera
from .errors import NumericError, ParameterError, ParseError
from .fitter import FitConfig, fit_gmm_prior, fit_multiframe, read_fit_problem, save_fit_result, write_fit_problem
from .metrics import MetricsReport, mpjpe_pa, pve_t_sc, silhouette_miou
from .regressor import (RegressorConfig, TrainConfig, config_from_dataset, evaluate, load_checkpoint,
                        save_checkpoint, train, write_loss_csv)
from .scenarios import make_subject
from .synth import SynthConfig, generate_dataset, load_dataset, load_pose_bank, sample_pose_bank

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _print_config(title, cfg):
    print(f"# {title}")
    if dataclasses.is_dataclass(cfg):
        print(kvconfig.dumps(cfg), end="")
    else:
        for k, v in cfg.items():
            print(f"{k} = {v}")


def _resolve(cls, config_path, overrides, base=None):
    """Config file values, then any non-None command-line overrides."""
    cfg = kvconfig.load(config_path, cls, base) if config_path else (base or cls())
    updates = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _model(args):
    if args.model:
        return load_model(args.model)
    return generate_toy_model(0)


def _bank(args, model):
    if getattr(args, "bank", None):
        return load_pose_bank(args.bank)
    return sample_pose_bank(args.bank_size, model.num_joints, model.num_betas, seed=args.bank_seed)


# ---------------------------------------------------------------- subcommands


def cmd_model_gen(args):
    settings = {"seed": args.seed, "vertices": args.vertices, "joints": args.joints,
                "betas": args.betas, "keypoints": args.keypoints, "out": args.out}
    _print_config("model-gen", settings)
    model = generate_toy_model(args.seed, N=args.vertices, K=args.joints, B=args.betas, L=args.keypoints)
    save_model(model, args.out)
    if args.verify:
        problems = audit_model(load_model(args.out))
        if problems:
            for p in problems:
                print(f"audit: {p}", file=sys.stderr)
            return EXIT_DATA
        print("audit: ok")
    return 0


def cmd_synth(args):
    model = _model(args)
    cfg = _resolve(SynthConfig, args.config, {
        "height": args.size, "width": args.size,
        "shape_aug": False if args.no_shape_aug else None,
        "pr_aug": False if args.no_pr_aug else None,
    })
    _print_config("synth", {"model": args.model or "<toy seed 0>", "bank": args.bank or "<sampled>",
                            "bank_size": args.bank_size, "bank_seed": args.bank_seed,
                            "count": args.count, "seed": args.seed, "out": args.out,
                            "dump_pgm": args.dump_pgm})
    _print_config("SynthConfig", cfg)
    bank = _bank(args, model)
    generate_dataset(bank, model, cfg, args.count, args.seed, args.out, args.dump_pgm)
    print(f"wrote {args.count} pairs to {args.out}")
    return 0


def cmd_train(args):
    model = _model(args)
    data = load_dataset(args.data)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        rcfg = ckpt.config
    else:
        ckpt = None
        base = config_from_dataset(data, model)
        rcfg = _resolve(RegressorConfig, args.regressor_config, {}, base)
    tcfg = _resolve(TrainConfig, args.config, {"learning_rate": args.lr, "batch_size": args.batch_size,
                                                "epochs": args.epochs, "seed": args.seed})
    _print_config("train", {"data": args.data, "model": args.model or "<toy seed 0>", "out": args.out,
                            "log": args.log, "resume": args.resume})
    _print_config("RegressorConfig", rcfg)
    _print_config("TrainConfig", tcfg)
    result = train(data, model, rcfg, tcfg, checkpoint=ckpt,
                   progress=lambda e, loss: print(f"epoch {e}: loss {loss:.6g}"))
    save_checkpoint(result, args.out)
    if args.log:
        write_loss_csv(result.history, args.log)
    print(f"checkpoint at epoch {result.epoch}, step {result.adam.t if result.adam else 0}: {args.out}")
    return 0


def cmd_fit(args):
    model = _model(args)
    frames, cam = read_fit_problem(args.frames_dir, model.num_joints, args.frames)
    cfg = _resolve(FitConfig, args.config, {"max_iters": args.max_iters, "learning_rate": args.lr,
                                            "tau": args.tau})
    init_beta = np.zeros(model.num_betas)
    init_path = Path(args.frames_dir) / "init_beta.txt"
    if init_path.exists():
        init_beta = np.array([float(v) for v in init_path.read_text().split()])
        if init_beta.shape != (model.num_betas,):
            raise ParseError(f"expected {model.num_betas} shape coefficients", 1, init_path)
    _print_config("fit", {"frames_dir": args.frames_dir, "frames_used": len(frames), "model": args.model or "<toy seed 0>",
                          "bank_size": args.bank_size, "bank_seed": args.bank_seed,
                          "gmm_components": args.gmm_components, "out": args.out})
    _print_config("FitConfig", cfg)
    bank = _bank(args, model)
    prior = fit_gmm_prior(bank, args.gmm_components, seed=args.bank_seed)
    result = fit_multiframe(frames, model, cam, cfg, prior, init_beta)
    path, summary = save_fit_result(result, args.out)
    print(f"{result.iterations} iterations, energy {result.initial_energy:.6g} -> {result.final_energy:.6g}")
    print(f"wrote {path} and {summary}")
    return 0


def cmd_eval(args):
    model = _model(args)
    data = load_dataset(args.data)
    _print_config("eval", {"checkpoint": args.checkpoint, "data": args.data, "model": args.model or "<toy seed 0>",
                           "stub_targets": args.stub_targets, "out": args.out})
    if args.stub_targets:
        # predictions equal to the targets: checks the metric plumbing end to end
        report = MetricsReport()
        for i in range(len(data)):
            report.add(str(i), mpjpe_pa(data.joints3d[i], data.joints3d[i]),
                       pve_t_sc(data.shapes[i], data.shapes[i], model),
                       silhouette_miou(data.inputs[i, ..., 0], data.inputs[i, ..., 0]))
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless --stub-targets is given")
        ckpt = load_checkpoint(args.checkpoint)
        _print_config("RegressorConfig", ckpt.config)
        report = evaluate(ckpt.params, ckpt.config, data, model)
    if args.out:
        report.save(args.out)
    print(report.table())
    return 0


def cmd_render(args):
    """Synthetic fit problem: a subject in several poses with a perturbed initialisation."""
    model = _model(args)
    bank = _bank(args, model)
    _print_config("render", {"model": args.model or "<toy seed 0>", "seed": args.seed, "frames": args.frames,
                             "size": args.size, "bank_size": args.bank_size, "bank_seed": args.bank_seed,
                             "out_dir": args.out_dir})
    subj = make_subject(model, bank, args.seed, args.frames, args.size)
    out = write_fit_problem(args.out_dir, subj.frames, default_camera(args.size, args.size))
    (out / "init_beta.txt").write_text(" ".join(repr(float(b)) for b in subj.init_beta) + "\n")
    truth = {"beta": subj.beta.tolist(), "poses": subj.poses.tolist(), "translations": subj.translations.tolist()}
    (out / "truth.json").write_text(json.dumps(truth, indent=1) + "\n")
    print(f"wrote {args.frames} frames to {out}")
    return 0


# ---------------------------------------------------------------- parser


def _add_model(p):
    p.add_argument("--model", help="model file from model-gen (default: toy model, seed 0)")


def _add_bank(p, with_file=True):
    if with_file:
        p.add_argument("--bank", help="pose bank file (default: sample one)")
    p.add_argument("--bank-size", type=int, default=4000)
    p.add_argument("--bank-seed", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="bodyfit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model-gen", help="generate and save a toy body model")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vertices", type=int, default=900)
    p.add_argument("--joints", type=int, default=24)
    p.add_argument("--betas", type=int, default=10)
    p.add_argument("--keypoints", type=int, default=17)
    p.add_argument("--verify", action="store_true", help="reload the file and run the invariant audit")
    p.set_defaults(func=cmd_model_gen)

    p = sub.add_parser("synth", help="generate a synthetic training dataset")
    _add_model(p)
    _add_bank(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, help="image height and width (default from config: 256)")
    p.add_argument("--config", help="key = value file for SynthConfig")
    p.add_argument("--no-shape-aug", action="store_true")
    p.add_argument("--no-pr-aug", action="store_true")
    p.add_argument("--dump-pgm", metavar="DIR", help="also write each silhouette as a PGM")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the regressor on a dataset file")
    _add_model(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss curve CSV")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key = value file for TrainConfig")
    p.add_argument("--regressor-config", help="key = value file for RegressorConfig")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="multi-frame fit of a frame directory")
    _add_model(p)
    _add_bank(p)
    p.add_argument("--frames-dir", required=True)
    p.add_argument("--frames", type=int, help="use only the first N frames")
    p.add_argument("--out", required=True, help="binary result path; a .json summary is written alongside")
    p.add_argument("--config", help="key = value file for FitConfig")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--gmm-components", type=int, default=8)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    _add_model(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="report JSON path; a CSV is written alongside")
    p.add_argument("--stub-targets", action="store_true", help="use the targets as predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a synthetic multi-frame fit problem")
    _add_model(p)
    _add_bank(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
