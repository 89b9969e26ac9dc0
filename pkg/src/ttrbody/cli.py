"""Command-line pipeline: data generation, pretraining, pre-adaptation,
full-scope refinement, evaluation, and report tables.

Every subcommand is deterministic per (flags, seeds, input files) and never
mutates its inputs. Flags can come from a JSON config file (`--config`,
keys named like the flags); explicit flags win. `TTRBODY_SEED` is the
last-resort seed default. Exit codes: 0 success, 1 runtime/data failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import adaptation, body_model, data_io, metrics, nnet
from .errors import DataError, TtrBodyError

DEFAULT_TEMPLATE_SEED = 20240301


def _env_seed(default: int = 0) -> int:
    raw = os.environ.get("TTRBODY_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise DataError(f"TTRBODY_SEED must be an integer, got {raw!r}") from exc


def _template_for(args, stream=None):
    template = body_model.make_template(args.template_seed)
    if stream is not None and stream.template_hash:
        have = body_model.template_hash(template)
        if have != stream.template_hash:
            raise DataError(
                f"dataset was generated with template {stream.template_hash}, "
                f"but --template-seed {args.template_seed} gives {have}"
            )
    return template


def _add_common(parser, seed_default=0):
    parser.add_argument("--config", type=str, default=None,
                        help="JSON file of flag defaults (flags override)")
    parser.add_argument("--seed", type=int, default=None,
                        help=f"run seed (env TTRBODY_SEED, then {seed_default})")
    parser.add_argument("--template-seed", type=int, default=DEFAULT_TEMPLATE_SEED)
    parser.set_defaults(_seed_default=seed_default)


def cmd_gen_template(args) -> int:
    template = body_model.make_template(args.seed)
    body_model.save_template(template, args.out)
    print(f"wrote template.v1 (seed {args.seed}, "
          f"hash {body_model.template_hash(template)}) to {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    n_seq = args.sequences
    if n_seq is None:
        n_seq = 80 if args.split == "source" else 40
    cfg = data_io.GenConfig(
        n_sequences=n_seq,
        frames_per_sequence=args.frames,
        motion_smoothness=args.smoothness,
        detector_noise_std=args.detector_noise,
        detector_dropout=args.detector_dropout,
        feature_nuisance_std=args.nuisance,
        seed=args.seed,
    )
    template = body_model.make_template(args.template_seed)
    stream = data_io.gen_synthetic_dataset(cfg, args.split, template)
    data_io.save_stream(stream, args.out)
    print(f"wrote {len(stream)} frames across {n_seq} sequences "
          f"({args.split}, seed {args.seed}) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    source = data_io.load_stream(args.source)
    template = _template_for(args, source)
    cfg = nnet.PretrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        input_noise_std=args.noise,
        teacher_noise_std=args.teacher_noise,
        seed=args.seed,
    )
    f0, teacher = nnet.pretrain_backbones(source, cfg, template)
    nnet.save_weights(f0, args.out_f0)
    nnet.save_weights(teacher, args.out_teacher)
    mp, pa, _ = adaptation.evaluate_stream(f0, source, template)
    print(f"pretrained f0 -> {args.out_f0} (source MPJPE {mp:.2f} mm, "
          f"PA {pa:.2f} mm); teacher -> {args.out_teacher}")
    return 0


def _loss_weights(args):
    return adaptation.LossWeights(args.lambda1, args.lambda2, args.lambda3,
                                  args.lambda4)


def cmd_preadapt(args) -> int:
    f0 = nnet.load_weights(args.backbone)
    teacher = nnet.load_weights(args.teacher)
    target = data_io.load_stream(args.data)
    template = _template_for(args, target)
    cfg = adaptation.PreAdaptConfig(
        epochs=args.epochs,
        sequences_per_epoch=args.seqs_per_epoch,
        frames_per_sequence=args.frames_per_seq,
        noise=adaptation.NoiseLevel(args.sigma),
        loss_weights=_loss_weights(args),
        lr=args.lr,
        seed=args.seed,
        eval_every=args.eval_every,
    )
    f_s, log = adaptation.preadapt_run(f0, teacher, target, cfg, template)
    nnet.save_weights(f_s, args.out_weights)
    adaptation.write_log_csv(log, args.out_log)
    last = log[-1].mean_loss if log else float("nan")
    print(f"pre-adapted {args.epochs} epochs (sigma {args.sigma:g}); "
          f"final epoch loss {last:.4f}; weights -> {args.out_weights}")
    return 0


def cmd_refine(args) -> int:
    f_s = nnet.load_weights(args.weights)
    teacher = nnet.load_weights(args.teacher)
    stream = data_io.load_stream(args.data)
    template = _template_for(args, stream)
    cfg = adaptation.BilevelConfig(
        lr_inner=args.lr_inner,
        lr_outer=args.lr_outer,
        steps_per_frame=args.steps_per_frame,
        loss_weights=_loss_weights(args),
    )
    outputs, _, log = adaptation.refine_stream(
        f_s, stream, teacher, cfg, template, regenerate=not args.no_regenerate
    )
    data_io.save_outputs(outputs, args.out_outputs)
    adaptation.write_log_csv(log, args.out_log)
    regen = sum(1 for e in log if e.regenerated)
    print(f"refined {len(outputs)} frames ({regen} regenerations); "
          f"outputs -> {args.out_outputs}")
    return 0


def _metrics_from_outputs(records, stream, template):
    by_id = {r.frame_id: r for r in records}
    gt_frames = [fr for fr in stream.frames if fr.gt is not None]
    missing = [fr.frame_id for fr in gt_frames if fr.frame_id not in by_id]
    extra = [r.frame_id for r in records
             if r.frame_id not in {fr.frame_id for fr in gt_frames}]
    if missing or extra:
        listed = ", ".join((missing + extra)[:10])
        raise DataError(
            f"frame-id mismatch between predictions and dataset "
            f"({len(missing)} missing, {len(extra)} extra): {listed}"
        )
    per_frame = []
    for fr in gt_frames:
        rec = by_id[fr.frame_id]
        joints = body_model.forward_kinematics(rec.params, template)
        per_frame.append(metrics.FrameMetrics(
            fr.frame_id, fr.sequence_name,
            metrics.mpjpe(joints, fr.gt.joints),
            metrics.pa_mpjpe(joints, fr.gt.joints),
        ))
    return per_frame


def cmd_eval(args) -> int:
    stream = data_io.load_stream(args.data)
    template = _template_for(args, stream)
    config = {"teacher": args.teacher_name, "sigma": args.sigma,
              "epochs": args.epochs}
    if args.pred:
        records = data_io.load_outputs(args.pred)
        per_frame = _metrics_from_outputs(records, stream, template)
        config["predictions"] = args.pred
    else:
        weights = nnet.load_weights(args.weights)
        _, _, per_frame = adaptation.evaluate_stream(weights, stream, template)
        config["weights_hash"] = nnet.weights_hash(weights)
    report = metrics.build_report(per_frame, config, args.baseline)
    metrics.save_report(report, args.out)
    gap_txt = ("" if report.gap_vs_initial_mm is None
               else f", gap {report.gap_vs_initial_mm:+.2f} mm")
    print(f"MPJPE {report.mean_mpjpe_mm:.2f} mm, "
          f"PA-MPJPE {report.mean_pa_mpjpe_mm:.2f} mm{gap_txt}; "
          f"report -> {args.out}")
    return 0


def cmd_report(args) -> int:
    reports = [metrics.load_report(p) for p in args.runs]
    metrics.write_report_grid(reports, args.out)
    print(f"wrote grid over {len(reports)} runs to {args.out}")
    return 0


def cmd_pipeline(args) -> int:
    os.makedirs(args.workdir, exist_ok=True)
    p = lambda name: os.path.join(args.workdir, name)
    template = body_model.make_template(args.template_seed)
    body_model.save_template(template, p("template.json"))

    src_cfg = data_io.GenConfig(n_sequences=args.source_sequences,
                                frames_per_sequence=args.frames, seed=args.seed)
    tgt_cfg = data_io.GenConfig(n_sequences=args.target_sequences,
                                frames_per_sequence=args.frames, seed=args.seed)
    source = data_io.gen_synthetic_dataset(src_cfg, "source", template)
    target = data_io.gen_synthetic_dataset(tgt_cfg, "target", template)
    data_io.save_stream(source, p("source.jsonl"))
    data_io.save_stream(target, p("target.jsonl"))
    print(f"data: source {len(source)} frames, target {len(target)} frames")

    pre_cfg = nnet.PretrainConfig(steps=args.pretrain_steps, seed=args.seed)
    f0, teacher = nnet.pretrain_backbones(source, pre_cfg, template)
    nnet.save_weights(f0, p("f0.json"))
    nnet.save_weights(teacher, p("teacher.json"))
    initial_mp, initial_pa, per0 = adaptation.evaluate_stream(f0, target, template)
    print(f"initial f0 target MPJPE {initial_mp:.2f} mm (PA {initial_pa:.2f})")

    ad_cfg = adaptation.PreAdaptConfig(
        epochs=args.epochs, noise=adaptation.NoiseLevel(args.sigma),
        seed=args.seed,
    )
    f_s, pre_log = adaptation.preadapt_run(f0, teacher, target, ad_cfg, template)
    nnet.save_weights(f_s, p("fs.json"))
    adaptation.write_log_csv(pre_log, p("preadapt_log.csv"))
    pre_mp, pre_pa, per_s = adaptation.evaluate_stream(f_s, target, template)
    print(f"pre-adapted target MPJPE {pre_mp:.2f} mm "
          f"(gap {metrics.gap(initial_mp, pre_mp):+.2f})")

    bl_cfg = adaptation.BilevelConfig(lr_inner=args.lr_inner,
                                      lr_outer=args.lr_outer)
    outputs, _, ref_log = adaptation.refine_stream(f_s, target, teacher, bl_cfg,
                                                   template)
    data_io.save_outputs(outputs, p("refined.jsonl"))
    adaptation.write_log_csv(ref_log, p("refine_log.csv"))
    per_r = _metrics_from_outputs(outputs, target, template)

    stage_reports = []
    for name, per_frame in (("initial", per0), ("preadapted", per_s),
                            ("refined", per_r)):
        rep = metrics.build_report(
            per_frame,
            {"teacher": "temporal-teacher", "sigma": args.sigma,
             "epochs": args.epochs, "stage": name},
            None if name == "initial" else initial_mp,
        )
        metrics.save_report(rep, p(f"report_{name}.json"))
        stage_reports.append((name, rep))
    refined_mp = stage_reports[2][1].mean_mpjpe_mm
    print(f"refined target MPJPE {refined_mp:.2f} mm "
          f"(gap {metrics.gap(initial_mp, refined_mp):+.2f})")

    summary = {
        "seed": args.seed,
        "sigma": args.sigma,
        "epochs": args.epochs,
        "initial_mpjpe_mm": initial_mp,
        "preadapted_mpjpe_mm": pre_mp,
        "refined_mpjpe_mm": refined_mp,
        "preadapt_gap_mm": metrics.gap(initial_mp, pre_mp),
        "refined_gap_mm": metrics.gap(initial_mp, refined_mp),
    }
    with open(p("pipeline_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"summary -> {p('pipeline_summary.json')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttrbody",
        description="collaborative test-time refinement for a parametric "
                    "body regressor",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-template", help="write a template.v1 JSON file")
    _add_common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_template)

    sp = sub.add_parser("gen-data", help="generate a synthetic frames.v1 split")
    _add_common(sp)
    sp.add_argument("--split", choices=("source", "target"), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sequences", type=int, default=None,
                    help="default 80 for source, 40 for target")
    sp.add_argument("--frames", type=int, default=120)
    sp.add_argument("--smoothness", type=float, default=0.85)
    sp.add_argument("--detector-noise", type=float, default=0.2)
    sp.add_argument("--detector-dropout", type=float, default=0.05)
    sp.add_argument("--nuisance", type=float, default=0.02)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="manufacture f0 and teacher weights")
    _add_common(sp)
    sp.add_argument("--source", required=True)
    sp.add_argument("--out-f0", required=True)
    sp.add_argument("--out-teacher", required=True)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--teacher-noise", type=float, default=0.08)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("preadapt", help="teacher-guided pre-adaptation")
    _add_common(sp)
    sp.add_argument("--backbone", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out-weights", required=True)
    sp.add_argument("--out-log", required=True)
    sp.add_argument("--epochs", type=int, default=600)
    sp.add_argument("--sigma", type=float, default=35.0)
    sp.add_argument("--lr", type=float, default=1e-5)
    sp.add_argument("--seqs-per-epoch", type=int, default=3)
    sp.add_argument("--frames-per-seq", type=int, default=8)
    sp.add_argument("--eval-every", type=int, default=0)
    for i, d in ((1, 10.0), (2, 0.1), (3, 1.0), (4, 1.0)):
        sp.add_argument(f"--lambda{i}", type=float, default=d)
    sp.set_defaults(func=cmd_preadapt)

    sp = sub.add_parser("refine", help="regeneration-based bilevel refinement")
    _add_common(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out-outputs", required=True)
    sp.add_argument("--out-log", required=True)
    sp.add_argument("--lr-inner", type=float, default=1e-5)
    sp.add_argument("--lr-outer", type=float, default=1e-5)
    sp.add_argument("--steps-per-frame", type=int, default=1)
    sp.add_argument("--no-regenerate", action="store_true",
                    help="ablation: carry weights across sequence boundaries")
    for i, d in ((1, 10.0), (2, 0.1), (3, 1.0), (4, 1.0)):
        sp.add_argument(f"--lambda{i}", type=float, default=d)
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("eval", help="score predictions or a forward pass")
    _add_common(sp)
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--pred", help="outputs.v1 predictions file")
    group.add_argument("--weights", help="weights.v1 file for a forward pass")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--baseline", type=float, default=None,
                    help="initial MPJPE (mm) the gap is computed against")
    sp.add_argument("--teacher-name", default="temporal-teacher")
    sp.add_argument("--sigma", type=float, default=35.0)
    sp.add_argument("--epochs", type=int, default=600)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="grid CSV over multiple eval reports")
    _add_common(sp)
    sp.add_argument("--runs", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("pipeline", help="pretrain + preadapt + refine + eval")
    _add_common(sp)
    sp.add_argument("--workdir", required=True)
    sp.add_argument("--epochs", type=int, default=600)
    sp.add_argument("--sigma", type=float, default=35.0)
    sp.add_argument("--pretrain-steps", type=int, default=2000)
    sp.add_argument("--source-sequences", type=int, default=80)
    sp.add_argument("--target-sequences", type=int, default=40)
    sp.add_argument("--frames", type=int, default=120)
    sp.add_argument("--lr-inner", type=float, default=1e-5)
    sp.add_argument("--lr-outer", type=float, default=1e-5)
    sp.set_defaults(func=cmd_pipeline)

    return parser


def _apply_config_file(parser, argv):
    """Seed parser defaults from --config JSON; explicit flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", type=str, default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    try:
        with open(known.config, "r", encoding="utf-8") as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config file {known.config}: {exc}") from exc
    if not isinstance(values, dict):
        raise DataError("config file must hold a JSON object")
    mapped = {k.replace("-", "_"): v for k, v in values.items()}
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            usable = {k: v for k, v in mapped.items()
                      if any(a.dest == k for a in sp._actions)}
            sp.set_defaults(**usable)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        if args.seed is None:
            args.seed = _env_seed(args._seed_default)
        return args.func(args)
    except TtrBodyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
