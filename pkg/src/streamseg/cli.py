"""Command-line entry point.

Subcommands: run, synth, train, eval, gradcheck, bench. Exit codes:
0 success, 2 validation/format error, 3 internal-consistency error.
"""
import argparse
import sys

import numpy as np

from . import objectives, pipeline, synthworld
from .errors import FormatError, InternalConsistencyError, StreamSegError, ValidationError
from .frame_stream import read_frame, read_manifest
from .refiner import save_weights


def _add_run_flags(p):
    p.add_argument("--seq", required=True, help="sequence directory")
    p.add_argument("--weights", default=None, help="decoder weights file (absent: seeded init)")
    p.add_argument("--intra-threshold", type=float, default=0.8)
    p.add_argument("--cross-prune", type=float, default=1.8)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--voxel", type=float, default=0.05)
    p.add_argument("--assoc", choices=["refined", "raw"], default="refined")
    p.add_argument("--no-sdt", action="store_true")
    p.add_argument("--no-qim", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-bank", type=int, default=None)
    p.add_argument("--latency-csv", default=None)
    p.add_argument("--events-jsonl", default=None)
    p.add_argument("--dump-memory", default=None)
    p.add_argument("--pred-csv", default=None)
    p.add_argument("--ply", default=None)


def _config_from_args(args):
    return pipeline.RunConfig(
        seq=args.seq, weights=args.weights,
        intra_threshold=args.intra_threshold, cross_prune=args.cross_prune,
        d=args.d, voxel=args.voxel, assoc=args.assoc,
        use_sdt=not args.no_sdt, use_qim=not args.no_qim,
        seed=args.seed, max_bank=args.max_bank,
        latency_csv=args.latency_csv, events_jsonl=args.events_jsonl,
        dump_memory=args.dump_memory,
    )


def cmd_run(args):
    result = pipeline.run_sequence(_config_from_args(args))
    summary = result.latency_summary
    print(f"frames={len(result.per_frame)} instances={len(result.scene.instances)} "
          f"fusion_p50_ms={summary['p50']:.2f} fusion_p95_ms={summary['p95']:.2f}")
    if args.pred_csv:
        pipeline.export_predictions_csv(result, args.pred_csv)
    if args.ply:
        pipeline.export_ply(result, args.ply)
    if args.eval:
        ap, ap50, ap25 = pipeline.evaluate_result(result, args.seq)
        print(f"AP={ap:.4f}\nAP50={ap50:.4f}\nAP25={ap25:.4f}")
    return 0


def cmd_synth(args):
    if args.config:
        spec = synthworld.spec_from_yaml(args.config)
    else:
        spec = synthworld.random_scene(
            args.seed, n_objects=args.objects, frames=args.frames,
            trajectory=args.trajectory, feature_sigma=args.feature_sigma,
            fragment_k=args.fragment_k)
    synthworld.generate(spec, args.out)
    print(f"wrote {spec.frames} frames to {args.out}")
    return 0


def cmd_train(args):
    frames = [read_frame(p) for p in read_manifest(args.seq)]
    cfg = objectives.TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed,
                                 d=args.d, loss_csv=args.loss_csv)
    model, curve = objectives.toy_train(frames, cfg)
    if args.out_weights:
        save_weights(model, args.out_weights)
    print(f"initial l_total={curve[0]['l_total']:.4f} final l_total={curve[-1]['l_total']:.4f}")
    return 0


def cmd_eval(args):
    result = pipeline.run_sequence(pipeline.RunConfig(seq=args.seq, weights=args.weights, seed=args.seed))
    ap, ap50, ap25 = pipeline.evaluate_result(result, args.gt or args.seq)
    print(f"AP={ap:.4f}\nAP50={ap50:.4f}\nAP25={ap25:.4f}")
    return 0


def cmd_gradcheck(args):
    worst = 0.0
    for loss in ("seg", "dist", "xseg"):
        for sel in ("psi", "eta", "decoder0"):
            err = objectives.grad_check(loss, sel, eps=args.eps, seed=args.seed)
            status = "ok" if err < args.tol else "FAIL"
            print(f"{loss:5s} wrt {sel:8s} max_rel_err={err:.2e} [{status}]")
            worst = max(worst, err)
    return 0 if worst < args.tol else 1


def cmd_bench(args):
    from .bench import run_bench
    report = run_bench(seed=args.seed, min_queries=args.min_queries,
                       min_instances=args.min_instances)
    print(f"bank={report['bank']} instances={report['instances']} "
          f"fusion_p50_ms={report['p50']:.2f} fusion_p95_ms={report['p95']:.2f}")
    return 0


def main(argv=None):
    ap = argparse.ArgumentParser(prog="streamseg")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="process a sequence online")
    _add_run_flags(p)
    p.add_argument("--eval", action="store_true", help="also score against gt_instances.npy")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("synth", help="generate a synthetic sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="scene spec YAML")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--objects", type=int, default=5)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--trajectory", choices=["orbit", "sweep"], default="orbit")
    p.add_argument("--feature-sigma", type=float, default=0.1)
    p.add_argument("--fragment-k", type=int, default=2)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="toy-train decoder weights")
    p.add_argument("--seq", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--out-weights", default=None)
    p.add_argument("--loss-csv", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="run a sequence and report AP metrics")
    p.add_argument("--seq", required=True)
    p.add_argument("--gt", default=None, help="directory holding gt_instances.npy (default: --seq)")
    p.add_argument("--pred", default=None, help="unused placeholder for external predictions")
    p.add_argument("--weights", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="fusion latency benchmark")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--min-queries", type=int, default=500)
    p.add_argument("--min-instances", type=int, default=50)
    p.set_defaults(fn=cmd_bench)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ValidationError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except InternalConsistencyError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 3
    except StreamSegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
