"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 run failure.
"""

import argparse
import json
import sys

from . import pipeline
from .config import SamplerConfig, resolve_run_config
from .errors import ConfigError, PipelineError


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--case-id", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data-dir", default=None,
                   help="ingest views/masks from a directory instead of the synthetic scene")
    p.add_argument("--phase1-steps", type=int, default=None)
    p.add_argument("--phase2-steps", type=int, default=None)
    p.add_argument("--views-per-batch", type=int, default=None)
    p.add_argument("--pretrain-steps", type=int, default=None)


def _overrides_from_args(args) -> dict:
    over = {}
    if args.case_id is not None:
        over["case_id"] = args.case_id
    if args.seed is not None:
        over["seed"] = args.seed
    if args.data_dir is not None:
        over["data_dir"] = args.data_dir
    if args.phase1_steps is not None:
        over.setdefault("phase1", {})["steps"] = args.phase1_steps
    if args.phase2_steps is not None:
        over.setdefault("phase2", {})["steps"] = args.phase2_steps
    if args.views_per_batch is not None:
        over.setdefault("ablation", {})["views_per_batch"] = args.views_per_batch
    if args.pretrain_steps is not None:
        over.setdefault("backbone", {})["pretrain_steps"] = args.pretrain_steps
    return over


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvpersona",
        description="two-phase multi-view personalization pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("personalize", help="run phase 1 + phase 2 on a benchmark case")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--from-record", default=None,
                   help="reproduce a previous run from its run_record.json")

    p = sub.add_parser("edit", help="sample edited views from a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--case-id", type=int, default=None)
    p.add_argument("--prompt", default=None, help="override the composed edit prompt")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--guidance-scale", type=float, default=None)
    p.add_argument("--num-steps", type=int, default=None)
    p.add_argument("--from-record", default=None)

    p = sub.add_parser("evaluate", help="directional metrics between two view sets")
    p.add_argument("--original", required=True)
    p.add_argument("--edited", required=True)
    p.add_argument("--case-id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=70,
                   help="number of views per set (protocol default 70)")

    p = sub.add_parser("ablate", help="run the ablation grid with shared seeds")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--arms", default="full,views_1,views_2,views_3,"
                   "no_attention_loss,no_masked_loss,ti_only,db_only")

    p = sub.add_parser("plan-study", help="balanced user-study assignment plan")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--participants", type=int, default=30)
    p.add_argument("--per-participant", type=int, default=20)

    p = sub.add_parser("aggregate-study", help="tally study responses against a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--responses", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "personalize":
            if args.from_record is not None:
                rec = pipeline.rerun_from_record(args.from_record, args.out)
            else:
                cfg = resolve_run_config(args.config, _overrides_from_args(args))
                rec = pipeline.cmd_personalize(cfg, args.out)
            print(json.dumps({"out": args.out,
                              "wall_time_s": rec["wall_time_s"]}))
        elif args.command == "edit":
            if args.from_record is not None:
                rec = pipeline.rerun_from_record(args.from_record, args.out)
            else:
                if args.checkpoint is None:
                    raise ConfigError("edit needs --checkpoint or --from-record")
                sampler_cfg = SamplerConfig()
                if args.guidance_scale is not None:
                    sampler_cfg.guidance_scale = args.guidance_scale
                if args.num_steps is not None:
                    sampler_cfg.num_steps = args.num_steps
                rec = pipeline.cmd_edit(args.checkpoint, args.out,
                                        case_id=args.case_id,
                                        prompt_override=args.prompt,
                                        sampler_cfg=sampler_cfg, seed=args.seed)
            print(json.dumps({"out": args.out, "prompt": rec["prompt"]}))
        elif args.command == "evaluate":
            result = pipeline.cmd_evaluate(args.original, args.edited,
                                           args.case_id, args.out, views=args.views)
            print(json.dumps(result["scores"]))
        elif args.command == "ablate":
            cfg = resolve_run_config(args.config, _overrides_from_args(args))
            arms = [a.strip() for a in args.arms.split(",") if a.strip()]
            report = pipeline.cmd_ablate(cfg, arms, args.out)
            failed = [r["arm"] for r in report["arms"] if "error" in r]
            print(json.dumps({"out": args.out, "failed_arms": failed}))
            if failed:
                return 4
        elif args.command == "plan-study":
            pipeline.cmd_plan_study(args.seed, args.out,
                                    n_participants=args.participants,
                                    per_participant=args.per_participant)
            print(json.dumps({"out": args.out}))
        elif args.command == "aggregate-study":
            table = pipeline.cmd_aggregate_study(args.plan, args.responses, args.out)
            n = sum(cell["ours"] + cell["baseline"] + cell["undecided"]
                    for cell in table.values())
            print(json.dumps({"out": args.out, "n_responses": n}))
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
