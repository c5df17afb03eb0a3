import argparse
import json
import logging
import os
import sys

# Dynamically add 'src' to the module search path
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from Config import config
from CheckpointStorage import load_checkpoint, save_checkpoint
from DatasetStorage import load_dataset, write_dataset
from Errors import AsymFusionError
from Experiments import EXPERIMENTS, run_experiment
from GradCheck import OP_CASES, run_suite
from Network import build
from ParamCounter import PRESETS, count_params, preset
from RunConfig import RunConfig, parse_override_args
from SymmetryProbe import (CONSTRUCTIVE_BLOCKS, SEARCH_BLOCKS, refute_symmetry_by_search,
                           verify_symmetric_by_construction)
from SynthData import bayes_ceiling, generate
from Trainer import evaluate_split, fit, make_optimizer

logger = logging.getLogger('asymfusion')


def emit(record):
    print(json.dumps(record, indent=2, sort_keys=True))


def load_run_config(args, overrides):
    run = RunConfig.from_json(args.config) if args.config else RunConfig()
    run.apply_overrides(overrides)
    if args.out:
        run.out = args.out
    if args.seed is not None:
        run.seed = run.net.seed = run.data.seed = args.seed
    return run.validate()


def _metrics_record(metrics):
    return {'ensemble': metrics['ensemble'].to_record(),
            'modalities': [m.to_record() for m in metrics['modalities']]}


def cmd_gen_data(args, overrides):
    run = load_run_config(args, overrides)
    train, test = generate(run.data)
    data_dir = os.path.join(run.out, 'data')
    os.makedirs(data_dir, exist_ok=True)
    write_dataset(os.path.join(data_dir, 'train.bin'), train, run.data.num_classes)
    write_dataset(os.path.join(data_dir, 'test.bin'), test, run.data.num_classes)
    emit({'train': len(train), 'test': len(test), 'directory': data_dir,
          'bayes_ceiling': bayes_ceiling(run.data).to_record()})
    return 0


def cmd_train(args, overrides):
    run = load_run_config(args, overrides)
    train, test = generate(run.data)
    net = build(run.net)
    optimizer = make_optimizer(net, run.optim)
    fit(net, train, run.optim, run.seed, optimizer)
    save_checkpoint(net, optimizer, run.out)
    run.save(os.path.join(run.out, 'run_config.json'))
    record = _metrics_record(evaluate_split(net, test, run.net.num_classes))
    with open(os.path.join(run.out, 'metrics.json'), 'w') as f:
        json.dump(record, f, indent=2, sort_keys=True)
    emit(record)
    return 0


def cmd_eval(args, overrides):
    net, _ = load_checkpoint(args.checkpoint)
    if args.data:
        test, header = load_dataset(args.data)
        num_classes = header['num_classes']
    else:
        run = load_run_config(args, overrides)
        _, test = generate(run.data)
        num_classes = run.data.num_classes
    emit(_metrics_record(evaluate_split(net, test, num_classes)))
    return 0


def cmd_gradcheck(args, overrides):
    reports = run_suite(seed=args.seed or 0, ops=args.op, include_network=not args.ops_only)
    emit([r.to_record() for r in reports])
    failed = [r.op for r in reports if not r.passed]
    if failed:
        logger.error("gradient check failed for: %s", ', '.join(failed))
        return 1
    return 0


def cmd_verify_symmetry(args, overrides):
    mode = args.mode
    if mode == 'auto':
        mode = 'construct' if args.block in CONSTRUCTIVE_BLOCKS else 'refute'
    seed = args.seed or 0
    if mode == 'construct':
        verdict = verify_symmetric_by_construction(args.block, trials=args.trials, seed=seed)
    else:
        verdict = refute_symmetry_by_search(args.block, seed=seed, zero_first=args.zero_first)
    emit(verdict.to_record())
    return 0


def cmd_count_params(args, overrides):
    if args.preset:
        cfg, reference = preset(args.preset, args.modalities or 2)
    else:
        run = load_run_config(args, overrides)
        cfg, reference = run.net, None
        if args.modalities:
            cfg.modalities = args.modalities
    report = count_params(cfg, reference)
    record = report.to_record()
    print(f"extra parameters per added modality: {report.extra_norm_per_modality:,}")
    print(f"overhead fraction: {report.overhead:.5f}")
    emit(record)
    return 0


def cmd_experiment(args, overrides):
    run = load_run_config(args, overrides)
    report = run_experiment(args.name, run, args.seeds)
    report.write(os.path.join(run.out, args.name))
    emit({'experiment': args.name, 'summary': report.summary})
    return 0


def build_parser():
    parser = argparse.ArgumentParser(description="Asymmetric multimodal fusion on synthetic segmentation data.",
                                     epilog="Run-config values can be overridden with dotted flags, "
                                            "e.g. --net.direction 2to1 --optim.lr 0.05.")
    sub = parser.add_subparsers(dest='command', required=True)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config.")
        p.add_argument("--out", default=None, help=f"Output directory (default: {config.OUT}).")
        p.add_argument("--seed", type=int, default=None, help="Seed for data, init and batching.")
        p.set_defaults(handler=handler)
        return p

    add('gen-data', cmd_gen_data, "Generate and export the synthetic dataset.")
    add('train', cmd_train, "Train one network and write a checkpoint.")
    p = add('eval', cmd_eval, "Evaluate a checkpoint on the test split.")
    p.add_argument("--checkpoint", required=True, help="Directory holding checkpoint.bin and its manifest.")
    p.add_argument("--data", help="Exported test split; regenerated from the config when omitted.")
    p = add('gradcheck', cmd_gradcheck, "Central-difference gradient checks.")
    p.add_argument("--op", action='append', choices=sorted(OP_CASES), help="Restrict to these ops.")
    p.add_argument("--ops-only", action='store_true', help="Skip the end-to-end network check.")
    p = add('verify-symmetry', cmd_verify_symmetry, "Check whether a fusion block is symmetric.")
    p.add_argument("--block", required=True, choices=sorted(set(CONSTRUCTIVE_BLOCKS) | set(SEARCH_BLOCKS)))
    p.add_argument("--mode", choices=('auto', 'construct', 'refute'), default='auto')
    p.add_argument("--trials", type=int, default=20, help="Random input pairs for the constructive check.")
    p.add_argument("--zero-first", action='store_true', help="Refute with the first input fixed to zero.")
    p = add('count-params', cmd_count_params, "Exact parameter accounting.")
    p.add_argument("--preset", choices=sorted(PRESETS), help="Named layer table instead of the run config.")
    p.add_argument("--modalities", type=int, default=None, help="Number of modalities (default 2 for presets).")
    p = add('experiment', cmd_experiment, "Run an ablation grid.")
    p.add_argument("name", choices=EXPERIMENTS)
    p.add_argument("--seeds", type=int, default=3, help="Number of seeds per cell.")
    return parser


def main(argv=None):
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    stray = [t for t in extras if t.startswith('--') and '.' not in t.split('=', 1)[0]]
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")

    logging.basicConfig(level=config.LOG_LEVEL, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return args.handler(args, parse_override_args(extras))
    except AsymFusionError as e:
        print(json.dumps(e.to_record(), sort_keys=True), file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
