#!/usr/bin/env python3
"""
DCML CLI v1.0.0
===============
  dcml synth     --config c.json --out DIR
  dcml train     --config c.json --stage {race|deaging|dcml|all}
  dcml eval      --ckpt F --fold N --topk 1,5 [--config c.json]
  dcml gradcheck --seed S
  dcml ablate    --modalities LIST --grid r1,r2 [--fusion MODES] [--seeds LIST]

Errors go to stderr as {"error": {"code", "message", "details"}} and the
process exits nonzero (2 for configuration problems, 3 for missing
dependencies, 1 otherwise).
===============
"""

import sys
import json
import logging
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

try:
    from .dcml_shared import (VERSION, ConfigError, DCMLError, DependencyError, format_output,
                              setup_logging)
    from .dcml_config import RunConfig, load_config, to_dict
    from .dcml_synth import generate_family_dataset, save_dataset, latent_pair_auc, make_protocol
    from .dcml_gradcheck import gradcheck_suite
    from .dcml_pipeline import (MODALITY_SETS, RATIO_GRID, ablation_run, ablation_table,
                                evaluate_checkpoint, parse_modality_set, train_pipeline)
except ImportError:
    from dcml_shared import (VERSION, ConfigError, DCMLError, DependencyError, format_output,
                             setup_logging)
    from dcml_config import RunConfig, load_config, to_dict
    from dcml_synth import generate_family_dataset, save_dataset, latent_pair_auc, make_protocol
    from dcml_gradcheck import gradcheck_suite
    from dcml_pipeline import (MODALITY_SETS, RATIO_GRID, ablation_run, ablation_table,
                               evaluate_checkpoint, parse_modality_set, train_pipeline)

logger = logging.getLogger(__name__)

EXIT_CODES = {ConfigError: 2, DependencyError: 3}

# ============= ARGUMENT HELPERS =============
def parse_int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ConfigError("expected a comma-separated list of integers", value=text)
    if not values:
        raise ConfigError("empty integer list", value=text)
    return values

def parse_grid(text: str) -> List[Tuple[float, float]]:
    """'4,2' -> [(4, 2)]; 'all' -> the full 4x4 ratio grid; '4,2;8,2' -> two points"""
    if text == 'all':
        return [(r1, r2) for r1 in RATIO_GRID for r2 in RATIO_GRID]
    grid = []
    for point in text.split(';'):
        parts = point.split(',')
        if len(parts) != 2:
            raise ConfigError("grid points are r1,r2", value=point)
        try:
            grid.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ConfigError("grid ratios must be numbers", value=point)
    return grid

# ============= COMMANDS =============
def cmd_synth(args, cfg: RunConfig) -> Dict[str, Any]:
    d = cfg.data
    samples = generate_family_dataset(d.seed, d.num_families, d.members_per_family, d.image_size,
                                      d.noise_level, latent_dim=d.latent_dim)
    out = Path(args.out)
    save_dataset(out, samples, to_dict(cfg)['data'])
    auc = latent_pair_auc(samples, make_protocol(samples, cfg.seed, cfg.num_folds))
    return {'out': str(out), 'samples': len(samples), 'families': d.num_families, 'latent_auc': round(auc, 4)}

def cmd_train(args, cfg: RunConfig) -> Dict[str, Any]:
    if args.stage != 'all':
        cfg.stages = [args.stage]
    result = train_pipeline(cfg)
    summary: Dict[str, Any] = {'out': str(result.out_dir), 'stages': ','.join(cfg.stages)}
    summary.update({f"ckpt_{k}": str(v) for k, v in result.checkpoints.items()})
    if result.report is not None:
        for k in result.report.ks:
            summary[f"top{k}"] = round(result.report.mean('Avg', k), 2)
    return summary

def cmd_eval(args, cfg: RunConfig) -> Dict[str, Any]:
    ckpt = Path(args.ckpt)
    if not args.config and (ckpt.parent / "config.json").exists():
        cfg = load_config(ckpt.parent / "config.json")
    cfg.paths.out_dir = str(ckpt.parent)
    report = evaluate_checkpoint(cfg, ckpt, args.fold, parse_int_list(args.topk))
    if args.json:
        return report.to_dict()
    print(report.to_text())
    return {f"top{k}": round(report.mean('Avg', k), 2) for k in report.ks}

def cmd_gradcheck(args, cfg: RunConfig) -> Dict[str, Any]:
    report = gradcheck_suite(args.seed)
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.to_text())
    if not report.passed:
        raise DCMLError("gradcheck failed", failures=report.failures)
    return {'passed': report.passed, 'items': len(report.items)}

def cmd_ablate(args, cfg: RunConfig) -> Dict[str, Any]:
    modality_sets = ([list(v) for v in MODALITY_SETS.values()] if args.modalities == 'all'
                     else [parse_modality_set(m) for m in args.modalities.split(';')])
    grid = parse_grid(args.grid) if args.grid else None
    fusion_modes = args.fusion.split(',')
    seeds = parse_int_list(args.seeds) if args.seeds else None
    entries = ablation_run(cfg, modality_sets, grid, fusion_modes, seeds)
    if args.json:
        return {'runs': [e.to_dict() for e in entries]}
    print(ablation_table(entries, k=max(cfg.eval.topk)))
    return {'runs': len(entries), 'out': str(cfg.out_path() / "ablation.json")}

COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'eval': cmd_eval,
    'gradcheck': cmd_gradcheck,
    'ablate': cmd_ablate,
}

# ============= PARSER =============
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dcml', description='Unsupervised kinship learning on synthetic families')
    parser.add_argument('--version', action='version', version=f"dcml {VERSION}")
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p):
        p.add_argument('--config', help='JSON config file (merged over its "preset")')
        p.add_argument('--json', action='store_true', help='Output as JSON')
        p.add_argument('-v', '--verbose', action='count', default=0, help='-v info, -vv debug')
        return p

    p = common(sub.add_parser('synth', help='Generate and save the synthetic family dataset'))
    p.add_argument('--out', required=True, help='Dataset directory')
    p = common(sub.add_parser('train', help='Run training stages'))
    p.add_argument('--stage', choices=['race', 'deaging', 'dcml', 'all'], default='all')
    p = common(sub.add_parser('eval', help='Evaluate a dcml checkpoint on one fold'))
    p.add_argument('--ckpt', required=True)
    p.add_argument('--fold', type=int, default=0)
    p.add_argument('--topk', default='1,5')
    p = common(sub.add_parser('gradcheck', help='Finite-difference gradient checks'))
    p.add_argument('--seed', type=int, default=0)
    p = common(sub.add_parser('ablate', help='Modality / reduction-ratio / fusion ablations'))
    p.add_argument('--modalities', default='all',
                   help="'all' or ';'-separated sets such as face;face+race")
    p.add_argument('--grid', help="r1,r2 point(s) separated by ';', or 'all' for the 4x4 grid")
    p.add_argument('--fusion', default='adaptive', help='comma-separated: adaptive,manual,concat')
    p.add_argument('--seeds', help='comma-separated seeds')
    return parser

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose == 1 else None
    setup_logging(level=level)
    try:
        cfg = load_config(Path(args.config) if args.config else None)
        result = COMMANDS[args.command](args, cfg)
        print(format_output(result, 'json' if args.json else 'pipe'))
        return 0
    except DCMLError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return next((code for cls, code in EXIT_CODES.items() if isinstance(e, cls)), 1)
    except KeyboardInterrupt:
        print(json.dumps({'error': {'code': 'interrupted', 'message': 'interrupted', 'details': {}}}),
              file=sys.stderr)
        return 130
    except Exception as e:
        logger.debug("[CLI] unexpected failure", exc_info=True)
        print(json.dumps({'error': {'code': 'internal_error', 'message': str(e) or type(e).__name__,
                                    'details': {'type': type(e).__name__}}}), file=sys.stderr)
        return 1

if __name__ == "__main__":
    sys.exit(main())
