"""Command line, experiment configuration and output files.

Exit codes: 0 success, 1 configuration error, 2 solver or stage failure,
3 when a certified residual bound exceeds --epsilon.
"""
import argparse
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import pandas as pd

from baseline import sample_max
from bound_engine import TheoryParams
from cutgen import CUT_MODES, CutLog
from generators import GeneratorError, gen_gradient, gen_identity, gen_lasso, gen_network_flow
from milp_core import SolveOptions
from model_ir import ModelIRError, ProblemFamily, family_from_dict, validate
from sentry_init import capture_failure, tag_run
from utils import log_event
from verifier import VerificationError, VerifyConfig, compute_R, run_sequential

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_EPSILON = 3

GENERATORS = {
    'lasso': gen_lasso,
    'network_flow': gen_network_flow,
    'identity': gen_identity,
    'gradient': gen_gradient,
}


class ConfigError(Exception):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        super().__init__(message)
        self.line = line
        self.column = column

    def __str__(self):
        msg = super().__str__()
        if self.line is not None:
            return '%s (line %d, column %d)' % (msg, self.line, self.column or 0)
        return msg


@dataclass
class ExperimentConfig:
    generator: Optional[str] = None
    generator_params: Dict[str, Any] = field(default_factory=dict)
    family_doc: Optional[Dict[str, Any]] = None
    verify: VerifyConfig = field(default_factory=lambda: VerifyConfig(kmax=10))
    samples: int = 0
    seed: int = 0
    epsilon: Optional[float] = None
    results: Optional[str] = None
    json_out: Optional[str] = None
    cuts_out: Optional[str] = None
    bounds_dir: Optional[str] = None
    dump_model: Optional[str] = None

    def build_family(self) -> ProblemFamily:
        if self.family_doc is not None:
            try:
                family = family_from_dict(self.family_doc)
            except ModelIRError as e:
                raise ConfigError(str(e)) from e
        elif self.generator:
            try:
                gen = GENERATORS[self.generator]
            except KeyError:
                raise ConfigError('unknown generator %r (known: %s)' % (self.generator, ', '.join(GENERATORS)))
            params = dict(self.generator_params)
            if self.generator in ('lasso', 'network_flow'):
                params.setdefault('seed', self.seed)
            for key in ('cost_range', 'demand_box', 'box', 'x_box'):
                if key in params:
                    params[key] = tuple(params[key])
            try:
                family = gen(**params)
            except TypeError as e:
                raise ConfigError('bad parameters for %s: %s' % (self.generator, e)) from e
            except (GeneratorError, ModelIRError) as e:
                raise ConfigError(str(e)) from e
        else:
            raise ConfigError('config needs either "generator" or "family"')
        diags = validate(family)
        if diags:
            raise ConfigError('invalid family: %s' % '; '.join(diags))
        return family


def parse_theory(spec: Optional[str]) -> Optional[TheoryParams]:
    """none | contractive:BETA | averaged:D:Q | user:FILE (a JSON list of alphas)."""
    if not spec or spec == 'none':
        return None
    parts = spec.split(':')
    try:
        if parts[0] == 'contractive' and len(parts) == 2:
            tp = TheoryParams('contractive', beta=float(parts[1]))
        elif parts[0] == 'averaged' and len(parts) == 3:
            tp = TheoryParams('averaged', D_c=float(parts[1]), q_exp=float(parts[2]))
        elif parts[0] == 'user' and len(parts) == 2:
            with open(parts[1], 'r', encoding='utf-8') as fh:
                tp = TheoryParams('user_sequence', alphas=tuple(float(a) for a in json.load(fh)))
        else:
            raise ConfigError('bad --theory value %r' % spec)
    except (ValueError, OSError) as e:
        raise ConfigError('bad --theory value %r: %s' % (spec, e)) from e
    diags = tp.validate()
    if diags:
        raise ConfigError('; '.join(diags))
    return tp


def _verify_config(section: Dict[str, Any]) -> VerifyConfig:
    known = {'kmax', 'gap', 'time_limit', 'obbt_rounds', 'obbt_enabled', 'obbt_reuse_cuts', 'cut_mode',
             'cut_rounds', 'hull_base', 'compute_R', 'radius_box'}
    extra = set(section) - known - {'theory'}
    if extra:
        raise ConfigError('unknown verify keys: %s' % ', '.join(sorted(extra)))
    cfg = VerifyConfig(**{'kmax': 10, **{k: v for k, v in section.items() if k in known}})
    return replace(cfg, theory=parse_theory(section.get('theory')))


def config_from_dict(doc: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError('config must be a JSON object')
    cfg = ExperimentConfig()
    gen = doc.get('generator')
    if isinstance(gen, dict):
        cfg.generator = gen.get('name')
        cfg.generator_params = dict(gen.get('params') or {})
        cfg.seed = int(gen.get('seed', 0))
    elif isinstance(gen, str):
        cfg.generator = gen
    algorithm = doc.get('algorithm') or {}
    if 'variant' in algorithm:
        cfg.generator_params['variant'] = algorithm['variant']
    if 'eta_rule' in algorithm:
        cfg.generator_params['eta_rule'] = algorithm['eta_rule']
    if 'family' in doc:
        cfg.family_doc = doc['family']
    cfg.verify = _verify_config(doc.get('verify') or {})
    baseline = doc.get('baseline') or {}
    cfg.samples = int(baseline.get('samples', 0))
    if cfg.samples < 0:
        raise ConfigError('baseline.samples must be >= 0')
    if 'seed' in baseline:
        cfg.seed = int(baseline['seed'])
    out = doc.get('output') or {}
    cfg.results = out.get('results')
    cfg.json_out = out.get('json')
    cfg.cuts_out = out.get('cuts')
    cfg.bounds_dir = out.get('bounds_dir')
    cfg.dump_model = out.get('dump_model')
    if doc.get('epsilon') is not None:
        cfg.epsilon = float(doc['epsilon'])
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError('malformed JSON in %s: %s' % (path, e.msg), line=e.lineno, column=e.colno) from e
    except OSError as e:
        raise ConfigError('cannot read %s: %s' % (path, e)) from e
    try:
        return config_from_dict(doc)
    except (TypeError, ValueError) as e:
        raise ConfigError('invalid config %s: %s' % (path, e)) from e


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help='experiment JSON')
    common.add_argument('--kmax', type=int)
    common.add_argument('--gap', type=float)
    common.add_argument('--time-limit', type=float, dest='time_limit')
    common.add_argument('--seed', type=int)
    common.add_argument('--samples', type=int)
    common.add_argument('--out', help='results CSV')

    parser = argparse.ArgumentParser(prog='fpverify', description='Worst-case fixed-point residual verification')
    sub = parser.add_subparsers(dest='command', required=True)

    v = sub.add_parser('verify', parents=[common], help='run the sequential verifier')
    v.add_argument('--epsilon', type=float)
    v.add_argument('--no-obbt', action='store_true')
    v.add_argument('--cut-mode', choices=CUT_MODES)
    v.add_argument('--theory', help='none | contractive:BETA | averaged:D:Q | user:FILE')
    v.add_argument('--json-out')
    v.add_argument('--cuts-out')
    v.add_argument('--bounds-out', help='directory for per-K bound dumps')
    v.add_argument('--dump-model', help='directory for one LP file per K')

    sub.add_parser('sample', parents=[common], help='sample-maximum lower bounds only')

    r = sub.add_parser('radius', parents=[common], help='initial distance to a fixed point')
    r.add_argument('--radius-box', type=float)
    return parser


def apply_flags(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    v = cfg.verify
    if args.kmax is not None:
        v = replace(v, kmax=args.kmax)
    if args.gap is not None:
        v = replace(v, gap=args.gap)
    if args.time_limit is not None:
        v = replace(v, time_limit=args.time_limit)
    if getattr(args, 'no_obbt', False):
        v = replace(v, obbt_enabled=False)
    if getattr(args, 'cut_mode', None):
        v = replace(v, cut_mode=args.cut_mode)
    if getattr(args, 'theory', None):
        v = replace(v, theory=parse_theory(args.theory))
    if getattr(args, 'radius_box', None) is not None:
        v = replace(v, radius_box=args.radius_box)
    cfg.verify = v
    if args.seed is not None:
        cfg.seed = args.seed
    if args.samples is not None:
        cfg.samples = args.samples
    if args.out:
        cfg.results = args.out
    if getattr(args, 'epsilon', None) is not None:
        cfg.epsilon = args.epsilon
    for attr, flag in (('json_out', 'json_out'), ('cuts_out', 'cuts_out'), ('bounds_dir', 'bounds_out'),
                       ('dump_model', 'dump_model')):
        if getattr(args, flag, None):
            setattr(cfg, attr, getattr(args, flag))
    diags = cfg.verify.validate()
    if diags:
        raise ConfigError('; '.join(diags))
    return cfg


def _model_dumper(directory: str):
    os.makedirs(directory, exist_ok=True)

    def dump(K: int, model) -> None:
        model.write_lp(os.path.join(directory, 'K%03d.lp' % K))
    return dump


def _write_bounds(report, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    for K, doc in report.bounds.items():
        with open(os.path.join(directory, 'bounds_K%03d.json' % K), 'w', encoding='utf-8') as fh:
            json.dump(doc, fh)


def _cmd_verify(cfg: ExperimentConfig, family: ProblemFamily) -> int:
    baseline = sample_max(family, cfg.samples, cfg.verify.kmax, cfg.seed) if cfg.samples > 0 else None
    cut_log = CutLog()
    on_model = _model_dumper(cfg.dump_model) if cfg.dump_model else None
    try:
        report = run_sequential(family, cfg.verify, baseline=baseline, cut_log=cut_log,
                                keep_bounds=bool(cfg.bounds_dir), on_model=on_model)
    except VerificationError as e:
        failed_K = len(e.report.records) + 1 if e.report is not None else None
        capture_failure(e, stage=e.stage, K=failed_K)
        logger.error('verification failed at stage %s: %s', e.stage, e)
        if e.report is not None and e.report.records and cfg.results:
            e.report.to_csv(cfg.results)
        return EXIT_SOLVER
    frame = report.to_frame()
    print(frame.to_string(index=False))
    if cfg.results:
        report.to_csv(cfg.results)
    if cfg.json_out:
        report.to_json(cfg.json_out)
    if cfg.cuts_out:
        pd.DataFrame(cut_log.rows(), columns=['round', 'step', 'component', 'family', 'violation',
                                              'size_I']).to_csv(cfg.cuts_out, index=False)
    if cfg.bounds_dir:
        _write_bounds(report, cfg.bounds_dir)
    if cfg.epsilon is not None:
        over = [r.K for r in report.records if r.best_bound > cfg.epsilon]
        if over:
            logger.info('residual bound exceeds epsilon=%g at K=%s', cfg.epsilon, over)
            return EXIT_EPSILON
    return EXIT_OK


def _cmd_sample(cfg: ExperimentConfig, family: ProblemFamily) -> int:
    res = sample_max(family, max(cfg.samples, 1), cfg.verify.kmax, cfg.seed)
    frame = pd.DataFrame({'K': range(1, cfg.verify.kmax + 1), 'sample_max': res.values})
    print(frame.to_string(index=False))
    if cfg.results:
        frame.to_csv(cfg.results, index=False)
    return EXIT_OK


def _cmd_radius(cfg: ExperimentConfig, family: ProblemFamily) -> int:
    try:
        R = compute_R(family, SolveOptions(gap=cfg.verify.gap, time_limit=cfg.verify.time_limit),
                      cfg.verify.radius_box)
    except VerificationError as e:
        capture_failure(e, stage='radius')
        logger.error('radius computation failed: %s', e)
        return EXIT_SOLVER
    print('R = %.10g' % R)
    if cfg.results:
        pd.DataFrame([{'family': family.name, 'R': R}]).to_csv(cfg.results, index=False)
    return EXIT_OK


COMMANDS = {'verify': _cmd_verify, 'sample': _cmd_sample, 'radius': _cmd_radius}


def run_cli(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_flags(load_config(args.config), args)
        family = cfg.build_family()
    except ConfigError as e:
        logger.error('config error: %s', e)
        return EXIT_CONFIG
    tag_run(command=args.command)
    log_event(logger, 'start', family=family.name, K=cfg.verify.kmax, stage=args.command)
    return COMMANDS[args.command](cfg, family)
