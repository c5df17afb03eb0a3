"""Ablation grids over sharing strategy, fusion components and fusion direction.

Every cell is trained and evaluated once per seed; rows carry the cell's full
run config so a report can be traced back to the runs that produced it.
"""
import copy
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from Errors import ConfigError
from FusionOps import BIDIRECTIONAL, ONE_TO_TWO, TWO_TO_ONE, donor_of, receivers_for
from Network import ASYM, SHARING, branch_checksums, build, unfused
from ParamCounter import count_params
from ResultPlotter import ResultPlotter
from SynthData import bayes_ceiling, generate
from Trainer import evaluate_split, fit

logger = logging.getLogger(__name__)

EXPERIMENTS = ('sharing', 'components', 'direction')
DIRECTION_METHODS = ('concat', 'average', 'attention', ASYM)
DIRECTION_LABELS = {ONE_TO_TWO: '1->2', TWO_TO_ONE: '2->1', BIDIRECTIONAL: 'bidirectional'}
# Per-modality gain/offset for the sharing grid when the base data has none
SHARING_GAINS = (1.0, 3.0)
SHARING_OFFSETS = (0.0, -1.0)
CHECKSUM_BATCH = 4


@dataclass
class Cell:
    name: str
    columns: dict
    run: object
    modality: int | None = None


def _variant(base, **net):
    run = copy.deepcopy(base)
    for key, value in net.items():
        setattr(run.net, key, value)
    return run


def sharing_cells(base):
    run = copy.deepcopy(base)
    if run.data.gains is None and run.data.offsets is None and run.data.modalities == 2:
        run.data.gains, run.data.offsets = SHARING_GAINS, SHARING_OFFSETS
    return [Cell(SHARING[strategy], {'sharing': SHARING[strategy]}, _variant(run, sharing=strategy))
            for strategy in SHARING]


def components_cells(base):
    cells = []
    for shuffle, shift, label in ((False, False, 'none'), (True, False, 'shuffle'),
                                  (False, True, 'shift'), (True, True, 'shuffle+shift')):
        for distill in (False, True):
            run = _variant(base, method=ASYM, shuffle=shuffle, shift=shift, cross_skip_only=False,
                           direction=BIDIRECTIONAL)
            run.optim.distill = distill
            name = f"{label}{'+distill' if distill else ''}"
            cells.append(Cell(name, {'fusion': label, 'distill': distill}, run))
    run = _variant(base, method=ASYM, shuffle=True, shift=False, cross_skip_only=True, direction=BIDIRECTIONAL)
    run.optim.distill = True
    cells.append(Cell('shuffle+cross_skip_only+distill', {'fusion': 'shuffle+cross_skip_only', 'distill': True}, run))
    for s in range(base.net.modalities):
        run = copy.deepcopy(base)
        run.net = unfused(run.net)
        run.net.modalities = 1
        run.optim.distill = False
        cells.append(Cell(f"unimodal-m{s + 1}", {'fusion': f'unimodal-m{s + 1}', 'distill': False}, run, modality=s))
    return cells


def direction_cells(base):
    if base.net.modalities != 2:
        raise ConfigError("the direction grid needs exactly two modalities")
    cells = []
    for direction in (ONE_TO_TWO, TWO_TO_ONE, BIDIRECTIONAL):
        for method in DIRECTION_METHODS:
            asym = method == ASYM
            run = _variant(base, method=method, direction=direction, shuffle=asym, shift=asym, cross_skip_only=False)
            name = f"{DIRECTION_LABELS[direction]}/{method}"
            cells.append(Cell(name, {'direction': DIRECTION_LABELS[direction], 'method': method}, run))
    return cells


GRIDS = {'sharing': sharing_cells, 'components': components_cells, 'direction': direction_cells}


def _plain(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return None if math.isnan(value) else float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


@dataclass
class ExperimentReport:
    name: str
    seeds: list
    runs: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    wall_times: dict = field(default_factory=dict)

    def to_record(self):
        """Deterministic part of the report; wall times live in timing.json."""
        return {'experiment': self.name, 'seeds': self.seeds, 'runs': self.runs, 'summary': self.summary}

    def summary_frame(self):
        return pd.DataFrame(self.summary)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, 'report.json'), 'w') as f:
            json.dump(self.to_record(), f, indent=2, sort_keys=True)
        frame = self.summary_frame()
        frame.to_csv(os.path.join(out_dir, 'summary.csv'), index=False)
        with open(os.path.join(out_dir, 'timing.json'), 'w') as f:
            json.dump(self.wall_times, f, indent=2, sort_keys=True)
        ResultPlotter.plot_summary(frame, os.path.join(out_dir, 'summary.png'), f"{self.name} experiment")
        logger.info("wrote %s report to %s", self.name, out_dir)


class _DataCache:
    def __init__(self):
        self._splits = {}
        self._ceilings = {}

    @staticmethod
    def _key(data):
        return json.dumps(data.to_dict(), sort_keys=True)

    def splits(self, data):
        key = self._key(data)
        if key not in self._splits:
            self._splits[key] = generate(data)
        return self._splits[key]

    def ceiling(self, data):
        key = self._key(data)
        if key not in self._ceilings:
            self._ceilings[key] = bayes_ceiling(data)
        return self._ceilings[key]


def _donor_checksums_match(net, run, test):
    receivers = receivers_for(run.net.direction, run.net.modalities)
    if len(receivers) != 1:
        return None
    donor = donor_of(receivers[0], run.net.modalities)
    inputs, _ = test.batch(np.arange(min(CHECKSUM_BATCH, len(test))))
    twin = build(unfused(run.net))
    return branch_checksums(net, inputs)[donor] == branch_checksums(twin, inputs)[donor]


def run_cell(experiment, cell, seed, cache):
    run = copy.deepcopy(cell.run)
    run.seed = run.net.seed = run.data.seed = seed
    if cell.modality is None:
        run.validate()
    else:
        # Unimodal baselines read one modality of the shared multimodal data
        run.net.validate()
        run.data.validate()
    train, test = cache.splits(run.data)
    ceiling = cache.ceiling(run.data)
    if cell.modality is not None:
        train, test = train.modality(cell.modality), test.modality(cell.modality)
        reference = ceiling.per_modality[cell.modality]
    else:
        reference = ceiling.fused

    net = build(run.net)
    row = {'experiment': experiment, 'cell': cell.name, **cell.columns, 'seed': seed}
    if experiment == 'direction':
        row['donor_checksum_match'] = _donor_checksums_match(net, run, test)
    fit(net, train, run.optim, seed)
    metrics = evaluate_split(net, test, run.net.num_classes)
    ensemble = metrics['ensemble']
    params = count_params(net)

    pixels = len(test) * run.data.height * run.data.width
    slack = 3.0 * math.sqrt(max(reference * (1.0 - reference), 0.0) / pixels)
    row.update({
        'miou': ensemble.mean_iou,
        'pixel_acc': ensemble.pixel_accuracy,
        'mean_acc': ensemble.mean_accuracy,
        'params': params.total,
        'param_overhead': params.overhead,
        'bayes_ceiling': reference,
        'within_ceiling': ensemble.pixel_accuracy <= reference + slack,
        'config': json.dumps(run.to_dict(), sort_keys=True),
    })
    for s, report in enumerate(metrics['modalities']):
        row[f'miou_m{s + 1}'] = report.mean_iou
    return row


def _summarize(runs):
    frame = pd.DataFrame(runs)
    metric_cols = ['miou', 'pixel_acc', 'mean_acc', 'params']
    aggregated = frame.groupby('cell', sort=False)[metric_cols].agg(['mean', 'std'])
    aggregated.columns = [f'{metric}_{stat}' for metric, stat in aggregated.columns]
    aggregated['seeds'] = frame.groupby('cell', sort=False)['seed'].count()
    coordinates = [c for c in frame.columns if c not in metric_cols and c not in
                   ('experiment', 'seed', 'config', 'param_overhead', 'bayes_ceiling', 'within_ceiling')
                   and not c.startswith('miou_m') and c != 'cell']
    firsts = frame.groupby('cell', sort=False)[coordinates].first()
    summary = firsts.join(aggregated).reset_index()
    return [{k: _plain(v) for k, v in row.items()} for row in summary.to_dict('records')]


def run_experiment(name, base, seeds=3):
    """Run one ablation grid over ``seeds`` (a count or an explicit list)."""
    if name not in GRIDS:
        raise ConfigError(f"unknown experiment {name!r}; expected one of {', '.join(EXPERIMENTS)}")
    seeds = list(range(base.seed, base.seed + seeds)) if isinstance(seeds, int) else list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    cells = GRIDS[name](base)
    cache = _DataCache()
    runs, wall_times = [], {}
    for cell in cells:
        for seed in seeds:
            logger.info("%s: cell %s seed %d", name, cell.name, seed)
            start = time.perf_counter()
            row = run_cell(name, cell, seed, cache)
            wall_times[f"{cell.name}/seed{seed}"] = time.perf_counter() - start
            runs.append({k: _plain(v) for k, v in row.items()})
    return ExperimentReport(name, seeds, runs, _summarize(runs), wall_times)
