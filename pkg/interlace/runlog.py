"""
Run logging: epoch listeners and the CSV result files.
"""
import csv
import logging
import os

import pandas as pd

from interlace.evalkit import METRIC_COLUMNS

logger = logging.getLogger(__name__)

TRAINING_LOG = 'training_log.csv'
METRICS = 'metrics.csv'
EARLY_WARNING = 'early_warning.csv'
SWEEP = 'sweep.csv'

TRAINING_LOG_COLUMNS = (
    'epoch', 'loss_total', 'loss_pred', 'loss_drift_u', 'loss_drift_i',
    'loss_state', 'val_metric', 'seconds',
)
EARLY_WARNING_COLUMNS = ('offset', 'mean_ratio', 'ci_low', 'ci_high')


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


class TrainingLogListener:
    """
    Appends one ``training_log.csv`` row per finished epoch.

    The file is truncated and given its header on creation of the listener.
    """

    def __init__(self, out_dir):
        self.path = os.path.join(ensure_dir(out_dir), TRAINING_LOG)
        with open(self.path, 'w', encoding='utf-8', newline='') as handle:
            csv.writer(handle, lineterminator='\n').writerow(TRAINING_LOG_COLUMNS)

    def __call__(self, report):
        try:
            with open(self.path, 'a', encoding='utf-8', newline='') as handle:
                csv.writer(handle, lineterminator='\n').writerow(
                    [report.epoch] + ['%.17g' % getattr(report, name) for name in TRAINING_LOG_COLUMNS[1:]]
                )
        except OSError as exc:
            logger.error(f"Failed to append to {self.path}: {exc}")
            raise


def register_listeners(out_dir, extra=()):
    """Listeners for a training run writing into ``out_dir``."""
    return [TrainingLogListener(out_dir), *extra]


def write_metrics(out_dir, reports):
    """Write ``metrics.csv`` (task,split,mrr,recall10,auc,n) for EvalReports."""
    path = os.path.join(ensure_dir(out_dir), METRICS)
    table = pd.DataFrame([report.as_row() for report in reports], columns=list(METRIC_COLUMNS))
    table.to_csv(path, index=False, lineterminator='\n')
    logger.info(f"Metrics written to {path}")
    return path


def write_early_warning(out_dir, points):
    """Write ``early_warning.csv`` (offset,mean_ratio,ci_low,ci_high)."""
    path = os.path.join(ensure_dir(out_dir), EARLY_WARNING)
    table = pd.DataFrame([tuple(point) for point in points], columns=list(EARLY_WARNING_COLUMNS))
    table.to_csv(path, index=False, lineterminator='\n')
    logger.info(f"Early-warning series written to {path}")
    return path


def write_sweep(out_dir, table):
    path = os.path.join(ensure_dir(out_dir), SWEEP)
    table.to_csv(path, index=False, lineterminator='\n')
    logger.info(f"Sweep table written to {path}")
    return path
