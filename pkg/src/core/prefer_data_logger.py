#!/usr/bin/env python3
"""
PREFER Progress Logger - Training Metrics Stream
Part of the PREFER prompt ensemble engine

Appends one JSON record per boosting step (error, learner weight, calls,
timing) so runs can be compared and curves drawn afterwards.
"""

import json
import logging
import os
from datetime import datetime
from typing import Any, Dict, Optional

import pandas as pd

STEP_FIELDS = [
    'timestamp',
    'mode',
    'iteration',
    'prompt_id',
    'error',
    'lambda',
    'admitted',
    'calls',
    'calls_total',
    'elapsed_seconds',
    'event',
    'notes',
]


class PreferDataLogger:
    """
    Line-delimited JSON logger for boosting progress.

    Records are separate from log lines: log lines are for people, this
    stream is for pandas.
    """

    def __init__(self, jsonl_file: Optional[str] = 'progress.jsonl'):
        """
        Initialize progress logger.

        Args:
            jsonl_file (str): Path to the progress file; None keeps records in memory only
        """
        self.jsonl_file = jsonl_file
        self.records = []
        self.logger = logging.getLogger('prefer.progress')
        if jsonl_file:
            directory = os.path.dirname(jsonl_file)
            if directory:
                os.makedirs(directory, exist_ok=True)

    def log_step(self, iteration: int, error: Optional[float], weight: Optional[float],
                 calls: int, calls_total: int, admitted: bool, elapsed_seconds: float,
                 mode: str = 'full', prompt_id: str = '', event: str = 'step', notes: str = ''):
        """
        Log one boosting step.

        Args:
            iteration (int): Boosting iteration, starting at 0
            error (float): Weighted training error of the step's prompt
            weight (float): Learner weight (lambda)
            calls (int): Provider calls used by this step
            calls_total (int): Provider calls since training started
            admitted (bool): Whether the learner joined the ensemble
            elapsed_seconds (float): Wall-clock time of the step
            event (str): step, discarded, converged or stopped
        """
        record = {
            'timestamp': datetime.now().isoformat(),
            'mode': mode,
            'iteration': iteration,
            'prompt_id': prompt_id,
            'error': None if error is None else round(float(error), 12),
            'lambda': None if weight is None else round(float(weight), 12),
            'admitted': bool(admitted),
            'calls': int(calls),
            'calls_total': int(calls_total),
            'elapsed_seconds': round(float(elapsed_seconds), 4),
            'event': event,
            'notes': notes,
        }
        self.write(record)
        return record

    def write(self, record: Dict[str, Any]):
        self.records.append(record)
        if not self.jsonl_file:
            return
        with open(self.jsonl_file, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, sort_keys=True) + '\n')

    def get_frame(self) -> pd.DataFrame:
        """Read the progress stream back as a DataFrame (empty if nothing logged)."""
        if self.jsonl_file and os.path.exists(self.jsonl_file) and os.path.getsize(self.jsonl_file):
            try:
                df = pd.read_json(self.jsonl_file, lines=True)
            except ValueError as e:
                self.logger.error(f"Could not read progress file {self.jsonl_file}: {e}")
                return pd.DataFrame(columns=STEP_FIELDS)
        else:
            df = pd.DataFrame(self.records, columns=STEP_FIELDS)
        if not df.empty:
            # Derived column for curves: ensemble weight accumulated so far
            admitted_lambda = df['lambda'].where(df['admitted'].astype(bool), 0.0).fillna(0.0)
            df['cumulative_lambda'] = admitted_lambda.cumsum()
        return df
