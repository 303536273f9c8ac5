"""
JSON API for simcache-lab
Prediction and baseline estimates for one capacity over HTTP
"""
import logging
from typing import Any, Dict, Tuple

from flask import Blueprint, current_app, jsonify, request

from models import ExperimentConfig
from services.exceptions import ValidationError
from services.experiment_runner import ExperimentRunner
from utils.decorators import json_errors
from utils.reproducibility import RunIdentity
from utils.results_export import ResultsExporter

logger = logging.getLogger(__name__)

lab_bp = Blueprint('lab', __name__)


def _read_request() -> Tuple[ExperimentConfig, float]:
    """Split the JSON body into an ExperimentConfig and the capacity C"""
    payload: Dict[str, Any] = request.get_json(silent=True)
    if not isinstance(payload, dict):
        raise ValidationError('Request body must be a JSON object')
    payload = dict(payload)
    capacity = payload.pop('C', None)
    config = ExperimentConfig.from_dict(payload)
    if capacity is None:
        capacity = config.capacities[0]
    try:
        capacity = float(capacity)
    except (TypeError, ValueError):
        raise ValidationError('C must be a number', C=capacity)
    config.capacities = [capacity]
    return config, capacity


@lab_bp.route('/health')
def health():
    """Health check endpoint for deployment verification."""
    return jsonify({'status': 'ok', 'version': RunIdentity.artifact_version()})


@lab_bp.route('/api/predict', methods=['POST'])
@json_errors
def api_predict():
    """Fixed-point prediction for one capacity."""
    config, capacity = _read_request()
    runner = ExperimentRunner(current_app.config)
    report, _ = runner.predict(runner.prepare(config), capacity)
    logger.info(f"API predict C={capacity}: H={report.hit_rate:.5f}, converged={report.converged}")
    body = {'C': capacity, **report.to_dict(),
            'reproducibility': RunIdentity.block('api-predict', config.to_dict(), [config.seed])}
    return jsonify(ResultsExporter.serialize_value(body))


@lab_bp.route('/api/baselines', methods=['POST'])
@json_errors
def api_baselines():
    """LRU, LRU-agg and static coverage estimates for one capacity."""
    config, capacity = _read_request()
    runner = ExperimentRunner(current_app.config)
    body = runner.baselines(runner.prepare(config), capacity)
    body['reproducibility'] = RunIdentity.block('api-baselines', config.to_dict(), [config.seed])
    return jsonify(ResultsExporter.serialize_value(body))
