"""
Custom decorators for simcache-lab
"""
import json
import logging
import sys
from functools import wraps

import click
from flask import jsonify

from services.exceptions import LabError

logger = logging.getLogger(__name__)


def cli_errors(f):
    """Turn LabError into a JSON message on stderr and exit code 1"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except LabError as e:
            logger.error(f"{f.__name__} failed: {e.message}")
            click.echo(json.dumps(e.to_dict(), default=str), err=True)
            sys.exit(1)
    return decorated_function


def json_errors(f):
    """Map LabError to a 400 JSON body and anything else to a 500"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except LabError as e:
            logger.warning(f"Rejected request to {f.__name__}: {e.message}")
            return jsonify(e.to_dict()), 400
        except Exception as e:
            logger.exception(f"Unhandled error in {f.__name__}: {e}")
            return jsonify({'error': 'InternalError', 'message': 'Internal server error'}), 500
    return decorated_function
