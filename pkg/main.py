import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Any, Dict, Optional

from flask import Flask
from werkzeug.middleware.proxy_fix import ProxyFix

from cli import lab
from routes.lab import lab_bp
from services.experiment_runner import DEFAULT_SETTINGS

# Set up logging once for the process
logging.basicConfig(
    level=os.environ.get('SIMCACHE_LOG_LEVEL', 'INFO').upper(),
    format='%(asctime)s %(levelname)s %(name)s: %(message)s',
)
logger = logging.getLogger(__name__)


def create_app(test_config: Optional[Dict[str, Any]] = None) -> Flask:
    """Application factory: settings, blueprint and the `lab` CLI group."""
    app = Flask(__name__)
    app.wsgi_app = ProxyFix(app.wsgi_app, x_proto=1, x_host=1)

    # Exact-enumeration budgets and worker defaults
    app.config.from_mapping(DEFAULT_SETTINGS)
    settings_file = os.environ.get('SIMCACHE_SETTINGS')
    if settings_file:
        app.config.from_file(settings_file, load=tomllib.load, text=False)
    app.config.from_prefixed_env('SIMCACHE')
    if test_config:
        app.config.update(test_config)

    app.register_blueprint(lab_bp)
    app.cli.add_command(lab)

    budgets = {k: app.config[k] for k in DEFAULT_SETTINGS}
    logger.debug(f"simcache-lab app created with settings {budgets}")
    return app


app = create_app()

if __name__ == '__main__':
    logger.info("Starting simcache-lab API")
    app.run(host='0.0.0.0', port=5000, debug=True)
