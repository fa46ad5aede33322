"""
Main Flask Application for the GP flow toolkit
Registers the command blueprints (sample-data, train-nf, fit-gp, eval,
export-traj, plot), the read-only run API and the JSON error handlers

Usage:
    python app.py train-nf --preset two_moons --output-dir runs/moons
    flask --app app fit-gp --output-dir runs/moons
"""

import logging
from datetime import datetime

from flask import Flask, jsonify
from flask.cli import FlaskGroup
from flask.logging import default_handler

from config import RUNS_DIR, SCHEMA_VERSION

# Import all module blueprints
from modules.evaluation import evaluation_bp
from modules.gp_fitting import gp_fitting_bp
from modules.nf_training import nf_training_bp
from modules.plotting import plotting_bp

VERSION = '1.0.0'


def configure_logging(app):
    """Library loggers share the app handler and level"""
    level = app.config['LOG_LEVEL']
    if isinstance(level, str):
        level = level.upper()
    app.logger.setLevel(level)
    for name in ('core', 'utils'):
        library_logger = logging.getLogger(name)
        library_logger.setLevel(level)
        if default_handler not in library_logger.handlers:
            library_logger.addHandler(default_handler)


def create_app(test_config=None):
    """
    Application factory

    Settings come from defaults, then GPFLOW_-prefixed environment variables
    (GPFLOW_RUNS_DIR, GPFLOW_LOG_LEVEL, GPFLOW_PROGRESS), then test_config.
    """
    app = Flask(__name__)
    app.config.from_mapping(
        RUNS_DIR=RUNS_DIR,
        LOG_LEVEL='INFO',
        PROGRESS=False,
    )
    app.config.from_prefixed_env('GPFLOW')
    if test_config:
        app.config.update(test_config)
    app.json.sort_keys = False
    configure_logging(app)

    # Register all blueprints
    app.register_blueprint(nf_training_bp)
    app.register_blueprint(gp_fitting_bp)
    app.register_blueprint(evaluation_bp)
    app.register_blueprint(plotting_bp)

    @app.route('/', methods=['GET'])
    def home():
        """Root endpoint to verify the API is running"""
        return jsonify({
            'status': 'GP flow API is running!',
            'version': VERSION,
            'timestamp': datetime.now().isoformat(),
            'endpoints': {
                'health': '/api/health',
                'runs': [
                    '/api/runs',
                    '/api/runs/<name>/report',
                    '/api/runs/<name>/manifest',
                ],
            },
            'commands': sorted(app.cli.commands),
        })

    @app.route('/api/health', methods=['GET'])
    def health_check():
        """Health check endpoint"""
        return jsonify({
            'status': 'healthy',
            'version': VERSION,
            'schema_version': SCHEMA_VERSION,
            'runs_dir': app.config['RUNS_DIR'],
            'timestamp': datetime.now().isoformat(),
        })

    # Error handlers
    @app.errorhandler(404)
    def not_found(error):
        """Handle 404 errors"""
        return jsonify({
            'success': False,
            'error': 'Endpoint not found',
            'message': 'The requested endpoint does not exist'
        }), 404

    @app.errorhandler(405)
    def method_not_allowed(error):
        """Handle 405 errors"""
        return jsonify({
            'success': False,
            'error': 'Method not allowed',
            'message': 'The HTTP method is not allowed for this endpoint'
        }), 405

    @app.errorhandler(500)
    def internal_error(error):
        """Handle 500 errors"""
        return jsonify({
            'success': False,
            'error': 'Internal server error',
            'message': 'An unexpected error occurred'
        }), 500

    return app


cli = FlaskGroup(create_app=create_app, help='GP flow toolkit: train, fit, evaluate and plot runs.')


# Run the CLI
if __name__ == '__main__':
    cli()
