import os
from flask import Flask, jsonify
from flasgger import Swagger
from marshmallow import ValidationError

from app.utils.errors import BevRegError

# Initialize extensions
swagger = Swagger()


def create_app(config_name=None, run_config=None):
    app = Flask(__name__)

    # Load configuration
    if config_name is None:
        config_name = os.getenv('BEVREG_ENV', 'desk')
    app.config.from_object(f'app.config.{config_name.capitalize()}Config')
    if run_config is not None:
        app.config['RUN_CONFIG'] = run_config
    app.logger.setLevel(app.config['LOG_LEVEL'].upper())

    # Initialize Swagger - using the config from app.config
    swagger.init_app(app)

    @app.errorhandler(BevRegError)
    def handle_pipeline_error(error):
        app.logger.warning(f"{type(error).__name__}: {error}")
        return jsonify(error.to_dict()), error.status_code

    @app.errorhandler(ValidationError)
    def handle_validation_error(error):
        return jsonify({'error': error.messages}), 400

    # Register blueprints
    from app.routes.main import main_bp
    from app.routes.registration import registration_bp

    app.register_blueprint(main_bp)
    app.register_blueprint(registration_bp, url_prefix='/api')

    return app
