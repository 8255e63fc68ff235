from flask import Blueprint, redirect, jsonify, current_app

main_bp = Blueprint('main', __name__)

@main_bp.route('/')
def index():
    """Redirect to the API docs page."""
    return redirect('/docs/')

@main_bp.route('/health')
def health():
    """Health check endpoint with the active preset."""
    run_config = current_app.config['RUN_CONFIG']
    return jsonify({
        "status": "healthy",
        "preset": current_app.config['BEVREG_ENV'],
        "grid": list(run_config.grid.resolution),
        "checkpoint": current_app.config['BEVREG_CHECKPOINT'] or None,
        "digest": run_config.digest().hex()
    }), 200
