# Import routes to make them available
from app.routes.main import main_bp
from app.routes.registration import registration_bp
